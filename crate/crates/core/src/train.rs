//! Training loop: scene-parallel gradients, Adam with cosine step-size decay,
//! checkpoints that carry the optimizer state, and a loss CSV.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, TrainConfig};
use crate::decoder::{ForwardOptions, Model};
use crate::error::{Error, Result};
use crate::kernels::archive::{pack, read_bytes, read_json, unpack, write_bytes, write_json, TensorEntry};
use crate::kernels::{Graph, ParamStore, Tensor};
use crate::par;
use crate::simworld::{derive_seed, SceneData};
use crate::supervision::{total_loss, LossSummary};

pub const CHECKPOINT_FORMAT: &str = "statequery-checkpoint-v1";
pub const CHECKPOINT_MANIFEST: &str = "checkpoint.json";
pub const CHECKPOINT_BLOB: &str = "checkpoint.bin";
pub const LOSS_CSV: &str = "loss.csv";
pub const NAN_DUMP: &str = "nan_dump.json";

/// Step size at `step` of `cfg.steps`: cosine from `lr` down to
/// `lr·lr_min_ratio`.
pub fn cosine_lr(cfg: &TrainConfig, step: usize) -> f64 {
    let lo = cfg.lr * cfg.lr_min_ratio;
    let frac = (step as f64 / cfg.steps.max(1) as f64).min(1.0);
    lo + 0.5 * (cfg.lr - lo) * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// First and second moment estimates, one pair per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.ids().map(|id| Tensor::zeros(store.value(id).shape())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    /// One bias-corrected update with step size `lr`.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor], lr: f64, cfg: &TrainConfig) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        for (i, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            for (mj, gj) in m.iter_mut().zip(g) {
                *mj = cfg.beta1 * *mj + (1.0 - cfg.beta1) * gj;
            }
            let v = self.v[i].data_mut();
            for (vj, gj) in v.iter_mut().zip(g) {
                *vj = cfg.beta2 * *vj + (1.0 - cfg.beta2) * gj * gj;
            }
            let (m, v) = (self.m[i].data(), self.v[i].data());
            for (j, p) in store.value_mut(id).data_mut().iter_mut().enumerate() {
                *p -= lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + cfg.eps);
            }
        }
    }
}

/// Scenes drawn for `step`: a fixed-seed sample without replacement.
pub fn batch_indices(seed: u64, step: usize, n_scenes: usize, batch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, step as u64));
    let mut idx = rand::seq::index::sample(&mut rng, n_scenes, batch.min(n_scenes)).into_vec();
    idx.sort_unstable();
    idx
}

/// Loss and gradients of one scene. Gradients come back dense, one tensor
/// per parameter in store order.
pub fn scene_gradients(
    model: &Model,
    cfg: &RunConfig,
    scene: &SceneData,
    mask_seed: Option<u64>,
) -> Result<(Vec<Tensor>, LossSummary)> {
    let g = Graph::new(&model.store);
    let out = model.forward(
        &g,
        scene,
        &ForwardOptions {
            mask_seed,
            pinned_boxes: None,
        },
    )?;
    let mut dense: Vec<Tensor> = model
        .store
        .ids()
        .map(|id| Tensor::zeros(model.store.value(id).shape()))
        .collect();
    // Matching rejects non-finite costs; report the blow-up as a loss instead.
    if out
        .layers
        .iter()
        .any(|l| !l.logits.value().all_finite() || !l.boxes.value().all_finite())
    {
        let nan = LossSummary {
            total: f64::NAN,
            ..LossSummary::default()
        };
        return Ok((dense, nan));
    }
    let loss = total_loss(&out, &scene.scene.ground_truth(), &cfg.loss)?;
    let summary = loss.summary();
    if summary.total.is_finite() {
        let grads = g.backward(&loss.total);
        for (id, t) in g.param_grads(&grads) {
            dense[id.index()] = t;
        }
    }
    Ok((dense, summary))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: usize,
    pub lr: f64,
    /// Mean over the batch.
    pub loss: LossSummary,
    pub grad_norm: f64,
}

#[derive(Serialize)]
struct NanDump<'a> {
    step: usize,
    lr: f64,
    batch: &'a [usize],
    losses: &'a [LossSummary],
}

/// Model, optimizer and position in the schedule.
pub struct Trainer {
    pub cfg: RunConfig,
    pub model: Model,
    pub adam: Adam,
    pub step: usize,
    /// Runs scenes one after another instead of on the pool. Results are
    /// identical either way; this only pins the execution order.
    pub deterministic: bool,
    /// Where a diagnostic dump goes if the loss stops being finite.
    pub dump_dir: Option<PathBuf>,
}

impl Trainer {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let model = Model::new(&cfg.decoder, cfg.world.channels)?;
        let adam = Adam::new(&model.store);
        Ok(Self {
            cfg: cfg.clone(),
            model,
            adam,
            step: 0,
            deterministic: false,
            dump_dir: None,
        })
    }

    /// One optimizer step on a batch drawn from `data`.
    pub fn train_step(&mut self, data: &[SceneData]) -> Result<StepReport> {
        if data.is_empty() {
            return Err(Error::contract("cannot train on an empty dataset"));
        }
        let tc = &self.cfg.train;
        let batch = batch_indices(tc.seed, self.step, data.len(), tc.batch_size);
        let step_seed = derive_seed(tc.seed ^ 0x6D61_736B, self.step as u64);
        let (model, cfg) = (&self.model, &self.cfg);
        let job = |k: usize| scene_gradients(model, cfg, &data[batch[k]], Some(derive_seed(step_seed, batch[k] as u64)));
        let results = if self.deterministic {
            par::map_range_seq(batch.len(), job)
        } else {
            par::map_range(batch.len(), job)
        };
        let mut grads: Vec<Tensor> = self.model.store.ids().map(|id| Tensor::zeros(self.model.store.value(id).shape())).collect();
        let mut losses = Vec::with_capacity(batch.len());
        let mut mean = LossSummary::default();
        for r in results {
            let (g, l) = r?;
            for (acc, gi) in grads.iter_mut().zip(&g) {
                acc.add_assign(gi);
            }
            mean.add(&l);
            losses.push(l);
        }
        let inv = 1.0 / batch.len() as f64;
        let mean = mean.scaled(inv);
        let lr = cosine_lr(tc, self.step);
        if !mean.total.is_finite() || grads.iter().any(|g| !g.all_finite()) {
            if let Some(dir) = &self.dump_dir {
                let dump = NanDump {
                    step: self.step,
                    lr,
                    batch: &batch,
                    losses: &losses,
                };
                write_json(&dir.join(NAN_DUMP), &dump)?;
            }
            return Err(Error::NonFinite {
                step: self.step,
                detail: format!("batch {batch:?}, per-scene losses {losses:?}"),
            });
        }
        let mut sq = 0.0;
        for g in &mut grads {
            g.scale_in_place(inv);
            sq += g.data().iter().map(|v| v * v).sum::<f64>();
        }
        let grad_norm = sq.sqrt();
        if tc.grad_clip > 0.0 && grad_norm > tc.grad_clip {
            let s = tc.grad_clip / grad_norm;
            for g in &mut grads {
                g.scale_in_place(s);
            }
        }
        let tc = self.cfg.train.clone();
        self.adam.step(&mut self.model.store, &grads, lr, &tc);
        let report = StepReport {
            step: self.step,
            lr,
            loss: mean,
            grad_norm,
        };
        self.step += 1;
        Ok(report)
    }

    /// Writes the config, parameters and optimizer moments to `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let store = &self.model.store;
        let mut named: Vec<(String, &Tensor)> = Vec::new();
        for (i, id) in store.ids().enumerate() {
            let name = store.name(id);
            named.push((format!("param/{name}"), store.value(id)));
            named.push((format!("adam_m/{name}"), &self.adam.m[i]));
            named.push((format!("adam_v/{name}"), &self.adam.v[i]));
        }
        let (tensors, blob) = pack(named.iter().map(|(n, t)| (n.as_str(), *t)));
        let manifest = CheckpointManifest {
            format: CHECKPOINT_FORMAT.to_string(),
            step: self.step,
            adam_t: self.adam.t,
            config: self.cfg.clone(),
            blob: CHECKPOINT_BLOB.to_string(),
            tensors,
        };
        write_bytes(&dir.join(CHECKPOINT_BLOB), &blob)?;
        write_json(&dir.join(CHECKPOINT_MANIFEST), &manifest)
    }

    /// Restores a trainer saved with [`Trainer::save`].
    pub fn load(dir: &Path) -> Result<Self> {
        let (manifest, tensors) = read_checkpoint(dir)?;
        let mut t = Trainer::new(&manifest.config)?;
        t.restore(&manifest, &tensors)?;
        Ok(t)
    }

    fn restore(&mut self, manifest: &CheckpointManifest, tensors: &[(String, Tensor)]) -> Result<()> {
        let pick = |prefix: &str| -> Vec<(String, Tensor)> {
            tensors
                .iter()
                .filter_map(|(n, t)| n.strip_prefix(prefix).map(|s| (s.to_string(), t.clone())))
                .collect()
        };
        self.model.store.load_values(&pick("param/"))?;
        for (prefix, slot) in [("adam_m/", &mut self.adam.m), ("adam_v/", &mut self.adam.v)] {
            let mut moments = self.model.store.clone();
            moments.load_values(&pick(prefix))?;
            *slot = moments.ids().map(|id| moments.value(id).clone()).collect();
        }
        self.adam.t = manifest.adam_t;
        self.step = manifest.step;
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format: String,
    pub step: usize,
    pub adam_t: u64,
    pub config: RunConfig,
    pub blob: String,
    pub tensors: Vec<TensorEntry>,
}

fn read_checkpoint(dir: &Path) -> Result<(CheckpointManifest, Vec<(String, Tensor)>)> {
    let manifest: CheckpointManifest = read_json(&dir.join(CHECKPOINT_MANIFEST))?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(Error::format(
            "format",
            format!("expected {CHECKPOINT_FORMAT}, found {}", manifest.format),
        ));
    }
    manifest.config.validate()?;
    let blob = read_bytes(&dir.join(&manifest.blob))?;
    let tensors = unpack(&manifest.tensors, &blob)?;
    Ok((manifest, tensors))
}

/// Loads only the model, built from `cfg` when given (so a mismatching
/// config is reported by parameter name) or from the stored config.
pub fn load_model(dir: &Path, cfg: Option<&RunConfig>) -> Result<(RunConfig, Model)> {
    let (manifest, tensors) = read_checkpoint(dir)?;
    let cfg = cfg.cloned().unwrap_or(manifest.config);
    let mut model = Model::new(&cfg.decoder, cfg.world.channels)?;
    let params: Vec<(String, Tensor)> = tensors
        .into_iter()
        .filter_map(|(n, t)| n.strip_prefix("param/").map(|s| (s.to_string(), t)))
        .collect();
    model.store.load_values(&params)?;
    let expected: usize = model.store.len();
    if params.len() != expected {
        return Err(Error::CheckpointMismatch(format!(
            "checkpoint holds {} parameters, model has {expected}",
            params.len()
        )));
    }
    Ok((cfg, model))
}

/// Knobs of a training run beyond the config.
#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    pub out_dir: Option<PathBuf>,
    pub resume: Option<PathBuf>,
    pub deterministic: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: usize,
    pub first: LossSummary,
    pub last: LossSummary,
    pub history: Vec<StepReport>,
}

/// Trains until `cfg.train.steps`, checkpointing and logging under
/// `opts.out_dir` when given.
pub fn train(cfg: &RunConfig, data: &[SceneData], opts: &TrainOptions) -> Result<(Trainer, TrainSummary)> {
    let mut trainer = match &opts.resume {
        Some(dir) => {
            let mut t = Trainer::load(dir)?;
            t.cfg.train.steps = cfg.train.steps;
            t
        }
        None => Trainer::new(cfg)?,
    };
    trainer.deterministic = opts.deterministic;
    trainer.dump_dir = opts.out_dir.clone();
    let mut csv = match &opts.out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join(LOSS_CSV);
            let fresh = opts.resume.is_none() || !path.exists();
            let mut f = OpenOptions::new()
                .create(true)
                .append(!fresh)
                .write(true)
                .truncate(fresh)
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            if fresh {
                writeln!(f, "step,lr,cls,box,recon,future,total").map_err(|e| Error::io(&path, e))?;
            }
            Some((f, path))
        }
        None => None,
    };
    let mut history = Vec::new();
    while trainer.step < trainer.cfg.train.steps {
        let r = trainer.train_step(data)?;
        if let Some((f, path)) = &mut csv {
            let l = &r.loss;
            writeln!(
                f,
                "{},{:e},{},{},{},{},{}",
                r.step, r.lr, l.cls, l.boxes, l.recon, l.future, l.total
            )
            .map_err(|e| Error::io(path.as_path(), e))?;
        }
        let tc = &trainer.cfg.train;
        if tc.log_every > 0 && r.step % tc.log_every == 0 {
            log::info!(
                "step {} lr {:.2e} loss {:.5} (cls {:.4} box {:.4} rec {:.4} fut {:.4}) |g| {:.3}",
                r.step,
                r.lr,
                r.loss.total,
                r.loss.cls,
                r.loss.boxes,
                r.loss.recon,
                r.loss.future,
                r.grad_norm
            );
        }
        if let Some(dir) = &opts.out_dir {
            if tc.checkpoint_every > 0 && trainer.step % tc.checkpoint_every == 0 {
                trainer.save(&dir.join(format!("checkpoint_{:06}", trainer.step)))?;
            }
        }
        history.push(r);
    }
    if let Some(dir) = &opts.out_dir {
        trainer.save(&dir.join("checkpoint"))?;
    }
    let summary = TrainSummary {
        steps: history.len(),
        first: history.first().map(|r| r.loss).unwrap_or_default(),
        last: history.last().map(|r| r.loss).unwrap_or_default(),
        history,
    };
    Ok((trainer, summary))
}
