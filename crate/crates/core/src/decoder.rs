//! The shared-weight decoder layer and the full stacked forward pass.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{DecoderConfig, MixSource};
use crate::error::{Error, Result};
use crate::kernels::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::nn::{normal_tensor, Linear, Mlp2};
use crate::queries::{init_boxes, update, QueryBox, QuerySet, QueryUpdateHeads, UpdateLog};
use crate::sampling::sample_all;
use crate::simworld::{derive_seed, SceneData, NUM_CLASSES};
use crate::ssm::{ssm_scan, FeatureBundle, MaskConfig, SsmParams};

/// Prior probability behind the initial class bias.
pub const CLASS_PRIOR: f64 = 0.01;

/// Generators and normalizations of the adaptive mixing step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MixParams {
    /// Query → `D×D` channel weights.
    pub channel_gen: Linear,
    /// Query → `P×P` point weights.
    pub point_gen: Linear,
    pub channel_gain: ParamId,
    pub channel_bias: ParamId,
    pub point_gain: ParamId,
    pub point_bias: ParamId,
    /// Flattened `D·P` mix → `D`.
    pub out: Linear,
    pub dim: usize,
    pub points: usize,
}

impl MixParams {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, points: usize, rng: &mut ChaCha8Rng) -> Self {
        let channel_gen = Linear::new(store, &format!("{name}.channel_gen"), dim, dim * dim, 0.1, rng);
        store.value_mut(channel_gen.bias).data_mut().copy_from_slice(Tensor::eye(dim).data());
        let point_gen = Linear::new(store, &format!("{name}.point_gen"), dim, points * points, 0.1, rng);
        store.value_mut(point_gen.bias).data_mut().copy_from_slice(Tensor::eye(points).data());
        let block = dim * points;
        Self {
            channel_gen,
            point_gen,
            channel_gain: store.add(format!("{name}.channel_ln.gain"), Tensor::full(&[block], 1.0)),
            channel_bias: store.add(format!("{name}.channel_ln.bias"), Tensor::zeros(&[block])),
            point_gain: store.add(format!("{name}.point_ln.gain"), Tensor::full(&[block], 1.0)),
            point_bias: store.add(format!("{name}.point_ln.bias"), Tensor::zeros(&[block])),
            out: Linear::new(store, &format!("{name}.out"), dim * points, dim, 0.5, rng),
            dim,
            points,
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = Vec::new();
        v.extend(self.channel_gen.params());
        v.extend(self.point_gen.params());
        v.extend([self.channel_gain, self.channel_bias, self.point_gain, self.point_bias]);
        v.extend(self.out.params());
        v
    }
}

/// `M_c = ReLU(LN(S·W_c))` per query, with `W_c` generated from `q`.
/// `s` holds `P` rows per query (`[n·P × D]` or `[n × P × D]`); the result
/// is `[n × P × D]`. Both mixing norms run over a query's whole `P × D`
/// block, so a signal shared by every point survives them.
pub fn channel_mix<'t>(g: &'t Graph<'_>, mix: &MixParams, q: &Var<'t>, s: &Var<'t>) -> Result<Var<'t>> {
    let (d, p) = (mix.dim, mix.points);
    let n = q.shape()[0];
    if q.shape() != [n, d] || s.value().len() != n * p * d {
        return Err(Error::contract(format!(
            "channel_mix: queries {:?} and state {:?} do not fit {p} points of width {d}",
            q.shape(),
            s.shape()
        )));
    }
    let wc = mix.channel_gen.forward(g, q)?.reshape(&[n, d, d])?;
    s.reshape(&[n, p, d])?
        .bmm(&wc)?
        .reshape(&[n, p * d])?
        .layer_norm(&g.param(mix.channel_gain), &g.param(mix.channel_bias))?
        .relu()
        .reshape(&[n, p, d])
}

/// `M_p = ReLU(LN(M_cᵀ·W_p))` per query: `[n × D × P]`.
pub fn point_mix<'t>(g: &'t Graph<'_>, mix: &MixParams, mc: &Var<'t>, q: &Var<'t>) -> Result<Var<'t>> {
    let (d, p) = (mix.dim, mix.points);
    let n = q.shape()[0];
    if mc.shape() != [n, p, d] {
        return Err(Error::contract(format!(
            "point_mix: channel mix {:?} is not [{n}, {p}, {d}]",
            mc.shape()
        )));
    }
    let wp = mix.point_gen.forward(g, q)?.reshape(&[n, p, p])?;
    mc.transpose()
        .bmm(&wp)?
        .reshape(&[n, d * p])?
        .layer_norm(&g.param(mix.point_gain), &g.param(mix.point_bias))?
        .relu()
        .reshape(&[n, d, p])
}

/// Flattens `M_p` per query, projects to `D` and adds the query features.
pub fn mix_residual<'t>(g: &'t Graph<'_>, mix: &MixParams, mp: &Var<'t>, q: &Var<'t>) -> Result<Var<'t>> {
    let n = q.shape()[0];
    let flat = mp.reshape(&[n, mix.dim * mix.points])?;
    mix.out.forward(g, &flat)?.add(q)
}

/// Classification and box-regression heads.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PredictionHeads {
    pub class: Mlp2,
    pub boxes: Mlp2,
}

impl PredictionHeads {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, classes: usize, rng: &mut ChaCha8Rng) -> Self {
        let class = Mlp2::new(store, &format!("{name}.class"), [dim, dim, classes], 0.1, rng);
        let prior = (CLASS_PRIOR / (1.0 - CLASS_PRIOR)).ln();
        class.out.fill_bias(store, prior);
        Self {
            class,
            boxes: Mlp2::new(store, &format!("{name}.box"), [dim, dim, QueryBox::PARAMS], 0.1, rng),
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.class.params().into_iter().chain(self.boxes.params()).collect()
    }
}

/// Class logits `[n × classes]` and additive box deltas `[n × 9]`.
pub fn predict_heads<'t>(g: &'t Graph<'_>, heads: &PredictionHeads, q: &Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
    Ok((heads.class.forward(g, q)?, heads.boxes.forward(g, q)?))
}

/// Box parameters as a `[n × 9]` matrix.
pub fn box_matrix(boxes: &[QueryBox]) -> Tensor {
    Tensor::from_parts(
        vec![boxes.len(), QueryBox::PARAMS],
        boxes.iter().flat_map(|b| b.to_array()).collect(),
    )
}

/// Box encodings fed to the positional MLP, `[n × 10]`.
pub fn box_encoding(boxes: &[QueryBox]) -> Tensor {
    Tensor::from_parts(
        vec![boxes.len(), QueryBox::ENCODING],
        boxes.iter().flat_map(|b| b.encode()).collect(),
    )
}

/// Everything one decoder layer owns. A single instance is reused by every
/// layer of the stack.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub pos: Mlp2,
    pub offsets: Linear,
    pub blocks: Vec<SsmParams>,
    /// Per block, `C → D`; only present when mixing reads enhanced features.
    pub enhanced_proj: Vec<Linear>,
    pub mix: MixParams,
    pub heads: PredictionHeads,
    pub update: QueryUpdateHeads,
}

/// Model weights plus the fixed initial pillar boxes.
#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: DecoderConfig,
    pub channels: usize,
    pub store: ParamStore,
    pub layer: LayerParams,
    /// Initial query features, `[queries × D]`.
    pub query_features: ParamId,
    pub init_boxes: Vec<QueryBox>,
}

/// Per-forward switches.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ForwardOptions {
    /// Masks the SSM inputs when set; every layer and block gets its own
    /// seed derived from this one.
    pub mask_seed: Option<u64>,
    /// Replaces the input boxes of each layer. Boxes move between layers
    /// without carrying gradient; pinning them lets a finite-difference probe
    /// see the same function.
    pub pinned_boxes: Option<Vec<Vec<QueryBox>>>,
}

impl ForwardOptions {
    pub fn masked(seed: u64) -> Self {
        Self {
            mask_seed: Some(seed),
            pinned_boxes: None,
        }
    }
}

/// What one layer produced, before its query update.
pub struct LayerOutput<'t> {
    pub input_boxes: Vec<QueryBox>,
    pub logits: Var<'t>,
    /// Predicted boxes `[n × 9]`: the layer's input boxes plus the deltas.
    pub boxes: Var<'t>,
    /// One bundle per transform block.
    pub bundles: Vec<FeatureBundle<'t>>,
    pub log: UpdateLog,
}

pub struct ForwardOutput<'t> {
    pub layers: Vec<LayerOutput<'t>>,
    pub final_set: QuerySet<'t>,
}

impl ForwardOutput<'_> {
    pub fn trajectory(&self) -> Vec<UpdateLog> {
        self.layers.iter().map(|l| l.log).collect()
    }

    /// Detections of the last layer.
    pub fn detections(&self) -> Vec<Detection> {
        self.layers.last().map(|l| detections(&l.logits, &l.boxes)).unwrap_or_default()
    }
}

/// One decoded box with its best class.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub class: usize,
    pub score: f64,
    pub bbox: QueryBox,
}

/// Best class per query from logits and predicted boxes.
pub fn detections(logits: &Var<'_>, boxes: &Var<'_>) -> Vec<Detection> {
    let (l, b) = (logits.value(), boxes.value());
    (0..l.rows())
        .map(|i| {
            let (class, &logit) = l
                .row(i)
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
                .expect("at least one class");
            let mut arr = [0.0; QueryBox::PARAMS];
            arr.copy_from_slice(b.row(i));
            Detection {
                class,
                score: crate::kernels::ops::sigmoid(logit),
                bbox: QueryBox::from_array([0.0; 9]).apply_deltas(&arr),
            }
        })
        .collect()
}

impl Model {
    /// Builds weights for maps with `channels` channels.
    pub fn new(cfg: &DecoderConfig, channels: usize) -> Result<Self> {
        cfg.validate()?;
        if cfg.classes != NUM_CLASSES {
            return Err(Error::Config(format!(
                "decoder.classes is {} but the world has {NUM_CLASSES} classes",
                cfg.classes
            )));
        }
        if channels == 0 {
            return Err(Error::Config("feature maps need at least one channel".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let (d, p) = (cfg.dim, cfg.points);
        let pos = Mlp2::new(&mut store, "pos", [QueryBox::ENCODING, d, d], 1.0, &mut rng);
        let offsets = Linear::new(&mut store, "offsets", d, 3 * p, 0.1, &mut rng);
        store.value_mut(offsets.bias).data_mut().copy_from_slice(&initial_offsets(p));
        let blocks: Vec<SsmParams> = cfg
            .transforms
            .iter()
            .map(|&kind| {
                SsmParams::new(
                    &mut store,
                    &format!("ssm.{}", kind.name()),
                    kind,
                    channels,
                    cfg.state_dim,
                    d,
                    &mut rng,
                )
            })
            .collect();
        let enhanced_proj = match cfg.mix_source {
            MixSource::State => Vec::new(),
            MixSource::Enhanced => cfg
                .transforms
                .iter()
                .map(|k| Linear::new(&mut store, &format!("enhanced.{}", k.name()), channels, d, 1.0, &mut rng))
                .collect(),
        };
        let mix = MixParams::new(&mut store, "mix", d, p, &mut rng);
        let heads = PredictionHeads::new(&mut store, "head", d, cfg.classes, &mut rng);
        let update = QueryUpdateHeads::new(&mut store, "update", d, cfg.heads, &mut rng);
        let query_features = store.add(
            "query.features",
            normal_tensor(&[cfg.queries, d], cfg.init.feature_std, &mut rng),
        );
        Ok(Self {
            cfg: cfg.clone(),
            channels,
            store,
            layer: LayerParams {
                pos,
                offsets,
                blocks,
                enhanced_proj,
                mix,
                heads,
                update,
            },
            query_features,
            init_boxes: init_boxes(cfg.queries, &cfg.init, cfg.seed),
        })
    }

    pub fn param_count(&self) -> usize {
        self.store.numel()
    }

    /// Runs the full stack on one scene.
    pub fn forward<'g>(&self, g: &'g Graph<'_>, scene: &SceneData, opts: &ForwardOptions) -> Result<ForwardOutput<'g>> {
        if scene.maps.channels() != self.channels {
            return Err(Error::contract(format!(
                "model expects {} feature channels, scene has {}",
                self.channels,
                scene.maps.channels()
            )));
        }
        let mut qset = QuerySet {
            boxes: self.init_boxes.clone(),
            features: g.param(self.query_features),
            floor: self.cfg.floor.min(self.cfg.queries),
            layer: 0,
        };
        let mut layers = Vec::with_capacity(self.cfg.layers);
        for l in 0..self.cfg.layers {
            let mask = match opts.mask_seed {
                Some(seed) if self.cfg.mask_every_layer || l == 0 => Some(derive_seed(seed, l as u64)),
                _ => None,
            };
            if let Some(pinned) = &opts.pinned_boxes {
                let b = pinned.get(l).ok_or_else(|| Error::contract(format!("no pinned boxes for layer {l}")))?;
                if b.len() != qset.len() {
                    return Err(Error::contract(format!(
                        "layer {l}: {} pinned boxes for {} queries",
                        b.len(),
                        qset.len()
                    )));
                }
                qset.boxes = b.clone();
            }
            let (out, next) = self.layer_forward(g, scene, &qset, mask)?;
            layers.push(out);
            qset = next;
        }
        Ok(ForwardOutput {
            layers,
            final_set: qset,
        })
    }

    /// One shared-weight layer: sample, scan, mix, predict, update.
    pub fn layer_forward<'g>(
        &self,
        g: &'g Graph<'_>,
        scene: &SceneData,
        qset: &QuerySet<'g>,
        mask_seed: Option<u64>,
    ) -> Result<(LayerOutput<'g>, QuerySet<'g>)> {
        let lp = &self.layer;
        let n = qset.len();
        let pe = lp.pos.forward(g, &g.constant(box_encoding(&qset.boxes)))?;
        let qp = qset.features.add(&pe)?;
        let offsets = lp.offsets.forward(g, &qp)?;
        let samples = sample_all(
            &qset.boxes,
            &offsets,
            &scene.scene.rig,
            &scene.scene.ego_poses,
            &scene.maps,
            scene.scene.frame_dt,
        )?;

        let mut bundles = Vec::with_capacity(lp.blocks.len());
        let mut s: Option<Var<'g>> = None;
        for (bi, block) in lp.blocks.iter().enumerate() {
            let w = block.bind(g);
            let embed = g.param(block.mask_embed);
            let mask = mask_seed.map(|seed| {
                (
                    MaskConfig {
                        ratio: self.cfg.mask_ratio,
                        seed: derive_seed(seed, bi as u64),
                    },
                    &embed,
                )
            });
            let (bundle, state) = ssm_scan(&w, &samples, block.kind, mask, qset.layer)?;
            let contrib = match self.cfg.mix_source {
                MixSource::State => state.h.matmul(&g.param(block.state_proj))?,
                MixSource::Enhanced => lp.enhanced_proj[bi].forward(g, bundle.enhanced.last().unwrap())?,
            };
            s = Some(match s {
                None => contrib,
                Some(acc) => acc.add(&contrib)?,
            });
            bundles.push(bundle);
        }
        let s = s.ok_or_else(|| Error::Config("decoder needs at least one transform".into()))?;

        let mc = channel_mix(g, &lp.mix, &qp, &s)?;
        let mp = point_mix(g, &lp.mix, &mc, &qp)?;
        let features = mix_residual(g, &lp.mix, &mp, &qset.features)?;
        let (logits, deltas) = predict_heads(g, &lp.heads, &features.add(&pe)?)?;
        let boxes = g.constant(box_matrix(&qset.boxes)).add(&deltas)?;

        let moved: Vec<QueryBox> = (0..n)
            .map(|i| qset.boxes[i].apply_deltas(deltas.value().row(i)))
            .collect();
        let mixed = QuerySet {
            boxes: moved,
            features,
            floor: qset.floor,
            layer: qset.layer,
        };
        let (next, log) = update(g, &lp.update, &mixed, &s, Some(&pe), self.cfg.dynamic)?;
        Ok((
            LayerOutput {
                input_boxes: qset.boxes.clone(),
                logits,
                boxes,
                bundles,
                log,
            },
            next,
        ))
    }
}

/// Offsets in box units spread over a small cross around the center.
fn initial_offsets(points: usize) -> Vec<f64> {
    let mut v = Vec::with_capacity(3 * points);
    for i in 0..points {
        let a = std::f64::consts::TAU * i as f64 / points as f64;
        let r = if points == 1 { 0.0 } else { 0.3 };
        v.extend([r * a.cos(), r * a.sin(), 0.0]);
    }
    v
}
