use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use statequery::config::RunConfig;
use statequery::decoder::Model;
use statequery::evalmetrics::{bench_compare_model, evaluate_model, BenchResult};
use statequery::par;
use statequery::simworld::{generate_dataset, Dataset, SceneData};
use statequery::ssm::TransformKind;
use statequery::train::{load_model, train, TrainOptions};
use statequery::verify::{self, VerifyOptions};

#[derive(Parser)]
#[command(name = "statequery", version, about = "State-space query decoder on a synthetic multi-camera world")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset to disk.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Overwrite a non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Train a model; writes checkpoints and loss.csv under --out.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Dataset directory; generated from the config when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Checkpoint directory to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Run scenes sequentially for bitwise-reproducible checkpoints.
        #[arg(long)]
        deterministic: bool,
        #[arg(long)]
        force: bool,
    },
    /// Score a checkpoint; writes report.json under --out.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Time dynamic against static query sets; writes bench.csv under --out.
    Bench {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Trained weights; random weights from the config when omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 3)]
        warmup: usize,
        #[arg(long, default_value_t = 50)]
        iters: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the oracle suite; exits nonzero on any failure.
    Verify {
        /// Random forwards in the query-bound check.
        #[arg(long, default_value_t = 100)]
        forwards: usize,
        /// Include a check with a deliberately wrong gradient.
        #[arg(long, hide = true)]
        corrupt_gradient: bool,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Preset {
    Desk,
    Default,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Transforms {
    Identity,
    Fft,
    Both,
}

#[derive(Args, Clone, Debug, Default)]
struct ConfigArgs {
    /// TOML run config; unknown keys are rejected.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in config used when --config is absent.
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    scenes: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    /// Drop the reconstruction and prediction losses.
    #[arg(long)]
    no_aux: bool,
    /// Keep the query set fixed between layers.
    #[arg(long)]
    no_dynamic: bool,
    #[arg(long, value_enum)]
    transform: Option<Transforms>,
    #[arg(long)]
    floor: Option<usize>,
}

impl ConfigArgs {
    fn base(&self) -> Result<RunConfig> {
        Ok(match (&self.config, self.preset) {
            (Some(p), _) => RunConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
            (None, Some(Preset::Default)) => RunConfig::default(),
            (None, _) => RunConfig::desk(),
        })
    }

    fn resolve(&self) -> Result<RunConfig> {
        let mut c = self.base()?;
        self.apply(&mut c);
        c.validate()?;
        Ok(c)
    }

    fn apply(&self, c: &mut RunConfig) {
        if let Some(s) = self.seed {
            c.reseed(s);
        }
        if let Some(n) = self.scenes {
            c.scenes = n;
        }
        if let Some(n) = self.steps {
            c.train.steps = n;
        }
        if self.no_aux {
            c.loss.aux = false;
        }
        if self.no_dynamic {
            c.decoder.dynamic = false;
        }
        if let Some(t) = self.transform {
            c.decoder.transforms = match t {
                Transforms::Identity => vec![TransformKind::Identity],
                Transforms::Fft => vec![TransformKind::Fft],
                Transforms::Both => vec![TransformKind::Identity, TransformKind::Fft],
            };
        }
        if let Some(f) = self.floor {
            c.decoder.floor = f;
        }
    }
}

fn prepare_out(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir)?.next().is_some();
        if non_empty && !force {
            bail!("output directory {} is not empty; pass --force to overwrite", dir.display());
        }
        if non_empty {
            fs::remove_dir_all(dir)?;
        }
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

fn load_scenes(data: Option<&Path>, cfg: &RunConfig) -> Result<Vec<SceneData>> {
    let scenes = match data {
        Some(dir) => {
            let ds = Dataset::load(dir).with_context(|| format!("loading dataset {}", dir.display()))?;
            if ds.world.channels != cfg.world.channels {
                bail!(
                    "dataset has {} feature channels, config expects {}",
                    ds.world.channels,
                    cfg.world.channels
                );
            }
            ds.scenes
        }
        None => generate_dataset(&cfg.world, cfg.seed, cfg.scenes).scenes,
    };
    Ok(scenes)
}

fn cmd_gen_data(cfg: &RunConfig, out: &Path, force: bool) -> Result<()> {
    prepare_out(out, force)?;
    let ds = generate_dataset(&cfg.world, cfg.seed, cfg.scenes);
    ds.save(out)?;
    let objects: usize = ds.scenes.iter().map(|s| s.scene.objects.len()).sum();
    println!(
        "wrote {} scenes ({objects} objects, {} frames x {} cameras) to {}",
        ds.len(),
        cfg.world.frames,
        cfg.world.cameras,
        out.display()
    );
    Ok(())
}

fn cmd_train(
    cfg: &ConfigArgs,
    data: Option<&Path>,
    out: &Path,
    resume: Option<&Path>,
    deterministic: bool,
    force: bool,
) -> Result<()> {
    let run = match resume {
        // The stored config wins; only explicit overrides are layered on.
        Some(dir) if cfg.config.is_none() => {
            let (mut c, _) = load_model(dir, None)?;
            cfg.apply(&mut c);
            c.validate()?;
            c
        }
        _ => cfg.resolve()?,
    };
    if resume.is_none() {
        prepare_out(out, force)?;
    }
    fs::create_dir_all(out)?;
    run.save(&out.join("config.toml"))?;
    let scenes = load_scenes(data, &run)?;
    if scenes.is_empty() {
        bail!("cannot train on an empty dataset");
    }
    let opts = TrainOptions {
        out_dir: Some(out.to_path_buf()),
        resume: resume.map(Path::to_path_buf),
        deterministic,
    };
    let (_, summary) = train(&run, &scenes, &opts)?;
    println!(
        "trained {} steps on {} scenes: total loss {:.5} -> {:.5}",
        summary.steps,
        scenes.len(),
        summary.first.total,
        summary.last.total
    );
    println!("checkpoint: {}", out.join("checkpoint").display());
    Ok(())
}

fn cmd_eval(cfg: &ConfigArgs, checkpoint: &Path, data: Option<&Path>, out: &Path) -> Result<()> {
    let explicit = cfg.config.is_some().then(|| cfg.resolve()).transpose()?;
    let (mut run, model) = load_model(checkpoint, explicit.as_ref())?;
    if explicit.is_none() {
        cfg.apply(&mut run);
    }
    let scenes = load_scenes(data, &run)?;
    if scenes.is_empty() {
        bail!("cannot evaluate on an empty dataset");
    }
    let report = evaluate_model(&model, &scenes)?;
    fs::create_dir_all(out)?;
    let path = out.join("report.json");
    fs::write(&path, serde_json::to_string_pretty(&report)?)?;
    println!(
        "mAP {:.4}  mATE {:.4}  mASE {:.4}  mAOE {:.4}  mAVE {:.4}  composite {:.4}",
        report.map, report.ate, report.ase, report.aoe, report.ave, report.composite
    );
    for f in &report.flags {
        println!("note: {f}");
    }
    println!("report: {}", path.display());
    Ok(())
}

fn csv_row(mode: &str, r: &BenchResult) -> String {
    let counts: Vec<String> = r.trajectory.iter().map(|l| l.n_out.to_string()).collect();
    format!(
        "{mode},{},{:.4},{:.4},{},{}",
        r.iters,
        r.mean_secs * 1e3,
        r.min_secs * 1e3,
        r.query_rows,
        counts.join(" ")
    )
}

fn cmd_bench(cfg: &ConfigArgs, checkpoint: Option<&Path>, warmup: usize, iters: usize, out: &Path) -> Result<()> {
    let (run, model) = match checkpoint {
        Some(dir) => load_model(dir, cfg.config.is_some().then(|| cfg.resolve()).transpose()?.as_ref())?,
        None => {
            let c = cfg.resolve()?;
            let m = Model::new(&c.decoder, c.world.channels)?;
            (c, m)
        }
    };
    let scene = generate_dataset(&run.world, run.seed, 1).scenes.remove(0);
    let cmp = bench_compare_model(&model, &scene, warmup, iters)?;
    fs::create_dir_all(out)?;
    let csv = format!(
        "mode,iters,mean_ms,min_ms,query_rows,layer_counts\n{}\n{}\n",
        csv_row("dynamic", &cmp.dynamic),
        csv_row("static", &cmp.fixed)
    );
    let path = out.join("bench.csv");
    fs::write(&path, &csv)?;
    print!("{csv}");
    println!(
        "dynamic/static latency ratio {:.3} (speedup {:.2}x)",
        cmp.ratio,
        1.0 / cmp.ratio
    );
    Ok(())
}

fn cmd_verify(forwards: usize, corrupt_gradient: bool) -> Result<bool> {
    let results = verify::run(&VerifyOptions {
        corrupt_gradient,
        bound_forwards: Some(forwards),
    });
    print!("{}", verify::render_table(&results));
    Ok(verify::all_passed(&results))
}

fn run(cli: Cli) -> Result<bool> {
    match cli.cmd {
        Command::GenData { cfg, out, force } => cmd_gen_data(&cfg.resolve()?, &out, force)?,
        Command::Train {
            cfg,
            data,
            out,
            resume,
            deterministic,
            force,
        } => cmd_train(&cfg, data.as_deref(), &out, resume.as_deref(), deterministic, force)?,
        Command::Eval {
            cfg,
            checkpoint,
            data,
            out,
        } => cmd_eval(&cfg, &checkpoint, data.as_deref(), &out)?,
        Command::Bench {
            cfg,
            checkpoint,
            warmup,
            iters,
            out,
        } => cmd_bench(&cfg, checkpoint.as_deref(), warmup, iters, &out)?,
        Command::Verify {
            forwards,
            corrupt_gradient,
        } => return cmd_verify(forwards, corrupt_gradient),
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let threads = par::init_threads(None);
    log::debug!("{threads} worker threads");
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
