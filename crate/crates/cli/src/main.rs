//! Command-line front end: synthetic data, training, evaluation, ablations
//! and sampler diagnostics.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;
use serde_json::json;

use eaglenet::checkpoint::Checkpoint;
use eaglenet::config::RunConfig;
use eaglenet::dataset::{load_dataset, synth_generate, write_dataset, EmbeddingDataset, Split, SynthSpec};
use eaglenet::eam::{langevin_sample, InputEnergy, LangevinConfig, ReplayBuffer};
use eaglenet::gradcheck::grad_check;
use eaglenet::model::Model;
use eaglenet::train::{ablate, ablation_table, evaluate, train};
use eaglenet::Rng;

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

#[derive(Parser)]
#[command(name = "eaglenet", version, about = "Text-video retrieval over pre-extracted embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Config file plus `section.key=value` overrides.
#[derive(Args)]
struct ConfigArgs {
    /// JSON config; missing keys take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set loss.kind=ce`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p).with_context(|| format!("reading config {}", p.display()))?,
            None => RunConfig::default(),
        };
        for o in &self.overrides {
            cfg.set(o)?;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic train/val/test datasets.
    SynthData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 256)]
        train: usize,
        #[arg(long, default_value_t = 64)]
        val: usize,
        #[arg(long, default_value_t = 64)]
        test: usize,
        #[arg(long, default_value_t = 64)]
        dim: usize,
        #[arg(long, default_value_t = 8)]
        frames: usize,
        #[arg(long, default_value_t = 1.5)]
        noise: f64,
        #[arg(long, default_value_t = 0.5)]
        drift: f64,
    },
    /// Train on `data.train`, validating on `data.val` when set.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Seeds both initialization and batching.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on a dataset.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Candidate-noise seed; defaults to the checkpoint's `eval.sample_seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Also write the report as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the full model and each variant on shared data and seeds.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Comma-separated, e.g. `no-frl,no-eam,pooling=max`.
        #[arg(long, value_delimiter = ',')]
        variants: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run Langevin chains under a checkpoint's energy and dump diagnostics.
    SampleEbm {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Real pairs whose energies are histogrammed alongside the chains.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 32)]
        chains: usize,
        /// Chain length; defaults to the checkpoint's `eam.k`.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, default_value_t = 20)]
        bins: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of the total loss on a tiny synthetic batch.
    GradCheck {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 3)]
        pairs: usize,
        #[arg(long, default_value_t = 8)]
        dim: usize,
        #[arg(long, default_value_t = 3)]
        frames: usize,
        #[arg(long, default_value_t = eaglenet::gradcheck::DEFAULT_STEP)]
        step: f64,
        #[arg(long, default_value_t = eaglenet::gradcheck::DEFAULT_TOL)]
        tol: f64,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if let Some(err) = cause.downcast_ref::<eaglenet::Error>() {
            if err.is_divergence() {
                return EXIT_NUMERIC;
            }
            if err.is_data_error() {
                return EXIT_DATA;
            }
            return EXIT_USAGE;
        }
        if cause.is::<std::io::Error>() || cause.is::<serde_json::Error>() {
            return EXIT_DATA;
        }
    }
    EXIT_USAGE
}

fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::SynthData { out, seed, train, val, test, dim, frames, noise, drift } => {
            fs::create_dir_all(&out)?;
            for (k, (split, n)) in [(Split::Train, train), (Split::Val, val), (Split::Test, test)].into_iter().enumerate() {
                if n == 0 {
                    continue;
                }
                let spec = SynthSpec { n_pairs: n, dim, frames, noise, drift, seed: seed.wrapping_add(k as u64) };
                let path = out.join(format!("{}.embd", split_name(split)));
                write_dataset(&synth_generate(&spec, split)?, &path)?;
                println!("{}: {n} pairs", path.display());
            }
        }
        Command::Train { cfg, seed, out } => {
            let mut cfg = cfg.load()?;
            if let Some(s) = seed {
                cfg.train.seed = s;
                cfg.model.init_seed = s;
            }
            let train_ds = required(&cfg.data.train, "data.train")?;
            let val_ds = cfg.data.val.as_deref().map(load).transpose()?;
            fs::create_dir_all(&out)?;
            cfg.save(&out.join("config.json"))?;
            let outcome = train(&cfg, &train_ds, val_ds.as_ref(), Some(&out))?;
            info!("finished {} steps", outcome.steps);
            if let Some(last) = outcome.history.last() {
                println!("{}", serde_json::to_string_pretty(last)?);
            }
        }
        Command::Evaluate { checkpoint, data, seed, out } => {
            let ck = Checkpoint::load(&checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
            let ds = load(&data)?;
            let report = evaluate(&ck, &ds, seed.unwrap_or(ck.config.eval.sample_seed))?;
            print!("{}", report.table());
            if let Some(p) = out {
                fs::write(p, report.to_json())?;
            }
        }
        Command::Ablate { cfg, variants, seeds, out } => {
            let cfg = cfg.load()?;
            let train_ds = required(&cfg.data.train, "data.train")?;
            let eval_ds = match (&cfg.data.test, &cfg.data.val) {
                (Some(p), _) | (None, Some(p)) => load(p)?,
                _ => bail!(eaglenet::Error::Config("ablate needs data.test or data.val".into())),
            };
            let rows = ablate(&cfg, &variants, &seeds, &train_ds, &eval_ds)?;
            let table = ablation_table(&rows);
            print!("{table}");
            if let Some(dir) = out {
                fs::create_dir_all(&dir)?;
                fs::write(dir.join("ablation.txt"), &table)?;
                fs::write(dir.join("ablation.json"), serde_json::to_string_pretty(&rows)?)?;
            }
        }
        Command::SampleEbm { checkpoint, data, chains, steps, bins, seed, out } => {
            let ck = Checkpoint::load(&checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
            sample_ebm(&ck, &load(&data)?, chains, steps, bins.max(1), seed, &out)?;
        }
        Command::GradCheck { cfg, seed, pairs, dim, frames, step, tol } => {
            let mut cfg = cfg.load()?;
            cfg.model.init_seed = seed;
            let spec = SynthSpec { n_pairs: pairs, dim, frames, noise: 0.3, drift: 0.5, seed };
            let batch = synth_generate(&spec, Split::Train)?.all();
            let model = Model::new(&cfg, dim, frames)?;
            let mut buffer = ReplayBuffer::new(cfg.eam.buffer_capacity, cfg.eam.reuse_prob);
            let mut rng = Rng::new(seed);
            let fakes = model.sample_fakes(batch.len(), &mut rng, Some(&mut buffer))?;
            let report = grad_check(
                &model.store,
                |store| {
                    let mut m = model.clone();
                    m.store = store.clone();
                    let (rep, g) = m.loss_and_grads_with(&batch, &mut rng.clone(), fakes.as_ref())?;
                    Ok((rep.loss.total, g))
                },
                step,
                tol,
            )?;
            println!("{report}");
            if !report.passed {
                return Ok(ExitCode::from(EXIT_NUMERIC));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn split_name(s: Split) -> &'static str {
    match s {
        Split::Train => "train",
        Split::Val => "val",
        Split::Test => "test",
    }
}

fn load(path: &Path) -> Result<EmbeddingDataset> {
    load_dataset(path).with_context(|| format!("loading dataset {}", path.display()))
}

fn required(path: &Option<PathBuf>, key: &str) -> Result<EmbeddingDataset> {
    match path {
        Some(p) => load(p),
        None => Err(anyhow!(eaglenet::Error::Config(format!("{key} is not set; pass --set {key}=<path>")))),
    }
}

/// Equal-width histogram over `[lo, hi]`.
fn histogram(values: &[f64], lo: f64, hi: f64, bins: usize) -> Vec<usize> {
    let mut counts = vec![0; bins];
    let width = (hi - lo).max(f64::MIN_POSITIVE);
    for &v in values {
        let k = (((v - lo) / width) * bins as f64) as usize;
        counts[k.min(bins - 1)] += 1;
    }
    counts
}

fn sample_ebm(
    ck: &Checkpoint,
    ds: &EmbeddingDataset,
    chains: usize,
    steps: Option<usize>,
    bins: usize,
    seed: u64,
    out: &Path,
) -> Result<()> {
    let model = ck.model()?;
    let Some(energy) = model.input_energy() else {
        bail!(eaglenet::Error::Config("checkpoint was trained without EAM".into()));
    };
    if ds.dim != ck.d || ds.frames_per_video != ck.m {
        bail!(eaglenet::Error::InvalidDataset(format!(
            "dataset has d={}, M={}; checkpoint expects d={}, M={}",
            ds.dim, ds.frames_per_video, ck.d, ck.m
        )));
    }
    let (d, m) = (ck.d, ck.m);
    let batch = ds.all();
    let real_matrix = model
        .energy_matrix(&batch.texts, &batch.frames)?
        .expect("energy is present");
    let real: Vec<f64> = (0..ds.len()).map(|i| real_matrix.get(i, i)).collect();

    let lc = model.langevin_config();
    let k = steps.unwrap_or(lc.k);
    let one = LangevinConfig { k: 1, ..lc };
    let buffer = ck
        .buffer
        .clone()
        .unwrap_or_else(|| ReplayBuffer::new(model.config.eam.buffer_capacity, model.config.eam.reuse_prob));
    let mut rng = Rng::new(seed);
    let (mut t, mut f) = buffer.draw_batch(&mut rng, chains, m, d)?;
    let mut trajectory = Vec::with_capacity(k + 1);
    for step in 0..=k {
        let (e, _, _) = energy.energy_and_grad(&t, &f, m)?;
        let norm: f64 = (0..chains)
            .map(|i| t.row(i).iter().map(|x| x * x).sum::<f64>().sqrt())
            .sum::<f64>()
            / chains.max(1) as f64;
        trajectory.push(json!({ "step": step, "energies": e, "mean_text_norm": norm }));
        if step < k {
            (t, f) = langevin_sample(&energy, &t, &f, m, &one, &mut rng)?;
        }
    }
    let start: Vec<f64> = trajectory[0]["energies"].as_array().into_iter().flatten().filter_map(|v| v.as_f64()).collect();
    let end: Vec<f64> = trajectory[k]["energies"].as_array().into_iter().flatten().filter_map(|v| v.as_f64()).collect();
    let all = real.iter().chain(&start).chain(&end);
    let lo = all.clone().copied().fold(f64::INFINITY, f64::min);
    let hi = all.copied().fold(f64::NEG_INFINITY, f64::max);
    let edges: Vec<f64> = (0..=bins).map(|b| lo + (hi - lo) * b as f64 / bins as f64).collect();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;

    fs::create_dir_all(out)?;
    fs::write(
        out.join("trajectories.json"),
        serde_json::to_string_pretty(&json!({
            "chains": chains, "steps": k, "eta": lc.eta, "sigma2": lc.sigma2, "trajectory": trajectory,
        }))?,
    )?;
    fs::write(
        out.join("histogram.json"),
        serde_json::to_string_pretty(&json!({
            "edges": edges,
            "real": histogram(&real, lo, hi, bins),
            "chain_start": histogram(&start, lo, hi, bins),
            "chain_end": histogram(&end, lo, hi, bins),
        }))?,
    )?;
    println!(
        "mean energy: real pairs {:.4}, chains {:.4} -> {:.4} after {k} steps",
        mean(&real),
        mean(&start),
        mean(&end)
    );
    Ok(())
}
