//! `ddm`: train, sample and evaluate decoupled diffusion models on 2-D data.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use ddm_core::checkpoint::Checkpoint;
use ddm_core::datasets::{default_gmm, generate, DatasetName};
use ddm_core::gradcheck::{run_suite, GradcheckOptions, GRADCHECK_TOL};
use ddm_core::metrics::{nfe_sweep, sweep_csv, MetricKind, SweepRow};
use ddm_core::oracle::GaussianMixture;
use ddm_core::sampler::x0_trajectory_error;
use ddm_core::trainer::metrics_csv;
use ddm_core::{
    derive_stream, AttenuationFamily, DdmError, Generator, Matrix, ModelKind, TrainConfig, Trainer,
};

const CHECKPOINT_FILE: &str = "checkpoint.ddmc";

#[derive(Parser)]
#[command(
    name = "ddm",
    version,
    about = "Decoupled diffusion models on 2-D toy data"
)]
struct Cli {
    /// Master seed; every output is a pure function of inputs and this seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a JSON config.
    Train(TrainArgs),
    /// Draw samples from a checkpoint or a Gaussian-mixture oracle.
    Sample(SampleArgs),
    /// Metric-vs-NFE table for existing checkpoints.
    Eval(EvalArgs),
    /// Train one model per attenuation family and tabulate metric vs NFE.
    Sweep(SweepArgs),
    /// Finite-difference check of every gradient tensor.
    Gradcheck(GradcheckArgs),
    /// Sample with the exact Bayes denoiser of a Gaussian mixture.
    OracleSample(OracleSampleArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Output directory for the checkpoint and metrics.csv.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Continue from this checkpoint up to the config's `iters`.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Stop after this many completed iterations; the schedule still spans `iters`.
    #[arg(long)]
    until: Option<usize>,
    /// Override the config's dataset.
    #[arg(long)]
    dataset: Option<String>,
    /// Also write the training set as CSV.
    #[arg(long)]
    export_data: Option<PathBuf>,
}

#[derive(Args)]
struct DrawArgs {
    #[arg(long, default_value_t = 10)]
    nfe: usize,
    #[arg(long, default_value_t = 10_000)]
    n_samples: usize,
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Last evaluation time before the final mean step.
    #[arg(long)]
    smallest_t: Option<f64>,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long, required_unless_present = "oracle", conflicts_with = "oracle")]
    checkpoint: Option<PathBuf>,
    /// Gaussian mixture JSON (`weights`, `means`, `variances`).
    #[arg(long)]
    oracle: Option<PathBuf>,
    /// Use live instead of EMA weights.
    #[arg(long)]
    no_ema: bool,
    #[command(flatten)]
    draw: DrawArgs,
}

#[derive(Args)]
struct OracleSampleArgs {
    /// Mixture JSON; the built-in two-component mixture when absent.
    #[arg(long)]
    gmm: Option<PathBuf>,
    #[command(flatten)]
    draw: DrawArgs,
}

#[derive(Clone, Copy, ValueEnum)]
enum Metric {
    Swd,
    Mmd,
}

impl From<Metric> for MetricKind {
    fn from(m: Metric) -> Self {
        match m {
            Metric::Swd => MetricKind::SlicedWasserstein,
            Metric::Mmd => MetricKind::Mmd,
        }
    }
}

#[derive(Args)]
struct TableArgs {
    #[arg(long, value_delimiter = ',', default_value = "5,10,20,50")]
    nfe_list: Vec<usize>,
    /// Generated and reference points per row.
    #[arg(long, default_value_t = 10_000)]
    n_samples: usize,
    #[arg(long, value_enum, default_value = "swd")]
    metric: Metric,
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, required = true)]
    checkpoint: Vec<PathBuf>,
    #[arg(long)]
    no_ema: bool,
    #[command(flatten)]
    table: TableArgs,
}

#[derive(Args)]
struct SweepArgs {
    /// Base config; `family` is replaced by each entry of `--ht-list`.
    #[arg(long)]
    config: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "constant,linear")]
    ht_list: Vec<String>,
    #[command(flatten)]
    table: TableArgs,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 256)]
    hidden_width: usize,
    #[arg(long, default_value_t = 4)]
    depth: usize,
    #[arg(long, default_value_t = 16)]
    time_embed_dim: usize,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    /// Entries sampled per tensor; 0 checks every entry.
    #[arg(long, default_value_t = 32)]
    entries: usize,
    /// Write the report as CSV here as well.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, hide = true)]
    corrupt: Option<String>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// 2 for bad input, 3 for a diverged run, 1 otherwise.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|c| c.downcast_ref::<DdmError>()) {
        Some(DdmError::NonFiniteLoss { .. }) => 3,
        Some(DdmError::Io(e)) if e.kind() != std::io::ErrorKind::NotFound => 1,
        Some(_) => 2,
        None => 1,
    }
}

fn run(cli: Cli) -> Result<u8> {
    configure_threads()?;
    let seed = cli.seed;
    match cli.command {
        Command::Train(a) => cmd_train(a, seed),
        Command::Sample(a) => cmd_sample(a, seed.unwrap_or(0)),
        Command::Eval(a) => cmd_eval(a, seed.unwrap_or(0)),
        Command::Sweep(a) => cmd_sweep(a, seed),
        Command::Gradcheck(a) => cmd_gradcheck(a, seed.unwrap_or(0)),
        Command::OracleSample(a) => cmd_oracle_sample(a, seed.unwrap_or(0)),
    }
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var("DDM_THREADS") else {
        return Ok(());
    };
    let n: usize = v.parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        DdmError::InvalidArgument(format!("DDM_THREADS={v:?} is not a positive integer"))
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()?;
    Ok(())
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<TrainConfig> {
    let text = fs::read_to_string(path)
        .map_err(DdmError::from)
        .with_context(|| format!("reading {}", path.display()))?;
    let mut cfg =
        TrainConfig::from_json(&text).with_context(|| format!("config {}", path.display()))?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("checkpoint {}", path.display()))
}

fn write(dir: &Path, name: &str, contents: impl AsRef<[u8]>) -> Result<PathBuf> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(name);
    fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

fn points_csv(m: &Matrix) -> String {
    let header: Vec<String> = (0..m.cols()).map(|j| format!("d{j}")).collect();
    let mut s = header.join(",");
    s.push('\n');
    for row in m.array().rows() {
        let cells: Vec<String> = row.iter().map(f64::to_string).collect();
        s.push_str(&cells.join(","));
        s.push('\n');
    }
    s
}

fn cmd_train(a: TrainArgs, seed: Option<u64>) -> Result<u8> {
    let mut cfg = load_config(&a.config, seed)?;
    if let Some(name) = &a.dataset {
        cfg.dataset.name = name.parse::<DatasetName>()?;
    }
    let data = generate(&cfg.dataset)?;
    if let Some(path) = &a.export_data {
        fs::write(path, points_csv(&data))
            .with_context(|| format!("writing {}", path.display()))?;
    }
    let mut trainer = match &a.resume {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            let mut expected = ckpt.config.clone();
            expected.iters = cfg.iters;
            if expected != cfg {
                return Err(DdmError::Config(
                    "resume config differs from the checkpoint's beyond `iters`".into(),
                )
                .into());
            }
            let mut ckpt = ckpt;
            ckpt.config.iters = cfg.iters;
            Trainer::resume(ckpt, data)?
        }
        None => Trainer::new(cfg.clone(), data, &derive_stream(cfg.seed, 0))?,
    };
    let stop = a.until.map_or(cfg.iters, |u| u.min(cfg.iters));
    let rows = trainer.run_until(stop)?;
    let ckpt_path = a.out.join(CHECKPOINT_FILE);
    fs::create_dir_all(&a.out)?;
    trainer.checkpoint().save(&ckpt_path)?;
    write(&a.out, "metrics.csv", metrics_csv(&rows))?;
    if let Some(last) = rows.last() {
        log::info!("iter {} loss {:.6}", last.iter, last.loss);
    }
    println!("{}", ckpt_path.display());
    Ok(0)
}

fn read_gmm(path: &Path) -> Result<GaussianMixture> {
    let text = fs::read_to_string(path)
        .map_err(DdmError::from)
        .with_context(|| format!("reading {}", path.display()))?;
    let gmm: GaussianMixture = serde_json::from_str(&text)
        .map_err(DdmError::from)
        .with_context(|| format!("mixture {}", path.display()))?;
    Ok(gmm)
}

fn draw(generator: &Generator, d: &DrawArgs, default_t: f64, seed: u64) -> Result<u8> {
    let smallest_t = d.smallest_t.unwrap_or(default_t);
    let trace = generator.generate(d.nfe, d.n_samples, smallest_t, &derive_stream(seed, 1))?;
    write(&d.out, "samples.csv", points_csv(&trace.final_samples))?;
    let mut traj = String::from("t,mse\n");
    for (t, mse) in x0_trajectory_error(&trace, None)? {
        traj.push_str(&format!("{t},{mse}\n"));
    }
    write(&d.out, "trajectory.csv", traj)?;
    Ok(0)
}

fn cmd_sample(a: SampleArgs, seed: u64) -> Result<u8> {
    let default_t = TrainConfig::default().smallest_t;
    match (&a.checkpoint, &a.oracle) {
        (_, Some(path)) => draw(
            &Generator::oracle(read_gmm(path)?)?,
            &a.draw,
            default_t,
            seed,
        ),
        (Some(path), None) => {
            let ckpt = load_checkpoint(path)?;
            let g = Generator::from_checkpoint(&ckpt, !a.no_ema)?;
            draw(&g, &a.draw, ckpt.config.smallest_t, seed)
        }
        (None, None) => bail!(DdmError::InvalidArgument(
            "need --checkpoint or --oracle".into()
        )),
    }
}

fn cmd_oracle_sample(a: OracleSampleArgs, seed: u64) -> Result<u8> {
    let gmm = match &a.gmm {
        Some(path) => read_gmm(path)?,
        None => default_gmm(),
    };
    draw(
        &Generator::oracle(gmm)?,
        &a.draw,
        TrainConfig::default().smallest_t,
        seed,
    )
}

fn label(cfg: &TrainConfig) -> String {
    match cfg.model {
        ModelKind::Ddm => format!("{}-{}", cfg.model, cfg.family),
        _ => cfg.model.to_string(),
    }
}

/// Metric rows for one checkpoint against held-out draws of its training distribution.
fn table_rows(
    ckpt: &Checkpoint,
    use_ema: bool,
    t: &TableArgs,
    label: &str,
    seed: u64,
    index: u64,
) -> Result<Vec<SweepRow>> {
    let spec = &ckpt.config.dataset;
    let reference = generate(&spec.resampled(t.n_samples, spec.seed.wrapping_add(1)))?;
    let generator = Generator::from_checkpoint(ckpt, use_ema)?;
    let smallest_t = ckpt.config.smallest_t;
    let rows = nfe_sweep(
        |nfe, rng| {
            Ok(generator
                .generate(nfe, t.n_samples, smallest_t, rng)?
                .final_samples)
        },
        &reference,
        &t.nfe_list,
        t.metric.into(),
        label,
        &derive_stream(seed, 2).child(index),
    )?;
    Ok(rows)
}

fn check_nfe_list(list: &[usize]) -> Result<()> {
    if list.is_empty() || list.contains(&0) {
        bail!(DdmError::InvalidArgument(
            "--nfe-list must be non-empty with entries >= 1".into()
        ));
    }
    Ok(())
}

fn cmd_eval(a: EvalArgs, seed: u64) -> Result<u8> {
    check_nfe_list(&a.table.nfe_list)?;
    let ckpts = a
        .checkpoint
        .iter()
        .map(|p| load_checkpoint(p))
        .collect::<Result<Vec<_>>>()?;
    let mut seen: HashMap<String, usize> = HashMap::new();
    let mut rows = Vec::new();
    for (i, ckpt) in ckpts.iter().enumerate() {
        let base = label(&ckpt.config);
        let count = seen.entry(base.clone()).or_insert(0);
        *count += 1;
        let name = if *count == 1 {
            base
        } else {
            format!("{base}#{count}")
        };
        rows.extend(table_rows(
            ckpt, !a.no_ema, &a.table, &name, seed, i as u64,
        )?);
    }
    write(&a.table.out, "sweep.csv", sweep_csv(&rows))?;
    print!("{}", sweep_csv(&rows));
    Ok(0)
}

fn cmd_sweep(a: SweepArgs, seed: Option<u64>) -> Result<u8> {
    check_nfe_list(&a.table.nfe_list)?;
    let base = load_config(&a.config, seed)?;
    if base.model != ModelKind::Ddm {
        bail!(DdmError::Config(
            "--ht-list sweeps need a ddm config".into()
        ));
    }
    let families = a
        .ht_list
        .iter()
        .map(|s| s.parse::<AttenuationFamily>())
        .collect::<ddm_core::Result<Vec<_>>>()?;
    let data = generate(&base.dataset)?;
    let mut rows = Vec::new();
    for (i, family) in families.into_iter().enumerate() {
        let cfg = TrainConfig {
            family,
            ..base.clone()
        };
        log::info!("training {}", label(&cfg));
        let mut trainer = Trainer::new(cfg.clone(), data.clone(), &derive_stream(cfg.seed, 0))?;
        trainer.run_until(cfg.iters)?;
        let ckpt = trainer.checkpoint();
        fs::create_dir_all(&a.table.out)?;
        ckpt.save(&a.table.out.join(format!("checkpoint-{family}.ddmc")))?;
        rows.extend(table_rows(
            &ckpt,
            true,
            &a.table,
            &label(&cfg),
            cfg.seed,
            i as u64,
        )?);
    }
    write(&a.table.out, "sweep.csv", sweep_csv(&rows))?;
    print!("{}", sweep_csv(&rows));
    Ok(0)
}

fn cmd_gradcheck(a: GradcheckArgs, seed: u64) -> Result<u8> {
    let opts = GradcheckOptions {
        hidden_width: a.hidden_width,
        depth: a.depth,
        time_embed_dim: a.time_embed_dim,
        batch: a.batch,
        entries_per_tensor: (a.entries > 0).then_some(a.entries),
        corrupt: a.corrupt,
    };
    let cases = run_suite(&opts, &derive_stream(seed, 3))?;
    let mut report = String::from("case,tensor,max_rel_err,checked\n");
    let mut failing = Vec::new();
    for c in &cases {
        for t in &c.tensors {
            report.push_str(&format!(
                "{},{},{:e},{}\n",
                c.case, t.name, t.max_rel_err, t.checked
            ));
        }
        failing.extend(
            c.failing()
                .into_iter()
                .map(|t| format!("{} {} ({:e})", c.case, t.name, t.max_rel_err)),
        );
    }
    if let Some(dir) = &a.out {
        write(dir, "gradcheck.csv", &report)?;
    }
    print!("{report}");
    let worst = cases.iter().map(|c| c.max_rel_err()).fold(0.0, f64::max);
    if failing.is_empty() {
        println!(
            "gradcheck passed: {} cases, max relative error {worst:e} < {GRADCHECK_TOL:e}",
            cases.len()
        );
        Ok(0)
    } else {
        eprintln!("gradcheck failed on {} tensor(s):", failing.len());
        for f in &failing {
            eprintln!("  {f}");
        }
        Ok(1)
    }
}
