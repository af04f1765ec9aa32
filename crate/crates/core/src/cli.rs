//! Command-line front end: `gen-data`, `train`, `sample`, `eval`, `ablate`.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::builder::BoolishValueParser;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::body::{Joints, Pose, ShapeMap};
use crate::config::ExperimentConfig;
use crate::error::{io_err, Error, Result};
use crate::eval::{ablation, ablation_csv, evaluate, predict, write_report, EvalReport, Model, Predictor};
use crate::exec::Execution;
use crate::scene::{generate_dataset, prepare_output_dir, read_split, write_dataset, write_json, SceneCache, Split};
use crate::train::train;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

/// Subdirectory of a run holding the model trained without the collision loss.
pub const NO_COLLISION_DIR: &str = "nocoll";

#[derive(Debug, Parser)]
#[command(name = "scenepose", version, about = "Scene-aware pose diffusion experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic dataset.
    GenData(GenDataArgs),
    /// Train the heads and the denoiser.
    Train(TrainArgs),
    /// Draw pose hypotheses for one input.
    Sample(SampleArgs),
    /// Score a trained run on a split.
    Eval(EvalArgs),
    /// Run the guidance / fusion / collision-loss ablation grid.
    Ablate(AblateArgs),
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// TOML config file; missing keys take their default values.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Named starting config, used when no file is given.
    #[arg(long, value_name = "NAME")]
    pub preset: Option<String>,
    #[arg(long, value_name = "U64")]
    pub seed: Option<u64>,
    /// Dataset directory.
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,
    /// Run on one thread.
    #[arg(long)]
    pub sequential: bool,
}

#[derive(Debug, Clone, Args)]
pub struct SamplingFlags {
    /// Collision-gradient guidance.
    #[arg(long, value_name = "BOOL", value_parser = BoolishValueParser::new())]
    pub guidance: Option<bool>,
    /// Classifier-free fusion of visible and invisible joints.
    #[arg(long, value_name = "BOOL", value_parser = BoolishValueParser::new())]
    pub cf: Option<bool>,
    /// Guidance scale.
    #[arg(long, value_name = "FLOAT")]
    pub a: Option<f64>,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub common: Common,
    /// Output directory (defaults to the configured dataset directory).
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[arg(long, value_name = "INT")]
    pub size: Option<usize>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Variant {
    Full,
    /// Collision loss weight set to zero; written to `<run>/nocoll`.
    Nocoll,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Run directory (defaults to the configured output directory).
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "full")]
    pub variant: Variant,
    /// Continue each stage from its last checkpoint.
    #[arg(long)]
    pub resume: bool,
    /// Start over in a run directory that already holds checkpoints.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub flags: SamplingFlags,
    /// Trained run directory.
    #[arg(long, value_name = "DIR")]
    pub run: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    pub split: Split,
    /// Position of the input within the split.
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    #[arg(long, value_name = "INT")]
    pub n: Option<usize>,
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub flags: SamplingFlags,
    #[arg(long, value_name = "DIR")]
    pub run: Option<PathBuf>,
    #[arg(long)]
    pub split: Option<Split>,
    /// Hypothesis counts, comma separated.
    #[arg(long, value_name = "INT,...", value_delimiter = ',')]
    pub n: Option<Vec<usize>>,
    /// Evaluate only the first this-many inputs.
    #[arg(long)]
    pub limit: Option<usize>,
    /// Score the ground truth instead of a trained model.
    #[arg(long)]
    pub oracle: bool,
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, value_name = "DIR")]
    pub run: Option<PathBuf>,
    #[arg(long)]
    pub split: Option<Split>,
    #[arg(long, value_name = "INT", default_value_t = 20)]
    pub n: usize,
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(cli.command) {
        Ok(()) => EXIT_OK,
        Err(Error::Config(m)) | Err(Error::InvalidArgument(m)) => {
            eprintln!("error: {m}");
            EXIT_USAGE
        }
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_RUNTIME
        }
    }
}

pub fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Sample(a) => sample(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Ablate(a) => ablate(a),
    }
}

/// Config resolution: an explicit file, else a preset, else the config
/// stored in `run`, else the defaults; then flag overrides.
fn resolve(common: &Common, run: Option<&Path>) -> Result<ExperimentConfig> {
    let mut cfg = if let Some(path) = &common.config {
        ExperimentConfig::load(path)?
    } else if let Some(name) = &common.preset {
        ExperimentConfig::preset(name)?
    } else if let Some(stored) = run.map(|r| r.join("config.toml")).filter(|p| p.exists()) {
        ExperimentConfig::load(&stored)?
    } else {
        ExperimentConfig::default()
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(d) = &common.data {
        cfg.dataset_dir = d.clone();
    }
    if common.sequential {
        cfg.execution = Execution::Sequential;
    }
    Ok(cfg)
}

fn apply_flags(cfg: &mut ExperimentConfig, f: &SamplingFlags) {
    if let Some(g) = f.guidance {
        cfg.sampler.guidance = g;
    }
    if let Some(c) = f.cf {
        cfg.sampler.cf_fusion = c;
    }
    if let Some(a) = f.a {
        cfg.sampler.scale = a;
    }
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let mut cfg = resolve(&a.common, None)?;
    if let Some(out) = a.out {
        cfg.dataset_dir = out;
    }
    if let Some(size) = a.size {
        cfg.data.size = size;
    }
    cfg.validate()?;
    let data = generate_dataset(&cfg.data, cfg.seed, &cfg.skeleton, cfg.execution)?;
    let manifest = write_dataset(&cfg.dataset_dir, &data, &cfg.data, cfg.seed, a.force)?;
    cfg.save(&cfg.dataset_dir.join("config.toml"))?;
    for e in &manifest.splits {
        println!("{} {} records sha256 {}", e.file, e.records, e.sha256);
    }
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let mut cfg = resolve(&a.common, None)?;
    if let Some(out) = a.out {
        cfg.output_dir = out;
    }
    let run = match a.variant {
        Variant::Full => cfg.output_dir.clone(),
        Variant::Nocoll => {
            cfg.train.weights.coll = 0.0;
            cfg.output_dir.join(NO_COLLISION_DIR)
        }
    };
    let started = run.join(crate::train::METRICS_FILE).exists();
    if started && !a.resume && !a.force {
        return Err(Error::InvalidArgument(format!(
            "{} already holds a run (use --resume to continue or --force to start over)",
            run.display()
        )));
    }
    let out = train(&cfg, &run, a.resume)?;
    println!(
        "heads best validation {:.6}, denoiser best validation {:.6}",
        out.heads_best_val, out.denoiser_best_val
    );
    Ok(())
}

#[derive(Serialize)]
struct PoseFile<'a> {
    input_id: u64,
    sample: usize,
    collision: Option<f64>,
    gamma_hat: [f64; 3],
    beta: [f64; crate::body::NUM_BETAS],
    theta: &'a Pose,
    joints: Vec<[f64; 3]>,
}

fn joint_rows(j: &Joints) -> Vec<[f64; 3]> {
    j.iter().map(|p| [p.x, p.y, p.z]).collect()
}

fn run_dir(run: Option<PathBuf>, common: &Common) -> Result<PathBuf> {
    match run {
        Some(r) => Ok(r),
        None => Ok(resolve(common, None)?.output_dir),
    }
}

fn sample(a: SampleArgs) -> Result<()> {
    let run = run_dir(a.run, &a.common)?;
    let mut cfg = resolve(&a.common, Some(&run))?;
    apply_flags(&mut cfg, &a.flags);
    if let Some(n) = a.n {
        cfg.sampler.n = n;
    }
    cfg.validate()?;
    let records = read_split(&cfg.dataset_dir, a.split)?;
    let rec = records.get(a.index).ok_or_else(|| {
        Error::InvalidArgument(format!("index {} outside the {} records of the split", a.index, records.len()))
    })?;
    let model = Model::load(&run, &cfg.skeleton, &cfg.schedule)?;
    let map = ShapeMap::from_skeleton(&cfg.skeleton);
    let scene = SceneCache::new().camera_frame(rec);
    let pred = predict(
        Predictor::Model(&model),
        &cfg.skeleton,
        &map,
        &cfg.sampler,
        rec,
        &scene.points,
        cfg.sampler.n,
        cfg.seed,
        true,
    )?;
    let out = a.out.unwrap_or_else(|| run.join(format!("samples-{}-{}", a.split.file_stem(), a.index)));
    prepare_output_dir(&out, a.force)?;
    cfg.save(&out.join("config.toml"))?;
    for (k, (pose, joints)) in pred.poses.iter().zip(&pred.joints).enumerate() {
        let collision = pred.collision.get(k).copied();
        write_json(
            &out.join(format!("sample_{k:03}.json")),
            &PoseFile {
                input_id: rec.id,
                sample: k,
                collision,
                gamma_hat: pred.gamma_hat.into(),
                beta: pred.shape.beta,
                theta: pose,
                joints: joint_rows(joints),
            },
        )?;
        println!("sample {k}: collision {:.6e}", collision.unwrap_or(0.0));
    }
    write_json(&out.join("traces.json"), &pred.traces)
}

fn report_lines(r: &EvalReport) {
    for b in &r.blocks {
        let f = |x: Option<f64>| x.map_or("-".to_string(), |v| format!("{v:.3}"));
        println!(
            "n={:<3} mpjpe-vis {} pa-mpjpe-vis {} min-mpjpe-invis {} coll {} contact {} apd-invis {}",
            b.n,
            f(b.mpjpe_vis),
            f(b.pa_mpjpe_vis),
            f(b.min_mpjpe_invis),
            b.collision.map_or("-".into(), |v| format!("{v:.6}")),
            f(b.contact),
            f(b.apd_invis)
        );
    }
}

fn eval_records(cfg: &ExperimentConfig) -> Result<Vec<crate::scene::SampleRecord>> {
    let mut records = read_split(&cfg.dataset_dir, cfg.eval.split)?;
    if let Some(l) = cfg.eval.limit {
        records.truncate(l);
    }
    Ok(records)
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let run = run_dir(a.run, &a.common)?;
    let mut cfg = resolve(&a.common, Some(&run))?;
    apply_flags(&mut cfg, &a.flags);
    if let Some(n) = a.n {
        cfg.eval.n_list = n;
    }
    if let Some(s) = a.split {
        cfg.eval.split = s;
    }
    if a.limit.is_some() {
        cfg.eval.limit = a.limit;
    }
    cfg.validate()?;
    let records = eval_records(&cfg)?;
    let model;
    let (predictor, method) = if a.oracle {
        (Predictor::Oracle, "oracle")
    } else {
        model = Model::load(&run, &cfg.skeleton, &cfg.schedule)?;
        (Predictor::Model(&model), "model")
    };
    let report = evaluate(predictor, method, &records, &cfg.skeleton, &cfg.sampler, &cfg.eval, cfg.seed, cfg.execution)?;
    let out = a
        .out
        .unwrap_or_else(|| run.join(format!("eval-{method}-{}", cfg.eval.split.file_stem())));
    prepare_output_dir(&out, a.force)?;
    cfg.save(&out.join("config.toml"))?;
    write_report(&out, &report)?;
    report_lines(&report);
    Ok(())
}

fn ablate(a: AblateArgs) -> Result<()> {
    let run = run_dir(a.run, &a.common)?;
    let mut cfg = resolve(&a.common, Some(&run))?;
    if let Some(s) = a.split {
        cfg.eval.split = s;
    }
    if a.limit.is_some() {
        cfg.eval.limit = a.limit;
    }
    if a.n == 0 {
        return Err(Error::InvalidArgument("--n must be positive".into()));
    }
    cfg.validate()?;
    let records = eval_records(&cfg)?;
    let full = Model::load(&run, &cfg.skeleton, &cfg.schedule)?;
    let nocoll_dir = run.join(NO_COLLISION_DIR);
    let no_coll = if nocoll_dir.exists() {
        Some(Model::load(&nocoll_dir, &cfg.skeleton, &cfg.schedule)?)
    } else {
        None
    };
    let rows = ablation(
        &full,
        no_coll.as_ref(),
        &records,
        &cfg.skeleton,
        &cfg.sampler,
        &cfg.eval,
        a.n,
        cfg.seed,
        cfg.execution,
    )?;
    let out = a.out.unwrap_or_else(|| run.join("ablation"));
    prepare_output_dir(&out, a.force)?;
    cfg.save(&out.join("config.toml"))?;
    write_json(&out.join("ablation.json"), &rows)?;
    let csv = ablation_csv(&rows);
    let path = out.join("ablation.csv");
    fs::write(&path, &csv).map_err(io_err(&path))?;
    print!("{csv}");
    Ok(())
}
