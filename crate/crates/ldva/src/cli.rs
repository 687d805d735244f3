//! The `ldva` command line.

use std::ffi::OsString;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use ldva_core::config::{DaPhase, Task};
use ldva_core::data::{generate_synthetic, sample_split, LabeledImageSet, SynthSpec};
use ldva_core::eval;
use ldva_core::gradsuite::{run_gradient_suite, LOSSES, SUITE_TOL};
use ldva_core::heads::harmonic_mean;
use ldva_core::trainer::{self, Checkpoint, EpochMetrics, TrainData};
use serde::Serialize;
use serde_json::value::RawValue;

use crate::checkpoint;
use crate::error::{read, write, Error, Result};
use crate::formats::{num, pi_csv, semantics_csv};
use crate::idx::write_idx;
use crate::run::{config_hash, now_unix, write_manifest, Manifest, RunConfig, SEED_ENV};
use crate::tasks::{da_data, fsl_data, gzsl_data};

pub const CHECKPOINT_FILE: &str = "checkpoint.ldva";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const IMAGES_FILE: &str = "images-idx3-ubyte";
pub const LABELS_FILE: &str = "labels-idx1-ubyte";
pub const SEMANTICS_FILE: &str = "semantics.csv";

#[derive(Debug, Parser)]
#[command(name = "ldva", version, about = "Part-attention prototype encodings for zero-shot, few-shot and domain adaptation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TaskArg {
    Gzsl,
    Fsl,
    Da,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Self {
        match t {
            TaskArg::Gzsl => Task::Gzsl,
            TaskArg::Fsl => Task::Fsl,
            TaskArg::Da => Task::Da,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PhaseArg {
    SourcePi,
    JointPi,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SetArg {
    Train,
    Test,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write a checkpoint, per-epoch metrics and a manifest.
    Train {
        #[arg(long, value_enum)]
        task: TaskArg,
        #[arg(long)]
        config: PathBuf,
        /// Output directory; overrides `out_dir` in the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// DA only.
        #[arg(long, value_enum)]
        phase: Option<PhaseArg>,
        /// Checkpoint to start from; required for `--phase joint-pi`.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the config's test data.
    Eval {
        #[arg(long, value_enum)]
        task: TaskArg,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 5)]
        ways: usize,
        #[arg(long, default_value_t = 1)]
        shots: usize,
        /// Per class.
        #[arg(long, default_value_t = 15)]
        queries: usize,
        #[arg(long, default_value_t = 100)]
        episodes: usize,
        /// Metrics file; defaults to `eval-<task>.json` beside the checkpoint.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the π encoding of every sample as CSV.
    DumpPi {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// For DA, `train` is the source domain and `test` the target.
        #[arg(long, value_enum, default_value = "test")]
        set: SetArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare every loss gradient with central finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Test hook: scale this loss's analytic gradient by 1.1.
        #[arg(long, hide = true)]
        corrupt: Option<String>,
    },
    /// Generate a synthetic compositional dataset.
    GenSynth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Parses `args` (program name first) and runs the command.
pub fn run_from<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match execute(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

/// Runs a parsed command. `Ok` carries the exit status of a completed check.
pub fn execute(cmd: Command) -> Result<u8> {
    match cmd {
        Command::Train { task, config, out, phase, init } => cmd_train(task.into(), &config, out, phase, init),
        Command::Eval { task, checkpoint, config, ways, shots, queries, episodes, out } => {
            cmd_eval(task.into(), &checkpoint, &config, FslArgs { ways, shots, queries, episodes }, out)
        }
        Command::DumpPi { checkpoint, config, set, out } => cmd_dump_pi(&checkpoint, &config, set, &out),
        Command::Gradcheck { seed, corrupt } => cmd_gradcheck(seed, corrupt.as_deref()),
        Command::GenSynth { spec, out } => cmd_gen_synth(&spec, &out),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

#[derive(Serialize)]
struct EpochLosses {
    step_a_part: Box<RawValue>,
    part: Box<RawValue>,
    prob: Box<RawValue>,
    task: Box<RawValue>,
    total: Box<RawValue>,
}

#[derive(Serialize)]
struct EpochScores {
    train_acc: Box<RawValue>,
}

#[derive(Serialize)]
struct EpochLine<'a> {
    epoch: usize,
    losses: EpochLosses,
    metrics: EpochScores,
    seed: u64,
    config_hash: &'a str,
}

/// One metrics JSONL line, numbers at six decimals.
pub fn epoch_line(m: &EpochMetrics, seed: u64, hash: &str) -> String {
    let line = EpochLine {
        epoch: m.epoch,
        losses: EpochLosses {
            step_a_part: num(m.step_a_part),
            part: num(m.losses.part),
            prob: num(m.losses.prob),
            task: num(m.losses.task),
            total: num(m.losses.total),
        },
        metrics: EpochScores { train_acc: num(m.train_acc) },
        seed,
        config_hash: hash,
    };
    serde_json::to_string(&line).expect("metrics serialize")
}

#[derive(Serialize)]
struct TrainInfo {
    task: &'static str,
    epochs: usize,
    output_dim: usize,
    init: Option<PathBuf>,
}

fn cmd_train(task: Task, config: &Path, out: Option<PathBuf>, phase: Option<PhaseArg>, init: Option<PathBuf>) -> Result<u8> {
    let mut run = RunConfig::load(config)?;
    let from_env = run.apply_seed_env()?;
    run.train.task = task;
    run.train.da_phase = match (task, phase) {
        (Task::Da, Some(PhaseArg::JointPi)) => Some(DaPhase::JointPi),
        (Task::Da, _) => Some(DaPhase::SourcePi),
        (_, None) => None,
        (_, Some(_)) => return Err(Error::Usage("--phase only applies to --task da".into())),
    };
    if run.train.da_phase == Some(DaPhase::JointPi) && init.is_none() {
        return Err(Error::Usage("--phase joint-pi needs --init <source-pi checkpoint>".into()));
    }
    run.train.validate()?;
    let out = out
        .or_else(|| run.out_dir.clone())
        .ok_or_else(|| Error::Usage("no output directory: pass --out or set out_dir".into()))?;
    let init_ck = init.as_deref().map(checkpoint::load).transpose()?;
    let hash = run.hash();
    let seed = run.train.seed;

    let gzsl;
    let seen_sem;
    let fsl;
    let da;
    let data = match task {
        Task::Gzsl => {
            gzsl = gzsl_data(&run.data)?;
            seen_sem = gzsl.seen_semantics()?;
            TrainData::Gzsl { train: &gzsl.train, semantics: &seen_sem }
        }
        Task::Fsl => {
            fsl = fsl_data(&run.data)?;
            TrainData::Fsl { train: &fsl.train }
        }
        Task::Da => {
            da = da_data(&run.data)?;
            let target = (run.train.da_phase == Some(DaPhase::JointPi)).then_some(&da.target);
            TrainData::Da { source: &da.source, target }
        }
    };

    create_dir(&out)?;
    let metrics_path = out.join(METRICS_FILE);
    let mut file = std::fs::File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    let mut io_err = None;
    let (ck, _) = trainer::train(&run.train, &data, init_ck.as_ref(), |m| {
        let line = epoch_line(m, seed, &hash);
        if let Err(e) = writeln!(file, "{line}") {
            io_err.get_or_insert(e);
        }
        eprintln!("epoch {} total {:.6} train_acc {:.4}", m.epoch, m.losses.total, m.train_acc);
    })?;
    if let Some(e) = io_err {
        return Err(Error::io(&metrics_path, e));
    }
    checkpoint::save(&ck, &out.join(CHECKPOINT_FILE))?;
    let info = TrainInfo { task: task.name(), epochs: run.train.epochs, output_dim: ck.output_dim, init };
    write_manifest(
        &out,
        &Manifest { command: "train", config_hash: hash, seed, seed_from_env: from_env, extra: info, created_unix: now_unix() },
    )?;
    Ok(0)
}

#[derive(Debug, Clone, Copy)]
pub struct FslArgs {
    pub ways: usize,
    pub shots: usize,
    pub queries: usize,
    pub episodes: usize,
}

#[derive(Serialize)]
#[serde(tag = "task", rename_all = "lowercase")]
enum EvalOutput {
    Gzsl {
        ts: f64,
        tr: f64,
        #[serde(rename = "H")]
        h: f64,
        c_cs: f64,
        ts_cs: f64,
        tr_cs: f64,
        #[serde(rename = "H_cs")]
        h_cs: f64,
        excluded: Vec<usize>,
    },
    Fsl {
        mean_acc: f64,
        stderr: f64,
        episodes: usize,
    },
    Da {
        target_acc: f64,
    },
}

fn load_for(task: Task, ck_path: &Path) -> Result<Checkpoint> {
    let ck = checkpoint::load(ck_path)?;
    if ck.config.task != task {
        return Err(Error::Usage(format!(
            "checkpoint {} was trained for {}, not {}",
            ck_path.display(),
            ck.config.task.name(),
            task.name()
        )));
    }
    Ok(ck)
}

fn cmd_eval(task: Task, ck_path: &Path, config: &Path, fsl: FslArgs, out: Option<PathBuf>) -> Result<u8> {
    let ck = load_for(task, ck_path)?;
    let mut run = RunConfig::load(config)?;
    run.train.seed = ck.config.seed;
    run.apply_seed_env()?;
    let model = ck.model()?;
    let result = match task {
        Task::Gzsl => {
            let d = gzsl_data(&run.data)?;
            // Half of every test class calibrates c_cs, the other half is scored.
            let (val, test) = sample_split(&d.test, 0.5, run.data.split_seed)?;
            let c_cs = eval::calibrate_c_cs(&model, &val, &d.semantics, &d.split)?;
            let plain = eval::evaluate_gzsl(&model, &test, &d.semantics, &d.split, 0.0)?;
            let cs = eval::evaluate_gzsl(&model, &test, &d.semantics, &d.split, c_cs)?;
            EvalOutput::Gzsl {
                ts: plain.ts,
                tr: plain.tr,
                h: plain.h,
                c_cs,
                ts_cs: cs.ts,
                tr_cs: cs.tr,
                h_cs: cs.h,
                excluded: plain.excluded,
            }
        }
        Task::Fsl => {
            let d = fsl_data(&run.data)?;
            let r = eval::evaluate_fsl(&model, &d.test, fsl.ways, fsl.shots, fsl.queries, fsl.episodes, run.train.seed)?;
            EvalOutput::Fsl { mean_acc: r.mean_acc, stderr: r.stderr, episodes: r.episodes }
        }
        Task::Da => {
            let d = da_data(&run.data)?;
            EvalOutput::Da { target_acc: eval::evaluate_da(&model, &d.target)? }
        }
    };
    let text = serde_json::to_string(&result).expect("metrics serialize");
    println!("{text}");
    let path = out.unwrap_or_else(|| {
        ck_path.parent().unwrap_or(Path::new(".")).join(format!("eval-{}.json", task.name()))
    });
    write(&path, format!("{text}\n").as_bytes())?;
    Ok(0)
}

/// True when the GZSL output's `H` is the harmonic mean of its `ts` and `tr`.
pub fn gzsl_output_consistent(v: &serde_json::Value) -> bool {
    let f = |k: &str| v[k].as_f64();
    match (f("ts"), f("tr"), f("H")) {
        (Some(ts), Some(tr), Some(h)) => (harmonic_mean(ts, tr).unwrap_or(0.0) - h).abs() <= 1e-9,
        _ => false,
    }
}

fn cmd_dump_pi(ck_path: &Path, config: &Path, set: SetArg, out: &Path) -> Result<u8> {
    let ck = checkpoint::load(ck_path)?;
    let run = RunConfig::load(config)?;
    let model = ck.model()?;
    let pick = |train: LabeledImageSet, test: LabeledImageSet| match set {
        SetArg::Train => train,
        SetArg::Test => test,
    };
    let data = match ck.config.task {
        Task::Gzsl => {
            let d = gzsl_data(&run.data)?;
            pick(d.train, d.test)
        }
        Task::Fsl => {
            let d = fsl_data(&run.data)?;
            pick(d.train, d.test)
        }
        Task::Da => {
            let d = da_data(&run.data)?;
            pick(d.source, d.target)
        }
    };
    let codes = eval::encode_all(&model, &data)?;
    write(out, pi_csv(&data.labels, data.domain, &codes).as_bytes())?;
    Ok(0)
}

fn cmd_gradcheck(seed: u64, corrupt: Option<&str>) -> Result<u8> {
    if let Some(c) = corrupt {
        if !LOSSES.contains(&c) {
            return Err(Error::Usage(format!("unknown loss `{c}`, expected one of {}", LOSSES.join(", "))));
        }
    }
    let checks = run_gradient_suite(seed, corrupt)?;
    println!("{:<8} {:>14}  {:<32} status", "loss", "max_rel_err", "worst_param");
    let mut failed = Vec::new();
    for c in &checks {
        let worst = c.report.worst().map_or("-", |p| p.name.as_str());
        let status = if c.passed() { "ok" } else { "FAIL" };
        println!("{:<8} {:>14.6e}  {:<32} {status}", c.loss, c.report.max_rel_error(), worst);
        if !c.passed() {
            failed.push(c.worst_param());
        }
    }
    if failed.is_empty() {
        println!("all losses within {SUITE_TOL:e}");
        Ok(0)
    } else {
        eprintln!("gradient check failed: {}", failed.join(", "));
        Ok(1)
    }
}

#[derive(Serialize)]
struct SynthInfo<'a> {
    spec: &'a SynthSpec,
    classes: usize,
    samples: usize,
}

fn cmd_gen_synth(spec_path: &Path, out: &Path) -> Result<u8> {
    let text = String::from_utf8(read(spec_path)?).map_err(|_| Error::format(spec_path, "spec is not UTF-8"))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    let mut spec: SynthSpec = serde_path_to_error::deserialize(de).map_err(|e| Error::Config {
        path: spec_path.into(),
        field: e.path().to_string(),
        detail: e.into_inner().to_string(),
    })?;
    let from_env = match std::env::var(SEED_ENV) {
        Ok(s) => {
            spec.seed = s.trim().parse().map_err(|_| Error::Usage(format!("{SEED_ENV}={s} is not an unsigned integer")))?;
            true
        }
        Err(_) => false,
    };
    let set = generate_synthetic(&spec).map_err(|e| Error::Config {
        path: spec_path.into(),
        field: String::new(),
        detail: e.to_string(),
    })?;
    create_dir(out)?;
    write_idx(&set, &out.join(IMAGES_FILE), &out.join(LABELS_FILE))?;
    let sem = set.semantics.as_ref().expect("synthetic sets carry semantics");
    write(&out.join(SEMANTICS_FILE), semantics_csv(sem).as_bytes())?;
    let info = SynthInfo { spec: &spec, classes: set.num_classes, samples: set.len() };
    write_manifest(
        out,
        &Manifest {
            command: "gen-synth",
            config_hash: config_hash(&spec),
            seed: spec.seed,
            seed_from_env: from_env,
            extra: info,
            created_unix: now_unix(),
        },
    )?;
    Ok(0)
}
