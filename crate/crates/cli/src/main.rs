//! Command-line front end for the two-stage denoising and complementation
//! engine: dataset generation and conversion, both training stages,
//! evaluation, the ablation and noise grids, similarity analysis, and
//! gradient verification.
//!
//! Every command that writes artifacts also writes `run_record.json` with
//! the resolved config, seed, and output paths. All outputs are a
//! deterministic function of the flags and seed; only the record's
//! timestamp varies between identical runs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use tmdc_core::data::{
    gen_synthetic, load_dataset, save_dataset, write_tensor, Dataset, Label, ModalityBundle,
    Pattern, Sample, Scenario, SynthSpec, TaskKind,
};
use tmdc_core::model::checks::{gradient_suite, GRAD_TOL};
use tmdc_core::model::{AblationConfig, ModelConfig};
use tmdc_core::tensor::Tensor;
use tmdc_core::train::checkpoint::{self, Checkpoint};
use tmdc_core::train::{
    apply_scenario, cosine_analysis, eval_prepared, feat_dims, fused_embeddings, prepare_splits,
    train_imc, train_imd, write_cosine_csv, write_loss_csv, write_metrics_json, ResumeState,
    Splits, Stage2Start, TrainConfig, F_TRAIN, F_VAL,
};

/// Synthetic benchmark size; matches the desk-scale evaluation protocol.
const SYNTH_N: usize = 2000;
const SYNTH_SHARED_DIM: usize = 8;

/// Seeds per cell in the ablation table.
const ABLATE_SEEDS: u64 = 5;

#[derive(Debug)]
enum CliError {
    /// Bad flags or flag values; exits 2.
    Usage(String),
    /// Failures past argument parsing; exits 1.
    Runtime(String),
}

type Result<T> = std::result::Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

#[derive(Parser)]
#[command(
    name = "tmdc",
    version,
    about = "Two-stage multimodal denoising and complementation engine"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic multimodal benchmark dataset.
    GenSynth(GenSynthArgs),
    /// Convert a JSON feature dump into the binary dataset layout.
    Convert(ConvertArgs),
    /// Stage 1: denoising pretraining on complete data.
    TrainImd(TrainImdArgs),
    /// Stage 2: complementation training under a missingness scenario.
    TrainImc(TrainImcArgs),
    /// Score a checkpoint on the test split and dump fused embeddings.
    Eval(EvalArgs),
    /// Train and score every module-removal variant over seeds and patterns.
    Ablate(AblateArgs),
    /// Run the full 7-pattern x {0,5,10,20} noise robustness grid.
    NoiseGrid(NoiseGridArgs),
    /// Emit the 6x6 mean cosine-similarity matrix of refined representations.
    AnalyzeCosine(AnalyzeCosineArgs),
    /// Verify tape gradients against finite differences.
    Gradcheck(GradcheckArgs),
}

/// Training hyperparameters shared by every run-producing command. Flags
/// mirror the config fields; a profile supplies defaults and explicit flags
/// override it.
#[derive(Args, Clone)]
struct HyperArgs {
    /// Hyperparameter profile: mosi, mosei, iemocap, or synth.
    #[arg(long, default_value = "synth")]
    profile: String,
    /// Master seed for init, batching, noise, and sampled draws.
    #[arg(long)]
    seed: Option<u64>,
    /// Weight of the KL terms in the stage-1 objective.
    #[arg(long)]
    beta: Option<f64>,
    /// Adam learning rate.
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    /// Model width D.
    #[arg(long)]
    dim: Option<usize>,
    /// Stage-1 epoch count.
    #[arg(long = "epochs-imd")]
    epochs_imd: Option<usize>,
    /// Stage-2 epoch count.
    #[arg(long = "epochs-imc")]
    epochs_imc: Option<usize>,
    /// Disable a stage or module (repeatable).
    #[arg(long, value_parser = ["imd", "imc", "msd", "mcd"])]
    ablate: Vec<String>,
}

impl HyperArgs {
    fn resolve(&self, pattern: Option<&str>, noise_sigma: Option<f64>) -> Result<TrainConfig> {
        let mut tc = TrainConfig::profile(&self.profile).ok_or_else(|| {
            usage(format!(
                "--profile {:?} is not one of mosi, mosei, iemocap, synth",
                self.profile
            ))
        })?;
        if let Some(v) = self.seed {
            tc.seed = v;
        }
        if let Some(v) = self.beta {
            tc.beta = v;
        }
        if let Some(v) = self.lr {
            tc.lr = v;
        }
        if let Some(v) = self.batch_size {
            tc.batch_size = v;
        }
        if let Some(v) = self.dropout {
            tc.dropout = v;
        }
        if let Some(v) = self.dim {
            tc.d = v;
        }
        if let Some(v) = self.epochs_imd {
            tc.imd_epochs = v;
        }
        if let Some(v) = self.epochs_imc {
            tc.imc_epochs = v;
        }
        for a in &self.ablate {
            match a.as_str() {
                "imd" => tc.ablation.use_imd_pretrain = false,
                "imc" => tc.ablation.use_imc_complement = false,
                "msd" => tc.ablation.use_msd = false,
                "mcd" => tc.ablation.use_mcd = false,
                other => return Err(usage(format!("--ablate {other:?} is not a known target"))),
            }
        }
        tc.ablation
            .validate()
            .map_err(|e| usage(format!("--ablate: {e}")))?;
        let pat = match pattern {
            Some(p) => Pattern::parse(p).map_err(|e| usage(format!("--pattern: {e}")))?,
            None => tc.scenario.pattern,
        };
        let sigma = noise_sigma.unwrap_or(tc.scenario.noise_sigma);
        tc.scenario =
            Scenario::new(pat, sigma).map_err(|e| usage(format!("--noise-sigma: {e}")))?;
        Ok(tc)
    }
}

#[derive(Args)]
struct GenSynthArgs {
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// `iemocap` generates the 4-class variant; anything else binary.
    #[arg(long, default_value = "synth")]
    profile: String,
}

#[derive(Args)]
struct ConvertArgs {
    /// Input JSON: {"task": ..., "samples": [{id, label, audio, text, video}]}.
    #[arg(long)]
    data: PathBuf,
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainImdArgs {
    #[command(flatten)]
    hyper: HyperArgs,
    /// Noise intensity applied to the training features.
    #[arg(long)]
    noise_sigma: Option<f64>,
    /// Dataset directory (manifest.json plus feature files).
    #[arg(long)]
    data: PathBuf,
    /// Run directory: checkpoint/, loss.csv, run_record.json.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainImcArgs {
    #[command(flatten)]
    hyper: HyperArgs,
    /// Availability pattern for the scenario, e.g. "T,V".
    #[arg(long)]
    pattern: Option<String>,
    #[arg(long)]
    noise_sigma: Option<f64>,
    #[arg(long)]
    data: PathBuf,
    /// Stage-1 run to start from, or a stage-2 run directory to resume.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Run directory: best/, last/, metrics.json, val_curve.csv.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    hyper: HyperArgs,
    #[arg(long)]
    pattern: Option<String>,
    #[arg(long)]
    noise_sigma: Option<f64>,
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint or run directory to score.
    #[arg(long)]
    init: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    hyper: HyperArgs,
    /// Restrict the table to one pattern; default is all seven.
    #[arg(long)]
    pattern: Option<String>,
    #[arg(long)]
    noise_sigma: Option<f64>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct NoiseGridArgs {
    #[command(flatten)]
    hyper: HyperArgs,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AnalyzeCosineArgs {
    #[command(flatten)]
    hyper: HyperArgs,
    #[arg(long)]
    pattern: Option<String>,
    #[arg(long)]
    noise_sigma: Option<f64>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    init: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Optional directory for gradcheck.json.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Provenance sidecar written into every output directory. The timestamp is
/// the only field allowed to differ between identical invocations.
#[derive(Serialize)]
struct RunRecord<'a> {
    command: &'static str,
    seed: u64,
    config: Option<&'a TrainConfig>,
    outputs: BTreeMap<&'static str, String>,
    unix_time_secs: u64,
}

fn write_run_record(
    dir: &Path,
    command: &'static str,
    seed: u64,
    config: Option<&TrainConfig>,
    outputs: &[(&'static str, &str)],
) -> Result<()> {
    let rec = RunRecord {
        command,
        seed,
        config,
        outputs: outputs.iter().map(|&(k, v)| (k, v.to_string())).collect(),
        unix_time_secs: SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
    };
    let json = serde_json::to_string_pretty(&rec).map_err(runtime)?;
    write_file(&dir.join("run_record.json"), &(json + "\n"))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| runtime(format!("cannot create {}: {e}", dir.display())))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| runtime(format!("cannot write {}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let json = serde_json::to_string_pretty(value).map_err(runtime)?;
    write_file(path, &(json + "\n"))
}

fn load_data(path: &Path) -> Result<Dataset> {
    load_dataset(path).map_err(|e| runtime(format!("--data {}: {e}", path.display())))
}

/// Loads a dataset and aligns the config's task with it; labels, not
/// profiles, decide the task.
fn load_for_run(tc: &mut TrainConfig, path: &Path) -> Result<Splits> {
    let ds = load_data(path)?;
    tc.task = ds.task;
    prepare_splits(&ds, F_TRAIN, F_VAL).map_err(runtime)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

fn run(cmd: &Cmd) -> Result<()> {
    match cmd {
        Cmd::GenSynth(a) => cmd_gen_synth(a),
        Cmd::Convert(a) => cmd_convert(a),
        Cmd::TrainImd(a) => cmd_train_imd(a),
        Cmd::TrainImc(a) => cmd_train_imc(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Ablate(a) => cmd_ablate(a),
        Cmd::NoiseGrid(a) => cmd_noise_grid(a),
        Cmd::AnalyzeCosine(a) => cmd_analyze_cosine(a),
        Cmd::Gradcheck(a) => cmd_gradcheck(a),
    }
}

fn cmd_gen_synth(a: &GenSynthArgs) -> Result<()> {
    let spec = if a.profile == "iemocap" {
        SynthSpec::four_class(SYNTH_N, SYNTH_SHARED_DIM, a.seed)
    } else {
        SynthSpec::binary(SYNTH_N, SYNTH_SHARED_DIM, a.seed)
    };
    let ds = gen_synthetic(&spec).map_err(runtime)?;
    save_dataset(&a.out, "all", &ds).map_err(runtime)?;
    println!("wrote {} samples to {}", ds.len(), a.out.display());
    write_run_record(&a.out, "gen-synth", a.seed, None, &[("dataset", "manifest.json")])
}

#[derive(Deserialize)]
struct ConvertFile {
    task: TaskKind,
    samples: Vec<ConvertSample>,
}

#[derive(Deserialize)]
struct ConvertSample {
    id: String,
    label: Label,
    audio: Vec<Vec<f64>>,
    text: Vec<Vec<f64>>,
    video: Vec<Vec<f64>>,
}

fn matrix(rows: &[Vec<f64>], what: &str, id: &str) -> Result<Tensor> {
    if rows.is_empty() || rows[0].is_empty() {
        return Err(runtime(format!("sample {id}: {what} matrix is empty")));
    }
    let cols = rows[0].len();
    if rows.iter().any(|r| r.len() != cols) {
        return Err(runtime(format!(
            "sample {id}: {what} rows have uneven lengths"
        )));
    }
    let data: Vec<f64> = rows.iter().flatten().copied().collect();
    Tensor::new(&[rows.len(), cols], data).map_err(runtime)
}

/// Untagged labels parse integers as class indices; reconcile with the
/// declared task so regression files may use integer scores and
/// classification files float-typed indices.
fn coerce_label(task: TaskKind, label: Label, id: &str) -> Result<Label> {
    match (task, label) {
        (TaskKind::Regression, Label::Class(c)) => Ok(Label::Score(c as f64)),
        (TaskKind::Regression, l) => Ok(l),
        (TaskKind::Classification { classes }, Label::Score(s)) => {
            if s.fract() == 0.0 && s >= 0.0 && (s as usize) < classes {
                Ok(Label::Class(s as usize))
            } else {
                Err(runtime(format!(
                    "sample {id}: label {s} is not a class index below {classes}"
                )))
            }
        }
        (TaskKind::Classification { classes }, Label::Class(c)) => {
            if c < classes {
                Ok(Label::Class(c))
            } else {
                Err(runtime(format!(
                    "sample {id}: class {c} is out of range for {classes} classes"
                )))
            }
        }
    }
}

fn cmd_convert(a: &ConvertArgs) -> Result<()> {
    let raw = fs::read_to_string(&a.data)
        .map_err(|e| runtime(format!("--data {}: {e}", a.data.display())))?;
    let file: ConvertFile = serde_json::from_str(&raw)
        .map_err(|e| runtime(format!("--data {}: {e}", a.data.display())))?;
    let mut seen = std::collections::BTreeSet::new();
    let mut samples = Vec::with_capacity(file.samples.len());
    for s in &file.samples {
        if s.id.is_empty() || s.id.contains(['/', '\\']) {
            return Err(runtime(format!("sample id {:?} is not a plain name", s.id)));
        }
        if !seen.insert(&s.id) {
            return Err(runtime(format!("duplicate sample id {:?}", s.id)));
        }
        let feats = [
            matrix(&s.audio, "audio", &s.id)?,
            matrix(&s.text, "text", &s.id)?,
            matrix(&s.video, "video", &s.id)?,
        ];
        samples.push(Sample {
            id: s.id.clone(),
            bundle: ModalityBundle {
                feats,
                available: [true; 3],
                label: coerce_label(file.task, s.label, &s.id)?,
            },
        });
    }
    if samples.is_empty() {
        return Err(runtime("input holds no samples"));
    }
    let ds = Dataset {
        task: file.task,
        samples,
    };
    feat_dims(&ds).map_err(runtime)?;
    save_dataset(&a.out, "all", &ds).map_err(runtime)?;
    println!("converted {} samples to {}", ds.len(), a.out.display());
    write_run_record(&a.out, "convert", 0, None, &[("dataset", "manifest.json")])
}

fn cmd_train_imd(a: &TrainImdArgs) -> Result<()> {
    let mut tc = a.hyper.resolve(None, a.noise_sigma)?;
    let splits = load_for_run(&mut tc, &a.data)?;
    let out1 = train_imd(&tc, &splits).map_err(runtime)?;
    ensure_dir(&a.out)?;
    write_loss_csv(&a.out.join("loss.csv"), &out1.rows).map_err(runtime)?;
    let mut extra = BTreeMap::new();
    extra.insert("stage".to_string(), serde_json::json!("imd"));
    extra.insert("epochs".to_string(), serde_json::json!(tc.imd_epochs));
    let ckpt = Checkpoint {
        config: out1.cfg,
        params: out1.params,
        adam: Some(out1.adam),
        extra,
    };
    checkpoint::save(&a.out.join("checkpoint"), &ckpt).map_err(runtime)?;
    if let Some(last) = out1.rows.last() {
        println!("stage 1 done: epoch {} total {:.6}", last.epoch, last.total);
    } else {
        println!("stage 1 done: 0 epochs, initialized parameters saved");
    }
    write_run_record(
        &a.out,
        "train-imd",
        tc.seed,
        Some(&tc),
        &[("checkpoint", "checkpoint"), ("loss_table", "loss.csv")],
    )
}

/// Where a checkpoint lives under an `--init` path: the directory itself, a
/// stage-2 run (`last/` + `best/`), or a stage-1 run (`checkpoint/`).
enum InitKind {
    Bare,
    Stage2Run,
    Stage1Run,
}

fn find_init(path: &Path, prefer_best: bool) -> Result<(PathBuf, InitKind)> {
    if path.join("index.json").is_file() {
        return Ok((path.to_path_buf(), InitKind::Bare));
    }
    if path.join("last").join("index.json").is_file() {
        let sub = if prefer_best { "best" } else { "last" };
        return Ok((path.join(sub), InitKind::Stage2Run));
    }
    if path.join("checkpoint").join("index.json").is_file() {
        return Ok((path.join("checkpoint"), InitKind::Stage1Run));
    }
    Err(runtime(format!(
        "--init {}: no checkpoint here (expected index.json, last/, or checkpoint/)",
        path.display()
    )))
}

fn load_init(path: &Path, prefer_best: bool) -> Result<(Checkpoint, InitKind)> {
    let (dir, kind) = find_init(path, prefer_best)?;
    let ck = checkpoint::load(&dir).map_err(runtime)?;
    Ok((ck, kind))
}

/// The fields that determine the parameter tree and scoring protocol must
/// match; training-only knobs like dropout may differ.
fn require_compatible(ck: &ModelConfig, run: &ModelConfig) -> Result<()> {
    let ok = ck.d == run.d
        && ck.t == run.t
        && ck.n_heads == run.n_heads
        && ck.feat_dims == run.feat_dims
        && ck.task == run.task
        && ck.sigma_param == run.sigma_param
        && ck.ablation.use_msd == run.ablation.use_msd
        && ck.ablation.use_mcd == run.ablation.use_mcd;
    if ok {
        Ok(())
    } else {
        Err(runtime(format!(
            "checkpoint architecture does not match this run: checkpoint {ck:?}, run {run:?}"
        )))
    }
}

fn extra_usize(extra: &BTreeMap<String, serde_json::Value>, key: &str) -> Result<usize> {
    extra
        .get(key)
        .and_then(|v| v.as_u64())
        .map(|v| v as usize)
        .ok_or_else(|| runtime(format!("resume checkpoint lacks the {key:?} field")))
}

fn extra_f64(extra: &BTreeMap<String, serde_json::Value>, key: &str) -> Result<f64> {
    extra
        .get(key)
        .and_then(|v| v.as_f64())
        .ok_or_else(|| runtime(format!("resume checkpoint lacks the {key:?} field")))
}

fn cmd_train_imc(a: &TrainImcArgs) -> Result<()> {
    let mut tc = a
        .hyper
        .resolve(a.pattern.as_deref(), a.noise_sigma)?;
    let splits = load_for_run(&mut tc, &a.data)?;
    let cfg = tc.model_config(feat_dims(&splits.train).map_err(runtime)?);

    let start = match &a.init {
        None => {
            if tc.ablation.use_imd_pretrain {
                return Err(usage(
                    "--init is required unless stage 1 is disabled with --ablate imd",
                ));
            }
            Stage2Start::Scratch
        }
        Some(path) => {
            let (ck, kind) = load_init(path, false)?;
            require_compatible(&ck.config, &cfg)?;
            match kind {
                InitKind::Stage2Run => {
                    let best = checkpoint::load(&path.join("best")).map_err(runtime)?;
                    let adam = ck
                        .adam
                        .ok_or_else(|| runtime("resume checkpoint lacks optimizer state"))?;
                    Stage2Start::Resume(ResumeState {
                        epochs_done: extra_usize(&ck.extra, "epochs_done")?,
                        best_epoch: extra_usize(&ck.extra, "best_epoch")?,
                        best_metric: extra_f64(&ck.extra, "best_metric")?,
                        params: ck.params,
                        adam,
                        best_params: best.params,
                    })
                }
                _ => Stage2Start::Pretrained(ck.params),
            }
        }
    };

    let out2 = train_imc(&tc, &splits, start).map_err(runtime)?;
    ensure_dir(&a.out)?;

    let mut best_extra = BTreeMap::new();
    best_extra.insert("stage".to_string(), serde_json::json!("imc-best"));
    best_extra.insert("best_epoch".to_string(), serde_json::json!(out2.best_epoch));
    best_extra.insert(
        "best_metric".to_string(),
        serde_json::json!(out2.best_metric),
    );
    checkpoint::save(
        &a.out.join("best"),
        &Checkpoint {
            config: out2.cfg.clone(),
            params: out2.best_params,
            adam: None,
            extra: best_extra,
        },
    )
    .map_err(runtime)?;

    let mut last_extra = BTreeMap::new();
    last_extra.insert("stage".to_string(), serde_json::json!("imc"));
    last_extra.insert(
        "epochs_done".to_string(),
        serde_json::json!(out2.epochs_done),
    );
    last_extra.insert("best_epoch".to_string(), serde_json::json!(out2.best_epoch));
    last_extra.insert(
        "best_metric".to_string(),
        serde_json::json!(out2.best_metric),
    );
    checkpoint::save(
        &a.out.join("last"),
        &Checkpoint {
            config: out2.cfg,
            params: out2.last_params,
            adam: Some(out2.adam),
            extra: last_extra,
        },
    )
    .map_err(runtime)?;

    write_metrics_json(&a.out.join("metrics.json"), &out2.report).map_err(runtime)?;
    let mut curve = String::from("epoch,selection\n");
    let first = out2.epochs_done - out2.val_curve.len();
    for (i, v) in out2.val_curve.iter().enumerate() {
        writeln!(curve, "{},{v}", first + i + 1).expect("string write");
    }
    write_file(&a.out.join("val_curve.csv"), &curve)?;

    println!(
        "stage 2 done: best epoch {} selection {:.4}, test selection {:.4}",
        out2.best_epoch,
        out2.best_metric,
        out2.report.selection_score()
    );
    write_run_record(
        &a.out,
        "train-imc",
        tc.seed,
        Some(&tc),
        &[
            ("best", "best"),
            ("last", "last"),
            ("metrics", "metrics.json"),
            ("val_curve", "val_curve.csv"),
        ],
    )
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let mut tc = a
        .hyper
        .resolve(a.pattern.as_deref(), a.noise_sigma)?;
    let splits = load_for_run(&mut tc, &a.data)?;
    let (ck, _) = load_init(&a.init, true)?;
    require_compatible(
        &ck.config,
        &tc.model_config(feat_dims(&splits.train).map_err(runtime)?),
    )?;
    let test = apply_scenario(&splits.test, &tc.scenario, tc.seed).map_err(runtime)?;
    let report = eval_prepared(&ck.config, &ck.params, &test).map_err(runtime)?;
    let emb = fused_embeddings(&ck.config, &ck.params, &test).map_err(runtime)?;
    ensure_dir(&a.out)?;
    write_metrics_json(&a.out.join("metrics.json"), &report).map_err(runtime)?;
    write_tensor(&a.out.join("embeddings.tmdf"), &emb).map_err(runtime)?;
    println!(
        "eval: n {} acc {:.4} wa {:.4} ua {:.4}",
        report.n_eval, report.acc, report.wa, report.ua
    );
    write_run_record(
        &a.out,
        "eval",
        tc.seed,
        Some(&tc),
        &[("metrics", "metrics.json"), ("embeddings", "embeddings.tmdf")],
    )
}

fn cmd_analyze_cosine(a: &AnalyzeCosineArgs) -> Result<()> {
    let mut tc = a
        .hyper
        .resolve(a.pattern.as_deref(), a.noise_sigma)?;
    let splits = load_for_run(&mut tc, &a.data)?;
    let (ck, _) = load_init(&a.init, true)?;
    require_compatible(
        &ck.config,
        &tc.model_config(feat_dims(&splits.train).map_err(runtime)?),
    )?;
    let test = apply_scenario(&splits.test, &tc.scenario, tc.seed).map_err(runtime)?;
    let m = cosine_analysis(&ck.config, &ck.params, &test).map_err(runtime)?;
    ensure_dir(&a.out)?;
    write_cosine_csv(&a.out.join("cosine.csv"), &m).map_err(runtime)?;
    println!(
        "cosine matrix over {} samples ({} zero-norm slots)",
        m.n,
        m.zero_norms.iter().sum::<usize>()
    );
    write_run_record(
        &a.out,
        "analyze-cosine",
        tc.seed,
        Some(&tc),
        &[("cosine", "cosine.csv")],
    )
}

fn variant_ablations() -> [(&'static str, AblationConfig); 5] {
    let full = AblationConfig::default();
    [
        ("full", full),
        (
            "wo-imd",
            AblationConfig {
                use_imd_pretrain: false,
                ..full
            },
        ),
        (
            "wo-imc",
            AblationConfig {
                use_imc_complement: false,
                ..full
            },
        ),
        (
            "wo-msd",
            AblationConfig {
                use_msd: false,
                ..full
            },
        ),
        (
            "wo-mcd",
            AblationConfig {
                use_mcd: false,
                ..full
            },
        ),
    ]
}

#[derive(Serialize)]
struct AblationCell {
    variant: &'static str,
    pattern: String,
    acc: Vec<f64>,
    mean_acc: f64,
}

#[derive(Serialize)]
struct AblationTable {
    seeds: Vec<u64>,
    noise_sigma: f64,
    patterns: Vec<String>,
    variants: Vec<&'static str>,
    cells: Vec<AblationCell>,
}

fn cmd_ablate(a: &AblateArgs) -> Result<()> {
    if !a.hyper.ablate.is_empty() {
        return Err(usage(
            "--ablate conflicts with the built-in variant sweep of this command",
        ));
    }
    let mut base = a.hyper.resolve(None, a.noise_sigma)?;
    let splits = load_for_run(&mut base, &a.data)?;
    let patterns: Vec<Pattern> = match &a.pattern {
        Some(p) => vec![Pattern::parse(p).map_err(|e| usage(format!("--pattern: {e}")))?],
        None => Pattern::all_seven().to_vec(),
    };
    let variants = variant_ablations();
    let seeds: Vec<u64> = (0..ABLATE_SEEDS).map(|i| base.seed + i).collect();

    let mut cells: Vec<AblationCell> = variants
        .iter()
        .flat_map(|&(name, _)| {
            patterns.iter().map(move |p| AblationCell {
                variant: name,
                pattern: p.to_string(),
                acc: Vec::new(),
                mean_acc: 0.0,
            })
        })
        .collect();

    for (vi, &(name, ablation)) in variants.iter().enumerate() {
        for &seed in &seeds {
            let tc_v = TrainConfig {
                seed,
                ablation,
                ..base.clone()
            };
            let stage1 = if ablation.use_imd_pretrain {
                Some(train_imd(&tc_v, &splits).map_err(runtime)?)
            } else {
                None
            };
            for (pi, &p) in patterns.iter().enumerate() {
                let tc_vp = TrainConfig {
                    scenario: Scenario::new(p, base.scenario.noise_sigma).map_err(runtime)?,
                    ..tc_v.clone()
                };
                let start = match &stage1 {
                    Some(s1) => Stage2Start::Pretrained(s1.params.clone()),
                    None => Stage2Start::Scratch,
                };
                let out2 = train_imc(&tc_vp, &splits, start).map_err(runtime)?;
                cells[vi * patterns.len() + pi].acc.push(out2.report.acc);
            }
            println!("variant {name} seed {seed} done");
        }
    }
    for c in &mut cells {
        c.mean_acc = c.acc.iter().sum::<f64>() / c.acc.len() as f64;
    }

    let table = AblationTable {
        seeds,
        noise_sigma: base.scenario.noise_sigma,
        patterns: patterns.iter().map(|p| p.to_string()).collect(),
        variants: variants.iter().map(|&(n, _)| n).collect(),
        cells,
    };
    ensure_dir(&a.out)?;
    write_json(&a.out.join("ablation.json"), &table)?;
    write_run_record(
        &a.out,
        "ablate",
        base.seed,
        Some(&base),
        &[("table", "ablation.json")],
    )
}

#[derive(Serialize)]
struct NoiseGridTable {
    seed: u64,
    n_eval: usize,
    patterns: Vec<String>,
    sigmas: Vec<f64>,
    /// Row per pattern, column per sigma.
    acc: Vec<Vec<f64>>,
    f1: Vec<Vec<Option<f64>>>,
    wa: Vec<Vec<f64>>,
    ua: Vec<Vec<f64>>,
}

fn cmd_noise_grid(a: &NoiseGridArgs) -> Result<()> {
    let mut base = a.hyper.resolve(None, None)?;
    let splits = load_for_run(&mut base, &a.data)?;
    let patterns = Pattern::all_seven();
    let sigmas = Scenario::SIGMA_GRID;

    let mut acc = vec![vec![0.0; sigmas.len()]; patterns.len()];
    let mut f1 = vec![vec![None; sigmas.len()]; patterns.len()];
    let mut wa = vec![vec![0.0; sigmas.len()]; patterns.len()];
    let mut ua = vec![vec![0.0; sigmas.len()]; patterns.len()];

    for (si, &sigma) in sigmas.iter().enumerate() {
        let tc_s = TrainConfig {
            scenario: Scenario::new(Pattern::full(), sigma).map_err(runtime)?,
            ..base.clone()
        };
        let stage1 = if tc_s.ablation.use_imd_pretrain {
            Some(train_imd(&tc_s, &splits).map_err(runtime)?)
        } else {
            None
        };
        for (pi, &p) in patterns.iter().enumerate() {
            let tc_sp = TrainConfig {
                scenario: Scenario::new(p, sigma).map_err(runtime)?,
                ..base.clone()
            };
            let start = match &stage1 {
                Some(s1) => Stage2Start::Pretrained(s1.params.clone()),
                None => Stage2Start::Scratch,
            };
            let out2 = train_imc(&tc_sp, &splits, start).map_err(runtime)?;
            acc[pi][si] = out2.report.acc;
            f1[pi][si] = out2.report.f1;
            wa[pi][si] = out2.report.wa;
            ua[pi][si] = out2.report.ua;
        }
        println!("sigma {sigma} done");
    }

    let table = NoiseGridTable {
        seed: base.seed,
        n_eval: splits.test.len(),
        patterns: patterns.iter().map(|p| p.to_string()).collect(),
        sigmas: sigmas.to_vec(),
        acc,
        f1,
        wa,
        ua,
    };
    ensure_dir(&a.out)?;
    write_json(&a.out.join("noise_grid.json"), &table)?;
    write_run_record(
        &a.out,
        "noise-grid",
        base.seed,
        Some(&base),
        &[("table", "noise_grid.json")],
    )
}

#[derive(Serialize)]
struct GradcheckReport {
    tolerance: f64,
    max_err: f64,
    pass: bool,
    items: Vec<(String, f64)>,
}

fn cmd_gradcheck(a: &GradcheckArgs) -> Result<()> {
    let items = gradient_suite().map_err(runtime)?;
    let mut max_err = 0.0f64;
    for it in &items {
        println!("{:<44} {:.3e}", it.name, it.err);
        max_err = max_err.max(it.err);
    }
    let pass = max_err.is_finite() && max_err < GRAD_TOL;
    println!(
        "max relative error {max_err:.3e}, tolerance {GRAD_TOL:.0e}: {}",
        if pass { "pass" } else { "FAIL" }
    );
    if let Some(out) = &a.out {
        ensure_dir(out)?;
        let report = GradcheckReport {
            tolerance: GRAD_TOL,
            max_err,
            pass,
            items: items.into_iter().map(|i| (i.name, i.err)).collect(),
        };
        write_json(&out.join("gradcheck.json"), &report)?;
        write_run_record(out, "gradcheck", 0, None, &[("report", "gradcheck.json")])?;
    }
    if pass {
        Ok(())
    } else {
        Err(runtime(format!(
            "gradient check failed: {max_err:.3e} exceeds {GRAD_TOL:.0e}"
        )))
    }
}
