//! Two-stage training and evaluation driver: stage-1 denoising pretraining
//! on complete data, stage-2 complementation training under a missingness
//! scenario, metric evaluation, the similarity diagnostic, and the CSV/JSON
//! emitters the command-line tools write.

pub mod adam;
pub mod checkpoint;
pub mod metrics;

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{
    add_gaussian_noise_dataset, apply_missing_dataset, apply_norm, batch_iter, fit_norm, mix_seed,
    DataError, Dataset, Label, ModalityBundle, NormStats, Scenario, TaskKind,
};
use crate::layers::SigmaParam;
use crate::model::{
    imc_forward, imc_loss, imd_loss, representation_hats, AblationConfig, AttnOwner, FwdCtx,
    ImdBreakdown, ModelConfig, TmdcParams,
};
use crate::tensor::{Tape, Tensor, TensorError};

use adam::{adam_step, collect_grads, AdamHyper, AdamState};
use metrics::{binary_confusion_from_scores, Confusion, MetricReport};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("{0}")]
    Protocol(String),
    #[error("writing {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("encoding {path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T> = std::result::Result<T, TrainError>;

fn protocol(msg: impl Into<String>) -> TrainError {
    TrainError::Protocol(msg.into())
}

// Seed lanes mixed off the master seed, one per random consumer, so adding
// or removing draws in one place never shifts another. Noise injection has
// its own lane inside the data module, keyed additionally by sample id.
const STREAM_PARAM_INIT: u64 = 5;
const STREAM_IMD_BATCH: u64 = 10;
const STREAM_IMC_BATCH: u64 = 11;
const STREAM_IMD_DRAWS: u64 = 12;
const STREAM_IMC_DRAWS: u64 = 13;

/// Samples per tape during deterministic evaluation passes; bounds graph
/// size without affecting results.
const EVAL_CHUNK: usize = 64;

/// Default chronological split fractions used by the command-line tools.
pub const F_TRAIN: f64 = 0.64;
pub const F_VAL: f64 = 0.16;

/// Everything a run depends on besides the dataset itself.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub d: usize,
    pub t: usize,
    pub n_heads: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub dropout: f64,
    pub beta: f64,
    pub imd_epochs: usize,
    pub imc_epochs: usize,
    pub seed: u64,
    pub scenario: Scenario,
    pub task: TaskKind,
    pub sigma_param: SigmaParam,
    pub attn_owner: AttnOwner,
    pub ablation: AblationConfig,
}

impl TrainConfig {
    /// Named hyperparameter profiles. The three benchmark profiles mirror
    /// the published training setup; `synth` targets the bundled generator
    /// at a size that trains in minutes on one core.
    pub fn profile(name: &str) -> Option<TrainConfig> {
        let base = TrainConfig {
            d: 256,
            t: 50,
            n_heads: 4,
            lr: 1e-4,
            batch_size: 32,
            dropout: 0.5,
            beta: 0.01,
            imd_epochs: 80,
            imc_epochs: 100,
            seed: 0,
            scenario: Scenario {
                pattern: crate::data::Pattern::full(),
                noise_sigma: 0.0,
            },
            task: TaskKind::Regression,
            sigma_param: SigmaParam::Softplus,
            attn_owner: AttnOwner::KvOwner,
            ablation: AblationConfig::default(),
        };
        match name {
            "mosi" | "mosei" => Some(base),
            "iemocap" => Some(TrainConfig {
                dropout: 0.6,
                task: TaskKind::Classification { classes: 4 },
                ..base
            }),
            "synth" => Some(TrainConfig {
                d: 24,
                t: 4,
                lr: 2e-3,
                batch_size: 64,
                dropout: 0.1,
                imd_epochs: 10,
                imc_epochs: 12,
                ..base
            }),
            _ => None,
        }
    }

    pub fn model_config(&self, feat_dims: [usize; 3]) -> ModelConfig {
        ModelConfig {
            d: self.d,
            t: self.t,
            n_heads: self.n_heads,
            feat_dims,
            task: self.task,
            sigma_param: self.sigma_param,
            attn_owner: self.attn_owner,
            dropout: self.dropout,
            ablation: self.ablation,
        }
    }
}

/// Normalized train/val/test splits plus the standardizer fitted on train.
#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    pub norm: NormStats,
}

/// Contiguous three-way split, then per-dimension standardization fitted on
/// the clean training portion only and applied to all three splits. Noise
/// and masking come later, per stage, so the normalizer never sees either.
pub fn prepare_splits(ds: &Dataset, f_train: f64, f_val: f64) -> Result<Splits> {
    let (mut train, mut val, mut test) = ds.split3(f_train, f_val);
    if train.is_empty() || val.is_empty() || test.is_empty() {
        return Err(protocol(format!(
            "split {f_train}/{f_val} of {} samples leaves an empty part ({}/{}/{})",
            ds.len(),
            train.len(),
            val.len(),
            test.len()
        )));
    }
    let norm = fit_norm(&train)?;
    apply_norm(&mut train, &norm);
    apply_norm(&mut val, &norm);
    apply_norm(&mut test, &norm);
    Ok(Splits {
        train,
        val,
        test,
        norm,
    })
}

/// Per-modality feature widths of a dataset of rank-2 `[seq, feat]` tensors.
pub fn feat_dims(ds: &Dataset) -> Result<[usize; 3]> {
    let first = ds
        .samples
        .first()
        .ok_or_else(|| protocol("empty dataset"))?;
    let mut dims = [0; 3];
    for (i, f) in first.bundle.feats.iter().enumerate() {
        let shape = f.shape();
        if shape.len() != 2 {
            return Err(protocol(format!(
                "features must be [time, dim] matrices, sample {} modality {i} has shape {shape:?}",
                first.id
            )));
        }
        dims[i] = shape[1];
    }
    Ok(dims)
}

/// Scenario application for one stage: noise keyed by sample id off the run
/// seed, then availability masking.
pub fn apply_scenario(ds: &Dataset, scenario: &Scenario, seed: u64) -> Result<Dataset> {
    let mut out = ds.clone();
    add_gaussian_noise_dataset(&mut out, scenario.noise_sigma, seed)?;
    apply_missing_dataset(&mut out, scenario.pattern);
    Ok(out)
}

/// One row of the stage-1 loss table: the 18 objective terms and their
/// β-weighted total. Rows are end-of-epoch recomputations over the noised
/// training set in evaluation mode (ε = 0, dropout off), so they are a
/// deterministic function of the parameters alone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub epoch: usize,
    pub terms: [f64; 18],
    pub total: f64,
}

#[derive(Clone, Debug)]
pub struct Stage1Out {
    pub cfg: ModelConfig,
    pub params: TmdcParams,
    pub adam: AdamState,
    pub rows: Vec<LossRow>,
}

fn imd_table_row(
    cfg: &ModelConfig,
    params: &TmdcParams,
    ds: &Dataset,
    beta: f64,
) -> Result<([f64; 18], f64)> {
    let mut acc = [0.0f64; 18];
    for chunk in ds.samples.chunks(EVAL_CHUNK) {
        let tape = Tape::new();
        let vars = params.bind(&tape);
        let refs: Vec<&ModalityBundle> = chunk.iter().map(|s| &s.bundle).collect();
        let mut ctx = FwdCtx::eval();
        let (_, bd) = imd_loss(cfg, &vars, &tape, &refs, beta, &mut ctx)?;
        let w = chunk.len() as f64;
        for (a, v) in acc.iter_mut().zip(bd.values()) {
            *a += v * w;
        }
    }
    for a in &mut acc {
        *a /= ds.len() as f64;
    }
    let total = acc[..12].iter().sum::<f64>() + beta * acc[12..].iter().sum::<f64>();
    Ok((acc, total))
}

/// Stage 1: denoising pretraining on complete data under the scenario's
/// noise level. Emits one loss-table row per epoch.
pub fn train_imd(tc: &TrainConfig, splits: &Splits) -> Result<Stage1Out> {
    if !tc.ablation.use_imd_pretrain {
        return Err(protocol(
            "stage-1 pretraining is disabled by the ablation; nothing to train",
        ));
    }
    let cfg = tc.model_config(feat_dims(&splits.train)?);
    cfg.validate()?;
    for s in &splits.train.samples {
        if !s.bundle.is_complete() {
            return Err(protocol(format!(
                "stage 1 requires complete bundles; sample {} has masked modalities",
                s.id
            )));
        }
    }
    let mut train = splits.train.clone();
    add_gaussian_noise_dataset(&mut train, tc.scenario.noise_sigma, tc.seed)?;

    let mut init_rng = ChaCha8Rng::seed_from_u64(mix_seed(tc.seed, &[STREAM_PARAM_INIT]));
    let mut params = TmdcParams::new(&cfg, &mut init_rng)?;
    let mut adam = AdamState::default();
    let hyper = AdamHyper::with_lr(tc.lr);
    let batch_seed = mix_seed(tc.seed, &[STREAM_IMD_BATCH]);

    let mut rows = Vec::with_capacity(tc.imd_epochs);
    for epoch in 0..tc.imd_epochs {
        let batches = batch_iter(train.len(), tc.batch_size, batch_seed, epoch)?;
        let mut rng =
            ChaCha8Rng::seed_from_u64(mix_seed(tc.seed, &[STREAM_IMD_DRAWS, epoch as u64]));
        for batch in &batches {
            let tape = Tape::new();
            let vars = params.bind(&tape);
            let refs: Vec<&ModalityBundle> =
                batch.iter().map(|&i| &train.samples[i].bundle).collect();
            let mut ctx = FwdCtx::train(tc.dropout, &mut rng);
            let (loss, _) = imd_loss(&cfg, &vars, &tape, &refs, tc.beta, &mut ctx)?;
            let grads = loss.backward()?;
            adam_step(&mut params, &collect_grads(&vars, &grads), &hyper, &mut adam)?;
        }
        let (terms, total) = imd_table_row(&cfg, &params, &train, tc.beta)?;
        rows.push(LossRow {
            epoch: epoch + 1,
            terms,
            total,
        });
    }
    Ok(Stage1Out {
        cfg,
        params,
        adam,
        rows,
    })
}

/// Where stage 2 starts from.
pub enum Stage2Start {
    /// Stage-1 parameters, fresh optimizer.
    Pretrained(TmdcParams),
    /// Random initialization; valid only when the ablation skips stage 1.
    Scratch,
    /// Mid-run state restored from a checkpoint.
    Resume(ResumeState),
}

pub struct ResumeState {
    pub params: TmdcParams,
    pub adam: AdamState,
    pub epochs_done: usize,
    pub best_params: TmdcParams,
    pub best_epoch: usize,
    pub best_metric: f64,
}

#[derive(Clone, Debug)]
pub struct Stage2Out {
    pub cfg: ModelConfig,
    pub best_params: TmdcParams,
    pub last_params: TmdcParams,
    pub adam: AdamState,
    pub best_epoch: usize,
    pub best_metric: f64,
    pub epochs_done: usize,
    /// Test-set metrics of the best-on-validation parameters.
    pub report: MetricReport,
    /// Validation selection score per trained epoch (resumed runs cover
    /// only the epochs they ran).
    pub val_curve: Vec<f64>,
}

/// Stage 2: complementation training. All three splits get the scenario
/// applied (noise, then masking), validation picks the best epoch by
/// selection score with strict improvement, and the returned report scores
/// the best parameters on the test split. Epoch-indexed seed lanes make an
/// interrupted-and-resumed run identical to an uninterrupted one.
pub fn train_imc(tc: &TrainConfig, splits: &Splits, start: Stage2Start) -> Result<Stage2Out> {
    let cfg = tc.model_config(feat_dims(&splits.train)?);
    cfg.validate()?;
    let train = apply_scenario(&splits.train, &tc.scenario, tc.seed)?;
    let val = apply_scenario(&splits.val, &tc.scenario, tc.seed)?;
    let test = apply_scenario(&splits.test, &tc.scenario, tc.seed)?;

    let (mut params, mut adam, first_epoch, mut best) = match start {
        Stage2Start::Pretrained(p) => (p, AdamState::default(), 0, None),
        Stage2Start::Scratch => {
            if tc.ablation.use_imd_pretrain {
                return Err(protocol(
                    "stage 2 without an init checkpoint: run stage 1 first or disable pretraining",
                ));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(tc.seed, &[STREAM_PARAM_INIT]));
            (TmdcParams::new(&cfg, &mut rng)?, AdamState::default(), 0, None)
        }
        Stage2Start::Resume(r) => (
            r.params,
            r.adam,
            r.epochs_done,
            Some((r.best_params, r.best_epoch, r.best_metric)),
        ),
    };
    if first_epoch > tc.imc_epochs {
        return Err(protocol(format!(
            "resume state has {} epochs done, past the configured {}",
            first_epoch, tc.imc_epochs
        )));
    }

    let hyper = AdamHyper::with_lr(tc.lr);
    let batch_seed = mix_seed(tc.seed, &[STREAM_IMC_BATCH]);
    let mut val_curve = Vec::new();
    for epoch in first_epoch..tc.imc_epochs {
        let batches = batch_iter(train.len(), tc.batch_size, batch_seed, epoch)?;
        let mut rng =
            ChaCha8Rng::seed_from_u64(mix_seed(tc.seed, &[STREAM_IMC_DRAWS, epoch as u64]));
        for batch in &batches {
            let tape = Tape::new();
            let vars = params.bind(&tape);
            let refs: Vec<&ModalityBundle> =
                batch.iter().map(|&i| &train.samples[i].bundle).collect();
            let mut ctx = FwdCtx::train(tc.dropout, &mut rng);
            let loss = imc_loss(&cfg, &vars, &tape, &refs, &mut ctx)?;
            let grads = loss.backward()?;
            adam_step(&mut params, &collect_grads(&vars, &grads), &hyper, &mut adam)?;
        }
        let score = eval_prepared(&cfg, &params, &val)?.selection_score();
        val_curve.push(score);
        let improved = match &best {
            None => true,
            Some((_, _, b)) => score > *b,
        };
        if improved {
            best = Some((params.clone(), epoch + 1, score));
        }
    }
    // Degenerate zero-epoch runs still need a best: the starting state.
    if best.is_none() {
        let score = eval_prepared(&cfg, &params, &val)?.selection_score();
        best = Some((params.clone(), 0, score));
    }
    let (best_params, best_epoch, best_metric) = best.expect("set above");
    let report = eval_prepared(&cfg, &best_params, &test)?;
    Ok(Stage2Out {
        cfg,
        best_params,
        last_params: params,
        adam,
        best_epoch,
        best_metric,
        epochs_done: tc.imc_epochs,
        report,
        val_curve,
    })
}

/// Applies a scenario to a copy of `ds` and scores `params` on it.
pub fn evaluate(
    cfg: &ModelConfig,
    params: &TmdcParams,
    ds: &Dataset,
    scenario: &Scenario,
    seed: u64,
) -> Result<MetricReport> {
    eval_prepared(cfg, params, &apply_scenario(ds, scenario, seed)?)
}

/// Scores an already noised and masked dataset. Regression tasks report
/// sign-protocol binary metrics over (prediction, truth) pairs, excluding
/// zero-scored truths; classification reports argmax metrics with ties
/// going to the lowest class index.
pub fn eval_prepared(cfg: &ModelConfig, params: &TmdcParams, ds: &Dataset) -> Result<MetricReport> {
    if ds.is_empty() {
        return Err(protocol("cannot evaluate an empty dataset"));
    }
    match cfg.task {
        TaskKind::Regression => {
            let mut pairs = Vec::with_capacity(ds.len());
            for chunk in ds.samples.chunks(EVAL_CHUNK) {
                let tape = Tape::new();
                let vars = params.bind(&tape);
                let mut ctx = FwdCtx::eval();
                for s in chunk {
                    let out = imc_forward(cfg, &vars, &tape, &s.bundle, &mut ctx)?;
                    let Label::Score(truth) = s.bundle.label else {
                        return Err(protocol(format!(
                            "regression run found a class label on sample {}",
                            s.id
                        )));
                    };
                    pairs.push((out.y.item(), truth));
                }
            }
            let (conf, _excluded) = binary_confusion_from_scores(&pairs);
            Ok(MetricReport::from_confusion(&conf, true))
        }
        TaskKind::Classification { classes } => {
            let mut conf = Confusion::new(classes);
            for chunk in ds.samples.chunks(EVAL_CHUNK) {
                let tape = Tape::new();
                let vars = params.bind(&tape);
                let mut ctx = FwdCtx::eval();
                for s in chunk {
                    let out = imc_forward(cfg, &vars, &tape, &s.bundle, &mut ctx)?;
                    let v = out.y.value();
                    let row = v.data();
                    let mut arg = 0;
                    for (i, &x) in row.iter().enumerate() {
                        if x > row[arg] {
                            arg = i;
                        }
                    }
                    let Label::Class(truth) = s.bundle.label else {
                        return Err(protocol(format!(
                            "classification run found a score label on sample {}",
                            s.id
                        )));
                    };
                    if truth >= classes {
                        return Err(protocol(format!(
                            "class label {truth} out of range for {classes} classes (sample {})",
                            s.id
                        )));
                    }
                    conf.add(truth, arg);
                }
            }
            Ok(MetricReport::from_confusion(&conf, classes == 2))
        }
    }
}

/// Time-pooled fused representations, one row per sample in `ds` order:
/// an [n, 3d] matrix. The dataset must already be noised and masked.
pub fn fused_embeddings(cfg: &ModelConfig, params: &TmdcParams, ds: &Dataset) -> Result<Tensor> {
    let mut data = Vec::with_capacity(ds.len() * 3 * cfg.d);
    for chunk in ds.samples.chunks(EVAL_CHUNK) {
        let tape = Tape::new();
        let vars = params.bind(&tape);
        let mut ctx = FwdCtx::eval();
        for s in chunk {
            let out = imc_forward(cfg, &vars, &tape, &s.bundle, &mut ctx)?;
            let pooled = out.fused.mean_over_time()?;
            data.extend_from_slice(pooled.value().data());
        }
    }
    Ok(Tensor::new(&[ds.len(), 3 * cfg.d], data)?)
}

pub const REPR_LABELS: [&str; 6] = ["S_A", "S_T", "S_V", "C_A", "C_T", "C_V"];

/// Representations with pooled norm under this threshold carry no direction;
/// their similarities are pinned to 0 and the occurrence is counted.
pub const COSINE_NORM_FLOOR: f64 = 1e-12;

/// Mean pairwise cosine similarity of the six refined representations
/// (specific and shared, per modality), pooled over time, averaged over a
/// prepared dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CosineMatrix {
    pub labels: [String; 6],
    pub mean: [[f64; 6]; 6],
    /// Per representation, how many samples had a zero-norm pooled vector.
    pub zero_norms: [usize; 6],
    pub n: usize,
}

/// Runs the similarity diagnostic over an already noised and masked
/// dataset. Diagonal entries are exactly 1 for every sample with a nonzero
/// pooled vector, so a matrix with no zero-norm flags has a unit diagonal.
pub fn cosine_analysis(
    cfg: &ModelConfig,
    params: &TmdcParams,
    ds: &Dataset,
) -> Result<CosineMatrix> {
    if ds.is_empty() {
        return Err(protocol("cannot analyze an empty dataset"));
    }
    let mut sums = [[0.0f64; 6]; 6];
    let mut zero_norms = [0usize; 6];
    for chunk in ds.samples.chunks(EVAL_CHUNK) {
        let tape = Tape::new();
        let vars = params.bind(&tape);
        let mut ctx = FwdCtx::eval();
        for s in chunk {
            let (spe, com) = representation_hats(cfg, &vars, &tape, &s.bundle, &mut ctx)?;
            let mut pooled: Vec<Vec<f64>> = Vec::with_capacity(6);
            for v in spe.iter().chain(com.iter()) {
                pooled.push(v.mean_over_time()?.value().data().to_vec());
            }
            let norms: Vec<f64> = pooled
                .iter()
                .map(|p| p.iter().map(|x| x * x).sum::<f64>().sqrt())
                .collect();
            for (i, &n) in norms.iter().enumerate() {
                if n < COSINE_NORM_FLOOR {
                    zero_norms[i] += 1;
                }
            }
            for i in 0..6 {
                for j in 0..6 {
                    let c = if norms[i] < COSINE_NORM_FLOOR || norms[j] < COSINE_NORM_FLOOR {
                        0.0
                    } else if i == j {
                        1.0
                    } else {
                        let dot: f64 = pooled[i].iter().zip(&pooled[j]).map(|(a, b)| a * b).sum();
                        // Near-parallel vectors can land an ulp outside the
                        // valid range through sqrt rounding.
                        (dot / (norms[i] * norms[j])).clamp(-1.0, 1.0)
                    };
                    sums[i][j] += c;
                }
            }
        }
    }
    let n = ds.len();
    let mut mean = [[0.0f64; 6]; 6];
    for i in 0..6 {
        for j in 0..6 {
            mean[i][j] = sums[i][j] / n as f64;
        }
    }
    Ok(CosineMatrix {
        labels: REPR_LABELS.map(String::from),
        mean,
        zero_norms,
        n,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|source| TrainError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Loss table CSV: an `epoch` column, the 18 term columns in canonical
/// order, and the β-weighted `total`.
pub fn write_loss_csv(path: &Path, rows: &[LossRow]) -> Result<()> {
    let mut out = String::from("epoch");
    for c in ImdBreakdown::COLUMNS {
        out.push(',');
        out.push_str(c);
    }
    out.push_str(",total\n");
    for r in rows {
        write!(out, "{}", r.epoch).expect("string write");
        for v in r.terms {
            write!(out, ",{v}").expect("string write");
        }
        writeln!(out, ",{}", r.total).expect("string write");
    }
    write_text(path, &out)
}

pub fn write_metrics_json(path: &Path, report: &MetricReport) -> Result<()> {
    let json = serde_json::to_string_pretty(report).map_err(|source| TrainError::Json {
        path: path.display().to_string(),
        source,
    })?;
    write_text(path, &(json + "\n"))
}

/// Similarity matrix CSV: a label header row, then one row per
/// representation.
pub fn write_cosine_csv(path: &Path, m: &CosineMatrix) -> Result<()> {
    let mut out = String::new();
    for l in &m.labels {
        out.push(',');
        out.push_str(l);
    }
    out.push('\n');
    for (i, l) in m.labels.iter().enumerate() {
        out.push_str(l);
        for j in 0..6 {
            write!(out, ",{}", m.mean[i][j]).expect("string write");
        }
        out.push('\n');
    }
    write_text(path, &out)
}
