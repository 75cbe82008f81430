//! Dataset plumbing: modality bundles, tensor file and manifest I/O,
//! synthetic data with a known shared latent, missing-pattern masking,
//! Gaussian noise injection, normalization, and batch iteration.

mod manifest;
mod tmdf;

pub use manifest::{load_dataset, save_dataset, Manifest, SampleRecord};
pub use tmdf::{decode_tensor, read_tensor, write_tensor};

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::layers::standard_normal;
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("bad magic bytes {got:?}, expected \"TMDF\"")]
    BadMagic { got: [u8; 4] },
    #[error("unsupported format version {got}, expected 1")]
    UnsupportedVersion { got: u32 },
    #[error("unsupported dtype code {got}, expected 1 (f32)")]
    UnsupportedDtype { got: u8 },
    #[error("ndim {got} outside supported range 1..=4")]
    BadNdim { got: u8 },
    #[error("reserved header field must be zero, got {got}")]
    NonZeroReserved { got: u16 },
    #[error("truncated payload: expected {expected} bytes, got {got}")]
    Truncated { expected: usize, got: usize },
    #[error("dimension product overflows: {dims:?}")]
    DimOverflow { dims: Vec<u32> },
    #[error("trailing bytes after payload in {path}")]
    TrailingBytes { path: String },
    #[error("manifest parse error in {path}: {source}")]
    Json {
        path: String,
        source: serde_json::Error,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// The three input channels, in canonical slot order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modality {
    Audio,
    Text,
    Video,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Audio, Modality::Text, Modality::Video];

    pub fn index(self) -> usize {
        match self {
            Modality::Audio => 0,
            Modality::Text => 1,
            Modality::Video => 2,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Modality::Audio => "A",
            Modality::Text => "T",
            Modality::Video => "V",
        }
    }

    pub fn from_tag(s: &str) -> Option<Modality> {
        match s {
            "A" => Some(Modality::Audio),
            "T" => Some(Modality::Text),
            "V" => Some(Modality::Video),
            _ => None,
        }
    }
}

/// Non-empty subset of modalities kept available in a scenario.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Pattern {
    avail: [bool; 3],
}

impl Pattern {
    pub fn new(avail: [bool; 3]) -> Result<Pattern> {
        if avail.iter().any(|&a| a) {
            Ok(Pattern { avail })
        } else {
            Err(DataError::Invalid("pattern must keep at least one modality".into()))
        }
    }

    pub fn full() -> Pattern {
        Pattern { avail: [true; 3] }
    }

    /// Parse a comma-separated subset of `A`, `T`, `V` (e.g. `"T,V"`).
    pub fn parse(s: &str) -> Result<Pattern> {
        let mut avail = [false; 3];
        for part in s.split(',') {
            let m = Modality::from_tag(part.trim()).ok_or_else(|| {
                DataError::Invalid(format!("pattern token {:?} is not one of A, T, V", part.trim()))
            })?;
            avail[m.index()] = true;
        }
        Pattern::new(avail)
    }

    pub fn contains(self, m: Modality) -> bool {
        self.avail[m.index()]
    }

    pub fn available(self) -> [bool; 3] {
        self.avail
    }

    pub fn count(self) -> usize {
        self.avail.iter().filter(|&&a| a).count()
    }

    pub fn is_full(self) -> bool {
        self.count() == 3
    }

    /// The seven non-empty subsets in the standard grid order: the three
    /// singles, the three pairs, then full availability.
    pub fn all_seven() -> [Pattern; 7] {
        let p = |a, t, v| Pattern { avail: [a, t, v] };
        [
            p(true, false, false),
            p(false, true, false),
            p(false, false, true),
            p(true, true, false),
            p(true, false, true),
            p(false, true, true),
            p(true, true, true),
        ]
    }
}

impl fmt::Display for Pattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut first = true;
        for m in Modality::ALL {
            if self.contains(m) {
                if !first {
                    write!(f, ",")?;
                }
                write!(f, "{}", m.tag())?;
                first = false;
            }
        }
        Ok(())
    }
}

impl Serialize for Pattern {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Pattern {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Pattern, D::Error> {
        let s = String::deserialize(d)?;
        Pattern::parse(&s).map_err(serde::de::Error::custom)
    }
}

/// Evaluation condition: which modalities are available and how much input
/// noise is injected.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub pattern: Pattern,
    pub noise_sigma: f64,
}

impl Scenario {
    pub fn new(pattern: Pattern, noise_sigma: f64) -> Result<Scenario> {
        if noise_sigma < 0.0 || !noise_sigma.is_finite() {
            return Err(DataError::Invalid(format!(
                "noise sigma must be finite and non-negative, got {noise_sigma}"
            )));
        }
        Ok(Scenario {
            pattern,
            noise_sigma,
        })
    }

    /// Noise intensities of the standard robustness grid.
    pub const SIGMA_GRID: [f64; 4] = [0.0, 5.0, 10.0, 20.0];
}

/// Task protocol. Binary sentiment runs as regression over scores with
/// sign-based accuracy; emotion recognition is plain classification.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TaskKind {
    Regression,
    Classification { classes: usize },
}

impl TaskKind {
    pub fn out_dim(self) -> usize {
        match self {
            TaskKind::Regression => 1,
            TaskKind::Classification { classes } => classes,
        }
    }
}

/// Ground-truth label: a real-valued score for regression tasks, a class
/// index for classification.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Label {
    Class(usize),
    Score(f64),
}

/// One sample's per-modality features plus availability flags and label.
/// Unavailable modalities hold all-zero tensors after masking.
#[derive(Clone, Debug)]
pub struct ModalityBundle {
    pub feats: [Tensor; 3],
    pub available: [bool; 3],
    pub label: Label,
}

impl ModalityBundle {
    pub fn feat(&self, m: Modality) -> &Tensor {
        &self.feats[m.index()]
    }

    pub fn is_available(&self, m: Modality) -> bool {
        self.available[m.index()]
    }

    pub fn is_complete(&self) -> bool {
        self.available.iter().all(|&a| a)
    }
}

#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    pub bundle: ModalityBundle,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub task: TaskKind,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Contiguous train/val/test split by fractions (samples are i.i.d. by
    /// construction, so order carries no information).
    pub fn split3(&self, f_train: f64, f_val: f64) -> (Dataset, Dataset, Dataset) {
        let n = self.samples.len();
        let n_train = (n as f64 * f_train).round() as usize;
        let n_val = (n as f64 * f_val).round() as usize;
        let take = |range: std::ops::Range<usize>| Dataset {
            task: self.task,
            samples: self.samples[range].to_vec(),
        };
        (
            take(0..n_train),
            take(n_train..(n_train + n_val).min(n)),
            take((n_train + n_val).min(n)..n),
        )
    }
}

/// Specification of the synthetic multimodal generator. A shared latent
/// `z ~ N(0, I_k)` drives every modality and the label; per-modality private
/// latents and small i.i.d. noise are added on top.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_samples: usize,
    pub shared_dim: usize,
    pub private_dims: [usize; 3],
    pub seq_lens: [usize; 3],
    pub feat_dims: [usize; 3],
    pub task: TaskKind,
    pub seed: u64,
}

impl SynthSpec {
    /// Desk-scale binary-sentiment stand-in (regression scores, sign labels).
    pub fn binary(n_samples: usize, shared_dim: usize, seed: u64) -> SynthSpec {
        SynthSpec {
            n_samples,
            shared_dim,
            private_dims: [4, 4, 4],
            seq_lens: [4, 3, 5],
            feat_dims: [12, 12, 12],
            task: TaskKind::Regression,
            seed,
        }
    }

    /// Desk-scale four-class emotion stand-in.
    pub fn four_class(n_samples: usize, shared_dim: usize, seed: u64) -> SynthSpec {
        SynthSpec {
            task: TaskKind::Classification { classes: 4 },
            ..SynthSpec::binary(n_samples, shared_dim, seed)
        }
    }

    fn validate(&self) -> Result<()> {
        let dims_ok = self.n_samples >= 1
            && self.shared_dim >= 1
            && self.seq_lens.iter().all(|&l| l >= 1)
            && self.feat_dims.iter().all(|&d| d >= 1);
        if !dims_ok {
            return Err(DataError::Invalid("all SynthSpec dims must be >= 1".into()));
        }
        if self.task == (TaskKind::Classification { classes: 4 }) && self.shared_dim < 2 {
            return Err(DataError::Invalid(
                "4-class labels need shared_dim >= 2 (quadrant of the first two coords)".into(),
            ));
        }
        if let TaskKind::Classification { classes } = self.task {
            if classes != 4 {
                return Err(DataError::Invalid(
                    "synthetic classification supports exactly 4 classes (quadrants)".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Fold extra stream identifiers into a master seed (splitmix64 steps), so
/// per-(stage, epoch, batch) generators are independent of draw history.
pub fn mix_seed(master: u64, tags: &[u64]) -> u64 {
    let mut s = master;
    for &t in tags {
        s ^= t.wrapping_add(0x9e37_79b9_7f4a_7c15);
        s = splitmix64(s);
    }
    splitmix64(s)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// FNV-1a over a string; keys per-sample noise streams by stable id.
pub fn fnv1a(s: &str) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Generate the synthetic dataset. Every modality row is
/// `A_m z + B_m u_m + 0.1·noise` with fixed per-seed mixing maps, so every
/// modality carries label signal and any pair recovers it well above chance.
/// The label derives from the shared latent alone: score `w·z` with
/// `w = 1/√k`, its sign for the binary protocol, the quadrant of the first
/// two latent coordinates for four classes.
pub fn gen_synthetic(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let k = spec.shared_dim;
    let mut map_rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, &[1]));
    // Mixing maps: shared-latent map at unit output scale, private map weaker.
    // Each modality's shared map blends a common base with its own draw, so
    // aligned feature coordinates correlate across modalities; purely
    // independent maps would leave no cross-modal structure to transfer.
    let d_max = spec.feat_dims.iter().copied().max().unwrap_or(1);
    let base = standard_normal(&[k, d_max], &mut map_rng);
    let blend = 0.5f64.sqrt();
    let mix_shared: Vec<Tensor> = (0..3)
        .map(|m| {
            let d = spec.feat_dims[m];
            let own = standard_normal(&[k, d], &mut map_rng);
            Tensor::from_parts(
                vec![k, d],
                (0..k * d)
                    .map(|idx| {
                        let (ki, j) = (idx / d, idx % d);
                        let mixed = blend * base.data()[ki * d_max + j] + blend * own.data()[idx];
                        mixed / (k as f64).sqrt()
                    })
                    .collect(),
            )
        })
        .collect();
    let mix_private: Vec<Tensor> = (0..3)
        .map(|m| {
            let p = spec.private_dims[m].max(1);
            standard_normal(&[p, spec.feat_dims[m]], &mut map_rng)
                .mul_scalar_raw(0.6 / (p as f64).sqrt())
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, &[2]));
    let w = 1.0 / (k as f64).sqrt();
    let mut samples = Vec::with_capacity(spec.n_samples);
    for i in 0..spec.n_samples {
        let z: Vec<f64> = (0..k).map(|_| normal_draw(&mut rng)).collect();
        let score: f64 = z.iter().sum::<f64>() * w;
        let label = match spec.task {
            TaskKind::Regression => Label::Score(score),
            TaskKind::Classification { .. } => {
                let q = match (z[0] >= 0.0, z[1] >= 0.0) {
                    (true, true) => 0,
                    (false, true) => 1,
                    (false, false) => 2,
                    (true, false) => 3,
                };
                Label::Class(q)
            }
        };
        let feats = std::array::from_fn(|m| {
            let d = spec.feat_dims[m];
            let p = spec.private_dims[m].max(1);
            let u: Vec<f64> = (0..p).map(|_| normal_draw(&mut rng)).collect();
            // Per-sample base row: A_m z + B_m u, identical across time steps.
            let mut base = vec![0.0; d];
            for (ki, &zv) in z.iter().enumerate() {
                for (b, &a) in base.iter_mut().zip(&mix_shared[m].data()[ki * d..(ki + 1) * d]) {
                    *b += zv * a;
                }
            }
            for (pi, &uv) in u.iter().enumerate() {
                for (b, &bm) in base.iter_mut().zip(&mix_private[m].data()[pi * d..(pi + 1) * d]) {
                    *b += uv * bm;
                }
            }
            let rows = spec.seq_lens[m];
            Tensor::from_parts(
                vec![rows, d],
                (0..rows * d)
                    .map(|j| base[j % d] + 0.1 * normal_draw(&mut rng))
                    .collect(),
            )
        });
        samples.push(Sample {
            id: format!("synth-{i:06}"),
            bundle: ModalityBundle {
                feats,
                available: [true; 3],
                label,
            },
        });
    }
    Ok(Dataset {
        task: spec.task,
        samples,
    })
}

fn normal_draw(rng: &mut ChaCha8Rng) -> f64 {
    rand_distr::Distribution::sample(&rand_distr::StandardNormal, rng)
}

/// Zero out and flag modalities outside `pattern`; idempotent.
pub fn apply_missing(bundle: &mut ModalityBundle, pattern: Pattern) {
    for m in Modality::ALL {
        if !pattern.contains(m) {
            let i = m.index();
            bundle.feats[i] = Tensor::zeros(bundle.feats[i].shape());
            bundle.available[i] = false;
        }
    }
}

pub fn apply_missing_dataset(ds: &mut Dataset, pattern: Pattern) {
    for s in &mut ds.samples {
        apply_missing(&mut s.bundle, pattern);
    }
}

/// Add i.i.d. `N(0, sigma²)` noise to the available modalities of one
/// bundle. The stream is keyed by the sample id, so the draw is independent
/// of dataset ordering and split membership.
pub fn add_gaussian_noise(
    bundle: &mut ModalityBundle,
    sample_id: &str,
    sigma: f64,
    seed: u64,
) -> Result<()> {
    if sigma < 0.0 || !sigma.is_finite() {
        return Err(DataError::Invalid(format!(
            "noise sigma must be finite and non-negative, got {sigma}"
        )));
    }
    if sigma == 0.0 {
        return Ok(());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, &[3, fnv1a(sample_id)]));
    for m in Modality::ALL {
        let i = m.index();
        if !bundle.available[i] {
            continue;
        }
        for v in bundle.feats[i].data_mut() {
            *v += sigma * normal_draw(&mut rng);
        }
    }
    Ok(())
}

pub fn add_gaussian_noise_dataset(ds: &mut Dataset, sigma: f64, seed: u64) -> Result<()> {
    for s in &mut ds.samples {
        add_gaussian_noise(&mut s.bundle, &s.id, sigma, seed)?;
    }
    Ok(())
}

/// Per-dimension mean/std of each modality, fitted on the training split.
#[derive(Clone, Debug)]
pub struct NormStats {
    pub mean: [Vec<f64>; 3],
    pub std: [Vec<f64>; 3],
}

/// Fit z-score statistics over all samples and time steps of `ds` (call on
/// the clean training split, before masking and noise).
pub fn fit_norm(ds: &Dataset) -> Result<NormStats> {
    if ds.is_empty() {
        return Err(DataError::Invalid("cannot fit normalization on an empty dataset".into()));
    }
    let dims: [usize; 3] = std::array::from_fn(|m| ds.samples[0].bundle.feats[m].shape()[1]);
    let mut mean: [Vec<f64>; 3] = std::array::from_fn(|m| vec![0.0; dims[m]]);
    let mut sq: [Vec<f64>; 3] = std::array::from_fn(|m| vec![0.0; dims[m]]);
    let mut count = [0usize; 3];
    for s in &ds.samples {
        for m in 0..3 {
            let t = &s.bundle.feats[m];
            let d = dims[m];
            for row in t.data().chunks(d) {
                for (j, &v) in row.iter().enumerate() {
                    mean[m][j] += v;
                    sq[m][j] += v * v;
                }
            }
            count[m] += t.shape()[0];
        }
    }
    let mut std: [Vec<f64>; 3] = std::array::from_fn(|m| vec![1.0; dims[m]]);
    for m in 0..3 {
        let n = count[m] as f64;
        for j in 0..dims[m] {
            mean[m][j] /= n;
            let var = (sq[m][j] / n - mean[m][j] * mean[m][j]).max(0.0);
            // Constant columns pass through unscaled rather than dividing by 0.
            std[m][j] = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
        }
    }
    Ok(NormStats { mean, std })
}

pub fn apply_norm(ds: &mut Dataset, stats: &NormStats) {
    for s in &mut ds.samples {
        for m in 0..3 {
            let d = stats.mean[m].len();
            for row in s.bundle.feats[m].data_mut().chunks_mut(d) {
                for (j, v) in row.iter_mut().enumerate() {
                    *v = (*v - stats.mean[m][j]) / stats.std[m][j];
                }
            }
        }
    }
}

/// Deterministic shuffled index batches for one epoch; the final partial
/// batch is kept.
pub fn batch_iter(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Result<Vec<Vec<usize>>> {
    if n == 0 {
        return Err(DataError::Invalid("cannot batch an empty dataset".into()));
    }
    if batch_size == 0 {
        return Err(DataError::Invalid("batch size must be >= 1".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, &[4, epoch as u64]));
    // Fisher-Yates, explicit so the permutation is pinned to this generator.
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    Ok(order.chunks(batch_size).map(|c| c.to_vec()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec(seed: u64) -> SynthSpec {
        SynthSpec {
            n_samples: 40,
            shared_dim: 4,
            private_dims: [2, 2, 2],
            seq_lens: [3, 2, 4],
            feat_dims: [5, 6, 7],
            task: TaskKind::Regression,
            seed,
        }
    }

    #[test]
    fn gen_is_deterministic_per_seed() {
        let a = gen_synthetic(&tiny_spec(9)).unwrap();
        let b = gen_synthetic(&tiny_spec(9)).unwrap();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.samples.iter().zip(&b.samples) {
            assert_eq!(x.id, y.id);
            assert_eq!(x.bundle.label, y.bundle.label);
            for m in 0..3 {
                assert_eq!(x.bundle.feats[m], y.bundle.feats[m]);
            }
        }
        let c = gen_synthetic(&tiny_spec(10)).unwrap();
        assert_ne!(a.samples[0].bundle.feats[0], c.samples[0].bundle.feats[0]);
    }

    #[test]
    fn k1_score_is_the_raw_standard_normal_latent() {
        // With k=1 the label weight is exactly 1, so the stored score IS the
        // latent z ~ N(0,1); its sample moments must match the standard
        // normal, which pins the 1/√k scaling at the k=1 corner.
        let spec = SynthSpec {
            shared_dim: 1,
            n_samples: 4000,
            ..tiny_spec(11)
        };
        let ds = gen_synthetic(&spec).unwrap();
        let scores: Vec<f64> = ds
            .samples
            .iter()
            .map(|s| {
                let Label::Score(v) = s.bundle.label else {
                    panic!("regression labels expected")
                };
                v
            })
            .collect();
        let n = scores.len() as f64;
        let mean = scores.iter().sum::<f64>() / n;
        let std = (scores.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
        assert!(mean.abs() < 0.08, "latent mean {mean}");
        assert!((std - 1.0).abs() < 0.08, "latent std {std}");
    }

    #[test]
    fn four_class_quadrants_are_roughly_balanced() {
        let spec = SynthSpec {
            task: TaskKind::Classification { classes: 4 },
            n_samples: 2000,
            ..tiny_spec(12)
        };
        let ds = gen_synthetic(&spec).unwrap();
        let mut counts = [0usize; 4];
        for s in &ds.samples {
            let Label::Class(c) = s.bundle.label else {
                panic!("class labels expected")
            };
            counts[c] += 1;
        }
        for &c in &counts {
            let f = c as f64 / 2000.0;
            assert!((0.15..=0.6).contains(&f), "class frequency {f} out of band");
        }
    }

    #[test]
    fn masking_zeroes_flags_and_is_idempotent() {
        let ds = gen_synthetic(&tiny_spec(13)).unwrap();
        let mut b = ds.samples[0].bundle.clone();
        let pattern = Pattern::parse("A").unwrap();
        apply_missing(&mut b, pattern);
        assert!(b.available[0] && !b.available[1] && !b.available[2]);
        assert!(b.feats[1].data().iter().all(|&v| v == 0.0));
        assert!(b.feats[2].data().iter().all(|&v| v == 0.0));
        let audio_before = b.feats[0].clone();
        let snapshot = b.clone();
        apply_missing(&mut b, pattern);
        assert_eq!(b.feats[0], audio_before);
        assert_eq!(b.available, snapshot.available);

        assert!(Pattern::parse("").is_err());
        assert!(Pattern::parse("A,X").is_err());
        assert_eq!(Pattern::parse("V,A").unwrap().to_string(), "A,V");
    }

    #[test]
    fn full_pattern_masking_is_identity() {
        let ds = gen_synthetic(&tiny_spec(14)).unwrap();
        let mut b = ds.samples[0].bundle.clone();
        let before = b.clone();
        apply_missing(&mut b, Pattern::full());
        for m in 0..3 {
            assert_eq!(b.feats[m], before.feats[m]);
        }
        assert_eq!(b.available, [true; 3]);
    }

    #[test]
    fn noise_skips_unavailable_and_zero_sigma_is_identity() {
        let ds = gen_synthetic(&tiny_spec(15)).unwrap();
        let mut b = ds.samples[0].bundle.clone();
        apply_missing(&mut b, Pattern::parse("T,V").unwrap());
        let before = b.clone();
        add_gaussian_noise(&mut b, "synth-000000", 5.0, 77).unwrap();
        assert!(b.feats[0].data().iter().all(|&v| v == 0.0));
        assert_ne!(b.feats[1], before.feats[1]);

        let mut c = before.clone();
        add_gaussian_noise(&mut c, "synth-000000", 0.0, 77).unwrap();
        for m in 0..3 {
            assert_eq!(c.feats[m], before.feats[m]);
        }
        assert!(add_gaussian_noise(&mut c, "x", -1.0, 0).is_err());
    }

    #[test]
    fn noise_std_matches_sigma_over_a_million_elements() {
        // Sample-statistics oracle: the empirical std of (noised − clean)
        // must sit inside [4.99, 5.01] at sigma = 5.
        let spec = SynthSpec {
            n_samples: 120,
            seq_lens: [24, 24, 24],
            feat_dims: [120, 120, 120],
            ..tiny_spec(16)
        };
        let ds = gen_synthetic(&spec).unwrap();
        let mut noised = ds.clone();
        add_gaussian_noise_dataset(&mut noised, 5.0, 123).unwrap();
        let mut sum = 0.0;
        let mut sq = 0.0;
        let mut n = 0usize;
        for (a, b) in ds.samples.iter().zip(&noised.samples) {
            for m in 0..3 {
                for (x, y) in a.bundle.feats[m].data().iter().zip(b.bundle.feats[m].data()) {
                    let d = y - x;
                    sum += d;
                    sq += d * d;
                    n += 1;
                }
            }
        }
        assert!(n >= 1_000_000, "need at least 1e6 elements, got {n}");
        let mean = sum / n as f64;
        let std = (sq / n as f64 - mean * mean).sqrt();
        assert!((4.99..=5.01).contains(&std), "empirical std {std}");
    }

    #[test]
    fn noise_is_keyed_by_sample_id_not_position() {
        let ds = gen_synthetic(&tiny_spec(17)).unwrap();
        let mut a = ds.samples[0].bundle.clone();
        let mut b = ds.samples[0].bundle.clone();
        add_gaussian_noise(&mut a, "some-id", 2.0, 5).unwrap();
        add_gaussian_noise(&mut b, "other-id", 2.0, 5).unwrap();
        assert_ne!(a.feats[0], b.feats[0]);
    }

    #[test]
    fn batching_laws() {
        let batches = batch_iter(5, 2, 1, 0).unwrap();
        let sizes: Vec<usize> = batches.iter().map(|b| b.len()).collect();
        assert_eq!(sizes, vec![2, 2, 1]);

        assert_eq!(batch_iter(5, 2, 1, 0).unwrap(), batches);
        assert_ne!(batch_iter(16, 4, 1, 0).unwrap(), batch_iter(16, 4, 1, 1).unwrap());

        let mut seen: Vec<usize> = batches.into_iter().flatten().collect();
        seen.sort_unstable();
        assert_eq!(seen, vec![0, 1, 2, 3, 4]);

        assert!(batch_iter(0, 2, 1, 0).is_err());
        assert!(batch_iter(5, 0, 1, 0).is_err());
    }

    #[test]
    fn normalization_gives_unit_scale_train_features() {
        let spec = SynthSpec {
            n_samples: 300,
            ..tiny_spec(18)
        };
        let mut ds = gen_synthetic(&spec).unwrap();
        let stats = fit_norm(&ds).unwrap();
        apply_norm(&mut ds, &stats);
        let refit = fit_norm(&ds).unwrap();
        for m in 0..3 {
            for j in 0..stats.mean[m].len() {
                assert!(refit.mean[m][j].abs() < 1e-10);
                assert!((refit.std[m][j] - 1.0).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn split3_partitions_without_overlap() {
        let ds = gen_synthetic(&tiny_spec(19)).unwrap();
        let (tr, va, te) = ds.split3(0.7, 0.15);
        assert_eq!(tr.len() + va.len() + te.len(), ds.len());
        assert_eq!(tr.len(), 28);
        assert_eq!(va.len(), 6);
        let mut ids: Vec<&str> = tr
            .samples
            .iter()
            .chain(&va.samples)
            .chain(&te.samples)
            .map(|s| s.id.as_str())
            .collect();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), ds.len());
    }

    #[test]
    fn linear_probe_recovers_binary_labels_from_pooled_features() {
        // Label-recoverability oracle, fully independent of the model stack:
        // logistic regression on concatenated mean-pooled clean features must
        // reach 95% sign accuracy. This bounds what the trained model can be
        // expected to achieve and validates the generator's signal path.
        let spec = SynthSpec::binary(2000, 8, 21);
        let mut ds = gen_synthetic(&spec).unwrap();
        let (raw_train, _, _) = ds.split3(0.7, 0.15);
        let stats = fit_norm(&raw_train).unwrap();
        apply_norm(&mut ds, &stats);
        let (train, _, test) = ds.split3(0.7, 0.15);

        let dim: usize = spec.feat_dims.iter().sum();
        let pooled = |s: &Sample| -> Vec<f64> {
            let mut out = Vec::with_capacity(dim);
            for m in 0..3 {
                let t = &s.bundle.feats[m];
                let d = t.shape()[1];
                let rows = t.shape()[0] as f64;
                for j in 0..d {
                    out.push((0..t.shape()[0]).map(|r| t.data()[r * d + j]).sum::<f64>() / rows);
                }
            }
            out
        };
        let sign_label = |s: &Sample| -> f64 {
            let Label::Score(v) = s.bundle.label else { panic!() };
            if v > 0.0 {
                1.0
            } else {
                -1.0
            }
        };

        let xs: Vec<Vec<f64>> = train.samples.iter().map(pooled).collect();
        let ys: Vec<f64> = train.samples.iter().map(sign_label).collect();
        let mut w = vec![0.0; dim + 1];
        for _ in 0..1500 {
            let mut grad = vec![0.0; dim + 1];
            for (x, &y) in xs.iter().zip(&ys) {
                let z: f64 = w[dim] + x.iter().zip(&w[..dim]).map(|(a, b)| a * b).sum::<f64>();
                let s = 1.0 / (1.0 + (-y * z).exp());
                let c = -y * (1.0 - s);
                for (g, xv) in grad[..dim].iter_mut().zip(x) {
                    *g += c * xv;
                }
                grad[dim] += c;
            }
            for (wv, g) in w.iter_mut().zip(&grad) {
                *wv -= 0.5 * g / xs.len() as f64;
            }
        }

        let mut correct = 0usize;
        for s in &test.samples {
            let x = pooled(s);
            let z: f64 = w[dim] + x.iter().zip(&w[..dim]).map(|(a, b)| a * b).sum::<f64>();
            if (z > 0.0) == (sign_label(s) > 0.0) {
                correct += 1;
            }
        }
        let acc = correct as f64 / test.len() as f64;
        assert!(acc >= 0.95, "probe accuracy {acc}");
    }
}

