//! Parameterized building blocks: 1-D convolution projector, multi-head
//! attention, variational information bottleneck encoder, residual
//! fully-connected block, linear prediction head, and dropout.
//!
//! Parameter containers are generic over the leaf type so the same structure
//! describes both stored tensors (`*Params`) and tape-bound variables
//! (`*Vars`); `bind` maps one to the other and `for_each` enumerates leaves
//! under stable dotted names for the optimizer and checkpoints.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::tensor::{Result, Tape, Tensor, TensorError, Var};

/// Forward-pass mode: training applies dropout and sampled noise, evaluation
/// is deterministic (ε = 0, dropout identity).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// How the VIB σ head maps its affine output to a strictly positive scale.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SigmaParam {
    /// σ = softplus(affine) + 1e-6; the default.
    Softplus,
    /// σ = exp(affine / 2), reading the affine output as log-variance.
    ExpHalfLogvar,
}

#[derive(Clone, Debug)]
pub struct Linear<P> {
    pub weight: P,
    pub bias: P,
}

#[derive(Clone, Debug)]
pub struct Conv1d<P> {
    /// Width-3 kernel, laid out `[3, in_dim, out_dim]`.
    pub kernel: P,
    pub bias: P,
}

#[derive(Clone, Debug)]
pub struct Mha<P> {
    pub wq: P,
    pub wk: P,
    pub wv: P,
    pub wo: P,
    pub n_heads: usize,
}

#[derive(Clone, Debug)]
pub struct Vib<P> {
    pub mu: Linear<P>,
    pub sigma: Linear<P>,
}

pub type LinearParams = Linear<Tensor>;
pub type LinearVars = Linear<Var>;
pub type Conv1dParams = Conv1d<Tensor>;
pub type Conv1dVars = Conv1d<Var>;
pub type MhaParams = Mha<Tensor>;
pub type MhaVars = Mha<Var>;
pub type VibParams = Vib<Tensor>;
pub type VibVars = Vib<Var>;

impl<P> Linear<P> {
    pub fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> Linear<Q> {
        Linear {
            weight: f(&self.weight),
            bias: f(&self.bias),
        }
    }

    pub fn for_each<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a P)) {
        f(format!("{prefix}.weight"), &self.weight);
        f(format!("{prefix}.bias"), &self.bias);
    }

    pub fn for_each_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut P)) {
        f(format!("{prefix}.weight"), &mut self.weight);
        f(format!("{prefix}.bias"), &mut self.bias);
    }
}

impl<P> Conv1d<P> {
    pub fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> Conv1d<Q> {
        Conv1d {
            kernel: f(&self.kernel),
            bias: f(&self.bias),
        }
    }

    pub fn for_each<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a P)) {
        f(format!("{prefix}.kernel"), &self.kernel);
        f(format!("{prefix}.bias"), &self.bias);
    }

    pub fn for_each_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut P)) {
        f(format!("{prefix}.kernel"), &mut self.kernel);
        f(format!("{prefix}.bias"), &mut self.bias);
    }
}

impl<P> Mha<P> {
    pub fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> Mha<Q> {
        Mha {
            wq: f(&self.wq),
            wk: f(&self.wk),
            wv: f(&self.wv),
            wo: f(&self.wo),
            n_heads: self.n_heads,
        }
    }

    pub fn for_each<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a P)) {
        f(format!("{prefix}.wq"), &self.wq);
        f(format!("{prefix}.wk"), &self.wk);
        f(format!("{prefix}.wv"), &self.wv);
        f(format!("{prefix}.wo"), &self.wo);
    }

    pub fn for_each_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut P)) {
        f(format!("{prefix}.wq"), &mut self.wq);
        f(format!("{prefix}.wk"), &mut self.wk);
        f(format!("{prefix}.wv"), &mut self.wv);
        f(format!("{prefix}.wo"), &mut self.wo);
    }
}

impl<P> Vib<P> {
    pub fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> Vib<Q> {
        Vib {
            mu: self.mu.map(f),
            sigma: self.sigma.map(f),
        }
    }

    pub fn for_each<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a P)) {
        self.mu.for_each(&format!("{prefix}.mu"), f);
        self.sigma.for_each(&format!("{prefix}.sigma"), f);
    }

    pub fn for_each_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut P)) {
        self.mu.for_each_mut(&format!("{prefix}.mu"), f);
        self.sigma.for_each_mut(&format!("{prefix}.sigma"), f);
    }
}

/// Symmetric uniform draw over (−a, a) with a = √(6 / (fan_in + fan_out)).
pub fn xavier_uniform(
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
    rng: &mut impl Rng,
) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let numel: usize = shape.iter().product();
    let data = (0..numel).map(|_| rng.random_range(-a..a)).collect();
    Tensor::from_parts(shape.to_vec(), data)
}

/// I.i.d. standard normal tensor; reparameterization draws and data noise.
pub fn standard_normal(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let numel: usize = shape.iter().product();
    let data = (0..numel)
        .map(|_| StandardNormal.sample(rng))
        .collect();
    Tensor::from_parts(shape.to_vec(), data)
}

/// 0/1 keep mask with keep probability `keep`; scaling happens in `dropout`.
pub fn bernoulli_mask(shape: &[usize], keep: f64, rng: &mut impl Rng) -> Tensor {
    let numel: usize = shape.iter().product();
    let data = (0..numel)
        .map(|_| if rng.random_bool(keep) { 1.0 } else { 0.0 })
        .collect();
    Tensor::from_parts(shape.to_vec(), data)
}

impl LinearParams {
    pub fn new(in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        Linear {
            weight: xavier_uniform(&[in_dim, out_dim], in_dim, out_dim, rng),
            bias: Tensor::zeros(&[out_dim]),
        }
    }

    pub fn bind(&self, tape: &Tape) -> LinearVars {
        self.map(&mut |t| tape.leaf(t.clone()))
    }
}

impl Conv1dParams {
    pub fn new(in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        Conv1d {
            kernel: xavier_uniform(&[3, in_dim, out_dim], 3 * in_dim, out_dim, rng),
            bias: Tensor::zeros(&[out_dim]),
        }
    }

    pub fn bind(&self, tape: &Tape) -> Conv1dVars {
        self.map(&mut |t| tape.leaf(t.clone()))
    }
}

impl MhaParams {
    pub fn new(dim: usize, n_heads: usize, rng: &mut impl Rng) -> Self {
        assert!(
            n_heads >= 1 && dim % n_heads == 0,
            "attention dim {dim} must be divisible by n_heads {n_heads}"
        );
        let mut proj = || xavier_uniform(&[dim, dim], dim, dim, rng);
        Mha {
            wq: proj(),
            wk: proj(),
            wv: proj(),
            wo: proj(),
            n_heads,
        }
    }

    pub fn bind(&self, tape: &Tape) -> MhaVars {
        self.map(&mut |t| tape.leaf(t.clone()))
    }
}

/// Initial σ-head bias. Starts the posterior wide (σ ≈ 1.7 under softplus)
/// so the KL terms begin with slack and shrink as the bottleneck tightens,
/// instead of dipping under the prior and climbing back up.
pub const SIGMA_BIAS_INIT: f64 = 1.5;

impl VibParams {
    pub fn new(dim: usize, rng: &mut impl Rng) -> Self {
        let mu = LinearParams::new(dim, dim, rng);
        let mut sigma = LinearParams::new(dim, dim, rng);
        for b in sigma.bias.data_mut() {
            *b = SIGMA_BIAS_INIT;
        }
        Vib { mu, sigma }
    }

    pub fn bind(&self, tape: &Tape) -> VibVars {
        self.map(&mut |t| tape.leaf(t.clone()))
    }
}

/// x·W + b, broadcasting the bias over rows; accepts `[T,in]` or `[in]`.
pub fn affine(p: &LinearVars, x: &Var) -> Result<Var> {
    let y = x.matmul(&p.weight)?;
    if y.shape().len() == 1 {
        y.add(&p.bias)
    } else {
        y.add_rowvec(&p.bias)
    }
}

/// Width-3 zero-padded convolution over the sequence axis mapping the raw
/// feature width to the standardized one, then truncation or zero-padding of
/// the sequence to exactly `target_len` rows.
pub fn conv1d_standardize(p: &Conv1dVars, x: &Var, target_len: usize) -> Result<Var> {
    let shape = x.shape();
    let kshape = p.kernel.shape();
    if shape.len() != 2 || kshape.len() != 3 || kshape[0] != 3 || shape[1] != kshape[1] {
        return Err(TensorError::ShapeMismatch {
            op: "conv1d_standardize",
            lhs: shape,
            rhs: kshape,
        });
    }
    // Kernel slice k sees the input shifted by k−1: slice 0 reads x[t−1],
    // slice 1 reads x[t], slice 2 reads x[t+1], with zero rows off both ends.
    let mut y = x.shift_rows(1)?.matmul(&p.kernel.slice_axis0(0)?)?;
    y = y.add(&x.matmul(&p.kernel.slice_axis0(1)?)?)?;
    y = y.add(&x.shift_rows(-1)?.matmul(&p.kernel.slice_axis0(2)?)?)?;
    y.add_rowvec(&p.bias)?.fit_rows(target_len)
}

/// Scaled dot-product attention: `query` attends over `key_value` (which
/// supplies both keys and values), per head with 1/√head_dim scaling, heads
/// concatenated and output-projected. The caller adds any residual.
pub fn mha(p: &MhaVars, query: &Var, key_value: &Var) -> Result<Var> {
    let d = p.wq.shape()[0];
    if query.shape().last() != Some(&d) || key_value.shape().last() != Some(&d) {
        return Err(TensorError::ShapeMismatch {
            op: "mha",
            lhs: query.shape(),
            rhs: key_value.shape(),
        });
    }
    let q = query.matmul(&p.wq)?;
    let k = key_value.matmul(&p.wk)?;
    let v = key_value.matmul(&p.wv)?;
    let head_dim = d / p.n_heads;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut heads = Vec::with_capacity(p.n_heads);
    for h in 0..p.n_heads {
        let off = h * head_dim;
        let qh = q.slice_lastdim(off, head_dim)?;
        let kh = k.slice_lastdim(off, head_dim)?;
        let vh = v.slice_lastdim(off, head_dim)?;
        let scores = qh.matmul(&kh.transpose()?)?.mul_scalar(scale)?;
        heads.push(scores.softmax_lastdim()?.matmul(&vh)?);
    }
    let refs: Vec<&Var> = heads.iter().collect();
    Var::concat_lastdim(&refs)?.matmul(&p.wo)
}

/// VIB forward pass: μ and σ heads, reparameterized sample, and the
/// closed-form Gaussian KL against the standard normal prior.
pub struct VibOutput {
    pub mu: Var,
    pub sigma: Var,
    pub sample: Var,
    pub kl: Var,
}

/// μ = x·W₁+b₁; σ from the affine σ head per `sigma_param`; sample = μ+ε⊙σ
/// with ε a frozen draw (zeros in eval mode); kl = mean over rows of
/// ½·Σ_d (μ² + σ² − 2 ln σ − 1).
pub fn vib_forward(
    p: &VibVars,
    x: &Var,
    eps: &Var,
    sigma_param: SigmaParam,
) -> Result<VibOutput> {
    let mu = affine(&p.mu, x)?;
    let pre = affine(&p.sigma, x)?;
    let sigma = match sigma_param {
        SigmaParam::Softplus => pre.softplus()?.add_scalar(1e-6)?,
        SigmaParam::ExpHalfLogvar => pre.mul_scalar(0.5)?.exp()?,
    };
    let sample = mu.add(&eps.mul(&sigma)?)?;
    let rows = mu.shape()[0] as f64;
    let kl = mu
        .mul(&mu)?
        .add(&sigma.mul(&sigma)?)?
        .sub(&sigma.log()?.mul_scalar(2.0)?)?
        .add_scalar(-1.0)?
        .sum()?
        .mul_scalar(0.5 / rows)?;
    Ok(VibOutput {
        mu,
        sigma,
        sample,
        kl,
    })
}

/// x + (x·W + b): the affine residual block, no nonlinearity.
pub fn residual_fc(p: &LinearVars, x: &Var) -> Result<Var> {
    x.add(&affine(p, x)?)
}

/// Mean-pool over the sequence axis, then an affine map to the label width.
pub fn predict_head(p: &LinearVars, x: &Var) -> Result<Var> {
    affine(p, &x.mean_over_time()?)
}

/// Inverted-scaling dropout. Training mode multiplies by a frozen 0/1 keep
/// mask and rescales by 1/(1−rate); eval mode and rate 0 are the identity.
pub fn dropout(x: &Var, rate: f64, mode: Mode, mask: Option<&Var>) -> Result<Var> {
    if !(0.0..1.0).contains(&rate) {
        return Err(TensorError::InvalidArg {
            op: "dropout",
            msg: format!("rate must lie in [0, 1), got {rate}"),
        });
    }
    if mode == Mode::Eval || rate == 0.0 {
        return Ok(x.clone());
    }
    let mask = mask.ok_or(TensorError::InvalidArg {
        op: "dropout",
        msg: "training mode with rate > 0 requires a mask".into(),
    })?;
    x.mul(mask)?.mul_scalar(1.0 / (1.0 - rate))
}
