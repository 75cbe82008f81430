//! The two-stage architecture: modality-specific (MSD) and modality-common
//! (MCD) denoising modules built from the shared layer vocabulary, the
//! stage-1 denoising loss, and the stage-2 cross-modal complementation that
//! fills missing modalities before fusion.

pub mod checks;
mod forward;

pub use forward::{
    imc_forward, imc_loss, imd_loss, mcd_forward, msd_forward, representation_hats, task_loss,
    DenoiseOut, FwdCtx, ImcOut, ImdBreakdown,
};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Modality, TaskKind};
use crate::layers::{
    Conv1d, Conv1dParams, Linear, LinearParams, Mha, MhaParams, SigmaParam, Vib, VibParams,
};
use crate::tensor::{Result, Tape, Tensor, TensorError, Var};

/// Which stages and modules are active. The two denoising modules cannot
/// both be removed: stage 2 needs at least one latent path.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationConfig {
    pub use_imd_pretrain: bool,
    pub use_imc_complement: bool,
    pub use_msd: bool,
    pub use_mcd: bool,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            use_imd_pretrain: true,
            use_imc_complement: true,
            use_msd: true,
            use_mcd: true,
        }
    }
}

impl AblationConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.use_msd && !self.use_mcd {
            return Err(TensorError::InvalidArg {
                op: "ablation",
                msg: "the MSD and MCD modules cannot both be removed".into(),
            });
        }
        Ok(())
    }

    pub fn is_full(&self) -> bool {
        *self == AblationConfig::default()
    }
}

/// Owner of the attention/residual parameters used by a cross-modal swap
/// `query = X_c^(m1), key/value = X_s^(m2)`: the modality being read
/// (`KvOwner`, the default) or the one asking (`QueryOwner`).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttnOwner {
    KvOwner,
    QueryOwner,
}

/// Architecture hyperparameters; everything the parameter tree's shapes
/// depend on, plus the forward-pass switches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Standardized feature width after the convolution projectors.
    pub d: usize,
    /// Standardized sequence length after truncation or padding.
    pub t: usize,
    pub n_heads: usize,
    /// Raw per-modality feature widths (audio, text, video).
    pub feat_dims: [usize; 3],
    pub task: TaskKind,
    pub sigma_param: SigmaParam,
    pub attn_owner: AttnOwner,
    pub dropout: f64,
    pub ablation: AblationConfig,
}

impl ModelConfig {
    pub fn out_dim(&self) -> usize {
        self.task.out_dim()
    }

    pub fn validate(&self) -> Result<()> {
        self.ablation.validate()?;
        let bad = |msg: String| TensorError::InvalidArg { op: "model-config", msg };
        if self.d == 0 || self.t == 0 || self.n_heads == 0 || self.d % self.n_heads != 0 {
            return Err(bad(format!(
                "need d > 0 divisible by n_heads > 0 and t > 0 (d={}, n_heads={}, t={})",
                self.d, self.n_heads, self.t
            )));
        }
        if self.feat_dims.iter().any(|&f| f == 0) {
            return Err(bad(format!("feature dims must be positive: {:?}", self.feat_dims)));
        }
        // The shared MCD convolution reads raw features for every modality
        // with one kernel, which requires equal raw widths.
        if self.ablation.use_mcd && !(self.feat_dims[0] == self.feat_dims[1] && self.feat_dims[1] == self.feat_dims[2]) {
            return Err(bad(format!(
                "the shared MCD convolution needs equal raw feature dims, got {:?}",
                self.feat_dims
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(bad(format!("dropout must lie in [0, 1), got {}", self.dropout)));
        }
        Ok(())
    }
}

/// One modality's private denoising stack plus its prediction heads.
#[derive(Clone, Debug)]
pub struct SpeModule<P> {
    pub conv: Conv1d<P>,
    pub vib: Vib<P>,
    pub mha: Mha<P>,
    pub resfc: Linear<P>,
    pub head_s: Linear<P>,
    pub head_spe: Linear<P>,
}

/// The weight-shared half of the common denoising module.
#[derive(Clone, Debug)]
pub struct ComShared<P> {
    pub conv: Conv1d<P>,
    pub vib: Vib<P>,
    pub mha: Mha<P>,
    pub resfc: Linear<P>,
}

/// Common denoising module: one shared stack, per-modality heads.
#[derive(Clone, Debug)]
pub struct ComModule<P> {
    pub shared: ComShared<P>,
    pub head_c: [Linear<P>; 3],
    pub head_com: [Linear<P>; 3],
}

/// Full parameter tree. Module presence mirrors the ablation structurally:
/// a removed module has no parameters to train, checkpoint, or count.
#[derive(Clone, Debug)]
pub struct Tmdc<P> {
    pub msd: Option<[SpeModule<P>; 3]>,
    pub mcd: Option<ComModule<P>>,
    /// Stage-2 residual blocks refining each fused slot.
    pub all_resfc: [Linear<P>; 3],
    /// Fusion head mapping the concatenated `[T, 3D]` features to the label.
    pub fuse_head: Linear<P>,
}

pub type TmdcParams = Tmdc<Tensor>;
pub type TmdcVars = Tmdc<Var>;

impl<P> SpeModule<P> {
    pub fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> SpeModule<Q> {
        SpeModule {
            conv: self.conv.map(f),
            vib: self.vib.map(f),
            mha: self.mha.map(f),
            resfc: self.resfc.map(f),
            head_s: self.head_s.map(f),
            head_spe: self.head_spe.map(f),
        }
    }

    pub fn for_each<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a P)) {
        self.conv.for_each(&format!("{prefix}.conv"), f);
        self.vib.for_each(&format!("{prefix}.vib"), f);
        self.mha.for_each(&format!("{prefix}.mha"), f);
        self.resfc.for_each(&format!("{prefix}.resfc"), f);
        self.head_s.for_each(&format!("{prefix}.head_s"), f);
        self.head_spe.for_each(&format!("{prefix}.head_spe"), f);
    }

    pub fn for_each_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut P)) {
        self.conv.for_each_mut(&format!("{prefix}.conv"), f);
        self.vib.for_each_mut(&format!("{prefix}.vib"), f);
        self.mha.for_each_mut(&format!("{prefix}.mha"), f);
        self.resfc.for_each_mut(&format!("{prefix}.resfc"), f);
        self.head_s.for_each_mut(&format!("{prefix}.head_s"), f);
        self.head_spe.for_each_mut(&format!("{prefix}.head_spe"), f);
    }
}

impl<P> ComShared<P> {
    pub fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> ComShared<Q> {
        ComShared {
            conv: self.conv.map(f),
            vib: self.vib.map(f),
            mha: self.mha.map(f),
            resfc: self.resfc.map(f),
        }
    }

    pub fn for_each<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a P)) {
        self.conv.for_each(&format!("{prefix}.conv"), f);
        self.vib.for_each(&format!("{prefix}.vib"), f);
        self.mha.for_each(&format!("{prefix}.mha"), f);
        self.resfc.for_each(&format!("{prefix}.resfc"), f);
    }

    pub fn for_each_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut P)) {
        self.conv.for_each_mut(&format!("{prefix}.conv"), f);
        self.vib.for_each_mut(&format!("{prefix}.vib"), f);
        self.mha.for_each_mut(&format!("{prefix}.mha"), f);
        self.resfc.for_each_mut(&format!("{prefix}.resfc"), f);
    }
}

impl<P> ComModule<P> {
    pub fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> ComModule<Q> {
        ComModule {
            shared: self.shared.map(f),
            head_c: std::array::from_fn(|m| self.head_c[m].map(f)),
            head_com: std::array::from_fn(|m| self.head_com[m].map(f)),
        }
    }

    pub fn for_each<'a>(&'a self, f: &mut impl FnMut(String, &'a P)) {
        self.shared.for_each("com", f);
        for m in Modality::ALL {
            self.head_c[m.index()].for_each(&format!("com_{}.head_c", m.tag()), f);
            self.head_com[m.index()].for_each(&format!("com_{}.head_com", m.tag()), f);
        }
    }

    pub fn for_each_mut(&mut self, f: &mut impl FnMut(String, &mut P)) {
        self.shared.for_each_mut("com", f);
        for m in Modality::ALL {
            self.head_c[m.index()].for_each_mut(&format!("com_{}.head_c", m.tag()), f);
            self.head_com[m.index()].for_each_mut(&format!("com_{}.head_com", m.tag()), f);
        }
    }
}

impl<P> Tmdc<P> {
    pub fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> Tmdc<Q> {
        Tmdc {
            msd: self
                .msd
                .as_ref()
                .map(|arr| std::array::from_fn(|m| arr[m].map(f))),
            mcd: self.mcd.as_ref().map(|c| c.map(f)),
            all_resfc: std::array::from_fn(|m| self.all_resfc[m].map(f)),
            fuse_head: self.fuse_head.map(f),
        }
    }

    /// Visit every parameter leaf under its stable dotted name, in a fixed
    /// canonical order (spe_A..spe_V, com, com_* heads, all_*, fuse).
    pub fn for_each<'a>(&'a self, f: &mut impl FnMut(String, &'a P)) {
        if let Some(msd) = &self.msd {
            for m in Modality::ALL {
                msd[m.index()].for_each(&format!("spe_{}", m.tag()), f);
            }
        }
        if let Some(mcd) = &self.mcd {
            mcd.for_each(f);
        }
        for m in Modality::ALL {
            self.all_resfc[m.index()].for_each(&format!("all_{}.resfc", m.tag()), f);
        }
        self.fuse_head.for_each("fuse.head", f);
    }

    pub fn for_each_mut(&mut self, f: &mut impl FnMut(String, &mut P)) {
        if let Some(msd) = &mut self.msd {
            for m in Modality::ALL {
                msd[m.index()].for_each_mut(&format!("spe_{}", m.tag()), f);
            }
        }
        if let Some(mcd) = &mut self.mcd {
            mcd.for_each_mut(f);
        }
        for m in Modality::ALL {
            self.all_resfc[m.index()].for_each_mut(&format!("all_{}.resfc", m.tag()), f);
        }
        self.fuse_head.for_each_mut("fuse.head", f);
    }

    pub fn named(&self) -> Vec<(String, &P)> {
        let mut out = Vec::new();
        self.for_each(&mut |n, p| out.push((n, p)));
        out
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.for_each(&mut |_, _| n += 1);
        n
    }
}

/// Parameter group of a dotted name: `spe`, `com`, `all`, or `fuse`.
pub fn group_of(name: &str) -> &'static str {
    for g in ["spe", "com", "all", "fuse"] {
        let rest = match name.strip_prefix(g) {
            Some(r) => r,
            None => continue,
        };
        if rest.starts_with('.') || rest.starts_with('_') {
            return g;
        }
    }
    panic!("parameter name {name:?} belongs to no known group");
}

impl TmdcParams {
    /// Fresh parameters for `cfg`; module presence follows the ablation.
    pub fn new(cfg: &ModelConfig, rng: &mut impl Rng) -> Result<TmdcParams> {
        cfg.validate()?;
        let (d, h, c) = (cfg.d, cfg.n_heads, cfg.out_dim());
        let msd = cfg.ablation.use_msd.then(|| {
            std::array::from_fn(|m| SpeModule {
                conv: Conv1dParams::new(cfg.feat_dims[m], d, rng),
                vib: VibParams::new(d, rng),
                mha: MhaParams::new(d, h, rng),
                resfc: LinearParams::new(d, d, rng),
                head_s: LinearParams::new(d, c, rng),
                head_spe: LinearParams::new(d, c, rng),
            })
        });
        let mcd = cfg.ablation.use_mcd.then(|| ComModule {
            shared: ComShared {
                conv: Conv1dParams::new(cfg.feat_dims[0], d, rng),
                vib: VibParams::new(d, rng),
                mha: MhaParams::new(d, h, rng),
                resfc: LinearParams::new(d, d, rng),
            },
            head_c: std::array::from_fn(|_| LinearParams::new(d, c, rng)),
            head_com: std::array::from_fn(|_| LinearParams::new(d, c, rng)),
        });
        Ok(Tmdc {
            msd,
            mcd,
            all_resfc: std::array::from_fn(|_| LinearParams::new(d, d, rng)),
            fuse_head: LinearParams::new(3 * d, c, rng),
        })
    }

    pub fn bind(&self, tape: &Tape) -> TmdcVars {
        self.map(&mut |t| tape.leaf(t.clone()))
    }

    /// Binds every parameter as a fresh leaf except `name`, which takes the
    /// given variable instead. `map` and `for_each` walk the tree in the
    /// same order, so the override lands positionally on the matching leaf.
    pub fn bind_with_override(&self, tape: &Tape, name: &str, var: &Var) -> Result<TmdcVars> {
        let names: Vec<String> = self.named().into_iter().map(|(n, _)| n).collect();
        let mut i = 0;
        let mut hit = false;
        let mut bad_shape: Option<Vec<usize>> = None;
        let vars = self.map(&mut |t| {
            let v = if names[i] == name {
                hit = true;
                if var.shape() != t.shape() {
                    bad_shape = Some(t.shape().to_vec());
                }
                var.clone()
            } else {
                tape.leaf(t.clone())
            };
            i += 1;
            v
        });
        let bad = |msg: String| TensorError::InvalidArg {
            op: "bind_with_override",
            msg,
        };
        if !hit {
            return Err(bad(format!("no parameter named {name:?}")));
        }
        if let Some(expected) = bad_shape {
            return Err(bad(format!(
                "override for {name:?} has shape {:?}, parameter is {expected:?}",
                var.shape()
            )));
        }
        Ok(vars)
    }
}
