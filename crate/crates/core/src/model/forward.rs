//! Forward passes and objectives: the per-modality denoising pipelines, the
//! 18-term stage-1 loss, and the stage-2 complementation-and-fusion pass.

use rand_chacha::ChaCha8Rng;

use crate::data::{Label, Modality, ModalityBundle, TaskKind};
use crate::layers::{
    bernoulli_mask, conv1d_standardize, dropout, mha, predict_head, residual_fc, standard_normal,
    vib_forward, Conv1dVars, LinearVars, MhaVars, Mode, VibVars,
};
use crate::tensor::{Result, Tape, Tensor, TensorError, Var};

use super::{AttnOwner, ModelConfig, TmdcVars};

/// Source of stochastic draws for one forward pass. Training mode pulls
/// reparameterization noise and dropout masks from the stream in a fixed
/// order, so any pass replays exactly from the seed; eval mode draws
/// nothing, which pins ε = 0 and makes dropout the identity.
pub struct FwdCtx<'r> {
    mode: Mode,
    dropout: f64,
    rng: Option<&'r mut ChaCha8Rng>,
}

impl<'r> FwdCtx<'r> {
    pub fn train(dropout: f64, rng: &'r mut ChaCha8Rng) -> FwdCtx<'r> {
        FwdCtx {
            mode: Mode::Train,
            dropout,
            rng: Some(rng),
        }
    }

    pub fn eval() -> FwdCtx<'static> {
        FwdCtx {
            mode: Mode::Eval,
            dropout: 0.0,
            rng: None,
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    fn eps(&mut self, tape: &Tape, shape: &[usize]) -> Var {
        match &mut self.rng {
            Some(rng) => tape.constant(standard_normal(shape, *rng)),
            None => tape.constant(Tensor::zeros(shape)),
        }
    }

    fn dropout_site(&mut self, tape: &Tape, x: &Var) -> Result<Var> {
        if self.mode == Mode::Eval || self.dropout <= 0.0 || self.dropout >= 1.0 {
            // Identity cases, plus out-of-range rates surfacing the layer error.
            return dropout(x, self.dropout, self.mode, None);
        }
        let rng = self.rng.as_mut().expect("training context carries a stream");
        let mask = tape.constant(bernoulli_mask(&x.shape(), 1.0 - self.dropout, *rng));
        dropout(x, self.dropout, self.mode, Some(&mask))
    }
}

/// One denoising stack applied to one modality: the bottleneck sample `x`,
/// the attention-refined reconstruction `x_hat`, predictions from both, and
/// the bottleneck's KL term.
pub struct DenoiseOut {
    pub x: Var,
    pub x_hat: Var,
    pub y: Var,
    pub y_hat: Var,
    pub kl: Var,
}

struct Stack<'a> {
    conv: &'a Conv1dVars,
    vib: &'a VibVars,
    mha: &'a MhaVars,
    resfc: &'a LinearVars,
    head_x: &'a LinearVars,
    head_hat: &'a LinearVars,
}

fn denoise(
    cfg: &ModelConfig,
    stack: Stack,
    x_raw: &Tensor,
    tape: &Tape,
    ctx: &mut FwdCtx,
) -> Result<DenoiseOut> {
    let x_in = tape.constant(x_raw.clone());
    let e = conv1d_standardize(stack.conv, &x_in, cfg.t)?;
    let eps = ctx.eps(tape, &[cfg.t, cfg.d]);
    let vib = vib_forward(stack.vib, &e, &eps, cfg.sigma_param)?;
    let attended = mha(stack.mha, &vib.sample, &vib.sample)?.add(&vib.sample)?;
    let x_hat = ctx.dropout_site(tape, &residual_fc(stack.resfc, &attended)?)?;
    let y = predict_head(stack.head_x, &vib.sample)?;
    let y_hat = predict_head(stack.head_hat, &x_hat)?;
    Ok(DenoiseOut {
        x: vib.sample,
        x_hat,
        y,
        y_hat,
        kl: vib.kl,
    })
}

fn missing_module(op: &'static str, which: &str) -> TensorError {
    TensorError::InvalidArg {
        op,
        msg: format!("the {which} module was removed by the ablation"),
    }
}

/// Modality-specific denoising of `m`'s raw features.
pub fn msd_forward(
    cfg: &ModelConfig,
    vars: &TmdcVars,
    m: Modality,
    x_raw: &Tensor,
    tape: &Tape,
    ctx: &mut FwdCtx,
) -> Result<DenoiseOut> {
    let msd = vars
        .msd
        .as_ref()
        .ok_or_else(|| missing_module("msd_forward", "MSD"))?;
    let s = &msd[m.index()];
    denoise(
        cfg,
        Stack {
            conv: &s.conv,
            vib: &s.vib,
            mha: &s.mha,
            resfc: &s.resfc,
            head_x: &s.head_s,
            head_hat: &s.head_spe,
        },
        x_raw,
        tape,
        ctx,
    )
}

/// Modality-common denoising of `m`'s raw features: the stack is shared
/// across modalities, the prediction heads are per-modality.
pub fn mcd_forward(
    cfg: &ModelConfig,
    vars: &TmdcVars,
    m: Modality,
    x_raw: &Tensor,
    tape: &Tape,
    ctx: &mut FwdCtx,
) -> Result<DenoiseOut> {
    let mcd = vars
        .mcd
        .as_ref()
        .ok_or_else(|| missing_module("mcd_forward", "MCD"))?;
    denoise(
        cfg,
        Stack {
            conv: &mcd.shared.conv,
            vib: &mcd.shared.vib,
            mha: &mcd.shared.mha,
            resfc: &mcd.shared.resfc,
            head_x: &mcd.head_c[m.index()],
            head_hat: &mcd.head_com[m.index()],
        },
        x_raw,
        tape,
        ctx,
    )
}

/// Per-sample task loss: squared error for regression, cross-entropy with a
/// detached max shift for classification.
pub fn task_loss(task: &TaskKind, pred: &Var, label: &Label) -> Result<Var> {
    let bad = |msg: String| TensorError::InvalidArg {
        op: "task_loss",
        msg,
    };
    match (task, label) {
        (TaskKind::Regression, Label::Score(y)) => {
            if pred.numel() != 1 {
                return Err(bad(format!("regression expects one output, got {:?}", pred.shape())));
            }
            let diff = pred.sum()?.add_scalar(-y)?;
            diff.mul(&diff)
        }
        (TaskKind::Classification { classes }, Label::Class(c)) => {
            if pred.shape() != [*classes] {
                return Err(bad(format!(
                    "expected {classes} logits, got shape {:?}",
                    pred.shape()
                )));
            }
            if *c >= *classes {
                return Err(bad(format!("class {c} out of range for {classes} classes")));
            }
            let max = pred
                .value()
                .data()
                .iter()
                .cloned()
                .fold(f64::NEG_INFINITY, f64::max);
            let lse = pred.add_scalar(-max)?.exp()?.sum()?.log()?.add_scalar(max)?;
            lse.sub(&pred.slice_lastdim(*c, 1)?.sum()?)
        }
        (t, l) => Err(bad(format!("label {l:?} does not match task {t:?}"))),
    }
}

/// The 18 stage-1 loss terms: four batch-mean task losses and two KL terms
/// per modality. Terms belonging to a removed module stay zero.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ImdBreakdown {
    pub l_s: [f64; 3],
    pub l_c: [f64; 3],
    pub l_spe: [f64; 3],
    pub l_com: [f64; 3],
    pub kl_s: [f64; 3],
    pub kl_c: [f64; 3],
}

impl ImdBreakdown {
    pub const COLUMNS: [&'static str; 18] = [
        "L_s_A", "L_s_T", "L_s_V", "L_c_A", "L_c_T", "L_c_V", "L_Spe_A", "L_Spe_T", "L_Spe_V",
        "L_Com_A", "L_Com_T", "L_Com_V", "KL_s_A", "KL_s_T", "KL_s_V", "KL_c_A", "KL_c_T",
        "KL_c_V",
    ];

    pub fn values(&self) -> [f64; 18] {
        let mut out = [0.0; 18];
        let groups = [self.l_s, self.l_c, self.l_spe, self.l_com, self.kl_s, self.kl_c];
        for (i, g) in groups.iter().enumerate() {
            out[i * 3..(i + 1) * 3].copy_from_slice(g);
        }
        out
    }

    pub fn total(&self, beta: f64) -> f64 {
        let task: f64 = [self.l_s, self.l_c, self.l_spe, self.l_com]
            .iter()
            .flatten()
            .sum();
        let kl: f64 = [self.kl_s, self.kl_c].iter().flatten().sum();
        task + beta * kl
    }
}

fn acc(slot: &mut Option<Var>, v: Var) -> Result<()> {
    *slot = Some(match slot.take() {
        Some(s) => s.add(&v)?,
        None => v,
    });
    Ok(())
}

/// Stage-1 objective over a batch: every active module's task losses plus
/// β-weighted KL terms, each averaged over the batch and summed across
/// modalities. Stage 1 trains on complete data, so a bundle with a missing
/// modality is a protocol violation.
pub fn imd_loss(
    cfg: &ModelConfig,
    vars: &TmdcVars,
    tape: &Tape,
    batch: &[&ModalityBundle],
    beta: f64,
    ctx: &mut FwdCtx,
) -> Result<(Var, ImdBreakdown)> {
    let bad = |msg: &str| TensorError::InvalidArg {
        op: "imd_loss",
        msg: msg.into(),
    };
    if batch.is_empty() {
        return Err(bad("empty batch"));
    }
    if batch.iter().any(|b| !b.is_complete()) {
        return Err(bad("stage 1 requires complete data; a bundle has a missing modality"));
    }

    const L_S: usize = 0;
    const L_C: usize = 1;
    const L_SPE: usize = 2;
    const L_COM: usize = 3;
    const KL_S: usize = 4;
    const KL_C: usize = 5;
    let mut terms: [[Option<Var>; 3]; 6] = Default::default();

    for b in batch {
        for m in Modality::ALL {
            let i = m.index();
            if vars.msd.is_some() {
                let out = msd_forward(cfg, vars, m, b.feat(m), tape, ctx)?;
                acc(&mut terms[L_S][i], task_loss(&cfg.task, &out.y, &b.label)?)?;
                acc(&mut terms[L_SPE][i], task_loss(&cfg.task, &out.y_hat, &b.label)?)?;
                acc(&mut terms[KL_S][i], out.kl)?;
            }
            if vars.mcd.is_some() {
                let out = mcd_forward(cfg, vars, m, b.feat(m), tape, ctx)?;
                acc(&mut terms[L_C][i], task_loss(&cfg.task, &out.y, &b.label)?)?;
                acc(&mut terms[L_COM][i], task_loss(&cfg.task, &out.y_hat, &b.label)?)?;
                acc(&mut terms[KL_C][i], out.kl)?;
            }
        }
    }

    let inv_b = 1.0 / batch.len() as f64;
    let mut bd = ImdBreakdown::default();
    let mut task_sum: Option<Var> = None;
    let mut kl_sum: Option<Var> = None;
    for kind in [L_S, L_C, L_SPE, L_COM, KL_S, KL_C] {
        for i in 0..3 {
            let Some(t) = terms[kind][i].take() else {
                continue;
            };
            let t = t.mul_scalar(inv_b)?;
            match kind {
                L_S => bd.l_s[i] = t.item(),
                L_C => bd.l_c[i] = t.item(),
                L_SPE => bd.l_spe[i] = t.item(),
                L_COM => bd.l_com[i] = t.item(),
                KL_S => bd.kl_s[i] = t.item(),
                _ => bd.kl_c[i] = t.item(),
            }
            if kind <= L_COM {
                acc(&mut task_sum, t)?;
            } else {
                acc(&mut kl_sum, t)?;
            }
        }
    }
    let task_sum = task_sum.expect("at least one denoising module is active");
    let total = match kl_sum {
        Some(kl) => task_sum.add(&kl.mul_scalar(beta)?)?,
        None => task_sum,
    };
    Ok((total, bd))
}

/// Both bottleneck latents of one modality, after ablation fallbacks: with a
/// module removed, the surviving latent stands in for the absent one.
struct Latents {
    x_s: Var,
    x_c: Var,
}

fn bottleneck(
    cfg: &ModelConfig,
    conv: &Conv1dVars,
    vib: &VibVars,
    x_raw: &Tensor,
    tape: &Tape,
    ctx: &mut FwdCtx,
) -> Result<Var> {
    let x_in = tape.constant(x_raw.clone());
    let e = conv1d_standardize(conv, &x_in, cfg.t)?;
    let eps = ctx.eps(tape, &[cfg.t, cfg.d]);
    Ok(vib_forward(vib, &e, &eps, cfg.sigma_param)?.sample)
}

fn latents_for(
    cfg: &ModelConfig,
    vars: &TmdcVars,
    m: Modality,
    x_raw: &Tensor,
    tape: &Tape,
    ctx: &mut FwdCtx,
) -> Result<Latents> {
    let spe = match &vars.msd {
        Some(msd) => {
            let s = &msd[m.index()];
            Some(bottleneck(cfg, &s.conv, &s.vib, x_raw, tape, ctx)?)
        }
        None => None,
    };
    let com = match &vars.mcd {
        Some(mcd) => Some(bottleneck(cfg, &mcd.shared.conv, &mcd.shared.vib, x_raw, tape, ctx)?),
        None => None,
    };
    match (spe, com) {
        (Some(s), Some(c)) => Ok(Latents { x_s: s, x_c: c }),
        (Some(s), None) => Ok(Latents {
            x_s: s.clone(),
            x_c: s,
        }),
        (None, Some(c)) => Ok(Latents {
            x_s: c.clone(),
            x_c: c,
        }),
        (None, None) => unreachable!("rejected by AblationConfig::validate"),
    }
}

fn attn_of(vars: &TmdcVars, m: Modality) -> &MhaVars {
    match &vars.msd {
        Some(msd) => &msd[m.index()].mha,
        None => &vars.mcd.as_ref().expect("validated").shared.mha,
    }
}

/// Attention under `owner`'s parameters followed by `owner`'s slot-residual
/// block; the shared refinement step behind every fusion slot.
fn refined_slot(
    vars: &TmdcVars,
    owner: Modality,
    query: &Var,
    kv: &Var,
    tape: &Tape,
    ctx: &mut FwdCtx,
) -> Result<Var> {
    let a = mha(attn_of(vars, owner), query, kv)?;
    ctx.dropout_site(tape, &residual_fc(&vars.all_resfc[owner.index()], &a)?)
}

/// Role-swapped attention `query = X_c(mq), key/value = X_s(mkv)`; the
/// parameter owner follows the configured convention.
fn cross_slot(
    cfg: &ModelConfig,
    vars: &TmdcVars,
    mq: Modality,
    mkv: Modality,
    lat: &[Option<Latents>; 3],
    tape: &Tape,
    ctx: &mut FwdCtx,
) -> Result<Var> {
    let owner = match cfg.attn_owner {
        AttnOwner::KvOwner => mkv,
        AttnOwner::QueryOwner => mq,
    };
    let q = &lat[mq.index()].as_ref().expect("available").x_c;
    let kv = &lat[mkv.index()].as_ref().expect("available").x_s;
    refined_slot(vars, owner, q, kv, tape, ctx)
}

/// Stage-2 output on one sample: the fused prediction, the `[T, 3D]` fused
/// features, and the three per-modality fusion slots in canonical order.
pub struct ImcOut {
    pub y: Var,
    pub fused: Var,
    pub slots: [Var; 3],
}

/// Stage-2 forward for any availability pattern: denoise what is present,
/// fill missing fusion slots by cross-modal complementation (two available:
/// the sum of both role-swapped terms; one available: its self-
/// reconstruction reused in both holes), then fuse and predict. Without the
/// complementation step missing slots stay zero.
pub fn imc_forward(
    cfg: &ModelConfig,
    vars: &TmdcVars,
    tape: &Tape,
    bundle: &ModalityBundle,
    ctx: &mut FwdCtx,
) -> Result<ImcOut> {
    let avail: Vec<Modality> = Modality::ALL
        .into_iter()
        .filter(|&m| bundle.is_available(m))
        .collect();
    if avail.is_empty() {
        return Err(TensorError::InvalidArg {
            op: "imc_forward",
            msg: "at least one modality must be available".into(),
        });
    }

    let mut lat: [Option<Latents>; 3] = Default::default();
    for &m in &avail {
        lat[m.index()] = Some(latents_for(cfg, vars, m, bundle.feat(m), tape, ctx)?);
    }

    let mut slots: [Option<Var>; 3] = Default::default();
    for &m in &avail {
        let l = lat[m.index()].as_ref().expect("just set");
        slots[m.index()] = Some(refined_slot(vars, m, &l.x_s, &l.x_c, tape, ctx)?);
    }

    if cfg.ablation.use_imc_complement {
        match avail[..] {
            [_, _, _] => {}
            [m1, m2] => {
                let missing = Modality::ALL
                    .into_iter()
                    .find(|&m| !bundle.is_available(m))
                    .expect("exactly one missing");
                let a = cross_slot(cfg, vars, m1, m2, &lat, tape, ctx)?;
                let b = cross_slot(cfg, vars, m2, m1, &lat, tape, ctx)?;
                slots[missing.index()] = Some(a.add(&b)?);
            }
            [m] => {
                let hat = cross_slot(cfg, vars, m, m, &lat, tape, ctx)?;
                for mm in Modality::ALL {
                    if !bundle.is_available(mm) {
                        slots[mm.index()] = Some(hat.clone());
                    }
                }
            }
            _ => unreachable!(),
        }
    }

    let slots: [Var; 3] = std::array::from_fn(|i| {
        slots[i]
            .take()
            .unwrap_or_else(|| tape.constant(Tensor::zeros(&[cfg.t, cfg.d])))
    });
    let fused = Var::concat_lastdim(&[&slots[0], &slots[1], &slots[2]])?;
    let y = predict_head(&vars.fuse_head, &fused)?;
    Ok(ImcOut { y, fused, slots })
}

/// Stage-2 objective: mean fused-prediction task loss over a batch.
pub fn imc_loss(
    cfg: &ModelConfig,
    vars: &TmdcVars,
    tape: &Tape,
    batch: &[&ModalityBundle],
    ctx: &mut FwdCtx,
) -> Result<Var> {
    if batch.is_empty() {
        return Err(TensorError::InvalidArg {
            op: "imc_loss",
            msg: "empty batch".into(),
        });
    }
    let mut sum: Option<Var> = None;
    for b in batch {
        let out = imc_forward(cfg, vars, tape, b, ctx)?;
        acc(&mut sum, task_loss(&cfg.task, &out.y, &b.label)?)?;
    }
    sum.expect("non-empty batch").mul_scalar(1.0 / batch.len() as f64)
}

/// The six refined representations behind the similarity diagnostic: X̂_Spe
/// and X̂_Com for every modality, computed from the stored features exactly
/// as held (a masked modality contributes its zeroed payload). A removed
/// module mirrors the forward fallback: both hats come from the survivor.
pub fn representation_hats(
    cfg: &ModelConfig,
    vars: &TmdcVars,
    tape: &Tape,
    bundle: &ModalityBundle,
    ctx: &mut FwdCtx,
) -> Result<([Var; 3], [Var; 3])> {
    let mut spe: [Option<Var>; 3] = Default::default();
    let mut com: [Option<Var>; 3] = Default::default();
    for m in Modality::ALL {
        let s = match vars.msd {
            Some(_) => Some(msd_forward(cfg, vars, m, bundle.feat(m), tape, ctx)?.x_hat),
            None => None,
        };
        let c = match vars.mcd {
            Some(_) => Some(mcd_forward(cfg, vars, m, bundle.feat(m), tape, ctx)?.x_hat),
            None => None,
        };
        let (sv, cv) = match (s, c) {
            (Some(a), Some(b)) => (a, b),
            (Some(a), None) => (a.clone(), a),
            (None, Some(b)) => (b.clone(), b),
            (None, None) => unreachable!("rejected by AblationConfig::validate"),
        };
        spe[m.index()] = Some(sv);
        com[m.index()] = Some(cv);
    }
    Ok((
        spe.map(|o| o.expect("set above")),
        com.map(|o| o.expect("set above")),
    ))
}
