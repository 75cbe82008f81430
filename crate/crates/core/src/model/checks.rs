//! Gradient verification: central finite differences against the tape for
//! every layer primitive and both stage objectives at small shapes. The
//! `gradcheck` command-line tool and the acceptance suite both run this.
//!
//! Every closure rebuilds its random state from a fixed seed per evaluation,
//! so sampled noise and dropout masks are frozen across probes and the
//! objectives stay differentiable functions of the checked leaf.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{apply_missing, Label, ModalityBundle, Pattern, TaskKind};
use crate::layers::{
    bernoulli_mask, conv1d_standardize, dropout, mha, predict_head, residual_fc, standard_normal,
    vib_forward, Conv1dParams, Conv1dVars, LinearParams, LinearVars, MhaParams, Mode, SigmaParam,
    VibParams,
};
use crate::tensor::{finite_diff_check, Result, Tensor, Var};

use super::{imc_loss, imd_loss, AblationConfig, AttnOwner, FwdCtx, ModelConfig, TmdcParams};

/// One verified gradient target: the worst relative error between the tape
/// gradient and central differences over every coordinate of the leaf.
#[derive(Clone, Debug)]
pub struct CheckItem {
    pub name: String,
    pub err: f64,
}

/// Every error below this bound counts as a pass.
pub const GRAD_TOL: f64 = 1e-4;

const B: usize = 2;
const T: usize = 3;
const D: usize = 8;
const FEAT: usize = 6;
const H: f64 = 1e-5;

fn sq_sum(y: &Var) -> Result<Var> {
    y.mul(y)?.sum()
}

fn push(out: &mut Vec<CheckItem>, name: impl Into<String>, err: f64) {
    out.push(CheckItem {
        name: name.into(),
        err,
    });
}

/// Runs the full suite and returns one item per target.
pub fn gradient_suite() -> Result<Vec<CheckItem>> {
    let mut out = Vec::new();
    layer_checks(&mut out)?;
    loss_checks(&mut out)?;
    Ok(out)
}

fn layer_checks(out: &mut Vec<CheckItem>) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1001);

    let conv = Conv1dParams::new(FEAT, D, &mut rng);
    let raw = standard_normal(&[5, FEAT], &mut rng);
    let err = finite_diff_check(
        |tape, x| sq_sum(&conv1d_standardize(&conv.bind(tape), x, T)?),
        &raw,
        H,
    )?;
    push(out, "conv1d_standardize/input", err);
    let err = finite_diff_check(
        |tape, v| {
            let cv = Conv1dVars {
                kernel: v.clone(),
                bias: tape.leaf(conv.bias.clone()),
            };
            sq_sum(&conv1d_standardize(&cv, &tape.constant(raw.clone()), T)?)
        },
        &conv.kernel,
        H,
    )?;
    push(out, "conv1d_standardize/kernel", err);
    let err = finite_diff_check(
        |tape, v| {
            let cv = Conv1dVars {
                kernel: tape.leaf(conv.kernel.clone()),
                bias: v.clone(),
            };
            sq_sum(&conv1d_standardize(&cv, &tape.constant(raw.clone()), T)?)
        },
        &conv.bias,
        H,
    )?;
    push(out, "conv1d_standardize/bias", err);

    let mh = MhaParams::new(D, 2, &mut rng);
    let q = standard_normal(&[T, D], &mut rng);
    let kv = standard_normal(&[T, D], &mut rng);
    let err = finite_diff_check(
        |tape, x| sq_sum(&mha(&mh.bind(tape), x, &tape.constant(kv.clone()))?),
        &q,
        H,
    )?;
    push(out, "mha/query", err);
    for (field, x0) in [("wq", &mh.wq), ("wo", &mh.wo)] {
        let err = finite_diff_check(
            |tape, v| {
                let mut mv = mh.bind(tape);
                match field {
                    "wq" => mv.wq = v.clone(),
                    _ => mv.wo = v.clone(),
                }
                sq_sum(&mha(&mv, &tape.constant(q.clone()), &tape.constant(kv.clone()))?)
            },
            x0,
            H,
        )?;
        push(out, format!("mha/{field}"), err);
    }

    let vib = VibParams::new(D, &mut rng);
    let x_t = standard_normal(&[T, D], &mut rng);
    let eps_t = standard_normal(&[T, D], &mut rng);
    let vib_loss = |vv: &crate::layers::VibVars, x: &Var, eps: &Var, sp: SigmaParam| {
        let o = vib_forward(vv, x, eps, sp)?;
        sq_sum(&o.sample)?.add(&o.kl)
    };
    let err = finite_diff_check(
        |tape, x| {
            vib_loss(
                &vib.bind(tape),
                x,
                &tape.constant(eps_t.clone()),
                SigmaParam::Softplus,
            )
        },
        &x_t,
        H,
    )?;
    push(out, "vib/input", err);
    let err = finite_diff_check(
        |tape, v| {
            let mut vv = vib.bind(tape);
            vv.mu.weight = v.clone();
            vib_loss(
                &vv,
                &tape.constant(x_t.clone()),
                &tape.constant(eps_t.clone()),
                SigmaParam::Softplus,
            )
        },
        &vib.mu.weight,
        H,
    )?;
    push(out, "vib/mu.weight", err);
    for sp in [SigmaParam::Softplus, SigmaParam::ExpHalfLogvar] {
        let err = finite_diff_check(
            |tape, v| {
                let mut vv = vib.bind(tape);
                vv.sigma.weight = v.clone();
                vib_loss(&vv, &tape.constant(x_t.clone()), &tape.constant(eps_t.clone()), sp)
            },
            &vib.sigma.weight,
            H,
        )?;
        let tag = match sp {
            SigmaParam::Softplus => "softplus",
            SigmaParam::ExpHalfLogvar => "exp-half-logvar",
        };
        push(out, format!("vib/sigma.weight[{tag}]"), err);
    }

    let lin = LinearParams::new(D, D, &mut rng);
    let err = finite_diff_check(
        |tape, x| sq_sum(&residual_fc(&lin.bind(tape), x)?),
        &x_t,
        H,
    )?;
    push(out, "residual_fc/input", err);
    let err = finite_diff_check(
        |tape, v| {
            let lv = LinearVars {
                weight: v.clone(),
                bias: tape.leaf(lin.bias.clone()),
            };
            sq_sum(&residual_fc(&lv, &tape.constant(x_t.clone()))?)
        },
        &lin.weight,
        H,
    )?;
    push(out, "residual_fc/weight", err);

    let head = LinearParams::new(D, 2, &mut rng);
    let err = finite_diff_check(
        |tape, x| sq_sum(&predict_head(&head.bind(tape), x)?),
        &x_t,
        H,
    )?;
    push(out, "predict_head/input", err);
    for (field, x0) in [("weight", &head.weight), ("bias", &head.bias)] {
        let err = finite_diff_check(
            |tape, v| {
                let mut hv = head.bind(tape);
                match field {
                    "weight" => hv.weight = v.clone(),
                    _ => hv.bias = v.clone(),
                }
                sq_sum(&predict_head(&hv, &tape.constant(x_t.clone()))?)
            },
            x0,
            H,
        )?;
        push(out, format!("predict_head/{field}"), err);
    }

    let mask = bernoulli_mask(&[T, D], 0.7, &mut rng);
    let err = finite_diff_check(
        |tape, x| {
            let m = tape.constant(mask.clone());
            sq_sum(&dropout(x, 0.3, Mode::Train, Some(&m))?)
        },
        &x_t,
        H,
    )?;
    push(out, "dropout/input", err);
    Ok(())
}

fn loss_fixture() -> Result<(ModelConfig, TmdcParams, Vec<ModalityBundle>)> {
    let cfg = ModelConfig {
        d: D,
        t: T,
        n_heads: 2,
        feat_dims: [FEAT; 3],
        task: TaskKind::Regression,
        sigma_param: SigmaParam::Softplus,
        attn_owner: AttnOwner::KvOwner,
        dropout: 0.3,
        ablation: AblationConfig::default(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(2002);
    let params = TmdcParams::new(&cfg, &mut rng)?;
    let bundles = (0..B)
        .map(|i| ModalityBundle {
            feats: [
                standard_normal(&[4, FEAT], &mut rng),
                standard_normal(&[3, FEAT], &mut rng),
                standard_normal(&[5, FEAT], &mut rng),
            ],
            available: [true; 3],
            label: Label::Score(if i % 2 == 0 { 0.8 } else { -0.6 }),
        })
        .collect();
    Ok((cfg, params, bundles))
}

fn param_value(params: &TmdcParams, name: &str) -> Tensor {
    params
        .named()
        .into_iter()
        .find(|(n, _)| n == name)
        .map(|(_, t)| t.clone())
        .expect("known parameter name")
}

fn loss_checks(out: &mut Vec<CheckItem>) -> Result<()> {
    let (cfg, params, bundles) = loss_fixture()?;

    for name in [
        "spe_A.conv.kernel",
        "spe_T.mha.wq",
        "spe_V.vib.sigma.weight",
        "com.conv.kernel",
        "com.vib.mu.weight",
        "com_A.head_c.weight",
    ] {
        let x0 = param_value(&params, name);
        let err = finite_diff_check(
            |tape, v| {
                let vars = params.bind_with_override(tape, name, v)?;
                let refs: Vec<&ModalityBundle> = bundles.iter().collect();
                let mut rng = ChaCha8Rng::seed_from_u64(7777);
                let mut ctx = FwdCtx::train(0.3, &mut rng);
                Ok(imd_loss(&cfg, &vars, tape, &refs, 0.01, &mut ctx)?.0)
            },
            &x0,
            H,
        )?;
        push(out, format!("imd_loss/{name}"), err);
    }

    for pat in ["A,T,V", "T,V", "A"] {
        let pattern = Pattern::parse(pat).expect("valid pattern");
        let mut masked = bundles.clone();
        for b in &mut masked {
            apply_missing(b, pattern);
        }
        for name in [
            "fuse.head.weight",
            "all_T.resfc.weight",
            "spe_A.conv.kernel",
            "com.vib.sigma.weight",
        ] {
            let x0 = param_value(&params, name);
            let err = finite_diff_check(
                |tape, v| {
                    let vars = params.bind_with_override(tape, name, v)?;
                    let refs: Vec<&ModalityBundle> = masked.iter().collect();
                    let mut rng = ChaCha8Rng::seed_from_u64(8888);
                    let mut ctx = FwdCtx::train(0.3, &mut rng);
                    imc_loss(&cfg, &vars, tape, &refs, &mut ctx)
                },
                &x0,
                H,
            )?;
            push(out, format!("imc_loss[{pat}]/{name}"), err);
        }
    }
    Ok(())
}
