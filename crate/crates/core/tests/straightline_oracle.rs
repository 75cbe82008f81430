//! Forward-pass semantics against a straight-line reimplementation.
//!
//! Every check here recomputes the model's math with plain nested loops over
//! `f64` values, sharing no code with the tensor library: affine maps,
//! the width-3 convolution, attention, the Gaussian bottleneck and its KL,
//! the loss decomposition, and the slot complementation topology are each
//! spelled out independently and must agree with the taped pipeline to near
//! machine precision on seeded instances. The loop nests deliberately sum in
//! a different order than the tensor ops, so agreement pins the math rather
//! than one float schedule.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tmdc_core::data::{Label, Modality, ModalityBundle, TaskKind};
use tmdc_core::layers::{vib_forward, SigmaParam, VibParams};
use tmdc_core::model::{
    imc_forward, imd_loss, mcd_forward, msd_forward, AblationConfig, AttnOwner, FwdCtx,
    ModelConfig, TmdcParams,
};
use tmdc_core::tensor::{Tape, Tensor, Var};

/// Relative-or-absolute agreement bound. The oracle sums in a different
/// order than the tensor ops, so exact bit equality is not expected; 1e-9
/// leaves nine orders of magnitude to the nearest plausible bug.
const TOL: f64 = 1e-9;

type Mat = Vec<Vec<f64>>;

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= TOL * a.abs().max(b.abs()).max(1.0)
}

fn assert_scalar(name: &str, got: f64, want: f64) {
    assert!(close(got, want), "{name}: got {got}, oracle says {want}");
}

/// Compare a taped result against oracle rows, flattening both.
fn assert_matches(name: &str, got: &Var, want: &Mat) {
    let flat: Vec<f64> = want.iter().flatten().copied().collect();
    let value = got.value();
    assert_eq!(
        value.data().len(),
        flat.len(),
        "{name}: shape {:?} vs oracle {}x{}",
        value.shape(),
        want.len(),
        want.first().map_or(0, Vec::len),
    );
    for (i, (g, w)) in value.data().iter().zip(&flat).enumerate() {
        assert!(close(*g, *w), "{name}[{i}]: got {g}, oracle says {w}");
    }
}

fn assert_vec(name: &str, got: &Var, want: &[f64]) {
    assert_matches(name, got, &vec![want.to_vec()]);
}

/// Deterministic off-grid input pattern; the phase keeps instances distinct.
fn wave(rows: usize, cols: usize, phase: f64) -> Tensor {
    Tensor::from_fn(&[rows, cols], |i| 0.8 * (phase + 0.7 * i as f64).sin())
}

fn grid(t: &Tensor) -> Mat {
    assert_eq!(t.shape().len(), 2, "expected a matrix, got {:?}", t.shape());
    let cols = t.shape()[1];
    t.data().chunks(cols).map(<[f64]>::to_vec).collect()
}

/// Parameters by dotted name, unloaded into plain nested vectors.
struct Book(BTreeMap<String, Tensor>);

impl Book {
    fn of(params: &TmdcParams) -> Book {
        let mut map = BTreeMap::new();
        params.for_each(&mut |name, t| {
            map.insert(name, t.clone());
        });
        Book(map)
    }

    fn tensor(&self, name: &str) -> &Tensor {
        self.0
            .get(name)
            .unwrap_or_else(|| panic!("no parameter named {name}"))
    }

    fn mat(&self, name: &str) -> Mat {
        grid(self.tensor(name))
    }

    fn vec(&self, name: &str) -> Vec<f64> {
        let t = self.tensor(name);
        assert_eq!(t.shape().len(), 1, "{name}: expected a vector");
        t.data().to_vec()
    }

    /// Width-3 kernel as `[tap][in][out]`.
    fn ker(&self, name: &str) -> Vec<Mat> {
        let t = self.tensor(name);
        let s = t.shape();
        assert_eq!(s.len(), 3);
        assert_eq!(s[0], 3);
        let (ind, out) = (s[1], s[2]);
        (0..3)
            .map(|k| {
                (0..ind)
                    .map(|i| {
                        let base = (k * ind + i) * out;
                        t.data()[base..base + out].to_vec()
                    })
                    .collect()
            })
            .collect()
    }
}

fn o_matmul(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .map(|row| {
            (0..b[0].len())
                .map(|j| row.iter().enumerate().map(|(k, v)| v * b[k][j]).sum())
                .collect()
        })
        .collect()
}

fn o_affine(x: &Mat, w: &Mat, b: &[f64]) -> Mat {
    let mut y = o_matmul(x, w);
    for row in &mut y {
        for (v, bias) in row.iter_mut().zip(b) {
            *v += bias;
        }
    }
    y
}

fn o_add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(ra, rb)| ra.iter().zip(rb).map(|(x, y)| x + y).collect())
        .collect()
}

/// Temporal conv over the raw length, taps reading `x[t-1], x[t], x[t+1]`
/// with zeros off both ends, then truncated or zero-padded to `t_out` rows.
/// A truncated row may still read the neighbor just past the cut.
fn o_conv(x: &Mat, k: &[Mat], bias: &[f64], t_out: usize) -> Mat {
    let l = x.len() as isize;
    let mut y = vec![vec![0.0; bias.len()]; t_out];
    for t in 0..t_out.min(x.len()) {
        for (o, cell) in y[t].iter_mut().enumerate() {
            let mut acc = bias[o];
            for (tap, off) in [(0usize, -1isize), (1, 0), (2, 1)] {
                let src = t as isize + off;
                if src < 0 || src >= l {
                    continue;
                }
                for (i, v) in x[src as usize].iter().enumerate() {
                    acc += v * k[tap][i][o];
                }
            }
            *cell = acc;
        }
    }
    y
}

fn o_softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

fn take_cols(m: &Mat, start: usize, width: usize) -> Mat {
    m.iter().map(|r| r[start..start + width].to_vec()).collect()
}

fn o_mha(query: &Mat, kv: &Mat, wq: &Mat, wk: &Mat, wv: &Mat, wo: &Mat, n_heads: usize) -> Mat {
    let d = wq.len();
    let hd = d / n_heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let q = o_matmul(query, wq);
    let k = o_matmul(kv, wk);
    let v = o_matmul(kv, wv);
    let mut heads = Vec::new();
    for h in 0..n_heads {
        let qh = take_cols(&q, h * hd, hd);
        let kh = take_cols(&k, h * hd, hd);
        let vh = take_cols(&v, h * hd, hd);
        let probs: Mat = qh
            .iter()
            .map(|qi| {
                let scores: Vec<f64> = kh
                    .iter()
                    .map(|kj| qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale)
                    .collect();
                o_softmax(&scores)
            })
            .collect();
        heads.push(o_matmul(&probs, &vh));
    }
    let concat: Mat = (0..query.len())
        .map(|i| heads.iter().flat_map(|hm| hm[i].iter().copied()).collect())
        .collect();
    o_matmul(&concat, wo)
}

fn o_softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn o_sigma(pre: f64, sp: SigmaParam) -> f64 {
    match sp {
        SigmaParam::Softplus => o_softplus(pre) + 1e-6,
        SigmaParam::ExpHalfLogvar => (0.5 * pre).exp(),
    }
}

struct OVib {
    mu: Mat,
    sigma: Mat,
    sample: Mat,
    kl: f64,
}

/// μ and σ heads, the reparameterized sample, and the KL to a unit Gaussian
/// averaged over rows.
fn o_vib(e: &Mat, eps: &Mat, mu_w: &Mat, mu_b: &[f64], s_w: &Mat, s_b: &[f64], sp: SigmaParam) -> OVib {
    let mu = o_affine(e, mu_w, mu_b);
    let pre = o_affine(e, s_w, s_b);
    let mut sigma = pre.clone();
    let mut sample = mu.clone();
    let mut kl = 0.0;
    for t in 0..mu.len() {
        for j in 0..mu[t].len() {
            let s = o_sigma(pre[t][j], sp);
            sigma[t][j] = s;
            sample[t][j] = mu[t][j] + eps[t][j] * s;
            kl += mu[t][j] * mu[t][j] + s * s - 2.0 * s.ln() - 1.0;
        }
    }
    OVib { mu, sigma, sample, kl: kl * 0.5 / e.len() as f64 }
}

fn o_residual(x: &Mat, w: &Mat, b: &[f64]) -> Mat {
    o_add(x, &o_affine(x, w, b))
}

fn o_mean_rows(x: &Mat) -> Vec<f64> {
    let cols = x[0].len();
    (0..cols)
        .map(|j| x.iter().map(|r| r[j]).sum::<f64>() / x.len() as f64)
        .collect()
}

fn o_head(x: &Mat, w: &Mat, b: &[f64]) -> Vec<f64> {
    o_affine(&vec![o_mean_rows(x)], w, b).remove(0)
}

struct ODenoise {
    x: Mat,
    x_hat: Mat,
    y: Vec<f64>,
    y_hat: Vec<f64>,
    kl: f64,
}

/// One full denoising stack in eval mode (ε = 0, dropout off): conv, VIB,
/// self-attention with its skip connection, the residual reconstruction,
/// and both prediction heads, all from parameters under `stack`.
fn o_denoise(
    book: &Book,
    stack: &str,
    head_x: &str,
    head_hat: &str,
    x_raw: &Mat,
    cfg: &ModelConfig,
) -> ODenoise {
    let e = o_conv(
        x_raw,
        &book.ker(&format!("{stack}.conv.kernel")),
        &book.vec(&format!("{stack}.conv.bias")),
        cfg.t,
    );
    let zeros = vec![vec![0.0; cfg.d]; cfg.t];
    let vib = o_vib(
        &e,
        &zeros,
        &book.mat(&format!("{stack}.vib.mu.weight")),
        &book.vec(&format!("{stack}.vib.mu.bias")),
        &book.mat(&format!("{stack}.vib.sigma.weight")),
        &book.vec(&format!("{stack}.vib.sigma.bias")),
        cfg.sigma_param,
    );
    let attended = o_add(&o_stack_mha(book, stack, &vib.sample, &vib.sample, cfg), &vib.sample);
    let x_hat = o_residual(
        &attended,
        &book.mat(&format!("{stack}.resfc.weight")),
        &book.vec(&format!("{stack}.resfc.bias")),
    );
    let y = o_head(
        &vib.sample,
        &book.mat(&format!("{head_x}.weight")),
        &book.vec(&format!("{head_x}.bias")),
    );
    let y_hat = o_head(
        &x_hat,
        &book.mat(&format!("{head_hat}.weight")),
        &book.vec(&format!("{head_hat}.bias")),
    );
    ODenoise { x: vib.sample, x_hat, y, y_hat, kl: vib.kl }
}

fn o_stack_mha(book: &Book, stack: &str, query: &Mat, kv: &Mat, cfg: &ModelConfig) -> Mat {
    o_mha(
        query,
        kv,
        &book.mat(&format!("{stack}.mha.wq")),
        &book.mat(&format!("{stack}.mha.wk")),
        &book.mat(&format!("{stack}.mha.wv")),
        &book.mat(&format!("{stack}.mha.wo")),
        cfg.n_heads,
    )
}

/// Bottleneck latent of one stack in eval mode: conv then the VIB mean.
fn o_latent(book: &Book, stack: &str, x_raw: &Mat, cfg: &ModelConfig) -> Mat {
    let e = o_conv(
        x_raw,
        &book.ker(&format!("{stack}.conv.kernel")),
        &book.vec(&format!("{stack}.conv.bias")),
        cfg.t,
    );
    o_affine(
        &e,
        &book.mat(&format!("{stack}.vib.mu.weight")),
        &book.vec(&format!("{stack}.vib.mu.bias")),
    )
}

fn o_task(task: TaskKind, pred: &[f64], label: &Label) -> f64 {
    match (task, label) {
        (TaskKind::Regression, Label::Score(y)) => {
            let s: f64 = pred.iter().sum();
            (s - y) * (s - y)
        }
        (TaskKind::Classification { .. }, Label::Class(c)) => {
            let m = pred.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + pred.iter().map(|p| (p - m).exp()).sum::<f64>().ln();
            lse - pred[*c]
        }
        _ => panic!("label kind does not match the task"),
    }
}

fn cfg_with(d: usize, t: usize, feat: usize, task: TaskKind) -> ModelConfig {
    ModelConfig {
        d,
        t,
        n_heads: 2,
        feat_dims: [feat; 3],
        task,
        sigma_param: SigmaParam::Softplus,
        attn_owner: AttnOwner::KvOwner,
        dropout: 0.0,
        ablation: AblationConfig::default(),
    }
}

fn seeded(cfg: &ModelConfig, seed: u64) -> TmdcParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    TmdcParams::new(cfg, &mut rng).expect("valid config")
}

fn bundle(t: usize, feat: usize, phase: f64, avail: [bool; 3], label: Label) -> ModalityBundle {
    let feats = std::array::from_fn(|m| {
        if avail[m] {
            wave(t, feat, phase + m as f64)
        } else {
            Tensor::zeros(&[t, feat])
        }
    });
    ModalityBundle { feats, available: avail, label }
}

/// Raw lengths 4, 6, and 2 against t = 4 cover the identity, truncating,
/// and padding paths of the standardizing convolution in one sweep.
const RAW_LENS: [usize; 3] = [4, 6, 2];

#[test]
fn specific_stacks_match_the_straightline_oracle() {
    let cfg = cfg_with(8, 4, 6, TaskKind::Regression);
    let params = seeded(&cfg, 41);
    let book = Book::of(&params);
    let tape = Tape::new();
    let vars = params.bind(&tape);
    let mut ctx = FwdCtx::eval();

    for (mi, m) in Modality::ALL.into_iter().enumerate() {
        let x_raw = wave(RAW_LENS[mi], 6, 0.3 + mi as f64);
        let out = msd_forward(&cfg, &vars, m, &x_raw, &tape, &mut ctx).unwrap();
        let stack = format!("spe_{}", m.tag());
        let o = o_denoise(
            &book,
            &stack,
            &format!("{stack}.head_s"),
            &format!("{stack}.head_spe"),
            &grid(&x_raw),
            &cfg,
        );
        assert_matches("x", &out.x, &o.x);
        assert_matches("x_hat", &out.x_hat, &o.x_hat);
        assert_vec("y", &out.y, &o.y);
        assert_vec("y_hat", &out.y_hat, &o.y_hat);
        assert_scalar("kl", out.kl.item(), o.kl);
    }
}

#[test]
fn shared_stack_matches_the_straightline_oracle() {
    let cfg = cfg_with(8, 4, 6, TaskKind::Regression);
    let params = seeded(&cfg, 43);
    let book = Book::of(&params);
    let tape = Tape::new();
    let vars = params.bind(&tape);
    let mut ctx = FwdCtx::eval();

    // One stack of weights under "com", three pairs of prediction heads.
    for (mi, m) in Modality::ALL.into_iter().enumerate() {
        let x_raw = wave(RAW_LENS[mi], 6, 1.1 + mi as f64);
        let out = mcd_forward(&cfg, &vars, m, &x_raw, &tape, &mut ctx).unwrap();
        let o = o_denoise(
            &book,
            "com",
            &format!("com_{}.head_c", m.tag()),
            &format!("com_{}.head_com", m.tag()),
            &grid(&x_raw),
            &cfg,
        );
        assert_matches("x", &out.x, &o.x);
        assert_matches("x_hat", &out.x_hat, &o.x_hat);
        assert_vec("y", &out.y, &o.y);
        assert_vec("y_hat", &out.y_hat, &o.y_hat);
        assert_scalar("kl", out.kl.item(), o.kl);
    }
}

#[test]
fn bottleneck_with_live_noise_matches_the_oracle_under_both_sigma_forms() {
    for (si, sp) in [SigmaParam::Softplus, SigmaParam::ExpHalfLogvar].into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(7 + si as u64);
        let p = VibParams::new(4, &mut rng);
        let tape = Tape::new();
        let vars = p.bind(&tape);
        let e_t = wave(5, 4, 0.2);
        let eps_t = wave(5, 4, 1.7);
        let e = tape.constant(e_t.clone());
        let eps = tape.constant(eps_t.clone());
        let out = vib_forward(&vars, &e, &eps, sp).unwrap();

        let o = o_vib(
            &grid(&e_t),
            &grid(&eps_t),
            &grid(&p.mu.weight),
            p.mu.bias.data(),
            &grid(&p.sigma.weight),
            p.sigma.bias.data(),
            sp,
        );
        assert_matches("mu", &out.mu, &o.mu);
        assert_matches("sigma", &out.sigma, &o.sigma);
        assert_matches("sample", &out.sample, &o.sample);
        assert_scalar("kl", out.kl.item(), o.kl);
    }
}

#[test]
fn stage_one_loss_decomposes_into_independently_recomputed_terms() {
    for task in [TaskKind::Regression, TaskKind::Classification { classes: 3 }] {
        let cfg = cfg_with(8, 3, 8, task);
        let params = seeded(&cfg, 47);
        let book = Book::of(&params);
        let tape = Tape::new();
        let vars = params.bind(&tape);
        let mut ctx = FwdCtx::eval();

        let labels = match task {
            TaskKind::Regression => [Label::Score(0.7), Label::Score(-0.4)],
            TaskKind::Classification { .. } => [Label::Class(0), Label::Class(2)],
        };
        let bundles: Vec<ModalityBundle> = labels
            .into_iter()
            .enumerate()
            .map(|(i, l)| bundle(3, 8, 0.5 + 3.0 * i as f64, [true; 3], l))
            .collect();
        let batch: Vec<&ModalityBundle> = bundles.iter().collect();
        let beta = 0.37;
        let (total, bd) = imd_loss(&cfg, &vars, &tape, &batch, beta, &mut ctx).unwrap();

        // Each of the 18 terms is reassembled from scratch, per bundle and
        // per modality, then averaged over the batch.
        let mut l_s = [0.0; 3];
        let mut l_c = [0.0; 3];
        let mut l_spe = [0.0; 3];
        let mut l_com = [0.0; 3];
        let mut kl_s = [0.0; 3];
        let mut kl_c = [0.0; 3];
        for b in &bundles {
            for m in Modality::ALL {
                let i = m.index();
                let raw = grid(b.feat(m));
                let stack = format!("spe_{}", m.tag());
                let spe = o_denoise(
                    &book,
                    &stack,
                    &format!("{stack}.head_s"),
                    &format!("{stack}.head_spe"),
                    &raw,
                    &cfg,
                );
                l_s[i] += o_task(task, &spe.y, &b.label);
                l_spe[i] += o_task(task, &spe.y_hat, &b.label);
                kl_s[i] += spe.kl;
                let com = o_denoise(
                    &book,
                    "com",
                    &format!("com_{}.head_c", m.tag()),
                    &format!("com_{}.head_com", m.tag()),
                    &raw,
                    &cfg,
                );
                l_c[i] += o_task(task, &com.y, &b.label);
                l_com[i] += o_task(task, &com.y_hat, &b.label);
                kl_c[i] += com.kl;
            }
        }
        let n = bundles.len() as f64;
        for i in 0..3 {
            assert_scalar("L_s", bd.l_s[i], l_s[i] / n);
            assert_scalar("L_c", bd.l_c[i], l_c[i] / n);
            assert_scalar("L_spe", bd.l_spe[i], l_spe[i] / n);
            assert_scalar("L_com", bd.l_com[i], l_com[i] / n);
            assert_scalar("KL_s", bd.kl_s[i], kl_s[i] / n);
            assert_scalar("KL_c", bd.kl_c[i], kl_c[i] / n);
        }
        let o_task_sum: f64 = [l_s, l_c, l_spe, l_com].iter().flatten().sum::<f64>() / n;
        let o_kl_sum: f64 = [kl_s, kl_c].iter().flatten().sum::<f64>() / n;
        assert_scalar("total", total.item(), o_task_sum + beta * o_kl_sum);
        assert_scalar("breakdown total", bd.total(beta), total.item());
    }
}

/// Slot for an available modality: attention of its specific latent over its
/// common latent under its own parameters, then its stage-2 residual block.
fn o_self_slot(book: &Book, m: Modality, x_s: &Mat, x_c: &Mat, cfg: &ModelConfig) -> Mat {
    o_owned_slot(book, m, x_s, x_c, cfg)
}

/// Cross-modal complement `query = X_c(mq), key/value = X_s(mkv)`; the
/// owner of the attention and residual weights follows the config.
fn o_cross_slot(
    book: &Book,
    lat: &[(Mat, Mat); 3],
    mq: Modality,
    mkv: Modality,
    cfg: &ModelConfig,
) -> Mat {
    let owner = match cfg.attn_owner {
        AttnOwner::KvOwner => mkv,
        AttnOwner::QueryOwner => mq,
    };
    let q = &lat[mq.index()].1;
    let kv = &lat[mkv.index()].0;
    o_owned_slot(book, owner, q, kv, cfg)
}

fn o_owned_slot(book: &Book, owner: Modality, query: &Mat, kv: &Mat, cfg: &ModelConfig) -> Mat {
    // With MSD ablated away the shared attention weights stand in.
    let attn = if cfg.ablation.use_msd {
        format!("spe_{}", owner.tag())
    } else {
        "com".to_string()
    };
    let a = o_stack_mha(book, &attn, query, kv, cfg);
    o_residual(
        &a,
        &book.mat(&format!("all_{}.resfc.weight", owner.tag())),
        &book.vec(&format!("all_{}.resfc.bias", owner.tag())),
    )
}

/// Both bottleneck latents `(X_s, X_c)` per modality, with the survivor
/// standing in for a removed module's latent.
fn o_latents(book: &Book, b: &ModalityBundle, m: Modality, cfg: &ModelConfig) -> (Mat, Mat) {
    let raw = grid(b.feat(m));
    let spe = cfg
        .ablation
        .use_msd
        .then(|| o_latent(book, &format!("spe_{}", m.tag()), &raw, cfg));
    let com = cfg.ablation.use_mcd.then(|| o_latent(book, "com", &raw, cfg));
    match (spe, com) {
        (Some(s), Some(c)) => (s, c),
        (Some(s), None) => (s.clone(), s),
        (None, Some(c)) => (c.clone(), c),
        (None, None) => unreachable!(),
    }
}

/// Full stage-2 oracle for any availability pattern.
fn o_imc(book: &Book, b: &ModalityBundle, cfg: &ModelConfig) -> ([Mat; 3], Mat, Vec<f64>) {
    let zeros = vec![vec![0.0; cfg.d]; cfg.t];
    let lat: [(Mat, Mat); 3] = std::array::from_fn(|i| {
        if b.available[i] {
            o_latents(book, b, Modality::ALL[i], cfg)
        } else {
            (zeros.clone(), zeros.clone())
        }
    });
    let avail: Vec<Modality> = Modality::ALL.into_iter().filter(|&m| b.is_available(m)).collect();

    let mut slots: [Mat; 3] = std::array::from_fn(|_| zeros.clone());
    for &m in &avail {
        let (x_s, x_c) = &lat[m.index()];
        slots[m.index()] = o_self_slot(book, m, x_s, x_c, cfg);
    }
    if cfg.ablation.use_imc_complement {
        match avail[..] {
            [_, _, _] => {}
            [m1, m2] => {
                let missing = Modality::ALL.into_iter().find(|m| !b.is_available(*m)).unwrap();
                slots[missing.index()] = o_add(
                    &o_cross_slot(book, &lat, m1, m2, cfg),
                    &o_cross_slot(book, &lat, m2, m1, cfg),
                );
            }
            [m] => {
                let hat = o_cross_slot(book, &lat, m, m, cfg);
                for mm in Modality::ALL {
                    if !b.is_available(mm) {
                        slots[mm.index()] = hat.clone();
                    }
                }
            }
            _ => unreachable!(),
        }
    }

    let fused: Mat = (0..cfg.t)
        .map(|t| slots.iter().flat_map(|s| s[t].iter().copied()).collect())
        .collect();
    let y = o_head(
        &fused,
        &book.mat("fuse.head.weight"),
        &book.vec("fuse.head.bias"),
    );
    (slots, fused, y)
}

fn assert_imc_matches(cfg: &ModelConfig, params: &TmdcParams, b: &ModalityBundle) {
    let book = Book::of(params);
    let tape = Tape::new();
    let vars = params.bind(&tape);
    let mut ctx = FwdCtx::eval();
    let out = imc_forward(cfg, &vars, &tape, b, &mut ctx).unwrap();
    let (slots, fused, y) = o_imc(&book, b, cfg);
    for (i, slot) in slots.iter().enumerate() {
        assert_matches(&format!("slot {i}"), &out.slots[i], slot);
    }
    assert_matches("fused", &out.fused, &fused);
    assert_vec("y", &out.y, &y);
}

#[test]
fn complementation_assembles_the_missing_slot_from_both_swaps() {
    let b = bundle(3, 8, 2.3, [true, false, true], Label::Score(0.1));
    let cfg = cfg_with(8, 3, 8, TaskKind::Regression);
    let params = seeded(&cfg, 53);
    assert_imc_matches(&cfg, &params, &b);

    // The owner convention changes which weights refine the complement, so
    // the two conventions must both match their oracles and disagree with
    // each other.
    let mut flipped = cfg.clone();
    flipped.attn_owner = AttnOwner::QueryOwner;
    assert_imc_matches(&flipped, &params, &b);

    let book = Book::of(&params);
    let (kv_slots, _, _) = o_imc(&book, &b, &cfg);
    let (q_slots, _, _) = o_imc(&book, &b, &flipped);
    let diff: f64 = kv_slots[1]
        .iter()
        .flatten()
        .zip(q_slots[1].iter().flatten())
        .map(|(a, b)| (a - b).abs())
        .sum();
    assert!(diff > 1e-6, "owner convention had no effect on the complement");
}

#[test]
fn one_survivor_reuses_its_self_reconstruction_in_both_holes() {
    let cfg = cfg_with(8, 3, 8, TaskKind::Classification { classes: 4 });
    let params = seeded(&cfg, 59);
    let b = bundle(3, 8, 0.9, [true, false, false], Label::Class(1));
    assert_imc_matches(&cfg, &params, &b);
}

#[test]
fn full_availability_fuses_three_refined_slots() {
    let cfg = cfg_with(8, 3, 8, TaskKind::Regression);
    let params = seeded(&cfg, 61);
    let b = bundle(3, 8, 1.4, [true, true, true], Label::Score(-0.6));
    assert_imc_matches(&cfg, &params, &b);
}

#[test]
fn ablated_models_route_the_surviving_latent_everywhere() {
    let b = bundle(3, 8, 1.9, [false, true, true], Label::Score(0.3));

    let mut no_mcd = cfg_with(8, 3, 8, TaskKind::Regression);
    no_mcd.ablation.use_mcd = false;
    assert_imc_matches(&no_mcd, &seeded(&no_mcd, 67), &b);

    let mut no_msd = cfg_with(8, 3, 8, TaskKind::Regression);
    no_msd.ablation.use_msd = false;
    assert_imc_matches(&no_msd, &seeded(&no_msd, 71), &b);

    let mut bare = cfg_with(8, 3, 8, TaskKind::Regression);
    bare.ablation.use_mcd = false;
    bare.ablation.use_imc_complement = false;
    assert_imc_matches(&bare, &seeded(&bare, 73), &b);
}
