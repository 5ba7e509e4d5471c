//! Barlow Twins objective with mix-up regularization over a toy
//! deterministic encoder.
//!
//! The encoder is an affine map of a per-view feature vector (the mean over
//! the view's sampled timesteps of each modality's channel vector,
//! concatenated: 10 optical + 2 radar = 12 inputs). Keeping the encoder
//! linear makes the mix-up identities exact at alpha 0 and 1 and keeps
//! gradient checks tractable. No projector network sits between encoder and
//! loss; the loss is computed on the encoder output directly.
//!
//! Conventions: batch normalization is per column with the population
//! standard deviation (denominator B) and `eps` added to the std before
//! division; every correlation product is scaled by `1/B`, applied
//! uniformly to the Barlow Twins matrix and to the mix-up matrices.

use ndarray::{Array1, Array2, Axis};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::dpixel::{self, DPixel, View};
use crate::error::{Error, Result};
use crate::tensorio::{PatchBundle, PATCH, S1_BANDS, S2_BANDS};

/// Loss weights and the normalization floor.
#[derive(Debug, Clone, Copy)]
pub struct SslConfig {
    pub lambda_bt: f64,
    pub lambda_mix: f64,
    pub eps: f64,
}

impl Default for SslConfig {
    fn default() -> Self {
        SslConfig {
            lambda_bt: 5e-3,
            lambda_mix: 1.0,
            eps: 1e-9,
        }
    }
}

impl SslConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_bt < 0.0 || self.lambda_mix < 0.0 {
            return Err(Error::Domain("loss weights must be >= 0".into()));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Domain("eps must be > 0".into()));
        }
        Ok(())
    }
}

/// Affine encoder: `Z = Y W + b` with `W: [Din x Dz]`.
#[derive(Debug, Clone)]
pub struct ToyEncoder {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl ToyEncoder {
    pub fn new_random(seed: u64, din: usize, dz: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = (1.0 / din as f64).sqrt();
        ToyEncoder {
            weight: Array2::from_shape_fn((din, dz), |_| rng.random_range(-scale..scale)),
            bias: Array1::from_shape_fn(dz, |_| rng.random_range(-0.1..0.1)),
        }
    }

    pub fn din(&self) -> usize {
        self.weight.nrows()
    }

    pub fn dz(&self) -> usize {
        self.weight.ncols()
    }

    /// Encode a batch of view features `[B x Din] -> [B x Dz]`.
    pub fn encode(&self, y: &Array2<f64>) -> Result<Array2<f64>> {
        if y.ncols() != self.din() {
            return Err(Error::Dimension(format!(
                "encoder expects {} inputs, got {}",
                self.din(),
                y.ncols()
            )));
        }
        Ok(y.dot(&self.weight) + &self.bias)
    }

    /// Parameters flattened as weight (row-major) then bias; used by the
    /// numeric-gradient harness.
    pub fn params(&self) -> Vec<f64> {
        self.weight.iter().chain(self.bias.iter()).copied().collect()
    }

    pub fn set_params(&mut self, params: &[f64]) {
        let nw = self.weight.len();
        assert_eq!(params.len(), nw + self.bias.len(), "parameter count mismatch");
        for (dst, &src) in self.weight.iter_mut().zip(&params[..nw]) {
            *dst = src;
        }
        for (dst, &src) in self.bias.iter_mut().zip(&params[nw..]) {
            *dst = src;
        }
    }
}

fn check_batch(z: &Array2<f64>) -> Result<()> {
    if z.nrows() < 2 {
        return Err(Error::Validation(
            "embedding batch needs B >= 2 for batch normalization".into(),
        ));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation(
            "embedding batch contains non-finite values".into(),
        ));
    }
    Ok(())
}

/// Per-column standardization: mean 0, population std 1 (denominator B),
/// with `eps` added to the std before dividing. Constant columns map to 0.
pub fn batch_normalize(z: &Array2<f64>, eps: f64) -> Result<Array2<f64>> {
    check_batch(z)?;
    Ok(bn_forward(z, eps).0)
}

fn bn_forward(x: &Array2<f64>, eps: f64) -> (Array2<f64>, Vec<f64>) {
    let b = x.nrows() as f64;
    let mut z = x.clone();
    let mut stds = Vec::with_capacity(x.ncols());
    for mut col in z.columns_mut() {
        let mu = col.sum() / b;
        let var = col.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / b;
        let s = var.sqrt();
        stds.push(s);
        let t = s + eps;
        col.mapv_inplace(|v| (v - mu) / t);
    }
    (z, stds)
}

/// Backward pass of `bn_forward`: `dz` is the upstream gradient, `z` the
/// normalized output, `stds` the pre-eps population stds.
fn bn_backward(z: &Array2<f64>, stds: &[f64], dz: &Array2<f64>, eps: f64) -> Array2<f64> {
    let b = z.nrows() as f64;
    let mut dx = Array2::zeros(z.raw_dim());
    for j in 0..z.ncols() {
        let s = stds[j];
        let t = s + eps;
        let g = dz.column(j);
        let zc = z.column(j);
        let g_mean = g.sum() / b;
        let gz_mean = g.iter().zip(zc.iter()).map(|(a, c)| a * c).sum::<f64>() / b;
        for i in 0..z.nrows() {
            let mut v = (g[i] - g_mean) / t;
            if s > 0.0 {
                v -= zc[i] * gz_mean / s;
            }
            dx[[i, j]] = v;
        }
    }
    dx
}

/// Cross-correlation matrix `C_ij = (1/B) sum_b Za[b,i] Zb[b,j]` of two
/// batch-normalized embedding batches.
pub fn cross_correlation(za: &Array2<f64>, zb: &Array2<f64>) -> Result<Array2<f64>> {
    if za.dim() != zb.dim() {
        return Err(Error::Dimension(format!(
            "cross-correlation shape mismatch: {:?} vs {:?}",
            za.dim(),
            zb.dim()
        )));
    }
    check_batch(za)?;
    let b = za.nrows() as f64;
    Ok(za.t().dot(zb) / b)
}

/// `sum_i (1 - C_ii)^2 + lambda_bt * sum_{i != j} C_ij^2`.
pub fn barlow_loss(c: &Array2<f64>, lambda_bt: f64) -> Result<f64> {
    if c.nrows() != c.ncols() {
        return Err(Error::Dimension(format!(
            "correlation matrix must be square, got {:?}",
            c.dim()
        )));
    }
    let (invariance, redundancy) = barlow_terms(c);
    Ok(invariance + lambda_bt * redundancy)
}

/// Invariance and redundancy parts of the Barlow Twins loss.
pub fn barlow_terms(c: &Array2<f64>) -> (f64, f64) {
    let mut invariance = 0.0;
    let mut redundancy = 0.0;
    for i in 0..c.nrows() {
        for j in 0..c.ncols() {
            if i == j {
                let d = 1.0 - c[[i, j]];
                invariance += d * d;
            } else {
                redundancy += c[[i, j]] * c[[i, j]];
            }
        }
    }
    (invariance, redundancy)
}

fn frob_sq(m: &Array2<f64>) -> f64 {
    m.iter().map(|v| v * v).sum()
}

/// Mix-up consistency loss between normalized embeddings of the mixed view
/// and its two sources:
///
/// `1/2 (||C_MA - T_MA||_F^2 + ||C_MS - T_MS||_F^2)` with
/// `C_MA = (1/B) Zm' Za`, `T_MA = alpha (1/B) Za' Za + (1-alpha) (1/B) Zs' Za`
/// and the `MS` pair analogous.
pub fn mixup_loss(za: &Array2<f64>, zs: &Array2<f64>, zm: &Array2<f64>, alpha: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Domain(format!("alpha must be in [0, 1], got {alpha}")));
    }
    if za.dim() != zs.dim() || za.dim() != zm.dim() {
        return Err(Error::Dimension("mix-up embedding shape mismatch".into()));
    }
    check_batch(za)?;
    let b = za.nrows() as f64;
    let c_ma = zm.t().dot(za) / b;
    let c_ms = zm.t().dot(zs) / b;
    let t_ma =
        za.t().dot(za).mapv(|v| v * alpha / b) + zs.t().dot(za).mapv(|v| v * (1.0 - alpha) / b);
    let t_ms =
        za.t().dot(zs).mapv(|v| v * alpha / b) + zs.t().dot(zs).mapv(|v| v * (1.0 - alpha) / b);
    Ok(0.5 * (frob_sq(&(c_ma - t_ma)) + frob_sq(&(c_ms - t_ms))))
}

/// Per-view feature vector: channel means over the sampled timesteps of each
/// modality, concatenated (optical first).
pub fn view_features(dp_s2: &DPixel, dp_s1: &DPixel, view: &View) -> Array1<f64> {
    let c2 = dp_s2.series.ncols();
    let c1 = dp_s1.series.ncols();
    let mut out = Array1::zeros(c2 + c1);
    for &t in &view.s2_idx {
        for c in 0..c2 {
            out[c] += dp_s2.series[[t, c]];
        }
    }
    for &t in &view.s1_idx {
        for c in 0..c1 {
            out[c2 + c] += dp_s1.series[[t, c]];
        }
    }
    let k2 = view.s2_idx.len().max(1) as f64;
    let k1 = view.s1_idx.len().max(1) as f64;
    for c in 0..c2 {
        out[c] /= k2;
    }
    for c in 0..c1 {
        out[c2 + c] /= k1;
    }
    out
}

/// Width of the view feature vector (10 optical + 2 radar channel means).
pub const VIEW_FEATURE_DIM: usize = S2_BANDS + S1_BANDS;

/// A batch of paired view features, one row per d-pixel.
#[derive(Debug, Clone)]
pub struct ViewBatch {
    pub ya: Array2<f64>,
    pub yb: Array2<f64>,
}

impl ViewBatch {
    pub fn len(&self) -> usize {
        self.ya.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Build a view batch from bundles: every d-pixel of every 3x3 patch becomes
/// one batch row. Each bundle draws from its own rng stream seeded by
/// (global seed, sample id), so the batch is reproducible independently of
/// bundle iteration order.
pub fn build_view_batch(
    bundles: &[PatchBundle],
    k2: usize,
    k1: usize,
    global_seed: u64,
) -> Result<ViewBatch> {
    let rows = bundles.len() * PATCH * PATCH;
    let mut ya = Array2::zeros((rows, VIEW_FEATURE_DIM));
    let mut yb = Array2::zeros((rows, VIEW_FEATURE_DIM));
    let mut row = 0;
    for bundle in bundles {
        let mut rng = dpixel::sample_rng(global_seed, &bundle.sample_id);
        let s2 = dpixel::s2_stack(bundle);
        let s1 = dpixel::s1_stack(bundle);
        for i in 0..PATCH {
            for j in 0..PATCH {
                let dp2 = dpixel::extract_dpixel(&s2, i, j)?;
                let dp1 = dpixel::extract_dpixel(&s1, i, j)?;
                let pair = dpixel::make_view_pair(&dp2, &dp1, k2, k1, &mut rng)?;
                ya.row_mut(row)
                    .assign(&view_features(&dp2, &dp1, &pair.view_a));
                yb.row_mut(row)
                    .assign(&view_features(&dp2, &dp1, &pair.view_b));
                row += 1;
            }
        }
    }
    Ok(ViewBatch { ya, yb })
}

/// Component values reported alongside the total loss.
#[derive(Debug, Clone, Copy)]
pub struct LossDiagnostics {
    pub total: f64,
    pub l_bt: f64,
    pub l_mix: f64,
    pub invariance: f64,
    pub redundancy: f64,
    pub alpha: f64,
}

/// Total loss with the batch shuffle and mixing coefficient drawn from
/// `rng`: the permutation is drawn first, then `alpha ~ U(0, 1)`. Both are
/// drawn before any per-sample work so results cannot depend on worker
/// count.
pub fn total_loss(
    batch: &ViewBatch,
    encoder: &ToyEncoder,
    cfg: &SslConfig,
    rng: &mut impl Rng,
) -> Result<LossDiagnostics> {
    let mut perm: Vec<usize> = (0..batch.len()).collect();
    perm.shuffle(rng);
    let alpha: f64 = rng.random();
    total_loss_fixed(batch, encoder, cfg, &perm, alpha)
}

fn permute_rows(m: &Array2<f64>, perm: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros(m.raw_dim());
    for (dst, &src) in perm.iter().enumerate() {
        out.row_mut(dst).assign(&m.row(src));
    }
    out
}

/// Deterministic core of [`total_loss`]: the shuffle permutation and alpha
/// are explicit arguments. One permutation serves both modalities (their
/// features live in the same row).
pub fn total_loss_fixed(
    batch: &ViewBatch,
    encoder: &ToyEncoder,
    cfg: &SslConfig,
    perm: &[usize],
    alpha: f64,
) -> Result<LossDiagnostics> {
    cfg.validate()?;
    let streams = forward_streams(batch, encoder, cfg, perm, alpha)?;
    Ok(streams.diagnostics)
}

struct Streams {
    diagnostics: LossDiagnostics,
    // retained for the backward pass
    za: Array2<f64>,
    zb: Array2<f64>,
    zs: Array2<f64>,
    zm: Array2<f64>,
    stds_a: Vec<f64>,
    stds_b: Vec<f64>,
    stds_s: Vec<f64>,
    stds_m: Vec<f64>,
    ys: Array2<f64>,
    ym: Array2<f64>,
}

fn forward_streams(
    batch: &ViewBatch,
    encoder: &ToyEncoder,
    cfg: &SslConfig,
    perm: &[usize],
    alpha: f64,
) -> Result<Streams> {
    if batch.len() < 2 {
        return Err(Error::Validation("ssl batch needs at least 2 samples".into()));
    }
    if perm.len() != batch.len() {
        return Err(Error::Dimension("shuffle permutation length mismatch".into()));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Domain(format!("alpha must be in [0, 1], got {alpha}")));
    }
    let ys = permute_rows(&batch.yb, perm);
    let ym = batch.ya.mapv(|v| v * alpha) + ys.mapv(|v| v * (1.0 - alpha));

    let (za, stds_a) = bn_forward(&encoder.encode(&batch.ya)?, cfg.eps);
    let (zb, stds_b) = bn_forward(&encoder.encode(&batch.yb)?, cfg.eps);
    let (zs, stds_s) = bn_forward(&encoder.encode(&ys)?, cfg.eps);
    let (zm, stds_m) = bn_forward(&encoder.encode(&ym)?, cfg.eps);

    let c = cross_correlation(&za, &zb)?;
    let (invariance, redundancy) = barlow_terms(&c);
    let l_bt = invariance + cfg.lambda_bt * redundancy;
    let l_mix = mixup_loss(&za, &zs, &zm, alpha)?;
    let total = l_bt + cfg.lambda_mix * l_mix;
    Ok(Streams {
        diagnostics: LossDiagnostics {
            total,
            l_bt,
            l_mix,
            invariance,
            redundancy,
            alpha,
        },
        za,
        zb,
        zs,
        zm,
        stds_a,
        stds_b,
        stds_s,
        stds_m,
        ys,
        ym,
    })
}

/// Loss value plus analytic gradient with respect to the encoder parameters.
pub struct LossGradient {
    pub diagnostics: LossDiagnostics,
    pub d_weight: Array2<f64>,
    pub d_bias: Array1<f64>,
}

/// Analytic gradient of [`total_loss_fixed`] by reverse-mode accumulation
/// through the four affine+batchnorm streams (A, B, shuffled S, mixed M).
pub fn total_loss_with_grad(
    batch: &ViewBatch,
    encoder: &ToyEncoder,
    cfg: &SslConfig,
    perm: &[usize],
    alpha: f64,
) -> Result<LossGradient> {
    cfg.validate()?;
    let st = forward_streams(batch, encoder, cfg, perm, alpha)?;
    let b = batch.len() as f64;
    let dz = encoder.dz();

    // dL/dC for the Barlow Twins matrix.
    let c = st.za.t().dot(&st.zb) / b;
    let mut g_c = Array2::zeros((dz, dz));
    for i in 0..dz {
        for j in 0..dz {
            g_c[[i, j]] = if i == j {
                2.0 * (c[[i, j]] - 1.0)
            } else {
                2.0 * cfg.lambda_bt * c[[i, j]]
            };
        }
    }
    let mut d_za = st.zb.dot(&g_c.t()) / b;
    let d_zb = st.za.dot(&g_c) / b;

    // Mix-up residuals, pre-scaled by the loss weight.
    let lam = cfg.lambda_mix;
    let c_ma = st.zm.t().dot(&st.za) / b;
    let c_ms = st.zm.t().dot(&st.zs) / b;
    let t_ma = st.za.t().dot(&st.za).mapv(|v| v * alpha / b)
        + st.zs.t().dot(&st.za).mapv(|v| v * (1.0 - alpha) / b);
    let t_ms = st.za.t().dot(&st.zs).mapv(|v| v * alpha / b)
        + st.zs.t().dot(&st.zs).mapv(|v| v * (1.0 - alpha) / b);
    let r_ma = (c_ma - t_ma).mapv(|v| v * lam);
    let r_ms = (c_ms - t_ms).mapv(|v| v * lam);

    let mut d_zm = Array2::<f64>::zeros(st.zm.raw_dim());
    let mut d_zs = Array2::<f64>::zeros(st.zs.raw_dim());
    // C_MA = (1/B) Zm' Za contributes to the M and A streams.
    d_zm += &(st.za.dot(&r_ma.t()) / b);
    d_za += &(st.zm.dot(&r_ma) / b);
    // C_MS = (1/B) Zm' Zs contributes to the M and S streams.
    d_zm += &(st.zs.dot(&r_ms.t()) / b);
    d_zs += &(st.zm.dot(&r_ms) / b);
    // T_MA = alpha (1/B) Za'Za + (1-alpha) (1/B) Zs'Za, coefficient -1.
    let g1 = r_ma.mapv(|v| -alpha * v);
    d_za += &(st.za.dot(&(&g1 + &g1.t())) / b);
    let g2 = r_ma.mapv(|v| -(1.0 - alpha) * v);
    d_zs += &(st.za.dot(&g2.t()) / b);
    d_za += &(st.zs.dot(&g2) / b);
    // T_MS = alpha (1/B) Za'Zs + (1-alpha) (1/B) Zs'Zs, coefficient -1.
    let g3 = r_ms.mapv(|v| -alpha * v);
    d_za += &(st.zs.dot(&g3.t()) / b);
    d_zs += &(st.za.dot(&g3) / b);
    let g4 = r_ms.mapv(|v| -(1.0 - alpha) * v);
    d_zs += &(st.zs.dot(&(&g4 + &g4.t())) / b);

    // Through batch normalization, then the affine map.
    let d_xa = bn_backward(&st.za, &st.stds_a, &d_za, cfg.eps);
    let d_xb = bn_backward(&st.zb, &st.stds_b, &d_zb, cfg.eps);
    let d_xs = bn_backward(&st.zs, &st.stds_s, &d_zs, cfg.eps);
    let d_xm = bn_backward(&st.zm, &st.stds_m, &d_zm, cfg.eps);

    let mut d_weight = batch.ya.t().dot(&d_xa);
    d_weight += &batch.yb.t().dot(&d_xb);
    d_weight += &st.ys.t().dot(&d_xs);
    d_weight += &st.ym.t().dot(&d_xm);
    let d_bias = d_xa.sum_axis(Axis(0))
        + d_xb.sum_axis(Axis(0))
        + d_xs.sum_axis(Axis(0))
        + d_xm.sum_axis(Axis(0));

    Ok(LossGradient {
        diagnostics: st.diagnostics,
        d_weight,
        d_bias,
    })
}

/// Central-difference gradient `(f(p + h e_i) - f(p - h e_i)) / 2h`.
pub fn numeric_gradient(f: impl Fn(&[f64]) -> f64, params: &[f64], h: f64) -> Vec<f64> {
    assert!(h > 0.0, "step size must be positive");
    let mut grad = Vec::with_capacity(params.len());
    let mut p = params.to_vec();
    for i in 0..params.len() {
        let orig = p[i];
        p[i] = orig + h;
        let hi = f(&p);
        p[i] = orig - h;
        let lo = f(&p);
        p[i] = orig;
        grad.push((hi - lo) / (2.0 * h));
    }
    grad
}

/// One row of the demo training log.
#[derive(Debug, Clone, Copy)]
pub struct DemoStep {
    pub step: usize,
    pub l_bt: f64,
    pub l_mix: f64,
    pub total: f64,
}

/// Gradient-descent demo on numeric gradients: evaluates the total loss on a
/// fixed batch (fresh shuffle and alpha each step) and walks the encoder
/// parameters downhill. Desk-scale only (small Dz, small batch).
pub fn train_demo(
    batch: &ViewBatch,
    encoder: &mut ToyEncoder,
    cfg: &SslConfig,
    steps: usize,
    learning_rate: f64,
    seed: u64,
) -> Result<Vec<DemoStep>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut log = Vec::with_capacity(steps);
    for step in 0..steps {
        let mut perm: Vec<usize> = (0..batch.len()).collect();
        perm.shuffle(&mut rng);
        let alpha: f64 = rng.random();
        let diag = total_loss_fixed(batch, encoder, cfg, &perm, alpha)?;
        let params = encoder.params();
        let grad = {
            let probe = encoder.clone();
            numeric_gradient(
                |p: &[f64]| {
                    let mut e = probe.clone();
                    e.set_params(p);
                    total_loss_fixed(batch, &e, cfg, &perm, alpha)
                        .map(|d| d.total)
                        .unwrap_or(f64::INFINITY)
                },
                &params,
                1e-5,
            )
        };
        let updated: Vec<f64> = params
            .iter()
            .zip(&grad)
            .map(|(p, g)| p - learning_rate * g)
            .collect();
        encoder.set_params(&updated);
        log.push(DemoStep {
            step,
            l_bt: diag.l_bt,
            l_mix: diag.l_mix,
            total: diag.total,
        });
    }
    Ok(log)
}
