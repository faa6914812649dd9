//! Frame-to-utterance pooling: TAP, SP, SAP, ASP and MHAP.
//!
//! Attention pooling computes `alpha_t = softmax_t(v' tanh(W h_t + b))`
//! over frames and aggregates `sum_t alpha_t h_t` (SAP), optionally with
//! the attention-weighted standard deviation appended (ASP). MHAP splits
//! the channels into H contiguous groups and runs SAP per group on the
//! matching diagonal block of (W, b, v).

use nalgebra::{DMatrix, DVector};

use super::{KernelError, STD_EPS};

/// T x d matrix of frame-level activations (rows are frames).
#[derive(Debug, Clone, PartialEq)]
pub struct FrameMatrix(DMatrix<f64>);

impl FrameMatrix {
    pub fn new(m: DMatrix<f64>) -> Result<Self, KernelError> {
        if m.nrows() == 0 || m.ncols() == 0 || m.iter().any(|v| !v.is_finite()) {
            return Err(KernelError::InvalidFrameMatrix);
        }
        Ok(Self(m))
    }

    pub fn frames(&self) -> usize {
        self.0.nrows()
    }

    pub fn dim(&self) -> usize {
        self.0.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }
}

/// Attention parameters: d x d projection, d bias, d context, head count.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolingParams {
    pub w: DMatrix<f64>,
    pub b: DVector<f64>,
    pub v: DVector<f64>,
    pub heads: usize,
}

impl PoolingParams {
    pub fn new(
        w: DMatrix<f64>,
        b: DVector<f64>,
        v: DVector<f64>,
        heads: usize,
    ) -> Result<Self, KernelError> {
        let d = w.nrows();
        let ok = d >= 1
            && w.ncols() == d
            && b.len() == d
            && v.len() == d
            && heads >= 1
            && w.iter().chain(b.iter()).chain(v.iter()).all(|x| x.is_finite());
        if !ok {
            return Err(KernelError::InvalidPoolingParams);
        }
        Ok(Self { w, b, v, heads })
    }

    pub fn dim(&self) -> usize {
        self.w.nrows()
    }
}

/// Gradients of a scalar functional w.r.t. frames and attention params.
#[derive(Debug, Clone)]
pub struct AttentionGrads {
    pub frames: DMatrix<f64>,
    pub w: DMatrix<f64>,
    pub b: DVector<f64>,
    pub v: DVector<f64>,
}

impl AttentionGrads {
    fn zeros(t: usize, d: usize) -> Self {
        Self {
            frames: DMatrix::zeros(t, d),
            w: DMatrix::zeros(d, d),
            b: DVector::zeros(d),
            v: DVector::zeros(d),
        }
    }
}

/// Column-wise mean over frames.
pub fn pool_tap(f: &FrameMatrix) -> DVector<f64> {
    let t = f.frames() as f64;
    f.matrix().row_sum().transpose() / t
}

pub fn pool_tap_vjp(f: &FrameMatrix, upstream: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let out = pool_tap(f);
    let t = f.frames() as f64;
    let mut grad = DMatrix::zeros(f.frames(), f.dim());
    for r in 0..f.frames() {
        for c in 0..f.dim() {
            grad[(r, c)] = upstream[c] / t;
        }
    }
    (out, grad)
}

/// Mean concatenated with population std per column.
pub fn pool_sp(f: &FrameMatrix) -> DVector<f64> {
    let (mean, std) = sp_stats(f);
    let d = f.dim();
    let mut out = DVector::zeros(2 * d);
    out.rows_mut(0, d).copy_from(&mean);
    out.rows_mut(d, d).copy_from(&std);
    out
}

fn sp_stats(f: &FrameMatrix) -> (DVector<f64>, DVector<f64>) {
    let t = f.frames() as f64;
    let m = f.matrix();
    let d = f.dim();
    let mut mean: DVector<f64> = DVector::zeros(d);
    let mut m2: DVector<f64> = DVector::zeros(d);
    for r in 0..f.frames() {
        for c in 0..d {
            mean[c] += m[(r, c)];
            m2[c] += m[(r, c)] * m[(r, c)];
        }
    }
    mean /= t;
    m2 /= t;
    let mut std = DVector::zeros(d);
    for c in 0..d {
        std[c] = (m2[c] - mean[c] * mean[c] + STD_EPS).sqrt();
    }
    (mean, std)
}

pub fn pool_sp_vjp(f: &FrameMatrix, upstream: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let d = f.dim();
    let t = f.frames() as f64;
    let (mean, std) = sp_stats(f);
    let m = f.matrix();
    let mut grad = DMatrix::zeros(f.frames(), d);
    for r in 0..f.frames() {
        for c in 0..d {
            let du_mean = upstream[c] / t;
            let du_std = upstream[d + c] * (m[(r, c)] - mean[c]) / (t * std[c]);
            grad[(r, c)] = du_mean + du_std;
        }
    }
    let mut out = DVector::zeros(2 * d);
    out.rows_mut(0, d).copy_from(&mean);
    out.rows_mut(d, d).copy_from(&std);
    (out, grad)
}

struct AttentionCache {
    alpha: DVector<f64>,
    tanh_z: DMatrix<f64>, // T x d
}

fn attention_weights(f: &FrameMatrix, p: &PoolingParams) -> AttentionCache {
    let t = f.frames();
    let m = f.matrix();
    let mut tanh_z = DMatrix::zeros(t, p.dim());
    let mut energy = DVector::zeros(t);
    for r in 0..t {
        let h = m.row(r).transpose();
        let z = &p.w * &h + &p.b;
        let tz = z.map(f64::tanh);
        energy[r] = p.v.dot(&tz);
        tanh_z.row_mut(r).copy_from(&tz.transpose());
    }
    let max_e = energy.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut alpha = energy.map(|e| (e - max_e).exp());
    let sum: f64 = alpha.iter().sum();
    alpha /= sum;
    AttentionCache { alpha, tanh_z }
}

/// Self-attention pooling: attention-weighted mean of frames.
pub fn pool_sap(f: &FrameMatrix, p: &PoolingParams) -> Result<DVector<f64>, KernelError> {
    check_dims(f, p)?;
    let cache = attention_weights(f, p);
    Ok(weighted_mean(f, &cache.alpha))
}

fn check_dims(f: &FrameMatrix, p: &PoolingParams) -> Result<(), KernelError> {
    if p.dim() != f.dim() {
        return Err(KernelError::InvalidPoolingParams);
    }
    Ok(())
}

fn weighted_mean(f: &FrameMatrix, alpha: &DVector<f64>) -> DVector<f64> {
    let m = f.matrix();
    let d = f.dim();
    let mut out = DVector::zeros(d);
    for r in 0..f.frames() {
        for c in 0..d {
            out[c] += alpha[r] * m[(r, c)];
        }
    }
    out
}

/// Backpropagates `d alpha` through the softmax-tanh attention, accumulating
/// into param grads; returns the per-frame contribution via the energies.
fn attention_backward(
    f: &FrameMatrix,
    p: &PoolingParams,
    cache: &AttentionCache,
    d_alpha: &DVector<f64>,
    grads: &mut AttentionGrads,
) {
    let t = f.frames();
    let m = f.matrix();
    let inner: f64 = (0..t).map(|r| cache.alpha[r] * d_alpha[r]).sum();
    for r in 0..t {
        // softmax jacobian
        let d_energy = cache.alpha[r] * (d_alpha[r] - inner);
        let tz = cache.tanh_z.row(r).transpose();
        // d energy / d z = v .* (1 - tanh^2 z)
        let dz = DVector::from_fn(p.dim(), |c, _| {
            d_energy * p.v[c] * (1.0 - tz[c] * tz[c])
        });
        grads.v += d_energy * &tz;
        grads.b += &dz;
        let h = m.row(r).transpose();
        grads.w += &dz * h.transpose();
        let dh = p.w.transpose() * &dz;
        for c in 0..f.dim() {
            grads.frames[(r, c)] += dh[c];
        }
    }
}

pub fn pool_sap_vjp(
    f: &FrameMatrix,
    p: &PoolingParams,
    upstream: &DVector<f64>,
) -> Result<(DVector<f64>, AttentionGrads), KernelError> {
    check_dims(f, p)?;
    let cache = attention_weights(f, p);
    let out = weighted_mean(f, &cache.alpha);
    let mut grads = AttentionGrads::zeros(f.frames(), f.dim());
    let m = f.matrix();
    // direct path: out = sum_t alpha_t h_t
    let mut d_alpha = DVector::zeros(f.frames());
    for r in 0..f.frames() {
        let mut s = 0.0;
        for c in 0..f.dim() {
            grads.frames[(r, c)] += cache.alpha[r] * upstream[c];
            s += upstream[c] * m[(r, c)];
        }
        d_alpha[r] = s;
    }
    attention_backward(f, p, &cache, &d_alpha, &mut grads);
    Ok((out, grads))
}

/// Attentive statistics pooling: attention-weighted mean and std concatenated.
pub fn pool_asp(f: &FrameMatrix, p: &PoolingParams) -> Result<DVector<f64>, KernelError> {
    check_dims(f, p)?;
    let cache = attention_weights(f, p);
    let (mu, sigma) = asp_stats(f, &cache.alpha);
    let d = f.dim();
    let mut out = DVector::zeros(2 * d);
    out.rows_mut(0, d).copy_from(&mu);
    out.rows_mut(d, d).copy_from(&sigma);
    Ok(out)
}

fn asp_stats(f: &FrameMatrix, alpha: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
    let m = f.matrix();
    let d = f.dim();
    let mut mu: DVector<f64> = DVector::zeros(d);
    let mut m2: DVector<f64> = DVector::zeros(d);
    for r in 0..f.frames() {
        for c in 0..d {
            mu[c] += alpha[r] * m[(r, c)];
            m2[c] += alpha[r] * m[(r, c)] * m[(r, c)];
        }
    }
    let mut sigma = DVector::zeros(d);
    for c in 0..d {
        sigma[c] = (m2[c] - mu[c] * mu[c] + STD_EPS).sqrt();
    }
    (mu, sigma)
}

pub fn pool_asp_vjp(
    f: &FrameMatrix,
    p: &PoolingParams,
    upstream: &DVector<f64>,
) -> Result<(DVector<f64>, AttentionGrads), KernelError> {
    check_dims(f, p)?;
    let d = f.dim();
    let cache = attention_weights(f, p);
    let (mu, sigma) = asp_stats(f, &cache.alpha);
    let m = f.matrix();

    // d out / d mu and d out / d m2 with sigma = sqrt(m2 - mu^2 + eps)
    let mut d_mu = DVector::zeros(d);
    let mut d_m2 = DVector::zeros(d);
    for c in 0..d {
        d_m2[c] = upstream[d + c] / (2.0 * sigma[c]);
        d_mu[c] = upstream[c] - upstream[d + c] * mu[c] / sigma[c];
    }

    let mut grads = AttentionGrads::zeros(f.frames(), d);
    let mut d_alpha = DVector::zeros(f.frames());
    for r in 0..f.frames() {
        let mut s = 0.0;
        for c in 0..d {
            let h = m[(r, c)];
            grads.frames[(r, c)] += cache.alpha[r] * (d_mu[c] + 2.0 * d_m2[c] * h);
            s += d_mu[c] * h + d_m2[c] * h * h;
        }
        d_alpha[r] = s;
    }
    attention_backward(f, p, &cache, &d_alpha, &mut grads);

    let mut out = DVector::zeros(2 * d);
    out.rows_mut(0, d).copy_from(&mu);
    out.rows_mut(d, d).copy_from(&sigma);
    Ok((out, grads))
}

fn head_slices(
    f: &FrameMatrix,
    p: &PoolingParams,
) -> Result<Vec<(FrameMatrix, PoolingParams)>, KernelError> {
    let d = f.dim();
    let h = p.heads;
    if d % h != 0 {
        return Err(KernelError::HeadMismatch { dim: d, heads: h });
    }
    check_dims(f, p)?;
    let dh = d / h;
    let mut parts = Vec::with_capacity(h);
    for g in 0..h {
        let cols = f.matrix().columns(g * dh, dh).into_owned();
        let sub = FrameMatrix::new(cols)?;
        let w = p.w.view((g * dh, g * dh), (dh, dh)).into_owned();
        let b = p.b.rows(g * dh, dh).into_owned();
        let v = p.v.rows(g * dh, dh).into_owned();
        parts.push((sub, PoolingParams { w, b, v, heads: 1 }));
    }
    Ok(parts)
}

/// Multi-head attention pooling: SAP per contiguous channel group.
pub fn pool_mhap(f: &FrameMatrix, p: &PoolingParams) -> Result<DVector<f64>, KernelError> {
    let parts = head_slices(f, p)?;
    let dh = f.dim() / p.heads;
    let mut out = DVector::zeros(f.dim());
    for (g, (sub, sp)) in parts.iter().enumerate() {
        let pooled = pool_sap(sub, sp)?;
        out.rows_mut(g * dh, dh).copy_from(&pooled);
    }
    Ok(out)
}

pub fn pool_mhap_vjp(
    f: &FrameMatrix,
    p: &PoolingParams,
    upstream: &DVector<f64>,
) -> Result<(DVector<f64>, AttentionGrads), KernelError> {
    let parts = head_slices(f, p)?;
    let dh = f.dim() / p.heads;
    let mut out = DVector::zeros(f.dim());
    let mut grads = AttentionGrads::zeros(f.frames(), f.dim());
    for (g, (sub, sp)) in parts.iter().enumerate() {
        let up = upstream.rows(g * dh, dh).into_owned();
        let (pooled, sub_grads) = pool_sap_vjp(sub, sp, &up)?;
        out.rows_mut(g * dh, dh).copy_from(&pooled);
        for r in 0..f.frames() {
            for c in 0..dh {
                grads.frames[(r, g * dh + c)] += sub_grads.frames[(r, c)];
            }
        }
        for i in 0..dh {
            for j in 0..dh {
                grads.w[(g * dh + i, g * dh + j)] += sub_grads.w[(i, j)];
            }
            grads.b[g * dh + i] += sub_grads.b[i];
            grads.v[g * dh + i] += sub_grads.v[i];
        }
    }
    Ok((out, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_frames(rng: &mut ChaCha8Rng, t: usize, d: usize) -> FrameMatrix {
        FrameMatrix::new(DMatrix::from_fn(t, d, |_, _| rng.gen_range(-1.0..1.0))).unwrap()
    }

    fn rand_params(rng: &mut ChaCha8Rng, d: usize, heads: usize) -> PoolingParams {
        PoolingParams::new(
            DMatrix::from_fn(d, d, |_, _| rng.gen_range(-1.0..1.0)),
            DVector::from_fn(d, |_, _| rng.gen_range(-0.5..0.5)),
            DVector::from_fn(d, |_, _| rng.gen_range(-1.0..1.0)),
            heads,
        )
        .unwrap()
    }

    #[test]
    fn tap_single_frame_identity() {
        let f = FrameMatrix::new(DMatrix::from_row_slice(1, 3, &[1.0, 2.0, 3.0])).unwrap();
        assert_eq!(pool_tap(&f), DVector::from_vec(vec![1.0, 2.0, 3.0]));
    }

    #[test]
    fn tap_identical_rows() {
        let f = FrameMatrix::new(DMatrix::from_row_slice(
            4,
            2,
            &[0.5, -1.0, 0.5, -1.0, 0.5, -1.0, 0.5, -1.0],
        ))
        .unwrap();
        let out = pool_tap(&f);
        assert!((out[0] - 0.5).abs() < 1e-15 && (out[1] + 1.0).abs() < 1e-15);
    }

    #[test]
    fn tap_matches_brute_force_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let f = rand_frames(&mut rng, 5, 3);
        let out = pool_tap(&f);
        for c in 0..3 {
            let mut s = 0.0;
            for r in 0..5 {
                s += f.matrix()[(r, c)];
            }
            assert!((out[c] - s / 5.0).abs() < 1e-15);
        }
    }

    #[test]
    fn sp_constant_rows_zero_std() {
        let f = FrameMatrix::new(DMatrix::from_row_slice(3, 2, &[2.0, 3.0, 2.0, 3.0, 2.0, 3.0]))
            .unwrap();
        let out = pool_sp(&f);
        assert!((out[0] - 2.0).abs() < 1e-12);
        assert!(out[2] <= STD_EPS.sqrt() + 1e-15);
        assert!(out[3] <= STD_EPS.sqrt() + 1e-15);
    }

    #[test]
    fn sp_single_frame() {
        let f = FrameMatrix::new(DMatrix::from_row_slice(1, 2, &[1.0, -2.0])).unwrap();
        let out = pool_sp(&f);
        assert_eq!(out[0], 1.0);
        assert_eq!(out[1], -2.0);
        assert!(out[2] <= STD_EPS.sqrt() + 1e-15);
    }

    #[test]
    fn sp_matches_direct_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let f = rand_frames(&mut rng, 7, 4);
        let out = pool_sp(&f);
        for c in 0..4 {
            let col: Vec<f64> = (0..7).map(|r| f.matrix()[(r, c)]).collect();
            let mean = col.iter().sum::<f64>() / 7.0;
            let var = col.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / 7.0;
            assert!((out[c] - mean).abs() < 1e-12);
            assert!((out[4 + c] - (var + STD_EPS).sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn sap_zero_context_reduces_to_tap() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let f = rand_frames(&mut rng, 6, 4);
        let mut p = rand_params(&mut rng, 4, 1);
        p.v = DVector::zeros(4);
        let sap = pool_sap(&f, &p).unwrap();
        let tap = pool_tap(&f);
        assert!((sap - tap).amax() < 1e-12);
    }

    #[test]
    fn sap_single_frame_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let f = rand_frames(&mut rng, 1, 3);
        let p = rand_params(&mut rng, 3, 1);
        let out = pool_sap(&f, &p).unwrap();
        let row = f.matrix().row(0).transpose();
        assert!((out - row).amax() < 1e-15);
    }

    #[test]
    fn asp_zero_context_reduces_to_sp() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let f = rand_frames(&mut rng, 5, 3);
        let mut p = rand_params(&mut rng, 3, 1);
        p.v = DVector::zeros(3);
        let asp = pool_asp(&f, &p).unwrap();
        let sp = pool_sp(&f);
        assert!((asp - sp).amax() < 1e-12);
    }

    #[test]
    fn asp_constant_rows_zero_std() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let f = FrameMatrix::new(DMatrix::from_row_slice(
            4,
            2,
            &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0, 1.0, 2.0],
        ))
        .unwrap();
        let p = rand_params(&mut rng, 2, 1);
        let out = pool_asp(&f, &p).unwrap();
        assert!((out[0] - 1.0).abs() < 1e-12);
        assert!(out[2] <= STD_EPS.sqrt() + 1e-15);
    }

    #[test]
    fn mhap_one_head_equals_sap() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let f = rand_frames(&mut rng, 5, 4);
        let p = rand_params(&mut rng, 4, 1);
        let a = pool_mhap(&f, &p).unwrap();
        let b = pool_sap(&f, &p).unwrap();
        assert!((a - b).amax() < 1e-15);
    }

    #[test]
    fn mhap_full_heads_zero_context_equals_tap() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let f = rand_frames(&mut rng, 5, 4);
        let mut p = rand_params(&mut rng, 4, 4);
        p.v = DVector::zeros(4);
        let a = pool_mhap(&f, &p).unwrap();
        let b = pool_tap(&f);
        assert!((a - b).amax() < 1e-12);
    }

    #[test]
    fn mhap_head_mismatch_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let f = rand_frames(&mut rng, 5, 4);
        let p = rand_params(&mut rng, 4, 3);
        assert!(matches!(
            pool_mhap(&f, &p),
            Err(KernelError::HeadMismatch { dim: 4, heads: 3 })
        ));
    }

    #[test]
    fn attention_weights_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        for _ in 0..10 {
            let f = rand_frames(&mut rng, 8, 3);
            let p = rand_params(&mut rng, 3, 1);
            let cache = attention_weights(&f, &p);
            let s: f64 = cache.alpha.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn frame_permutation_leaves_pooling_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let f = rand_frames(&mut rng, 6, 3);
        let p = rand_params(&mut rng, 3, 1);
        let perm = [3usize, 0, 5, 1, 4, 2];
        let mut pm = DMatrix::zeros(6, 3);
        for (dst, &src) in perm.iter().enumerate() {
            pm.row_mut(dst).copy_from(&f.matrix().row(src));
        }
        let fp = FrameMatrix::new(pm).unwrap();
        assert!((pool_tap(&f) - pool_tap(&fp)).amax() < 1e-12);
        assert!((pool_sp(&f) - pool_sp(&fp)).amax() < 1e-12);
        assert!((pool_sap(&f, &p).unwrap() - pool_sap(&fp, &p).unwrap()).amax() < 1e-12);
        assert!((pool_asp(&f, &p).unwrap() - pool_asp(&fp, &p).unwrap()).amax() < 1e-12);
    }
}
