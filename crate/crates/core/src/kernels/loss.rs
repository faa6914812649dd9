//! Classification objectives: softmax cross-entropy, additive angular
//! margin softmax, its sub-center variant, and circle loss.
//!
//! The margin losses take per-class cosines (trunk-agnostic); circle loss
//! takes within/between-class similarity lists. All return the loss and
//! the gradient w.r.t. their primary input.

use nalgebra::{DMatrix, DVector};

use super::KernelError;

/// Cosines are clamped this far inside [-1, 1] before arccos; keeps the
/// angular derivative finite at the poles.
const COS_CLAMP: f64 = 1e-7;

/// Scale / margin hyperparameters shared by the margin losses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParams {
    pub scale: f64,
    pub margin: f64,
    pub subcenters: usize,
    pub circle_margin: f64,
    pub circle_gamma: f64,
}

impl LossParams {
    pub fn new(
        scale: f64,
        margin: f64,
        subcenters: usize,
        circle_margin: f64,
        circle_gamma: f64,
    ) -> Result<Self, KernelError> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(KernelError::InvalidLossParams("scale must be > 0"));
        }
        if !(margin >= 0.0 && margin < std::f64::consts::FRAC_PI_2) {
            return Err(KernelError::InvalidLossParams("margin must be in [0, pi/2)"));
        }
        if subcenters == 0 {
            return Err(KernelError::NoSubcenters);
        }
        if !(circle_margin > 0.0 && circle_margin < 1.0) {
            return Err(KernelError::InvalidLossParams("circle margin must be in (0,1)"));
        }
        if !(circle_gamma > 0.0 && circle_gamma.is_finite()) {
            return Err(KernelError::InvalidLossParams("circle gamma must be > 0"));
        }
        Ok(Self {
            scale,
            margin,
            subcenters,
            circle_margin,
            circle_gamma,
        })
    }
}

impl Default for LossParams {
    /// Base-training constants: s=30, m=0.2, K=3, circle m=0.25, gamma=64.
    fn default() -> Self {
        Self {
            scale: 30.0,
            margin: 0.2,
            subcenters: 3,
            circle_margin: 0.25,
            circle_gamma: 64.0,
        }
    }
}

impl LossParams {
    /// Large-margin fine-tune constants: s=35, m=0.25.
    pub fn fine_tune() -> Self {
        Self {
            scale: 35.0,
            margin: 0.25,
            ..Self::default()
        }
    }
}

/// Stabilized `-log softmax(logits)[y]` and its gradient w.r.t. logits.
pub fn loss_softmax_ce(logits: &DVector<f64>, y: usize) -> Result<(f64, DVector<f64>), KernelError> {
    let c = logits.len();
    if c < 2 {
        return Err(KernelError::TooFewClasses(c));
    }
    if y >= c {
        return Err(KernelError::ClassIndexOutOfRange { index: y, classes: c });
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: DVector<f64> = logits.map(|l| (l - max).exp());
    let sum: f64 = exps.iter().sum();
    let loss = sum.ln() - (logits[y] - max);
    let mut grad = exps / sum;
    grad[y] -= 1.0;
    Ok((loss, grad))
}

/// Additive angular margin softmax on per-class cosines.
///
/// The target logit is `s * cos(arccos(c_y) + m)`; the rest are `s * c_j`.
pub fn loss_aam(
    cosines: &DVector<f64>,
    y: usize,
    scale: f64,
    margin: f64,
) -> Result<(f64, DVector<f64>), KernelError> {
    let c = cosines.len();
    if c < 2 {
        return Err(KernelError::TooFewClasses(c));
    }
    if y >= c {
        return Err(KernelError::ClassIndexOutOfRange { index: y, classes: c });
    }
    let clamp = |x: f64| x.clamp(-1.0 + COS_CLAMP, 1.0 - COS_CLAMP);
    let cy = clamp(cosines[y]);
    let theta = cy.acos();
    let mut logits = cosines.map(|x| scale * x);
    logits[y] = scale * (theta + margin).cos();
    let (loss, ce_grad) = loss_softmax_ce(&logits, y)?;
    // chain rule through the logits back to the cosines
    let mut grad = ce_grad.map(|g| g * scale);
    // d cos(theta+m)/d c_y = sin(theta+m)/sin(theta)
    let dy = (theta + margin).sin() / theta.sin();
    grad[y] = ce_grad[y] * scale * dy;
    Ok((loss, grad))
}

/// Sub-center AAM: per-class cosine is the max over K sub-center cosines.
///
/// `x` and the sub-center rows are length-normalized internally. The
/// gradient flows through the argmax sub-center only; ties break toward
/// the lowest sub-center index.
pub fn loss_sc_aam(
    x: &DVector<f64>,
    subcenters: &[DMatrix<f64>], // per class: K x d
    y: usize,
    scale: f64,
    margin: f64,
) -> Result<(f64, DVector<f64>), KernelError> {
    let c = subcenters.len();
    if c < 2 {
        return Err(KernelError::TooFewClasses(c));
    }
    if y >= c {
        return Err(KernelError::ClassIndexOutOfRange { index: y, classes: c });
    }
    if subcenters.iter().any(|m| m.nrows() == 0) {
        return Err(KernelError::NoSubcenters);
    }
    let d = x.len();
    let norm = x.norm();
    if norm == 0.0 || !norm.is_finite() {
        return Err(KernelError::InvalidLossParams("x must have non-zero finite norm"));
    }
    let xn = x / norm;

    let mut cosines = DVector::zeros(c);
    let mut best_dirs: Vec<DVector<f64>> = Vec::with_capacity(c);
    for (class, centers) in subcenters.iter().enumerate() {
        if centers.ncols() != d {
            return Err(KernelError::InvalidLossParams("sub-center dimension mismatch"));
        }
        let mut best = f64::NEG_INFINITY;
        let mut best_dir = DVector::zeros(d);
        for k in 0..centers.nrows() {
            let row = centers.row(k).transpose();
            let rn = row.norm();
            if rn == 0.0 || !rn.is_finite() {
                return Err(KernelError::InvalidLossParams(
                    "sub-center must have non-zero finite norm",
                ));
            }
            let dir = row / rn;
            let cos = xn.dot(&dir);
            if cos > best {
                best = cos;
                best_dir = dir;
            }
        }
        cosines[class] = best;
        best_dirs.push(best_dir);
    }

    let (loss, grad_cos) = loss_aam(&cosines, y, scale, margin)?;
    // d cos / d x through the argmax direction and the normalization of x
    let mut grad_xn = DVector::zeros(d);
    for class in 0..c {
        grad_xn += grad_cos[class] * &best_dirs[class];
    }
    let grad_x = (&grad_xn - &xn * xn.dot(&grad_xn)) / norm;
    Ok((loss, grad_x))
}

/// Gradients of circle loss w.r.t. its two similarity lists.
#[derive(Debug, Clone)]
pub struct CircleGrads {
    pub within: Vec<f64>,
    pub between: Vec<f64>,
}

/// Circle loss over within-class (`s_p`) and between-class (`s_n`)
/// similarities with self-paced weights, log-sum-exp stabilized.
pub fn loss_circle(
    s_p: &[f64],
    s_n: &[f64],
    circle_margin: f64,
    gamma: f64,
) -> Result<(f64, CircleGrads), KernelError> {
    if s_p.is_empty() || s_n.is_empty() {
        return Err(KernelError::EmptySimilaritySet);
    }
    let m = circle_margin;
    let delta_p = 1.0 - m;
    let delta_n = m;

    // exponents: A_j = gamma * alpha_n * (s_n - delta_n), B_i = -gamma * alpha_p * (s_p - delta_p)
    let a: Vec<f64> = s_n
        .iter()
        .map(|&s| gamma * (s + m).max(0.0) * (s - delta_n))
        .collect();
    let b: Vec<f64> = s_p
        .iter()
        .map(|&s| -gamma * (1.0 + m - s).max(0.0) * (s - delta_p))
        .collect();
    let lse_a = log_sum_exp(&a);
    let lse_b = log_sum_exp(&b);
    let total = lse_a + lse_b;
    // softplus(total)
    let loss = if total > 0.0 {
        total + (-total).exp().ln_1p()
    } else {
        total.exp().ln_1p()
    };

    let sig = sigmoid(total);
    let grads_a = softmax_from_logits(&a);
    let grads_b = softmax_from_logits(&b);
    let between = s_n
        .iter()
        .zip(&grads_a)
        .map(|(&s, &w)| {
            let active = if s + m > 0.0 { 1.0 } else { 0.0 };
            let d_exponent = gamma * (active * (s - delta_n) + (s + m).max(0.0));
            sig * w * d_exponent
        })
        .collect();
    let within = s_p
        .iter()
        .zip(&grads_b)
        .map(|(&s, &w)| {
            let alpha = (1.0 + m - s).max(0.0);
            let active = if 1.0 + m - s > 0.0 { 1.0 } else { 0.0 };
            let d_exponent = -gamma * (-active * (s - delta_p) + alpha);
            sig * w * d_exponent
        })
        .collect();
    Ok((loss, CircleGrads { within, between }))
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

fn softmax_from_logits(xs: &[f64]) -> Vec<f64> {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}
