//! Scalar objectives: local correlation, Dice, soft Dice, and field smoothness.
//!
//! Every reduction runs in a fixed sequential order so values are
//! reproducible bit-for-bit.

use crate::error::{Error, Result};
use crate::fields::{box_sum, box_sum_adjoint, window_bounds, DisplacementField, Dims, LabelMap, ProbMask, ScalarField};
use crate::real::Real;

/// Smoothing constant for the soft Dice ratio.
pub const SOFT_DICE_EPS: f64 = 1e-5;

/// Local window width and denominator guard for [`nlcc`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NlccConfig {
    pub window_n: usize,
    pub epsilon: f64,
}

impl Default for NlccConfig {
    fn default() -> Self {
        Self {
            window_n: 8,
            epsilon: 1e-5,
        }
    }
}

impl NlccConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window_n < 2 {
            return Err(Error::param("nlcc.window_n", format!("must be >= 2, got {}", self.window_n)));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::param("nlcc.epsilon", format!("must be > 0, got {}", self.epsilon)));
        }
        Ok(())
    }

    pub fn with_window(self, window_n: usize) -> Self {
        Self { window_n, ..self }
    }
}

/// Result of [`nlcc`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NlccScore<T> {
    /// Mean squared local correlation over all windows, in `[0, 1]`.
    pub value: T,
    /// Windows whose variance product cleared the guard.
    pub active_windows: usize,
    pub total_windows: usize,
}

impl<T> NlccScore<T> {
    /// No window had usable variance (e.g. a constant image); `value` is 0.
    pub fn is_degenerate(&self) -> bool {
        self.active_windows == 0
    }
}

struct LocalStats<T> {
    count: Vec<T>,
    sx: Vec<T>,
    sy: Vec<T>,
    cross: Vec<T>,
    var_x: Vec<T>,
    var_y: Vec<T>,
}

fn local_stats<T: Real>(x: &[T], y: &[T], dims: Dims, n: usize) -> LocalStats<T> {
    let (lo, hi) = window_bounds(n);
    let count = box_sum(&vec![T::one(); dims.len()], dims, lo, hi);
    let sx = box_sum(x, dims, lo, hi);
    let sy = box_sum(y, dims, lo, hi);
    let xx: Vec<T> = x.iter().map(|&v| v * v).collect();
    let yy: Vec<T> = y.iter().map(|&v| v * v).collect();
    let xy: Vec<T> = x.iter().zip(y).map(|(&a, &b)| a * b).collect();
    let sxx = box_sum(&xx, dims, lo, hi);
    let syy = box_sum(&yy, dims, lo, hi);
    let sxy = box_sum(&xy, dims, lo, hi);
    let len = dims.len();
    let mut cross = Vec::with_capacity(len);
    let mut var_x = Vec::with_capacity(len);
    let mut var_y = Vec::with_capacity(len);
    for i in 0..len {
        let m = count[i];
        cross.push(sxy[i] - sx[i] * sy[i] / m);
        var_x.push(sxx[i] - sx[i] * sx[i] / m);
        var_y.push(syy[i] - sy[i] * sy[i] / m);
    }
    LocalStats {
        count,
        sx,
        sy,
        cross,
        var_x,
        var_y,
    }
}

/// Normalized local correlation: the squared correlation coefficient of every
/// voxel-centred `n^d` window (truncated at the border), averaged over windows.
pub fn nlcc<T: Real>(x: &ScalarField<T>, y: &ScalarField<T>, cfg: &NlccConfig) -> Result<NlccScore<T>> {
    x.dims().ensure_same(&y.dims())?;
    cfg.validate()?;
    Ok(nlcc_slices(x.data(), y.data(), x.dims(), cfg))
}

pub(crate) fn nlcc_slices<T: Real>(x: &[T], y: &[T], dims: Dims, cfg: &NlccConfig) -> NlccScore<T> {
    let st = local_stats(x, y, dims, cfg.window_n);
    let eps = T::lit(cfg.epsilon);
    let mut total = T::zero();
    let mut active = 0;
    for i in 0..dims.len() {
        let denom = st.var_x[i] * st.var_y[i];
        if denom >= eps {
            total = total + st.cross[i] * st.cross[i] / denom;
            active += 1;
        }
    }
    NlccScore {
        value: total / T::from_usize(dims.len()).unwrap(),
        active_windows: active,
        total_windows: dims.len(),
    }
}

/// [`nlcc`] together with its gradient with respect to every voxel of `x`.
pub fn nlcc_with_grad<T: Real>(
    x: &ScalarField<T>,
    y: &ScalarField<T>,
    cfg: &NlccConfig,
) -> Result<(NlccScore<T>, Vec<T>)> {
    x.dims().ensure_same(&y.dims())?;
    cfg.validate()?;
    Ok(nlcc_grad_slices(x.data(), y.data(), x.dims(), cfg))
}

pub(crate) fn nlcc_grad_slices<T: Real>(x: &[T], y: &[T], dims: Dims, cfg: &NlccConfig) -> (NlccScore<T>, Vec<T>) {
    let st = local_stats(x, y, dims, cfg.window_n);
    let eps = T::lit(cfg.epsilon);
    let len = dims.len();
    let two = T::lit(2.0);
    // d cc_p / d x_q = alpha_p * y_q - gamma_p * x_q + delta_p for q in window p
    let mut alpha = vec![T::zero(); len];
    let mut gamma = vec![T::zero(); len];
    let mut delta = vec![T::zero(); len];
    let mut total = T::zero();
    let mut active = 0;
    for i in 0..len {
        let denom = st.var_x[i] * st.var_y[i];
        if denom < eps {
            continue;
        }
        let c = st.cross[i];
        total = total + c * c / denom;
        active += 1;
        let a = two * c / denom;
        let g = a * c / st.var_x[i];
        let mx = st.sx[i] / st.count[i];
        let my = st.sy[i] / st.count[i];
        alpha[i] = a;
        gamma[i] = g;
        delta[i] = g * mx - a * my;
    }
    let (lo, hi) = window_bounds(cfg.window_n);
    let sa = box_sum_adjoint(&alpha, dims, lo, hi);
    let sg = box_sum_adjoint(&gamma, dims, lo, hi);
    let sd = box_sum_adjoint(&delta, dims, lo, hi);
    let inv_n = T::one() / T::from_usize(len).unwrap();
    let grad = (0..len).map(|q| (y[q] * sa[q] - x[q] * sg[q] + sd[q]) * inv_n).collect();
    (
        NlccScore {
            value: total * inv_n,
            active_windows: active,
            total_windows: len,
        },
        grad,
    )
}

/// Global normalized cross-correlation in `[-1, 1]`; 0 when either image is flat.
pub fn ncc<T: Real>(x: &ScalarField<T>, y: &ScalarField<T>) -> Result<T> {
    x.dims().ensure_same(&y.dims())?;
    let mx = x.mean();
    let my = y.mean();
    let (mut sxy, mut sxx, mut syy) = (T::zero(), T::zero(), T::zero());
    for (&a, &b) in x.data().iter().zip(y.data()) {
        let (da, db) = (a - mx, b - my);
        sxy = sxy + da * db;
        sxx = sxx + da * da;
        syy = syy + db * db;
    }
    let denom = (sxx * syy).sqrt();
    if denom <= T::zero() {
        return Ok(T::zero());
    }
    Ok(sxy / denom)
}

/// Per-class and mean Dice overlap.
#[derive(Debug, Clone, PartialEq)]
pub struct DiceReport {
    /// `(class, dice)` for every foreground class `1..K`.
    pub per_class: Vec<(usize, f64)>,
    /// Mean over foreground classes; background is excluded.
    pub mean: f64,
}

/// Hard Dice `2|A∩B| / (|A|+|B|)` per foreground class. A class absent from
/// both masks scores 1, absent from exactly one scores 0.
pub fn dice(a: &LabelMap, b: &LabelMap) -> Result<DiceReport> {
    a.dims().ensure_same(&b.dims())?;
    if a.num_classes() != b.num_classes() {
        return Err(Error::ClassMismatch {
            left: a.num_classes(),
            right: b.num_classes(),
        });
    }
    let k = a.num_classes();
    let mut inter = vec![0usize; k];
    let mut size_a = vec![0usize; k];
    let mut size_b = vec![0usize; k];
    for (&la, &lb) in a.labels().iter().zip(b.labels()) {
        size_a[la as usize] += 1;
        size_b[lb as usize] += 1;
        if la == lb {
            inter[la as usize] += 1;
        }
    }
    let per_class: Vec<(usize, f64)> = (1..k)
        .map(|c| {
            let denom = size_a[c] + size_b[c];
            let d = if denom == 0 {
                1.0
            } else {
                2.0 * inter[c] as f64 / denom as f64
            };
            (c, d)
        })
        .collect();
    let mean = per_class.iter().map(|(_, d)| d).sum::<f64>() / per_class.len() as f64;
    Ok(DiceReport { per_class, mean })
}

fn check_masks<T: Real>(pred: &ProbMask<T>, target: &ProbMask<T>) -> Result<()> {
    pred.dims().ensure_same(&target.dims())?;
    if pred.num_classes() != target.num_classes() {
        return Err(Error::ClassMismatch {
            left: pred.num_classes(),
            right: target.num_classes(),
        });
    }
    Ok(())
}

/// Soft Dice ratio `(2 sum p t + eps) / (sum p + sum t + eps)` for every class.
pub fn soft_dice_per_class<T: Real>(pred: &ProbMask<T>, target: &ProbMask<T>) -> Result<Vec<T>> {
    check_masks(pred, target)?;
    let k = pred.num_classes();
    let (inter, union) = overlap_sums(pred.probs(), target.probs(), k);
    let eps = T::lit(SOFT_DICE_EPS);
    Ok((0..k)
        .map(|c| (T::lit(2.0) * inter[c] + eps) / (union[c] + eps))
        .collect())
}

fn overlap_sums<T: Real>(p: &[T], t: &[T], k: usize) -> (Vec<T>, Vec<T>) {
    let mut inter = vec![T::zero(); k];
    let mut union = vec![T::zero(); k];
    for (pv, tv) in p.chunks_exact(k).zip(t.chunks_exact(k)) {
        for c in 0..k {
            inter[c] = inter[c] + pv[c] * tv[c];
            union[c] = union[c] + pv[c] + tv[c];
        }
    }
    (inter, union)
}

/// `1 - mean_{c >= 1} softdice_c(pred, target)`.
pub fn soft_dice_loss<T: Real>(pred: &ProbMask<T>, target: &ProbMask<T>) -> Result<T> {
    let per = soft_dice_per_class(pred, target)?;
    let fg = T::from_usize(per.len() - 1).unwrap();
    Ok(T::one() - per[1..].iter().copied().sum::<T>() / fg)
}

/// Soft Dice loss and its gradient with respect to `pred`, laid out like `pred.probs()`.
pub fn soft_dice_loss_with_grad<T: Real>(pred: &ProbMask<T>, target: &ProbMask<T>) -> Result<(T, Vec<T>)> {
    check_masks(pred, target)?;
    Ok(soft_dice_grad_slices(pred.probs(), target.probs(), pred.num_classes()))
}

pub(crate) fn soft_dice_grad_slices<T: Real>(p: &[T], t: &[T], k: usize) -> (T, Vec<T>) {
    let (inter, union) = overlap_sums(p, t, k);
    let eps = T::lit(SOFT_DICE_EPS);
    let two = T::lit(2.0);
    let fg = T::from_usize(k - 1).unwrap();
    let mut score = T::zero();
    // d loss / d p_c = -(2 t (U + eps) - (2 I + eps)) / ((U + eps)^2 * fg)
    let mut a = vec![T::zero(); k];
    let mut b = vec![T::zero(); k];
    for c in 1..k {
        let num = two * inter[c] + eps;
        let den = union[c] + eps;
        score = score + num / den;
        a[c] = -two / (den * fg);
        b[c] = num / (den * den * fg);
    }
    let grad = t
        .chunks_exact(k)
        .flat_map(|tv| (0..k).map(|c| a[c] * tv[c] + b[c]).collect::<Vec<_>>())
        .collect();
    (T::one() - score / fg, grad)
}

/// Mean over voxels of squared forward differences, summed over components
/// and axes. Differences that would step outside the grid count as zero.
pub fn smoothness<T: Real>(disp: &DisplacementField<T>) -> T {
    smoothness_impl(disp, false).0
}

/// [`smoothness`] and its gradient with respect to every displacement component.
pub fn smoothness_with_grad<T: Real>(disp: &DisplacementField<T>) -> (T, Vec<[T; 3]>) {
    smoothness_impl(disp, true)
}

fn smoothness_impl<T: Real>(disp: &DisplacementField<T>, with_grad: bool) -> (T, Vec<[T; 3]>) {
    let dims = disp.dims();
    let u = disp.vectors();
    let inv_n = T::one() / T::from_usize(dims.len()).unwrap();
    let two = T::lit(2.0);
    let mut total = T::zero();
    let mut grad = if with_grad {
        vec![[T::zero(); 3]; dims.len()]
    } else {
        Vec::new()
    };
    for i in 0..dims.len() {
        let p = dims.coords(i);
        for axis in 0..3 {
            if p[axis] + 1 >= dims.extent(axis) {
                continue;
            }
            let j = i + dims.stride(axis);
            for c in 0..3 {
                let diff = u[j][c] - u[i][c];
                total = total + diff * diff;
                if with_grad {
                    let g = two * diff * inv_n;
                    grad[j][c] = grad[j][c] + g;
                    grad[i][c] = grad[i][c] - g;
                }
            }
        }
    }
    (total * inv_n, grad)
}
