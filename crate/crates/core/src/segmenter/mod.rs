//! Compact convolutional voxel classifier:
//! `conv(1→H) → ReLU → conv(H→K) → softmax`, zero-padded "same" convolutions.

mod augment;
mod train;

pub use augment::{augment, random_displacement, AugmentConfig};
pub use train::{seg_train, TrainConfig, TrainOutcome};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::fields::{Dims, ProbMask, ScalarField};
use crate::metrics::soft_dice_grad_slices;
use crate::real::Real;

/// Parameters of the two-layer segmenter. Architecture is fixed at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct SegModel<T> {
    hidden: usize,
    classes: usize,
    kernel: [usize; 3],
    w1: Vec<T>,
    b1: Vec<T>,
    w2: Vec<T>,
    b2: Vec<T>,
}

/// Gradient buffers shaped like a [`SegModel`].
#[derive(Debug, Clone, PartialEq)]
pub struct SegGrads<T> {
    pub w1: Vec<T>,
    pub b1: Vec<T>,
    pub w2: Vec<T>,
    pub b2: Vec<T>,
}

impl<T: Real> SegGrads<T> {
    fn zeros_like(m: &SegModel<T>) -> Self {
        Self {
            w1: vec![T::zero(); m.w1.len()],
            b1: vec![T::zero(); m.b1.len()],
            w2: vec![T::zero(); m.w2.len()],
            b2: vec![T::zero(); m.b2.len()],
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in [
            (&mut self.w1, &other.w1),
            (&mut self.b1, &other.b1),
            (&mut self.w2, &other.w2),
            (&mut self.b2, &other.b2),
        ] {
            for (x, &y) in a.iter_mut().zip(b) {
                *x = *x + y;
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        for v in [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2] {
            v.iter_mut().for_each(|x| *x = *x * s);
        }
    }

    /// Flat view in parameter order `w1, b1, w2, b2`.
    pub fn flatten(&self) -> Vec<T> {
        [&self.w1, &self.b1, &self.w2, &self.b2]
            .into_iter()
            .flat_map(|v| v.iter().copied())
            .collect()
    }
}

/// Shrinks the He scale of the class layer so training starts from nearly
/// uniform predictions; at full scale some seeds lock one class out for good.
pub const OUTPUT_INIT_SCALE: f64 = 0.1;

impl<T: Real> SegModel<T> {
    /// All-zero model; its prediction is uniform `1/K`.
    pub fn zeros(hidden: usize, classes: usize, three_d: bool) -> Result<Self> {
        if hidden == 0 {
            return Err(Error::param("seg.hidden", "must be >= 1"));
        }
        if classes < 2 {
            return Err(Error::param("num_classes", "must be >= 2"));
        }
        let kernel = [3, 3, if three_d { 3 } else { 1 }];
        let kvol = kernel.iter().product::<usize>();
        Ok(Self {
            hidden,
            classes,
            kernel,
            w1: vec![T::zero(); hidden * kvol],
            b1: vec![T::zero(); hidden],
            w2: vec![T::zero(); classes * hidden * kvol],
            b2: vec![T::zero(); classes],
        })
    }

    /// He-scaled Gaussian kernels (the output layer shrunk by
    /// [`OUTPUT_INIT_SCALE`]), zero biases.
    pub fn init<R: Rng + ?Sized>(hidden: usize, classes: usize, three_d: bool, rng: &mut R) -> Result<Self> {
        let mut m = Self::zeros(hidden, classes, three_d)?;
        let kvol = m.kernel_volume();
        let n1 = Normal::new(0.0, (2.0 / kvol as f64).sqrt()).unwrap();
        let n2 = Normal::new(0.0, (2.0 / (hidden * kvol) as f64).sqrt()).unwrap();
        m.w1.iter_mut().for_each(|w| *w = T::lit(n1.sample(rng)));
        m.w2.iter_mut().for_each(|w| *w = T::lit(OUTPUT_INIT_SCALE * n2.sample(rng)));
        Ok(m)
    }

    /// Sets the output biases to log class frequencies, so the untrained
    /// model predicts the label prior instead of a uniform mask.
    pub fn set_prior_bias(&mut self, freqs: &[f64]) {
        assert_eq!(freqs.len(), self.classes);
        for (b, &f) in self.b2.iter_mut().zip(freqs) {
            *b = T::lit(f.max(1e-12).ln());
        }
    }

    /// Rebuilds a model from flat parameters in `w1, b1, w2, b2` order.
    pub fn from_params(hidden: usize, classes: usize, kernel: [usize; 3], params: &[T]) -> Result<Self> {
        if kernel[0] != 3 || kernel[1] != 3 || !(kernel[2] == 1 || kernel[2] == 3) {
            return Err(Error::param("kernel", format!("unsupported kernel {kernel:?}")));
        }
        let mut m = Self::zeros(hidden, classes, kernel[2] == 3)?;
        if params.len() != m.num_params() {
            return Err(Error::param(
                "params",
                format!("expected {} values, got {}", m.num_params(), params.len()),
            ));
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::param("params", "non-finite parameter"));
        }
        let mut it = params.iter().copied();
        for v in [&mut m.w1, &mut m.b1, &mut m.w2, &mut m.b2] {
            v.iter_mut().for_each(|x| *x = it.next().unwrap());
        }
        Ok(m)
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn kernel(&self) -> [usize; 3] {
        self.kernel
    }

    fn kernel_volume(&self) -> usize {
        self.kernel.iter().product()
    }

    pub fn num_params(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    /// Flat parameters in `w1, b1, w2, b2` order.
    pub fn params(&self) -> Vec<T> {
        [&self.w1, &self.b1, &self.w2, &self.b2]
            .into_iter()
            .flat_map(|v| v.iter().copied())
            .collect()
    }

    pub fn set_params(&mut self, params: &[T]) {
        assert_eq!(params.len(), self.num_params());
        let mut it = params.iter().copied();
        for v in [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2] {
            v.iter_mut().for_each(|x| *x = it.next().unwrap());
        }
    }

    /// `params -= lr * grads`.
    pub fn sgd_step(&mut self, grads: &SegGrads<T>, lr: T) {
        for (p, g) in [
            (&mut self.w1, &grads.w1),
            (&mut self.b1, &grads.b1),
            (&mut self.w2, &grads.w2),
            (&mut self.b2, &grads.b2),
        ] {
            for (x, &d) in p.iter_mut().zip(g) {
                *x = *x - lr * d;
            }
        }
    }

    fn offsets(&self) -> Vec<[isize; 3]> {
        let r: [isize; 3] = self.kernel.map(|k| (k / 2) as isize);
        let mut out = Vec::with_capacity(self.kernel_volume());
        for dz in -r[2]..=r[2] {
            for dy in -r[1]..=r[1] {
                for dx in -r[0]..=r[0] {
                    out.push([dx, dy, dz]);
                }
            }
        }
        out
    }

    fn forward_internal(&self, img: &ScalarField<T>) -> Activations<T> {
        let dims = img.dims();
        let offs = self.offsets();
        let pre = conv_forward(img.data(), 1, &self.w1, &self.b1, self.hidden, dims, &offs);
        let hidden: Vec<T> = pre.iter().map(|&v| v.max(T::zero())).collect();
        let logits = conv_forward(&hidden, self.hidden, &self.w2, &self.b2, self.classes, dims, &offs);
        let n = dims.len();
        let k = self.classes;
        let mut probs = vec![T::zero(); n * k];
        for v in 0..n {
            let mut mx = T::neg_infinity();
            for c in 0..k {
                mx = mx.max(logits[c * n + v]);
            }
            let mut total = T::zero();
            for c in 0..k {
                let e = (logits[c * n + v] - mx).exp();
                probs[v * k + c] = e;
                total = total + e;
            }
            for c in 0..k {
                probs[v * k + c] = probs[v * k + c] / total;
            }
        }
        Activations {
            dims,
            pre,
            hidden,
            probs,
        }
    }

    /// Soft-Dice loss of the prediction on `img` against `target` and the parameter gradients.
    pub fn loss_and_grad(&self, img: &ScalarField<T>, target: &ProbMask<T>) -> Result<(T, SegGrads<T>)> {
        img.dims().ensure_same(&target.dims())?;
        if target.num_classes() != self.classes {
            return Err(Error::ClassMismatch {
                left: self.classes,
                right: target.num_classes(),
            });
        }
        let act = self.forward_internal(img);
        let dims = act.dims;
        let n = dims.len();
        let k = self.classes;
        let (loss, g_probs) = soft_dice_grad_slices(&act.probs, target.probs(), k);
        // softmax backward into channel-major logit gradients
        let mut g_logits = vec![T::zero(); n * k];
        for v in 0..n {
            let p = &act.probs[v * k..(v + 1) * k];
            let g = &g_probs[v * k..(v + 1) * k];
            let dot = (0..k).fold(T::zero(), |acc, c| acc + p[c] * g[c]);
            for c in 0..k {
                g_logits[c * n + v] = p[c] * (g[c] - dot);
            }
        }
        let offs = self.offsets();
        let mut grads = SegGrads::zeros_like(self);
        let g_hidden = conv_backward(
            &act.hidden,
            self.hidden,
            &self.w2,
            &g_logits,
            self.classes,
            dims,
            &offs,
            &mut grads.w2,
            &mut grads.b2,
            true,
        );
        let g_pre: Vec<T> = g_hidden
            .into_iter()
            .zip(&act.pre)
            .map(|(g, &p)| if p > T::zero() { g } else { T::zero() })
            .collect();
        conv_backward(
            img.data(),
            1,
            &self.w1,
            &g_pre,
            self.hidden,
            dims,
            &offs,
            &mut grads.w1,
            &mut grads.b1,
            false,
        );
        Ok((loss, grads))
    }

    /// Soft-Dice loss without gradients.
    pub fn loss(&self, img: &ScalarField<T>, target: &ProbMask<T>) -> Result<T> {
        img.dims().ensure_same(&target.dims())?;
        let act = self.forward_internal(img);
        Ok(soft_dice_grad_slices(&act.probs, target.probs(), self.classes).0)
    }
}

struct Activations<T> {
    dims: Dims,
    /// Channel-major pre-activation of the hidden layer.
    pre: Vec<T>,
    hidden: Vec<T>,
    /// Voxel-major class probabilities.
    probs: Vec<T>,
}

/// Output voxel range `[lo, hi)` along one axis for which `p + off` stays inside.
#[inline]
fn valid_range(n: usize, off: isize) -> (usize, usize) {
    let lo = (-off).max(0) as usize;
    let hi = (n as isize - off.max(0)).max(0) as usize;
    (lo.min(n), hi.max(lo.min(n)))
}

fn conv_forward<T: Real>(
    input: &[T],
    cin: usize,
    weights: &[T],
    bias: &[T],
    cout: usize,
    dims: Dims,
    offs: &[[isize; 3]],
) -> Vec<T> {
    let n = dims.len();
    let kvol = offs.len();
    let mut out = vec![T::zero(); cout * n];
    for o in 0..cout {
        let dst = &mut out[o * n..(o + 1) * n];
        dst.iter_mut().for_each(|v| *v = bias[o]);
        for i in 0..cin {
            let src = &input[i * n..(i + 1) * n];
            for (t, off) in offs.iter().enumerate() {
                let w = weights[(o * cin + i) * kvol + t];
                let (x0, x1) = valid_range(dims.w, off[0]);
                let (y0, y1) = valid_range(dims.h, off[1]);
                let (z0, z1) = valid_range(dims.d, off[2]);
                let shift = off[0] + off[1] * dims.w as isize + off[2] * (dims.w * dims.h) as isize;
                for z in z0..z1 {
                    for y in y0..y1 {
                        let row = dims.index(x0, y, z);
                        let s = (row as isize + shift) as usize;
                        let len = x1 - x0;
                        for (d, &v) in dst[row..row + len].iter_mut().zip(&src[s..s + len]) {
                            *d = *d + w * v;
                        }
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv_backward<T: Real>(
    input: &[T],
    cin: usize,
    weights: &[T],
    g_out: &[T],
    cout: usize,
    dims: Dims,
    offs: &[[isize; 3]],
    g_w: &mut [T],
    g_b: &mut [T],
    need_input_grad: bool,
) -> Vec<T> {
    let n = dims.len();
    let kvol = offs.len();
    let mut g_in = if need_input_grad {
        vec![T::zero(); cin * n]
    } else {
        Vec::new()
    };
    for o in 0..cout {
        let go = &g_out[o * n..(o + 1) * n];
        g_b[o] = g_b[o] + go.iter().copied().sum::<T>();
        for i in 0..cin {
            let src = &input[i * n..(i + 1) * n];
            for (t, off) in offs.iter().enumerate() {
                let widx = (o * cin + i) * kvol + t;
                let w = weights[widx];
                let (x0, x1) = valid_range(dims.w, off[0]);
                let (y0, y1) = valid_range(dims.h, off[1]);
                let (z0, z1) = valid_range(dims.d, off[2]);
                let shift = off[0] + off[1] * dims.w as isize + off[2] * (dims.w * dims.h) as isize;
                let mut acc = T::zero();
                for z in z0..z1 {
                    for y in y0..y1 {
                        let row = dims.index(x0, y, z);
                        let s = (row as isize + shift) as usize;
                        let len = x1 - x0;
                        let g = &go[row..row + len];
                        for (&a, &b) in g.iter().zip(&src[s..s + len]) {
                            acc = acc + a * b;
                        }
                        if need_input_grad {
                            let gi = &mut g_in[i * n + s..i * n + s + len];
                            for (d, &a) in gi.iter_mut().zip(g) {
                                *d = *d + w * a;
                            }
                        }
                    }
                }
                g_w[widx] = g_w[widx] + acc;
            }
        }
    }
    g_in
}

/// Class probabilities for every voxel of `img`.
pub fn seg_forward<T: Real>(model: &SegModel<T>, img: &ScalarField<T>) -> ProbMask<T> {
    let act = model.forward_internal(img);
    ProbMask::from_raw(act.dims, model.classes, act.probs)
}
