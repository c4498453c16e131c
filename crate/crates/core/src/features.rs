//! Fixed multi-scale filter bank used for feature-aware content consistency.
//!
//! For each scale `sigma` the bank emits the Gaussian-smoothed image, its
//! gradient magnitude, and its Laplacian. Every channel is z-scored over a
//! local window, which removes intensity offsets and positive gains, so the
//! stack describes content rather than style. The whole chain is
//! differentiable; [`FeatureTape::backward`] returns the exact gradient.

use crate::error::{Error, Result};
use crate::fields::{
    box_sum, box_sum_adjoint, gaussian_kernel, gaussian_smooth, gaussian_smooth_adjoint, window_bounds, Dims,
    ScalarField,
};
use crate::metrics::{nlcc_grad_slices, nlcc_slices, NlccConfig};
use crate::real::Real;

const GRAD_MAG_EPS: f64 = 1e-12;

/// Channels of equal dims, one per filter response.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStack<T> {
    dims: Dims,
    channels: Vec<Vec<T>>,
}

impl<T: Real> FeatureStack<T> {
    pub fn new(dims: Dims, channels: Vec<Vec<T>>) -> Result<Self> {
        dims.validate()?;
        if channels.is_empty() {
            return Err(Error::Empty("feature channels"));
        }
        for ch in &channels {
            if ch.len() != dims.len() {
                return Err(Error::LengthMismatch {
                    dims,
                    expected: dims.len(),
                    actual: ch.len(),
                });
            }
            if let Some(index) = ch.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite { index });
            }
        }
        Ok(Self { dims, channels })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn channel(&self, c: usize) -> &[T] {
        &self.channels[c]
    }

    pub fn channel_field(&self, c: usize) -> ScalarField<T> {
        ScalarField::from_raw(self.dims, self.channels[c].clone())
    }

    pub fn channels(&self) -> &[Vec<T>] {
        &self.channels
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureConfig {
    pub sigmas: Vec<f64>,
    /// Width of the local z-score window.
    pub zscore_window: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            sigmas: vec![1.0, 2.0, 4.0],
            zscore_window: 8,
        }
    }
}

/// Feature extraction with the default bank (9 channels).
pub fn extract_features<T: Real>(img: &ScalarField<T>) -> FeatureStack<T> {
    FeatureExtractor::new(FeatureConfig::default()).extract(img)
}

/// `-mean_c nlcc(fa_c, fu_c)`.
pub fn fcc_loss<T: Real>(fa: &FeatureStack<T>, fu: &FeatureStack<T>, cfg: &NlccConfig) -> Result<T> {
    check_stacks(fa, fu)?;
    cfg.validate()?;
    let total: T = fa
        .channels
        .iter()
        .zip(&fu.channels)
        .map(|(a, u)| nlcc_slices(a, u, fa.dims, cfg).value)
        .sum();
    Ok(-total / T::from_usize(fa.channels.len()).unwrap())
}

/// [`fcc_loss`] plus its gradient with respect to every channel of `fa`.
pub fn fcc_loss_with_grad<T: Real>(
    fa: &FeatureStack<T>,
    fu: &FeatureStack<T>,
    cfg: &NlccConfig,
) -> Result<(T, Vec<Vec<T>>)> {
    check_stacks(fa, fu)?;
    cfg.validate()?;
    let scale = -T::one() / T::from_usize(fa.channels.len()).unwrap();
    let mut total = T::zero();
    let mut grads = Vec::with_capacity(fa.channels.len());
    for (a, u) in fa.channels.iter().zip(&fu.channels) {
        let (s, g) = nlcc_grad_slices(a, u, fa.dims, cfg);
        total = total + s.value;
        grads.push(g.into_iter().map(|v| v * scale).collect());
    }
    Ok((total * scale, grads))
}

fn check_stacks<T: Real>(fa: &FeatureStack<T>, fu: &FeatureStack<T>) -> Result<()> {
    fa.dims.ensure_same(&fu.dims)?;
    if fa.channels.len() != fu.channels.len() {
        return Err(Error::ClassMismatch {
            left: fa.channels.len(),
            right: fu.channels.len(),
        });
    }
    Ok(())
}

/// Clamped neighbour indices `[minus, plus]` per axis.
fn neighbours(dims: Dims) -> Vec<[[usize; 2]; 3]> {
    (0..dims.len())
        .map(|i| {
            let p = dims.coords(i);
            std::array::from_fn(|a| {
                let s = dims.stride(a);
                let lo = if p[a] > 0 { i - s } else { i };
                let hi = if p[a] + 1 < dims.extent(a) { i + s } else { i };
                [lo, hi]
            })
        })
        .collect()
}

struct ZScoreTape<T> {
    count: Vec<T>,
    mean: Vec<T>,
    /// Local standard deviation, zero where the guard zeroed the output.
    std: Vec<T>,
    z: Vec<T>,
}

struct ScaleTape<T> {
    smooth: Vec<T>,
    grads: [Vec<T>; 3],
    laplacian: Vec<T>,
    magnitude: Vec<T>,
    zscore: [ZScoreTape<T>; 3],
}

/// Intermediate values kept from a forward pass for backpropagation.
pub struct FeatureTape<T> {
    dims: Dims,
    scales: Vec<ScaleTape<T>>,
    kernels: Vec<Vec<T>>,
    window: usize,
    neighbours: Vec<[[usize; 2]; 3]>,
}

/// The filter bank; kernels are built once.
#[derive(Debug, Clone)]
pub struct FeatureExtractor<T> {
    config: FeatureConfig,
    kernels: Vec<Vec<T>>,
}

impl<T: Real> FeatureExtractor<T> {
    pub fn new(config: FeatureConfig) -> Self {
        let kernels = config.sigmas.iter().map(|&s| gaussian_kernel(s)).collect();
        Self { config, kernels }
    }

    pub fn config(&self) -> &FeatureConfig {
        &self.config
    }

    pub fn with_zscore_window(&self, n: usize) -> Self {
        Self {
            config: FeatureConfig {
                zscore_window: n,
                ..self.config.clone()
            },
            kernels: self.kernels.clone(),
        }
    }

    pub fn num_channels(&self) -> usize {
        3 * self.kernels.len()
    }

    pub fn extract(&self, img: &ScalarField<T>) -> FeatureStack<T> {
        self.extract_with_tape(img).0
    }

    pub fn extract_with_tape(&self, img: &ScalarField<T>) -> (FeatureStack<T>, FeatureTape<T>) {
        let dims = img.dims();
        let nb = neighbours(dims);
        let scale = img.data().iter().fold(T::zero(), |m, v| m.max(v.abs()));
        let floor = T::lit(1e3) * T::epsilon() * scale;
        let floor = floor * floor;
        let half = T::lit(0.5);
        let two = T::lit(2.0);
        let mut channels = Vec::with_capacity(self.num_channels());
        let mut scales = Vec::with_capacity(self.kernels.len());
        for kernel in &self.kernels {
            let smooth = gaussian_smooth(img.data(), dims, kernel);
            let grads: [Vec<T>; 3] = std::array::from_fn(|a| {
                nb.iter().map(|n| (smooth[n[a][1]] - smooth[n[a][0]]) * half).collect()
            });
            let magnitude: Vec<T> = (0..dims.len())
                .map(|i| (grads[0][i] * grads[0][i] + grads[1][i] * grads[1][i] + grads[2][i] * grads[2][i] + T::lit(GRAD_MAG_EPS)).sqrt())
                .collect();
            let laplacian: Vec<T> = (0..dims.len())
                .map(|i| (0..3).fold(T::zero(), |acc, a| acc + smooth[nb[i][a][0]] + smooth[nb[i][a][1]] - two * smooth[i]))
                .collect();
            let zs = [
                zscore(&smooth, dims, self.config.zscore_window, floor),
                zscore(&magnitude, dims, self.config.zscore_window, floor),
                zscore(&laplacian, dims, self.config.zscore_window, floor),
            ];
            for z in &zs {
                channels.push(z.z.clone());
            }
            scales.push(ScaleTape {
                smooth,
                grads,
                laplacian,
                magnitude,
                zscore: zs,
            });
        }
        let tape = FeatureTape {
            dims,
            scales,
            kernels: self.kernels.clone(),
            window: self.config.zscore_window,
            neighbours: nb,
        };
        (FeatureStack { dims, channels }, tape)
    }
}

fn zscore<T: Real>(f: &[T], dims: Dims, n: usize, floor: T) -> ZScoreTape<T> {
    let (lo, hi) = window_bounds(n);
    let count = box_sum(&vec![T::one(); f.len()], dims, lo, hi);
    let s1 = box_sum(f, dims, lo, hi);
    let sq: Vec<T> = f.iter().map(|&v| v * v).collect();
    let s2 = box_sum(&sq, dims, lo, hi);
    let mut mean = Vec::with_capacity(f.len());
    let mut std = Vec::with_capacity(f.len());
    let mut z = Vec::with_capacity(f.len());
    for i in 0..f.len() {
        let mu = s1[i] / count[i];
        let mean_sq = s2[i] / count[i];
        let var = mean_sq - mu * mu;
        mean.push(mu);
        // below this the variance is cancellation error, not signal
        let noise = T::lit(1e3) * T::epsilon() * mean_sq;
        if var > floor && var > noise {
            let s = var.sqrt();
            std.push(s);
            z.push((f[i] - mu) / s);
        } else {
            std.push(T::zero());
            z.push(T::zero());
        }
    }
    ZScoreTape { count, mean, std, z }
}

fn zscore_backward<T: Real>(tape: &ZScoreTape<T>, f: &[T], g: &[T], dims: Dims, n: usize) -> Vec<T> {
    let len = f.len();
    let mut a = vec![T::zero(); len];
    let mut b = vec![T::zero(); len];
    let mut c = vec![T::zero(); len];
    for i in 0..len {
        let s = tape.std[i];
        if s > T::zero() {
            a[i] = g[i] / (s * tape.count[i]);
            b[i] = g[i] * tape.z[i] / (s * s * tape.count[i]);
            c[i] = b[i] * tape.mean[i];
        }
    }
    let (lo, hi) = window_bounds(n);
    let sa = box_sum_adjoint(&a, dims, lo, hi);
    let sb = box_sum_adjoint(&b, dims, lo, hi);
    let sc = box_sum_adjoint(&c, dims, lo, hi);
    (0..len)
        .map(|j| {
            let s = tape.std[j];
            let direct = if s > T::zero() { g[j] / s } else { T::zero() };
            direct - sa[j] - f[j] * sb[j] + sc[j]
        })
        .collect()
}

impl<T: Real> FeatureTape<T> {
    /// Gradient with respect to the input image given the gradient with respect
    /// to every output channel (same order as the forward pass).
    pub fn backward(&self, channel_grads: &[Vec<T>]) -> Vec<T> {
        let dims = self.dims;
        let len = dims.len();
        let nb = &self.neighbours;
        let half = T::lit(0.5);
        let two = T::lit(2.0);
        let mut out = vec![T::zero(); len];
        for (s, (scale, kernel)) in self.scales.iter().zip(&self.kernels).enumerate() {
            let g = &channel_grads[3 * s..3 * s + 3];
            let mut d_smooth = zscore_backward(&scale.zscore[0], &scale.smooth, &g[0], dims, self.window);
            let d_mag = zscore_backward(&scale.zscore[1], &scale.magnitude, &g[1], dims, self.window);
            let d_lap = zscore_backward(&scale.zscore[2], &scale.laplacian, &g[2], dims, self.window);

            for i in 0..len {
                let m = scale.magnitude[i];
                let gm = d_mag[i] / m;
                for a in 0..3 {
                    let dg = gm * scale.grads[a][i] * half;
                    let [lo, hi] = nb[i][a];
                    d_smooth[hi] = d_smooth[hi] + dg;
                    d_smooth[lo] = d_smooth[lo] - dg;
                    let dl = d_lap[i];
                    d_smooth[lo] = d_smooth[lo] + dl;
                    d_smooth[hi] = d_smooth[hi] + dl;
                    d_smooth[i] = d_smooth[i] - two * dl;
                }
            }
            let d_img = gaussian_smooth_adjoint(&d_smooth, dims, kernel);
            for (o, v) in out.iter_mut().zip(d_img) {
                *o = *o + v;
            }
        }
        out
    }
}
