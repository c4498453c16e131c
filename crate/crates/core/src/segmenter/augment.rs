//! Random spatial augmentation: an affine map composed with a cubic B-spline
//! free-form displacement, applied identically to an image and its labels.

use rand::Rng;

use crate::error::Result;
use crate::fields::{warp_labels, warp_scalar, DisplacementField, Dims, Interpolation, LabelMap, ScalarField};
use crate::real::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentConfig {
    pub max_rotation_deg: f64,
    /// Isotropic scale is drawn from `[1 - scale_range, 1 + scale_range]`.
    pub scale_range: f64,
    pub max_translation: f64,
    /// Control-point spacing of the B-spline grid, in voxels.
    pub bspline_spacing: usize,
    /// Per control point, per component perturbation bound, in voxels.
    pub bspline_magnitude: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            max_rotation_deg: 10.0,
            scale_range: 0.1,
            max_translation: 3.0,
            bspline_spacing: 8,
            bspline_magnitude: 2.0,
        }
    }
}

impl AugmentConfig {
    pub fn zero() -> Self {
        Self {
            max_rotation_deg: 0.0,
            scale_range: 0.0,
            max_translation: 0.0,
            bspline_spacing: 8,
            bspline_magnitude: 0.0,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.max_rotation_deg == 0.0
            && self.scale_range == 0.0
            && self.max_translation == 0.0
            && self.bspline_magnitude == 0.0
    }
}

#[inline]
fn bspline_basis(u: f64) -> [f64; 4] {
    let u2 = u * u;
    let u3 = u2 * u;
    [
        (1.0 - u).powi(3) / 6.0,
        (3.0 * u3 - 6.0 * u2 + 4.0) / 6.0,
        (-3.0 * u3 + 3.0 * u2 + 3.0 * u + 1.0) / 6.0,
        u3 / 6.0,
    ]
}

/// Random cubic B-spline displacement with control points every `spacing` voxels.
fn bspline_field<R: Rng + ?Sized>(dims: Dims, spacing: usize, magnitude: f64, rng: &mut R) -> Vec<[f64; 3]> {
    let spacing = spacing.max(1);
    let active: [bool; 3] = std::array::from_fn(|a| dims.extent(a) > 1);
    // control indices -1 ..= n/spacing + 2 along each active axis
    let ctrl: [usize; 3] = std::array::from_fn(|a| if active[a] { (dims.extent(a) - 1) / spacing + 4 } else { 1 });
    let mut grid = vec![[0.0; 3]; ctrl[0] * ctrl[1] * ctrl[2]];
    for g in grid.iter_mut() {
        for a in 0..3 {
            if active[a] {
                g[a] = rng.gen_range(-magnitude..=magnitude);
            }
        }
    }
    let s = spacing as f64;
    let mut out = Vec::with_capacity(dims.len());
    for i in 0..dims.len() {
        let p = dims.coords(i);
        let mut base = [0usize; 3];
        let mut w = [[1.0, 0.0, 0.0, 0.0]; 3];
        let mut taps = [1usize; 3];
        for a in 0..3 {
            if active[a] {
                let t = p[a] as f64 / s;
                let j = t.floor();
                base[a] = j as usize;
                w[a] = bspline_basis(t - j);
                taps[a] = 4;
            }
        }
        let mut v = [0.0; 3];
        for tz in 0..taps[2] {
            for ty in 0..taps[1] {
                for tx in 0..taps[0] {
                    let wt = w[0][tx] * w[1][ty] * w[2][tz];
                    let gi = (base[0] + tx) + ctrl[0] * ((base[1] + ty) + ctrl[1] * (base[2] + tz));
                    for a in 0..3 {
                        v[a] += wt * grid[gi][a];
                    }
                }
            }
        }
        out.push(v);
    }
    out
}

fn rotation(dims: Dims, max_deg: f64, rng: &mut (impl Rng + ?Sized)) -> [[f64; 3]; 3] {
    let mut draw = || {
        if max_deg > 0.0 {
            rng.gen_range(-max_deg..=max_deg).to_radians()
        } else {
            0.0
        }
    };
    let rz = |t: f64| [[t.cos(), -t.sin(), 0.0], [t.sin(), t.cos(), 0.0], [0.0, 0.0, 1.0]];
    if dims.is_2d() {
        return rz(draw());
    }
    let (a, b, c) = (draw(), draw(), draw());
    let rx = [[1.0, 0.0, 0.0], [0.0, a.cos(), -a.sin()], [0.0, a.sin(), a.cos()]];
    let ry = [[b.cos(), 0.0, b.sin()], [0.0, 1.0, 0.0], [-b.sin(), 0.0, b.cos()]];
    matmul(&matmul(&rz(c), &ry), &rx)
}

fn matmul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    std::array::from_fn(|i| std::array::from_fn(|j| (0..3).map(|k| a[i][k] * b[k][j]).sum()))
}

/// Samples the displacement field of one random augmentation.
pub fn random_displacement<T: Real, R: Rng + ?Sized>(
    dims: Dims,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> DisplacementField<T> {
    if cfg.is_identity() {
        return DisplacementField::zeros(dims);
    }
    let rot = rotation(dims, cfg.max_rotation_deg, rng);
    let scale = if cfg.scale_range > 0.0 {
        rng.gen_range(1.0 - cfg.scale_range..=1.0 + cfg.scale_range)
    } else {
        1.0
    };
    let trans: [f64; 3] = std::array::from_fn(|a| {
        if dims.extent(a) > 1 && cfg.max_translation > 0.0 {
            rng.gen_range(-cfg.max_translation..=cfg.max_translation)
        } else {
            0.0
        }
    });
    let free = if cfg.bspline_magnitude > 0.0 {
        bspline_field(dims, cfg.bspline_spacing, cfg.bspline_magnitude, rng)
    } else {
        vec![[0.0; 3]; dims.len()]
    };
    let center: [f64; 3] = std::array::from_fn(|a| (dims.extent(a) - 1) as f64 / 2.0);
    let vectors = (0..dims.len())
        .map(|i| {
            let p = dims.coords(i).map(|c| c as f64);
            let q: [f64; 3] = std::array::from_fn(|a| p[a] + free[i][a] - center[a]);
            std::array::from_fn(|a| {
                let mapped = center[a] + scale * (0..3).map(|k| rot[a][k] * q[k]).sum::<f64>() + trans[a];
                T::lit(mapped - p[a])
            })
        })
        .collect();
    DisplacementField::from_raw(dims, vectors)
}

/// Applies one random affine + B-spline transform to an image (linear) and its
/// labels (one-hot warp + argmax).
pub fn augment<T: Real, R: Rng + ?Sized>(
    img: &ScalarField<T>,
    labels: &LabelMap,
    rng: &mut R,
    cfg: &AugmentConfig,
) -> Result<(ScalarField<T>, LabelMap)> {
    img.dims().ensure_same(&labels.dims())?;
    if cfg.is_identity() {
        return Ok((img.clone(), labels.clone()));
    }
    let disp = random_displacement::<T, R>(img.dims(), cfg, rng);
    Ok((
        warp_scalar(img, &disp, Interpolation::Linear)?,
        warp_labels(labels, &disp)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn marker_case() -> (ScalarField<f64>, LabelMap) {
        let dims = Dims::new_2d(32, 32);
        let img = ScalarField::from_fn(dims, |x, y, _| {
            let r2 = (x as f64 - 20.0).powi(2) + (y as f64 - 13.0).powi(2);
            if r2 <= 9.0 {
                1.0
            } else {
                0.0
            }
        });
        let labels = LabelMap::new(dims, img.data().iter().map(|&v| v as u32).collect(), 2).unwrap();
        (img, labels)
    }

    #[test]
    fn zero_strength_is_identity() {
        let (img, labels) = marker_case();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (i2, l2) = augment(&img, &labels, &mut rng, &AugmentConfig::zero()).unwrap();
        assert_eq!(i2, img);
        assert_eq!(l2, labels);
    }

    #[test]
    fn seeded_reproducibility() {
        let (img, labels) = marker_case();
        let a = augment(&img, &labels, &mut ChaCha8Rng::seed_from_u64(3), &AugmentConfig::default()).unwrap();
        let b = augment(&img, &labels, &mut ChaCha8Rng::seed_from_u64(3), &AugmentConfig::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn marker_label_follows_intensity() {
        let (img, labels) = marker_case();
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (wi, wl) = augment(&img, &labels, &mut rng, &AugmentConfig::default()).unwrap();
            let (mut sx, mut sy, mut sw) = (0.0, 0.0, 0.0);
            for i in 0..wi.dims().len() {
                let [x, y, _] = wi.dims().coords(i);
                let v = wi.data()[i];
                sx += v * x as f64;
                sy += v * y as f64;
                sw += v;
            }
            assert!(sw > 0.0, "marker vanished for seed {seed}");
            let (cx, cy) = ((sx / sw).round() as usize, (sy / sw).round() as usize);
            assert_eq!(wl.get(cx, cy, 0), 1, "seed {seed}");
            assert!(wl.labels().iter().all(|&l| l < 2));
        }
    }

    #[test]
    fn bspline_bounded_by_magnitude() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let f = bspline_field(Dims::new(20, 17, 9), 8, 2.0, &mut rng);
        assert!(f.iter().all(|v| v.iter().all(|c| c.abs() <= 2.0 + 1e-12)));
        let basis = bspline_basis(0.37);
        assert!((basis.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }
}
