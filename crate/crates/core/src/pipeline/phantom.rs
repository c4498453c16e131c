//! Seeded synthetic "anatomies": nested, smoothly perturbed ellipsoidal
//! regions, a random smooth subject deformation and a random monotone
//! intensity style.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::fields::{gaussian_kernel, gaussian_smooth, DisplacementField, Dims, LabelMap, ScalarField};
use crate::real::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomConfig {
    pub dims: Dims,
    pub num_classes: usize,
    /// Largest subject displacement, in voxels.
    pub deformation: f64,
    /// Relative amplitude of the boundary perturbations of each region.
    pub boundary_perturbation: f64,
    /// Gaussian blur applied to the piecewise-constant image.
    pub blur_sigma: f64,
    /// `gamma = exp(u)`, `u ~ U(-gamma_log_range, gamma_log_range)`.
    pub gamma_log_range: f64,
    /// Gain drawn from `[1 - gain_range, 1 + gain_range]`.
    pub gain_range: f64,
    pub offset_range: f64,
    pub noise_sigma: f64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            dims: Dims::new_2d(64, 64),
            num_classes: 4,
            deformation: 4.0,
            boundary_perturbation: 0.12,
            blur_sigma: 0.7,
            gamma_log_range: 0.1,
            gain_range: 0.08,
            offset_range: 0.04,
            noise_sigma: 0.02,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        if self.num_classes < 2 {
            return Err(Error::param("synth.num_classes", "must be >= 2"));
        }
        let finite_nonneg = [
            ("synth.deformation", self.deformation),
            ("synth.boundary_perturbation", self.boundary_perturbation),
            ("synth.blur_sigma", self.blur_sigma),
            ("synth.gamma_log_range", self.gamma_log_range),
            ("synth.offset_range", self.offset_range),
            ("synth.noise_sigma", self.noise_sigma),
        ];
        for (name, v) in finite_nonneg {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::param(name, "must be finite and >= 0"));
            }
        }
        if !(0.0..1.0).contains(&self.gain_range) {
            return Err(Error::param("synth.gain_range", "must be in [0, 1)"));
        }
        if self.boundary_perturbation >= 0.5 {
            return Err(Error::param("synth.boundary_perturbation", "must be < 0.5"));
        }
        let min_extent = (0..3).map(|a| self.dims.extent(a)).filter(|&n| n > 1).min().unwrap_or(1);
        if min_extent < 8 {
            return Err(Error::param("synth.dims", "non-singleton extents must be >= 8"));
        }
        Ok(())
    }

    /// Same geometry without deformation, style or noise.
    pub fn identity_style(&self) -> Self {
        Self {
            deformation: 0.0,
            gamma_log_range: 0.0,
            gain_range: 0.0,
            offset_range: 0.0,
            noise_sigma: 0.0,
            ..self.clone()
        }
    }
}

/// Independent seeds for the three factors of variation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PhantomSeeds {
    pub anatomy: u64,
    pub subject: u64,
    pub style: u64,
}

#[derive(Debug, Clone)]
struct Region {
    center: [f64; 3],
    radii: [f64; 3],
    /// (amplitude, direction frequency, phase) of each boundary ripple.
    ripples: Vec<(f64, [f64; 3], f64)>,
}

impl Region {
    fn contains(&self, p: [f64; 3]) -> bool {
        let q: [f64; 3] = std::array::from_fn(|a| (p[a] - self.center[a]) / self.radii[a]);
        let r = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if r < 1e-12 {
            return true;
        }
        let dir = q.map(|v| v / r);
        let bound = 1.0
            + self
                .ripples
                .iter()
                .map(|(amp, f, ph)| amp * (f[0] * dir[0] + f[1] * dir[1] + f[2] * dir[2] + ph).sin())
                .sum::<f64>();
        r <= bound
    }
}

/// A template shared by every subject of one dataset.
#[derive(Debug, Clone)]
pub struct Anatomy {
    regions: Vec<Region>,
    intensities: Vec<f64>,
}

impl Anatomy {
    pub fn generate(cfg: &PhantomConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = cfg.dims;
        let active: [bool; 3] = std::array::from_fn(|a| dims.extent(a) > 1);
        let half: [f64; 3] = std::array::from_fn(|a| (dims.extent(a) - 1) as f64 / 2.0);
        let k = cfg.num_classes;
        let mut regions = Vec::with_capacity(k - 1);
        for c in 1..k {
            // region 1 is the outer body; later regions shrink and drift off-centre
            let frac = if c == 1 { 0.0 } else { (c - 1) as f64 / (k - 1) as f64 };
            let size = 0.72 - 0.45 * frac;
            let mut center = [0.0; 3];
            let mut radii = [1.0; 3];
            for a in 0..3 {
                if active[a] {
                    let drift = if c == 1 { 0.05 } else { 0.25 * frac };
                    center[a] = half[a] * (1.0 + rng.gen_range(-drift..=drift));
                    radii[a] = half[a] * size * rng.gen_range(0.8..=1.1);
                } else {
                    center[a] = 0.0;
                    radii[a] = 1.0;
                }
            }
            let ripples = (0..3)
                .map(|_| {
                    let amp = cfg.boundary_perturbation * rng.gen_range(0.3..=1.0) / 3.0_f64.sqrt();
                    let f: [f64; 3] = std::array::from_fn(|a| if active[a] { rng.gen_range(-4.0..=4.0) } else { 0.0 });
                    (amp, f, rng.gen_range(0.0..2.0 * PI))
                })
                .collect();
            regions.push(Region { center, radii, ripples });
        }
        // distinct, well separated mean intensities; background darkest
        let mut intensities: Vec<f64> = (0..k).map(|c| 0.1 + 0.8 * c as f64 / (k - 1) as f64).collect();
        let (_, rest) = intensities.split_at_mut(1);
        for i in (1..rest.len()).rev() {
            let j = rng.gen_range(0..=i);
            rest.swap(i, j);
        }
        Ok(Self { regions, intensities })
    }

    pub fn num_classes(&self) -> usize {
        self.intensities.len()
    }

    /// Label of the continuous template point `p`; the innermost region wins.
    pub fn label_at(&self, p: [f64; 3]) -> u32 {
        for (i, r) in self.regions.iter().enumerate().rev() {
            // inner regions live inside the body
            if r.contains(p) && self.regions[0].contains(p) {
                return (i + 1) as u32;
            }
        }
        0
    }

    pub fn intensity(&self, label: u32) -> f64 {
        self.intensities[label as usize]
    }
}

/// Smooth random displacement with `max_norm == max_mag` exactly (zero if
/// `max_mag == 0`). Built from a few low-frequency sinusoids per component.
pub fn random_smooth_displacement<T: Real, R: Rng + ?Sized>(dims: Dims, max_mag: f64, rng: &mut R) -> DisplacementField<T> {
    if max_mag == 0.0 {
        return DisplacementField::zeros(dims);
    }
    let active: [bool; 3] = std::array::from_fn(|a| dims.extent(a) > 1);
    let mut modes: Vec<[(f64, [f64; 3], f64); 4]> = Vec::with_capacity(3);
    for a in 0..3 {
        modes.push(std::array::from_fn(|_| {
            let amp = if active[a] { rng.gen_range(-1.0..=1.0) } else { 0.0 };
            let k: [f64; 3] = std::array::from_fn(|b| {
                if active[b] {
                    rng.gen_range(-1.5..=1.5) * 2.0 * PI / dims.extent(b) as f64
                } else {
                    0.0
                }
            });
            (amp, k, rng.gen_range(0.0..2.0 * PI))
        }));
    }
    let raw: Vec<[f64; 3]> = (0..dims.len())
        .map(|i| {
            let p = dims.coords(i).map(|c| c as f64);
            std::array::from_fn(|a| {
                modes[a]
                    .iter()
                    .map(|(amp, k, ph)| amp * (k[0] * p[0] + k[1] * p[1] + k[2] * p[2] + ph).sin())
                    .sum()
            })
        })
        .collect();
    let peak = raw
        .iter()
        .map(|v| v.iter().map(|c| c * c).sum::<f64>().sqrt())
        .fold(0.0, f64::max);
    let s = if peak > 0.0 { max_mag / peak } else { 0.0 };
    DisplacementField::from_raw(dims, raw.into_iter().map(|v| v.map(|c| T::lit(c * s))).collect())
}

/// Renders one subject of `anatomy`.
pub fn render_phantom<T: Real>(
    anatomy: &Anatomy,
    cfg: &PhantomConfig,
    subject_seed: u64,
    style_seed: u64,
) -> Result<(ScalarField<T>, LabelMap)> {
    cfg.validate()?;
    if anatomy.num_classes() != cfg.num_classes {
        return Err(Error::ClassMismatch {
            left: anatomy.num_classes(),
            right: cfg.num_classes,
        });
    }
    let dims = cfg.dims;
    let mut subject_rng = ChaCha8Rng::seed_from_u64(subject_seed);
    let disp: DisplacementField<f64> = random_smooth_displacement(dims, cfg.deformation, &mut subject_rng);
    let labels: Vec<u32> = (0..dims.len())
        .map(|i| {
            let p = dims.coords(i);
            let u = disp.vectors()[i];
            anatomy.label_at(std::array::from_fn(|a| p[a] as f64 + u[a]))
        })
        .collect();
    let labels = LabelMap::new(dims, labels, cfg.num_classes)?;

    let clean: Vec<f64> = labels.labels().iter().map(|&l| anatomy.intensity(l)).collect();
    let blurred = if cfg.blur_sigma > 0.0 {
        gaussian_smooth(&clean, dims, &gaussian_kernel(cfg.blur_sigma))
    } else {
        clean
    };

    let mut style_rng = ChaCha8Rng::seed_from_u64(style_seed);
    let gamma = if cfg.gamma_log_range > 0.0 {
        style_rng.gen_range(-cfg.gamma_log_range..=cfg.gamma_log_range).exp()
    } else {
        1.0
    };
    let gain = if cfg.gain_range > 0.0 {
        style_rng.gen_range(1.0 - cfg.gain_range..=1.0 + cfg.gain_range)
    } else {
        1.0
    };
    let offset = if cfg.offset_range > 0.0 {
        style_rng.gen_range(-cfg.offset_range..=cfg.offset_range)
    } else {
        0.0
    };
    let noise = Normal::new(0.0, cfg.noise_sigma).map_err(|e| Error::param("synth.noise_sigma", e.to_string()))?;
    let data = blurred
        .iter()
        .map(|&v| {
            let n = if cfg.noise_sigma > 0.0 { noise.sample(&mut style_rng) } else { 0.0 };
            T::lit(gain * v.max(0.0).powf(gamma) + offset + n)
        })
        .collect();
    Ok((ScalarField::new(dims, data)?, labels))
}

/// One phantom from explicit seeds.
pub fn synth_phantom_seeded<T: Real>(cfg: &PhantomConfig, seeds: PhantomSeeds) -> Result<(ScalarField<T>, LabelMap)> {
    let anatomy = Anatomy::generate(cfg, seeds.anatomy)?;
    render_phantom(&anatomy, cfg, seeds.subject, seeds.style)
}

/// One phantom whose seeds are drawn from `rng`.
pub fn synth_phantom<T: Real, R: Rng + ?Sized>(rng: &mut R, cfg: &PhantomConfig) -> Result<(ScalarField<T>, LabelMap)> {
    let seeds = PhantomSeeds {
        anatomy: rng.gen(),
        subject: rng.gen(),
        style: rng.gen(),
    };
    synth_phantom_seeded(cfg, seeds)
}

/// An atlas, unlabeled images (with held-out truth) and a test set, all
/// subjects of one anatomy.
#[derive(Debug, Clone)]
pub struct PhantomDataset<T> {
    pub atlas: (ScalarField<T>, LabelMap),
    pub unlabeled: Vec<(ScalarField<T>, LabelMap)>,
    pub test: Vec<(ScalarField<T>, LabelMap)>,
}

pub fn synth_dataset<T: Real>(
    cfg: &PhantomConfig,
    num_unlabeled: usize,
    num_test: usize,
    seed: u64,
) -> Result<PhantomDataset<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let anatomy = Anatomy::generate(cfg, rng.gen())?;
    let next = |rng: &mut ChaCha8Rng| render_phantom::<T>(&anatomy, cfg, rng.gen(), rng.gen());
    let atlas = next(&mut rng)?;
    let unlabeled = (0..num_unlabeled).map(|_| next(&mut rng)).collect::<Result<_>>()?;
    let test = (0..num_test).map(|_| next(&mut rng)).collect::<Result<_>>()?;
    Ok(PhantomDataset { atlas, unlabeled, test })
}
