//! Discrete Fourier transforms, amplitude/phase decomposition, and
//! image-aligned style transformation (IST).
//!
//! IST keeps the phase of a warped atlas and replaces its amplitude with a
//! mixture of its own and a target image's amplitude:
//!
//! ```text
//! A_out = (1 - beta) * A_atlas + beta * A_target
//! F_out = A_out * exp(+i * P_atlas)
//! ```
//!
//! With this sign convention `beta = 0` reproduces the atlas exactly.

use num_traits::Zero;
use rand::Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::fields::{Dims, ScalarField};
use crate::real::Real;

/// Complex spectrum of a volume, same layout as the spatial grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum<T> {
    dims: Dims,
    re: Vec<T>,
    im: Vec<T>,
}

impl<T: Real> Spectrum<T> {
    pub fn new(dims: Dims, re: Vec<T>, im: Vec<T>) -> Result<Self> {
        dims.validate()?;
        for v in [&re, &im] {
            if v.len() != dims.len() {
                return Err(Error::LengthMismatch {
                    dims,
                    expected: dims.len(),
                    actual: v.len(),
                });
            }
        }
        Ok(Self { dims, re, im })
    }

    pub fn zeros(dims: Dims) -> Self {
        Self {
            dims,
            re: vec![T::zero(); dims.len()],
            im: vec![T::zero(); dims.len()],
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn re(&self) -> &[T] {
        &self.re
    }

    pub fn im(&self) -> &[T] {
        &self.im
    }

    #[inline]
    pub fn amplitude(&self, i: usize) -> T {
        self.re[i].hypot(self.im[i])
    }

    /// Phase in `(-pi, pi]`.
    #[inline]
    pub fn phase(&self, i: usize) -> T {
        let p = self.im[i].atan2(self.re[i]);
        let pi = T::lit(std::f64::consts::PI);
        if p <= -pi {
            pi
        } else {
            p
        }
    }

    pub fn amplitudes(&self) -> Vec<T> {
        (0..self.re.len()).map(|i| self.amplitude(i)).collect()
    }

    pub fn phases(&self) -> Vec<T> {
        (0..self.re.len()).map(|i| self.phase(i)).collect()
    }

    /// Rebuilds a spectrum from polar components, `A * exp(i P)`.
    pub fn from_polar(dims: Dims, amplitude: &[T], phase: &[T]) -> Result<Self> {
        if amplitude.len() != dims.len() || phase.len() != dims.len() {
            return Err(Error::LengthMismatch {
                dims,
                expected: dims.len(),
                actual: amplitude.len().min(phase.len()),
            });
        }
        let re = amplitude.iter().zip(phase).map(|(&a, &p)| a * p.cos()).collect();
        let im = amplitude.iter().zip(phase).map(|(&a, &p)| a * p.sin()).collect();
        Self::new(dims, re, im)
    }
}

fn transform<T: Real>(buf: &mut [Complex<T>], dims: Dims, inverse: bool) {
    let mut planner = FftPlanner::<T>::new();
    let mut line = Vec::new();
    for axis in 0..3 {
        let n = dims.extent(axis);
        if n == 1 {
            continue;
        }
        let fft = if inverse {
            planner.plan_fft_inverse(n)
        } else {
            planner.plan_fft_forward(n)
        };
        let stride = dims.stride(axis);
        line.resize(n, Complex::zero());
        for start in 0..dims.len() {
            // line starts are the voxels whose coordinate along `axis` is zero
            if (start / stride) % n != 0 {
                continue;
            }
            for (k, slot) in line.iter_mut().enumerate() {
                *slot = buf[start + k * stride];
            }
            fft.process(&mut line);
            for (k, v) in line.iter().enumerate() {
                buf[start + k * stride] = *v;
            }
        }
    }
}

/// Forward DFT, `F(k) = sum_x f(x) exp(-2 pi i k.x / N)`, unnormalized.
pub fn to_spectrum<T: Real>(img: &ScalarField<T>) -> Spectrum<T> {
    let dims = img.dims();
    let mut buf: Vec<Complex<T>> = img.data().iter().map(|&v| Complex::new(v, T::zero())).collect();
    transform(&mut buf, dims, false);
    Spectrum {
        dims,
        re: buf.iter().map(|c| c.re).collect(),
        im: buf.iter().map(|c| c.im).collect(),
    }
}

/// Inverse DFT with `1/N` normalization. The imaginary part is discarded; if
/// it exceeds `1e-3` of the real part's norm the spectrum was not that of a
/// real image and an error is returned.
pub fn from_spectrum<T: Real>(spec: &Spectrum<T>) -> Result<ScalarField<T>> {
    let dims = spec.dims;
    let mut buf: Vec<Complex<T>> = spec.re.iter().zip(&spec.im).map(|(&r, &i)| Complex::new(r, i)).collect();
    transform(&mut buf, dims, true);
    let scale = T::one() / T::from_usize(dims.len()).unwrap();
    let mut norm = T::zero();
    let mut residue = T::zero();
    let data: Vec<T> = buf
        .iter()
        .map(|c| {
            let r = c.re * scale;
            let i = c.im * scale;
            norm = norm + r * r;
            residue = residue + i * i;
            r
        })
        .collect();
    let (norm, residue) = (norm.sqrt(), residue.sqrt());
    if residue > T::lit(1e-3) * norm + T::min_positive_value() {
        return Err(Error::ImaginaryResidue {
            residue: residue.as_f64(),
            norm: norm.as_f64(),
        });
    }
    if let Some(index) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { index });
    }
    Ok(ScalarField::from_raw(dims, data).with_spacing([T::one(); 3]))
}

/// Amplitude mixture with the warped atlas's phase, in the frequency domain.
pub fn ist_spectrum<T: Real>(atlas: &Spectrum<T>, target: &Spectrum<T>, beta: T) -> Result<Spectrum<T>> {
    atlas.dims.ensure_same(&target.dims)?;
    check_beta(beta)?;
    let one_minus = T::one() - beta;
    let n = atlas.re.len();
    let mut re = Vec::with_capacity(n);
    let mut im = Vec::with_capacity(n);
    for i in 0..n {
        let a = atlas.amplitude(i);
        let mixed = one_minus * a + beta * target.amplitude(i);
        if a > T::zero() {
            // rescaling the complex value keeps its phase bit-for-bit consistent
            let s = mixed / a;
            re.push(atlas.re[i] * s);
            im.push(atlas.im[i] * s);
        } else {
            // phase of a zero bin is taken as 0
            re.push(mixed);
            im.push(T::zero());
        }
    }
    Ok(Spectrum { dims: atlas.dims, re, im })
}

fn check_beta<T: Real>(beta: T) -> Result<()> {
    if !(beta >= T::zero() && beta <= T::one()) {
        return Err(Error::param("beta", format!("must lie in [0, 1], got {beta}")));
    }
    Ok(())
}

/// Transfers the style (Fourier amplitude) of `target` onto `warped_atlas`
/// while keeping the atlas's spatial structure (phase).
pub fn ist<T: Real>(warped_atlas: &ScalarField<T>, target: &ScalarField<T>, beta: T) -> Result<ScalarField<T>> {
    warped_atlas.dims().ensure_same(&target.dims())?;
    check_beta(beta)?;
    let mixed = ist_spectrum(&to_spectrum(warped_atlas), &to_spectrum(target), beta)?;
    Ok(from_spectrum(&mixed)?.with_spacing(warped_atlas.spacing()))
}

/// Draws a perturbation factor uniformly from `[0, 1)`.
pub fn sample_beta<T: Real, R: Rng + ?Sized>(rng: &mut R) -> T {
    T::lit(rng.gen::<f64>())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn noise(dims: Dims, seed: u64) -> ScalarField<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ScalarField::from_fn(dims, |_, _, _| rng.gen::<f64>() * 2.0 - 1.0)
    }

    #[test]
    fn constant_image_has_only_dc() {
        let dims = Dims::new(4, 6, 3);
        let s = to_spectrum(&ScalarField::filled(dims, 1.5f64));
        let n = dims.len() as f64;
        assert!((s.re()[0] - 1.5 * n).abs() < 1e-9 * 1.5 * n);
        for i in 1..dims.len() {
            assert!(s.amplitude(i) < 1e-9 * 1.5 * n);
        }
    }

    #[test]
    fn cosine_energy_at_plus_minus_one() {
        let dims = Dims::new_2d(8, 4);
        let img = ScalarField::from_fn(dims, |x, _, _| (2.0 * std::f64::consts::PI * x as f64 / 8.0).cos());
        let s = to_spectrum(&img);
        for i in 0..dims.len() {
            let [kx, ky, _] = dims.coords(i);
            let expected = if ky == 0 && (kx == 1 || kx == 7) { 16.0 } else { 0.0 };
            assert!((s.amplitude(i) - expected).abs() < 1e-9, "bin {kx},{ky}");
        }
    }

    #[test]
    fn delta_is_flat() {
        let dims = Dims::new(4, 4, 2);
        let img = ScalarField::from_fn(dims, |x, y, z| if x + y + z == 0 { 1.0f64 } else { 0.0 });
        let s = to_spectrum(&img);
        assert!(s.amplitudes().iter().all(|a| (a - 1.0).abs() < 1e-12));
    }

    #[test]
    fn round_trip_and_zero_spectrum() {
        let img = noise(Dims::new(6, 5, 3), 3);
        let back = from_spectrum(&to_spectrum(&img)).unwrap();
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        let z = from_spectrum(&Spectrum::<f64>::zeros(Dims::new_2d(3, 3))).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
        let c = from_spectrum(&to_spectrum(&ScalarField::filled(Dims::new_2d(5, 3), -2.0f64))).unwrap();
        assert!(c.data().iter().all(|&v| (v + 2.0).abs() < 1e-12));
    }

    #[test]
    fn asymmetric_spectrum_rejected() {
        let dims = Dims::new_2d(4, 1);
        let spec = Spectrum::new(dims, vec![0.0, 1.0, 0.0, 0.0], vec![0.0; 4]).unwrap();
        assert!(matches!(from_spectrum(&spec), Err(Error::ImaginaryResidue { .. })));
    }

    #[test]
    fn ist_rejects_bad_beta_and_dims() {
        let a = noise(Dims::new_2d(4, 4), 1);
        let b = noise(Dims::new_2d(4, 4), 2);
        assert!(ist(&a, &b, 1.5).is_err());
        assert!(ist(&a, &b, -0.1).is_err());
        assert!(ist(&a, &b, f64::NAN).is_err());
        assert!(ist(&a, &noise(Dims::new_2d(4, 5), 2), 0.5).is_err());
    }

    #[test]
    fn ist_limits() {
        let a = noise(Dims::new(6, 4, 2), 1);
        let b = noise(Dims::new(6, 4, 2), 2);
        let same = ist(&a, &b, 0.0).unwrap();
        for (x, y) in a.data().iter().zip(same.data()) {
            assert!((x - y).abs() < 1e-12);
        }
        let self_mix = ist(&a, &a, 0.7).unwrap();
        for (x, y) in a.data().iter().zip(self_mix.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn beta_draws_are_seeded_and_bounded() {
        let mut r1 = ChaCha8Rng::seed_from_u64(9);
        let mut r2 = ChaCha8Rng::seed_from_u64(9);
        let a: Vec<f64> = (0..100).map(|_| sample_beta(&mut r1)).collect();
        let b: Vec<f64> = (0..100).map(|_| sample_beta(&mut r2)).collect();
        assert_eq!(a, b);
        assert!(a.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}
