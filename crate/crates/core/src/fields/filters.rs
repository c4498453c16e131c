//! Separable linear filters with their exact adjoints, plus pyramid resampling.

use super::{DisplacementField, Dims};
use crate::real::Real;

/// Offsets `[lo, hi]` of an `n`-wide window centered on a voxel.
///
/// Even widths put the extra voxel on the negative side: `n = 8` gives `[-4, 3]`.
pub fn window_bounds(n: usize) -> (isize, isize) {
    let n = n.max(1) as isize;
    let lo = -(n / 2);
    (lo, lo + n - 1)
}

fn for_each_line(dims: Dims, axis: usize, mut f: impl FnMut(usize, usize, usize)) {
    let n = dims.extent(axis);
    let stride = dims.stride(axis);
    let [w, h, d] = dims.as_array();
    let (outer_a, outer_b) = match axis {
        0 => (h, d),
        1 => (w, d),
        _ => (w, h),
    };
    for b in 0..outer_b {
        for a in 0..outer_a {
            let start = match axis {
                0 => dims.index(0, a, b),
                1 => dims.index(a, 0, b),
                _ => dims.index(a, b, 0),
            };
            f(start, stride, n);
        }
    }
}

fn box_axis<T: Real>(src: &[T], dst: &mut [T], dims: Dims, axis: usize, lo: isize, hi: isize) {
    let len = dims.extent(axis);
    // window i covers prefix entries [a, b); empty windows get a == b
    let bounds: Vec<(usize, usize)> = (0..len as isize)
        .map(|i| {
            let a = (i + lo).clamp(0, len as isize) as usize;
            let b = (i + hi + 1).clamp(0, len as isize) as usize;
            (a, b.max(a))
        })
        .collect();
    // prefix[j] = sum of the first j samples of the line
    let mut prefix = vec![T::zero(); len + 1];
    for_each_line(dims, axis, |start, stride, n| {
        let mut acc = T::zero();
        for j in 0..n {
            acc = acc + src[start + j * stride];
            prefix[j + 1] = acc;
        }
        for (i, &(a, b)) in bounds.iter().enumerate() {
            dst[start + i * stride] = prefix[b] - prefix[a];
        }
    });
}

/// Sum over the window `[lo, hi]^3` around each voxel, truncated at the grid boundary.
pub fn box_sum<T: Real>(data: &[T], dims: Dims, lo: isize, hi: isize) -> Vec<T> {
    debug_assert_eq!(data.len(), dims.len());
    let mut a = data.to_vec();
    let mut b = vec![T::zero(); data.len()];
    for axis in 0..3 {
        if dims.extent(axis) > 1 {
            box_axis(&a, &mut b, dims, axis, lo, hi);
            std::mem::swap(&mut a, &mut b);
        }
    }
    a
}

/// Adjoint of [`box_sum`]: accumulates each voxel's value into every window containing it.
pub fn box_sum_adjoint<T: Real>(data: &[T], dims: Dims, lo: isize, hi: isize) -> Vec<T> {
    box_sum(data, dims, -hi, -lo)
}

/// Normalized Gaussian taps with radius `ceil(3 sigma)`.
pub fn gaussian_kernel<T: Real>(sigma: f64) -> Vec<T> {
    let radius = (3.0 * sigma).ceil() as isize;
    let raw: Vec<f64> = (-radius..=radius)
        .map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| T::lit(w / total)).collect()
}

#[inline]
fn clamp_index(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

/// Separable Gaussian smoothing with edge-clamped addressing.
pub fn gaussian_smooth<T: Real>(data: &[T], dims: Dims, kernel: &[T]) -> Vec<T> {
    let r = (kernel.len() / 2) as isize;
    let mut a = data.to_vec();
    let mut b = vec![T::zero(); data.len()];
    for axis in 0..3 {
        if dims.extent(axis) == 1 {
            continue;
        }
        for_each_line(dims, axis, |start, stride, n| {
            for i in 0..n {
                let mut acc = T::zero();
                for (t, &w) in kernel.iter().enumerate() {
                    let j = clamp_index(i as isize + t as isize - r, n);
                    acc = acc + w * a[start + j * stride];
                }
                b[start + i * stride] = acc;
            }
        });
        std::mem::swap(&mut a, &mut b);
    }
    a
}

/// Transpose of [`gaussian_smooth`]; differs from it only near clamped edges.
pub fn gaussian_smooth_adjoint<T: Real>(data: &[T], dims: Dims, kernel: &[T]) -> Vec<T> {
    let r = (kernel.len() / 2) as isize;
    let mut a = data.to_vec();
    let mut b = vec![T::zero(); data.len()];
    // the forward pass applies axes 0,1,2 so the transpose runs 2,1,0
    for axis in (0..3).rev() {
        if dims.extent(axis) == 1 {
            continue;
        }
        b.iter_mut().for_each(|v| *v = T::zero());
        for_each_line(dims, axis, |start, stride, n| {
            for i in 0..n {
                let g = a[start + i * stride];
                for (t, &w) in kernel.iter().enumerate() {
                    let j = clamp_index(i as isize + t as isize - r, n);
                    b[start + j * stride] = b[start + j * stride] + w * g;
                }
            }
        });
        std::mem::swap(&mut a, &mut b);
    }
    a
}

/// Halves every non-singleton axis (rounding up) by averaging pairs of voxels.
pub fn downsample2<T: Real>(data: &[T], dims: Dims) -> (Vec<T>, Dims) {
    let half = |n: usize| if n > 1 { n.div_ceil(2) } else { 1 };
    let out_dims = Dims::new(half(dims.w), half(dims.h), half(dims.d));
    let mut sums = vec![T::zero(); out_dims.len()];
    let mut counts = vec![0usize; out_dims.len()];
    for z in 0..dims.d {
        for y in 0..dims.h {
            for x in 0..dims.w {
                let o = out_dims.index(
                    if dims.w > 1 { x / 2 } else { 0 },
                    if dims.h > 1 { y / 2 } else { 0 },
                    if dims.d > 1 { z / 2 } else { 0 },
                );
                sums[o] = sums[o] + data[dims.index(x, y, z)];
                counts[o] += 1;
            }
        }
    }
    let out = sums
        .into_iter()
        .zip(counts)
        .map(|(s, c)| s / T::from_usize(c).unwrap())
        .collect();
    (out, out_dims)
}

/// Resamples a coarse displacement field onto `fine` dims, rescaling vector lengths per axis.
pub fn upsample_displacement<T: Real>(coarse: &DisplacementField<T>, fine: Dims) -> DisplacementField<T> {
    let cd = coarse.dims();
    let ratio: [T; 3] = std::array::from_fn(|a| {
        T::from_usize(cd.extent(a)).unwrap() / T::from_usize(fine.extent(a)).unwrap()
    });
    let half = T::lit(0.5);
    let comps: Vec<Vec<T>> = (0..3)
        .map(|c| coarse.vectors().iter().map(|v| v[c]).collect())
        .collect();
    DisplacementField::from_fn(fine, |x, y, z| {
        let p = [x, y, z];
        let pos: [T; 3] = std::array::from_fn(|a| (T::from_usize(p[a]).unwrap() + half) * ratio[a] - half);
        std::array::from_fn(|c| super::sample_linear(&comps[c], cd, pos) / ratio[c])
    })
}
