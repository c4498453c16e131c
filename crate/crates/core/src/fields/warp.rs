//! Resampling through displacement fields: `out(p) = in(p + u(p))`.
//!
//! Sample positions are clamped into the grid, which is the same as
//! edge-replicating the volume; outside the grid the value is locally
//! constant and its spatial derivative is zero.

use super::{DisplacementField, Dims, LabelMap, ProbMask, ScalarField};
use crate::error::Result;
use crate::real::Real;

/// Interpolation used by [`warp_scalar`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Interpolation {
    #[default]
    Linear,
}

/// Per-axis bracket: lower/upper index, upper weight, and whether the
/// coordinate was inside the grid (zero derivative otherwise).
#[derive(Clone, Copy)]
struct Bracket<T> {
    i0: usize,
    i1: usize,
    frac: T,
    inside: bool,
}

#[inline]
fn bracket<T: Real>(pos: T, n: usize) -> Bracket<T> {
    if n == 1 {
        return Bracket {
            i0: 0,
            i1: 0,
            frac: T::zero(),
            inside: false,
        };
    }
    let hi = T::from_usize(n - 1).unwrap();
    let inside = pos >= T::zero() && pos <= hi;
    let p = pos.max(T::zero()).min(hi);
    let i0 = p.floor().to_usize().unwrap().min(n - 2);
    Bracket {
        i0,
        i1: i0 + 1,
        frac: p - T::from_usize(i0).unwrap(),
        inside,
    }
}

/// Corner offsets and trilinear weights of a sample position.
struct Stencil<T> {
    idx: [usize; 8],
    w: [T; 8],
    /// d(weight)/d(position) per axis.
    dw: [[T; 3]; 8],
    len: usize,
}

#[inline]
fn stencil<T: Real>(dims: Dims, pos: [T; 3]) -> Stencil<T> {
    let b = [bracket(pos[0], dims.w), bracket(pos[1], dims.h), bracket(pos[2], dims.d)];
    let corners = |a: usize| if dims.extent(a) > 1 { 2 } else { 1 };
    let mut s = Stencil {
        idx: [0; 8],
        w: [T::zero(); 8],
        dw: [[T::zero(); 3]; 8],
        len: 0,
    };
    for cz in 0..corners(2) {
        for cy in 0..corners(1) {
            for cx in 0..corners(0) {
                let c = [cx, cy, cz];
                let mut w1 = [T::one(); 3];
                let mut d1 = [T::zero(); 3];
                let mut ix = [0usize; 3];
                for a in 0..3 {
                    if dims.extent(a) == 1 {
                        continue;
                    }
                    let br = b[a];
                    if c[a] == 0 {
                        w1[a] = T::one() - br.frac;
                        d1[a] = if br.inside { -T::one() } else { T::zero() };
                        ix[a] = br.i0;
                    } else {
                        w1[a] = br.frac;
                        d1[a] = if br.inside { T::one() } else { T::zero() };
                        ix[a] = br.i1;
                    }
                }
                let k = s.len;
                s.idx[k] = dims.index(ix[0], ix[1], ix[2]);
                s.w[k] = w1[0] * w1[1] * w1[2];
                s.dw[k] = [d1[0] * w1[1] * w1[2], w1[0] * d1[1] * w1[2], w1[0] * w1[1] * d1[2]];
                s.len += 1;
            }
        }
    }
    s
}

#[inline]
fn sample_position<T: Real>(p: [usize; 3], u: [T; 3]) -> [T; 3] {
    std::array::from_fn(|a| T::from_usize(p[a]).unwrap() + u[a])
}

/// Multilinear sample of `data` at a continuous position (clamped).
pub fn sample_linear<T: Real>(data: &[T], dims: Dims, pos: [T; 3]) -> T {
    let s = stencil(dims, pos);
    let mut acc = T::zero();
    for k in 0..s.len {
        acc = acc + s.w[k] * data[s.idx[k]];
    }
    acc
}

/// Sample value and its derivative with respect to the sample position.
pub fn sample_linear_grad<T: Real>(data: &[T], dims: Dims, pos: [T; 3]) -> (T, [T; 3]) {
    let s = stencil(dims, pos);
    let mut acc = T::zero();
    let mut g = [T::zero(); 3];
    for k in 0..s.len {
        let v = data[s.idx[k]];
        acc = acc + s.w[k] * v;
        for a in 0..3 {
            g[a] = g[a] + s.dw[k][a] * v;
        }
    }
    (acc, g)
}

/// `img ∘ (id + disp)` with multilinear interpolation and edge clamping.
pub fn warp_scalar<T: Real>(
    img: &ScalarField<T>,
    disp: &DisplacementField<T>,
    mode: Interpolation,
) -> Result<ScalarField<T>> {
    img.dims().ensure_same(&disp.dims())?;
    let Interpolation::Linear = mode;
    let dims = img.dims();
    let out = disp
        .vectors()
        .iter()
        .enumerate()
        .map(|(i, &u)| sample_linear(img.data(), dims, sample_position(dims.coords(i), u)))
        .collect();
    Ok(ScalarField::from_raw(dims, out))
}

/// Warped image plus `d warped(p) / d disp(p)` at every voxel.
pub fn warp_scalar_with_grad<T: Real>(
    img: &ScalarField<T>,
    disp: &DisplacementField<T>,
) -> Result<(ScalarField<T>, Vec<[T; 3]>)> {
    img.dims().ensure_same(&disp.dims())?;
    let dims = img.dims();
    let mut out = Vec::with_capacity(dims.len());
    let mut grads = Vec::with_capacity(dims.len());
    for (i, &u) in disp.vectors().iter().enumerate() {
        let (v, g) = sample_linear_grad(img.data(), dims, sample_position(dims.coords(i), u));
        out.push(v);
        grads.push(g);
    }
    Ok((ScalarField::from_raw(dims, out), grads))
}

/// Label warping: one-hot encode, warp every channel linearly, take the argmax
/// (ties to the lowest class).
pub fn warp_labels<T: Real>(labels: &LabelMap, disp: &DisplacementField<T>) -> Result<LabelMap> {
    labels.dims().ensure_same(&disp.dims())?;
    let dims = labels.dims();
    let k = labels.num_classes();
    let src = labels.labels();
    let mut acc = vec![T::zero(); k];
    let out = disp
        .vectors()
        .iter()
        .enumerate()
        .map(|(i, &u)| {
            acc.iter_mut().for_each(|a| *a = T::zero());
            let s = stencil(dims, sample_position(dims.coords(i), u));
            for c in 0..s.len {
                let l = src[s.idx[c]] as usize;
                acc[l] = acc[l] + s.w[c];
            }
            let mut best = 0;
            for c in 1..k {
                if acc[c] > acc[best] {
                    best = c;
                }
            }
            best as u32
        })
        .collect();
    Ok(LabelMap::from_raw(dims, out, k))
}

/// Nearest-neighbour label warping (rounded, clamped sample positions).
pub fn warp_labels_nearest<T: Real>(labels: &LabelMap, disp: &DisplacementField<T>) -> Result<LabelMap> {
    labels.dims().ensure_same(&disp.dims())?;
    let dims = labels.dims();
    let out = disp
        .vectors()
        .iter()
        .enumerate()
        .map(|(i, &u)| {
            let p = sample_position(dims.coords(i), u);
            let q: [usize; 3] = std::array::from_fn(|a| {
                let hi = (dims.extent(a) - 1) as f64;
                p[a].as_f64().round().clamp(0.0, hi) as usize
            });
            labels.get(q[0], q[1], q[2])
        })
        .collect();
    Ok(LabelMap::from_raw(dims, out, labels.num_classes()))
}

/// Channel-wise linear warp of a probability mask. Convex weights keep it a valid mask.
pub fn warp_onehot<T: Real>(mask: &ProbMask<T>, disp: &DisplacementField<T>) -> Result<ProbMask<T>> {
    warp_onehot_impl(mask, disp, false).map(|(m, _)| m)
}

/// [`warp_onehot`] plus `d out[v, c] / d disp(v)` stored voxel-major, `K` entries per voxel.
pub fn warp_onehot_with_grad<T: Real>(
    mask: &ProbMask<T>,
    disp: &DisplacementField<T>,
) -> Result<(ProbMask<T>, Vec<[T; 3]>)> {
    warp_onehot_impl(mask, disp, true)
}

fn warp_onehot_impl<T: Real>(
    mask: &ProbMask<T>,
    disp: &DisplacementField<T>,
    with_grad: bool,
) -> Result<(ProbMask<T>, Vec<[T; 3]>)> {
    mask.dims().ensure_same(&disp.dims())?;
    let dims = mask.dims();
    let k = mask.num_classes();
    let src = mask.probs();
    let mut out = vec![T::zero(); dims.len() * k];
    let mut grads = if with_grad {
        vec![[T::zero(); 3]; dims.len() * k]
    } else {
        Vec::new()
    };
    for (i, &u) in disp.vectors().iter().enumerate() {
        let s = stencil(dims, sample_position(dims.coords(i), u));
        for c in 0..s.len {
            let base = s.idx[c] * k;
            for ch in 0..k {
                let v = src[base + ch];
                out[i * k + ch] = out[i * k + ch] + s.w[c] * v;
                if with_grad {
                    let g = &mut grads[i * k + ch];
                    for a in 0..3 {
                        g[a] = g[a] + s.dw[c][a] * v;
                    }
                }
            }
        }
    }
    Ok((ProbMask::from_raw(dims, k, out), grads))
}
