//! 8-bit PNG snapshots of one slice of a volume.

use std::path::Path;

use crate::error::{Error, Result};
use crate::fields::{Dims, LabelMap, ScalarField};
use crate::real::Real;

/// Categorical colours; label `l` uses entry `l % len`.
pub const PALETTE: [[u8; 3]; 10] = [
    [0, 0, 0],
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
];

#[derive(Debug, Clone, Copy)]
pub enum SliceSource<'a, T> {
    /// Grey levels, min-max windowed over the slice.
    Intensity(&'a ScalarField<T>),
    /// Palette colours.
    Labels(&'a LabelMap),
}

impl<T: Real> SliceSource<'_, T> {
    fn dims(&self) -> Dims {
        match self {
            SliceSource::Intensity(f) => f.dims(),
            SliceSource::Labels(l) => l.dims(),
        }
    }
}

/// The two in-plane axes of a slice normal to `axis`.
fn plane(axis: usize) -> (usize, usize) {
    match axis {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    }
}

/// Encodes the slice `index` normal to `axis` (0 = x, 1 = y, 2 = z).
pub fn encode_slice_png<T: Real>(src: SliceSource<'_, T>, axis: usize, index: usize) -> Result<Vec<u8>> {
    let dims = src.dims();
    if axis > 2 {
        return Err(Error::param("axis", format!("must be 0, 1 or 2, got {axis}")));
    }
    if index >= dims.extent(axis) {
        return Err(Error::param(
            "index",
            format!("slice {index} out of range for extent {}", dims.extent(axis)),
        ));
    }
    let (u, v) = plane(axis);
    let (width, height) = (dims.extent(u), dims.extent(v));
    let voxels: Vec<usize> = (0..height)
        .flat_map(|j| {
            (0..width).map(move |i| {
                let mut p = [0; 3];
                p[axis] = index;
                p[u] = i;
                p[v] = j;
                dims.index(p[0], p[1], p[2])
            })
        })
        .collect();

    let (color, pixels): (png::ColorType, Vec<u8>) = match src {
        SliceSource::Intensity(f) => {
            let vals: Vec<f64> = voxels.iter().map(|&i| f.data()[i].as_f64()).collect();
            let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let px = vals
                .iter()
                .map(|&x| {
                    if hi > lo {
                        ((x - lo) / (hi - lo) * 255.0).round() as u8
                    } else {
                        128
                    }
                })
                .collect();
            (png::ColorType::Grayscale, px)
        }
        SliceSource::Labels(l) => {
            let px = voxels
                .iter()
                .flat_map(|&i| PALETTE[l.labels()[i] as usize % PALETTE.len()])
                .collect();
            (png::ColorType::Rgb, px)
        }
    };

    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc
            .write_header()
            .map_err(|e| Error::param("png", e.to_string()))?;
        writer
            .write_image_data(&pixels)
            .map_err(|e| Error::param("png", e.to_string()))?;
    }
    Ok(out)
}

pub fn emit_slice_png<T: Real>(src: SliceSource<'_, T>, axis: usize, index: usize, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_slice_png(src, axis, index)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Middle slice along z (or along y for 2D images).
pub fn mid_slice(dims: Dims) -> (usize, usize) {
    if dims.is_2d() {
        (2, 0)
    } else {
        (2, dims.d / 2)
    }
}
