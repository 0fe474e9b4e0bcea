//! Mid-plane slices as binary PGM images.

use std::fs;
use std::path::{Path, PathBuf};

use crate::cohort::Volume;
use crate::error::{param_err, Result};

/// Pixel value of an intensity: `floor(v·255 + 0.5)` after clamping to [0, 1].
pub fn to_gray(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

/// The middle slice orthogonal to `axis`, as rows of pixels. Axis 0 is the
/// axial direction.
pub fn mid_slice(v: &Volume, axis: usize) -> Result<Vec<Vec<u8>>> {
    let s = v.shape();
    if s.len() != 3 {
        return param_err(format!("expected a rank-3 volume, got shape {s:?}"));
    }
    if axis > 2 {
        return param_err(format!("axis {axis} out of range"));
    }
    let at = |i: usize, j: usize, k: usize| v.data()[(i * s[1] + j) * s[2] + k];
    let m = s[axis] / 2;
    let (rows, cols) = match axis {
        0 => (s[1], s[2]),
        1 => (s[0], s[2]),
        _ => (s[0], s[1]),
    };
    Ok((0..rows)
        .map(|r| {
            (0..cols)
                .map(|c| {
                    to_gray(match axis {
                        0 => at(m, r, c),
                        1 => at(r, m, c),
                        _ => at(r, c, m),
                    })
                })
                .collect()
        })
        .collect())
}

pub fn pgm_bytes(pixels: &[Vec<u8>]) -> Vec<u8> {
    let (h, w) = (pixels.len(), pixels.first().map_or(0, Vec::len));
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    for row in pixels {
        out.extend_from_slice(row);
    }
    out
}

/// Write `<out>/<name>_axis<axis>.pgm` and return its path.
pub fn export_slice(v: &Volume, name: &str, axis: usize, out: &Path) -> Result<PathBuf> {
    fs::create_dir_all(out)?;
    let path = out.join(format!("{name}_axis{axis}.pgm"));
    fs::write(&path, pgm_bytes(&mid_slice(v, axis)?))?;
    Ok(path)
}

/// Real and synthetic slices of one patient side by side, separated by a
/// one-pixel white column.
pub fn side_by_side(real: &Volume, synthetic: &Volume, axis: usize) -> Result<Vec<Vec<u8>>> {
    let (a, b) = (mid_slice(real, axis)?, mid_slice(synthetic, axis)?);
    if a.len() != b.len() {
        return param_err("real and synthetic slices differ in height");
    }
    Ok(a.into_iter().zip(b).map(|(mut l, r)| {
        l.push(255);
        l.extend(r);
        l
    }).collect())
}
