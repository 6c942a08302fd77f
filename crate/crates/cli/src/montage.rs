use std::path::Path;

use image::{Rgb, RgbImage};
use seunet::data::Volume;

use crate::CliError;

const PANELS: usize = 3;
const CONTOUR: Rgb<u8> = Rgb([255, 32, 32]);

/// Axial slices around the middle of the volume.
fn slices(nz: usize) -> Vec<usize> {
    let mid = nz / 2;
    let step = (nz / (2 * PANELS)).max(1);
    let mut s: Vec<usize> = (0..PANELS)
        .map(|k| (mid + k * step).saturating_sub((PANELS / 2) * step).min(nz - 1))
        .collect();
    s.dedup();
    s
}

fn inside(mask: &Volume, x: isize, y: isize, z: usize) -> bool {
    let [nx, ny, _] = mask.dims;
    x >= 0 && y >= 0 && (x as usize) < nx && (y as usize) < ny && mask.at(x as usize, y as usize, z) > 0.5
}

/// Renders a row of axial slices of `underlay` (min-max scaled to 8-bit
/// gray) with the in-plane boundary of `mask` drawn in red.
pub fn render_slices(mask: &Volume, underlay: &Volume) -> Result<RgbImage, CliError> {
    if mask.dims != underlay.dims {
        return Err(CliError::Runtime(anyhow::anyhow!(
            "mask dims {:?} do not match underlay dims {:?}",
            mask.dims,
            underlay.dims
        )));
    }
    let [nx, ny, nz] = underlay.dims;
    let (lo, hi) = underlay
        .data
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let range = if hi > lo { hi - lo } else { 1.0 };
    let zs = slices(nz);
    let mut img = RgbImage::new((nx * zs.len()) as u32, ny as u32);
    for (p, &z) in zs.iter().enumerate() {
        for y in 0..ny {
            for x in 0..nx {
                let g = (((underlay.at(x, y, z) - lo) / range) * 255.0).round().clamp(0.0, 255.0) as u8;
                let (xi, yi) = (x as isize, y as isize);
                let edge = inside(mask, xi, yi, z)
                    && [(-1, 0), (1, 0), (0, -1), (0, 1)]
                        .iter()
                        .any(|(dx, dy)| !inside(mask, xi + dx, yi + dy, z));
                // Image rows run top to bottom, so y is flipped.
                let px = if edge { CONTOUR } else { Rgb([g, g, g]) };
                img.put_pixel((p * nx + x) as u32, (ny - 1 - y) as u32, px);
            }
        }
    }
    Ok(img)
}

pub fn export_slices(mask: &Volume, underlay: &Volume, path: &Path) -> Result<(), CliError> {
    let img = render_slices(mask, underlay)?;
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| CliError::Runtime(anyhow::anyhow!("writing {}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slice_choice() {
        assert_eq!(slices(1), vec![0]);
        assert_eq!(slices(12), vec![4, 6, 8]);
    }
}
