//! Field visualization: the leading principal components of the features
//! become RGB, written as a colored cloud and a top-down scatter PNG.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::geometry::write_cloud_text;
use crate::linalg::Matrix;
use crate::semlift::{fit_pca_rows, SemanticField};

pub const SCATTER_SIZE: u32 = 256;
const DOT_RADIUS: i64 = 2;

/// Per-point colors in `[0, 1]^3`. Channels beyond the feature dimension
/// and channels with no spread are mid-gray.
pub fn field_colors(field: &SemanticField) -> Result<Matrix> {
    let n = field.len();
    let d = field.feature_dim().min(3);
    if n == 0 {
        return Err(Error::invalid("cannot color an empty field"));
    }
    let proj = if d == 0 || n < d {
        Matrix::zeros(n, 0)
    } else {
        fit_pca_rows(field.features(), d)?.project_rows(field.features())
    };
    let mut colors = Matrix::filled(n, 3, 0.5);
    for c in 0..proj.cols() {
        let (lo, hi) = (0..n).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), i| {
            (lo.min(proj[(i, c)]), hi.max(proj[(i, c)]))
        });
        if hi - lo > 1e-9 {
            for i in 0..n {
                colors[(i, c)] = (proj[(i, c)] - lo) / (hi - lo);
            }
        }
    }
    Ok(colors)
}

fn to_u8(c: f64) -> u8 {
    (c.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Top-down scatter of the points on a white square, aspect preserved.
pub fn scatter_image(field: &SemanticField, colors: &Matrix) -> RgbImage {
    let size = SCATTER_SIZE;
    let mut img = RgbImage::from_pixel(size, size, Rgb([255, 255, 255]));
    let pts = field.points();
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for p in pts {
        x0 = x0.min(p.x);
        x1 = x1.max(p.x);
        y0 = y0.min(p.y);
        y1 = y1.max(p.y);
    }
    let span = (x1 - x0).max(y1 - y0).max(1e-12);
    let margin = 8.0;
    let scale = (size as f64 - 2.0 * margin) / span;
    let (cx, cy) = ((x0 + x1) / 2.0, (y0 + y1) / 2.0);
    for (i, p) in pts.iter().enumerate() {
        let u = (size as f64 / 2.0 + (p.x - cx) * scale).round() as i64;
        let v = (size as f64 / 2.0 - (p.y - cy) * scale).round() as i64;
        let px = Rgb([to_u8(colors[(i, 0)]), to_u8(colors[(i, 1)]), to_u8(colors[(i, 2)])]);
        for dv in -DOT_RADIUS..=DOT_RADIUS {
            for du in -DOT_RADIUS..=DOT_RADIUS {
                let (uu, vv) = (u + du, v + dv);
                if (0..size as i64).contains(&uu) && (0..size as i64).contains(&vv) {
                    img.put_pixel(uu as u32, vv as u32, px);
                }
            }
        }
    }
    img
}

#[derive(Clone, Debug, PartialEq)]
pub struct VizOutput {
    pub colors: Matrix,
    pub cloud_path: PathBuf,
    pub image_path: PathBuf,
}

/// Writes `<prefix>.txt` (x y z r g b) and `<prefix>.png` for the field
/// stored at `field_path`.
pub fn visualize_field(field_path: &Path, out_prefix: &Path) -> Result<VizOutput> {
    let field = SemanticField::read_text(field_path, 0)?;
    let colors = field_colors(&field)?;
    let cloud_path = out_prefix.with_extension("txt");
    let image_path = out_prefix.with_extension("png");
    if let Some(dir) = out_prefix.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    write_cloud_text(&cloud_path, field.points(), Some(&colors))?;
    scatter_image(&field, &colors)
        .save(&image_path)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(&image_path, io),
            other => Error::format(&image_path, other.to_string()),
        })?;
    Ok(VizOutput {
        colors,
        cloud_path,
        image_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Point3;

    #[test]
    fn constant_features_give_one_color() {
        let pts: Vec<Point3> = (0..10).map(|i| Point3::new(i as f64, 0.0, 0.0)).collect();
        let f = SemanticField::new(pts, Matrix::filled(10, 4, 0.3), 0).unwrap();
        let c = field_colors(&f).unwrap();
        assert!(c.data().iter().all(|&v| v == 0.5));
    }
}
