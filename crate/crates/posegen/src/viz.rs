//! Pose visualization and result-grid assembly.
//!
//! Grids follow a fixed column scheme per sample row: condition image,
//! target pose rendering, (optional) target image, coarse output,
//! (optional) refined output — so qualitative comparison across runs is
//! direct.

use ndarray::Array3;

use crate::error::{Error, Result};
use crate::img::ImageTensor;
use crate::pose::{KeypointSet, PoseTensor};

/// Render a pose as an image: white keypoint disks and gray skeleton
/// segments on black.
pub fn render_pose(kp: &KeypointSet, pose: &PoseTensor) -> ImageTensor {
    let (h, w) = pose.dims();
    let mut canvas = Array3::from_elem((3, h, w), -1.0);
    // skeleton lines
    for &(a, b) in &crate::config::SKELETON_EDGES {
        let (pa, pb) = (kp.points()[a], kp.points()[b]);
        if !pa.visible || !pb.visible {
            continue;
        }
        draw_segment(&mut canvas, (pa.x as f64, pa.y as f64), (pb.x as f64, pb.y as f64), 0.1);
    }
    // heatmap disks on top
    for k in 0..pose.channels().dim().0 {
        for y in 0..h {
            for x in 0..w {
                if pose.channels()[[k, y, x]] == 1.0 {
                    for c in 0..3 {
                        canvas[[c, y, x]] = 1.0;
                    }
                }
            }
        }
    }
    ImageTensor::new(canvas).expect("values in range")
}

fn draw_segment(canvas: &mut Array3<f64>, a: (f64, f64), b: (f64, f64), value: f64) {
    let (_, h, w) = canvas.dim();
    let steps = ((b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil() as usize).max(1);
    for s in 0..=steps {
        let t = s as f64 / steps as f64;
        let x = (a.0 + t * (b.0 - a.0)).round() as i64;
        let y = (a.1 + t * (b.1 - a.1)).round() as i64;
        if x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h {
            for c in 0..3 {
                canvas[[c, y as usize, x as usize]] = value;
            }
        }
    }
}

/// Tile rows x cols of equally sized images with a 2-pixel separator.
/// Row-major input; every row must have the same number of columns.
pub fn assemble_grid(rows: &[Vec<ImageTensor>]) -> Result<ImageTensor> {
    if rows.is_empty() || rows[0].is_empty() {
        return Err(Error::Data("grid needs at least one image".into()));
    }
    let cols = rows[0].len();
    let (h, w) = rows[0][0].dims();
    for row in rows {
        if row.len() != cols {
            return Err(Error::Data("grid rows must have equal lengths".into()));
        }
        for img in row {
            if img.dims() != (h, w) {
                return Err(Error::Shape("grid images must share dimensions".into()));
            }
        }
    }
    let sep = 2usize;
    let gh = rows.len() * h + (rows.len() - 1) * sep;
    let gw = cols * w + (cols - 1) * sep;
    let mut canvas = Array3::from_elem((3, gh, gw), 1.0); // white separators
    for (r, row) in rows.iter().enumerate() {
        for (c, img) in row.iter().enumerate() {
            let y0 = r * (h + sep);
            let x0 = c * (w + sep);
            for ch in 0..3 {
                for y in 0..h {
                    for x in 0..w {
                        canvas[[ch, y0 + y, x0 + x]] = img.data()[[ch, y, x]];
                    }
                }
            }
        }
    }
    ImageTensor::new(canvas).map_err(|_| Error::Data("grid assembly out of range".into()))
}
