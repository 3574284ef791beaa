//! Portable-pixmap (binary PPM) views of fields, masks, pieces and
//! segmentations. BEV images put +x to the right and +y up.

use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::{BevGridSpec, BevMotionField, PointCloud, Vec2};
use crate::io::write_file;
use crate::masks::{PointStatus, StaticDynamicMask};
use crate::pieces::{RigidPieces, Segmentation2D};
use crate::projection::FlowImage;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, fill: [u8; 3]) -> Self {
        Self {
            width,
            height,
            data: fill.repeat(width * height),
        }
    }

    pub fn put(&mut self, col: usize, row: usize, c: [u8; 3]) {
        let i = 3 * (row * self.width + col);
        self.data[i..i + 3].copy_from_slice(&c);
    }

    pub fn get(&self, col: usize, row: usize) -> [u8; 3] {
        let i = 3 * (row * self.width + col);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_ppm())
    }
}

const BACKGROUND: [u8; 3] = [0, 0, 0];

fn hsv(h: f64, s: f64, v: f64) -> [u8; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let i = h.floor();
    let f = h - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    let (r, g, b) = match i as u32 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    [r, g, b].map(|c| (c * 255.0).round().clamp(0.0, 255.0) as u8)
}

/// Hue from direction, brightness from magnitude relative to `max_mag`.
pub fn flow_color(f: Vec2, max_mag: f64) -> [u8; 3] {
    let m = f.norm();
    if m == 0.0 || !(max_mag > 0.0) {
        return [255, 255, 255];
    }
    let hue = f.y.atan2(f.x) / std::f64::consts::TAU;
    hsv(hue, (m / max_mag).min(1.0), 1.0)
}

/// Distinct, stable color for a label; black for unassigned.
pub fn label_color(label: i32) -> [u8; 3] {
    if label < 0 {
        return BACKGROUND;
    }
    let golden = 0.618_033_988_749_895;
    hsv(label as f64 * golden, 0.75, 0.95)
}

fn bev_pixel(spec: &BevGridSpec, ix: usize, iy: usize) -> (usize, usize) {
    (ix, spec.cells_y - 1 - iy)
}

/// Field colors on occupied cells; `cloud` marks which cells are occupied
/// (all cells when absent). `max_mag` defaults to the field's largest value.
pub fn render_field(field: &BevMotionField, cloud: Option<&PointCloud>, max_mag: Option<f64>) -> RgbImage {
    let spec = &field.spec;
    let mut img = RgbImage::new(spec.cells_x, spec.cells_y, BACKGROUND);
    let scale = max_mag.unwrap_or_else(|| field.max_magnitude());
    let mut occupied = vec![cloud.is_none(); spec.num_cells()];
    if let Some(c) = cloud {
        for p in &c.points {
            if let Some(i) = spec.cell_index(p) {
                occupied[i] = true;
            }
        }
    }
    for (i, &o) in occupied.iter().enumerate() {
        if o {
            let (ix, iy) = spec.unlinear(i);
            let (col, row) = bev_pixel(spec, ix, iy);
            img.put(col, row, flow_color(field.values[i], scale));
        }
    }
    img
}

fn splat(spec: &BevGridSpec, cloud: &PointCloud, color: impl Fn(usize) -> Option<[u8; 3]>) -> RgbImage {
    let mut img = RgbImage::new(spec.cells_x, spec.cells_y, BACKGROUND);
    for (i, p) in cloud.points.iter().enumerate() {
        if let (Some((ix, iy)), Some(c)) = (spec.cell_of(p), color(i)) {
            let (col, row) = bev_pixel(spec, ix, iy);
            img.put(col, row, c);
        }
    }
    img
}

/// Dynamic points red, static gray, unknown blue. Dynamic wins a cell.
pub fn render_mask(spec: &BevGridSpec, cloud: &PointCloud, mask: &StaticDynamicMask) -> Result<RgbImage> {
    if mask.len() != cloud.len() {
        return Err(Error::LengthMismatch {
            what: "mask vs cloud",
            left: mask.len(),
            right: cloud.len(),
        });
    }
    let color = |s: PointStatus| match s {
        PointStatus::Dynamic => [230, 40, 40],
        PointStatus::Static => [128, 128, 128],
        PointStatus::Unknown => [40, 80, 230],
    };
    // Paint static first so dynamic points stay visible.
    let order = [PointStatus::Static, PointStatus::Unknown, PointStatus::Dynamic];
    let mut img = RgbImage::new(spec.cells_x, spec.cells_y, BACKGROUND);
    for s in order {
        let layer = splat(spec, cloud, |i| (mask.status[i] == s).then(|| color(s)));
        for (dst, src) in img.data.chunks_exact_mut(3).zip(layer.data.chunks_exact(3)) {
            if src != BACKGROUND {
                dst.copy_from_slice(src);
            }
        }
    }
    Ok(img)
}

pub fn render_pieces(spec: &BevGridSpec, cloud: &PointCloud, pieces: &RigidPieces) -> Result<RgbImage> {
    if pieces.labels.len() != cloud.len() {
        return Err(Error::LengthMismatch {
            what: "pieces vs cloud",
            left: pieces.labels.len(),
            right: cloud.len(),
        });
    }
    Ok(splat(spec, cloud, |i| {
        let l = pieces.labels[i];
        (l >= 0).then(|| label_color(l))
    }))
}

pub fn render_segmentation(seg: &Segmentation2D) -> RgbImage {
    let (w, h) = (seg.width as usize, seg.height as usize);
    let mut img = RgbImage::new(w, h, BACKGROUND);
    for row in 0..h {
        for col in 0..w {
            img.put(col, row, label_color(seg.at(col, row)));
        }
    }
    img
}

pub fn render_flow_image(flow: &FlowImage, max_mag: Option<f64>) -> RgbImage {
    let (w, h) = (flow.width as usize, flow.height as usize);
    let scale = max_mag.unwrap_or_else(|| {
        (0..w * h)
            .map(|i| flow.at(i % w, i / w).norm())
            .fold(0.0, f64::max)
    });
    let mut img = RgbImage::new(w, h, BACKGROUND);
    for row in 0..h {
        for col in 0..w {
            img.put(col, row, flow_color(flow.at(col, row), scale));
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Point3;

    fn small() -> BevGridSpec {
        BevGridSpec::new((0.0, 3.0), (0.0, 2.0), (-1.0, 1.0), 1.0).unwrap()
    }

    #[test]
    fn ppm_header_and_size() {
        let img = RgbImage::new(3, 2, [1, 2, 3]);
        let bytes = img.to_ppm();
        assert!(bytes.starts_with(b"P6\n3 2\n255\n"));
        assert_eq!(bytes.len(), 11 + 18);
    }

    #[test]
    fn field_orientation_and_colors() {
        let spec = small();
        let mut f = BevMotionField::zeros(spec, 1);
        f.set(2, 1, Vec2::new(1.0, 0.0));
        let img = render_field(&f, None, None);
        assert_eq!((img.width, img.height), (3, 2));
        // cell (2, 1) is the top-right pixel; pure +x is red
        assert_eq!(img.get(2, 0), [255, 0, 0]);
        assert_eq!(img.get(0, 1), [255, 255, 255]);
        let cloud = PointCloud::new(0, vec![Point3::new(2.5, 1.5, 0.0)]).unwrap();
        let img = render_field(&f, Some(&cloud), None);
        assert_eq!(img.get(0, 1), BACKGROUND);
    }

    #[test]
    fn dynamic_wins_a_cell() {
        let spec = small();
        let cloud = PointCloud::new(0, vec![Point3::new(0.5, 0.5, 0.0), Point3::new(0.6, 0.5, 0.0)]).unwrap();
        let mask = StaticDynamicMask {
            frame_index: 0,
            status: vec![PointStatus::Dynamic, PointStatus::Static],
        };
        let img = render_mask(&spec, &cloud, &mask).unwrap();
        assert_eq!(img.get(0, 1), [230, 40, 40]);
        assert!(render_mask(&spec, &cloud, &StaticDynamicMask::uniform(0, 1, PointStatus::Static)).is_err());
    }

    #[test]
    fn label_colors_are_distinct_for_neighbors() {
        for l in 0..50 {
            assert_ne!(label_color(l), label_color(l + 1));
        }
        assert_eq!(label_color(-1), BACKGROUND);
    }
}
