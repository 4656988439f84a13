//! Person crops, binary part heatmaps and their decoding back to boxes.

use dap_core::dataset::Part;
use dap_core::geometry::BBox;
use dap_core::synth::Image;
use serde::{Deserialize, Serialize};

/// Affine relation between a frame region and a fixed-size crop.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropGeometry {
    /// Frame-space region covered by the crop.
    pub source: BBox,
    pub input_width: usize,
    pub input_height: usize,
    /// Crop pixels per heatmap cell.
    pub stride: usize,
}

impl CropGeometry {
    /// Region around `person` widened to the crop aspect ratio and then
    /// scaled by `padding` about its center.
    pub fn for_person(person: &BBox, padding: f64, input_width: usize, input_height: usize, stride: usize) -> Self {
        let (cx, cy) = person.center();
        let aspect = input_height as f64 / input_width as f64;
        let (mut w, mut h) = (person.width().max(1e-3), person.height().max(1e-3));
        if h / w > aspect {
            w = h / aspect;
        } else {
            h = w * aspect;
        }
        CropGeometry {
            source: BBox::from_center(cx, cy, w * padding, h * padding),
            input_width,
            input_height,
            stride,
        }
    }

    /// `(rows, cols)` of the heatmap grid.
    pub fn heatmap_size(&self) -> (usize, usize) {
        (self.input_height / self.stride, self.input_width / self.stride)
    }

    fn scale(&self) -> (f64, f64) {
        (
            self.input_width as f64 / self.source.width(),
            self.input_height as f64 / self.source.height(),
        )
    }

    pub fn frame_to_crop(&self, b: &BBox) -> BBox {
        let (sx, sy) = self.scale();
        BBox::new(
            (b.x1 - self.source.x1) * sx,
            (b.y1 - self.source.y1) * sy,
            (b.x2 - self.source.x1) * sx,
            (b.y2 - self.source.y1) * sy,
        )
    }

    pub fn crop_to_frame(&self, b: &BBox) -> BBox {
        let (sx, sy) = self.scale();
        BBox::new(
            self.source.x1 + b.x1 / sx,
            self.source.y1 + b.y1 / sy,
            self.source.x1 + b.x2 / sx,
            self.source.y1 + b.y2 / sy,
        )
    }

    /// Frame box in heatmap-cell units.
    pub fn frame_to_cells(&self, b: &BBox) -> BBox {
        let c = self.frame_to_crop(b);
        let s = self.stride as f64;
        BBox::new(c.x1 / s, c.y1 / s, c.x2 / s, c.y2 / s)
    }
}

/// Bilinear resampling of the crop region; samples outside the frame are 0.
pub fn crop_image(image: &Image, geom: &CropGeometry) -> Image {
    let mut out = Image::new(geom.input_width, geom.input_height);
    let src = &geom.source;
    let sx = src.width() / geom.input_width as f64;
    let sy = src.height() / geom.input_height as f64;
    let (w, h) = (image.width as isize, image.height as isize);
    let fetch = |x: isize, y: isize| -> [f32; 3] {
        if x < 0 || y < 0 || x >= w || y >= h {
            [0.0; 3]
        } else {
            image.pixel(x as usize, y as usize)
        }
    };
    for v in 0..geom.input_height {
        let fy = src.y1 + (v as f64 + 0.5) * sy - 0.5;
        let y0 = fy.floor();
        let ly = (fy - y0) as f32;
        for u in 0..geom.input_width {
            let fx = src.x1 + (u as f64 + 0.5) * sx - 0.5;
            let x0 = fx.floor();
            let lx = (fx - x0) as f32;
            let (xi, yi) = (x0 as isize, y0 as isize);
            let (a, b, c, d) = (fetch(xi, yi), fetch(xi + 1, yi), fetch(xi, yi + 1), fetch(xi + 1, yi + 1));
            let mut px = [0f32; 3];
            for ch in 0..3 {
                px[ch] = (1.0 - ly) * ((1.0 - lx) * a[ch] + lx * b[ch]) + ly * ((1.0 - lx) * c[ch] + lx * d[ch]);
            }
            out.set_pixel(u, v, px);
        }
    }
    out
}

/// Writes 1 into `map` (row-major `rows x cols`) on every cell whose center
/// lies in `cells` (half-open).
pub fn rasterize_into(map: &mut [f32], rows: usize, cols: usize, cells: &BBox) {
    // Cell j's center j + 0.5 is inside [a, b) iff ceil(a - 0.5) <= j < ceil(b - 0.5).
    let range = |a: f64, b: f64, n: usize| {
        let lo = (a - 0.5).ceil().max(0.0) as usize;
        let hi = ((b - 0.5).ceil().max(0.0) as usize).min(n);
        lo..hi.max(lo)
    };
    for y in range(cells.y1, cells.y2, rows) {
        for x in range(cells.x1, cells.x2, cols) {
            map[y * cols + x] = 1.0;
        }
    }
}

/// Binary target maps, `num_parts x rows x cols` flattened; absent parts give
/// all-zero channels.
pub fn encode_gt_heatmaps(parts: &[Part], num_parts: usize, geom: &CropGeometry) -> Vec<f32> {
    let (rows, cols) = geom.heatmap_size();
    let plane = rows * cols;
    let mut out = vec![0f32; num_parts * plane];
    for p in parts.iter().filter(|p| p.part_id < num_parts) {
        let ch = &mut out[p.part_id * plane..(p.part_id + 1) * plane];
        rasterize_into(ch, rows, cols, &geom.frame_to_cells(&p.bbox));
    }
    out
}

/// A 4-connected group of cells at or above the decoding threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct Region {
    pub cells: Vec<usize>,
    /// Inclusive cell bounds.
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl Region {
    pub fn mean(&self, map: &[f32]) -> f64 {
        self.cells.iter().map(|&c| map[c] as f64).sum::<f64>() / self.cells.len() as f64
    }
}

/// Largest 4-connected component of cells `>= tau`; the first one in raster
/// order wins ties.
pub fn largest_region(map: &[f32], rows: usize, cols: usize, tau: f64) -> Option<Region> {
    let mut seen = vec![false; rows * cols];
    let mut best: Option<Region> = None;
    let mut stack = Vec::new();
    for start in 0..rows * cols {
        if seen[start] || (map[start] as f64) < tau {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let mut cells = Vec::new();
        while let Some(c) = stack.pop() {
            cells.push(c);
            let (y, x) = (c / cols, c % cols);
            let mut visit = |n: usize| {
                if !seen[n] && map[n] as f64 >= tau {
                    seen[n] = true;
                    stack.push(n);
                }
            };
            if x > 0 {
                visit(c - 1);
            }
            if x + 1 < cols {
                visit(c + 1);
            }
            if y > 0 {
                visit(c - cols);
            }
            if y + 1 < rows {
                visit(c + cols);
            }
        }
        if best.as_ref().is_none_or(|b| cells.len() > b.cells.len()) {
            cells.sort_unstable();
            let x0 = cells.iter().map(|c| c % cols).min().unwrap();
            let x1 = cells.iter().map(|c| c % cols).max().unwrap();
            best = Some(Region {
                x0,
                x1,
                y0: cells[0] / cols,
                y1: cells[cells.len() - 1] / cols,
                cells,
            });
        }
    }
    best
}

/// Frame-space box covering the cells of `region`.
pub fn region_to_frame(region: &Region, geom: &CropGeometry) -> BBox {
    let s = geom.stride as f64;
    geom.crop_to_frame(&BBox::new(
        region.x0 as f64 * s,
        region.y0 as f64 * s,
        (region.x1 + 1) as f64 * s,
        (region.y1 + 1) as f64 * s,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodedPart {
    pub part_id: usize,
    pub bbox: BBox,
    /// Mean activation inside the decoded region.
    pub confidence: f64,
}

/// One box per channel with any cell `>= tau`: the tight frame-space box of
/// the largest connected region.
pub fn decode_parts(maps: &[f32], num_parts: usize, geom: &CropGeometry, tau: f64) -> Vec<DecodedPart> {
    let (rows, cols) = geom.heatmap_size();
    let plane = rows * cols;
    (0..num_parts)
        .filter_map(|k| {
            let ch = &maps[k * plane..(k + 1) * plane];
            largest_region(ch, rows, cols, tau).map(|r| DecodedPart {
                part_id: k,
                bbox: region_to_frame(&r, geom),
                confidence: r.mean(ch),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geom() -> CropGeometry {
        CropGeometry {
            source: BBox::new(0.0, 0.0, 48.0, 64.0),
            input_width: 48,
            input_height: 64,
            stride: 4,
        }
    }

    #[test]
    fn whole_crop_box_fills_channel() {
        let parts = [Part {
            part_id: 1,
            bbox: BBox::new(0.0, 0.0, 48.0, 64.0),
            state_id: 0,
            score: None,
        }];
        let maps = encode_gt_heatmaps(&parts, 2, &geom());
        assert!(maps[..192].iter().all(|&v| v == 0.0));
        assert!(maps[192..].iter().all(|&v| v == 1.0));
    }

    #[test]
    fn larger_blob_wins() {
        let mut map = vec![0f32; 5 * 6];
        map[0] = 1.0;
        for c in [8, 9, 14, 15] {
            map[c] = 0.8;
        }
        let r = largest_region(&map, 5, 6, 0.5).unwrap();
        assert_eq!((r.x0, r.y0, r.x1, r.y1), (2, 1, 3, 2));
        assert!((r.mean(&map) - 0.8).abs() < 1e-6);
    }

    #[test]
    fn empty_channel_emits_nothing() {
        assert!(decode_parts(&vec![0.0; 2 * 16 * 12], 2, &geom(), 0.5).is_empty());
    }

    #[test]
    fn person_crop_keeps_aspect() {
        let g = CropGeometry::for_person(&BBox::new(10.0, 10.0, 30.0, 50.0), 1.1, 48, 64, 4);
        assert!((g.source.height() / g.source.width() - 64.0 / 48.0).abs() < 1e-9);
        assert!((g.source.height() - 44.0).abs() < 1e-9);
        let b = BBox::new(12.0, 15.0, 20.0, 33.0);
        let back = g.crop_to_frame(&g.frame_to_crop(&b));
        assert!((back.x1 - b.x1).abs() < 1e-9 && (back.y2 - b.y2).abs() < 1e-9);
    }

    #[test]
    fn crop_of_uniform_image_is_uniform_inside() {
        let mut img = Image::new(20, 20);
        for y in 0..20 {
            for x in 0..20 {
                img.set_pixel(x, y, [0.4, 0.5, 0.6]);
            }
        }
        let g = CropGeometry {
            source: BBox::new(2.0, 2.0, 18.0, 18.0),
            input_width: 8,
            input_height: 8,
            stride: 4,
        };
        let c = crop_image(&img, &g);
        assert!(c.data.iter().zip([0.4f32, 0.5, 0.6].iter().cycle()).all(|(a, b)| (a - b).abs() < 1e-6));
    }
}
