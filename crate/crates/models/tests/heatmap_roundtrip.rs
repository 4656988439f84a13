//! Binary part heatmaps: encoding matches a cell-center oracle and decoding
//! recovers every box to within one cell.

use dap_core::dataset::Part;
use dap_core::BBox;
use dap_models::heatmap::{decode_parts, encode_gt_heatmaps, CropGeometry};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Layout {
    geom: CropGeometry,
    /// Part boxes in heatmap-cell units, one per channel.
    cells: Vec<BBox>,
    parts: Vec<Part>,
}

fn layout(seed: u64) -> Layout {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let stride = [2, 4, 8][rng.random_range(0..3)];
    let rows = rng.random_range(6..20);
    let cols = rng.random_range(6..16);
    let (x, y) = (rng.random_range(-20.0..60.0), rng.random_range(-20.0..60.0));
    let w = rng.random_range(10.0..80.0);
    let h = w * rows as f64 / cols as f64;
    let geom = CropGeometry {
        source: BBox::new(x, y, x + w, y + h),
        input_width: cols * stride,
        input_height: rows * stride,
        stride,
    };
    let k = rng.random_range(1..7);
    let mut cells = Vec::new();
    let mut parts = Vec::new();
    for part_id in 0..k {
        let bw = rng.random_range(2.0..cols as f64);
        let bh = rng.random_range(2.0..rows as f64);
        let x1 = rng.random_range(0.0..=cols as f64 - bw);
        let y1 = rng.random_range(0.0..=rows as f64 - bh);
        let c = BBox::new(x1, y1, x1 + bw, y1 + bh);
        let s = stride as f64;
        let frame = geom.crop_to_frame(&BBox::new(c.x1 * s, c.y1 * s, c.x2 * s, c.y2 * s));
        cells.push(c);
        parts.push(Part {
            part_id,
            bbox: frame,
            state_id: 0,
            score: None,
        });
    }
    Layout { geom, cells, parts }
}

fn check(seed: u64) {
    let l = layout(seed);
    let (rows, cols) = l.geom.heatmap_size();
    let k = l.parts.len();
    let maps = encode_gt_heatmaps(&l.parts, k, &l.geom);
    assert_eq!(maps.len(), k * rows * cols);
    for (ch, c) in l.cells.iter().enumerate() {
        for i in 0..rows {
            for j in 0..cols {
                let (cx, cy) = (j as f64 + 0.5, i as f64 + 0.5);
                let inside = cx >= c.x1 && cx < c.x2 && cy >= c.y1 && cy < c.y2;
                let v = maps[ch * rows * cols + i * cols + j];
                assert!(v == 0.0 || v == 1.0);
                assert_eq!(v == 1.0, inside, "seed {seed} channel {ch} cell ({i}, {j})");
            }
        }
    }
    let decoded = decode_parts(&maps, k, &l.geom, 0.5);
    assert_eq!(decoded.len(), k, "seed {seed}");
    for (d, c) in decoded.iter().zip(&l.cells) {
        let got = l.geom.frame_to_cells(&d.bbox);
        for (a, b) in [(got.x1, c.x1), (got.y1, c.y1), (got.x2, c.x2), (got.y2, c.y2)] {
            assert!((a - b).abs() <= 1.0 + 1e-9, "seed {seed}: {got:?} vs {c:?}");
        }
        assert_eq!(d.confidence, 1.0);
    }
}

pub fn two_hundred_layouts_round_trip() {
    for seed in 0..200 {
        check(seed);
    }
}

proptest! {
    #[test]
    fn layouts_round_trip(seed in any::<u64>()) {
        check(seed);
    }
}

// Plain functions above are shared with the acceptance suite.
mod fixed {
    #[test]
    fn two_hundred_layouts_round_trip() {
        super::two_hundred_layouts_round_trip()
    }
}
