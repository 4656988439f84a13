use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{acc_p, substitute_ground_truth, MatchConfig};
use crate::dataset::VideoAnnotation;

/// Which pipeline stages are replaced by ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SubstitutionFlags {
    pub actor_detection: bool,
    pub part_det: bool,
    pub state_parsing: bool,
    pub action_parsing: bool,
}

impl SubstitutionFlags {
    pub const NONE: Self = Self::new(false, false, false, false);
    pub const ALL: Self = Self::new(true, true, true, true);

    pub const fn new(actor_detection: bool, part_det: bool, state_parsing: bool, action_parsing: bool) -> Self {
        SubstitutionFlags {
            actor_detection,
            part_det,
            state_parsing,
            action_parsing,
        }
    }

    /// Parses a comma-separated list such as `actor_det,state_parsing`.
    pub fn parse(list: &str) -> Result<Self, String> {
        let mut flags = Self::NONE;
        for item in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            match item {
                "actor_det" | "actor_detection" => flags.actor_detection = true,
                "part_det" => flags.part_det = true,
                "state_parsing" => flags.state_parsing = true,
                "action_parsing" => flags.action_parsing = true,
                other => return Err(format!("unknown substitution flag {other:?}")),
            }
        }
        Ok(flags)
    }
}

/// Flag combinations of the bottleneck table, in row order.
pub const TABLE_ROWS: [SubstitutionFlags; 11] = [
    SubstitutionFlags::new(false, false, false, false),
    SubstitutionFlags::new(true, false, false, false),
    SubstitutionFlags::new(false, true, false, false),
    SubstitutionFlags::new(false, true, true, false),
    SubstitutionFlags::new(false, false, false, true),
    SubstitutionFlags::new(false, false, true, false),
    SubstitutionFlags::new(true, true, false, false),
    SubstitutionFlags::new(true, true, true, false),
    SubstitutionFlags::new(true, false, false, true),
    SubstitutionFlags::new(false, true, true, true),
    SubstitutionFlags::new(true, true, true, true),
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub flags: SubstitutionFlags,
    pub acc_p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosisGrid {
    pub rows: Vec<GridRow>,
}

/// Acc^p under every row of [`TABLE_ROWS`].
pub fn bottleneck_grid(
    predictions: &[VideoAnnotation],
    ground_truth: &[VideoAnnotation],
    cfg: &MatchConfig,
) -> DiagnosisGrid {
    let rows = TABLE_ROWS
        .iter()
        .map(|&flags| {
            let substituted = substitute_ground_truth(predictions, ground_truth, flags, cfg);
            GridRow {
                flags,
                acc_p: acc_p(&substituted, ground_truth, cfg),
            }
        })
        .collect();
    DiagnosisGrid { rows }
}

impl DiagnosisGrid {
    /// Aligned text table, one row per flag combination.
    pub fn to_table(&self) -> String {
        let mark = |b: bool| if b { "✓" } else { " " };
        let mut out = String::new();
        let _ = writeln!(out, "| Actor detection | part_det | state_parsing | Action parsing |   Acc^p |");
        let _ = writeln!(out, "|-----------------|----------|---------------|----------------|---------|");
        for row in &self.rows {
            let f = row.flags;
            let _ = writeln!(
                out,
                "| {:^15} | {:^8} | {:^13} | {:^14} | {:>6.2}% |",
                mark(f.actor_detection),
                mark(f.part_det),
                mark(f.state_parsing),
                mark(f.action_parsing),
                100.0 * row.acc_p
            );
        }
        out
    }

    /// Minimal SVG bar chart of Acc^p per row.
    pub fn to_svg(&self) -> String {
        let (bar, gap, height) = (36.0, 12.0, 220.0);
        let width = self.rows.len() as f64 * (bar + gap) + gap;
        let mut svg = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{}\">\n",
            height + 40.0
        );
        for (i, row) in self.rows.iter().enumerate() {
            let x = gap + i as f64 * (bar + gap);
            let h = row.acc_p * height;
            let f = row.flags;
            let label: String = [
                (f.actor_detection, 'D'),
                (f.part_det, 'P'),
                (f.state_parsing, 'S'),
                (f.action_parsing, 'A'),
            ]
            .iter()
            .map(|(on, c)| if *on { *c } else { '-' })
            .collect();
            let _ = writeln!(
                svg,
                "  <rect x=\"{x}\" y=\"{:.2}\" width=\"{bar}\" height=\"{h:.2}\" fill=\"#4a7ab5\"/>",
                height - h + 10.0
            );
            let _ = writeln!(
                svg,
                "  <text x=\"{:.1}\" y=\"{}\" font-size=\"10\" text-anchor=\"middle\">{label}</text>",
                x + bar / 2.0,
                height + 25.0
            );
            let _ = writeln!(
                svg,
                "  <text x=\"{:.1}\" y=\"{:.2}\" font-size=\"9\" text-anchor=\"middle\">{:.1}</text>",
                x + bar / 2.0,
                height - h + 6.0,
                100.0 * row.acc_p
            );
        }
        svg.push_str("</svg>\n");
        svg
    }
}
