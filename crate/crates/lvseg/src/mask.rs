//! Segmentation-mask geometry: region areas, PTA quantification, LVNC
//! diagnosis, connected components, categorical resampling and the
//! resampling-fidelity filter.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tissue label values as stored in mask rasters.
pub const BACKGROUND: u8 = 0;
pub const EXTERNAL_LAYER: u8 = 1;
pub const INTERNAL_CAVITY: u8 = 2;
pub const TRABECULAE: u8 = 3;

pub const NUM_LABELS: usize = 4;

/// PTA at or above this percentage indicates LVNC on a slice.
pub const LVNC_PTA_THRESHOLD: f64 = 27.4;

/// Per-pixel tissue label grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegMask {
    width: usize,
    height: usize,
    labels: Vec<u8>,
}

impl SegMask {
    pub fn new(width: usize, height: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != width * height {
            return Err(Error::dimension(format!(
                "mask {}x{} needs {} labels, got {}",
                width,
                height,
                width * height,
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= NUM_LABELS) {
            return Err(Error::contract(format!("invalid tissue label {}", bad)));
        }
        Ok(SegMask {
            width,
            height,
            labels,
        })
    }

    pub fn filled(width: usize, height: usize, label: u8) -> Self {
        SegMask::new(width, height, vec![label; width * height]).expect("valid fill label")
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.labels[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, label: u8) {
        self.labels[row * self.width + col] = label;
    }

    pub fn rotate90(&self) -> SegMask {
        let mut out = vec![0u8; self.labels.len()];
        // (r, c) -> (c, height-1-r) in the rotated grid of width `height`
        for r in 0..self.height {
            for c in 0..self.width {
                out[c * self.height + (self.height - 1 - r)] = self.get(r, c);
            }
        }
        SegMask {
            width: self.height,
            height: self.width,
            labels: out,
        }
    }
}

/// Pixel counts of the three ventricle regions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionAreas {
    pub trabeculae: usize,
    pub external_layer: usize,
    pub internal_cavity: usize,
}

pub fn region_areas(mask: &SegMask) -> RegionAreas {
    let mut areas = RegionAreas {
        trabeculae: 0,
        external_layer: 0,
        internal_cavity: 0,
    };
    for &l in mask.labels() {
        match l {
            TRABECULAE => areas.trabeculae += 1,
            EXTERNAL_LAYER => areas.external_layer += 1,
            INTERNAL_CAVITY => areas.internal_cavity += 1,
            _ => {}
        }
    }
    areas
}

/// Percentage of trabecular area and the derived slice-level diagnosis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PtaResult {
    /// 100 * TA / (TA + ELA), in percent.
    pub pta: f64,
    /// True when pta >= 27.4 (inclusive threshold).
    pub positive: bool,
}

pub fn pta(areas: &RegionAreas) -> Result<PtaResult> {
    let denom = areas.trabeculae + areas.external_layer;
    if denom == 0 {
        return Err(Error::UndefinedPta);
    }
    let pta = 100.0 * areas.trabeculae as f64 / denom as f64;
    Ok(PtaResult {
        pta,
        positive: pta >= LVNC_PTA_THRESHOLD,
    })
}

/// Connected components of one label under 8-connectivity.
///
/// Component ids are assigned in row-major scan order starting at 1; pixels
/// not carrying `label` get id 0.
pub struct Components {
    pub count: usize,
    pub ids: Vec<u32>,
}

pub fn connected_components(mask: &SegMask, label: u8) -> Components {
    let (w, h) = (mask.width(), mask.height());
    let mut ids = vec![0u32; w * h];
    let mut count = 0u32;
    let mut stack = Vec::new();
    for start in 0..w * h {
        if mask.labels()[start] != label || ids[start] != 0 {
            continue;
        }
        count += 1;
        ids[start] = count;
        stack.push(start);
        while let Some(p) = stack.pop() {
            let (r, c) = (p / w, p % w);
            for dr in -1i64..=1 {
                for dc in -1i64..=1 {
                    if dr == 0 && dc == 0 {
                        continue;
                    }
                    let (nr, nc) = (r as i64 + dr, c as i64 + dc);
                    if nr < 0 || nc < 0 || nr >= h as i64 || nc >= w as i64 {
                        continue;
                    }
                    let np = nr as usize * w + nc as usize;
                    if mask.labels()[np] == label && ids[np] == 0 {
                        ids[np] = count;
                        stack.push(np);
                    }
                }
            }
        }
    }
    Components {
        count: count as usize,
        ids,
    }
}

/// Nearest-neighbor resampling of a categorical mask to `new_size` square.
pub fn resample_mask(mask: &SegMask, new_size: usize) -> SegMask {
    assert!(new_size >= 1, "resample_mask: new_size must be positive");
    let mut labels = vec![0u8; new_size * new_size];
    for r in 0..new_size {
        // sample at the center of each destination pixel
        let sr = ((r as f64 + 0.5) * mask.height() as f64 / new_size as f64) as usize;
        let sr = sr.min(mask.height() - 1);
        for c in 0..new_size {
            let sc = ((c as f64 + 0.5) * mask.width() as f64 / new_size as f64) as usize;
            let sc = sc.min(mask.width() - 1);
            labels[r * new_size + c] = mask.get(sr, sc);
        }
    }
    SegMask {
        width: new_size,
        height: new_size,
        labels,
    }
}

/// Reason a slice fails the resampling-fidelity criteria.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum FidelityViolation {
    /// Relative error of a region percentage or PTA exceeded 5%.
    RelativeError {
        quantity: String,
        original: f64,
        resampled: f64,
        relative_error: f64,
    },
    /// Trabecular connected-component count changed.
    Topology { original: usize, resampled: usize },
    /// PTA undefined on one of the masks.
    UndefinedPta { which: String },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FidelityDecision {
    pub keep: bool,
    pub violations: Vec<FidelityViolation>,
}

const MAX_RELATIVE_ERROR: f64 = 0.05;

fn relative_error(original: f64, resampled: f64) -> f64 {
    if original == 0.0 {
        if resampled == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        (resampled - original).abs() / original.abs()
    }
}

/// Left-ventricle area percentages used by the filter. The denominator is the
/// total ventricle area TA + ELA + ICA.
fn lv_percentages(areas: &RegionAreas) -> (f64, f64) {
    let total = (areas.trabeculae + areas.external_layer + areas.internal_cavity) as f64;
    if total == 0.0 {
        (0.0, 0.0)
    } else {
        (
            100.0 * areas.external_layer as f64 / total,
            100.0 * areas.trabeculae as f64 / total,
        )
    }
}

/// Keep/discard decision for one slice: compares EL percentage, T percentage
/// and PTA before and after resampling (discard above 5% relative error) and
/// requires the trabecular connected-component count to be preserved.
pub fn fidelity_filter(original: &SegMask, resampled: &SegMask) -> FidelityDecision {
    let mut violations = Vec::new();

    let areas_orig = region_areas(original);
    let areas_res = region_areas(resampled);

    let (el_o, t_o) = lv_percentages(&areas_orig);
    let (el_r, t_r) = lv_percentages(&areas_res);
    for (name, o, r) in [("EL percentage", el_o, el_r), ("T percentage", t_o, t_r)] {
        let err = relative_error(o, r);
        if err > MAX_RELATIVE_ERROR {
            violations.push(FidelityViolation::RelativeError {
                quantity: name.to_string(),
                original: o,
                resampled: r,
                relative_error: err,
            });
        }
    }

    match (pta(&areas_orig), pta(&areas_res)) {
        (Ok(p_o), Ok(p_r)) => {
            let err = relative_error(p_o.pta, p_r.pta);
            if err > MAX_RELATIVE_ERROR {
                violations.push(FidelityViolation::RelativeError {
                    quantity: "PTA".to_string(),
                    original: p_o.pta,
                    resampled: p_r.pta,
                    relative_error: err,
                });
            }
        }
        (o, r) => {
            let which = match (o.is_err(), r.is_err()) {
                (true, true) => "both",
                (true, false) => "original",
                _ => "resampled",
            };
            violations.push(FidelityViolation::UndefinedPta {
                which: which.to_string(),
            });
        }
    }

    let cc_o = connected_components(original, TRABECULAE).count;
    let cc_r = connected_components(resampled, TRABECULAE).count;
    if cc_o != cc_r {
        violations.push(FidelityViolation::Topology {
            original: cc_o,
            resampled: cc_r,
        });
    }

    FidelityDecision {
        keep: violations.is_empty(),
        violations,
    }
}
