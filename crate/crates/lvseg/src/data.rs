//! Dataset plumbing: synthetic phantom generation, slice normalization,
//! rotation augmentation, patient-stratified fold construction, and the
//! raster/manifest file formats.
//!
//! Images are 16-bit single-channel PGM rasters; masks are 8-bit PGM rasters
//! with the label values stored verbatim. Manifests are JSON-lines, one
//! `SliceRecord` per line.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{
    pta, region_areas, PtaResult, SegMask, BACKGROUND, EXTERNAL_LAYER, INTERNAL_CAVITY, NUM_LABELS,
    TRABECULAE,
};

/// One image/mask pair with its patient and ground-truth diagnosis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceRecord {
    pub slice_id: String,
    pub patient_id: String,
    pub image_path: String,
    pub mask_path: String,
    /// Ground-truth PTA >= 27.4 for this slice.
    pub lvnc_positive: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slice_position: Option<String>,
    /// Optional full-resolution source mask, consumed by the fidelity filter.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_mask_path: Option<String>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub pixel_size_mm: Option<f64>,
    pub provenance: Option<String>,
}

#[derive(Debug, Clone, Default)]
pub struct DatasetManifest {
    pub records: Vec<SliceRecord>,
    pub metadata: DatasetMeta,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for r in &self.records {
            if !seen.insert(&r.slice_id) {
                return Err(Error::contract(format!("duplicate slice_id {}", r.slice_id)));
            }
        }
        Ok(())
    }
}

/// Writes the manifest as JSON lines; dataset metadata goes to a sibling
/// `<name>.meta.json` file when non-default.
pub fn save_manifest(path: &Path, manifest: &DatasetManifest) -> Result<()> {
    let p = path.display().to_string();
    let file = File::create(path).map_err(|e| Error::io(&p, e))?;
    let mut w = BufWriter::new(file);
    for r in &manifest.records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(&p, e))?;
    }
    w.flush().map_err(|e| Error::io(&p, e))?;
    if manifest.metadata.pixel_size_mm.is_some() || manifest.metadata.provenance.is_some() {
        let meta_path = path.with_extension("meta.json");
        let mp = meta_path.display().to_string();
        let f = File::create(&meta_path).map_err(|e| Error::io(&mp, e))?;
        serde_json::to_writer_pretty(BufWriter::new(f), &manifest.metadata)?;
    }
    Ok(())
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let p = path.display().to_string();
    let file = File::open(path).map_err(|e| Error::io(&p, e))?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&p, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: SliceRecord = serde_json::from_str(&line)
            .map_err(|e| Error::format(&p, format!("line {}: {}", i + 1, e)))?;
        records.push(record);
    }
    let meta_path = path.with_extension("meta.json");
    let metadata = if meta_path.exists() {
        let mp = meta_path.display().to_string();
        let f = File::open(&meta_path).map_err(|e| Error::io(&mp, e))?;
        serde_json::from_reader(BufReader::new(f))?
    } else {
        DatasetMeta::default()
    };
    let manifest = DatasetManifest { records, metadata };
    manifest.validate()?;
    Ok(manifest)
}

/// 16-bit single-channel image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SliceImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u16>,
}

// ---------------------------------------------------------------------------
// PGM rasters

fn pgm_header(reader: &mut impl Read, path: &str) -> Result<(usize, usize, u32)> {
    // P5, then width, height, maxval as whitespace-separated tokens with
    // optional '#' comments
    let mut bytes = Vec::new();
    let mut buf = [0u8; 1];
    let mut fields = Vec::new();
    let mut in_comment = false;
    let mut token = String::new();
    while fields.len() < 4 {
        reader
            .read_exact(&mut buf)
            .map_err(|_| Error::format(path, "truncated PGM header"))?;
        let c = buf[0] as char;
        bytes.push(buf[0]);
        if in_comment {
            if c == '\n' {
                in_comment = false;
            }
            continue;
        }
        if c == '#' {
            in_comment = true;
            continue;
        }
        if c.is_whitespace() {
            if !token.is_empty() {
                fields.push(std::mem::take(&mut token));
            }
        } else {
            token.push(c);
        }
    }
    if fields[0] != "P5" {
        return Err(Error::format(path, "not a binary PGM (P5) file"));
    }
    let parse = |s: &str| -> Result<u32> {
        s.parse()
            .map_err(|_| Error::format(path, format!("bad header field {:?}", s)))
    };
    Ok((parse(&fields[1])? as usize, parse(&fields[2])? as usize, parse(&fields[3])?))
}

/// Writes a 16-bit PGM (maxval 65535, big-endian samples per the format).
pub fn save_image(path: &Path, image: &SliceImage) -> Result<()> {
    let p = path.display().to_string();
    let file = File::create(path).map_err(|e| Error::io(&p, e))?;
    let mut w = BufWriter::new(file);
    write!(w, "P5\n{} {}\n65535\n", image.width, image.height).map_err(|e| Error::io(&p, e))?;
    for &v in &image.pixels {
        w.write_all(&v.to_be_bytes()).map_err(|e| Error::io(&p, e))?;
    }
    w.flush().map_err(|e| Error::io(&p, e))
}

pub fn load_image(path: &Path) -> Result<SliceImage> {
    let p = path.display().to_string();
    let file = File::open(path).map_err(|e| Error::io(&p, e))?;
    let mut r = BufReader::new(file);
    let (width, height, maxval) = pgm_header(&mut r, &p)?;
    if maxval != 65535 {
        return Err(Error::format(&p, format!("expected 16-bit image (maxval 65535), got {}", maxval)));
    }
    let mut raw = vec![0u8; width * height * 2];
    r.read_exact(&mut raw)
        .map_err(|_| Error::format(&p, "truncated raster"))?;
    let pixels = raw
        .chunks_exact(2)
        .map(|c| u16::from_be_bytes([c[0], c[1]]))
        .collect();
    Ok(SliceImage {
        width,
        height,
        pixels,
    })
}

/// Writes a mask as an 8-bit PGM with label values stored verbatim.
pub fn save_mask(path: &Path, mask: &SegMask) -> Result<()> {
    let p = path.display().to_string();
    let file = File::create(path).map_err(|e| Error::io(&p, e))?;
    let mut w = BufWriter::new(file);
    write!(w, "P5\n{} {}\n255\n", mask.width(), mask.height()).map_err(|e| Error::io(&p, e))?;
    w.write_all(mask.labels()).map_err(|e| Error::io(&p, e))?;
    w.flush().map_err(|e| Error::io(&p, e))
}

pub fn load_mask(path: &Path) -> Result<SegMask> {
    let p = path.display().to_string();
    let file = File::open(path).map_err(|e| Error::io(&p, e))?;
    let mut r = BufReader::new(file);
    let (width, height, maxval) = pgm_header(&mut r, &p)?;
    if maxval != 255 {
        return Err(Error::format(&p, format!("expected 8-bit mask (maxval 255), got {}", maxval)));
    }
    let mut labels = vec![0u8; width * height];
    r.read_exact(&mut labels)
        .map_err(|_| Error::format(&p, "truncated raster"))?;
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= NUM_LABELS) {
        return Err(Error::format(&p, format!("invalid tissue label {}", bad)));
    }
    SegMask::new(width, height, labels)
}

/// Loads an image/mask pair, rejecting size mismatches.
pub fn load_slice(image_path: &Path, mask_path: &Path) -> Result<(SliceImage, SegMask)> {
    let image = load_image(image_path)?;
    let mask = load_mask(mask_path)?;
    if image.width != mask.width() || image.height != mask.height() {
        return Err(Error::format(
            image_path.display().to_string(),
            format!(
                "image {}x{} does not match mask {}x{}",
                image.width,
                image.height,
                mask.width(),
                mask.height()
            ),
        ));
    }
    Ok((image, mask))
}

// ---------------------------------------------------------------------------
// Phantom generation

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TissueIntensities {
    pub background: f64,
    pub external_layer: f64,
    pub internal_cavity: f64,
    pub trabeculae: f64,
}

impl Default for TissueIntensities {
    fn default() -> Self {
        TissueIntensities {
            background: 0.20,
            external_layer: 0.55,
            internal_cavity: 0.85,
            trabeculae: 0.40,
        }
    }
}

/// Geometry and appearance knobs of one synthetic short-axis slice.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhantomParams {
    pub size: usize,
    pub center: (f64, f64),
    pub inner_radius: f64,
    pub outer_radius: f64,
    /// Trabeculation intensity in [0, 1]: scales protrusion count and width.
    pub theta: f64,
    pub intensities: TissueIntensities,
    pub noise_std: f64,
    pub seed: u64,
}

impl PhantomParams {
    /// Canonical geometry for a given image size.
    pub fn sized(size: usize, theta: f64, seed: u64) -> Self {
        let s = size as f64;
        PhantomParams {
            size,
            center: (s / 2.0, s / 2.0),
            inner_radius: 0.30 * s,
            outer_radius: 0.40 * s,
            theta,
            intensities: TissueIntensities::default(),
            noise_std: 0.04,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.inner_radius
            && self.inner_radius < self.outer_radius
            && self.outer_radius < self.size as f64 / 2.0)
        {
            return Err(Error::contract(format!(
                "need 0 < inner ({}) < outer ({}) < size/2 ({})",
                self.inner_radius,
                self.outer_radius,
                self.size as f64 / 2.0
            )));
        }
        if !(0.0..=1.0).contains(&self.theta) {
            return Err(Error::contract("theta must be in [0, 1]"));
        }
        Ok(())
    }
}

pub struct Phantom {
    pub image: Vec<u16>,
    pub mask: SegMask,
    pub pta: PtaResult,
}

fn wrap_angle(a: f64) -> f64 {
    let mut a = a % (2.0 * PI);
    if a > PI {
        a -= 2.0 * PI;
    }
    if a < -PI {
        a += 2.0 * PI;
    }
    a
}

/// Generates one (image, mask, PTA) triple. The mask is the exact generator
/// geometry, so the reported PTA is exactly consistent with the mask.
pub fn generate_phantom(params: &PhantomParams) -> Result<Phantom> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let s = params.size;
    let (cy, cx) = params.center;

    // smooth wall-boundary perturbation
    let (a1, p1) = (rng.gen_range(0.0..0.05), rng.gen_range(0.0..2.0 * PI));
    let (a2, p2) = (rng.gen_range(0.0..0.04), rng.gen_range(0.0..2.0 * PI));
    let r_outer = |phi: f64| params.outer_radius * (1.0 + a1 * (2.0 * phi + p1).sin());
    let r_inner =
        |phi: f64| params.inner_radius * (1.0 + a2 * (3.0 * phi + p2).sin());

    // radial trabecular protrusions from the wall into the cavity
    let n_spikes = (params.theta * 14.0).round() as usize;
    let spikes: Vec<(f64, f64, f64)> = (0..n_spikes)
        .map(|_| {
            let angle = rng.gen_range(-PI..PI);
            let len_frac = rng.gen_range(0.45..0.95);
            let halfwidth = 0.06 + 0.13 * params.theta * rng.gen_range(0.7..1.3);
            (angle, len_frac, halfwidth)
        })
        .collect();

    let mut labels = vec![BACKGROUND; s * s];
    for row in 0..s {
        for col in 0..s {
            let dy = row as f64 + 0.5 - cy;
            let dx = col as f64 + 0.5 - cx;
            let rho = (dy * dy + dx * dx).sqrt();
            let phi = dy.atan2(dx);
            let (r_in, r_out) = (r_inner(phi), r_outer(phi));
            if rho > r_out {
                continue;
            }
            if rho >= r_in {
                labels[row * s + col] = EXTERNAL_LAYER;
                continue;
            }
            let trabecular = spikes.iter().any(|&(angle, len_frac, halfwidth)| {
                wrap_angle(phi - angle).abs() <= halfwidth && rho >= r_in * (1.0 - len_frac)
            });
            labels[row * s + col] = if trabecular { TRABECULAE } else { INTERNAL_CAVITY };
        }
    }
    let mask = SegMask::new(s, s, labels)?;
    let pta_result = pta(&region_areas(&mask))?;

    // intensity model: tissue mean * smooth bias field + gaussian noise
    let noise = Normal::new(0.0, params.noise_std).expect("valid std");
    let (bx, by) = (rng.gen_range(0.0..2.0 * PI), rng.gen_range(0.0..2.0 * PI));
    let bias_amp = rng.gen_range(0.02..0.08);
    let mut image = vec![0u16; s * s];
    for row in 0..s {
        for col in 0..s {
            let mean = match mask.labels()[row * s + col] {
                EXTERNAL_LAYER => params.intensities.external_layer,
                INTERNAL_CAVITY => params.intensities.internal_cavity,
                TRABECULAE => params.intensities.trabeculae,
                _ => params.intensities.background,
            };
            let bias = 1.0
                + bias_amp
                    * (2.0 * PI * col as f64 / s as f64 + bx).sin()
                    * (2.0 * PI * row as f64 / s as f64 + by).sin();
            let v = (mean * bias + noise.sample(&mut rng)).clamp(0.0, 1.0);
            image[row * s + col] = (v * 65535.0).round() as u16;
        }
    }

    Ok(Phantom {
        image,
        mask,
        pta: pta_result,
    })
}

// ---------------------------------------------------------------------------
// Normalization and augmentation

/// Slice-wise standardization to zero mean and unit variance.
pub fn normalize(image: &[f64]) -> Result<Vec<f64>> {
    let n = image.len() as f64;
    let mean = image.iter().sum::<f64>() / n;
    let var = image.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    if var == 0.0 {
        return Err(Error::Degenerate("constant image cannot be normalized".into()));
    }
    let std = var.sqrt();
    Ok(image.iter().map(|v| (v - mean) / std).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rotation {
    None,
    R90,
    R180,
    R270,
}

impl Rotation {
    /// The training augmentation policy: with probability 0.25 one of the
    /// three quarter-turns, chosen uniformly; identity otherwise.
    pub fn draw(rng: &mut impl Rng) -> Rotation {
        if rng.gen::<f64>() < 0.25 {
            match rng.gen_range(0..3) {
                0 => Rotation::R90,
                1 => Rotation::R180,
                _ => Rotation::R270,
            }
        } else {
            Rotation::None
        }
    }
}

/// Rotates a square row-major image by the given quarter-turn.
pub fn rotate_image(data: &[f64], size: usize, rot: Rotation) -> Vec<f64> {
    assert_eq!(data.len(), size * size, "rotate_image expects a square image");
    let mut out = vec![0.0; data.len()];
    for r in 0..size {
        for c in 0..size {
            let (nr, nc) = match rot {
                Rotation::None => (r, c),
                Rotation::R90 => (c, size - 1 - r),
                Rotation::R180 => (size - 1 - r, size - 1 - c),
                Rotation::R270 => (size - 1 - c, r),
            };
            out[nr * size + nc] = data[r * size + c];
        }
    }
    out
}

impl SegMask {
    /// Quarter-turn rotation with the same index map as [`rotate_image`].
    pub fn rotated(&self, rot: Rotation) -> SegMask {
        match rot {
            Rotation::None => self.clone(),
            Rotation::R90 => self.rotate90(),
            Rotation::R180 => self.rotate90().rotate90(),
            Rotation::R270 => self.rotate90().rotate90().rotate90(),
        }
    }
}

/// Joint image/mask augmentation. Errors on non-square inputs.
pub fn augment(
    image: &[f64],
    mask: &SegMask,
    rng: &mut impl Rng,
) -> Result<(Vec<f64>, SegMask, Rotation)> {
    if mask.width() != mask.height() || image.len() != mask.width() * mask.height() {
        return Err(Error::contract("augment requires square, matching image and mask"));
    }
    let rot = Rotation::draw(rng);
    Ok((rotate_image(image, mask.width(), rot), mask.rotated(rot), rot))
}

// ---------------------------------------------------------------------------
// Stratified folds

#[derive(Debug)]
pub struct FoldAssignment {
    /// Per-fold indices into the manifest's record list.
    pub folds: Vec<Vec<usize>>,
    pub warnings: Vec<String>,
}

/// Patient-disjoint stratified k-fold split.
///
/// Patients are shuffled (seeded), stably sorted by positive-slice count then
/// total slices, and greedily assigned: patients carrying positives go to the
/// fold with the fewest positives so far, the rest to the smallest fold.
pub fn stratified_kfold(records: &[SliceRecord], k: usize, seed: u64) -> Result<FoldAssignment> {
    if k < 2 {
        return Err(Error::contract("need k >= 2 folds"));
    }
    // group record indices per patient, in first-appearance order
    let mut patients: Vec<(String, Vec<usize>)> = Vec::new();
    let mut index = std::collections::HashMap::new();
    for (i, r) in records.iter().enumerate() {
        match index.get(&r.patient_id) {
            Some(&pi) => {
                let slot: &mut (String, Vec<usize>) = &mut patients[pi];
                slot.1.push(i);
            }
            None => {
                index.insert(r.patient_id.clone(), patients.len());
                patients.push((r.patient_id.clone(), vec![i]));
            }
        }
    }
    if patients.len() < k {
        return Err(Error::contract(format!(
            "need at least {} patients for {} folds, got {}",
            k,
            k,
            patients.len()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    use rand::seq::SliceRandom;
    patients.shuffle(&mut rng);
    let pos_count = |idxs: &[usize]| idxs.iter().filter(|&&i| records[i].lvnc_positive).count();
    patients.sort_by_key(|(_, idxs)| std::cmp::Reverse((pos_count(idxs), idxs.len())));

    let mut folds: Vec<Vec<usize>> = vec![Vec::new(); k];
    let mut fold_pos = vec![0usize; k];
    for (_, idxs) in &patients {
        let p = pos_count(idxs);
        let target = if p > 0 {
            (0..k)
                .min_by_key(|&f| (fold_pos[f], folds[f].len(), f))
                .unwrap()
        } else {
            (0..k).min_by_key(|&f| (folds[f].len(), f)).unwrap()
        };
        fold_pos[target] += p;
        folds[target].extend_from_slice(idxs);
    }

    // flag folds whose positive rate strays more than 5 pp from global
    let total_pos: usize = fold_pos.iter().sum();
    let global_rate = total_pos as f64 / records.len().max(1) as f64;
    let mut warnings = Vec::new();
    for (f, fold) in folds.iter().enumerate() {
        if fold.is_empty() {
            warnings.push(format!("fold {} is empty", f));
            continue;
        }
        let rate = fold_pos[f] as f64 / fold.len() as f64;
        if (rate - global_rate).abs() > 0.05 {
            warnings.push(format!(
                "fold {} positive rate {:.3} deviates from global {:.3} by more than 5 pp",
                f, rate, global_rate
            ));
        }
    }
    Ok(FoldAssignment { folds, warnings })
}
