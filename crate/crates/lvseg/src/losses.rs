//! Training objective: Lovász-Softmax, a trabeculae-only boundary loss
//! weighted by a signed Euclidean distance map, and their weighted sum.
//!
//! Both loss terms have closed-form gradients with respect to the predicted
//! probabilities, so they are recorded on the tape as scalars with a
//! precomputed backward rule.

use crate::error::{Error, Result};
use crate::mask::{SegMask, NUM_LABELS, TRABECULAE};
use crate::tensor::{NodeId, Tape, Tensor};

/// Coefficients of the combined objective and the label the boundary term is
/// restricted to.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct LossConfig {
    pub lovasz_weight: f64,
    pub boundary_weight: f64,
    pub boundary_label: u8,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lovasz_weight: 2.0,
            boundary_weight: 1.0,
            boundary_label: TRABECULAE,
        }
    }
}

/// Exact signed Euclidean distance map for one label region.
///
/// Positive outside the region (distance to the nearest region pixel),
/// negative inside (minus the distance to the nearest non-region pixel).
/// When one side is empty its distances are capped at the image diagonal.
pub fn signed_distance_map(mask: &SegMask, target_label: u8) -> Vec<f64> {
    let (w, h) = (mask.width(), mask.height());
    let inside: Vec<bool> = mask.labels().iter().map(|&l| l == target_label).collect();
    let cap = ((w * w + h * h) as f64).sqrt();

    let any_inside = inside.iter().any(|&b| b);
    let any_outside = inside.iter().any(|&b| !b);

    let dist_to_region: Vec<f64> = if any_inside {
        squared_edt(&inside, w, h).iter().map(|d| d.sqrt()).collect()
    } else {
        vec![cap; w * h]
    };
    let outside: Vec<bool> = inside.iter().map(|&b| !b).collect();
    let dist_to_complement: Vec<f64> = if any_outside {
        squared_edt(&outside, w, h).iter().map(|d| d.sqrt()).collect()
    } else {
        vec![cap; w * h]
    };

    (0..w * h)
        .map(|i| {
            if inside[i] {
                -dist_to_complement[i]
            } else {
                dist_to_region[i]
            }
        })
        .collect()
}

/// Exact squared Euclidean distance transform to the `true` pixels,
/// two-pass separable lower-envelope method. All arithmetic that reaches the
/// output stays on integers representable in f64, so results are exact.
fn squared_edt(feature: &[bool], w: usize, h: usize) -> Vec<f64> {
    const INF: f64 = 1e20;
    let mut d = vec![0.0f64; w * h];
    // column pass
    let mut col = vec![0.0f64; h];
    for x in 0..w {
        for y in 0..h {
            col[y] = if feature[y * w + x] { 0.0 } else { INF };
        }
        let out = dt1d(&col);
        for y in 0..h {
            d[y * w + x] = out[y];
        }
    }
    // row pass
    let mut row = vec![0.0f64; w];
    for y in 0..h {
        row.copy_from_slice(&d[y * w..(y + 1) * w]);
        let out = dt1d(&row);
        d[y * w..(y + 1) * w].copy_from_slice(&out);
    }
    d
}

/// 1-D squared distance transform (lower envelope of parabolas).
fn dt1d(f: &[f64]) -> Vec<f64> {
    let n = f.len();
    let mut v = vec![0usize; n]; // parabola vertices
    let mut z = vec![0.0f64; n + 1]; // envelope breakpoints
    let mut k = 0usize;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        let mut s;
        loop {
            let p = v[k];
            s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q - p) as f64);
            if s <= z[k] {
                k -= 1;
            } else {
                break;
            }
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    let mut k = 0usize;
    let mut out = vec![0.0f64; n];
    for q in 0..n {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let diff = q as f64 - p as f64;
        out[q] = diff * diff + f[p];
    }
    out
}

/// Gradient of the Jaccard-loss Lovász extension for a descending-sorted
/// ground-truth indicator.
fn lovasz_grad(fg_sorted: &[bool]) -> Vec<f64> {
    let total: usize = fg_sorted.iter().filter(|&&b| b).count();
    let mut grad = vec![0.0; fg_sorted.len()];
    let mut cum_fg = 0usize;
    let mut cum_bg = 0usize;
    let mut prev_jacc = 0.0;
    for (j, &fg) in fg_sorted.iter().enumerate() {
        if fg {
            cum_fg += 1;
        } else {
            cum_bg += 1;
        }
        let inter = (total - cum_fg) as f64;
        let union = (total + cum_bg) as f64;
        let jacc = if union == 0.0 { 0.0 } else { 1.0 - inter / union };
        grad[j] = jacc - prev_jacc;
        prev_jacc = jacc;
    }
    grad
}

fn check_probs_masks(probs: &Tensor, masks: &[SegMask]) -> Result<(usize, usize, usize)> {
    let (n, c, h, w) = probs.dims4()?;
    if c != NUM_LABELS {
        return Err(Error::dimension(format!(
            "expected {} probability channels, got {}",
            NUM_LABELS, c
        )));
    }
    if masks.len() != n {
        return Err(Error::contract(format!(
            "batch has {} probability maps but {} masks",
            n,
            masks.len()
        )));
    }
    for m in masks {
        if m.height() != h || m.width() != w {
            return Err(Error::dimension(format!(
                "mask {}x{} does not match probability map {}x{}",
                m.width(),
                m.height(),
                w,
                h
            )));
        }
    }
    Ok((n, h, w))
}

/// Lovász-Softmax value and gradient w.r.t. the probabilities.
///
/// Per image: for every label present in the ground truth, pixel errors are
/// 1 - p(c) on the label's pixels and p(c) elsewhere; the errors sorted in
/// descending order are dotted with the Lovász-extension gradient of the
/// Jaccard loss. Averaged over present labels, then over the batch.
pub fn lovasz_softmax_value_grad(probs: &Tensor, masks: &[SegMask]) -> Result<(f64, Vec<f64>)> {
    let (n, h, w) = check_probs_masks(probs, masks)?;
    let plane = h * w;
    let p = probs.data();
    let mut total = 0.0;
    let mut grad = vec![0.0; p.len()];

    for (bn, mask) in masks.iter().enumerate() {
        let mut present = [false; NUM_LABELS];
        for &l in mask.labels() {
            present[l as usize] = true;
        }
        let n_present = present.iter().filter(|&&b| b).count();
        let scale = 1.0 / (n_present as f64 * n as f64);

        for (c, _) in present.iter().enumerate().filter(|(_, &b)| b) {
            let base = (bn * NUM_LABELS + c) * plane;
            let mut errors: Vec<(f64, usize, bool)> = (0..plane)
                .map(|i| {
                    let fg = mask.labels()[i] as usize == c;
                    let e = if fg { 1.0 - p[base + i] } else { p[base + i] };
                    (e, i, fg)
                })
                .collect();
            errors.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            let fg_sorted: Vec<bool> = errors.iter().map(|&(_, _, fg)| fg).collect();
            let g = lovasz_grad(&fg_sorted);
            let mut loss_c = 0.0;
            for (j, &(e, i, fg)) in errors.iter().enumerate() {
                loss_c += e * g[j];
                grad[base + i] += scale * if fg { -g[j] } else { g[j] };
            }
            total += scale * loss_c;
        }
    }
    Ok((total, grad))
}

/// Records the Lovász-Softmax loss of `probs` on the tape.
pub fn lovasz_softmax(tape: &mut Tape, probs: NodeId, masks: &[SegMask]) -> Result<NodeId> {
    let (value, grad) = lovasz_softmax_value_grad(tape.value(probs), masks)?;
    tape.scalar_with_grad(probs, value, grad)
}

/// Boundary loss value and gradient: mean over batch and pixels of the
/// ground-truth signed distance map (for the configured label) times the
/// predicted probability of that label. The distance map is constant w.r.t.
/// the probabilities, so the gradient is the scaled map itself.
pub fn boundary_loss_value_grad(
    probs: &Tensor,
    masks: &[SegMask],
    config: &LossConfig,
) -> Result<(f64, Vec<f64>)> {
    let (n, h, w) = check_probs_masks(probs, masks)?;
    let plane = h * w;
    let p = probs.data();
    let c = config.boundary_label as usize;
    let norm = 1.0 / (n * plane) as f64;
    let mut value = 0.0;
    let mut grad = vec![0.0; p.len()];
    for (bn, mask) in masks.iter().enumerate() {
        let sdt = signed_distance_map(mask, config.boundary_label);
        let base = (bn * NUM_LABELS + c) * plane;
        for i in 0..plane {
            value += norm * sdt[i] * p[base + i];
            grad[base + i] = norm * sdt[i];
        }
    }
    Ok((value, grad))
}

/// Records the boundary loss of `probs` on the tape.
pub fn boundary_loss(
    tape: &mut Tape,
    probs: NodeId,
    masks: &[SegMask],
    config: &LossConfig,
) -> Result<NodeId> {
    let (value, grad) = boundary_loss_value_grad(tape.value(probs), masks, config)?;
    tape.scalar_with_grad(probs, value, grad)
}

/// Combined objective: lovasz_weight * Lovász-Softmax + boundary_weight *
/// boundary loss, recorded on the tape and differentiable w.r.t. `probs`.
pub fn combined_loss(
    tape: &mut Tape,
    probs: NodeId,
    masks: &[SegMask],
    config: &LossConfig,
) -> Result<NodeId> {
    let l = lovasz_softmax(tape, probs, masks)?;
    let b = boundary_loss(tape, probs, masks, config)?;
    let wl = tape.scale(l, config.lovasz_weight);
    let wb = tape.scale(b, config.boundary_weight);
    tape.add(wl, wb)
}

/// Plain value of the combined loss, without tape bookkeeping (validation).
pub fn combined_loss_value(probs: &Tensor, masks: &[SegMask], config: &LossConfig) -> Result<f64> {
    let (l, _) = lovasz_softmax_value_grad(probs, masks)?;
    let (b, _) = boundary_loss_value_grad(probs, masks, config)?;
    Ok(config.lovasz_weight * l + config.boundary_weight * b)
}

/// One-hot probability tensor exactly matching a batch of masks.
pub fn one_hot_probs(masks: &[SegMask]) -> Tensor {
    let (h, w) = (masks[0].height(), masks[0].width());
    let plane = h * w;
    let mut data = vec![0.0; masks.len() * NUM_LABELS * plane];
    for (bn, mask) in masks.iter().enumerate() {
        for (i, &l) in mask.labels().iter().enumerate() {
            data[(bn * NUM_LABELS + l as usize) * plane + i] = 1.0;
        }
    }
    Tensor::from_vec(&[masks.len(), NUM_LABELS, h, w], data).expect("consistent shape")
}
