//! Resampling-fidelity filtering: masks whose region percentages, PTA, or
//! trabecular topology change too much when downsampled from full
//! resolution are discarded before training.
//!
//! Run with: cargo run --example fidelity_filter

use lvseg::data::{generate_phantom, PhantomParams};
use lvseg::mask::{connected_components, fidelity_filter, resample_mask, SegMask, TRABECULAE};

fn show(name: &str, original: &SegMask, resampled: &SegMask) {
    let decision = fidelity_filter(original, resampled);
    println!(
        "{name}: trabecular components {} -> {}, decision: {}",
        connected_components(original, TRABECULAE).count,
        connected_components(resampled, TRABECULAE).count,
        if decision.keep { "keep" } else { "discard" }
    );
    for v in &decision.violations {
        println!("  violation: {v:?}");
    }
}

fn main() -> lvseg::Result<()> {
    // a well-behaved phantom survives 2x downsampling
    let phantom = generate_phantom(&PhantomParams::sized(128, 0.6, 3))?;
    let resampled = resample_mask(&phantom.mask, 64);
    show("smooth phantom", &phantom.mask, &resampled);

    // a 1-pixel bridge between two trabecular blobs sits on a row that
    // center-sampling skips, so downsampling splits the component
    let mut bridged = SegMask::filled(128, 128, lvseg::mask::EXTERNAL_LAYER);
    for r in 40..60 {
        for c in 30..50 {
            bridged.set(r, c, TRABECULAE);
        }
        for c in 80..100 {
            bridged.set(r, c, TRABECULAE);
        }
    }
    for c in 50..80 {
        bridged.set(48, c, TRABECULAE); // the fragile bridge
    }
    let resampled = resample_mask(&bridged, 64);
    show("bridged blobs", &bridged, &resampled);
    Ok(())
}
