//! Generates a small synthetic phantom dataset and prints its PTA
//! distribution and diagnosis balance.
//!
//! Run with: cargo run --example gen_phantoms

use lvseg::data::{generate_phantom, PhantomParams};

fn main() -> lvseg::Result<()> {
    let n = 60;
    let mut ptas = Vec::with_capacity(n);
    for i in 0..n {
        // sweep the trabeculation knob across its range
        let theta = (i as f64 + 0.5) / n as f64;
        let phantom = generate_phantom(&PhantomParams::sized(64, theta, 100 + i as u64))?;
        ptas.push((theta, phantom.pta));
    }

    println!("theta    PTA%   diagnosis");
    for (theta, pta) in &ptas {
        println!(
            "{theta:.3}   {:6.2}   {}",
            pta.pta,
            if pta.positive { "LVNC-positive" } else { "negative" }
        );
    }
    let positives = ptas.iter().filter(|(_, p)| p.positive).count();
    println!(
        "\n{positives}/{n} slices at or above the {:.1}% PTA threshold",
        lvseg::LVNC_PTA_THRESHOLD
    );
    Ok(())
}
