//! PTA quantification on a single slice: region areas, the percentage of
//! trabecular area PTA = 100·TA/(TA+ELA), and the slice-level diagnosis.
//!
//! Run with: cargo run --example quantify_pta

use lvseg::data::{generate_phantom, PhantomParams};
use lvseg::mask::{connected_components, TRABECULAE};
use lvseg::{pta, region_areas};

fn main() -> lvseg::Result<()> {
    for (name, theta) in [("mildly trabeculated", 0.3), ("heavily trabeculated", 0.9)] {
        let phantom = generate_phantom(&PhantomParams::sized(128, theta, 7))?;
        let areas = region_areas(&phantom.mask);
        let result = pta(&areas)?;
        let components = connected_components(&phantom.mask, TRABECULAE);

        println!("{name} slice (theta = {theta}):");
        println!("  external layer  {:6} px", areas.external_layer);
        println!("  internal cavity {:6} px", areas.internal_cavity);
        println!(
            "  trabeculae      {:6} px in {} connected components",
            areas.trabeculae, components.count
        );
        println!(
            "  PTA = {:.2}%  ->  {}\n",
            result.pta,
            if result.positive { "LVNC-positive" } else { "negative" }
        );
    }
    Ok(())
}
