//! Exact signed Euclidean distance transform, the ingredient of the
//! boundary loss: positive outside the target region, negative inside.
//!
//! Run with: cargo run --example distance_transform

use lvseg::losses::signed_distance_map;
use lvseg::mask::{SegMask, BACKGROUND, TRABECULAE};

fn main() -> lvseg::Result<()> {
    // a small blob of trabeculae in a 12x12 field
    let mut mask = SegMask::filled(12, 12, BACKGROUND);
    for (r, c) in [(4, 4), (4, 5), (5, 4), (5, 5), (5, 6), (6, 5), (8, 9)] {
        mask.set(r, c, TRABECULAE);
    }

    let sdt = signed_distance_map(&mask, TRABECULAE);
    println!("signed distances to the trabecular region (negative = inside):\n");
    for r in 0..12 {
        let row: Vec<String> = (0..12).map(|c| format!("{:5.1}", sdt[r * 12 + c])).collect();
        println!("{}", row.join(" "));
    }
    Ok(())
}
