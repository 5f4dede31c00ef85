//! Verifies the reverse-mode tape against central finite differences on a
//! small U-Net with the combined Lovász + boundary loss.
//!
//! Run with: cargo run --example gradient_check

use lvseg::train::unet_gradient_check;
use lvseg::UNetConfig;

fn main() {
    let config = UNetConfig {
        depth: 2,
        base_channels: 4,
        in_channels: 1,
        num_labels: 4,
        input_size: 8,
    };
    println!("seed   params   max relative error   worst parameter");
    for seed in 0..5 {
        let report = unet_gradient_check(&config, seed, 1e-5);
        let worst = if report.worst_param.is_empty() {
            "- (all |ad - fd| <= 1e-8)".to_string()
        } else {
            report.worst_param.clone()
        };
        println!(
            "{seed:>4}   {:>6}   {:18.3e}   {}",
            report.params_checked, report.max_rel_error, worst
        );
        assert!(report.max_rel_error <= 1e-3, "gradient check failed");
    }
    println!("\nall gradients match finite differences within 1e-3");
}
