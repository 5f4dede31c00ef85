//! Inference-timing protocol: 5 warm-up runs, 100 timed runs, mean ± std,
//! with a determinism check on every output.
//!
//! Run with: cargo run --release --example benchmark

use lvseg::eval::{benchmark_inference, render_timing, DEFAULT_TIMED_RUNS, DEFAULT_WARMUP_RUNS};
use lvseg::{init_params, Tensor, UNetConfig};

fn main() -> lvseg::Result<()> {
    let config = UNetConfig {
        depth: 3,
        base_channels: 8,
        in_channels: 1,
        num_labels: 4,
        input_size: 64,
    };
    let params = init_params(&config, 0)?;
    println!(
        "depth {} / base {} U-Net, {} parameters, {}x{} input",
        config.depth,
        config.base_channels,
        params.param_count(),
        config.input_size,
        config.input_size
    );

    let batch = Tensor::zeros(&[4, 1, config.input_size, config.input_size]);
    let report = benchmark_inference(&params, &batch, DEFAULT_TIMED_RUNS, DEFAULT_WARMUP_RUNS)?;
    println!("{}", render_timing(&report));
    Ok(())
}
