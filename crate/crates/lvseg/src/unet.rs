//! Vanilla U-Net: configuration, Kaiming initialization, tape forward pass,
//! argmax prediction and checkpoint I/O.
//!
//! Encoder level `l` carries `base_channels * 2^l` channels with two 3x3
//! convolutions, 2x2 max pooling between levels, a two-conv bottleneck,
//! nearest-neighbor upsampling with skip concatenation on the way up, and a
//! final 1x1 convolution to per-pixel label logits.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{SegMask, NUM_LABELS};
use crate::tensor::{NodeId, Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UNetConfig {
    /// Number of encoder/decoder levels.
    pub depth: usize,
    /// Channels at the first encoder level; doubles per level down.
    pub base_channels: usize,
    pub in_channels: usize,
    pub num_labels: usize,
    /// Square spatial extent; must be divisible by 2^depth.
    pub input_size: usize,
}

impl UNetConfig {
    /// CPU-trainable default used throughout the toolkit.
    pub fn desk_default() -> Self {
        UNetConfig {
            depth: 3,
            base_channels: 8,
            in_channels: 1,
            num_labels: NUM_LABELS,
            input_size: 64,
        }
    }

    /// Full-scale configuration matching the published parameter budget.
    pub fn full_scale() -> Self {
        UNetConfig {
            depth: 4,
            base_channels: 64,
            in_channels: 1,
            num_labels: NUM_LABELS,
            input_size: 256,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.base_channels == 0 || self.in_channels == 0 {
            return Err(Error::contract("depth, base_channels and in_channels must be positive"));
        }
        if self.num_labels < 2 {
            return Err(Error::contract("need at least 2 labels"));
        }
        if self.input_size % (1 << self.depth) != 0 {
            return Err(Error::contract(format!(
                "input_size {} not divisible by 2^depth = {}",
                self.input_size,
                1 << self.depth
            )));
        }
        Ok(())
    }

    /// (in_channels, out_channels, kernel_extent) per convolution, in the
    /// declared parameter order: encoder, bottleneck, decoder, final 1x1.
    pub fn layer_plan(&self) -> Vec<(usize, usize, usize)> {
        let ch = |l: usize| self.base_channels << l;
        let mut plan = Vec::new();
        let mut prev = self.in_channels;
        for l in 0..self.depth {
            plan.push((prev, ch(l), 3));
            plan.push((ch(l), ch(l), 3));
            prev = ch(l);
        }
        plan.push((prev, ch(self.depth), 3));
        plan.push((ch(self.depth), ch(self.depth), 3));
        prev = ch(self.depth);
        for l in (0..self.depth).rev() {
            plan.push((prev + ch(l), ch(l), 3));
            plan.push((ch(l), ch(l), 3));
            prev = ch(l);
        }
        plan.push((prev, self.num_labels, 1));
        plan
    }

    pub fn param_count(&self) -> usize {
        self.layer_plan()
            .iter()
            .map(|&(cin, cout, k)| cout * cin * k * k + cout)
            .sum()
    }
}

#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub kernel: Tensor,
    pub bias: Tensor,
}

/// All learnable parameters, in the order of [`UNetConfig::layer_plan`].
#[derive(Debug, Clone)]
pub struct UNetParams {
    pub config: UNetConfig,
    pub layers: Vec<ConvLayer>,
}

/// Kaiming-normal initialization: kernel entries ~ N(0, 2 / fan_in) with
/// fan_in = cin * kh * kw; biases zero. Deterministic per seed.
///
/// The final 1x1 classification conv is zero-initialized instead, so training
/// starts from uniform class probabilities. The Lovász-Softmax gradient on a
/// class scales with its predicted probability; a class that a random head
/// happens to suppress at the start gets no pull and can stay dead forever,
/// while a uniform start gives every class a gradient from step one.
pub fn init_params(config: &UNetConfig, seed: u64) -> Result<UNetParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::new();
    let plan = config.layer_plan();
    let last = plan.len() - 1;
    for (i, (cin, cout, k)) in plan.into_iter().enumerate() {
        let kernel = if i == last {
            Tensor::zeros(&[cout, cin, k, k])
        } else {
            let fan_in = cin * k * k;
            let std = (2.0 / fan_in as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("valid std");
            let data: Vec<f64> = (0..cout * cin * k * k)
                .map(|_| normal.sample(&mut rng))
                .collect();
            Tensor::from_vec(&[cout, cin, k, k], data)?
        };
        layers.push(ConvLayer {
            kernel,
            bias: Tensor::zeros(&[cout]),
        });
    }
    Ok(UNetParams {
        config: *config,
        layers,
    })
}

impl UNetParams {
    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.kernel.numel() + l.bias.numel())
            .sum()
    }

    /// Registers every layer as tape leafs and runs the forward pass.
    /// Returns the logits node plus (kernel, bias) node ids per layer so the
    /// caller can read gradients after backward.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        input: NodeId,
        requires_grad: bool,
    ) -> Result<(NodeId, Vec<(NodeId, NodeId)>)> {
        let cfg = &self.config;
        let (_, cin, h, w) = tape.value(input).dims4()?;
        if cin != cfg.in_channels || h != cfg.input_size || w != cfg.input_size {
            return Err(Error::dimension(format!(
                "expected input {}x{}x{}, got {}x{}x{}",
                cfg.in_channels, cfg.input_size, cfg.input_size, cin, h, w
            )));
        }

        let ids: Vec<(NodeId, NodeId)> = self
            .layers
            .iter()
            .map(|l| {
                (
                    tape.leaf(l.kernel.clone(), requires_grad),
                    tape.leaf(l.bias.clone(), requires_grad),
                )
            })
            .collect();

        let mut li = 0usize;
        let mut conv_block = |tape: &mut Tape, x: NodeId, padding: usize| -> Result<NodeId> {
            let (k, b) = ids[li];
            li += 1;
            let c = tape.conv2d(x, k, b, padding)?;
            Ok(tape.relu(c))
        };

        let mut x = input;
        let mut skips = Vec::new();
        for _ in 0..cfg.depth {
            x = conv_block(tape, x, 1)?;
            x = conv_block(tape, x, 1)?;
            skips.push(x);
            x = tape.maxpool2(x)?;
        }
        x = conv_block(tape, x, 1)?;
        x = conv_block(tape, x, 1)?;
        for skip in skips.into_iter().rev() {
            x = tape.upsample2(x)?;
            x = tape.concat_channels(x, skip)?;
            x = conv_block(tape, x, 1)?;
            x = conv_block(tape, x, 1)?;
        }
        // final 1x1 projection to logits, no activation
        let (k, b) = ids[li];
        let logits = tape.conv2d(x, k, b, 0)?;
        Ok((logits, ids))
    }

    /// Per-pixel argmax segmentation. Ties break toward the lowest label.
    pub fn predict(&self, batch: &Tensor) -> Result<Vec<SegMask>> {
        let mut tape = Tape::new();
        let input = tape.leaf(batch.clone(), false);
        let (logits, _) = self.forward_on_tape(&mut tape, input, false)?;
        let out = tape.value(logits);
        let (n, c, h, w) = out.dims4()?;
        let plane = h * w;
        let mut masks = Vec::with_capacity(n);
        for bn in 0..n {
            let mut labels = vec![0u8; plane];
            for p in 0..plane {
                let mut best = out.data()[(bn * c) * plane + p];
                let mut best_c = 0u8;
                for ch in 1..c {
                    let v = out.data()[(bn * c + ch) * plane + p];
                    if v > best {
                        best = v;
                        best_c = ch as u8;
                    }
                }
                labels[p] = best_c;
            }
            masks.push(SegMask::new(w, h, labels)?);
        }
        Ok(masks)
    }
}

const CHECKPOINT_MAGIC: &str = "lvseg-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    magic: String,
    version: u32,
    config: UNetConfig,
    param_count: usize,
}

/// Writes a checkpoint: one JSON header line, then all parameters as 64-bit
/// little-endian reals in declared layer order (kernel then bias).
pub fn save_checkpoint(path: &Path, params: &UNetParams) -> Result<()> {
    let p = path.display().to_string();
    let file = File::create(path).map_err(|e| Error::io(&p, e))?;
    let mut w = BufWriter::new(file);
    let header = CheckpointHeader {
        magic: CHECKPOINT_MAGIC.to_string(),
        version: CHECKPOINT_VERSION,
        config: params.config,
        param_count: params.param_count(),
    };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n").map_err(|e| Error::io(&p, e))?;
    for layer in &params.layers {
        for &v in layer.kernel.data().iter().chain(layer.bias.data()) {
            w.write_all(&v.to_le_bytes()).map_err(|e| Error::io(&p, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(&p, e))
}

pub fn load_checkpoint(path: &Path) -> Result<UNetParams> {
    let p = path.display().to_string();
    let file = File::open(path).map_err(|e| Error::io(&p, e))?;
    let mut r = BufReader::new(file);
    let mut header_bytes = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        r.read_exact(&mut byte)
            .map_err(|_| Error::format(&p, "missing checkpoint header"))?;
        if byte[0] == b'\n' {
            break;
        }
        header_bytes.push(byte[0]);
    }
    let header: CheckpointHeader = serde_json::from_slice(&header_bytes)?;
    if header.magic != CHECKPOINT_MAGIC {
        return Err(Error::format(&p, "not a checkpoint file"));
    }
    if header.version != CHECKPOINT_VERSION {
        return Err(Error::format(
            &p,
            format!("unsupported checkpoint version {}", header.version),
        ));
    }
    header.config.validate()?;

    let mut layers = Vec::new();
    let mut buf = [0u8; 8];
    let mut read_tensor = |shape: &[usize]| -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            r.read_exact(&mut buf)
                .map_err(|_| Error::format(&p, "truncated parameter blob"))?;
            data.push(f64::from_le_bytes(buf));
        }
        Tensor::from_vec(shape, data)
    };
    for (cin, cout, k) in header.config.layer_plan() {
        let kernel = read_tensor(&[cout, cin, k, k])?;
        let bias = read_tensor(&[cout])?;
        layers.push(ConvLayer { kernel, bias });
    }
    let params = UNetParams {
        config: header.config,
        layers,
    };
    if params.param_count() != header.param_count {
        return Err(Error::format(&p, "parameter count mismatch"));
    }
    Ok(params)
}
