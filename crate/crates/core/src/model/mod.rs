//! Slim U-Net style encoder-decoder backbone.
//!
//! `depth` encoder levels of two 3x3 convolutions (leaky rectifier) each
//! followed by 2x2 max pooling, a bottleneck block, and a mirrored decoder
//! with nearest-neighbor upsampling and skip concatenation, closed by a 1x1
//! classification head. Parameters live in one flat f64 vector with a
//! deterministic layout so EMA updates, SGD, checksums, and checkpoints are
//! all simple slice operations.

pub mod layers;

use std::fs;
use std::io::{Read, Write};
use std::ops::Range;
use std::path::Path;

use ndarray::Array4;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::checksum_f64;
use layers::{
    concat_channels, conv_backward, conv_forward, leaky_relu_backward_inplace, leaky_relu_inplace,
    maxpool2_backward, maxpool2_forward, split_channels, upsample2_backward, upsample2_forward,
    ConvShape,
};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
#[serde(default)]
pub struct NetworkConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    pub base_width: usize,
    /// Encoder levels; input spatial size must be divisible by 2^depth.
    pub depth: usize,
    pub seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            in_channels: 1,
            num_classes: 4,
            base_width: 16,
            depth: 4,
            seed: 0,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 1 {
            return Err(Error::Config("depth must be >= 1".into()));
        }
        if self.base_width < 1 {
            return Err(Error::Config("base_width must be >= 1".into()));
        }
        if self.in_channels < 1 {
            return Err(Error::Config("in_channels must be >= 1".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be >= 2".into()));
        }
        Ok(())
    }

    fn width(&self, level: usize) -> usize {
        self.base_width << level
    }
}

/// Raw network outputs, `[B, num_classes, H, W]`.
#[derive(Debug, Clone)]
pub struct Logits {
    pub values: Array4<f64>,
}

/// Per-pixel class probabilities, `[B, num_classes, H, W]`; every pixel's
/// class vector is nonnegative and sums to one.
#[derive(Debug, Clone)]
pub struct ProbMap {
    pub values: Array4<f64>,
}

/// Numerically stabilized channel softmax (max subtraction per pixel).
pub fn softmax(logits: &Logits) -> ProbMap {
    let (b, c, h, w) = logits.values.dim();
    let src = logits.values.as_slice().expect("logits contiguous");
    let mut out = Array4::<f64>::zeros((b, c, h, w));
    let dst = out.as_slice_mut().expect("out contiguous");
    let hw = h * w;
    let plane = c * hw;
    for bi in 0..b {
        for p in 0..hw {
            let base = bi * plane + p;
            let mut max = f64::NEG_INFINITY;
            for ci in 0..c {
                max = max.max(src[base + ci * hw]);
            }
            let mut sum = 0.0;
            for ci in 0..c {
                let e = (src[base + ci * hw] - max).exp();
                dst[base + ci * hw] = e;
                sum += e;
            }
            for ci in 0..c {
                dst[base + ci * hw] /= sum;
            }
        }
    }
    ProbMap { values: out }
}

// ---------------------------------------------------------------------------
// Parameter layout
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub range: Range<usize>,
}

#[derive(Debug, Clone)]
pub struct ParamLayout {
    pub entries: Vec<ParamEntry>,
    pub total: usize,
}

fn conv_entries(layout: &mut Vec<ParamEntry>, offset: &mut usize, name: &str, shape: ConvShape) {
    let w_len = shape.weight_len();
    layout.push(ParamEntry {
        name: format!("{name}.weight"),
        shape: vec![shape.cout, shape.cin, shape.k, shape.k],
        range: *offset..*offset + w_len,
    });
    *offset += w_len;
    layout.push(ParamEntry {
        name: format!("{name}.bias"),
        shape: vec![shape.cout],
        range: *offset..*offset + shape.cout,
    });
    *offset += shape.cout;
}

impl ParamLayout {
    fn build(cfg: &NetworkConfig) -> ParamLayout {
        let mut entries = Vec::new();
        let mut offset = 0;
        for (name, block) in block_plan(cfg) {
            conv_entries(&mut entries, &mut offset, &format!("{name}.conv1"), block.conv1);
            conv_entries(&mut entries, &mut offset, &format!("{name}.conv2"), block.conv2);
        }
        let head = head_shape(cfg);
        conv_entries(&mut entries, &mut offset, "head", head);
        ParamLayout {
            entries,
            total: offset,
        }
    }

    pub fn find(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.iter().find(|e| e.name == name)
    }
}

#[derive(Debug, Clone, Copy)]
struct BlockShape {
    conv1: ConvShape,
    conv2: ConvShape,
}

fn double_conv(cin: usize, cout: usize) -> BlockShape {
    BlockShape {
        conv1: ConvShape { cin, cout, k: 3 },
        conv2: ConvShape {
            cin: cout,
            cout,
            k: 3,
        },
    }
}

/// All double-conv blocks in parameter order: encoder levels 0..depth,
/// bottleneck, decoder levels depth-1..0 (application order).
fn block_plan(cfg: &NetworkConfig) -> Vec<(String, BlockShape)> {
    let mut plan = Vec::new();
    for i in 0..cfg.depth {
        let cin = if i == 0 {
            cfg.in_channels
        } else {
            cfg.width(i - 1)
        };
        plan.push((format!("enc{i}"), double_conv(cin, cfg.width(i))));
    }
    plan.push((
        "bottleneck".to_string(),
        double_conv(cfg.width(cfg.depth - 1), cfg.width(cfg.depth)),
    ));
    for i in (0..cfg.depth).rev() {
        let cin = cfg.width(i + 1) + cfg.width(i);
        plan.push((format!("dec{i}"), double_conv(cin, cfg.width(i))));
    }
    plan
}

fn head_shape(cfg: &NetworkConfig) -> ConvShape {
    ConvShape {
        cin: cfg.base_width,
        cout: cfg.num_classes,
        k: 1,
    }
}

// ---------------------------------------------------------------------------
// Network
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Network {
    config: NetworkConfig,
    layout: ParamLayout,
    params: Vec<f64>,
}

/// Gradient buffer with the same flat layout as [`Network::params`].
#[derive(Debug, Clone)]
pub struct Gradients {
    pub values: Vec<f64>,
}

struct BlockCache {
    /// Input to conv1.
    x: Array4<f64>,
    /// Post-activation output of conv1.
    y1: Array4<f64>,
    /// Post-activation output of conv2 (the block output).
    y2: Array4<f64>,
}

/// Activation caches from [`Network::forward_trace`], consumed by
/// [`Network::backward`].
pub struct ForwardTrace {
    enc: Vec<BlockCache>,
    pools: Vec<Vec<u32>>,
    bottleneck: BlockCache,
    /// Decoder caches in application order (deepest level first).
    dec: Vec<BlockCache>,
    head_x: Array4<f64>,
}

/// Create a network with deterministically seeded parameters (He-normal
/// weights, zero biases).
pub fn init_network(config: NetworkConfig) -> Result<Network> {
    config.validate()?;
    let layout = ParamLayout::build(&config);
    let mut params = vec![0.0; layout.total];
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    for entry in &layout.entries {
        if entry.name.ends_with(".weight") {
            let fan_in: usize = entry.shape[1..].iter().product();
            let std = (2.0 / fan_in as f64).sqrt();
            let dist = Normal::new(0.0, std).expect("finite std");
            for v in &mut params[entry.range.clone()] {
                *v = dist.sample(&mut rng);
            }
        }
        // biases stay zero
    }
    Ok(Network {
        config,
        layout,
        params,
    })
}

impl Network {
    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Content fingerprint of the parameter vector.
    pub fn checksum(&self) -> u64 {
        checksum_f64(&self.params)
    }

    pub fn zero_gradients(&self) -> Gradients {
        Gradients {
            values: vec![0.0; self.params.len()],
        }
    }

    fn check_input(&self, images: &Array4<f64>) -> Result<()> {
        let (_, c, h, w) = images.dim();
        if c != self.config.in_channels {
            return Err(Error::Shape(format!(
                "expected {} input channels, got {c}",
                self.config.in_channels
            )));
        }
        let div = 1usize << self.config.depth;
        if h % div != 0 || w % div != 0 {
            return Err(Error::Shape(format!(
                "spatial size {h}x{w} not divisible by 2^depth = {div}"
            )));
        }
        Ok(())
    }

    fn slices(&self, block: &str) -> (ConvShape, &[f64], &[f64], ConvShape, &[f64], &[f64]) {
        let w1 = self.layout.find(&format!("{block}.conv1.weight")).expect("layout name");
        let b1 = self.layout.find(&format!("{block}.conv1.bias")).expect("layout name");
        let w2 = self.layout.find(&format!("{block}.conv2.weight")).expect("layout name");
        let b2 = self.layout.find(&format!("{block}.conv2.bias")).expect("layout name");
        let s1 = ConvShape {
            cout: w1.shape[0],
            cin: w1.shape[1],
            k: w1.shape[2],
        };
        let s2 = ConvShape {
            cout: w2.shape[0],
            cin: w2.shape[1],
            k: w2.shape[2],
        };
        (
            s1,
            &self.params[w1.range.clone()],
            &self.params[b1.range.clone()],
            s2,
            &self.params[w2.range.clone()],
            &self.params[b2.range.clone()],
        )
    }

    fn block_forward(&self, block: &str, x: &Array4<f64>) -> BlockCache {
        let (s1, w1, b1, s2, w2, b2) = self.slices(block);
        let mut y1 = conv_forward(x, w1, b1, s1);
        leaky_relu_inplace(&mut y1);
        let mut y2 = conv_forward(&y1, w2, b2, s2);
        leaky_relu_inplace(&mut y2);
        BlockCache {
            x: x.clone(),
            y1,
            y2,
        }
    }

    fn block_backward(&self, block: &str, cache: &BlockCache, dy2: Array4<f64>, grads: &mut Gradients) -> Array4<f64> {
        let (s1, w1, _b1, s2, w2, _b2) = self.slices(block);
        let w1e = self.layout.find(&format!("{block}.conv1.weight")).expect("layout name").range.clone();
        let b1e = self.layout.find(&format!("{block}.conv1.bias")).expect("layout name").range.clone();
        let w2e = self.layout.find(&format!("{block}.conv2.weight")).expect("layout name").range.clone();
        let b2e = self.layout.find(&format!("{block}.conv2.bias")).expect("layout name").range.clone();

        let mut d = dy2;
        leaky_relu_backward_inplace(&cache.y2, &mut d);
        let (dw2, rest) = grads.values[w2e.start..b2e.end].split_at_mut(w2e.len());
        let dx1 = conv_backward(&cache.y1, w2, s2, &d, dw2, rest);
        let mut d = dx1;
        leaky_relu_backward_inplace(&cache.y1, &mut d);
        let (dw1, rest) = grads.values[w1e.start..b1e.end].split_at_mut(w1e.len());
        conv_backward(&cache.x, w1, s1, &d, dw1, rest)
    }

    /// Inference-only forward pass.
    pub fn forward(&self, images: &Array4<f64>) -> Result<Logits> {
        Ok(self.forward_trace(images)?.0)
    }

    /// Forward pass that keeps activation caches for [`Network::backward`].
    pub fn forward_trace(&self, images: &Array4<f64>) -> Result<(Logits, ForwardTrace)> {
        self.check_input(images)?;
        let depth = self.config.depth;

        let mut enc = Vec::with_capacity(depth);
        let mut pools = Vec::with_capacity(depth);
        let mut x = images.clone();
        for i in 0..depth {
            let cache = self.block_forward(&format!("enc{i}"), &x);
            let (pooled, arg) = maxpool2_forward(&cache.y2);
            x = pooled;
            pools.push(arg);
            enc.push(cache);
        }

        let bottleneck = self.block_forward("bottleneck", &x);
        x = bottleneck.y2.clone();

        let mut dec = Vec::with_capacity(depth);
        for i in (0..depth).rev() {
            let up = upsample2_forward(&x);
            let cat = concat_channels(&up, &enc[i].y2);
            let cache = self.block_forward(&format!("dec{i}"), &cat);
            x = cache.y2.clone();
            dec.push(cache);
        }

        let head = self.layout.find("head.weight").expect("layout name");
        let head_b = self.layout.find("head.bias").expect("layout name");
        let shape = head_shape(&self.config);
        let logits = conv_forward(
            &x,
            &self.params[head.range.clone()],
            &self.params[head_b.range.clone()],
            shape,
        );

        Ok((
            Logits { values: logits },
            ForwardTrace {
                enc,
                pools,
                bottleneck,
                dec,
                head_x: x,
            },
        ))
    }

    /// Backpropagate `dlogits` through the cached trace, returning parameter
    /// gradients in flat layout order.
    pub fn backward(&self, trace: &ForwardTrace, dlogits: &Array4<f64>) -> Gradients {
        let depth = self.config.depth;
        let mut grads = self.zero_gradients();

        let head_w = self.layout.find("head.weight").expect("layout name").range.clone();
        let head_b = self.layout.find("head.bias").expect("layout name").range.clone();
        let shape = head_shape(&self.config);
        let mut d = {
            let (dw, rest) = grads.values[head_w.start..head_b.end].split_at_mut(head_w.len());
            conv_backward(
                &trace.head_x,
                &self.params[head_w.clone()],
                shape,
                dlogits,
                dw,
                rest,
            )
        };

        // Decoder in reverse application order: level 0 (applied last) first.
        let mut skip_grads: Vec<Option<Array4<f64>>> = vec![None; depth];
        for (pos, i) in (0..depth).rev().enumerate().rev() {
            // dec[pos] was applied at level i; walk pos from last to first.
            let cache = &trace.dec[pos];
            let dcat = self.block_backward(&format!("dec{i}"), cache, d, &mut grads);
            let up_channels = self.config.width(i + 1);
            let (dup, dskip) = split_channels(&dcat, up_channels);
            skip_grads[i] = Some(dskip);
            d = upsample2_backward(&dup);
        }

        d = self.block_backward("bottleneck", &trace.bottleneck, d, &mut grads);

        for i in (0..depth).rev() {
            let enc_out_dim = trace.enc[i].y2.dim();
            let mut dy = maxpool2_backward(&d, &trace.pools[i], enc_out_dim);
            if let Some(skip) = &skip_grads[i] {
                dy += skip;
            }
            d = self.block_backward(&format!("enc{i}"), &trace.enc[i], dy, &mut grads);
        }

        grads
    }
}

// ---------------------------------------------------------------------------
// Checkpoint file (f32 export)
// ---------------------------------------------------------------------------

const NET_MAGIC: &[u8; 8] = b"RSEGNET1";

#[derive(Debug, Serialize, Deserialize)]
struct NetHeader {
    config: NetworkConfig,
    step: u64,
    params: Vec<NetParamMeta>,
}

#[derive(Debug, Serialize, Deserialize)]
struct NetParamMeta {
    name: String,
    shape: Vec<usize>,
}

/// Write a network to a single checkpoint file: magic, JSON header (config,
/// step, per-parameter name and shape), then one little-endian f32 blob in
/// layout order.
pub fn save_network(net: &Network, step: u64, path: &Path) -> Result<()> {
    let header = NetHeader {
        config: net.config.clone(),
        step,
        params: net
            .layout
            .entries
            .iter()
            .map(|e| NetParamMeta {
                name: e.name.clone(),
                shape: e.shape.clone(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::json(path, e))?;
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(NET_MAGIC).map_err(|e| Error::io(path, e))?;
    file.write_all(&(json.len() as u32).to_le_bytes())
        .map_err(|e| Error::io(path, e))?;
    file.write_all(&json).map_err(|e| Error::io(path, e))?;
    let mut blob = Vec::with_capacity(net.params.len() * 4);
    for v in &net.params {
        blob.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    file.write_all(&blob).map_err(|e| Error::io(path, e))
}

/// Load a network checkpoint written by [`save_network`]. Returns the
/// reconstructed network and the training step recorded in the header.
pub fn load_network(path: &Path) -> Result<(Network, u64)> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 12 || &bytes[..8] != NET_MAGIC {
        return Err(Error::Checkpoint(format!(
            "{} is not a network checkpoint (bad magic)",
            path.display()
        )));
    }
    let json_len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    if bytes.len() < 12 + json_len {
        return Err(Error::Checkpoint("truncated header".into()));
    }
    let header: NetHeader =
        serde_json::from_slice(&bytes[12..12 + json_len]).map_err(|e| Error::json(path, e))?;
    let mut net = init_network(header.config.clone())?;

    // The layout is derived from the config; verify the stored manifest agrees.
    if header.params.len() != net.layout.entries.len() {
        return Err(Error::Checkpoint(format!(
            "parameter count mismatch: file has {}, config implies {}",
            header.params.len(),
            net.layout.entries.len()
        )));
    }
    for (meta, entry) in header.params.iter().zip(&net.layout.entries) {
        if meta.name != entry.name || meta.shape != entry.shape {
            return Err(Error::Checkpoint(format!(
                "parameter {} has shape {:?}, expected {:?} for {}",
                meta.name, meta.shape, entry.shape, entry.name
            )));
        }
    }

    let blob = &bytes[12 + json_len..];
    if blob.len() != net.params.len() * 4 {
        return Err(Error::Checkpoint(format!(
            "blob holds {} bytes, layout needs {}",
            blob.len(),
            net.params.len() * 4
        )));
    }
    for (dst, chunk) in net.params.iter_mut().zip(blob.chunks_exact(4)) {
        *dst = f32::from_le_bytes(chunk.try_into().expect("chunk of 4")) as f64;
    }
    Ok((net, header.step))
}
