//! Small encoder/decoder networks for detection scores and dense
//! descriptors, with hand-derived reverse-mode gradients.
//!
//! Both networks share one structure: a strided convolutional encoder
//! (strides 1, 2, 4, ... with one feature map per scale) and a
//! coarse-to-fine decoder. Each decoder scale refines the encoded features
//! (plus context passed down from the coarser scale) and adds a residual
//! to a dense output grid, which is upsampled between scales: bicubically
//! for detection logits, bilinearly for descriptions. The descriptor net
//! additionally L2-normalizes each output pixel. The two networks never
//! share weights.

mod tensor;
pub mod train;

pub use tensor::{Tensor, UpsampleKind};
pub use train::{train_detector, train_descriptor, DescTrainParams, TraceEntry, TrainConfig, TrainError};

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use thiserror::Error;

use crate::ioutil::{self, FormatError};
use crate::map::{ChannelMap, Map2, PixelGrid, ScoreMap};
use tensor::{
    concat_channels, conv2d, conv2d_backward, l2_normalize, l2_normalize_backward, relu,
    relu_backward, split_channels, upsample2x, upsample2x_backward, ConvSpec,
};

#[derive(Debug, Error, PartialEq)]
pub enum NetError {
    #[error("image {0}x{1} not divisible by max stride {2}")]
    DimsNotDivisible(usize, usize, usize),
    #[error("invalid net config: {0}")]
    BadConfig(String),
}

/// Architecture hyperparameters. Encoder strides are implicit powers of
/// two, one per channel entry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetConfig {
    pub encoder_channels: Vec<usize>,
    pub detector_blocks: usize,
    pub descriptor_blocks: usize,
    pub descriptor_dim: usize,
    /// Context channels received by each scale except the coarsest.
    pub context_channels: Vec<usize>,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            encoder_channels: vec![8, 16, 32, 64],
            detector_blocks: 2,
            descriptor_blocks: 2,
            descriptor_dim: 64,
            context_channels: vec![4, 8, 16],
        }
    }
}

impl NetConfig {
    pub fn levels(&self) -> usize {
        self.encoder_channels.len()
    }

    pub fn strides(&self) -> Vec<usize> {
        (0..self.levels()).map(|i| 1 << i).collect()
    }

    pub fn max_stride(&self) -> usize {
        1 << (self.levels() - 1)
    }

    pub fn validate(&self) -> Result<(), NetError> {
        if self.encoder_channels.is_empty() || self.encoder_channels.iter().any(|c| *c == 0) {
            return Err(NetError::BadConfig("encoder channels must be positive".into()));
        }
        if self.context_channels.len() + 1 != self.encoder_channels.len() {
            return Err(NetError::BadConfig(
                "need one context width per non-coarsest scale".into(),
            ));
        }
        if self.context_channels.iter().any(|c| *c == 0) {
            return Err(NetError::BadConfig("context channels must be positive".into()));
        }
        if self.detector_blocks == 0 || self.descriptor_blocks == 0 {
            return Err(NetError::BadConfig("decoder needs at least one block".into()));
        }
        if self.descriptor_dim == 0 {
            return Err(NetError::BadConfig("descriptor dim must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NetKind {
    Detector,
    Descriptor,
}

impl NetKind {
    fn as_str(&self) -> &'static str {
        match self {
            NetKind::Detector => "detector",
            NetKind::Descriptor => "descriptor",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "detector" => Some(NetKind::Detector),
            "descriptor" => Some(NetKind::Descriptor),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Encoder,
    Decoder,
}

/// One learnable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub group: ParamGroup,
}

/// All learnable state of one network.
#[derive(Debug, Clone, PartialEq)]
pub struct NetState {
    config: NetConfig,
    kind: NetKind,
    params: Vec<Param>,
    index: HashMap<String, usize>,
    pub seed: u64,
}

/// Per-parameter gradients aligned with [`NetState::params`].
#[derive(Debug, Clone)]
pub struct Gradients(pub Vec<Vec<f64>>);

impl Gradients {
    pub fn zeros_like(state: &NetState) -> Self {
        Gradients(state.params.iter().map(|p| vec![0.0; p.data.len()]).collect())
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.0.iter_mut() {
            for x in g.iter_mut() {
                *x *= s;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|g| g.iter().all(|x| x.is_finite()))
    }
}

struct ParamBuilder {
    rng: ChaCha12Rng,
    params: Vec<Param>,
}

impl ParamBuilder {
    fn conv(&mut self, name: &str, spec: ConvSpec, group: ParamGroup, zero_init: bool) {
        let fan_in = spec.in_c * spec.kernel * spec.kernel;
        let s = 1.0 / (fan_in as f64).sqrt();
        // Biases draw from the same range; all-zero biases would make the
        // whole net positively homogeneous in the image, which normalizes
        // away contrast in the descriptor path.
        let (weight, bias) = if zero_init {
            (vec![0.0; spec.weight_len()], vec![0.0; spec.out_c])
        } else {
            (
                (0..spec.weight_len())
                    .map(|_| self.rng.gen_range(-s..s))
                    .collect(),
                (0..spec.out_c).map(|_| self.rng.gen_range(-s..s)).collect(),
            )
        };
        self.params.push(Param {
            name: format!("{name}.w"),
            shape: vec![spec.out_c, spec.in_c, spec.kernel, spec.kernel],
            data: weight,
            group,
        });
        self.params.push(Param {
            name: format!("{name}.b"),
            shape: vec![spec.out_c],
            data: bias,
            group,
        });
    }
}

impl NetState {
    pub fn new(kind: NetKind, config: NetConfig, seed: u64) -> Result<Self, NetError> {
        config.validate()?;
        let mut b = ParamBuilder {
            rng: ChaCha12Rng::seed_from_u64(seed),
            params: Vec::new(),
        };
        let levels = config.levels();
        let ch = &config.encoder_channels;
        for i in 0..levels {
            b.conv(
                &format!("enc{i}"),
                ConvSpec {
                    in_c: if i == 0 { 1 } else { ch[i - 1] },
                    out_c: ch[i],
                    kernel: 3,
                    stride: if i == 0 { 1 } else { 2 },
                },
                ParamGroup::Encoder,
                false,
            );
        }
        let (blocks, out_dim, zero_head) = match kind {
            NetKind::Detector => (config.detector_blocks, 1, true),
            NetKind::Descriptor => (config.descriptor_blocks, config.descriptor_dim, false),
        };
        for i in (0..levels).rev() {
            let d = ch[i];
            // The coarsest scale receives no context.
            let in_c = if i == levels - 1 {
                d
            } else {
                d + config.context_channels[i]
            };
            for j in 0..blocks {
                b.conv(
                    &format!("dec{i}.conv{j}"),
                    ConvSpec {
                        in_c: if j == 0 { in_c } else { d },
                        out_c: d,
                        kernel: 3,
                        stride: 1,
                    },
                    ParamGroup::Decoder,
                    false,
                );
            }
            b.conv(
                &format!("dec{i}.head"),
                ConvSpec {
                    in_c: d,
                    out_c: out_dim,
                    kernel: 1,
                    stride: 1,
                },
                ParamGroup::Decoder,
                zero_head,
            );
            if i > 0 {
                b.conv(
                    &format!("dec{i}.ctx"),
                    ConvSpec {
                        in_c: d,
                        out_c: config.context_channels[i - 1],
                        kernel: 1,
                        stride: 1,
                    },
                    ParamGroup::Decoder,
                    false,
                );
            }
        }
        let index = b
            .params
            .iter()
            .enumerate()
            .map(|(i, p)| (p.name.clone(), i))
            .collect();
        Ok(Self {
            config,
            kind,
            params: b.params,
            index,
            seed,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn kind(&self) -> NetKind {
        self.kind
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    fn idx(&self, name: &str) -> usize {
        *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("missing param {name}"))
    }

    fn data(&self, name: &str) -> &[f64] {
        &self.params[self.idx(name)].data
    }

    fn blocks(&self) -> usize {
        match self.kind {
            NetKind::Detector => self.config.detector_blocks,
            NetKind::Descriptor => self.config.descriptor_blocks,
        }
    }

    fn grid_upsample_kind(&self) -> UpsampleKind {
        match self.kind {
            NetKind::Detector => UpsampleKind::Bicubic,
            NetKind::Descriptor => UpsampleKind::Bilinear,
        }
    }

    fn conv_spec(&self, name: &str) -> ConvSpec {
        let p = &self.params[self.idx(&format!("{name}.w"))];
        ConvSpec {
            out_c: p.shape[0],
            in_c: p.shape[1],
            kernel: p.shape[2],
            stride: if name.starts_with("enc") && name != "enc0" {
                2
            } else {
                1
            },
        }
    }
}

#[derive(Debug)]
struct DecoderLevelCache {
    input: Tensor,
    blocks: Vec<Tensor>,
    ctx_out: Option<Tensor>,
}

/// Activations saved by the forward pass for the backward pass.
#[derive(Debug)]
pub struct ForwardCache {
    image: Tensor,
    enc: Vec<Tensor>,
    dec: Vec<DecoderLevelCache>,
    /// Pre-normalization output grid (descriptor only).
    pre_norm: Option<Tensor>,
}

fn image_tensor(image: &Map2<f64>) -> Tensor {
    Tensor::from_vec(1, image.height(), image.width(), image.as_slice().to_vec())
}

fn run_forward(state: &NetState, image: &Map2<f64>) -> Result<(Tensor, ForwardCache), NetError> {
    let (h, w) = (image.height(), image.width());
    let stride = state.config.max_stride();
    if h % stride != 0 || w % stride != 0 {
        return Err(NetError::DimsNotDivisible(w, h, stride));
    }
    let levels = state.config.levels();
    let img = image_tensor(image);

    let mut enc = Vec::with_capacity(levels);
    for i in 0..levels {
        let name = format!("enc{i}");
        let spec = state.conv_spec(&name);
        let input = if i == 0 { &img } else { &enc[i - 1] };
        let out = relu(&conv2d(
            input,
            &spec,
            state.data(&format!("{name}.w")),
            state.data(&format!("{name}.b")),
        ));
        enc.push(out);
    }

    let blocks_n = state.blocks();
    let mut dec: Vec<Option<DecoderLevelCache>> = (0..levels).map(|_| None).collect();
    let mut grid: Option<Tensor> = None;
    let mut ctx_up: Option<Tensor> = None;
    for i in (0..levels).rev() {
        let input = match ctx_up.take() {
            Some(c) => concat_channels(&enc[i], &c),
            None => enc[i].clone(),
        };
        let mut blocks = Vec::with_capacity(blocks_n);
        for j in 0..blocks_n {
            let name = format!("dec{i}.conv{j}");
            let spec = state.conv_spec(&name);
            let x = if j == 0 { &input } else { &blocks[j - 1] };
            blocks.push(relu(&conv2d(
                x,
                &spec,
                state.data(&format!("{name}.w")),
                state.data(&format!("{name}.b")),
            )));
        }
        let last = blocks.last().expect("at least one block");
        let head = format!("dec{i}.head");
        let residual = conv2d(
            last,
            &state.conv_spec(&head),
            state.data(&format!("{head}.w")),
            state.data(&format!("{head}.b")),
        );
        grid = Some(match grid.take() {
            Some(coarser) => {
                let mut up = upsample2x(&coarser, state.grid_upsample_kind());
                up.add_assign(&residual);
                up
            }
            None => residual,
        });

        let ctx_out = if i > 0 {
            let name = format!("dec{i}.ctx");
            let ctx = relu(&conv2d(
                last,
                &state.conv_spec(&name),
                state.data(&format!("{name}.w")),
                state.data(&format!("{name}.b")),
            ));
            ctx_up = Some(upsample2x(&ctx, UpsampleKind::Bilinear));
            Some(ctx)
        } else {
            None
        };
        dec[i] = Some(DecoderLevelCache {
            input,
            blocks,
            ctx_out,
        });
    }
    let out = grid.expect("decoder produced a grid");
    Ok((
        out,
        ForwardCache {
            image: img,
            enc,
            dec: dec.into_iter().map(|d| d.expect("level cache")).collect(),
            pre_norm: None,
        },
    ))
}

fn run_backward(state: &NetState, cache: &ForwardCache, d_final: &Tensor) -> Gradients {
    let mut grads = Gradients::zeros_like(state);
    let levels = state.config.levels();
    let blocks_n = state.blocks();
    let ch = &state.config.encoder_channels;

    let mut d_enc: Vec<Tensor> = cache
        .enc
        .iter()
        .map(|t| Tensor::zeros(t.c, t.h, t.w))
        .collect();
    let mut d_grid = d_final.clone();
    let mut pending_d_ctx_up: Option<Tensor> = None;

    for i in 0..levels {
        let lc = &cache.dec[i];
        let last = lc.blocks.last().expect("at least one block");

        let mut d_cur = Tensor::zeros(last.c, last.h, last.w);
        // Residual head path.
        {
            let head = format!("dec{i}.head");
            let spec = state.conv_spec(&head);
            let (d_in, d_w, d_b) =
                conv2d_backward(last, &spec, state.data(&format!("{head}.w")), &d_grid);
            let wi = state.idx(&format!("{head}.w"));
            let bi = state.idx(&format!("{head}.b"));
            for (g, v) in grads.0[wi].iter_mut().zip(&d_w) {
                *g += v;
            }
            for (g, v) in grads.0[bi].iter_mut().zip(&d_b) {
                *g += v;
            }
            d_cur.add_assign(&d_in);
        }
        // Context consumed by the finer level (bilinear upsample of this
        // level's ctx head output).
        if let Some(d_ctx_up) = pending_d_ctx_up.take() {
            let ctx_out = lc.ctx_out.as_ref().expect("ctx present above level 0");
            let d_ctx = upsample2x_backward(&d_ctx_up, ctx_out.h, ctx_out.w, UpsampleKind::Bilinear);
            let d_pre = relu_backward(ctx_out, &d_ctx);
            let name = format!("dec{i}.ctx");
            let spec = state.conv_spec(&name);
            let (d_in, d_w, d_b) =
                conv2d_backward(last, &spec, state.data(&format!("{name}.w")), &d_pre);
            let wi = state.idx(&format!("{name}.w"));
            let bi = state.idx(&format!("{name}.b"));
            for (g, v) in grads.0[wi].iter_mut().zip(&d_w) {
                *g += v;
            }
            for (g, v) in grads.0[bi].iter_mut().zip(&d_b) {
                *g += v;
            }
            d_cur.add_assign(&d_in);
        }
        // Decoder blocks in reverse.
        for j in (0..blocks_n).rev() {
            let name = format!("dec{i}.conv{j}");
            let spec = state.conv_spec(&name);
            let out_j = &lc.blocks[j];
            let input_j: &Tensor = if j == 0 { &lc.input } else { &lc.blocks[j - 1] };
            let d_pre = relu_backward(out_j, &d_cur);
            let (d_in, d_w, d_b) =
                conv2d_backward(input_j, &spec, state.data(&format!("{name}.w")), &d_pre);
            let wi = state.idx(&format!("{name}.w"));
            let bi = state.idx(&format!("{name}.b"));
            for (g, v) in grads.0[wi].iter_mut().zip(&d_w) {
                *g += v;
            }
            for (g, v) in grads.0[bi].iter_mut().zip(&d_b) {
                *g += v;
            }
            d_cur = d_in;
        }
        // Split the concat input gradient into feature and context parts.
        if i < levels - 1 {
            let (d_feat, d_ctx_up) = split_channels(&d_cur, ch[i]);
            d_enc[i].add_assign(&d_feat);
            pending_d_ctx_up = Some(d_ctx_up);
        } else {
            d_enc[i].add_assign(&d_cur);
        }
        // Grid gradient flows to the coarser level.
        if i < levels - 1 {
            let coarser = &cache.enc[i + 1];
            d_grid = upsample2x_backward(&d_grid, coarser.h, coarser.w, state.grid_upsample_kind());
        }
    }

    // Encoder backward, coarse to fine.
    for i in (0..levels).rev() {
        let name = format!("enc{i}");
        let spec = state.conv_spec(&name);
        let input: &Tensor = if i == 0 { &cache.image } else { &cache.enc[i - 1] };
        let d_pre = relu_backward(&cache.enc[i], &d_enc[i]);
        let (d_in, d_w, d_b) =
            conv2d_backward(input, &spec, state.data(&format!("{name}.w")), &d_pre);
        let wi = state.idx(&format!("{name}.w"));
        let bi = state.idx(&format!("{name}.b"));
        for (g, v) in grads.0[wi].iter_mut().zip(&d_w) {
            *g += v;
        }
        for (g, v) in grads.0[bi].iter_mut().zip(&d_b) {
            *g += v;
        }
        if i > 0 {
            d_enc[i - 1].add_assign(&d_in);
        }
    }
    grads
}

/// Runs the detector: full-resolution score map plus the activation cache
/// needed for [`detector_backward`].
pub fn detector_forward(
    state: &NetState,
    image: &Map2<f64>,
) -> Result<(ScoreMap, ForwardCache), NetError> {
    assert_eq!(state.kind, NetKind::Detector);
    let (out, cache) = run_forward(state, image)?;
    let grid = PixelGrid::new(out.w, out.h).expect("non-empty output");
    Ok((Map2::from_vec(grid, out.data), cache))
}

/// Parameter gradients of a scalar loss with gradient `d_scores` w.r.t.
/// the detector output.
pub fn detector_backward(state: &NetState, cache: &ForwardCache, d_scores: &ScoreMap) -> Gradients {
    assert_eq!(state.kind, NetKind::Detector);
    let d = Tensor::from_vec(
        1,
        d_scores.height(),
        d_scores.width(),
        d_scores.as_slice().to_vec(),
    );
    run_backward(state, cache, &d)
}

/// Runs the descriptor: dense unit-normalized description grid
/// (pixel-major channel layout) plus the cache for
/// [`descriptor_backward`].
pub fn descriptor_forward(
    state: &NetState,
    image: &Map2<f64>,
) -> Result<(ChannelMap, ForwardCache), NetError> {
    assert_eq!(state.kind, NetKind::Descriptor);
    let (out, mut cache) = run_forward(state, image)?;
    let normalized = l2_normalize(&out);
    let grid = PixelGrid::new(out.w, out.h).expect("non-empty output");
    let dim = out.c;
    let plane = out.h * out.w;
    let mut data = vec![0.0; plane * dim];
    for p in 0..plane {
        for c in 0..dim {
            data[p * dim + c] = normalized.data[c * plane + p];
        }
    }
    cache.pre_norm = Some(out);
    Ok((ChannelMap::from_vec(grid, dim, data), cache))
}

/// Parameter gradients of a scalar loss whose gradient w.r.t. the
/// normalized descriptor grid is `d_grid` (same pixel-major layout as the
/// forward output).
pub fn descriptor_backward(state: &NetState, cache: &ForwardCache, d_grid: &ChannelMap) -> Gradients {
    assert_eq!(state.kind, NetKind::Descriptor);
    let pre = cache.pre_norm.as_ref().expect("descriptor cache");
    let plane = pre.h * pre.w;
    let dim = pre.c;
    let mut d_norm = Tensor::zeros(dim, pre.h, pre.w);
    let flat = d_grid.as_slice();
    for p in 0..plane {
        for c in 0..dim {
            d_norm.data[c * plane + p] = flat[p * dim + c];
        }
    }
    let d_pre = l2_normalize_backward(pre, &d_norm);
    run_backward(state, cache, &d_pre)
}

// --- checkpoint format ---

const NET_MAGIC: &str = "DDNT";

fn config_text(state: &NetState) -> String {
    let join = |v: &[usize]| {
        v.iter()
            .map(|c| c.to_string())
            .collect::<Vec<_>>()
            .join(",")
    };
    format!(
        "kind={}\nencoder_channels={}\ndetector_blocks={}\ndescriptor_blocks={}\ndescriptor_dim={}\ncontext_channels={}\nseed={}\n",
        state.kind.as_str(),
        join(&state.config.encoder_channels),
        state.config.detector_blocks,
        state.config.descriptor_blocks,
        state.config.descriptor_dim,
        join(&state.config.context_channels),
        state.seed,
    )
}

/// Writes a checkpoint: magic "DDNT", length-prefixed config text, then
/// `(name, dims, f32 data)` per tensor.
pub fn save_checkpoint(path: &Path, state: &NetState) -> Result<(), FormatError> {
    let mut w = BufWriter::new(File::create(path)?);
    ioutil::write_magic(&mut w, NET_MAGIC)?;
    let cfg = config_text(state);
    ioutil::write_u32(&mut w, cfg.len() as u32)?;
    w.write_all(cfg.as_bytes())?;
    ioutil::write_u32(&mut w, state.params.len() as u32)?;
    for p in &state.params {
        ioutil::write_u32(&mut w, p.name.len() as u32)?;
        w.write_all(p.name.as_bytes())?;
        ioutil::write_u32(&mut w, p.shape.len() as u32)?;
        for d in &p.shape {
            ioutil::write_u32(&mut w, *d as u32)?;
        }
        let data: Vec<f32> = p.data.iter().map(|v| *v as f32).collect();
        ioutil::write_f32_slice(&mut w, &data)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<NetState, FormatError> {
    let mut r = BufReader::new(File::open(path)?);
    ioutil::read_magic(&mut r, NET_MAGIC)?;
    let cfg_len = ioutil::read_u32(&mut r)? as usize;
    if cfg_len > 1 << 20 {
        return Err(FormatError::malformed("checkpoint", "oversized config"));
    }
    let mut cfg_bytes = vec![0u8; cfg_len];
    r.read_exact(&mut cfg_bytes)?;
    let cfg_text = String::from_utf8(cfg_bytes)
        .map_err(|_| FormatError::malformed("checkpoint", "config not utf-8"))?;

    let mut kind = None;
    let mut config = NetConfig::default();
    let mut seed = 0u64;
    let parse_list = |v: &str| -> Result<Vec<usize>, FormatError> {
        v.split(',')
            .map(|t| {
                t.trim()
                    .parse::<usize>()
                    .map_err(|_| FormatError::malformed("checkpoint", format!("bad list {v:?}")))
            })
            .collect()
    };
    for line in cfg_text.lines() {
        let Some((k, v)) = line.split_once('=') else {
            continue;
        };
        match k {
            "kind" => {
                kind = NetKind::parse(v);
            }
            "encoder_channels" => config.encoder_channels = parse_list(v)?,
            "detector_blocks" => {
                config.detector_blocks = v
                    .parse()
                    .map_err(|_| FormatError::malformed("checkpoint", "bad blocks"))?
            }
            "descriptor_blocks" => {
                config.descriptor_blocks = v
                    .parse()
                    .map_err(|_| FormatError::malformed("checkpoint", "bad blocks"))?
            }
            "descriptor_dim" => {
                config.descriptor_dim = v
                    .parse()
                    .map_err(|_| FormatError::malformed("checkpoint", "bad dim"))?
            }
            "context_channels" => config.context_channels = parse_list(v)?,
            "seed" => {
                seed = v
                    .parse()
                    .map_err(|_| FormatError::malformed("checkpoint", "bad seed"))?
            }
            _ => {
                return Err(FormatError::malformed(
                    "checkpoint",
                    format!("unknown config key {k:?}"),
                ))
            }
        }
    }
    let kind = kind.ok_or_else(|| FormatError::malformed("checkpoint", "missing kind"))?;
    let mut state = NetState::new(kind, config, seed)
        .map_err(|e| FormatError::malformed("checkpoint", e.to_string()))?;

    let n_tensors = ioutil::read_u32(&mut r)? as usize;
    if n_tensors != state.params.len() {
        return Err(FormatError::malformed(
            "checkpoint",
            format!("expected {} tensors, found {n_tensors}", state.params.len()),
        ));
    }
    for _ in 0..n_tensors {
        let name_len = ioutil::read_u32(&mut r)? as usize;
        if name_len > 1 << 12 {
            return Err(FormatError::malformed("checkpoint", "oversized name"));
        }
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| FormatError::malformed("checkpoint", "name not utf-8"))?;
        let ndims = ioutil::read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(ndims);
        for _ in 0..ndims {
            shape.push(ioutil::read_u32(&mut r)? as usize);
        }
        let count: usize = shape.iter().product();
        let data = ioutil::read_f32_vec(&mut r, count)?;
        let idx = *state
            .index
            .get(&name)
            .ok_or_else(|| FormatError::malformed("checkpoint", format!("unknown tensor {name:?}")))?;
        if state.params[idx].shape != shape {
            return Err(FormatError::malformed(
                "checkpoint",
                format!("shape mismatch for {name:?}"),
            ));
        }
        state.params[idx].data = data.iter().map(|v| *v as f64).collect();
    }
    Ok(state)
}
