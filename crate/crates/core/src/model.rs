//! Full models: the two-stack Gated PixelCNN (optionally conditional), the
//! single-stack masked baseline, and the PixelCNN autoencoder.

use std::collections::BTreeMap;
use std::f64::consts::LN_2;

use sha2::{Digest, Sha256};

use crate::autodiff::{ShiftDir, Tape, Var};
use crate::config::{parse_kv, parse_value, write_kv};
use crate::conv::Pad;
use crate::error::{Error, Result};
use crate::layers::{
    color_mask_1x1, gated_layer_forward, map_spatial, Activation, Architecture, BlockShape, CondLayout,
    CondVar, Conditioning, ConvParam, GatedBlockParams, Residual, SpatialConditioner,
};
use crate::mask::{build_mask, MaskSpec, MaskType};
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CondMode {
    None,
    /// Location-independent bias from a `dim`-vector (one-hot class, embedding, latent).
    Global { dim: usize },
    /// Location-dependent bias from a `channels`-map, built from a `dim`-vector
    /// by a learned upsampling network or supplied directly.
    Spatial { dim: usize, channels: usize },
}

impl CondMode {
    pub fn dim(self) -> usize {
        match self {
            CondMode::None => 0,
            CondMode::Global { dim } | CondMode::Spatial { dim, .. } => dim,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Number of gated layer blocks after the input projection.
    pub layers: usize,
    /// Feature maps per stack.
    pub features: usize,
    /// Filter size `n` (odd).
    pub filter: usize,
    /// Quantization levels per channel.
    pub levels: usize,
    pub height: usize,
    pub width: usize,
    /// 1 (grayscale) or 3 (RGB).
    pub channels: usize,
    /// Hidden width of the two-convolution output head.
    pub head_width: usize,
    pub activation: Activation,
    pub architecture: Architecture,
    pub residual: Residual,
    pub conditioning: CondMode,
    /// Autoencoder latent size `m`; the decoder is then globally conditioned on it.
    pub bottleneck: Option<usize>,
}

pub const PRESETS: &[&str] = &["mnist-small", "imagenet-paper"];

impl ModelConfig {
    /// Small grayscale model: 6 layers, 32 features, 5x5 filters, 4 levels, 14x14.
    pub fn mnist_small() -> Self {
        Self {
            layers: 6,
            features: 32,
            filter: 5,
            levels: 4,
            height: 14,
            width: 14,
            channels: 1,
            head_width: 64,
            activation: Activation::Gated,
            architecture: Architecture::TwoStack,
            residual: Residual::Conv,
            conditioning: CondMode::None,
            bottleneck: None,
        }
    }

    /// Full-size 32x32 RGB model: 20 layers, 384 features per gate half,
    /// 5x5 filters, 256 levels. Constructible, far too slow to train here.
    pub fn imagenet_paper() -> Self {
        Self {
            layers: 20,
            features: 384,
            filter: 5,
            levels: 256,
            height: 32,
            width: 32,
            channels: 3,
            head_width: 768,
            ..Self::mnist_small()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "mnist-small" => Ok(Self::mnist_small()),
            "imagenet-paper" => Ok(Self::imagenet_paper()),
            _ => Err(Error::Invalid(format!(
                "unknown preset {name:?} (known: {})",
                PRESETS.join(", ")
            ))),
        }
    }

    /// Small model for tests and diagnostics.
    pub fn tiny(height: usize, width: usize, channels: usize, levels: usize) -> Self {
        Self {
            layers: 2,
            features: 4 * channels,
            filter: 3,
            levels,
            height,
            width,
            channels,
            head_width: 4 * channels,
            ..Self::mnist_small()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Invalid(msg));
        if self.levels < 2 {
            return bad(format!("levels must be >= 2, got {}", self.levels));
        }
        if self.filter.is_multiple_of(2) {
            return bad(format!("filter size must be odd, got {}", self.filter));
        }
        if self.channels != 1 && self.channels != 3 {
            return bad(format!("channels must be 1 or 3, got {}", self.channels));
        }
        if self.height == 0 || self.width == 0 || self.features == 0 || self.head_width == 0 {
            return bad("dimensions and widths must be positive".into());
        }
        if !self.features.is_multiple_of(self.channels) || !self.head_width.is_multiple_of(self.channels) {
            return bad(format!(
                "features ({}) and head width ({}) must divide into {} colour groups",
                self.features, self.head_width, self.channels
            ));
        }
        match self.conditioning {
            CondMode::Global { dim: 0 } | CondMode::Spatial { dim: 0, .. } | CondMode::Spatial { channels: 0, .. } => {
                return bad("conditioning sizes must be positive".into());
            }
            _ => {}
        }
        if let Some(m) = self.bottleneck {
            if self.conditioning != (CondMode::Global { dim: m }) || m == 0 {
                return bad(format!("autoencoder with bottleneck {m} needs global conditioning of the same size"));
            }
        }
        Ok(())
    }

    /// Logit dimensions predicted per image (pixels times channels).
    pub fn dims_per_image(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn to_kv(&self) -> String {
        let (cond, dim, cs) = match self.conditioning {
            CondMode::None => ("none", 0, 0),
            CondMode::Global { dim } => ("global", dim, 0),
            CondMode::Spatial { dim, channels } => ("spatial", dim, channels),
        };
        write_kv([
            ("layers", self.layers.to_string()),
            ("features", self.features.to_string()),
            ("filter", self.filter.to_string()),
            ("levels", self.levels.to_string()),
            ("height", self.height.to_string()),
            ("width", self.width.to_string()),
            ("channels", self.channels.to_string()),
            ("head_width", self.head_width.to_string()),
            ("activation", activation_name(self.activation).to_string()),
            ("architecture", architecture_name(self.architecture).to_string()),
            ("residual", residual_name(self.residual).to_string()),
            ("conditioning", cond.to_string()),
            ("cond_dim", dim.to_string()),
            ("cond_channels", cs.to_string()),
            ("bottleneck", self.bottleneck.unwrap_or(0).to_string()),
        ])
    }

    /// Keys understood by [`ModelConfig::apply`].
    pub const KEYS: &'static [&'static str] = &[
        "layers",
        "features",
        "filter",
        "levels",
        "height",
        "width",
        "channels",
        "head_width",
        "activation",
        "architecture",
        "residual",
        "conditioning",
        "cond_dim",
        "cond_channels",
        "bottleneck",
    ];

    pub fn from_kv(text: &str) -> Result<Self> {
        let map = parse_kv(text)?;
        let mut cfg = Self::mnist_small();
        cfg.apply(&map, true)?;
        Ok(cfg)
    }

    /// Applies recognised keys of `map`; with `strict`, unknown keys are errors.
    pub fn apply(&mut self, map: &BTreeMap<String, String>, strict: bool) -> Result<()> {
        let (mut cond, mut dim, mut cs) = match self.conditioning {
            CondMode::None => ("none".to_string(), 0, 0),
            CondMode::Global { dim } => ("global".to_string(), dim, 0),
            CondMode::Spatial { dim, channels } => ("spatial".to_string(), dim, channels),
        };
        for (k, v) in map {
            match k.as_str() {
                "layers" => self.layers = parse_value(k, v)?,
                "features" => self.features = parse_value(k, v)?,
                "filter" => self.filter = parse_value(k, v)?,
                "levels" => self.levels = parse_value(k, v)?,
                "height" => self.height = parse_value(k, v)?,
                "width" => self.width = parse_value(k, v)?,
                "channels" => self.channels = parse_value(k, v)?,
                "head_width" => self.head_width = parse_value(k, v)?,
                "activation" => self.activation = parse_activation(v)?,
                "architecture" => self.architecture = parse_architecture(v)?,
                "residual" => {
                    self.residual = match v.as_str() {
                        "conv" => Residual::Conv,
                        "identity" => Residual::Identity,
                        _ => return Err(Error::Invalid(format!("bad residual {v:?}"))),
                    }
                }
                "conditioning" => cond = v.clone(),
                "cond_dim" => dim = parse_value(k, v)?,
                "cond_channels" => cs = parse_value(k, v)?,
                "bottleneck" => {
                    let m: usize = parse_value(k, v)?;
                    self.bottleneck = (m > 0).then_some(m);
                }
                _ if strict => return Err(Error::Invalid(format!("unknown model key {k:?}"))),
                _ => {}
            }
        }
        self.conditioning = match cond.as_str() {
            "none" => CondMode::None,
            "global" => CondMode::Global { dim },
            "spatial" => CondMode::Spatial { dim, channels: cs },
            _ => return Err(Error::Invalid(format!("bad conditioning {cond:?}"))),
        };
        Ok(())
    }

    /// ReLU variant with the feature width whose parameter count is closest
    /// to this model's.
    pub fn relu_ablation(&self) -> Result<ModelConfig> {
        let count = |cfg: &ModelConfig| -> Result<usize> { Ok(GatedPixelCNN::new(cfg.clone(), 0)?.params().count()) };
        let target = count(self)?;
        let mut best: Option<(usize, ModelConfig)> = None;
        let step = self.channels;
        let mut features = step;
        loop {
            let cfg = ModelConfig {
                activation: Activation::Relu,
                features,
                ..self.clone()
            };
            let n = count(&cfg)?;
            let gap = n.abs_diff(target);
            if best.as_ref().is_none_or(|(g, _)| gap < *g) {
                best = Some((gap, cfg));
            }
            if n >= target {
                break;
            }
            features += step;
        }
        Ok(best.expect("at least one width tried").1)
    }

    /// First eight bytes (big-endian) of the SHA-256 of the canonical key=value text.
    pub fn fingerprint(&self) -> u64 {
        let digest = Sha256::digest(self.to_kv().as_bytes());
        u64::from_be_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
    }
}

pub fn activation_name(a: Activation) -> &'static str {
    match a {
        Activation::Gated => "gated",
        Activation::Relu => "relu",
        Activation::Identity => "identity",
    }
}

pub fn parse_activation(s: &str) -> Result<Activation> {
    match s {
        "gated" => Ok(Activation::Gated),
        "relu" => Ok(Activation::Relu),
        "identity" => Ok(Activation::Identity),
        _ => Err(Error::Invalid(format!("bad activation {s:?}"))),
    }
}

pub fn architecture_name(a: Architecture) -> &'static str {
    match a {
        Architecture::TwoStack => "two_stack",
        Architecture::SingleStack => "single_stack",
    }
}

pub fn parse_architecture(s: &str) -> Result<Architecture> {
    match s {
        "two_stack" | "two-stack" => Ok(Architecture::TwoStack),
        "single_stack" | "single-stack" => Ok(Architecture::SingleStack),
        _ => Err(Error::Invalid(format!("bad architecture {s:?}"))),
    }
}

fn residual_name(r: Residual) -> &'static str {
    match r {
        Residual::Conv => "conv",
        Residual::Identity => "identity",
    }
}

/// Parameter ids of the autoregressive network.
#[derive(Clone, Debug)]
pub(crate) struct Network {
    input_v: Option<ConvParam>,
    input_h: ConvParam,
    blocks: Vec<GatedBlockParams>,
    head: [ConvParam; 2],
    spatial: Option<SpatialConditioner>,
    unshifted: bool,
}

/// Deliberate wiring errors used as negative controls by the diagnostics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// Drops the mask of the input projection, so it reads the current
    /// pixel (and, for the single-stack layout, pixels below and right).
    UnmaskInput,
    /// Skips the one-row shift of the vertical stack, so it reads the
    /// current row.
    UnshiftVertical,
}

impl Network {
    fn build(cfg: &ModelConfig, store: &mut ParamStore, rng: &mut Rng) -> Result<Self> {
        let (c, p, n) = (cfg.channels, cfg.features, cfg.filter);
        let shape = BlockShape {
            features: p,
            filter: n,
            colors: c,
            activation: cfg.activation,
            architecture: cfg.architecture,
            residual: cfg.residual,
        };
        let half = shape.half();
        let (input_v, input_h) = match cfg.architecture {
            Architecture::TwoStack => {
                let v = ConvParam::new(
                    store,
                    rng,
                    "input.vertical",
                    [p, c, half, n],
                    None,
                    Pad::new(half - 1, 0, n / 2, n / 2),
                );
                let mask = build_mask(&MaskSpec::row_causal(half, MaskType::A, c), c, p)?;
                let h = ConvParam::new(
                    store,
                    rng,
                    "input.horizontal",
                    [p, c, 1, half],
                    Some(mask),
                    Pad::new(0, 0, half - 1, 0),
                );
                (Some(v), h)
            }
            Architecture::SingleStack => {
                let mask = build_mask(&MaskSpec::centered(n, n, MaskType::A, c), c, p)?;
                let h = ConvParam::new(store, rng, "input.horizontal", [p, c, n, n], Some(mask), Pad::uniform(n / 2));
                (None, h)
            }
        };
        let layout = match cfg.conditioning {
            CondMode::None => CondLayout::None,
            CondMode::Global { dim } => CondLayout::Global { dim },
            CondMode::Spatial { channels, .. } => CondLayout::Spatial { channels },
        };
        let blocks = (0..cfg.layers)
            .map(|k| GatedBlockParams::new(store, rng, &format!("layer{k}"), &shape, layout))
            .collect::<Result<Vec<_>>>()?;
        let hw = cfg.head_width;
        let out = c * cfg.levels;
        let head = [
            ConvParam::new(store, rng, "head.0", [hw, p, 1, 1], color_mask_1x1(p, hw, c)?, Pad::NONE),
            ConvParam::new(store, rng, "head.1", [out, hw, 1, 1], color_mask_1x1(hw, out, c)?, Pad::NONE),
        ];
        let spatial = match cfg.conditioning {
            CondMode::Spatial { dim, channels } => Some(SpatialConditioner::new(
                store,
                rng,
                "conditioner",
                dim,
                channels,
                (cfg.height, cfg.width),
            )),
            _ => None,
        };
        Ok(Self {
            input_v,
            input_h,
            blocks,
            head,
            spatial,
            unshifted: false,
        })
    }

    fn inject(&mut self, fault: Fault) {
        match fault {
            Fault::UnmaskInput => self.input_h.mask = None,
            Fault::UnshiftVertical => self.unshifted = true,
        }
    }

    /// Logits `[N, C, L, H', W']` for scaled input `x` of `H'` rows.
    fn forward(&self, cfg: &ModelConfig, tape: &mut Tape, store: &ParamStore, x: Var, cond: CondVar) -> Result<Var> {
        let (nb, _, rows, cols) = tape.value(x).dims4("forward")?;
        let mut v = match &self.input_v {
            Some(conv) => {
                let v = conv.apply(tape, store, x)?;
                Some(if self.unshifted {
                    v
                } else if rows > 1 {
                    tape.shift(v, ShiftDir::Down, 1)?
                } else {
                    tape.constant(Tensor::zeros(tape.value(v).shape()))
                })
            }
            None => None,
        };
        let mut h = self.input_h.apply(tape, store, x)?;
        for block in &self.blocks {
            (v, h) = gated_layer_forward(tape, store, v, h, block, cond, cfg.activation)?;
        }
        let y = self.head[0].apply(tape, store, h)?;
        let y = match cfg.activation {
            Activation::Identity => y,
            _ => tape.relu(y)?,
        };
        let y = self.head[1].apply(tape, store, y)?;
        tape.reshape(y, &[nb, cfg.channels, cfg.levels, rows, cols])
    }

    /// Places external conditioning on the tape for an input of `rows` rows.
    fn conditioning(
        &self,
        cfg: &ModelConfig,
        tape: &mut Tape,
        store: &ParamStore,
        cond: &Conditioning,
        batch: usize,
        rows: usize,
    ) -> Result<CondVar> {
        let mismatch = |what: &str| Err(Error::Conditioning(format!("model expects {:?}, got {what}", cfg.conditioning)));
        let check_h = |h: &Tensor, dim: usize| {
            if h.shape() != [batch, dim] {
                Err(Error::Conditioning(format!("h {:?}, expected [{batch}, {dim}]", h.shape())))
            } else {
                Ok(())
            }
        };
        match (cfg.conditioning, cond) {
            (CondMode::None, Conditioning::None) => Ok(CondVar::None),
            (CondMode::Global { dim }, Conditioning::Global(h)) => {
                check_h(h, dim)?;
                Ok(CondVar::Global(tape.constant(h.clone())))
            }
            (CondMode::Spatial { dim, .. }, Conditioning::Global(h)) => {
                check_h(h, dim)?;
                let conditioner = self.spatial.as_ref().expect("spatial model has a conditioner");
                if rows == cfg.height {
                    let hv = tape.constant(h.clone());
                    Ok(CondVar::Spatial(conditioner.forward(tape, store, hv)?))
                } else {
                    let s = map_spatial(conditioner, store, h)?.crop_rows(rows)?;
                    Ok(CondVar::Spatial(tape.constant(s)))
                }
            }
            (CondMode::Spatial { channels, .. }, Conditioning::Spatial(s)) => {
                if s.shape() != [batch, channels, cfg.height, cfg.width] {
                    return Err(Error::Conditioning(format!(
                        "s {:?}, expected [{batch}, {channels}, {}, {}]",
                        s.shape(),
                        cfg.height,
                        cfg.width
                    )));
                }
                Ok(CondVar::Spatial(tape.constant(s.crop_rows(rows)?)))
            }
            (_, Conditioning::None) => mismatch("none"),
            (_, Conditioning::Global(_)) => mismatch("global"),
            (_, Conditioning::Spatial(_)) => mismatch("spatial"),
        }
    }
}

/// Checks `[N, C, rows, W]` integer levels and returns them scaled to `[-1, 1]`.
fn scaled_input(cfg: &ModelConfig, images: &Tensor, rows: usize) -> Result<Tensor> {
    let (_, c, h, w) = images.dims4("forward_logits")?;
    if c != cfg.channels || h < rows || rows == 0 || rows > cfg.height || h > cfg.height || w != cfg.width {
        return Err(Error::shape(
            "forward_logits",
            format!(
                "images {:?} for a {}x{}x{} model ({rows} rows)",
                images.shape(),
                cfg.channels,
                cfg.height,
                cfg.width
            ),
        ));
    }
    let images = if h == rows { images.clone() } else { images.crop_rows(rows)? };
    let top = (cfg.levels - 1) as f64;
    for &x in images.data() {
        if !(x >= 0.0 && x <= top && x.fract() == 0.0) {
            return Err(Error::LevelOutOfRange {
                level: if x.is_finite() && x >= 0.0 { x as usize } else { usize::MAX },
                levels: cfg.levels,
            });
        }
    }
    Ok(images.map(|x| x / top * 2.0 - 1.0))
}

fn targets(images: &Tensor) -> Vec<usize> {
    images.data().iter().map(|&x| x as usize).collect()
}

/// Interface shared by trainable autoregressive image models.
pub trait Autoregressive {
    fn config(&self) -> &ModelConfig;
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;

    /// Mean negative log-likelihood of a batch in bits/dim, recorded on `tape`.
    fn loss(&self, tape: &mut Tape, images: &Tensor, cond: &Conditioning) -> Result<Var>;

    /// Logits `[N, C, L, rows, W]` for the first `rows` rows of `images`.
    /// Causality makes them equal to the same rows of the full-image logits.
    fn logits_rows(&self, images: &Tensor, cond: &Conditioning, rows: usize) -> Result<Tensor>;

    /// Logits `[N, C, L, H, W]` of every conditional in one pass.
    fn forward_logits(&self, images: &Tensor, cond: &Conditioning) -> Result<Tensor> {
        self.logits_rows(images, cond, self.config().height)
    }

    /// Bits/dim of a batch without recording gradients.
    fn nll(&self, images: &Tensor, cond: &Conditioning) -> Result<f64> {
        let logits = self.forward_logits(images, cond)?;
        nll_bits_per_dim(&logits, images)
    }
}

/// Unconditional or conditional Gated PixelCNN (or the single-stack baseline).
#[derive(Clone, Debug)]
pub struct GatedPixelCNN {
    config: ModelConfig,
    params: ParamStore,
    net: Network,
}

impl GatedPixelCNN {
    /// Builds a model with weights drawn from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        if config.bottleneck.is_some() {
            return Err(Error::Invalid("bottleneck set: build a PixelCNNAutoencoder".into()));
        }
        let mut params = ParamStore::new();
        let mut rng = Rng::new(seed);
        let net = Network::build(&config, &mut params, &mut rng)?;
        Ok(Self { config, params, net })
    }

    /// Logit variable for a full batch.
    pub fn logits_var(&self, tape: &mut Tape, images: &Tensor, cond: &Conditioning) -> Result<Var> {
        let x = scaled_input(&self.config, images, self.config.height)?;
        let x = tape.constant(x);
        self.logits_from_input(tape, x, cond)
    }

    /// Logits from an already scaled input variable `[N, C, H, W]` (values in `[-1, 1]`).
    pub fn logits_from_input(&self, tape: &mut Tape, x: Var, cond: &Conditioning) -> Result<Var> {
        let shape = tape.value(x).shape().to_vec();
        if shape.len() != 4 || shape[1..] != [self.config.channels, self.config.height, self.config.width] {
            return Err(Error::shape("logits_from_input", format!("input {shape:?}")));
        }
        let cv = self.net.conditioning(&self.config, tape, &self.params, cond, shape[0], self.config.height)?;
        self.net.forward(&self.config, tape, &self.params, x, cv)
    }

    /// Breaks the causal wiring on purpose (negative controls only).
    pub fn inject_fault(&mut self, fault: Fault) {
        self.net.inject(fault);
    }
}

impl Autoregressive for GatedPixelCNN {
    fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn loss(&self, tape: &mut Tape, images: &Tensor, cond: &Conditioning) -> Result<Var> {
        let logits = self.logits_var(tape, images, cond)?;
        bits_loss(tape, logits, images)
    }

    fn logits_rows(&self, images: &Tensor, cond: &Conditioning, rows: usize) -> Result<Tensor> {
        let x = scaled_input(&self.config, images, rows)?;
        let mut tape = Tape::new();
        let cv = self.net.conditioning(&self.config, &mut tape, &self.params, cond, images.shape()[0], rows)?;
        let x = tape.constant(x);
        let y = self.net.forward(&self.config, &mut tape, &self.params, x, cv)?;
        Ok(tape.value(y).clone())
    }
}

fn bits_loss(tape: &mut Tape, logits: Var, images: &Tensor) -> Result<Var> {
    let nats = tape.cross_entropy_axis(logits, 2, &targets(images))?;
    tape.scale(nats, 1.0 / LN_2)
}

/// Mean `-log2 p(true level)` over every pixel and channel.
pub fn nll_bits_per_dim(logits: &Tensor, images: &Tensor) -> Result<f64> {
    let [n, c, levels, h, w] = logits.shape()[..] else {
        return Err(Error::shape("nll_bits_per_dim", format!("logits {:?}", logits.shape())));
    };
    if images.shape() != [n, c, h, w] {
        return Err(Error::shape(
            "nll_bits_per_dim",
            format!("logits {:?} for images {:?}", logits.shape(), images.shape()),
        ));
    }
    for &x in images.data() {
        if !(x >= 0.0 && x.fract() == 0.0 && (x as usize) < levels) {
            return Err(Error::LevelOutOfRange {
                level: if x >= 0.0 { x as usize } else { usize::MAX },
                levels,
            });
        }
    }
    let mut tape = Tape::new();
    let lv = tape.constant(logits.clone());
    let loss = bits_loss(&mut tape, lv, images)?;
    Ok(tape.value(loss).item())
}

/// Softmax over the level axis of `[N, C, L, H, W]` logits.
pub fn level_probabilities(logits: &Tensor) -> Result<Tensor> {
    let [_, _, levels, h, w] = logits.shape()[..] else {
        return Err(Error::shape("level_probabilities", format!("logits {:?}", logits.shape())));
    };
    let inner = h * w;
    let mut out = logits.clone();
    let data = out.data_mut();
    for o in 0..data.len() / (levels * inner) {
        for i in 0..inner {
            let at = |l: usize| (o * levels + l) * inner + i;
            let max = (0..levels).map(|l| data[at(l)]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for l in 0..levels {
                data[at(l)] = (data[at(l)] - max).exp();
                z += data[at(l)];
            }
            for l in 0..levels {
                data[at(l)] /= z;
            }
        }
    }
    Ok(out)
}

/// Convolutional encoder: three stages of (3x3 conv, relu, 2x decimation)
/// with 16, 32 and 32 maps, then a linear map to `m` outputs.
#[derive(Clone, Debug)]
pub struct Encoder {
    stages: Vec<ConvParam>,
    fc_weight: crate::params::ParamId,
    fc_bias: crate::params::ParamId,
    flat: usize,
    dim: usize,
}

const ENCODER_WIDTHS: [usize; 3] = [16, 32, 32];

impl Encoder {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, (c, h, w): (usize, usize, usize), dim: usize) -> Self {
        let mut cin = c;
        let (mut hh, mut ww) = (h, w);
        let stages = ENCODER_WIDTHS
            .iter()
            .enumerate()
            .map(|(i, &cout)| {
                let conv = ConvParam::new(store, rng, &format!("encoder.conv{i}"), [cout, cin, 3, 3], None, Pad::uniform(1));
                cin = cout;
                hh = hh.div_ceil(2);
                ww = ww.div_ceil(2);
                conv
            })
            .collect();
        let flat = cin * hh * ww;
        let fc_weight = store.add(
            "encoder.fc.weight",
            crate::layers::init_weight(rng, &[flat, dim], None),
        );
        let fc_bias = store.add("encoder.fc.bias", Tensor::zeros(&[dim]));
        Self {
            stages,
            fc_weight,
            fc_bias,
            flat,
            dim,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `h[N, m]` from scaled images.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let n = tape.value(x).shape()[0];
        let mut y = x;
        for conv in &self.stages {
            y = conv.apply(tape, store, y)?;
            y = tape.relu(y)?;
            y = tape.downsample(y, 2)?;
        }
        let y = tape.reshape(y, &[n, self.flat])?;
        let w = tape.param(store, self.fc_weight);
        let b = tape.param(store, self.fc_bias);
        let y = tape.matmul(y, w)?;
        tape.add_channel(y, b)
    }
}

/// Encoder plus a decoder PixelCNN globally conditioned on the latent,
/// trained end-to-end on the decoder's likelihood.
#[derive(Clone, Debug)]
pub struct PixelCNNAutoencoder {
    config: ModelConfig,
    params: ParamStore,
    encoder: Encoder,
    net: Network,
}

impl PixelCNNAutoencoder {
    /// `config.bottleneck` must be set; the decoder conditioning is derived from it.
    pub fn new(mut config: ModelConfig, seed: u64) -> Result<Self> {
        let m = config
            .bottleneck
            .ok_or_else(|| Error::Invalid("autoencoder needs a bottleneck size".into()))?;
        config.conditioning = CondMode::Global { dim: m };
        config.validate()?;
        let mut params = ParamStore::new();
        let mut rng = Rng::new(seed);
        let encoder = Encoder::new(&mut params, &mut rng, (config.channels, config.height, config.width), m);
        let net = Network::build(&config, &mut params, &mut rng)?;
        Ok(Self {
            config,
            params,
            encoder,
            net,
        })
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    fn encode_var(&self, tape: &mut Tape, images: &Tensor) -> Result<(Var, Var)> {
        let x = scaled_input(&self.config, images, self.config.height)?;
        let x = tape.constant(x);
        let h = self.encoder.forward(tape, &self.params, x)?;
        Ok((x, h))
    }

    /// Latent codes `h[N, m]`.
    pub fn encode(&self, images: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let (_, h) = self.encode_var(&mut tape, images)?;
        Ok(tape.value(h).clone())
    }

    /// `(h, logits)` with the decoder conditioned on the image's own code.
    pub fn autoencoder_forward(&self, images: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let (x, h) = self.encode_var(&mut tape, images)?;
        let y = self.net.forward(&self.config, &mut tape, &self.params, x, CondVar::Global(h))?;
        Ok((tape.value(h).clone(), tape.value(y).clone()))
    }
}

impl Autoregressive for PixelCNNAutoencoder {
    fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Reconstruction likelihood: `cond` must be `None`, the latent comes from the encoder.
    fn loss(&self, tape: &mut Tape, images: &Tensor, cond: &Conditioning) -> Result<Var> {
        if *cond != Conditioning::None {
            return Err(Error::Conditioning("autoencoder conditions on its own latent code".into()));
        }
        let (x, h) = self.encode_var(tape, images)?;
        let y = self.net.forward(&self.config, tape, &self.params, x, CondVar::Global(h))?;
        bits_loss(tape, y, images)
    }

    /// Decoder logits given an explicit latent `Conditioning::Global(h)`.
    fn logits_rows(&self, images: &Tensor, cond: &Conditioning, rows: usize) -> Result<Tensor> {
        let x = scaled_input(&self.config, images, rows)?;
        let mut tape = Tape::new();
        let cv = self.net.conditioning(&self.config, &mut tape, &self.params, cond, images.shape()[0], rows)?;
        let x = tape.constant(x);
        let y = self.net.forward(&self.config, &mut tape, &self.params, x, cv)?;
        Ok(tape.value(y).clone())
    }

    fn nll(&self, images: &Tensor, cond: &Conditioning) -> Result<f64> {
        let mut tape = Tape::new();
        let loss = self.loss(&mut tape, images, cond)?;
        Ok(tape.value(loss).item())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_images(rng: &mut Rng, n: usize, cfg: &ModelConfig) -> Tensor {
        Tensor::from_fn(&[n, cfg.channels, cfg.height, cfg.width], |_| rng.below(cfg.levels) as f64)
    }

    /// Closed-form count of the two-stack wiring with 1x1 residual and no conditioning.
    fn two_stack_count(k: usize, p: usize, n: usize, c: usize, levels: usize, head: usize) -> usize {
        let half = n.div_ceil(2);
        let input = (p * c * half * n + p) + (p * c * half + p);
        let block = (2 * p * p * half * n + 2 * p) // vertical
            + (2 * p * p * half + 2 * p) // horizontal
            + (2 * p * 2 * p + 2 * p) // link
            + (p * p + p); // residual
        let head = (head * p + head) + (c * levels * head + c * levels);
        input + k * block + head
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        for (cfg, k, p, n, c, l, hw) in [
            (ModelConfig::mnist_small(), 6, 32, 5, 1, 4, 64),
            (ModelConfig::tiny(6, 6, 3, 4), 2, 12, 3, 3, 4, 12),
        ] {
            let m = GatedPixelCNN::new(cfg, 0).unwrap();
            assert_eq!(m.params().count(), two_stack_count(k, p, n, c, l, hw));
        }
    }

    #[test]
    fn imagenet_preset_is_constructible() {
        let cfg = ModelConfig::imagenet_paper();
        cfg.validate().unwrap();
        assert_eq!((cfg.layers, cfg.features, cfg.filter, cfg.levels), (20, 384, 5, 256));
    }

    #[test]
    fn invalid_configs_rejected() {
        let base = ModelConfig::tiny(4, 4, 1, 4);
        for cfg in [
            ModelConfig { levels: 1, ..base.clone() },
            ModelConfig { filter: 4, ..base.clone() },
            ModelConfig { channels: 2, ..base.clone() },
            ModelConfig { channels: 3, features: 4, ..base.clone() },
            ModelConfig { bottleneck: Some(3), ..base.clone() },
        ] {
            assert!(cfg.validate().is_err(), "{cfg:?}");
        }
    }

    #[test]
    fn relu_ablation_matches_parameter_count() {
        let gated = ModelConfig::mnist_small();
        let relu = gated.relu_ablation().unwrap();
        assert_eq!(relu.activation, Activation::Relu);
        let n = |c: &ModelConfig| GatedPixelCNN::new(c.clone(), 0).unwrap().params().count() as f64;
        assert!((n(&relu) / n(&gated) - 1.0).abs() < 0.05, "{} vs {}", n(&relu), n(&gated));
    }

    #[test]
    fn kv_round_trip_and_fingerprint() {
        let mut cfg = ModelConfig::tiny(6, 6, 3, 8);
        cfg.conditioning = CondMode::Spatial { dim: 5, channels: 2 };
        cfg.activation = Activation::Relu;
        cfg.architecture = Architecture::SingleStack;
        let back = ModelConfig::from_kv(&cfg.to_kv()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.fingerprint(), cfg.fingerprint());
        let mut other = cfg.clone();
        other.levels = 4;
        assert_ne!(other.fingerprint(), cfg.fingerprint());
        assert!(ModelConfig::from_kv("bogus=1").is_err());
    }

    #[test]
    fn zero_weights_give_uniform_predictions() {
        let cfg = ModelConfig::tiny(5, 5, 3, 4);
        let mut m = GatedPixelCNN::new(cfg.clone(), 1).unwrap();
        m.params_mut().zero();
        let mut rng = Rng::new(2);
        let x = random_images(&mut rng, 2, &cfg);
        let logits = m.forward_logits(&x, &Conditioning::None).unwrap();
        assert_eq!(logits.shape(), &[2, 3, 4, 5, 5]);
        assert!(logits.data().iter().all(|&v| v == 0.0));
        assert!((nll_bits_per_dim(&logits, &x).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn uniform_logits_give_log2_levels() {
        for levels in [4usize, 256] {
            let logits = Tensor::zeros(&[2, 1, levels, 3, 3]);
            let x = Tensor::from_fn(&[2, 1, 3, 3], |i| (i * 7 % levels) as f64);
            let bits = nll_bits_per_dim(&logits, &x).unwrap();
            assert!((bits - (levels as f64).log2()).abs() < 1e-12);
        }
    }

    #[test]
    fn one_hot_logits_give_zero_bits() {
        let x = Tensor::from_fn(&[1, 1, 2, 2], |i| (i % 4) as f64);
        let mut logits = Tensor::zeros(&[1, 1, 4, 2, 2]);
        for i in 0..4 {
            logits.set(&[0, 0, i % 4, i / 2, i % 2], 1000.0);
        }
        assert!(nll_bits_per_dim(&logits, &x).unwrap() < 1e-12);
    }

    #[test]
    fn probabilities_sum_to_one() {
        let cfg = ModelConfig::tiny(4, 4, 3, 5);
        let m = GatedPixelCNN::new(cfg.clone(), 3).unwrap();
        let mut rng = Rng::new(4);
        let probs = level_probabilities(&m.forward_logits(&random_images(&mut rng, 2, &cfg), &Conditioning::None).unwrap()).unwrap();
        for o in 0..2 * 3 {
            for i in 0..16 {
                let s: f64 = (0..5).map(|l| probs.data()[(o * 5 + l) * 16 + i]).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn out_of_range_levels_rejected() {
        let cfg = ModelConfig::tiny(3, 3, 1, 4);
        let m = GatedPixelCNN::new(cfg, 0).unwrap();
        let mut x = Tensor::zeros(&[1, 1, 3, 3]);
        x.set(&[0, 0, 1, 1], 4.0);
        assert!(matches!(
            m.forward_logits(&x, &Conditioning::None),
            Err(Error::LevelOutOfRange { level: 4, levels: 4 })
        ));
    }

    #[test]
    fn row_prefix_logits_match_full_pass() {
        for arch in [Architecture::TwoStack, Architecture::SingleStack] {
            let cfg = ModelConfig {
                architecture: arch,
                conditioning: CondMode::Spatial { dim: 3, channels: 2 },
                ..ModelConfig::tiny(6, 5, 3, 4)
            };
            let m = GatedPixelCNN::new(cfg.clone(), 5).unwrap();
            let mut rng = Rng::new(6);
            let x = random_images(&mut rng, 2, &cfg);
            let cond = Conditioning::Global(Tensor::from_fn(&[2, 3], |_| rng.normal()));
            let full = m.forward_logits(&x, &cond).unwrap();
            for rows in 1..=6 {
                let part = m.logits_rows(&x, &cond, rows).unwrap();
                let mut expect = full.clone().reshape(&[2 * 3 * 4, 6, 5]).unwrap().crop_rows(rows).unwrap();
                expect = expect.reshape(&[2, 3, 4, rows, 5]).unwrap();
                assert_eq!(part, expect, "{arch:?} rows {rows}");
            }
        }
    }

    #[test]
    fn class_conditioning_changes_logits() {
        let cfg = ModelConfig {
            conditioning: CondMode::Global { dim: 2 },
            ..ModelConfig::tiny(4, 4, 1, 4)
        };
        let m = GatedPixelCNN::new(cfg.clone(), 7).unwrap();
        let x = Tensor::zeros(&[1, 1, 4, 4]);
        let a = m.forward_logits(&x, &Conditioning::Global(Tensor::new(&[1, 2], vec![1.0, 0.0]).unwrap())).unwrap();
        let b = m.forward_logits(&x, &Conditioning::Global(Tensor::new(&[1, 2], vec![0.0, 1.0]).unwrap())).unwrap();
        assert!(a.max_abs_diff(&b) > 1e-6);
        assert!(m.forward_logits(&x, &Conditioning::None).is_err());
        assert!(m.forward_logits(&x, &Conditioning::Global(Tensor::zeros(&[1, 3]))).is_err());
    }

    fn ae_config(m: usize) -> ModelConfig {
        ModelConfig {
            bottleneck: Some(m),
            ..ModelConfig::tiny(8, 8, 1, 4)
        }
    }

    #[test]
    fn encoder_output_sizes_and_determinism() {
        for m in [10, 100] {
            let ae = PixelCNNAutoencoder::new(ae_config(m), 1).unwrap();
            let mut rng = Rng::new(2);
            let x = random_images(&mut rng, 3, ae.config());
            let h = ae.encode(&x).unwrap();
            assert_eq!(h.shape(), &[3, m]);
            assert_eq!(h, ae.encode(&x).unwrap());
        }
        let mut ae = PixelCNNAutoencoder::new(ae_config(10), 1).unwrap();
        ae.params_mut().zero();
        let x = Tensor::full(&[1, 1, 8, 8], 2.0);
        assert!(ae.encode(&x).unwrap().data().iter().all(|&v| v == 0.0));
        let (_, logits) = ae.autoencoder_forward(&x).unwrap();
        assert!(logits.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn latent_reaches_every_pixel_and_gradients_reach_encoder() {
        let ae = PixelCNNAutoencoder::new(ae_config(10), 3).unwrap();
        let mut rng = Rng::new(4);
        let x = random_images(&mut rng, 1, ae.config());
        let h = ae.encode(&x).unwrap();
        let base = ae.forward_logits(&x, &Conditioning::Global(h.clone())).unwrap();
        let mut h2 = h.clone();
        h2.data_mut()[0] += 0.5;
        let moved = ae.forward_logits(&x, &Conditioning::Global(h2)).unwrap();
        for y in 0..8 {
            for xx in 0..8 {
                let d = (0..4).map(|l| (base.at(&[0, 0, l, y, xx]) - moved.at(&[0, 0, l, y, xx])).abs()).fold(0.0, f64::max);
                assert!(d > 0.0, "pixel ({y},{xx}) ignores the latent");
            }
        }
        let mut tape = Tape::new();
        let loss = ae.loss(&mut tape, &x, &Conditioning::None).unwrap();
        let grads = tape.backward(loss).unwrap();
        let enc = ae.params().ids().filter(|&id| ae.params().name(id).starts_with("encoder."));
        let total: f64 = enc.filter_map(|id| grads.param(id)).map(Tensor::norm).sum();
        assert!(total > 0.0);
    }
}
