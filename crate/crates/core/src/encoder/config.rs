//! Text grammar for encoder layouts.
//!
//! One directive per line, `#` starts a comment:
//!
//! ```text
//! input {40}                      # mel bins fed to the first layer
//! conv_order channels,kernel,stride
//! conv {384, 5, 2}                # optional trailing `xN` repeats a line
//! attention {512, 2048, 8} x2     # {embed, feedforward, heads}
//! projection {256}
//! predictor {256, 5, 1} x2        # student-only conv stack, stride 1
//! conv_activation relu            # relu | gelu
//! ff_activation gelu
//! dropout 0.0
//! aggregate top                   # top | all
//! ```
//!
//! `conv_order` sets how the three conv numbers are read and applies to the
//! `conv` and `predictor` lines that follow it.

use std::fmt::Write as _;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnSpec {
    pub embed_dim: usize,
    pub ff_dim: usize,
    pub n_heads: usize,
    /// Explicit per-head width; `None` splits `embed_dim` evenly.
    pub head_dim: Option<usize>,
    pub count: usize,
}

impl AttnSpec {
    /// Width of the concatenated heads (q/k/v output, o input).
    pub fn inner_dim(&self) -> usize {
        self.head_dim.map_or(self.embed_dim, |h| h * self.n_heads)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerSpec {
    Conv(ConvSpec),
    Attention(AttnSpec),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Gelu,
}

impl Activation {
    fn parse(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Self::Relu),
            "gelu" => Ok(Self::Gelu),
            o => Err(Error::Config(format!("unknown activation {o:?}"))),
        }
    }

    fn name(self) -> &'static str {
        match self {
            Self::Relu => "relu",
            Self::Gelu => "gelu",
        }
    }
}

/// Which attention layers feed the downstream weighted sum.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Aggregate {
    /// The final attention stage only.
    Top,
    /// Every attention layer, earlier stages resampled to the top-stage rate.
    All,
}

impl std::str::FromStr for Aggregate {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "top" => Ok(Self::Top),
            "all" => Ok(Self::All),
            o => Err(Error::Config(format!("unknown aggregate mode {o:?} (top|all)"))),
        }
    }
}

/// Field order of the three conv numbers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvOrder {
    ChannelsKernelStride,
    KernelChannelsStride,
}

impl ConvOrder {
    fn read(self, v: [usize; 3]) -> ConvSpec {
        match self {
            Self::ChannelsKernelStride => ConvSpec { channels: v[0], kernel: v[1], stride: v[2] },
            Self::KernelChannelsStride => ConvSpec { kernel: v[0], channels: v[1], stride: v[2] },
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub n_mels: usize,
    pub layers: Vec<LayerSpec>,
    pub projection_dim: usize,
    pub predictor: Vec<ConvSpec>,
    pub conv_activation: Activation,
    pub ff_activation: Activation,
    pub dropout: f64,
    pub aggregate: Aggregate,
}

pub const PAPER_PRESET: &str = include_str!("../../presets/paper.enc");
pub const TINY_PRESET: &str = include_str!("../../presets/tiny.enc");

impl EncoderConfig {
    pub fn paper() -> Self {
        Self::parse(PAPER_PRESET).expect("paper preset parses")
    }

    pub fn tiny() -> Self {
        Self::parse(TINY_PRESET).expect("tiny preset parses")
    }

    /// Resolves `paper`, `tiny`, or a path to a layout file.
    pub fn from_preset_or_path(name: &str) -> Result<Self> {
        match name {
            "paper" => Ok(Self::paper()),
            "tiny" => Ok(Self::tiny()),
            path => Self::parse(&std::fs::read_to_string(path)?),
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = EncoderConfig {
            n_mels: 40,
            layers: Vec::new(),
            projection_dim: 256,
            predictor: Vec::new(),
            conv_activation: Activation::Relu,
            ff_activation: Activation::Gelu,
            dropout: 0.0,
            aggregate: Aggregate::Top,
        };
        let mut order = ConvOrder::ChannelsKernelStride;
        let mut saw_projection = false;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let at = |msg: String| Error::Config(format!("line {}: {msg}", lineno + 1));
            let (head, rest) = line.split_once(char::is_whitespace).unwrap_or((line, ""));
            let rest = rest.trim();
            match head {
                "input" => cfg.n_mels = one(&braced(rest).map_err(at)?.0).map_err(at)?,
                "projection" => {
                    cfg.projection_dim = one(&braced(rest).map_err(at)?.0).map_err(at)?;
                    saw_projection = true;
                }
                "conv" | "predictor" => {
                    let (nums, reps) = braced(rest).map_err(at)?;
                    let spec = order.read(three(&nums).map_err(at)?);
                    for _ in 0..reps {
                        if head == "conv" {
                            cfg.layers.push(LayerSpec::Conv(spec));
                        } else {
                            cfg.predictor.push(spec);
                        }
                    }
                }
                "attention" => {
                    let (nums, reps) = braced(rest).map_err(at)?;
                    let (embed_dim, ff_dim, n_heads, head_dim) = match nums[..] {
                        [e, f, h] => (e, f, h, None),
                        [e, f, h, dh] => (e, f, h, Some(dh)),
                        _ => return Err(at(format!("attention expects 3 or 4 values, got {nums:?}"))),
                    };
                    cfg.layers.push(LayerSpec::Attention(AttnSpec { embed_dim, ff_dim, n_heads, head_dim, count: reps }));
                }
                "conv_order" => {
                    let norm: String = rest.chars().filter(|c| !c.is_whitespace()).collect();
                    order = match norm.as_str() {
                        "channels,kernel,stride" => ConvOrder::ChannelsKernelStride,
                        "kernel,channels,stride" => ConvOrder::KernelChannelsStride,
                        o => return Err(at(format!("unknown conv_order {o:?}"))),
                    };
                }
                "conv_activation" => cfg.conv_activation = Activation::parse(rest).map_err(|e| at(e.to_string()))?,
                "ff_activation" => cfg.ff_activation = Activation::parse(rest).map_err(|e| at(e.to_string()))?,
                "dropout" => cfg.dropout = rest.parse().map_err(|_| at(format!("bad dropout {rest:?}")))?,
                "aggregate" => cfg.aggregate = rest.parse().map_err(|e: Error| at(e.to_string()))?,
                other => return Err(at(format!("unknown directive {other:?}"))),
            }
        }
        if !saw_projection {
            return Err(Error::Config("missing projection line".into()));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let layer_err = |i: usize, msg: String| Error::Config(format!("layer {i}: {msg}"));
        if self.n_mels == 0 {
            return Err(Error::Config("input must have at least one mel bin".into()));
        }
        if !self.layers.iter().any(|l| matches!(l, LayerSpec::Conv(_))) {
            return Err(Error::Config("encoder needs at least one conv layer".into()));
        }
        if !self.layers.iter().any(|l| matches!(l, LayerSpec::Attention(_))) {
            return Err(Error::Config("encoder needs at least one attention layer".into()));
        }
        for (i, l) in self.layers.iter().enumerate() {
            match l {
                LayerSpec::Conv(c) => {
                    if c.channels == 0 || c.kernel == 0 || c.stride == 0 {
                        return Err(layer_err(i, format!("conv {c:?} needs positive fields")));
                    }
                }
                LayerSpec::Attention(a) => {
                    if a.embed_dim == 0 || a.ff_dim == 0 || a.n_heads == 0 || a.count == 0 {
                        return Err(layer_err(i, format!("attention {a:?} needs positive fields")));
                    }
                    if a.head_dim == Some(0) {
                        return Err(layer_err(i, "zero head dim".into()));
                    }
                    if a.head_dim.is_none() && a.embed_dim % a.n_heads != 0 {
                        return Err(layer_err(
                            i,
                            format!("embed dim {} not divisible by {} heads", a.embed_dim, a.n_heads),
                        ));
                    }
                }
            }
        }
        if self.projection_dim == 0 {
            return Err(Error::Config("projection dim must be positive".into()));
        }
        if self.predictor.is_empty() {
            return Err(Error::Config("predictor needs at least one conv".into()));
        }
        for (i, p) in self.predictor.iter().enumerate() {
            if p.stride != 1 || p.kernel % 2 == 0 || p.channels == 0 {
                return Err(Error::Config(format!(
                    "predictor {i}: needs stride 1 and an odd kernel for same padding, got {p:?}"
                )));
            }
        }
        if self.predictor.last().map(|p| p.channels) != Some(self.projection_dim) {
            return Err(Error::Config("last predictor conv must output projection_dim channels".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must be in [0, 1)".into()));
        }
        if self.aggregate == Aggregate::All {
            let dims: Vec<usize> = self.attention_layers().iter().map(|a| a.embed_dim).collect();
            if dims.windows(2).any(|w| w[0] != w[1]) {
                return Err(Error::Config("aggregate=all needs equal embed dims across attention layers".into()));
            }
        }
        Ok(())
    }

    /// Product of encoder conv strides.
    pub fn downsample(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match l {
                LayerSpec::Conv(c) => c.stride,
                LayerSpec::Attention(_) => 1,
            })
            .product()
    }

    /// One entry per attention layer (repeats expanded).
    pub fn attention_layers(&self) -> Vec<AttnSpec> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                LayerSpec::Attention(a) => Some(std::iter::repeat_n(*a, a.count)),
                LayerSpec::Conv(_) => None,
            })
            .flatten()
            .collect()
    }

    /// Indices (into the expanded attention list) of the final stage: the
    /// attention layers after the last conv that precedes any of them.
    pub fn top_stage(&self) -> std::ops::Range<usize> {
        let total = self.attention_layers().len();
        let mut start = 0;
        let mut seen = 0;
        let mut prev_conv = true;
        for l in &self.layers {
            match l {
                LayerSpec::Conv(_) => prev_conv = true,
                LayerSpec::Attention(a) => {
                    if prev_conv {
                        start = seen;
                    }
                    seen += a.count;
                    prev_conv = false;
                }
            }
        }
        start..total
    }

    /// Attention layers fed to the downstream weighted sum.
    pub fn aggregated(&self) -> std::ops::Range<usize> {
        match self.aggregate {
            Aggregate::Top => self.top_stage(),
            Aggregate::All => 0..self.attention_layers().len(),
        }
    }

    /// Output frames for `t` input frames, or `None` if a conv runs dry.
    pub fn output_frames(&self, t: usize) -> Option<usize> {
        let mut t = t;
        for l in &self.layers {
            if let LayerSpec::Conv(c) = l {
                t = conv_out_len(t, c.kernel, c.stride)?;
            }
        }
        Some(t)
    }

    /// Width of the final encoder representation.
    pub fn output_dim(&self) -> usize {
        self.stage_dims().last().copied().unwrap_or(self.n_mels)
    }

    /// Feature width after each layer spec.
    pub(crate) fn stage_dims(&self) -> Vec<usize> {
        self.layers
            .iter()
            .map(|l| match l {
                LayerSpec::Conv(c) => c.channels,
                LayerSpec::Attention(a) => a.embed_dim,
            })
            .collect()
    }

    /// Canonical text; `parse(to_text())` reproduces the config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "input {{{}}}", self.n_mels);
        let _ = writeln!(s, "conv_order channels,kernel,stride");
        for l in &self.layers {
            match l {
                LayerSpec::Conv(c) => {
                    let _ = writeln!(s, "conv {{{}, {}, {}}}", c.channels, c.kernel, c.stride);
                }
                LayerSpec::Attention(a) => {
                    let dh = a.head_dim.map(|h| format!(", {h}")).unwrap_or_default();
                    let _ = writeln!(s, "attention {{{}, {}, {}{dh}}} x{}", a.embed_dim, a.ff_dim, a.n_heads, a.count);
                }
            }
        }
        let _ = writeln!(s, "projection {{{}}}", self.projection_dim);
        for p in &self.predictor {
            let _ = writeln!(s, "predictor {{{}, {}, {}}}", p.channels, p.kernel, p.stride);
        }
        let _ = writeln!(s, "conv_activation {}", self.conv_activation.name());
        let _ = writeln!(s, "ff_activation {}", self.ff_activation.name());
        let _ = writeln!(s, "dropout {}", self.dropout);
        let _ = writeln!(
            s,
            "aggregate {}",
            match self.aggregate {
                Aggregate::Top => "top",
                Aggregate::All => "all",
            }
        );
        s
    }
}

/// Same-style padding used by every conv: `(kernel - 1) / 2`.
pub fn conv_padding(kernel: usize) -> usize {
    (kernel - 1) / 2
}

pub fn conv_out_len(t: usize, kernel: usize, stride: usize) -> Option<usize> {
    let span = t + 2 * conv_padding(kernel);
    if span < kernel {
        None
    } else {
        Some((span - kernel) / stride + 1)
    }
}

fn braced(s: &str) -> std::result::Result<(Vec<usize>, usize), String> {
    let open = s.find('{').ok_or_else(|| format!("expected {{...}} in {s:?}"))?;
    let close = s.find('}').ok_or_else(|| format!("unclosed brace in {s:?}"))?;
    let nums = s[open + 1..close]
        .split(',')
        .map(|t| t.trim().parse::<usize>().map_err(|_| format!("bad number {:?}", t.trim())))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let tail = s[close + 1..].trim();
    let reps = if tail.is_empty() {
        1
    } else {
        tail.strip_prefix('x')
            .and_then(|n| n.trim().parse::<usize>().ok())
            .filter(|&n| n > 0)
            .ok_or_else(|| format!("bad repeat {tail:?}"))?
    };
    Ok((nums, reps))
}

fn one(v: &[usize]) -> std::result::Result<usize, String> {
    match v {
        [a] => Ok(*a),
        _ => Err(format!("expected one value, got {v:?}")),
    }
}

fn three(v: &[usize]) -> std::result::Result<[usize; 3], String> {
    match v {
        [a, b, c] => Ok([*a, *b, *c]),
        _ => Err(format!("expected three values, got {v:?}")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_preset_layout() {
        let cfg = EncoderConfig::paper();
        assert_eq!(cfg.downsample(), 8);
        assert_eq!(
            cfg.layers,
            vec![
                LayerSpec::Conv(ConvSpec { channels: 384, kernel: 5, stride: 2 }),
                LayerSpec::Conv(ConvSpec { channels: 512, kernel: 5, stride: 2 }),
                LayerSpec::Conv(ConvSpec { channels: 512, kernel: 1, stride: 1 }),
                LayerSpec::Attention(AttnSpec { embed_dim: 512, ff_dim: 2048, n_heads: 8, head_dim: None, count: 2 }),
                LayerSpec::Conv(ConvSpec { channels: 1536, kernel: 5, stride: 2 }),
                LayerSpec::Conv(ConvSpec { channels: 768, kernel: 1, stride: 1 }),
                LayerSpec::Attention(AttnSpec { embed_dim: 512, ff_dim: 3072, n_heads: 12, head_dim: Some(64), count: 2 }),
            ]
        );
        assert_eq!(cfg.projection_dim, 256);
        assert_eq!(cfg.predictor.len(), 3);
        assert_eq!(cfg.output_frames(100), Some(13));
        assert_eq!(cfg.output_frames(200), Some(25));
        assert_eq!(cfg.top_stage(), 2..4);
    }

    #[test]
    fn tiny_preset_parses() {
        let cfg = EncoderConfig::tiny();
        assert_eq!(cfg.downsample(), 8);
        assert!(cfg.attention_layers().iter().all(|a| a.embed_dim == 64 && a.n_heads == 2));
    }

    #[test]
    fn indivisible_heads_rejected() {
        let text = PAPER_PRESET.replace("attention {512, 2048, 8}", "attention {510, 2048, 8}");
        let err = EncoderConfig::parse(&text).unwrap_err().to_string();
        assert!(err.contains("layer 3"), "{err}");
    }

    #[test]
    fn kernel_first_order_reads_the_same_layout() {
        let text = "conv_order kernel,channels,stride\ninput {40}\nconv {5, 384, 2}\nattention {384, 64, 2}\nprojection {8}\npredictor {1, 8, 1}\n";
        let cfg = EncoderConfig::parse(text).unwrap();
        assert_eq!(cfg.layers[0], LayerSpec::Conv(ConvSpec { channels: 384, kernel: 5, stride: 2 }));
    }

    #[test]
    fn text_round_trip() {
        for cfg in [EncoderConfig::paper(), EncoderConfig::tiny()] {
            assert_eq!(EncoderConfig::parse(&cfg.to_text()).unwrap(), cfg);
        }
    }

    #[test]
    fn structural_errors() {
        assert!(EncoderConfig::parse("input {40}\nconv {8, 3, 1}\nprojection {8}\npredictor {8,1,1}").is_err());
        assert!(EncoderConfig::parse("input {40}\nattention {8, 8, 2}\nprojection {8}\npredictor {8,1,1}").is_err());
        assert!(EncoderConfig::parse("input {40}\nconv {8,3,1}\nattention {8,8,2}\nprojection {8}\npredictor {8,2,1}").is_err());
        assert!(EncoderConfig::parse("bogus {1}").is_err());
    }
}
