//! Plain `key = value` configuration. Every key has a default; unknown keys
//! are rejected.

use std::fmt;
use std::str::FromStr;

use crate::error::{BrauError, Result};

/// Routed regions per query region.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TopK {
    /// All `S²` regions.
    Full,
    Count(usize),
}

impl TopK {
    pub fn resolve(self, regions: usize) -> usize {
        match self {
            TopK::Full => regions,
            TopK::Count(k) => k,
        }
    }
}

impl fmt::Display for TopK {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TopK::Full => f.write_str("full"),
            TopK::Count(k) => write!(f, "{k}"),
        }
    }
}

impl FromStr for TopK {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "full" => Ok(TopK::Full),
            _ => match s.parse::<usize>() {
                Ok(0) => Err("top-k must be at least 1".into()),
                Ok(k) => Ok(TopK::Count(k)),
                Err(_) => Err(format!("expected an integer or `full`, got `{s}`")),
            },
        }
    }
}

macro_rules! keyword_enum {
    ($(#[$m:meta])* $name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$m])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq)]
        pub enum $name {
            $($variant),+
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self {
                    $($name::$variant => $text),+
                })
            }
        }

        impl FromStr for $name {
            type Err = String;

            fn from_str(s: &str) -> std::result::Result<Self, String> {
                match s {
                    $($text => Ok($name::$variant),)+
                    _ => Err(format!(
                        "expected one of {}, got `{s}`",
                        [$($text),+].join("|")
                    )),
                }
            }
        }
    };
}

keyword_enum!(
    /// Softmax temperature for multi-head attention.
    ScaleMode { PerHead => "per_head", PerChannel => "per_channel" }
);
keyword_enum!(
    /// Normalization inside the stem.
    EmbedNorm { Layer => "layer", Batch => "batch" }
);
keyword_enum!(OptimKind { Sgd => "sgd", Adam => "adam" });
keyword_enum!(Schedule { Constant => "constant", Cosine => "cosine" });
keyword_enum!(SplitMode { Fixed => "fixed", Kfold => "kfold" });
keyword_enum!(
    /// Pixel sets compared by the Hausdorff distance.
    HdPoints { All => "all", Boundary => "boundary" }
);

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    pub base_channels: usize,
    pub stage_depths: [usize; 7],
    pub top_k_schedule: [TopK; 7],
    /// Region-grid side `S`.
    pub partition: usize,
    pub input_hw: usize,
    pub sccsa_enabled: bool,
    /// Skip connections at 1/4, 1/8, 1/16 resolution.
    pub skip_mask: [bool; 3],
    pub scale_mode: ScaleMode,
    pub qkv_bias: bool,
    pub head_dim: usize,
    pub mlp_ratio: usize,
    pub lce_kernel: usize,
    pub embed_norm: EmbedNorm,
    pub ln_eps: f64,
    pub bn_eps: f64,
    pub bn_momentum: f64,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            num_classes: 9,
            base_channels: 96,
            stage_depths: [2, 2, 8, 2, 8, 2, 2],
            top_k_schedule: [
                TopK::Count(2),
                TopK::Count(4),
                TopK::Count(8),
                TopK::Full,
                TopK::Count(8),
                TopK::Count(4),
                TopK::Count(2),
            ],
            partition: 7,
            input_hw: 224,
            sccsa_enabled: true,
            skip_mask: [true; 3],
            scale_mode: ScaleMode::PerHead,
            qkv_bias: true,
            head_dim: 32,
            mlp_ratio: 3,
            lce_kernel: 5,
            embed_norm: EmbedNorm::Layer,
            ln_eps: 1e-6,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    /// Channels of stages 1..=7.
    pub fn stage_dims(&self) -> [usize; 7] {
        let c = self.base_channels;
        [c, 2 * c, 4 * c, 8 * c, 4 * c, 2 * c, c]
    }

    /// Downsampling factor of each stage relative to the input.
    pub fn stage_strides() -> [usize; 7] {
        [4, 8, 16, 32, 16, 8, 4]
    }

    /// Partition factor actually used on an `h`×`w` feature map: `S`, or
    /// the map side when the map is smaller than `S`.
    pub fn effective_partition(&self, h: usize, w: usize) -> Result<usize> {
        let s = self.partition.min(h).min(w);
        if s == 0 || !h.is_multiple_of(s) || !w.is_multiple_of(s) {
            return Err(BrauError::config(
                "S",
                format!(
                    "partition factor {} does not divide a {h}x{w} feature map",
                    self.partition
                ),
            ));
        }
        Ok(s)
    }

    pub fn heads(&self, dim: usize) -> usize {
        let h = (dim / self.head_dim.max(1)).max(1);
        if dim.is_multiple_of(h) {
            h
        } else {
            1
        }
    }

    /// Checks that an `h`×`w` input is usable at every stage.
    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        if !h.is_multiple_of(32) || !w.is_multiple_of(32) || h == 0 || w == 0 {
            return Err(BrauError::config(
                "input_hw",
                format!("input {h}x{w} must be a positive multiple of 32"),
            ));
        }
        for (i, st) in Self::stage_strides().iter().enumerate() {
            let (sh, sw) = (h / st, w / st);
            let s = self.effective_partition(sh, sw)?;
            let k = self.top_k_schedule[i].resolve(s * s);
            if k > s * s {
                return Err(BrauError::config(
                    "top_k_schedule",
                    format!("stage {} routes {k} of only {} regions", i + 1, s * s),
                ));
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 {
            return Err(BrauError::config("in_channels", "must be positive"));
        }
        if self.num_classes < 2 {
            return Err(BrauError::config("num_classes", "need at least 2 classes"));
        }
        if self.base_channels < 2 || !self.base_channels.is_multiple_of(2) {
            return Err(BrauError::config(
                "base_channels",
                "must be a positive even number",
            ));
        }
        if self.partition == 0 {
            return Err(BrauError::config("S", "must be positive"));
        }
        if self.head_dim == 0 || self.mlp_ratio == 0 {
            return Err(BrauError::config(
                "head_dim",
                "head_dim and mlp_ratio must be positive",
            ));
        }
        if self.lce_kernel.is_multiple_of(2) {
            return Err(BrauError::config("lce_kernel", "must be odd"));
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum <= 1.0) {
            return Err(BrauError::config("bn_momentum", "must lie in (0, 1]"));
        }
        if self.ln_eps <= 0.0 || self.bn_eps <= 0.0 {
            return Err(BrauError::config(
                "ln_eps",
                "normalization eps must be positive",
            ));
        }
        self.check_input(self.input_hw, self.input_hw)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimConfig {
    pub kind: OptimKind,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub schedule: Schedule,
    pub epochs: usize,
    pub batch_size: usize,
    /// Also decay norm affines and biases.
    pub decay_all: bool,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            kind: OptimKind::Sgd,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            schedule: Schedule::Constant,
            epochs: 400,
            batch_size: 24,
            decay_all: false,
        }
    }
}

impl OptimConfig {
    pub fn adam_regime() -> Self {
        Self {
            kind: OptimKind::Adam,
            lr: 5e-4,
            schedule: Schedule::Cosine,
            epochs: 200,
            batch_size: 16,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    /// Dice weight; `1 - lambda` goes to cross-entropy.
    pub lambda: f64,
    pub dice_eps: f64,
    pub ce_clamp: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 0.6,
            dice_eps: 1e-5,
            ce_clamp: 1e-7,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentConfig {
    pub p_hflip: f64,
    pub p_vflip: f64,
    pub p_rot: f64,
    pub p_cutout: f64,
    /// Cutout side range as fractions of the image side.
    pub cutout_min_frac: f64,
    pub cutout_max_frac: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            p_hflip: 0.25,
            p_vflip: 0.25,
            p_rot: 0.25,
            p_cutout: 0.25,
            cutout_min_frac: 1.0 / 16.0,
            cutout_max_frac: 0.25,
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        Self {
            p_hflip: 0.0,
            p_vflip: 0.0,
            p_rot: 0.0,
            p_cutout: 0.0,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub synthetic: bool,
    pub synth_samples: usize,
    pub dataset: String,
    pub split_mode: SplitMode,
    /// Train, validation, test.
    pub split_fractions: [f64; 3],
    pub folds: usize,
    pub fold: usize,
    pub seed: u64,
    pub eval_every: usize,
    pub hd_points: HdPoints,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            synthetic: false,
            synth_samples: 16,
            dataset: String::new(),
            split_mode: SplitMode::Fixed,
            split_fractions: [0.8, 0.1, 0.1],
            folds: 5,
            fold: 0,
            seed: 0,
            eval_every: 10,
            hd_points: HdPoints::All,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Config {
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub loss: LossConfig,
    pub augment: AugmentConfig,
    pub data: DataConfig,
}

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V>
where
    V::Err: fmt::Display,
{
    value
        .parse()
        .map_err(|e: V::Err| BrauError::config(key, format!("cannot parse `{value}`: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        _ => Err(BrauError::config(
            key,
            format!("expected true|false, got `{value}`"),
        )),
    }
}

fn parse_list<V: FromStr, const N: usize>(key: &str, value: &str) -> Result<[V; N]>
where
    V::Err: fmt::Display,
{
    let items = value
        .split(',')
        .map(|s| parse::<V>(key, s.trim()))
        .collect::<Result<Vec<V>>>()?;
    let n = items.len();
    items.try_into().map_err(|_| {
        BrauError::config(key, format!("expected {N} comma-separated values, got {n}"))
    })
}

fn join<V: fmt::Display>(items: &[V]) -> String {
    items
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn bools(mask: &[bool]) -> String {
    join(&mask.iter().map(|&b| u8::from(b)).collect::<Vec<_>>())
}

impl Config {
    /// Defaults of the Adam regime: lr 5e-4, cosine schedule, 200 epochs, batch 16.
    pub fn adam_regime() -> Self {
        Self {
            optim: OptimConfig::adam_regime(),
            ..Self::default()
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (m, o, l, a, d) = (
            &mut self.model,
            &mut self.optim,
            &mut self.loss,
            &mut self.augment,
            &mut self.data,
        );
        match key {
            "in_channels" => m.in_channels = parse(key, value)?,
            "num_classes" => m.num_classes = parse(key, value)?,
            "base_channels" => m.base_channels = parse(key, value)?,
            "stage_depths" => m.stage_depths = parse_list(key, value)?,
            "top_k_schedule" => m.top_k_schedule = parse_list(key, value)?,
            "S" => m.partition = parse(key, value)?,
            "input_hw" => m.input_hw = parse(key, value)?,
            "sccsa_enabled" => m.sccsa_enabled = parse_bool(key, value)?,
            "skip_mask" => {
                let v: [u8; 3] = parse_list(key, value)?;
                if v.iter().any(|&b| b > 1) {
                    return Err(BrauError::config(key, "entries must be 0 or 1"));
                }
                m.skip_mask = v.map(|b| b == 1);
            }
            "scale_mode" => m.scale_mode = parse(key, value)?,
            "qkv_bias" => m.qkv_bias = parse_bool(key, value)?,
            "head_dim" => m.head_dim = parse(key, value)?,
            "mlp_ratio" => m.mlp_ratio = parse(key, value)?,
            "lce_kernel" => m.lce_kernel = parse(key, value)?,
            "embed_norm" => m.embed_norm = parse(key, value)?,
            "ln_eps" => m.ln_eps = parse(key, value)?,
            "bn_eps" => m.bn_eps = parse(key, value)?,
            "bn_momentum" => m.bn_momentum = parse(key, value)?,
            "init_seed" => m.init_seed = parse(key, value)?,
            "optimizer" => o.kind = parse(key, value)?,
            "lr" => o.lr = parse(key, value)?,
            "momentum" => o.momentum = parse(key, value)?,
            "weight_decay" => o.weight_decay = parse(key, value)?,
            "beta1" => o.beta1 = parse(key, value)?,
            "beta2" => o.beta2 = parse(key, value)?,
            "adam_eps" => o.adam_eps = parse(key, value)?,
            "schedule" => o.schedule = parse(key, value)?,
            "epochs" => o.epochs = parse(key, value)?,
            "batch_size" => o.batch_size = parse(key, value)?,
            "decay_all" => o.decay_all = parse_bool(key, value)?,
            "loss_lambda" => l.lambda = parse(key, value)?,
            "dice_eps" => l.dice_eps = parse(key, value)?,
            "ce_clamp" => l.ce_clamp = parse(key, value)?,
            "p_hflip" => a.p_hflip = parse(key, value)?,
            "p_vflip" => a.p_vflip = parse(key, value)?,
            "p_rot" => a.p_rot = parse(key, value)?,
            "p_cutout" => a.p_cutout = parse(key, value)?,
            "cutout_min_frac" => a.cutout_min_frac = parse(key, value)?,
            "cutout_max_frac" => a.cutout_max_frac = parse(key, value)?,
            "synthetic" => d.synthetic = parse_bool(key, value)?,
            "synth_samples" => d.synth_samples = parse(key, value)?,
            "dataset" => d.dataset = value.to_string(),
            "split_mode" => d.split_mode = parse(key, value)?,
            "split_fractions" => d.split_fractions = parse_list(key, value)?,
            "folds" => d.folds = parse(key, value)?,
            "fold" => d.fold = parse(key, value)?,
            "seed" => d.seed = parse(key, value)?,
            "eval_every" => d.eval_every = parse(key, value)?,
            "hd_points" => d.hd_points = parse(key, value)?,
            _ => return Err(BrauError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    /// Every key with its current value, in documentation order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let (m, o, l, a, d) = (
            &self.model,
            &self.optim,
            &self.loss,
            &self.augment,
            &self.data,
        );
        vec![
            ("in_channels", m.in_channels.to_string()),
            ("num_classes", m.num_classes.to_string()),
            ("base_channels", m.base_channels.to_string()),
            ("stage_depths", join(&m.stage_depths)),
            ("top_k_schedule", join(&m.top_k_schedule)),
            ("S", m.partition.to_string()),
            ("input_hw", m.input_hw.to_string()),
            ("sccsa_enabled", m.sccsa_enabled.to_string()),
            ("skip_mask", bools(&m.skip_mask)),
            ("scale_mode", m.scale_mode.to_string()),
            ("qkv_bias", m.qkv_bias.to_string()),
            ("head_dim", m.head_dim.to_string()),
            ("mlp_ratio", m.mlp_ratio.to_string()),
            ("lce_kernel", m.lce_kernel.to_string()),
            ("embed_norm", m.embed_norm.to_string()),
            ("ln_eps", format!("{:e}", m.ln_eps)),
            ("bn_eps", format!("{:e}", m.bn_eps)),
            ("bn_momentum", m.bn_momentum.to_string()),
            ("init_seed", m.init_seed.to_string()),
            ("optimizer", o.kind.to_string()),
            ("lr", o.lr.to_string()),
            ("momentum", o.momentum.to_string()),
            ("weight_decay", o.weight_decay.to_string()),
            ("beta1", o.beta1.to_string()),
            ("beta2", o.beta2.to_string()),
            ("adam_eps", format!("{:e}", o.adam_eps)),
            ("schedule", o.schedule.to_string()),
            ("epochs", o.epochs.to_string()),
            ("batch_size", o.batch_size.to_string()),
            ("decay_all", o.decay_all.to_string()),
            ("loss_lambda", l.lambda.to_string()),
            ("dice_eps", format!("{:e}", l.dice_eps)),
            ("ce_clamp", format!("{:e}", l.ce_clamp)),
            ("p_hflip", a.p_hflip.to_string()),
            ("p_vflip", a.p_vflip.to_string()),
            ("p_rot", a.p_rot.to_string()),
            ("p_cutout", a.p_cutout.to_string()),
            ("cutout_min_frac", a.cutout_min_frac.to_string()),
            ("cutout_max_frac", a.cutout_max_frac.to_string()),
            ("synthetic", d.synthetic.to_string()),
            ("synth_samples", d.synth_samples.to_string()),
            ("dataset", d.dataset.clone()),
            ("split_mode", d.split_mode.to_string()),
            ("split_fractions", join(&d.split_fractions)),
            ("folds", d.folds.to_string()),
            ("fold", d.fold.to_string()),
            ("seed", d.seed.to_string()),
            ("eval_every", d.eval_every.to_string()),
            ("hd_points", d.hd_points.to_string()),
        ]
    }

    /// Applies `key = value` lines on top of `self`. `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                BrauError::config(line, format!("line {}: expected `key = value`", no + 1))
            })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Defaults overridden by `text`, then validated. An `optimizer = adam`
    /// line switches the base to the Adam regime defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut probe = Self::default();
        probe.apply_text(text)?;
        let mut cfg = if probe.optim.kind == OptimKind::Adam {
            Self::adam_regime()
        } else {
            Self::default()
        };
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let o = &self.optim;
        if o.lr < 0.0 || o.weight_decay < 0.0 || !(0.0..1.0).contains(&o.momentum) {
            return Err(BrauError::config(
                "lr",
                "lr, weight_decay must be >= 0 and momentum in [0, 1)",
            ));
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || o.adam_eps <= 0.0 {
            return Err(BrauError::config(
                "beta1",
                "betas must lie in [0, 1) and adam_eps > 0",
            ));
        }
        if o.batch_size == 0 {
            return Err(BrauError::config("batch_size", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.loss.lambda) {
            return Err(BrauError::config("loss_lambda", "must lie in [0, 1]"));
        }
        if self.loss.dice_eps <= 0.0 || !(self.loss.ce_clamp > 0.0 && self.loss.ce_clamp < 0.5) {
            return Err(BrauError::config(
                "dice_eps",
                "dice_eps > 0 and ce_clamp in (0, 0.5) required",
            ));
        }
        let a = &self.augment;
        for (k, p) in [
            ("p_hflip", a.p_hflip),
            ("p_vflip", a.p_vflip),
            ("p_rot", a.p_rot),
            ("p_cutout", a.p_cutout),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(BrauError::config(
                    k,
                    format!("probability {p} outside [0, 1]"),
                ));
            }
        }
        if !(0.0 < a.cutout_min_frac
            && a.cutout_min_frac <= a.cutout_max_frac
            && a.cutout_max_frac <= 1.0)
        {
            return Err(BrauError::config(
                "cutout_min_frac",
                "need 0 < min <= max <= 1",
            ));
        }
        let d = &self.data;
        if d.split_fractions.iter().any(|&f| f < 0.0)
            || (d.split_fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return Err(BrauError::config(
                "split_fractions",
                "fractions must be non-negative and sum to 1",
            ));
        }
        if d.split_mode == SplitMode::Kfold && (d.folds < 2 || d.fold >= d.folds) {
            return Err(BrauError::config(
                "folds",
                "need folds >= 2 and fold < folds",
            ));
        }
        if d.eval_every == 0 {
            return Err(BrauError::config("eval_every", "must be positive"));
        }
        Ok(())
    }
}
