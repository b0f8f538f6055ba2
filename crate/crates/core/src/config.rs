//! Run configuration and the `key = value` config file format.
//!
//! One flat namespace covers the model, the training loop and the synthetic
//! scenario. Lines are `key = value`; `#` starts a comment; blank lines are
//! ignored; an unknown key is an error. See the README for the key list.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::dataset::Condition;
use crate::error::{Error, Result};
use crate::tokenizer::{ConvLayer, PoolSpec, TokenizerConfig};

/// Positional information on the spatial branch input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SpatialPos {
    None,
    Absolute,
}

/// Positional information on the temporal branch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TemporalPos {
    None,
    Absolute,
    Relative,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub conv_layers: Vec<ConvLayer>,
    pub pool: Option<PoolSpec>,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub spatial_layers: usize,
    pub temporal_layers: usize,
    pub window: usize,
    pub window_stride: usize,
    pub clusters: usize,
    pub seq_len: usize,
    pub mlp_ratio: usize,
    pub spatial_pos: SpatialPos,
    pub temporal_pos: TemporalPos,
    pub layer_norm_eps: f64,
}

impl Default for ModelConfig {
    /// Full-size architecture at the 128x128 desk input resolution.
    fn default() -> Self {
        Self {
            image_height: 128,
            image_width: 128,
            conv_layers: vec![ConvLayer::new(3, 64, 7, 2, 1), ConvLayer::new(64, 384, 7, 2, 1)],
            pool: Some(PoolSpec::new(3, 2, 1)),
            patch_size: 1,
            embed_dim: 384,
            heads: 6,
            spatial_layers: 4,
            temporal_layers: 4,
            window: 6,
            window_stride: 3,
            clusters: 64,
            seq_len: 5,
            mlp_ratio: 4,
            spatial_pos: SpatialPos::Absolute,
            temporal_pos: TemporalPos::Relative,
            layer_norm_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    /// Full architecture at 384x384 input, 23x23 token grid.
    pub fn full384() -> Self {
        Self {
            image_height: 384,
            image_width: 384,
            ..Self::default()
        }
    }

    /// Smallest configuration exercising every component: D=8, h=2, L=2,
    /// 4x4 grid, 2x2 windows with stride 1, K=4.
    pub fn tiny() -> Self {
        Self {
            image_height: 16,
            image_width: 16,
            conv_layers: vec![ConvLayer::new(3, 4, 3, 1, 1), ConvLayer::new(4, 8, 3, 1, 1)],
            pool: Some(PoolSpec::new(3, 2, 1)),
            patch_size: 1,
            embed_dim: 8,
            heads: 2,
            spatial_layers: 1,
            temporal_layers: 1,
            window: 2,
            window_stride: 1,
            clusters: 4,
            seq_len: 2,
            mlp_ratio: 4,
            spatial_pos: SpatialPos::Absolute,
            temporal_pos: TemporalPos::Relative,
            layer_norm_eps: 1e-5,
        }
    }

    /// Desk-scale model used by the end-to-end tests: 32x32 frames, 8x8 grid.
    pub fn desk() -> Self {
        Self {
            image_height: 32,
            image_width: 32,
            conv_layers: vec![ConvLayer::new(3, 16, 3, 1, 1), ConvLayer::new(16, 32, 3, 1, 1)],
            pool: Some(PoolSpec::new(3, 2, 1)),
            patch_size: 1,
            embed_dim: 32,
            heads: 2,
            spatial_layers: 1,
            temporal_layers: 1,
            window: 4,
            window_stride: 2,
            clusters: 16,
            seq_len: 5,
            mlp_ratio: 4,
            spatial_pos: SpatialPos::Absolute,
            temporal_pos: TemporalPos::Relative,
            layer_norm_eps: 1e-5,
        }
    }

    pub fn tokenizer(&self) -> TokenizerConfig {
        TokenizerConfig {
            conv_layers: self.conv_layers.clone(),
            pool: self.pool,
            patch_size: self.patch_size,
            embed_dim: self.embed_dim,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads.max(1)
    }

    pub fn descriptor_dim(&self) -> usize {
        self.clusters * self.embed_dim
    }

    pub fn validate(&self) -> Result<()> {
        self.tokenizer().validate()?;
        if self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "embed_dim {} is not divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.spatial_layers == 0 && self.temporal_layers == 0 {
            return Err(Error::config(
                "at least one of spatial_layers / temporal_layers must be positive",
            ));
        }
        if self.clusters == 0 || self.seq_len == 0 || self.mlp_ratio == 0 {
            return Err(Error::config("clusters, seq_len and mlp_ratio must be positive"));
        }
        if self.window == 0 || self.window_stride == 0 || self.window_stride > self.window {
            return Err(Error::config(format!(
                "window stride must satisfy 1 <= s <= m, got m={} s={}",
                self.window, self.window_stride
            )));
        }
        if self.layer_norm_eps <= 0.0 {
            return Err(Error::config("layer_norm_eps must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub lr_tokenizer: f64,
    pub lr_spatial: f64,
    pub lr_temporal: f64,
    pub lr_netvlad: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub margin: f64,
    pub negatives: usize,
    pub pos_threshold: f64,
    pub neg_threshold: f64,
    /// Triplet groups accumulated per optimizer step.
    pub batch_size: usize,
    pub cache_size: usize,
    /// Optimizer steps between cache refreshes.
    pub cache_refresh: usize,
    pub max_epochs: usize,
    /// Hard cap on optimizer steps; 0 means no cap.
    pub max_iterations: usize,
    /// Epochs without validation Recall@5 improvement before stopping; 0 disables.
    pub patience: usize,
    pub val_radius: f64,
    pub seq_stride: usize,
    /// Stop once an epoch's mean triplet loss is at or below this; 0 disables.
    pub loss_target: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            lr_tokenizer: 1e-4,
            lr_spatial: 1e-4,
            lr_temporal: 1e-3,
            lr_netvlad: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            margin: 0.1,
            negatives: 5,
            pos_threshold: 10.0,
            neg_threshold: 25.0,
            batch_size: 4,
            cache_size: 256,
            cache_refresh: 1000,
            max_epochs: 30,
            max_iterations: 0,
            patience: 5,
            val_radius: 10.0,
            seq_stride: 1,
            loss_target: 0.0,
        }
    }
}

/// Synthetic world and evaluation settings for `gen` and `ablate`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioConfig {
    pub places: usize,
    pub spacing: f64,
    pub latent_dim: usize,
    pub render_height: usize,
    pub render_width: usize,
    pub db_condition: Condition,
    pub query_condition: Condition,
    /// Query traversal offset along the loop, meters.
    pub query_shift: f64,
    pub eval_radius: f64,
    pub ablation_seeds: usize,
    /// `(window, stride)` pairs swept by the window ablation.
    pub ablation_windows: Vec<(usize, usize)>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            places: 64,
            spacing: 2.0,
            latent_dim: 16,
            render_height: 128,
            render_width: 128,
            db_condition: Condition::preset("day").expect("built-in preset"),
            query_condition: Condition::preset("night").expect("built-in preset"),
            query_shift: 0.0,
            eval_radius: 10.0,
            ablation_seeds: 1,
            ablation_windows: vec![(4, 2), (6, 3), (8, 4)],
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub scenario: ScenarioConfig,
}

fn parse_num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(format!("{key}: cannot parse '{value}'")))
}

fn parse_tuple(key: &str, value: &str, n: usize) -> Result<Vec<usize>> {
    let parts: Vec<usize> = value
        .split(':')
        .map(|p| parse_num(key, p.trim()))
        .collect::<Result<_>>()?;
    if parts.len() != n {
        return Err(Error::config(format!(
            "{key}: expected {n} ':'-separated integers, got '{value}'"
        )));
    }
    Ok(parts)
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected 'key = value', got '{raw}'", lineno + 1)))?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| Error::config(format!("line {}: {e}", lineno + 1)))?;
        }
        cfg.model.validate()?;
        Ok(cfg)
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        let t = &mut self.train;
        let s = &mut self.scenario;
        match key {
            "image_height" => m.image_height = parse_num(key, value)?,
            "image_width" => m.image_width = parse_num(key, value)?,
            "conv_layers" => {
                m.conv_layers = value
                    .split(',')
                    .map(|l| {
                        let p = parse_tuple(key, l.trim(), 5)?;
                        Ok(ConvLayer::new(p[0], p[1], p[2], p[3], p[4]))
                    })
                    .collect::<Result<_>>()?
            }
            "pool" => {
                m.pool = if value == "none" {
                    None
                } else {
                    let p = parse_tuple(key, value, 3)?;
                    Some(PoolSpec::new(p[0], p[1], p[2]))
                }
            }
            "patch_size" => m.patch_size = parse_num(key, value)?,
            "embed_dim" => m.embed_dim = parse_num(key, value)?,
            "heads" => m.heads = parse_num(key, value)?,
            "spatial_layers" => m.spatial_layers = parse_num(key, value)?,
            "temporal_layers" => m.temporal_layers = parse_num(key, value)?,
            "window" => m.window = parse_num(key, value)?,
            "window_stride" => m.window_stride = parse_num(key, value)?,
            "clusters" => m.clusters = parse_num(key, value)?,
            "seq_len" => m.seq_len = parse_num(key, value)?,
            "mlp_ratio" => m.mlp_ratio = parse_num(key, value)?,
            "layer_norm_eps" => m.layer_norm_eps = parse_num(key, value)?,
            "spatial_pos" => {
                m.spatial_pos = match value {
                    "none" => SpatialPos::None,
                    "absolute" => SpatialPos::Absolute,
                    _ => return Err(Error::config(format!("{key}: expected none|absolute, got '{value}'"))),
                }
            }
            "temporal_pos" => {
                m.temporal_pos = match value {
                    "none" => TemporalPos::None,
                    "absolute" => TemporalPos::Absolute,
                    "relative" => TemporalPos::Relative,
                    _ => {
                        return Err(Error::config(format!(
                            "{key}: expected none|absolute|relative, got '{value}'"
                        )))
                    }
                }
            }
            "seed" => t.seed = parse_num(key, value)?,
            "lr_tokenizer" => t.lr_tokenizer = parse_num(key, value)?,
            "lr_spatial" => t.lr_spatial = parse_num(key, value)?,
            "lr_temporal" => t.lr_temporal = parse_num(key, value)?,
            "lr_netvlad" => t.lr_netvlad = parse_num(key, value)?,
            "adam_beta1" => t.adam_beta1 = parse_num(key, value)?,
            "adam_beta2" => t.adam_beta2 = parse_num(key, value)?,
            "adam_eps" => t.adam_eps = parse_num(key, value)?,
            "margin" => t.margin = parse_num(key, value)?,
            "negatives" => t.negatives = parse_num(key, value)?,
            "pos_threshold" => t.pos_threshold = parse_num(key, value)?,
            "neg_threshold" => t.neg_threshold = parse_num(key, value)?,
            "batch_size" => t.batch_size = parse_num(key, value)?,
            "cache_size" => t.cache_size = parse_num(key, value)?,
            "cache_refresh" => t.cache_refresh = parse_num(key, value)?,
            "max_epochs" => t.max_epochs = parse_num(key, value)?,
            "max_iterations" => t.max_iterations = parse_num(key, value)?,
            "patience" => t.patience = parse_num(key, value)?,
            "val_radius" => t.val_radius = parse_num(key, value)?,
            "seq_stride" => t.seq_stride = parse_num(key, value)?,
            "loss_target" => t.loss_target = parse_num(key, value)?,
            "places" => s.places = parse_num(key, value)?,
            "spacing" => s.spacing = parse_num(key, value)?,
            "latent_dim" => s.latent_dim = parse_num(key, value)?,
            "render_height" => s.render_height = parse_num(key, value)?,
            "render_width" => s.render_width = parse_num(key, value)?,
            "db_condition" => s.db_condition = value.parse()?,
            "query_condition" => s.query_condition = value.parse()?,
            "query_shift" => s.query_shift = parse_num(key, value)?,
            "eval_radius" => s.eval_radius = parse_num(key, value)?,
            "ablation_seeds" => s.ablation_seeds = parse_num(key, value)?,
            "ablation_windows" => {
                s.ablation_windows = value
                    .split(',')
                    .map(|w| {
                        let p = parse_tuple(key, w.trim(), 2)?;
                        Ok((p[0], p[1]))
                    })
                    .collect::<Result<_>>()?
            }
            _ => return Err(Error::config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    /// Serializes every key; `parse(to_text())` reproduces the config.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let s = &self.scenario;
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("image_height", m.image_height.to_string());
        kv("image_width", m.image_width.to_string());
        kv(
            "conv_layers",
            m.conv_layers
                .iter()
                .map(|l| format!("{}:{}:{}:{}:{}", l.c_in, l.c_out, l.kernel, l.stride, l.padding))
                .collect::<Vec<_>>()
                .join(","),
        );
        kv(
            "pool",
            m.pool
                .map(|p| format!("{}:{}:{}", p.kernel, p.stride, p.padding))
                .unwrap_or_else(|| "none".into()),
        );
        kv("patch_size", m.patch_size.to_string());
        kv("embed_dim", m.embed_dim.to_string());
        kv("heads", m.heads.to_string());
        kv("spatial_layers", m.spatial_layers.to_string());
        kv("temporal_layers", m.temporal_layers.to_string());
        kv("window", m.window.to_string());
        kv("window_stride", m.window_stride.to_string());
        kv("clusters", m.clusters.to_string());
        kv("seq_len", m.seq_len.to_string());
        kv("mlp_ratio", m.mlp_ratio.to_string());
        kv("layer_norm_eps", format!("{:e}", m.layer_norm_eps));
        kv(
            "spatial_pos",
            match m.spatial_pos {
                SpatialPos::None => "none",
                SpatialPos::Absolute => "absolute",
            }
            .into(),
        );
        kv(
            "temporal_pos",
            match m.temporal_pos {
                TemporalPos::None => "none",
                TemporalPos::Absolute => "absolute",
                TemporalPos::Relative => "relative",
            }
            .into(),
        );
        kv("seed", t.seed.to_string());
        kv("lr_tokenizer", format!("{:e}", t.lr_tokenizer));
        kv("lr_spatial", format!("{:e}", t.lr_spatial));
        kv("lr_temporal", format!("{:e}", t.lr_temporal));
        kv("lr_netvlad", format!("{:e}", t.lr_netvlad));
        kv("adam_beta1", format!("{:e}", t.adam_beta1));
        kv("adam_beta2", format!("{:e}", t.adam_beta2));
        kv("adam_eps", format!("{:e}", t.adam_eps));
        kv("margin", format!("{:e}", t.margin));
        kv("negatives", t.negatives.to_string());
        kv("pos_threshold", format!("{:e}", t.pos_threshold));
        kv("neg_threshold", format!("{:e}", t.neg_threshold));
        kv("batch_size", t.batch_size.to_string());
        kv("cache_size", t.cache_size.to_string());
        kv("cache_refresh", t.cache_refresh.to_string());
        kv("max_epochs", t.max_epochs.to_string());
        kv("max_iterations", t.max_iterations.to_string());
        kv("patience", t.patience.to_string());
        kv("val_radius", format!("{:e}", t.val_radius));
        kv("seq_stride", t.seq_stride.to_string());
        kv("loss_target", format!("{:e}", t.loss_target));
        kv("places", s.places.to_string());
        kv("spacing", format!("{:e}", s.spacing));
        kv("latent_dim", s.latent_dim.to_string());
        kv("render_height", s.render_height.to_string());
        kv("render_width", s.render_width.to_string());
        kv("db_condition", s.db_condition.to_string());
        kv("query_condition", s.query_condition.to_string());
        kv("query_shift", format!("{:e}", s.query_shift));
        kv("eval_radius", format!("{:e}", s.eval_radius));
        kv("ablation_seeds", s.ablation_seeds.to_string());
        kv(
            "ablation_windows",
            s.ablation_windows
                .iter()
                .map(|(m, st)| format!("{m}:{st}"))
                .collect::<Vec<_>>()
                .join(","),
        );
        out
    }
}
