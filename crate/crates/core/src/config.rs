//! Line-oriented `key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored. Keys are grouped under
//! `model.`, `pyramid.`, `train.` and `scene.`; unknown keys are errors.
//! [`RunConfig::to_text`] writes every key, and parsing that text gives the
//! same configuration back.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::data::SceneSpec;
use crate::error::{Error, Result};
use crate::sap::PoolingKind;
use crate::tasknet::ModelConfig;
use crate::train::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub scene: SceneSpec,
}

fn parse_value<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|p| parse_value(key, p.trim())).collect()
}

fn parse_array<T: FromStr + Copy, const N: usize>(key: &str, v: &str) -> Result<[T; N]> {
    let items: Vec<T> = parse_list(key, v)?;
    items
        .try_into()
        .map_err(|_| Error::Config(format!("{key}: expected {N} comma-separated values")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!(
            "{key}: expected true or false, got {v:?}"
        ))),
    }
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    /// Applies `key = value` lines on top of the current values. When
    /// `pyramid.channels` changes and `pyramid.compact_dim` is not given in
    /// the same text, the compact dim follows as `C/2`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut compact_given = false;
        let mut channels_given = false;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            compact_given |= k == "pyramid.compact_dim";
            channels_given |= k == "pyramid.channels";
            self.set(k, v)
                .map_err(|e| Error::Config(format!("line {}: {}", n + 1, strip(e))))?;
        }
        if channels_given && !compact_given {
            self.model.pyramid.compact_dim = (self.model.pyramid.channels / 2).max(1);
        }
        Ok(())
    }

    /// Sets one key.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let m = &mut self.model;
        let p = &mut m.pyramid;
        let t = &mut self.train;
        let s = &mut self.scene;
        match key {
            "model.backbone_widths" => m.backbone_widths = parse_array(key, v)?,
            "model.backbone_strides" => m.backbone_strides = parse_array(key, v)?,
            "model.seg_hidden" => m.seg_hidden = parse_value(key, v)?,
            "model.num_classes" => m.num_classes = parse_value(key, v)?,
            "model.image_size" => m.image_size = parse_value(key, v)?,
            "pyramid.pool_sizes" => p.pool_sizes = parse_list(key, v)?,
            "pyramid.channels" => p.channels = parse_value(key, v)?,
            "pyramid.compact_dim" => p.compact_dim = parse_value(key, v)?,
            "pyramid.use_guided_map" => p.use_guided_map = parse_bool(key, v)?,
            "pyramid.use_spatial_attention" => p.use_spatial_attention = parse_bool(key, v)?,
            "pyramid.use_channel_attention" => p.use_channel_attention = parse_bool(key, v)?,
            "pyramid.pooling" => p.pooling = v.parse::<PoolingKind>()?,
            "pyramid.detach_guidance" => p.detach_guidance = parse_bool(key, v)?,
            "train.lambda" => t.lambda = parse_value(key, v)?,
            "train.lr0" => t.lr0 = parse_value(key, v)?,
            "train.milestones" => t.milestones = parse_list(key, v)?,
            "train.iters" => t.iters = parse_value(key, v)?,
            "train.pretrain_iters" => t.pretrain_iters = parse_value(key, v)?,
            "train.source_batch" => t.source_batch = parse_value(key, v)?,
            "train.target_batch" => t.target_batch = parse_value(key, v)?,
            "train.seed" => t.seed = parse_value(key, v)?,
            "train.beta1" => t.beta1 = parse_value(key, v)?,
            "train.beta2" => t.beta2 = parse_value(key, v)?,
            "train.adam_eps" => t.adam_eps = parse_value(key, v)?,
            "train.log_every" => t.log_every = parse_value(key, v)?,
            "train.checkpoint_every" => t.checkpoint_every = parse_value(key, v)?,
            "scene.size" => s.size = parse_value(key, v)?,
            "scene.min_shapes" => s.min_shapes = parse_value(key, v)?,
            "scene.max_shapes" => s.max_shapes = parse_value(key, v)?,
            "scene.min_radius" => s.min_radius = parse_value(key, v)?,
            "scene.max_radius" => s.max_radius = parse_value(key, v)?,
            "scene.noise_sigma" => s.severity.noise_sigma = parse_value(key, v)?,
            "scene.haze_alpha" => s.severity.haze_alpha = parse_value(key, v)?,
            "scene.color_shift" => s.color_shift = parse_array(key, v)?,
            "scene.fog_color" => s.fog_color = parse_array(key, v)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Every key, one per line, in a fixed order.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let p = &m.pyramid;
        let t = &self.train;
        let s = &self.scene;
        let mut o = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(o, "{k} = {v}");
        };
        kv("model.backbone_widths", join(&m.backbone_widths));
        kv("model.backbone_strides", join(&m.backbone_strides));
        kv("model.seg_hidden", m.seg_hidden.to_string());
        kv("model.num_classes", m.num_classes.to_string());
        kv("model.image_size", m.image_size.to_string());
        kv("pyramid.pool_sizes", join(&p.pool_sizes));
        kv("pyramid.channels", p.channels.to_string());
        kv("pyramid.compact_dim", p.compact_dim.to_string());
        kv("pyramid.use_guided_map", p.use_guided_map.to_string());
        kv(
            "pyramid.use_spatial_attention",
            p.use_spatial_attention.to_string(),
        );
        kv(
            "pyramid.use_channel_attention",
            p.use_channel_attention.to_string(),
        );
        kv("pyramid.pooling", p.pooling.as_str().to_string());
        kv("pyramid.detach_guidance", p.detach_guidance.to_string());
        kv("train.lambda", t.lambda.to_string());
        kv("train.lr0", t.lr0.to_string());
        kv("train.milestones", join(&t.milestones));
        kv("train.iters", t.iters.to_string());
        kv("train.pretrain_iters", t.pretrain_iters.to_string());
        kv("train.source_batch", t.source_batch.to_string());
        kv("train.target_batch", t.target_batch.to_string());
        kv("train.seed", t.seed.to_string());
        kv("train.beta1", t.beta1.to_string());
        kv("train.beta2", t.beta2.to_string());
        kv("train.adam_eps", t.adam_eps.to_string());
        kv("train.log_every", t.log_every.to_string());
        kv("train.checkpoint_every", t.checkpoint_every.to_string());
        kv("scene.size", s.size.to_string());
        kv("scene.min_shapes", s.min_shapes.to_string());
        kv("scene.max_shapes", s.max_shapes.to_string());
        kv("scene.min_radius", s.min_radius.to_string());
        kv("scene.max_radius", s.max_radius.to_string());
        kv("scene.noise_sigma", s.severity.noise_sigma.to_string());
        kv("scene.haze_alpha", s.severity.haze_alpha.to_string());
        kv("scene.color_shift", join(&s.color_shift));
        kv("scene.fog_color", join(&s.fog_color));
        o
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.scene.validate()?;
        if self.scene.size != self.model.image_size {
            return Err(Error::Config(format!(
                "scene.size {} differs from model.image_size {}",
                self.scene.size, self.model.image_size
            )));
        }
        Ok(())
    }
}

fn strip(e: Error) -> String {
    match e {
        Error::Config(m) => m,
        e => e.to_string(),
    }
}
