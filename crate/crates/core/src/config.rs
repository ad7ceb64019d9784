//! Pipeline configuration: sectioned `key = value` files (TOML), two
//! built-in profiles, dotted-key overrides and a config fingerprint.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub height: usize,
    pub width: usize,
    /// Number of target persons.
    pub count: usize,
    /// Number of simulated generators in the hub.
    pub n_hubs: usize,
    /// Pseudo-inputs per target per hub model.
    pub replicas_per_hub: usize,
    /// Draw one set of unpaired garments per target and reuse it for every
    /// hub model instead of drawing independently per model.
    pub shared_unpaired: bool,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 48,
            count: 16,
            n_hubs: 3,
            replicas_per_hub: 10,
            shared_unpaired: false,
            seed: 0,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 || self.n_hubs == 0 || self.replicas_per_hub == 0 {
            return Err(Error::Config("count, n_hubs and replicas_per_hub must be >= 1".into()));
        }
        if self.height < 16 || self.width < 16 {
            return Err(Error::Config(format!("image size {}x{} too small", self.height, self.width)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodecConfig {
    /// Spatial down-sampling factor `f`.
    pub factor: usize,
    /// Latent channels `C`.
    pub latent_channels: usize,
    pub base_channels: usize,
    pub kl_weight: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            factor: 4,
            latent_channels: 4,
            base_channels: 16,
            kl_weight: 1e-6,
            steps: 8000,
            batch_size: 2,
            lr: 2e-3,
            seed: 0,
        }
    }
}

impl CodecConfig {
    pub fn validate(&self) -> Result<()> {
        if ![2, 4, 8].contains(&self.factor) {
            return Err(Error::Config(format!("codec factor must be 2, 4 or 8, got {}", self.factor)));
        }
        if self.latent_channels == 0 || self.base_channels == 0 || self.batch_size == 0 {
            return Err(Error::Config("codec channel counts and batch size must be >= 1".into()));
        }
        if self.kl_weight < 0.0 || self.lr <= 0.0 {
            return Err(Error::Config("kl_weight must be >= 0 and lr > 0".into()));
        }
        Ok(())
    }

    pub fn stages(&self) -> usize {
        self.factor.trailing_zeros() as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionKind {
    /// Garment fusion attention: `M1 M2 (V_P + V_G)`.
    Gfa,
    /// Plain cross-attention `softmax(Q_P K_G^T / sqrt d) V_G`.
    Vanilla,
    /// No garment stream; conditioning by channel concatenation only.
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UNetConfig {
    pub latent_channels: usize,
    pub base_channels: usize,
    pub channel_multipliers: Vec<usize>,
    /// Latent heights at which garment features are fused.
    pub attention_scales: Vec<usize>,
    pub heads: usize,
    pub attention: AttentionKind,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            latent_channels: 4,
            base_channels: 32,
            channel_multipliers: vec![1, 2, 3],
            attention_scales: vec![8, 4],
            heads: 4,
            attention: AttentionKind::Gfa,
        }
    }
}

impl UNetConfig {
    pub fn in_channels(&self) -> usize {
        2 * self.latent_channels
    }

    pub fn out_channels(&self) -> usize {
        2 * self.latent_channels
    }

    pub fn levels(&self) -> usize {
        self.channel_multipliers.len()
    }

    pub fn level_channels(&self, level: usize) -> usize {
        self.base_channels * self.channel_multipliers[level]
    }

    pub fn time_dim(&self) -> usize {
        4 * self.base_channels
    }

    /// Latent height at each level for an input of height `h`.
    pub fn level_heights(&self, h: usize) -> Vec<usize> {
        (0..self.levels()).map(|l| h >> l).collect()
    }

    /// Validates against a latent of size `h x w`.
    pub fn validate(&self, h: usize, w: usize) -> Result<()> {
        if self.channel_multipliers.is_empty() || self.base_channels == 0 || self.latent_channels == 0 {
            return Err(Error::Config("unet needs at least one level and nonzero channels".into()));
        }
        if self.heads == 0 {
            return Err(Error::Config("heads must be >= 1".into()));
        }
        let down = 1usize << (self.levels() - 1);
        if !h.is_multiple_of(down) || !w.is_multiple_of(down) {
            return Err(Error::Config(format!("latent {h}x{w} is not divisible by {down} for {} levels", self.levels())));
        }
        if self.attention != AttentionKind::None {
            let heights = self.level_heights(h);
            for &s in &self.attention_scales {
                let Some(level) = heights.iter().position(|&x| x == s) else {
                    return Err(Error::Config(format!("attention scale {s} does not occur in the level heights {heights:?}")));
                };
                let c = self.level_channels(level);
                if !c.is_multiple_of(self.heads) {
                    return Err(Error::Config(format!("{c} channels at scale {s} are not divisible by {} heads", self.heads)));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionConfig {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Use the reverse-step formula exactly as printed in the method
    /// description instead of the standard posterior mean.
    pub eq6_literal: bool,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self::rescaled(200)
    }
}

impl DiffusionConfig {
    /// Linear schedule with the 1000-step endpoints `(1e-4, 0.02)` scaled by
    /// `1000 / T`.
    pub fn rescaled(timesteps: usize) -> Self {
        let k = 1000.0 / timesteps as f64;
        Self {
            timesteps,
            beta_start: 1e-4 * k,
            beta_end: 0.02 * k,
            eq6_literal: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub steps: u64,
    pub batch_size: usize,
    pub lambda_vlb: f64,
    /// Probability of zeroing both conditions for a batch element.
    pub p_uncond: f64,
    pub seed: u64,
    /// Sample pseudo-inputs from every hub model (off: hub 1, replica 1).
    pub use_multi_hub: bool,
    /// Condition dropout during training (off forces `p_uncond = 0`).
    pub use_cfg_training: bool,
    /// Garment fusion attention (off: vanilla cross-attention).
    pub use_gfa: bool,
    /// 0 disables periodic checkpoints.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            steps: 2000,
            batch_size: 16,
            lambda_vlb: 0.001,
            p_uncond: 0.1,
            seed: 0,
            use_multi_hub: true,
            use_cfg_training: true,
            use_gfa: true,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p_uncond) {
            return Err(Error::Config(format!("p_uncond {} outside [0,1]", self.p_uncond)));
        }
        if self.lr <= 0.0 || self.batch_size == 0 {
            return Err(Error::Config("lr must be > 0 and batch_size >= 1".into()));
        }
        if self.lambda_vlb < 0.0 {
            return Err(Error::Config("lambda_vlb must be >= 0".into()));
        }
        Ok(())
    }

    pub fn effective_p_uncond(&self) -> f64 {
        if self.use_cfg_training {
            self.p_uncond
        } else {
            0.0
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleConfig {
    pub guidance_scale: f64,
    pub seed: u64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self { guidance_scale: 2.0, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct EvalConfig {
    /// Evaluate at most this many samples (0 = all).
    pub max_samples: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub profile: String,
    pub data: DataConfig,
    pub codec: CodecConfig,
    pub unet: UNetConfig,
    pub diffusion: DiffusionConfig,
    pub train: TrainConfig,
    pub sample: SampleConfig,
    pub eval: EvalConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl PipelineConfig {
    /// Desk-scale profile: 64x48 images, f=4, T=200, base 32, multipliers
    /// (1,2,3), 4 heads.
    pub fn toy() -> Self {
        Self {
            profile: "toy".into(),
            data: DataConfig::default(),
            codec: CodecConfig::default(),
            unet: UNetConfig::default(),
            diffusion: DiffusionConfig::default(),
            train: TrainConfig::default(),
            sample: SampleConfig::default(),
            eval: EvalConfig::default(),
        }
    }

    /// Full-resolution profile: 1024x768, f=8, C=4, T=1000, multipliers
    /// (3,4,6,7), attention at latent scales (32,16) with 8 heads, Adam
    /// lr 1e-4, guidance scale 2.
    pub fn paper() -> Self {
        Self {
            profile: "paper".into(),
            data: DataConfig {
                height: 1024,
                width: 768,
                count: 11_647,
                n_hubs: 3,
                replicas_per_hub: 10,
                shared_unpaired: false,
                seed: 0,
            },
            codec: CodecConfig {
                factor: 8,
                latent_channels: 4,
                base_channels: 128,
                kl_weight: 1e-6,
                steps: 100_000,
                batch_size: 8,
                lr: 4.5e-6,
                seed: 0,
            },
            unet: UNetConfig {
                latent_channels: 4,
                base_channels: 64,
                channel_multipliers: vec![3, 4, 6, 7],
                attention_scales: vec![32, 16],
                heads: 8,
                attention: AttentionKind::Gfa,
            },
            diffusion: DiffusionConfig {
                timesteps: 1000,
                beta_start: 1e-4,
                beta_end: 0.02,
                eq6_literal: false,
            },
            train: TrainConfig {
                lr: 1e-4,
                steps: 500_000,
                ..TrainConfig::default()
            },
            sample: SampleConfig::default(),
            eval: EvalConfig::default(),
        }
    }

    pub fn profile(name: &str) -> Result<Self> {
        match name {
            "toy" => Ok(Self::toy()),
            "paper" => Ok(Self::paper()),
            other => Err(Error::Config(format!("unknown profile {other:?} (expected toy or paper)"))),
        }
    }

    /// Parses a config file. A `profile = "..."` key selects the base
    /// profile that the file's other keys then override.
    pub fn from_toml(text: &str) -> Result<Self> {
        Self::from_toml_with_overrides(text, &[])
    }

    /// Like [`PipelineConfig::from_toml`], then applies `section.key=value`
    /// overrides on top.
    pub fn from_toml_with_overrides(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let file: toml::Table = text.parse().map_err(|e| Error::Config(format!("config parse error: {e}")))?;
        let mut profile = file.get("profile").and_then(|v| v.as_str()).unwrap_or("toy").to_string();
        if let Some((_, v)) = overrides.iter().rev().find(|(k, _)| k == "profile") {
            profile = v.clone();
        }
        let base = Self::profile(&profile)?;
        let mut table = toml::Table::try_from(&base).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut table, file);
        for (key, value) in overrides {
            set_dotted(&mut table, key, value)?;
        }
        let cfg: PipelineConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("config error: {}", e.message())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    /// Hex SHA-256 of the serialized config.
    pub fn fingerprint(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn latent_dims(&self) -> (usize, usize) {
        (self.data.height / self.codec.factor, self.data.width / self.codec.factor)
    }

    /// U-Net config with the ablation flags applied.
    pub fn effective_unet(&self) -> UNetConfig {
        let mut u = self.unet.clone();
        u.latent_channels = self.codec.latent_channels;
        if !self.train.use_gfa && u.attention == AttentionKind::Gfa {
            u.attention = AttentionKind::Vanilla;
        }
        u
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.codec.validate()?;
        self.train.validate()?;
        if !self.data.height.is_multiple_of(self.codec.factor) || !self.data.width.is_multiple_of(self.codec.factor) {
            return Err(Error::Config(format!(
                "image {}x{} not divisible by codec factor {}",
                self.data.height, self.data.width, self.codec.factor
            )));
        }
        if self.unet.latent_channels != self.codec.latent_channels {
            return Err(Error::Config(format!(
                "unet.latent_channels {} differs from codec.latent_channels {}",
                self.unet.latent_channels, self.codec.latent_channels
            )));
        }
        let (h, w) = self.latent_dims();
        self.effective_unet().validate(h, w)?;
        if self.diffusion.timesteps == 0
            || !(self.diffusion.beta_start > 0.0 && self.diffusion.beta_start <= self.diffusion.beta_end && self.diffusion.beta_end < 1.0)
        {
            return Err(Error::Config("diffusion schedule needs T >= 1 and 0 < beta_start <= beta_end < 1".into()));
        }
        if self.sample.guidance_scale < 0.0 {
            return Err(Error::Config("guidance_scale must be >= 0".into()));
        }
        Ok(())
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Parses `value` as a TOML value, falling back to a bare string.
fn parse_value(value: &str) -> toml::Value {
    let wrapped = format!("v = {value}");
    match wrapped.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(value.to_string()),
    }
}

fn set_dotted(table: &mut toml::Table, key: &str, value: &str) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    let (last, path) = parts.split_last().expect("split yields one part");
    let mut cur = table;
    for p in path {
        cur = cur
            .get_mut(*p)
            .and_then(|v| v.as_table_mut())
            .ok_or_else(|| Error::Config(format!("unknown config section {p:?} in {key:?}")))?;
    }
    if !cur.contains_key(*last) {
        return Err(Error::Config(format!("unknown config key {key:?}")));
    }
    let mut v = parse_value(value);
    // integers given for float keys
    if let (Some(toml::Value::Float(_)), toml::Value::Integer(i)) = (cur.get(*last), &v) {
        v = toml::Value::Float(*i as f64);
    }
    cur.insert(last.to_string(), v);
    Ok(())
}
