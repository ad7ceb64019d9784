//! Denoising U-Net over `concat(Z_t, Z_cond)` with a garment encoder whose
//! multiscale features are fused into the person stream by attention.

mod embedding;
pub mod gfa;

use std::collections::BTreeMap;

use vton_tensor::{Bound, GaussianRng, Graph, ParamStore, Tensor, Var};

use crate::config::{AttentionKind, UNetConfig};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, GroupNorm, Linear, ResBlock};
pub use embedding::timestep_embedding;
pub use gfa::{rows_stochastic, AttentionBlock, AttentionTrace, SiteTrace};

/// Garment encoder features keyed by latent height.
pub type GarmentPyramid = BTreeMap<usize, Var>;

#[derive(Clone, Debug)]
struct DownLevel {
    res: ResBlock,
    attn: Option<AttentionBlock>,
    down: Option<Conv2d>,
}

#[derive(Clone, Debug)]
struct UpLevel {
    res: ResBlock,
    attn: Option<AttentionBlock>,
    up: Option<Conv2d>,
}

#[derive(Clone, Debug)]
struct GarmentLevel {
    res: ResBlock,
    down: Option<Conv2d>,
}

/// Person stream (full U-Net) plus the encoder-only garment stream.
#[derive(Clone, Debug)]
pub struct UNet {
    config: UNetConfig,
    latent_hw: (usize, usize),
    params: ParamStore,
    time1: Linear,
    time2: Linear,
    conv_in: Conv2d,
    down: Vec<DownLevel>,
    mid1: ResBlock,
    mid_attn: Option<AttentionBlock>,
    mid2: ResBlock,
    up: Vec<UpLevel>,
    norm_out: GroupNorm,
    conv_out: Conv2d,
    garment_in: Option<Conv2d>,
    garment_levels: Vec<GarmentLevel>,
}

impl UNet {
    /// Fresh network for latents of size `h x w`.
    pub fn new(config: &UNetConfig, h: usize, w: usize, seed: u64) -> Result<Self> {
        config.validate(h, w)?;
        let mut rng = GaussianRng::with_stream(seed, 0x0de7);
        let mut store = ParamStore::new();
        let levels = config.levels();
        let heights = config.level_heights(h);
        let kind = config.attention;
        let attn_at = |level: usize| kind != AttentionKind::None && config.attention_scales.contains(&heights[level]);
        let ch = |l: usize| config.level_channels(l);
        let td = config.time_dim();
        let base = config.base_channels;

        let time1 = Linear::new(&mut store, "time.fc1", base, td, &mut rng);
        let time2 = Linear::new(&mut store, "time.fc2", td, td, &mut rng);
        let conv_in = Conv2d::new(&mut store, "in.conv", config.in_channels(), ch(0), 3, 1, &mut rng);

        let mut down = Vec::with_capacity(levels);
        for l in 0..levels {
            let res = ResBlock::new(&mut store, &format!("down.{l}.res"), ch(l), ch(l), Some(td), &mut rng);
            let attn = match attn_at(l) {
                true => Some(AttentionBlock::new(&mut store, &format!("down.{l}.attn"), kind, ch(l), config.heads, &mut rng)?),
                false => None,
            };
            let dn = (l + 1 < levels).then(|| Conv2d::new(&mut store, &format!("down.{l}.downsample"), ch(l), ch(l + 1), 3, 2, &mut rng));
            down.push(DownLevel { res, attn, down: dn });
        }

        let deep = ch(levels - 1);
        let mid1 = ResBlock::new(&mut store, "mid.res1", deep, deep, Some(td), &mut rng);
        let mid_attn = match attn_at(levels - 1) {
            true => Some(AttentionBlock::new(&mut store, "mid.attn", kind, deep, config.heads, &mut rng)?),
            false => None,
        };
        let mid2 = ResBlock::new(&mut store, "mid.res2", deep, deep, Some(td), &mut rng);

        let mut up = Vec::with_capacity(levels);
        let mut cur = deep;
        for l in (0..levels).rev() {
            let res = ResBlock::new(&mut store, &format!("up.{l}.res"), cur + ch(l), ch(l), Some(td), &mut rng);
            let attn = match attn_at(l) {
                true => Some(AttentionBlock::new(&mut store, &format!("up.{l}.attn"), kind, ch(l), config.heads, &mut rng)?),
                false => None,
            };
            let upc = (l > 0).then(|| Conv2d::new(&mut store, &format!("up.{l}.upsample"), ch(l), ch(l), 3, 1, &mut rng));
            up.push(UpLevel { res, attn, up: upc });
            cur = ch(l);
        }
        let norm_out = GroupNorm::new(&mut store, "out.norm", ch(0));
        let conv_out = Conv2d::new(&mut store, "out.conv", ch(0), config.out_channels(), 3, 1, &mut rng);

        // garment stream: encoder half only, no timestep input
        let (garment_in, garment_levels) = if kind == AttentionKind::None {
            (None, Vec::new())
        } else {
            let deepest = (0..levels).filter(|&l| attn_at(l)).max().unwrap_or(0);
            let gin = Conv2d::new(&mut store, "garment.in.conv", config.latent_channels, ch(0), 3, 1, &mut rng);
            let mut gl = Vec::new();
            for l in 0..=deepest {
                let res = ResBlock::new(&mut store, &format!("garment.{l}.res"), ch(l), ch(l), None, &mut rng);
                let dn = (l < deepest).then(|| Conv2d::new(&mut store, &format!("garment.{l}.downsample"), ch(l), ch(l + 1), 3, 2, &mut rng));
                gl.push(GarmentLevel { res, down: dn });
            }
            (Some(gin), gl)
        };

        Ok(Self {
            config: config.clone(),
            latent_hw: (h, w),
            params: store,
            time1,
            time2,
            conv_in,
            down,
            mid1,
            mid_attn,
            mid2,
            up,
            norm_out,
            conv_out,
            garment_in,
            garment_levels,
        })
    }

    /// Replaces parameters with stored ones of identical names and shapes.
    pub fn load_params(&mut self, params: &ParamStore) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "network expects {} tensors, checkpoint has {}",
                self.params.len(),
                params.len()
            )));
        }
        for (name, t) in params.iter() {
            self.params.set(name, t.clone()).map_err(|e| Error::Checkpoint(e.to_string()))?;
        }
        Ok(())
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn latent_hw(&self) -> (usize, usize) {
        self.latent_hw
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    /// Parameters of the garment encoder.
    pub fn garment_param_count(&self) -> usize {
        self.params.count_prefix("garment.")
    }

    /// Parameter count of a variant whose garment stream is a second full
    /// U-Net (decoder and timestep MLP included) instead of an encoder half.
    pub fn two_stream_param_count(&self) -> Result<usize> {
        let (h, w) = self.latent_hw;
        let mut cfg = self.config.clone();
        cfg.attention = AttentionKind::None;
        let full = UNet::new(&cfg, h, w, 0)?;
        // the garment stream sees C input channels instead of 2C
        let extra_in = self.config.latent_channels * cfg.level_channels(0) * 9;
        Ok(self.param_count() - self.garment_param_count() + full.param_count() - extra_in)
    }

    /// Heights of the attention sites that consume garment features.
    pub fn pyramid_scales(&self) -> Vec<usize> {
        if self.config.attention == AttentionKind::None {
            return Vec::new();
        }
        let heights = self.config.level_heights(self.latent_hw.0);
        let mut s: Vec<usize> = self.config.attention_scales.iter().copied().filter(|x| heights.contains(x)).collect();
        s.sort_unstable();
        s.dedup();
        s
    }

    fn check_latent(&self, what: &str, shape: &[usize]) -> Result<()> {
        let (h, w) = self.latent_hw;
        let c = self.config.latent_channels;
        if shape.len() != 4 || shape[1] != c || shape[2] != h || shape[3] != w {
            return Err(Error::Shape(format!("{what} has shape {shape:?}, expected [B, {c}, {h}, {w}]")));
        }
        Ok(())
    }

    /// Runs the encoder-only garment stream on `zg: [B, C, h, w]`.
    pub fn garment_encode(&self, g: &mut Graph, p: &Bound, zg: Var) -> Result<GarmentPyramid> {
        self.check_latent("garment latent", g.shape(zg))?;
        let mut pyramid = GarmentPyramid::new();
        let Some(gin) = &self.garment_in else {
            return Ok(pyramid);
        };
        let scales = self.pyramid_scales();
        let mut h = gin.forward(g, p, zg)?;
        for lvl in &self.garment_levels {
            h = lvl.res.forward(g, p, h, None)?;
            let height = g.shape(h)[2];
            if scales.contains(&height) {
                pyramid.insert(height, h);
            }
            if let Some(d) = &lvl.down {
                h = d.forward(g, p, h)?;
            }
        }
        if pyramid.keys().copied().collect::<Vec<_>>() != scales {
            return Err(Error::Config(format!(
                "garment pyramid scales {:?} do not cover attention scales {scales:?}",
                pyramid.keys().collect::<Vec<_>>()
            )));
        }
        Ok(pyramid)
    }

    fn time_features(&self, g: &mut Graph, p: &Bound, ts: &[usize]) -> Result<Var> {
        let base = self.config.base_channels;
        let mut data = Vec::with_capacity(ts.len() * base);
        for &t in ts {
            data.extend(timestep_embedding(t as f64, base)?);
        }
        let e = g.constant(Tensor::new(&[ts.len(), base], data)?);
        let e = self.time1.forward(g, p, e)?;
        let e = g.silu(e);
        let e = self.time2.forward(g, p, e)?;
        Ok(g.silu(e))
    }

    fn attend(
        attn: &Option<AttentionBlock>,
        g: &mut Graph,
        p: &Bound,
        h: Var,
        pyramid: &GarmentPyramid,
        trace: &mut Option<&mut AttentionTrace>,
    ) -> Result<Var> {
        let Some(a) = attn else {
            return Ok(h);
        };
        let height = g.shape(h)[2];
        let f = *pyramid
            .get(&height)
            .ok_or_else(|| Error::Contract(format!("{}: garment pyramid has no features at scale {height}", a.name())))?;
        a.forward(g, p, h, f, trace.as_deref_mut())
    }

    /// Predicts `(eps, v)`, each `[B, C, h, w]`, from the noisy latent, the
    /// condition latent, per-sample timesteps, and the garment pyramid.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        zt: Var,
        zcond: Var,
        ts: &[usize],
        pyramid: &GarmentPyramid,
        mut trace: Option<&mut AttentionTrace>,
    ) -> Result<(Var, Var)> {
        self.check_latent("noisy latent", g.shape(zt))?;
        self.check_latent("condition latent", g.shape(zcond))?;
        let b = g.shape(zt)[0];
        if g.shape(zcond)[0] != b || ts.len() != b {
            return Err(Error::Shape(format!(
                "batch mismatch: noisy {b}, condition {}, timesteps {}",
                g.shape(zcond)[0],
                ts.len()
            )));
        }
        let temb = self.time_features(g, p, ts)?;
        let x = g.concat_channels(&[zt, zcond])?;
        let mut h = self.conv_in.forward(g, p, x)?;
        let mut skips = Vec::with_capacity(self.down.len());
        for lvl in &self.down {
            h = lvl.res.forward(g, p, h, Some(temb))?;
            h = Self::attend(&lvl.attn, g, p, h, pyramid, &mut trace)?;
            skips.push(h);
            if let Some(d) = &lvl.down {
                h = d.forward(g, p, h)?;
            }
        }
        h = self.mid1.forward(g, p, h, Some(temb))?;
        h = Self::attend(&self.mid_attn, g, p, h, pyramid, &mut trace)?;
        h = self.mid2.forward(g, p, h, Some(temb))?;
        for lvl in &self.up {
            let skip = skips.pop().expect("one skip per level");
            let x = g.concat_channels(&[h, skip])?;
            h = lvl.res.forward(g, p, x, Some(temb))?;
            h = Self::attend(&lvl.attn, g, p, h, pyramid, &mut trace)?;
            if let Some(u) = &lvl.up {
                h = g.upsample_nearest2x(h)?;
                h = u.forward(g, p, h)?;
            }
        }
        h = self.norm_out.forward(g, p, h)?;
        h = g.silu(h);
        let out = self.conv_out.forward(g, p, h)?;
        let c = self.config.latent_channels;
        let eps = g.slice_channels(out, 0, c)?;
        let v = g.slice_channels(out, c, c)?;
        Ok((eps, v))
    }

    /// Inference pass on concrete tensors.
    pub fn predict(&self, zt: &Tensor, zcond: &Tensor, zg: &Tensor, ts: &[usize]) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::inference();
        let p = self.params.bind(&mut g, false);
        let (zt, zc, zg) = (g.constant(zt.clone()), g.constant(zcond.clone()), g.constant(zg.clone()));
        let pyr = self.garment_encode(&mut g, &p, zg)?;
        let (e, v) = self.forward(&mut g, &p, zt, zc, ts, &pyr, None)?;
        Ok((g.value(e).clone(), g.value(v).clone()))
    }

    /// [`Self::predict`] that also returns the attention maps of every site.
    pub fn predict_traced(&self, zt: &Tensor, zcond: &Tensor, zg: &Tensor, ts: &[usize]) -> Result<(Tensor, Tensor, AttentionTrace)> {
        let mut g = Graph::inference();
        let p = self.params.bind(&mut g, false);
        let (zt, zc, zg) = (g.constant(zt.clone()), g.constant(zcond.clone()), g.constant(zg.clone()));
        let pyr = self.garment_encode(&mut g, &p, zg)?;
        let mut trace = AttentionTrace::default();
        let (e, v) = self.forward(&mut g, &p, zt, zc, ts, &pyr, Some(&mut trace))?;
        Ok((g.value(e).clone(), g.value(v).clone(), trace))
    }
}
