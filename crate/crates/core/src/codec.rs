//! Convolutional KL-regularized autoencoder that maps `3 x H x W` images to
//! `C x H/f x W/f` latents and back. Trained once, then frozen.

use log::info;
use vton_tensor::{Adam, AdamConfig, Bound, GaussianRng, Graph, ParamStore, Tensor, Var};

use crate::checkpoint::{Checkpoint, CODEC_PREFIX, LATENT_SCALE_KEY};
use crate::config::{CodecConfig, PipelineConfig};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::{Conv2d, GroupNorm, ResBlock};

const INIT_LOGVAR: f64 = -6.0;

#[derive(Clone, Debug)]
struct Encoder {
    conv_in: Conv2d,
    stages: Vec<(ResBlock, Conv2d)>,
    mid: ResBlock,
    norm_out: GroupNorm,
    conv_out: Conv2d,
}

#[derive(Clone, Debug)]
struct Decoder {
    conv_in: Conv2d,
    mid: ResBlock,
    stages: Vec<(Conv2d, ResBlock)>,
    norm_out: GroupNorm,
    conv_out: Conv2d,
}

/// Autoencoder weights plus the latent scaling calibrated after training.
#[derive(Clone, Debug)]
pub struct Codec {
    config: CodecConfig,
    params: ParamStore,
    encoder: Encoder,
    decoder: Decoder,
    latent_scale: f64,
    frozen: bool,
}

/// Reconstruction and KL parts of the codec objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CodecLoss {
    pub total: f64,
    pub l1: f64,
    pub kl: f64,
}

#[derive(Clone, Debug, Default)]
pub struct CodecTrainReport {
    /// One entry per step.
    pub losses: Vec<CodecLoss>,
}

impl Codec {
    /// Freshly initialized, trainable codec.
    pub fn new(config: &CodecConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = GaussianRng::with_stream(config.seed, 0xc0dec);
        let mut store = ParamStore::new();
        let stages = config.stages();
        let ch = |s: usize| config.base_channels << s;
        let c = config.latent_channels;

        let conv_in = Conv2d::new(&mut store, "enc.conv_in", 3, ch(0), 3, 1, &mut rng);
        let enc_stages = (0..stages)
            .map(|s| {
                let rb = ResBlock::new(&mut store, &format!("enc.{s}.res"), ch(s), ch(s), None, &mut rng);
                let down = Conv2d::new(&mut store, &format!("enc.{s}.down"), ch(s), ch(s + 1), 3, 2, &mut rng);
                (rb, down)
            })
            .collect();
        let top = ch(stages);
        let encoder = Encoder {
            conv_in,
            stages: enc_stages,
            mid: ResBlock::new(&mut store, "enc.mid", top, top, None, &mut rng),
            norm_out: GroupNorm::new(&mut store, "enc.norm_out", top),
            conv_out: Conv2d::new(&mut store, "enc.conv_out", top, 2 * c, 3, 1, &mut rng),
        };
        // start the posterior narrow so early decoder inputs are not pure noise
        let bias = store.id("enc.conv_out.bias").expect("registered above");
        store.get_mut(bias).data_mut()[c..].fill(INIT_LOGVAR);
        let decoder = Decoder {
            conv_in: Conv2d::new(&mut store, "dec.conv_in", c, top, 3, 1, &mut rng),
            mid: ResBlock::new(&mut store, "dec.mid", top, top, None, &mut rng),
            stages: (0..stages)
                .rev()
                .map(|s| {
                    let up = Conv2d::new(&mut store, &format!("dec.{s}.up"), ch(s + 1), ch(s), 3, 1, &mut rng);
                    let rb = ResBlock::new(&mut store, &format!("dec.{s}.res"), ch(s), ch(s), None, &mut rng);
                    (up, rb)
                })
                .collect(),
            norm_out: GroupNorm::new(&mut store, "dec.norm_out", ch(0)),
            conv_out: Conv2d::new(&mut store, "dec.conv_out", ch(0), 3, 3, 1, &mut rng),
        };
        Ok(Self {
            config: config.clone(),
            params: store,
            encoder,
            decoder,
            latent_scale: 1.0,
            frozen: false,
        })
    }

    /// Rebuilds a codec from stored parameters.
    pub fn from_parts(config: &CodecConfig, params: ParamStore, latent_scale: f64, frozen: bool) -> Result<Self> {
        let mut codec = Self::new(config)?;
        if codec.params.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "codec expects {} tensors, checkpoint has {}",
                codec.params.len(),
                params.len()
            )));
        }
        for (name, t) in params.iter() {
            codec.params.set(name, t.clone()).map_err(|e| Error::Checkpoint(e.to_string()))?;
        }
        if !(latent_scale > 0.0 && latent_scale.is_finite()) {
            return Err(Error::Checkpoint(format!("invalid latent scale {latent_scale}")));
        }
        codec.latent_scale = latent_scale;
        codec.frozen = frozen;
        Ok(codec)
    }

    pub fn config(&self) -> &CodecConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn latent_scale(&self) -> f64 {
        self.latent_scale
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn factor(&self) -> usize {
        self.config.factor
    }

    pub fn latent_channels(&self) -> usize {
        self.config.latent_channels
    }

    pub fn check_dims(&self, h: usize, w: usize) -> Result<()> {
        let f = self.config.factor;
        if !h.is_multiple_of(f) || !w.is_multiple_of(f) {
            return Err(Error::Shape(format!("image {h}x{w} is not divisible by codec factor {f}")));
        }
        Ok(())
    }

    /// Posterior mean and log-variance, unscaled. `x: [B, 3, H, W]` in `[-1, 1]`.
    fn encode_graph(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<(Var, Var)> {
        let e = &self.encoder;
        let mut h = e.conv_in.forward(g, p, x)?;
        for (rb, down) in &e.stages {
            h = rb.forward(g, p, h, None)?;
            h = down.forward(g, p, h)?;
        }
        h = e.mid.forward(g, p, h, None)?;
        h = e.norm_out.forward(g, p, h)?;
        h = g.silu(h);
        let moments = e.conv_out.forward(g, p, h)?;
        let c = self.config.latent_channels;
        let mean = g.slice_channels(moments, 0, c)?;
        let logvar = g.slice_channels(moments, c, c)?;
        Ok((mean, logvar))
    }

    /// Decoder output in `[-1, 1]` units (unclamped). `z` is unscaled.
    fn decode_graph(&self, g: &mut Graph, p: &Bound, z: Var) -> Result<Var> {
        let d = &self.decoder;
        let mut h = d.conv_in.forward(g, p, z)?;
        h = d.mid.forward(g, p, h, None)?;
        for (up, rb) in &d.stages {
            h = g.upsample_nearest2x(h)?;
            h = up.forward(g, p, h)?;
            h = rb.forward(g, p, h, None)?;
        }
        h = d.norm_out.forward(g, p, h)?;
        h = g.silu(h);
        d.conv_out.forward(g, p, h)
    }

    fn image_batch(&self, images: &[&Image]) -> Result<Tensor> {
        let first = images.first().ok_or_else(|| Error::Contract("empty image batch".into()))?;
        let (h, w) = first.dims();
        self.check_dims(h, w)?;
        let ts: Vec<Tensor> = images
            .iter()
            .map(|im| {
                if im.dims() != (h, w) {
                    return Err(Error::Shape(format!("mixed image sizes {:?} and {:?}", im.dims(), (h, w))));
                }
                Ok(im.to_tensor())
            })
            .collect::<Result<_>>()?;
        let refs: Vec<&Tensor> = ts.iter().collect();
        Ok(Tensor::stack_batch(&refs)?)
    }

    /// Scaled posterior means `[B, C, H/f, W/f]`.
    pub fn encode_batch(&self, images: &[&Image]) -> Result<Tensor> {
        let x = self.image_batch(images)?;
        let mut g = Graph::inference();
        let p = self.params.bind(&mut g, false);
        let xv = g.constant(x);
        let (mean, _) = self.encode_graph(&mut g, &p, xv)?;
        Ok(g.value(mean).scale(self.latent_scale))
    }

    /// Scaled posterior mean `[C, H/f, W/f]`; deterministic.
    pub fn encode(&self, image: &Image) -> Result<Tensor> {
        let z = self.encode_batch(&[image])?;
        let s = z.shape()[1..].to_vec();
        Ok(z.into_reshaped(&s)?)
    }

    /// Decodes scaled latents `[B, C, h, w]` into images clamped to `[0, 1]`.
    pub fn decode_batch(&self, z: &Tensor) -> Result<Vec<Image>> {
        if z.rank() != 4 || z.dim(1) != self.config.latent_channels {
            return Err(Error::Shape(format!(
                "latent {:?} does not have {} channels",
                z.shape(),
                self.config.latent_channels
            )));
        }
        let mut g = Graph::inference();
        let p = self.params.bind(&mut g, false);
        let zv = g.constant(z.scale(1.0 / self.latent_scale));
        let out = self.decode_graph(&mut g, &p, zv)?;
        let out = g.value(out);
        (0..z.dim(0)).map(|b| Image::from_tensor(&out.batch_item(b))).collect()
    }

    /// Decodes a scaled latent `[C, h, w]` into a `3 x hf x wf` image.
    pub fn decode(&self, z: &Tensor) -> Result<Image> {
        let mut s = vec![1];
        s.extend_from_slice(z.shape());
        let imgs = self.decode_batch(&z.reshape(&s)?)?;
        Ok(imgs.into_iter().next().expect("batch of one"))
    }

    /// Builds the training objective on `x` with reparameterization noise
    /// `noise` (same shape as the latent).
    fn loss_graph(&self, g: &mut Graph, p: &Bound, x: &Tensor, noise: &Tensor) -> Result<(Var, Var, Var)> {
        let xv = g.constant(x.clone());
        let (mean, logvar) = self.encode_graph(g, p, xv)?;
        let half = g.scale(logvar, 0.5);
        let std = g.exp(half);
        let n = g.constant(noise.clone());
        let eps = g.mul(std, n)?;
        let z = g.add(mean, eps)?;
        let recon = self.decode_graph(g, p, z)?;
        // L1 via sqrt(d^2 + tiny) keeps the op set smooth
        let d = g.sub(recon, xv)?;
        let d2 = g.square(d);
        let l1 = smooth_abs_mean(g, d2)?;
        // KL(N(mu, sigma^2) || N(0, 1)) per latent element
        let mu2 = g.square(mean);
        let var = g.exp(logvar);
        let t = g.add(mu2, var)?;
        let t = g.sub(t, logvar)?;
        let t = g.add_scalar(t, -1.0);
        let kl_mean = g.mean(t);
        let kl = g.scale(kl_mean, 0.5);
        let klw = g.scale(kl, self.config.kl_weight);
        let total = g.add(l1, klw)?;
        Ok((total, l1, kl))
    }

    /// Objective value for a batch and fixed reparameterization noise.
    pub fn loss(&self, images: &[&Image], noise: &Tensor) -> Result<CodecLoss> {
        let x = self.image_batch(images)?;
        let mut g = Graph::inference();
        let p = self.params.bind(&mut g, false);
        let (t, l, k) = self.loss_graph(&mut g, &p, &x, noise)?;
        Ok(CodecLoss {
            total: g.value(t).item()?,
            l1: g.value(l).item()?,
            kl: g.value(k).item()?,
        })
    }

    pub fn latent_shape(&self, batch: usize, h: usize, w: usize) -> [usize; 4] {
        let f = self.config.factor;
        [batch, self.config.latent_channels, h / f, w / f]
    }

    /// Batch indices and reparameterization noise used at `step`.
    pub fn step_draws(&self, n_images: usize, h: usize, w: usize, step: usize) -> (Vec<usize>, Tensor) {
        let mut rng = GaussianRng::with_stream(self.config.seed, step as u64 + 1);
        let b = self.config.batch_size.min(n_images);
        let idx = (0..b).map(|_| rng.below(n_images)).collect();
        let noise = Tensor::randn(&self.latent_shape(b, h, w), &mut rng);
        (idx, noise)
    }

    /// Trains for `config.steps` Adam steps with a cosine learning-rate
    /// decay on `images`, then calibrates the latent scale and freezes the
    /// codec.
    pub fn train(&mut self, images: &[&Image]) -> Result<CodecTrainReport> {
        if self.frozen {
            return Err(Error::Contract("codec is frozen".into()));
        }
        let first = images.first().ok_or_else(|| Error::Contract("codec training set is empty".into()))?;
        let (h, w) = first.dims();
        self.check_dims(h, w)?;
        let mut adam = Adam::new(
            AdamConfig {
                lr: self.config.lr,
                ..AdamConfig::default()
            },
            &self.params,
        );
        let mut report = CodecTrainReport::default();
        for step in 0..self.config.steps {
            adam.config.lr = cosine_lr(self.config.lr, step, self.config.steps);
            let (idx, noise) = self.step_draws(images.len(), h, w, step);
            let batch: Vec<&Image> = idx.iter().map(|&i| images[i]).collect();
            let x = self.image_batch(&batch)?;
            let mut g = Graph::new();
            let p = self.params.bind(&mut g, true);
            let (total, l1, kl) = self.loss_graph(&mut g, &p, &x, &noise)?;
            let loss = CodecLoss {
                total: g.value(total).item()?,
                l1: g.value(l1).item()?,
                kl: g.value(kl).item()?,
            };
            if !loss.total.is_finite() {
                return Err(Error::Training {
                    step: step as u64,
                    detail: format!("codec loss {loss:?}"),
                });
            }
            let mut grads = g.backward(total)?;
            let gs = p.collect_grads(&self.params, &mut grads);
            adam.step(&mut self.params, &gs)?;
            if step % 100 == 0 {
                info!("codec step {step}: l1 {:.5} kl {:.4}", loss.l1, loss.kl);
            }
            report.losses.push(loss);
        }
        self.calibrate(images)?;
        self.frozen = true;
        Ok(report)
    }

    /// Sets `latent_scale = 1 / std` of the unscaled posterior means of
    /// `images`.
    pub fn calibrate(&mut self, images: &[&Image]) -> Result<()> {
        let saved = self.latent_scale;
        self.latent_scale = 1.0;
        let mut values = Vec::new();
        for chunk in images.chunks(16) {
            values.extend_from_slice(self.encode_batch(chunk)?.data());
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        if !(std > 0.0 && std.is_finite()) {
            self.latent_scale = saved;
            return Err(Error::Numeric(format!("latent std {std} cannot be calibrated")));
        }
        self.latent_scale = 1.0 / std;
        Ok(())
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    /// Stores the codec tensors and latent scale into `ckpt`.
    pub fn write_into(&self, ckpt: &mut Checkpoint) {
        ckpt.push_store(CODEC_PREFIX, &self.params);
        ckpt.push(LATENT_SCALE_KEY, Tensor::scalar(self.latent_scale));
    }

    /// Standalone codec checkpoint; its codec section is this codec's config.
    pub fn to_checkpoint(&self, config: &PipelineConfig) -> Checkpoint {
        let mut config = config.clone();
        config.codec = self.config.clone();
        let mut ckpt = Checkpoint::new(config);
        ckpt.frozen = self.frozen;
        ckpt.seed = self.config.seed;
        self.write_into(&mut ckpt);
        ckpt
    }

    /// Reads the codec stored in any checkpoint that carries one.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let scale = ckpt
            .get(LATENT_SCALE_KEY)
            .ok_or_else(|| Error::Checkpoint("checkpoint carries no codec".into()))?
            .item()?;
        Self::from_parts(&ckpt.config.codec, ckpt.store(CODEC_PREFIX), scale, ckpt.frozen)
    }
}

/// Cosine decay from `base` at step 0 to 1% of `base` at the last step.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    let frac = step as f64 / total.saturating_sub(1).max(1) as f64;
    let floor = 0.01 * base;
    floor + (base - floor) * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// Mean of `sqrt(d^2 + 1e-6)`, a smooth stand-in for `|d|`.
fn smooth_abs_mean(g: &mut Graph, d2: Var) -> Result<Var> {
    let shifted = g.add_scalar(d2, 1e-6);
    let root = g.sqrt(shifted)?;
    Ok(g.mean(root))
}
