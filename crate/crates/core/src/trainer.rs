//! Diffusion training: latent cache, per-step draws, the noise-prediction
//! loss with the variance bound term, condition dropout, and Adam.

use std::time::Instant;

use log::info;
use vton_tensor::{Adam, AdamConfig, GaussianRng, Graph, Tensor};

use crate::checkpoint::{Checkpoint, ADAM_M_PREFIX, ADAM_V_PREFIX, UNET_PREFIX};
use crate::codec::Codec;
use crate::config::PipelineConfig;
use crate::data::TryOnSample;
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::unet::UNet;

/// Pre-encoded latents of one dataset sample.
#[derive(Clone, Debug)]
pub struct LatentSample {
    pub person: Tensor,
    pub garment: Tensor,
    /// `(hub_id, replica, latent)`
    pub pseudo: Vec<(usize, usize, Tensor)>,
}

#[derive(Clone, Debug)]
pub struct LatentCache {
    pub samples: Vec<LatentSample>,
}

impl LatentCache {
    /// Encodes every person, garment, and pseudo-input once.
    pub fn build(codec: &Codec, samples: &[TryOnSample]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Contract("dataset is empty".into()));
        }
        let (h, w) = samples[0].person.dims();
        codec
            .check_dims(h, w)
            .map_err(|e| Error::Config(format!("dataset does not fit the codec: {e}")))?;
        let one = |t: &Tensor, b: usize| t.batch_item(b);
        let mut out = Vec::with_capacity(samples.len());
        for s in samples {
            let mut imgs = vec![&s.person, &s.garment];
            imgs.extend(s.pseudo.iter().map(|p| &p.image));
            let mut z = Vec::with_capacity(imgs.len());
            for chunk in imgs.chunks(16) {
                let t = codec.encode_batch(chunk)?;
                z.extend((0..chunk.len()).map(|b| one(&t, b)));
            }
            let mut z = z.into_iter();
            let person = z.next().expect("person latent");
            let garment = z.next().expect("garment latent");
            let pseudo = s.pseudo.iter().zip(z).map(|(p, t)| (p.hub_id, p.replica, t)).collect();
            out.push(LatentSample { person, garment, pseudo });
        }
        Ok(Self { samples: out })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Loss parts of one step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLoss {
    pub mse: f64,
    pub vlb: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    pub step: u64,
    pub loss_mse: f64,
    pub loss_vlb: f64,
    pub elapsed_s: f64,
}

/// Random quantities consumed by one training step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepDraws {
    pub timesteps: Vec<usize>,
    pub eps: Tensor,
    /// `true` where both conditions are replaced by zeros.
    pub drop: Vec<bool>,
}

impl StepDraws {
    pub fn draw(schedule: &NoiseSchedule, latent_shape: &[usize], p_uncond: f64, rng: &mut GaussianRng) -> Self {
        let b = latent_shape[0];
        let timesteps = (0..b).map(|_| 1 + rng.below(schedule.timesteps())).collect();
        let drop = (0..b).map(|_| rng.bernoulli(p_uncond)).collect();
        let eps = Tensor::randn(latent_shape, rng);
        Self { timesteps, eps, drop }
    }
}

/// Zeroes batch rows of `t` where `mask` is set.
pub fn zero_rows(t: &Tensor, mask: &[bool]) -> Tensor {
    let mut out = t.clone();
    let per = t.numel() / mask.len();
    for (b, &m) in mask.iter().enumerate() {
        if m {
            out.data_mut()[b * per..(b + 1) * per].fill(0.0);
        }
    }
    out
}

pub struct Trainer {
    config: PipelineConfig,
    schedule: NoiseSchedule,
    unet: UNet,
    adam: Adam,
    step: u64,
}

impl Trainer {
    pub fn new(config: &PipelineConfig) -> Result<Self> {
        config.validate()?;
        let (h, w) = config.latent_dims();
        let unet = UNet::new(&config.effective_unet(), h, w, config.train.seed)?;
        let adam = Adam::new(adam_config(config), unet.params());
        Ok(Self {
            config: config.clone(),
            schedule: NoiseSchedule::from_config(&config.diffusion)?,
            unet,
            adam,
            step: 0,
        })
    }

    /// Restores network, optimizer state, and step counter.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let mut t = Self::new(&ckpt.config)?;
        t.unet.load_params(&ckpt.store(UNET_PREFIX))?;
        let (m, v) = (ckpt.store(ADAM_M_PREFIX), ckpt.store(ADAM_V_PREFIX));
        if m.len() != t.unet.params().len() || v.len() != m.len() {
            return Err(Error::Checkpoint("optimizer state does not match the network".into()));
        }
        let take = |s: &vton_tensor::ParamStore| -> Result<Vec<Tensor>> {
            t.unet
                .params()
                .iter()
                .map(|(name, p)| {
                    let id = s.id(name).ok_or_else(|| Error::Checkpoint(format!("missing optimizer state for {name}")))?;
                    let x = s.get(id).clone();
                    if x.shape() != p.shape() {
                        return Err(Error::Checkpoint(format!("optimizer state for {name} has shape {:?}", x.shape())));
                    }
                    Ok(x)
                })
                .collect()
        };
        let (m, v) = (take(&m)?, take(&v)?);
        t.adam = Adam::from_state(adam_config(&ckpt.config), ckpt.adam_step, m, v);
        t.step = ckpt.step;
        Ok(t)
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn unet(&self) -> &UNet {
        &self.unet
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// One optimizer update on latents `[B, C, h, w]` using `draws`.
    pub fn train_step(&mut self, zp: &Tensor, zcond: &Tensor, zg: &Tensor, draws: &StepDraws) -> Result<StepLoss> {
        if !(zp.all_finite() && zcond.all_finite() && zg.all_finite() && draws.eps.all_finite()) {
            return Err(Error::Training {
                step: self.step,
                detail: "non-finite value in the batch latents".into(),
            });
        }
        let zt = self.schedule.q_sample_batch(zp, &draws.timesteps, &draws.eps)?;
        let zc = zero_rows(zcond, &draws.drop);
        let zgarm = zero_rows(zg, &draws.drop);

        let mut g = Graph::new();
        let p = self.unet.params().bind(&mut g, true);
        let (ztv, zcv, zgv) = (g.constant(zt.clone()), g.constant(zc), g.constant(zgarm));
        let pyramid = self.unet.garment_encode(&mut g, &p, zgv)?;
        let (eps_hat, v) = self.unet.forward(&mut g, &p, ztv, zcv, &draws.timesteps, &pyramid, None)?;

        let target = g.constant(draws.eps.clone());
        let diff = g.sub(eps_hat, target)?;
        let sq = g.square(diff);
        let mse = g.mean(sq);
        let eps_val = g.value(eps_hat).clone();
        let vlb = self.schedule.vlb_graph(&mut g, zp, &zt, &eps_val, v, &draws.timesteps)?;
        let weighted = g.scale(vlb, self.config.train.lambda_vlb);
        let total = g.add(mse, weighted)?;
        let loss = StepLoss {
            mse: g.value(mse).item()?,
            vlb: g.value(vlb).item()?,
        };
        if !(loss.mse.is_finite() && loss.vlb.is_finite()) {
            return Err(Error::Training {
                step: self.step,
                detail: format!("non-finite loss (mse {}, vlb {}) at t = {:?}", loss.mse, loss.vlb, draws.timesteps),
            });
        }
        let mut grads = g.backward(total)?;
        let gs = p.collect_grads(self.unet.params(), &mut grads);
        self.adam.step(self.unet.params_mut(), &gs)?;
        self.step += 1;
        Ok(loss)
    }

    /// Assembles the batch for `step`: sample indices, one pseudo-input per
    /// sample, and the noise draws, all from the `(seed, step)` stream.
    pub fn batch_for_step(&self, cache: &LatentCache, step: u64) -> Result<(Tensor, Tensor, Tensor, StepDraws)> {
        let tc = &self.config.train;
        let mut rng = GaussianRng::with_stream(tc.seed, step);
        let b = tc.batch_size;
        let (mut zp, mut zc, mut zg) = (Vec::with_capacity(b), Vec::with_capacity(b), Vec::with_capacity(b));
        for _ in 0..b {
            let s = &cache.samples[rng.below(cache.len())];
            let eligible: Vec<&Tensor> = s
                .pseudo
                .iter()
                .filter(|(hub, rep, _)| tc.use_multi_hub || (*hub == 1 && *rep == 0))
                .map(|(_, _, t)| t)
                .collect();
            if eligible.is_empty() {
                return Err(Error::Config("sample has no eligible pseudo-input (hub 1, first replica)".into()));
            }
            zc.push(eligible[rng.below(eligible.len())]);
            zp.push(&s.person);
            zg.push(&s.garment);
        }
        let zp = Tensor::stack_batch(&zp)?;
        let zc = Tensor::stack_batch(&zc)?;
        let zg = Tensor::stack_batch(&zg)?;
        let draws = StepDraws::draw(&self.schedule, zp.shape(), tc.effective_p_uncond(), &mut rng);
        Ok((zp, zc, zg, draws))
    }

    /// Trains until `config.train.steps`, calling `on_step` after every
    /// update.
    pub fn fit(&mut self, cache: &LatentCache, mut on_step: impl FnMut(&StepLog, &Trainer) -> Result<()>) -> Result<Vec<StepLog>> {
        let (h, w) = self.unet.latent_hw();
        let first = &cache.samples.first().ok_or_else(|| Error::Contract("empty latent cache".into()))?.person;
        if first.shape()[1..] != [self.config.codec.latent_channels, h, w] {
            return Err(Error::Config(format!(
                "latent cache has shape {:?}, network expects [{}, {h}, {w}]",
                first.shape(),
                self.config.codec.latent_channels
            )));
        }
        let start = Instant::now();
        let mut logs = Vec::new();
        while self.step < self.config.train.steps {
            let step = self.step;
            let (zp, zc, zg, draws) = self.batch_for_step(cache, step)?;
            let loss = self.train_step(&zp, &zc, &zg, &draws)?;
            let log = StepLog {
                step,
                loss_mse: loss.mse,
                loss_vlb: loss.vlb,
                elapsed_s: start.elapsed().as_secs_f64(),
            };
            if step.is_multiple_of(100) {
                info!("step {step}: mse {:.5} vlb {:.5}", loss.mse, loss.vlb);
            }
            on_step(&log, self)?;
            logs.push(log);
        }
        Ok(logs)
    }

    /// Checkpoint with network, optimizer state, and the frozen codec.
    pub fn to_checkpoint(&self, codec: &Codec) -> Checkpoint {
        let mut ckpt = Checkpoint::new(self.config.clone());
        ckpt.frozen = codec.is_frozen();
        ckpt.step = self.step;
        ckpt.seed = self.config.train.seed;
        let (adam_step, m, v) = self.adam.state();
        ckpt.adam_step = adam_step;
        ckpt.push_store(UNET_PREFIX, self.unet.params());
        for ((name, _), (mt, vt)) in self.unet.params().iter().zip(m.iter().zip(v)) {
            ckpt.push(format!("{ADAM_M_PREFIX}{name}"), mt.clone());
            ckpt.push(format!("{ADAM_V_PREFIX}{name}"), vt.clone());
        }
        codec.write_into(&mut ckpt);
        ckpt
    }
}

fn adam_config(config: &PipelineConfig) -> AdamConfig {
    AdamConfig {
        lr: config.train.lr,
        beta1: config.train.beta1,
        beta2: config.train.beta2,
        eps: config.train.eps,
    }
}

/// CSV training log with header `step,loss_mse,loss_vlb,elapsed_s`.
pub fn log_csv(logs: &[StepLog]) -> String {
    let mut s = String::from("step,loss_mse,loss_vlb,elapsed_s\n");
    for l in logs {
        s.push_str(&format!("{},{:.9e},{:.9e},{:.3}\n", l.step, l.loss_mse, l.loss_vlb, l.elapsed_s));
    }
    s
}
