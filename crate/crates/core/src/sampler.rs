//! Guided reverse diffusion from noise to a try-on image.

use vton_tensor::{GaussianRng, Graph, Tensor};

use crate::checkpoint::{Checkpoint, UNET_PREFIX};
use crate::codec::Codec;
use crate::config::PipelineConfig;
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::unet::UNet;

/// `uncond + s * (cond - uncond)`, with the endpoints returned exactly.
pub fn cfg_combine(eps_cond: &Tensor, eps_uncond: &Tensor, s: f64) -> Result<Tensor> {
    if eps_cond.shape() != eps_uncond.shape() {
        return Err(Error::Contract(format!(
            "guidance of {:?} and {:?} estimates",
            eps_cond.shape(),
            eps_uncond.shape()
        )));
    }
    if s == 1.0 {
        return Ok(eps_cond.clone());
    }
    if s == 0.0 {
        return Ok(eps_uncond.clone());
    }
    Ok(eps_cond.zip_map(eps_uncond, |c, u| u + s * (c - u))?)
}

/// Trained network, schedule, and codec loaded from one checkpoint.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: PipelineConfig,
    pub unet: UNet,
    pub schedule: NoiseSchedule,
    pub codec: Codec,
    pub fingerprint: String,
}

impl Model {
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if !ckpt.has_prefix(UNET_PREFIX) {
            return Err(Error::Checkpoint("checkpoint holds no diffusion network".into()));
        }
        let config = ckpt.config.clone();
        let (h, w) = config.latent_dims();
        let mut unet = UNet::new(&config.effective_unet(), h, w, config.train.seed)?;
        unet.load_params(&ckpt.store(UNET_PREFIX))?;
        let codec = Codec::from_checkpoint(ckpt)?;
        Ok(Self {
            schedule: NoiseSchedule::from_config(&config.diffusion)?,
            fingerprint: ckpt.fingerprint(),
            config,
            unet,
            codec,
        })
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    /// Guided noise estimate and variance output for batch `zt` at step `t`.
    /// The unconditional branch zero-fills both conditions before the
    /// network; at `s = 1` it is skipped.
    fn guided(&self, zt: &Tensor, zcond: &Tensor, zg: &Tensor, t: usize, s: f64) -> Result<(Tensor, Tensor)> {
        let b = zt.dim(0);
        if s == 1.0 {
            return self.unet.predict(zt, zcond, zg, &vec![t; b]);
        }
        // conditional rows first, unconditional rows second, one pass
        let zeros = Tensor::zeros(zcond.shape());
        let zt2 = concat_batch(zt, zt)?;
        let zc2 = concat_batch(zcond, &zeros)?;
        let zg2 = concat_batch(zg, &zeros)?;
        let mut g = Graph::inference();
        let p = self.unet.params().bind(&mut g, false);
        let (a, c, gv) = (g.constant(zt2), g.constant(zc2), g.constant(zg2));
        let pyr = self.unet.garment_encode(&mut g, &p, gv)?;
        let (e, v) = self.unet.forward(&mut g, &p, a, c, &vec![t; 2 * b], &pyr, None)?;
        let (e, v) = (g.value(e), g.value(v));
        let half = e.numel() / 2;
        let shape = zt.shape();
        let ec = Tensor::new(shape, e.data()[..half].to_vec())?;
        let eu = Tensor::new(shape, e.data()[half..].to_vec())?;
        // the variance output follows the conditional branch
        let vc = Tensor::new(shape, v.data()[..half].to_vec())?;
        Ok((cfg_combine(&ec, &eu, s)?, vc))
    }

    /// Runs `t = T..1` from `Z^T ~ N(0, I)` drawn with `seed`. `observe`
    /// sees every intermediate latent `Z^{t-1}`.
    pub fn sample_latents(&self, zcond: &Tensor, zg: &Tensor, s: f64, seed: u64, mut observe: impl FnMut(usize, &Tensor)) -> Result<Tensor> {
        if !(s >= 0.0 && s.is_finite()) {
            return Err(Error::Contract(format!("guidance scale {s} must be a finite value >= 0")));
        }
        if zcond.shape() != zg.shape() {
            return Err(Error::Shape(format!(
                "condition {:?} and garment {:?} latents differ",
                zcond.shape(),
                zg.shape()
            )));
        }
        let mut rng = GaussianRng::with_stream(seed, 0);
        let mut z = Tensor::randn(zcond.shape(), &mut rng);
        for t in (1..=self.schedule.timesteps()).rev() {
            let (eps, v) = self.guided(&z, zcond, zg, t, s)?;
            let mut step_rng = GaussianRng::with_stream(seed, t as u64);
            z = self.schedule.p_sample_step(&z, &eps, &v, t, &mut step_rng)?;
            observe(t, &z);
        }
        Ok(z)
    }

    /// Try-on result for a person image and a garment image.
    pub fn generate(&self, person: &Image, garment: &Image, s: f64, seed: u64) -> Result<Image> {
        let mut out = self.generate_batch(&[person], &[garment], s, seed)?;
        Ok(out.remove(0))
    }

    /// Batched [`Self::generate`]; every element shares the seed's noise
    /// stream, so element results depend on the batch composition.
    pub fn generate_batch(&self, persons: &[&Image], garments: &[&Image], s: f64, seed: u64) -> Result<Vec<Image>> {
        if persons.len() != garments.len() || persons.is_empty() {
            return Err(Error::Contract(format!("{} person images for {} garments", persons.len(), garments.len())));
        }
        let expect = (self.config.data.height, self.config.data.width);
        for im in persons.iter().chain(garments) {
            if im.dims() != expect {
                self.codec.check_dims(im.dims().0, im.dims().1)?;
                return Err(Error::Shape(format!("image {:?} does not match the trained size {expect:?}", im.dims())));
            }
        }
        let zc = self.codec.encode_batch(persons)?;
        let zg = self.codec.encode_batch(garments)?;
        let z0 = self.sample_latents(&zc, &zg, s, seed, |_, _| {})?;
        self.codec.decode_batch(&z0)
    }
}

fn concat_batch(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut shape = a.shape().to_vec();
    if b.shape() != a.shape() {
        return Err(Error::Shape(format!("cannot stack {:?} and {:?}", a.shape(), b.shape())));
    }
    shape[0] *= 2;
    let mut data = a.data().to_vec();
    data.extend_from_slice(b.data());
    Ok(Tensor::new(&shape, data)?)
}

/// Loads the checkpoint and produces the try-on image from exactly a person
/// image, a garment image, and a guidance scale.
pub fn generate_tryon(person: &Image, garment: &Image, ckpt: &Checkpoint, s: f64) -> Result<Image> {
    let model = Model::from_checkpoint(ckpt)?;
    model.generate(person, garment, s, ckpt.config.sample.seed)
}
