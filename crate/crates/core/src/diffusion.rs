//! Linear noise schedule, forward noising, the reverse DDPM step with
//! learned variance, and the variational bound term.

use vton_tensor::{GaussianRng, Graph, Tensor, Var};

use crate::config::DiffusionConfig;
use crate::error::{Error, Result};

/// Arrays are indexed by timestep with slot 0 holding `t = 0`
/// (`alpha_bar[0] = 1`, `beta[0]` unused).
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    timesteps: usize,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    posterior_var: Vec<f64>,
    /// `ln posterior_var`, with the `t = 1` entry (zero variance) replaced
    /// by the `t = 2` value.
    posterior_log_var_clipped: Vec<f64>,
    eq6_literal: bool,
}

impl NoiseSchedule {
    /// Linear betas between the endpoints, inclusive.
    pub fn linear(timesteps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if timesteps == 0 {
            return Err(Error::Config("schedule needs at least one timestep".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Config(format!(
                "invalid beta range [{beta_start}, {beta_end}]; need 0 < start <= end < 1"
            )));
        }
        let betas: Vec<f64> = (0..timesteps)
            .map(|i| {
                if timesteps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (timesteps - 1) as f64
                }
            })
            .collect();
        Self::from_betas(&betas)
    }

    /// Schedule from explicit `beta_1..beta_T`.
    pub fn from_betas(betas: &[f64]) -> Result<Self> {
        if betas.is_empty() || betas.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::Config("betas must lie in (0, 1)".into()));
        }
        let t_max = betas.len();
        let mut beta = vec![0.0; t_max + 1];
        let mut alpha = vec![1.0; t_max + 1];
        let mut alpha_bar = vec![1.0; t_max + 1];
        let mut posterior_var = vec![0.0; t_max + 1];
        for t in 1..=t_max {
            beta[t] = betas[t - 1];
            alpha[t] = 1.0 - beta[t];
            alpha_bar[t] = alpha_bar[t - 1] * alpha[t];
            posterior_var[t] = (1.0 - alpha_bar[t - 1]) / (1.0 - alpha_bar[t]) * beta[t];
        }
        let mut clipped: Vec<f64> = posterior_var.iter().map(|v| v.ln()).collect();
        clipped[1] = if t_max >= 2 { clipped[2] } else { beta[1].ln() };
        clipped[0] = f64::NAN;
        Ok(Self {
            timesteps: t_max,
            beta,
            alpha,
            alpha_bar,
            posterior_var,
            posterior_log_var_clipped: clipped,
            eq6_literal: false,
        })
    }

    pub fn from_config(cfg: &DiffusionConfig) -> Result<Self> {
        let mut s = Self::linear(cfg.timesteps, cfg.beta_start, cfg.beta_end)?;
        s.eq6_literal = cfg.eq6_literal;
        Ok(s)
    }

    pub fn timesteps(&self) -> usize {
        self.timesteps
    }

    /// CSV with header `t,beta,alpha,alpha_bar,posterior_var`, one row per
    /// step `1..=T`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("t,beta,alpha,alpha_bar,posterior_var\n");
        for t in 1..=self.timesteps {
            s.push_str(&format!(
                "{t},{:e},{:e},{:e},{:e}\n",
                self.beta(t),
                self.alpha(t),
                self.alpha_bar(t),
                self.posterior_var(t)
            ));
        }
        s
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn posterior_var(&self, t: usize) -> f64 {
        self.posterior_var[t]
    }

    pub fn eq6_literal(&self) -> bool {
        self.eq6_literal
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.timesteps {
            return Err(Error::Contract(format!("timestep {t} outside 1..={}", self.timesteps)));
        }
        Ok(())
    }

    /// `sqrt(alpha_bar_t) z0 + sqrt(1 - alpha_bar_t) eps`
    pub fn q_sample(&self, z0: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor> {
        self.check_t(t)?;
        let (a, b) = (self.alpha_bar[t].sqrt(), (1.0 - self.alpha_bar[t]).sqrt());
        Ok(z0.zip_map(eps, |z, e| a * z + b * e)?)
    }

    /// Per-sample `q_sample` on a batch `[B, ...]` with timesteps `ts`.
    pub fn q_sample_batch(&self, z0: &Tensor, ts: &[usize], eps: &Tensor) -> Result<Tensor> {
        if ts.len() != z0.dim(0) || z0.shape() != eps.shape() {
            return Err(Error::Shape(format!(
                "q_sample batch: {} timesteps for latents {:?} and noise {:?}",
                ts.len(),
                z0.shape(),
                eps.shape()
            )));
        }
        let per = z0.numel() / ts.len();
        let mut out = Vec::with_capacity(z0.numel());
        for (b, &t) in ts.iter().enumerate() {
            self.check_t(t)?;
            let (a, s) = (self.alpha_bar[t].sqrt(), (1.0 - self.alpha_bar[t]).sqrt());
            let r = b * per..(b + 1) * per;
            out.extend(z0.data()[r.clone()].iter().zip(&eps.data()[r]).map(|(z, e)| a * z + s * e));
        }
        Ok(Tensor::new(z0.shape(), out)?)
    }

    /// Mean and variance of the true posterior `q(z_{t-1} | z_t, z0)`.
    pub fn q_posterior(&self, z0: &Tensor, zt: &Tensor, t: usize) -> Result<(Tensor, f64)> {
        self.check_t(t)?;
        let ab_prev = self.alpha_bar[t - 1];
        let ab = self.alpha_bar[t];
        let c0 = ab_prev.sqrt() * self.beta[t] / (1.0 - ab);
        let ct = self.alpha[t].sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        Ok((z0.zip_map(zt, |a, b| c0 * a + ct * b)?, self.posterior_var[t]))
    }

    /// Model mean from the predicted noise (standard posterior form).
    pub fn model_mean(&self, zt: &Tensor, eps_hat: &Tensor, t: usize) -> Result<Tensor> {
        self.check_t(t)?;
        let inv = 1.0 / self.alpha[t].sqrt();
        let c = self.beta[t] / (1.0 - self.alpha_bar[t]).sqrt();
        Ok(zt.zip_map(eps_hat, |z, e| inv * (z - c * e))?)
    }

    /// `w ln beta_t + (1 - w) ln beta~_t` with `w = (v + 1) / 2`; `v` is
    /// the raw model output and is not clamped.
    pub fn model_log_var(&self, v: f64, t: usize) -> f64 {
        let w = (v + 1.0) / 2.0;
        w * self.beta[t].ln() + (1.0 - w) * self.posterior_log_var_clipped[t]
    }

    /// One reverse step with explicit injected noise `n`. At `t = 1` the
    /// noise term is dropped.
    pub fn p_sample_step_with(&self, zt: &Tensor, eps_hat: &Tensor, v: &Tensor, t: usize, n: &Tensor) -> Result<Tensor> {
        self.check_t(t)?;
        if zt.shape() != eps_hat.shape() || zt.shape() != v.shape() || zt.shape() != n.shape() {
            return Err(Error::Shape(format!(
                "reverse step shapes z {:?}, eps {:?}, v {:?}, noise {:?}",
                zt.shape(),
                eps_hat.shape(),
                v.shape(),
                n.shape()
            )));
        }
        let noise_on = t > 1;
        let inv = 1.0 / self.alpha[t].sqrt();
        let out: Vec<f64> = if self.eq6_literal {
            let c = (1.0 - self.alpha[t]) / (1.0 - self.beta[t]).sqrt();
            (0..zt.numel())
                .map(|i| {
                    let sd = if noise_on { (0.5 * self.model_log_var(v.data()[i], t)).exp() } else { 0.0 };
                    inv * (zt.data()[i] - c * eps_hat.data()[i] + sd * n.data()[i])
                })
                .collect()
        } else {
            let c = self.beta[t] / (1.0 - self.alpha_bar[t]).sqrt();
            (0..zt.numel())
                .map(|i| {
                    let mean = inv * (zt.data()[i] - c * eps_hat.data()[i]);
                    let sd = if noise_on { (0.5 * self.model_log_var(v.data()[i], t)).exp() } else { 0.0 };
                    mean + sd * n.data()[i]
                })
                .collect()
        };
        let out = Tensor::new(zt.shape(), out)?;
        if !out.all_finite() {
            return Err(Error::Sampling { t });
        }
        Ok(out)
    }

    /// One reverse step drawing the injected noise from `rng`.
    pub fn p_sample_step(&self, zt: &Tensor, eps_hat: &Tensor, v: &Tensor, t: usize, rng: &mut GaussianRng) -> Result<Tensor> {
        let n = Tensor::randn(zt.shape(), rng);
        self.p_sample_step_with(zt, eps_hat, v, t, &n)
    }

    /// KL between the true posterior and the model Gaussian, in nats per
    /// element, averaged. The model mean is treated as a constant.
    pub fn vlb_term(&self, z0: &Tensor, zt: &Tensor, eps_hat: &Tensor, v: &Tensor, t: usize) -> Result<f64> {
        for (name, x) in [("z0", z0), ("zt", zt), ("eps_hat", eps_hat), ("v", v)] {
            if !x.all_finite() {
                return Err(Error::Numeric(format!("non-finite {name} in vlb term")));
            }
        }
        let (mq, _) = self.q_posterior(z0, zt, t)?;
        let mp = self.model_mean(zt, eps_hat, t)?;
        let lq = self.posterior_log_var_clipped[t];
        let mut acc = 0.0;
        for i in 0..z0.numel() {
            let lp = self.model_log_var(v.data()[i], t);
            acc += gaussian_kl(mq.data()[i], lq, mp.data()[i], lp);
        }
        Ok(acc / z0.numel() as f64)
    }

    /// Graph form of [`Self::vlb_term`] for a batch with per-sample
    /// timesteps; gradients reach only `v`. Returns the mean over elements.
    pub fn vlb_graph(&self, g: &mut Graph, z0: &Tensor, zt: &Tensor, eps_hat: &Tensor, v: Var, ts: &[usize]) -> Result<Var> {
        let shape = z0.shape().to_vec();
        if ts.len() != shape[0] || g.shape(v) != shape.as_slice() {
            return Err(Error::Shape(format!(
                "vlb batch: {} timesteps, latents {:?}, v {:?}",
                ts.len(),
                shape,
                g.shape(v)
            )));
        }
        let per = z0.numel() / ts.len();
        let n = z0.numel();
        // log var = a_t + b_t * v with per-element coefficients
        let (mut a, mut b) = (Vec::with_capacity(n), Vec::with_capacity(n));
        let (mut lq, mut dmu2) = (Vec::with_capacity(n), Vec::with_capacity(n));
        for (i, &t) in ts.iter().enumerate() {
            self.check_t(t)?;
            let r = i * per..(i + 1) * per;
            let z0_i = Tensor::new(&[per], z0.data()[r.clone()].to_vec())?;
            let zt_i = Tensor::new(&[per], zt.data()[r.clone()].to_vec())?;
            let e_i = Tensor::new(&[per], eps_hat.data()[r].to_vec())?;
            let (mq, _) = self.q_posterior(&z0_i, &zt_i, t)?;
            let mp = self.model_mean(&zt_i, &e_i, t)?;
            let (lb, lt) = (self.beta[t].ln(), self.posterior_log_var_clipped[t]);
            for k in 0..per {
                a.push(0.5 * (lb + lt));
                b.push(0.5 * (lb - lt));
                lq.push(lt);
                dmu2.push((mq.data()[k] - mp.data()[k]).powi(2));
            }
        }
        let mk = |d: Vec<f64>| Tensor::new(&shape, d);
        let (a, b, lq, dmu2) = (g.constant(mk(a)?), g.constant(mk(b)?), mk(lq)?, mk(dmu2)?);
        let bv = g.mul(b, v)?;
        let lp = g.add(a, bv)?;
        // 0.5 * (lp - lq + (exp(lq) + dmu2) * exp(-lp) - 1)
        let num = g.constant(lq.zip_map(&dmu2, |l, d| l.exp() + d)?);
        let neg = g.scale(lp, -1.0);
        let inv = g.exp(neg);
        let ratio = g.mul(num, inv)?;
        let lqv = g.constant(lq);
        let diff = g.sub(lp, lqv)?;
        let s = g.add(diff, ratio)?;
        let s = g.add_scalar(s, -1.0);
        let m = g.mean(s);
        Ok(g.scale(m, 0.5))
    }
}

/// `KL(N(m1, e^l1) || N(m2, e^l2))` for scalars.
pub fn gaussian_kl(m1: f64, l1: f64, m2: f64, l2: f64) -> f64 {
    0.5 * (l2 - l1 + (l1.exp() + (m1 - m2).powi(2)) * (-l2).exp() - 1.0)
}
