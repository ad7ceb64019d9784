//! Garment fusion attention and the vanilla cross-attention baseline.

use vton_tensor::{Bound, GaussianRng, Graph, ParamStore, Tensor, Var};

use crate::config::AttentionKind;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, LayerNorm};

/// Attention maps recorded at one site, per batch element and head:
/// `[B * N, L, L]`.
#[derive(Clone, Debug)]
pub struct SiteTrace {
    pub site: String,
    pub m1: Tensor,
    /// Absent for vanilla cross-attention.
    pub m2: Option<Tensor>,
    /// Merged-head attention output before the output projection,
    /// `[B, c, h, w]`.
    pub pre_projection: Tensor,
    /// Value projections `V^P` and `V^G`, `[B, c, h, w]`.
    pub v_person: Option<Tensor>,
    pub v_garment: Tensor,
}

/// Collects attention maps when passed to a forward pass.
#[derive(Clone, Debug, Default)]
pub struct AttentionTrace {
    pub sites: Vec<SiteTrace>,
}

/// Attention sublayer (person/garment layer norms, 1x1 projections, the
/// attention product, output projection, residual) followed by a
/// feed-forward sublayer with its own residual.
#[derive(Clone, Debug)]
pub struct AttentionBlock {
    name: String,
    kind: AttentionKind,
    heads: usize,
    norm_p: LayerNorm,
    norm_g: LayerNorm,
    to_q: Conv2d,
    to_kp: Option<Conv2d>,
    to_vp: Option<Conv2d>,
    to_kg: Conv2d,
    to_vg: Conv2d,
    proj: Conv2d,
    ff_norm: LayerNorm,
    ff1: Conv2d,
    ff2: Conv2d,
}

impl AttentionBlock {
    pub fn new(store: &mut ParamStore, name: &str, kind: AttentionKind, channels: usize, heads: usize, rng: &mut GaussianRng) -> Result<Self> {
        if kind == AttentionKind::None {
            return Err(Error::Config("attention block requested with attention disabled".into()));
        }
        if heads == 0 || !channels.is_multiple_of(heads) {
            return Err(Error::Config(format!("{channels} channels cannot be split into {heads} heads")));
        }
        let c = channels;
        let gfa = kind == AttentionKind::Gfa;
        let mut conv = |suffix: &str, cin: usize, cout: usize| Conv2d::new(store, &format!("{name}.{suffix}"), cin, cout, 1, 1, rng);
        let to_q = conv("to_q", c, c);
        let to_kp = gfa.then(|| conv("to_k_person", c, c));
        let to_vp = gfa.then(|| conv("to_v_person", c, c));
        let to_kg = conv("to_k_garment", c, c);
        let to_vg = conv("to_v_garment", c, c);
        let proj = conv("proj", c, c);
        let ff1 = conv("ff1", c, 2 * c);
        let ff2 = conv("ff2", 2 * c, c);
        Ok(Self {
            name: name.to_string(),
            kind,
            heads,
            norm_p: LayerNorm::new(store, &format!("{name}.norm_person"), c),
            norm_g: LayerNorm::new(store, &format!("{name}.norm_garment"), c),
            to_q,
            to_kp,
            to_vp,
            to_kg,
            to_vg,
            proj,
            ff_norm: LayerNorm::new(store, &format!("{name}.ff_norm"), c),
            ff1,
            ff2,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// `[B, c, h, w] -> [B * N, d, L]`
    fn split_heads(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        Ok(g.reshape(x, &[s[0] * self.heads, s[1] / self.heads, s[2] * s[3]])?)
    }

    /// Row-stochastic attention `softmax(a^T b / sqrt(d))` for head-split
    /// `a, b: [B * N, d, L]`.
    fn attention_map(&self, g: &mut Graph, a: Var, b: Var) -> Result<Var> {
        let d = g.shape(a)[1] as f64;
        let s = g.matmul_t(a, b, true, false)?;
        let s = g.scale(s, 1.0 / d.sqrt());
        let m = g.softmax_lastdim(s)?;
        debug_assert!(rows_stochastic(g.value(m), 1e-10), "attention rows must sum to 1");
        Ok(m)
    }

    /// `person` and `garment` are `[B, c, h, w]` features at the same scale.
    pub fn forward(&self, g: &mut Graph, p: &Bound, person: Var, garment: Var, trace: Option<&mut AttentionTrace>) -> Result<Var> {
        if g.shape(person) != g.shape(garment) {
            return Err(Error::Contract(format!(
                "{}: person features {:?} and garment features {:?} differ; garment pyramid must match the person stream at each attention scale",
                self.name,
                g.shape(person),
                g.shape(garment)
            )));
        }
        let shape = g.shape(person).to_vec();
        let xp = self.norm_p.forward(g, p, person)?;
        let xg = self.norm_g.forward(g, p, garment)?;
        let q = self.to_q.forward(g, p, xp)?;
        let kg = self.to_kg.forward(g, p, xg)?;
        let vg = self.to_vg.forward(g, p, xg)?;
        let (qh, kgh, vgh) = (self.split_heads(g, q)?, self.split_heads(g, kg)?, self.split_heads(g, vg)?);
        let m1 = self.attention_map(g, qh, kgh)?;

        let (out, m2, vp) = match (&self.to_kp, &self.to_vp) {
            (Some(to_kp), Some(to_vp)) => {
                let kp = to_kp.forward(g, p, xp)?;
                let vp = to_vp.forward(g, p, xp)?;
                let kph = self.split_heads(g, kp)?;
                let vph = self.split_heads(g, vp)?;
                let m2 = self.attention_map(g, kph, kgh)?;
                // (M1 M2 V)^T = V^T M2^T M1^T with V stored [d, L]
                let v = g.add(vph, vgh)?;
                let a = g.matmul_t(v, m2, false, true)?;
                let out = g.matmul_t(a, m1, false, true)?;
                (out, Some(m2), Some(vp))
            }
            _ => (g.matmul_t(vgh, m1, false, true)?, None, None),
        };
        let merged = g.reshape(out, &shape)?;
        if let Some(tr) = trace {
            tr.sites.push(SiteTrace {
                site: self.name.clone(),
                m1: g.value(m1).clone(),
                m2: m2.map(|m| g.value(m).clone()),
                pre_projection: g.value(merged).clone(),
                v_person: vp.map(|v| g.value(v).clone()),
                v_garment: g.value(vg).clone(),
            });
        }
        let attn = self.proj.forward(g, p, merged)?;
        let h = g.add(person, attn)?;

        let f = self.ff_norm.forward(g, p, h)?;
        let f = self.ff1.forward(g, p, f)?;
        let f = g.silu(f);
        let f = self.ff2.forward(g, p, f)?;
        Ok(g.add(h, f)?)
    }

    pub fn kind(&self) -> AttentionKind {
        self.kind
    }
}

/// Whether every last-axis slice of `m` sums to 1 within `tol`.
pub fn rows_stochastic(m: &Tensor, tol: f64) -> bool {
    let l = *m.shape().last().expect("rank >= 1");
    m.data().chunks(l).all(|r| (r.iter().sum::<f64>() - 1.0).abs() <= tol)
}
