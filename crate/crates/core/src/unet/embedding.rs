use crate::error::{Error, Result};

/// Sinusoidal embedding of `t`: `dim / 2` sines followed by `dim / 2`
/// cosines at frequencies spaced geometrically from 1 down to 1/10000.
pub fn timestep_embedding(t: f64, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(Error::Config(format!("timestep embedding dim must be even and nonzero, got {dim}")));
    }
    let half = dim / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|i| {
            if half == 1 {
                1.0
            } else {
                (-(10000f64.ln()) * i as f64 / (half - 1) as f64).exp()
            }
        })
        .collect();
    let mut out = Vec::with_capacity(dim);
    out.extend(freqs.iter().map(|f| (t * f).sin()));
    out.extend(freqs.iter().map(|f| (t * f).cos()));
    Ok(out)
}
