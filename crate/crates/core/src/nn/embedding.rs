use crate::error::{Error, Result};

const MAX_PERIOD: f64 = 10_000.0;

/// Sinusoidal embedding of an integer time index: `dim/2` sines followed by
/// `dim/2` cosines at geometrically spaced frequencies `MAX_PERIOD^(-i/half)`.
pub fn time_embedding(t: usize, dim: usize) -> Result<Vec<f64>> {
    let mut out = vec![0.0; dim];
    write_time_embedding(t, dim, &mut out)?;
    Ok(out)
}

pub(crate) fn write_time_embedding(t: usize, dim: usize, out: &mut [f64]) -> Result<()> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(Error::config(format!(
            "time embedding dimension must be even and positive, got {dim}"
        )));
    }
    let half = dim / 2;
    let t = t as f64;
    for i in 0..half {
        let freq = (-(MAX_PERIOD.ln()) * i as f64 / half as f64).exp();
        let (s, c) = (t * freq).sin_cos();
        out[i] = s;
        out[half + i] = c;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn origin_is_sin_zero_cos_one() {
        let e = time_embedding(0, 16).unwrap();
        assert!(e[..8].iter().all(|&v| v == 0.0));
        assert!(e[8..].iter().all(|&v| v == 1.0));
    }

    #[test]
    fn odd_dimension_rejected() {
        assert!(matches!(time_embedding(3, 7), Err(Error::Config(_))));
    }

    #[test]
    fn injective_over_default_grid() {
        let embs: Vec<Vec<f64>> = (0..1000).map(|t| time_embedding(t, 32).unwrap()).collect();
        let mut min_dist = f64::INFINITY;
        for i in 0..embs.len() {
            for j in (i + 1)..embs.len() {
                let d: f64 = embs[i].iter().zip(&embs[j]).map(|(a, b)| (a - b).powi(2)).sum();
                min_dist = min_dist.min(d);
            }
        }
        assert!(min_dist > 1e-6, "closest pair squared distance {min_dist}");
    }

    #[test]
    fn deterministic() {
        assert_eq!(time_embedding(417, 32).unwrap(), time_embedding(417, 32).unwrap());
    }
}
