//! Seeding and sampling helpers. All randomness in the crate flows through
//! [`Rng64`], a ChaCha8 stream seeded from a `u64`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub type Rng64 = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng64 {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives an independent seed from a base seed and a list of string parts.
/// Stable across platforms and releases.
pub fn derive_seed(base: u64, parts: &[&str]) -> u64 {
    let mut h = Sha256::new();
    h.update(base.to_le_bytes());
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p.as_bytes());
    }
    let digest = h.finalize();
    let mut b = [0u8; 8];
    b.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(b)
}

/// Inverse-CDF sampler over a finite set of nonnegative weights.
///
/// Zero-weight entries are never drawn.
#[derive(Clone, Debug)]
pub struct Categorical {
    cumulative: Vec<f64>,
}

impl Categorical {
    pub fn new<T: Scalar>(weights: &[T]) -> Result<Self> {
        let mut acc = 0.0;
        let mut cumulative = Vec::with_capacity(weights.len());
        for (k, w) in weights.iter().enumerate() {
            let w = w.f64();
            if !(w >= 0.0) || !w.is_finite() {
                return Err(Error::Parameter(format!("weight {k} is {w}, expected finite and >= 0")));
            }
            acc += w;
            cumulative.push(acc);
        }
        if !(acc > 0.0) {
            return Err(Error::Parameter("all weights are zero".into()));
        }
        Ok(Self { cumulative })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let total = *self.cumulative.last().expect("nonempty");
        let u = rng.random::<f64>() * total;
        let k = self.cumulative.partition_point(|&c| c <= u);
        k.min(self.cumulative.len() - 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derived_seeds_differ_and_repeat() {
        let a = derive_seed(7, &["A", "B", "coupled"]);
        let b = derive_seed(7, &["B", "A", "coupled"]);
        assert_ne!(a, b);
        assert_eq!(a, derive_seed(7, &["A", "B", "coupled"]));
        assert_ne!(derive_seed(7, &["AB", ""]), derive_seed(7, &["A", "B"]));
    }

    #[test]
    fn categorical_skips_zero_weights() {
        let c = Categorical::new(&[0.0f64, 1.0, 0.0, 3.0, 0.0]).unwrap();
        let mut rng = seeded(3);
        let mut counts = [0usize; 5];
        for _ in 0..20_000 {
            counts[c.sample(&mut rng)] += 1;
        }
        assert_eq!(counts[0] + counts[2] + counts[4], 0);
        let frac = counts[3] as f64 / 20_000.0;
        assert!((frac - 0.75).abs() < 0.02, "{frac}");
    }

    #[test]
    fn categorical_rejects_bad_weights() {
        assert!(Categorical::new(&[0.0f64, 0.0]).is_err());
        assert!(Categorical::new(&[1.0f64, -1.0]).is_err());
        assert!(Categorical::new::<f64>(&[]).is_err());
    }
}
