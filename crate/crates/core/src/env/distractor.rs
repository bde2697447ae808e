//! Task-irrelevant processes `q(x' | x)` and their rendered features.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Number of fixed patterns per environment.
pub const N_PATTERNS: usize = 8;
/// Probability of keeping the current pattern for one more step.
pub const PATTERN_STAY: f64 = 0.7;
/// Drift noise standard deviation as a multiple of the half-width.
pub const DRIFT_SCALE: f64 = 0.03;

#[derive(Clone, Debug, PartialEq)]
pub enum DistractorProcess {
    /// Per-channel colors starting uniformly in `base ± beta` and drifting by
    /// Gaussian steps clipped to the previous value `± beta`.
    Color { base: Vec<f64>, beta: f64 },
    /// Markov chain over fixed random patterns; stays with probability
    /// [`PATTERN_STAY`], otherwise jumps uniformly to another pattern.
    Pattern { patterns: Vec<Vec<f64>> },
}

impl DistractorProcess {
    pub fn random_patterns(len: usize, rng: &mut ChaCha8Rng) -> Self {
        let patterns = (0..N_PATTERNS)
            .map(|_| (0..len).map(|_| rng.random::<f64>()).collect())
            .collect();
        Self::Pattern { patterns }
    }

    /// Initial distractor coordinates.
    pub fn init(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        match self {
            Self::Color { base, beta } => base
                .iter()
                .map(|&b| {
                    let x = if *beta > 0.0 {
                        rng.random_range(b - beta..b + beta)
                    } else {
                        b
                    };
                    x.clamp(0.0, 1.0)
                })
                .collect(),
            Self::Pattern { patterns } => vec![rng.random_range(0..patterns.len()) as f64],
        }
    }

    pub fn step(&self, x: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
        match self {
            Self::Color { beta, .. } => x
                .iter()
                .map(|&c| {
                    let noise: f64 = rng.sample(StandardNormal);
                    let proposal = c + DRIFT_SCALE * beta * noise;
                    proposal.clamp(c - beta, c + beta).clamp(0.0, 1.0)
                })
                .collect(),
            Self::Pattern { patterns } => {
                let k = x[0] as usize;
                if rng.random_bool(PATTERN_STAY) {
                    vec![k as f64]
                } else {
                    let mut j = rng.random_range(0..patterns.len() - 1);
                    if j >= k {
                        j += 1;
                    }
                    vec![j as f64]
                }
            }
        }
    }

    /// Checks that `x` is a valid state of this process.
    pub fn check(&self, x: &[f64]) -> Result<()> {
        match self {
            Self::Color { base, .. } => {
                if x.len() != base.len() || x.iter().any(|c| !(0.0..=1.0).contains(c)) {
                    return Err(Error::Invalid(format!(
                        "color state {x:?} outside [0,1]^{}",
                        base.len()
                    )));
                }
            }
            Self::Pattern { patterns } => {
                if x.len() != 1 || x[0].fract() != 0.0 || x[0] < 0.0 || x[0] as usize >= patterns.len() {
                    return Err(Error::Invalid(format!("pattern state {x:?} is not a pattern index")));
                }
            }
        }
        Ok(())
    }

    /// Color values or the selected pattern.
    pub fn features(&self, x: &[f64]) -> Vec<f64> {
        match self {
            Self::Color { .. } => x.to_vec(),
            Self::Pattern { patterns } => patterns[x[0] as usize].clone(),
        }
    }

    /// Inverse of [`DistractorProcess::features`].
    pub fn decode(&self, f: &[f64]) -> Result<Vec<f64>> {
        match self {
            Self::Color { .. } => {
                self.check(f).map_err(|e| Error::Decode(e.to_string()))?;
                Ok(f.to_vec())
            }
            Self::Pattern { patterns } => patterns
                .iter()
                .position(|p| p.as_slice() == f)
                .map(|k| vec![k as f64])
                .ok_or_else(|| Error::Decode("distractor region matches no pattern".into())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn zero_width_color_never_moves() {
        let p = DistractorProcess::Color {
            base: vec![0.4, 0.6],
            beta: 0.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut x = p.init(&mut rng);
        assert_eq!(x, vec![0.4, 0.6]);
        for _ in 0..100 {
            let y = p.step(&x, &mut rng);
            assert_eq!(y, x);
            x = y;
        }
    }

    #[test]
    fn color_drift_respects_clip_window() {
        let p = DistractorProcess::Color {
            base: vec![0.5; 3],
            beta: 0.5,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut x = p.init(&mut rng);
        for _ in 0..1000 {
            let y = p.step(&x, &mut rng);
            for (a, b) in x.iter().zip(&y) {
                assert!((b - a).abs() <= 0.5 && (0.0..=1.0).contains(b));
            }
            x = y;
        }
    }

    #[test]
    fn pattern_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = DistractorProcess::random_patterns(10, &mut rng);
        for k in 0..N_PATTERNS {
            let f = p.features(&[k as f64]);
            assert_eq!(p.decode(&f).unwrap(), vec![k as f64]);
        }
        assert!(p.decode(&[0.0; 10]).is_err());
    }
}
