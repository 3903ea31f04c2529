use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

/// Seeded counter-based generator.
///
/// Backed by ChaCha8, whose position in the keystream is a plain counter,
/// so the full state is `(seed, stream, word_pos)` and can be saved and
/// restored exactly.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
    /// Keystream position in 32-bit words. Stored as a string-free pair so
    /// it survives JSON.
    pub word_pos_hi: u64,
    pub word_pos_lo: u64,
}

/// Distributions the sampler understands.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseDist {
    Uniform { lo: f64, hi: f64 },
    Gaussian,
}

impl NoiseDist {
    pub const U05: NoiseDist = NoiseDist::Uniform { lo: -0.5, hi: 0.5 };
    pub const U10: NoiseDist = NoiseDist::Uniform { lo: -1.0, hi: 1.0 };

    pub fn validate(&self) -> Result<()> {
        match *self {
            NoiseDist::Uniform { lo, hi } if !(lo < hi) => Err(Error::param(format!(
                "uniform bounds need lo < hi, got [{lo}, {hi}]"
            ))),
            _ => Ok(()),
        }
    }

    /// Short name used on the command line and in result tables.
    pub fn short_name(&self) -> String {
        match *self {
            NoiseDist::Gaussian => "gauss".into(),
            NoiseDist::Uniform { lo, hi } if lo == -0.5 && hi == 0.5 => "u05".into(),
            NoiseDist::Uniform { lo, hi } if lo == -1.0 && hi == 1.0 => "u10".into(),
            NoiseDist::Uniform { lo, hi } => format!("u[{lo},{hi}]"),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "u05" | "uniform05" => Ok(Self::U05),
            "u10" | "uniform10" => Ok(Self::U10),
            "gauss" | "gaussian" => Ok(NoiseDist::Gaussian),
            other => Err(Error::param(format!(
                "unknown noise distribution {other:?} (expected u05, u10 or gauss)"
            ))),
        }
    }
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    /// An independent generator for the same seed, e.g. one per epoch or per episode.
    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { seed, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn state(&self) -> RngState {
        let pos = self.inner.get_word_pos();
        RngState {
            seed: self.seed,
            stream: self.inner.get_stream(),
            word_pos_hi: (pos >> 64) as u64,
            word_pos_lo: pos as u64,
        }
    }

    pub fn from_state(state: RngState) -> Self {
        let mut rng = Self::with_stream(state.seed, state.stream);
        rng.inner
            .set_word_pos(((state.word_pos_hi as u128) << 64) | state.word_pos_lo as u128);
        rng
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.random()
    }

    /// Uniform on `[0, 1)`.
    pub fn uniform01(&mut self) -> f64 {
        self.inner.random()
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform01()
    }

    pub fn gaussian(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn draw(&mut self, dist: NoiseDist) -> f64 {
        match dist {
            NoiseDist::Uniform { lo, hi } => self.uniform(lo, hi),
            NoiseDist::Gaussian => self.gaussian(),
        }
    }

    /// I.i.d. draws arranged in `shape`.
    pub fn sample(&mut self, dist: NoiseDist, shape: &[usize]) -> Result<Tensor> {
        dist.validate()?;
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.draw(dist)).collect();
        Tensor::new(shape, data)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_mean_is_centered() {
        let mut rng = Rng::new(11);
        let t = rng.sample(NoiseDist::U05, &[100_000]).unwrap();
        let mean = t.data().iter().sum::<f64>() / t.numel() as f64;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!(t.data().iter().all(|&x| (-0.5..0.5).contains(&x)));
    }

    #[test]
    fn gaussian_variance_near_one() {
        let mut rng = Rng::new(12);
        let t = rng.sample(NoiseDist::Gaussian, &[100_000]).unwrap();
        let n = t.numel() as f64;
        let mean = t.data().iter().sum::<f64>() / n;
        let var = t.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!(var > 0.97 && var < 1.03, "var {var}");
    }

    #[test]
    fn same_seed_same_draws() {
        let a = Rng::new(5).sample(NoiseDist::Gaussian, &[64]).unwrap();
        let b = Rng::new(5).sample(NoiseDist::Gaussian, &[64]).unwrap();
        assert_eq!(a, b);
        let c = Rng::new(6).sample(NoiseDist::Gaussian, &[64]).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn inverted_bounds_rejected() {
        let mut rng = Rng::new(0);
        let bad = NoiseDist::Uniform { lo: 1.0, hi: 1.0 };
        assert!(matches!(rng.sample(bad, &[3]), Err(Error::Parameter(_))));
    }

    #[test]
    fn state_round_trip_resumes_stream() {
        let mut rng = Rng::with_stream(99, 3);
        for _ in 0..17 {
            rng.gaussian();
        }
        let saved = rng.state();
        let expect: Vec<f64> = (0..10).map(|_| rng.uniform01()).collect();
        let mut restored = Rng::from_state(saved);
        let got: Vec<f64> = (0..10).map(|_| restored.uniform01()).collect();
        assert_eq!(expect, got);
    }
}
