//! Zero-mean Gaussian initialization with std `sqrt(2/n)`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    /// Gaussian with std `sqrt(2/n)` on every layer, the first included.
    #[default]
    KaimingWa,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InitConfig {
    #[serde(default)]
    pub scheme: InitScheme,
    pub seed: u64,
}

/// Deterministic generator for one independent stream of a run.
///
/// ChaCha streams are addressed by `(seed, stream)`, so a layer's weights do
/// not depend on how many values other layers drew before it.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// `sqrt(2/n)`.
pub fn kaiming_std(n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::Config("fan-in n must be >= 1".into()));
    }
    Ok((2.0 / n as f64).sqrt())
}

/// I.i.d. draws from `N(0, 2/n)` in the given shape.
pub fn kaiming_init(shape: &[usize], n: usize, rng: &mut impl Rng) -> Result<Tensor> {
    let std = kaiming_std(n)?;
    Ok(Tensor::from_fn(shape, |_| {
        let z: f64 = rng.sample(StandardNormal);
        std * z
    }))
}
