//! Pixel corruptions used as pretext tasks: the single-step logistic map and
//! the masking and Gaussian-noise baselines.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageBatch;

pub const DEFAULT_R: f64 = 3.99;

/// Logistic-map parameter `r`, restricted to `(0, 4]` so that the map sends
/// `[0, 1]` into `[0, r / 4]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawChaos", into = "RawChaos")]
pub struct ChaosParams {
    r: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawChaos {
    r: f64,
}

impl TryFrom<RawChaos> for ChaosParams {
    type Error = Error;
    fn try_from(raw: RawChaos) -> Result<Self> {
        ChaosParams::new(raw.r)
    }
}

impl From<ChaosParams> for RawChaos {
    fn from(p: ChaosParams) -> Self {
        RawChaos { r: p.r }
    }
}

impl Default for ChaosParams {
    fn default() -> Self {
        ChaosParams { r: DEFAULT_R }
    }
}

impl ChaosParams {
    pub fn new(r: f64) -> Result<Self> {
        if !(r > 0.0 && r <= 4.0) {
            return Err(Error::invalid(format!(
                "logistic map r = {r} is outside (0, 4]"
            )));
        }
        Ok(ChaosParams { r })
    }

    pub fn r(&self) -> f64 {
        self.r
    }

    /// `r x (1 - x)`.
    #[inline]
    pub fn map(&self, x: f64) -> f64 {
        self.r * x * (1.0 - x)
    }

    /// Largest value the map attains on `[0, 1]`.
    pub fn max_value(&self) -> f64 {
        self.r / 4.0
    }
}

/// One application of the logistic map to every channel of every pixel.
///
/// Never iterates the map: calling it twice is an explicit composition.
pub fn logistic_map(x: &ImageBatch, params: &ChaosParams) -> Result<ImageBatch> {
    if let Some((index, &value)) = x
        .data()
        .iter()
        .enumerate()
        .find(|(_, v)| !(0.0..=1.0).contains(*v))
    {
        return Err(Error::PixelOutOfRange { index, value });
    }
    let mut out = x.clone();
    out.data_mut().iter_mut().for_each(|v| *v = params.map(*v));
    Ok(out)
}

/// True iff every value lies in `[0, 1]`. Vacuously true when empty.
pub fn range_check(x: &ImageBatch) -> bool {
    x.data().iter().all(|v| (0.0..=1.0).contains(v))
}

/// Two distinct pre-images with a common image under the map.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CollisionPair {
    pub a: f64,
    pub b: f64,
    pub image: f64,
}

/// The pair `(v, 1 - v)`, or `None` when the two coincide (`v = 0.5`) or
/// `v` lies outside `[0, 1]`.
pub fn collision_pair(params: &ChaosParams, v: f64) -> Option<CollisionPair> {
    if !(0.0..=1.0).contains(&v) {
        return None;
    }
    let b = 1.0 - v;
    if b == v {
        return None;
    }
    Some(CollisionPair {
        a: v,
        b,
        image: params.map(v),
    })
}

/// Up to `samples` collision pairs for uniformly drawn `v`.
pub fn collision_pairs(params: &ChaosParams, samples: usize, seed: u64) -> Vec<CollisionPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..samples)
        .filter_map(|_| collision_pair(params, rng.random::<f64>()))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorruptionKind {
    Chaotic,
    Mask,
    Gaussian,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 3] = [
        CorruptionKind::Chaotic,
        CorruptionKind::Mask,
        CorruptionKind::Gaussian,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            CorruptionKind::Chaotic => "chaotic",
            CorruptionKind::Mask => "mask",
            CorruptionKind::Gaussian => "gaussian",
        }
    }
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CorruptionKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "chaotic" => Ok(CorruptionKind::Chaotic),
            "mask" => Ok(CorruptionKind::Mask),
            "gaussian" => Ok(CorruptionKind::Gaussian),
            other => Err(Error::invalid(format!(
                "unknown corruption `{other}` (expected chaotic, mask or gaussian)"
            ))),
        }
    }
}

/// Parameters of the masking and Gaussian baselines.
///
/// `seed` is the base seed from which per-batch seeds are derived during
/// pretraining.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineCorruptionParams {
    pub mask_ratio: f64,
    pub patch_size: usize,
    pub sigma: f64,
    /// Salt combined with the per-call seed, selecting an independent noise stream.
    pub seed: u64,
}

impl Default for BaselineCorruptionParams {
    fn default() -> Self {
        BaselineCorruptionParams {
            mask_ratio: 0.5,
            patch_size: 4,
            sigma: 0.1,
            seed: 0,
        }
    }
}

impl BaselineCorruptionParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.mask_ratio) {
            return Err(Error::invalid(format!(
                "mask_ratio {} is outside [0, 1]",
                self.mask_ratio
            )));
        }
        if self.patch_size == 0 {
            return Err(Error::invalid("patch_size must be positive"));
        }
        if !(self.sigma >= 0.0) || !self.sigma.is_finite() {
            return Err(Error::invalid(format!("sigma {} must be >= 0", self.sigma)));
        }
        Ok(())
    }
}

/// Zeroes a seeded random subset of square patches in every image.
///
/// The number of patches per image is `round(mask_ratio * patches)`; the
/// same spatial patch is cleared across all channels.
pub fn mask_corrupt(
    x: &ImageBatch,
    params: &BaselineCorruptionParams,
    rng_seed: u64,
) -> Result<ImageBatch> {
    params.validate()?;
    let dims = x.dims();
    let ps = params.patch_size;
    if dims.height % ps != 0 || dims.width % ps != 0 {
        return Err(Error::invalid(format!(
            "patch size {ps} does not divide image {}x{}",
            dims.height, dims.width
        )));
    }
    let (py, px) = (dims.height / ps, dims.width / ps);
    let patches = py * px;
    let masked = (params.mask_ratio * patches as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(crate::seed::derive(params.seed, rng_seed));
    let mut out = x.clone();
    let mut order: Vec<usize> = (0..patches).collect();
    for i in 0..x.len() {
        order.shuffle(&mut rng);
        let img = out.image_mut(i);
        for &p in &order[..masked] {
            let (oy, ox) = ((p / px) * ps, (p % px) * ps);
            for c in 0..dims.channels {
                for y in oy..oy + ps {
                    let row = (c * dims.height + y) * dims.width;
                    img[row + ox..row + ox + ps].fill(0.0);
                }
            }
        }
    }
    Ok(out)
}

/// `clamp(x + eps, 0, 1)` with `eps ~ N(0, sigma^2)` drawn from a seeded stream.
pub fn gaussian_corrupt(
    x: &ImageBatch,
    params: &BaselineCorruptionParams,
    rng_seed: u64,
) -> Result<ImageBatch> {
    params.validate()?;
    let mut out = x.clone();
    if params.sigma == 0.0 {
        return Ok(out);
    }
    let normal = Normal::new(0.0, params.sigma).map_err(|e| Error::invalid(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(crate::seed::derive(params.seed, rng_seed));
    for v in out.data_mut() {
        *v = (*v + normal.sample(&mut rng)).clamp(0.0, 1.0);
    }
    Ok(out)
}

/// A corruption applied batch-by-batch during pretraining.
pub trait Corrupt {
    fn kind(&self) -> CorruptionKind;
    fn corrupt(&self, x: &ImageBatch, batch_seed: u64) -> Result<ImageBatch>;
}

/// Selected corruption together with its parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Corruption {
    Chaotic(ChaosParams),
    Mask(BaselineCorruptionParams),
    Gaussian(BaselineCorruptionParams),
}

impl Default for Corruption {
    fn default() -> Self {
        Corruption::Chaotic(ChaosParams::default())
    }
}

impl Corruption {
    pub fn from_parts(
        kind: CorruptionKind,
        chaos: ChaosParams,
        baseline: BaselineCorruptionParams,
    ) -> Self {
        match kind {
            CorruptionKind::Chaotic => Corruption::Chaotic(chaos),
            CorruptionKind::Mask => Corruption::Mask(baseline),
            CorruptionKind::Gaussian => Corruption::Gaussian(baseline),
        }
    }
}

impl Corrupt for Corruption {
    fn kind(&self) -> CorruptionKind {
        match self {
            Corruption::Chaotic(_) => CorruptionKind::Chaotic,
            Corruption::Mask(_) => CorruptionKind::Mask,
            Corruption::Gaussian(_) => CorruptionKind::Gaussian,
        }
    }

    /// The chaotic map ignores `batch_seed`.
    fn corrupt(&self, x: &ImageBatch, batch_seed: u64) -> Result<ImageBatch> {
        match self {
            Corruption::Chaotic(p) => logistic_map(x, p),
            Corruption::Mask(p) => mask_corrupt(x, p, batch_seed),
            Corruption::Gaussian(p) => gaussian_corrupt(x, p, batch_seed),
        }
    }
}
