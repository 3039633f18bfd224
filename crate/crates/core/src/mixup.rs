//! Mixed batches: each row is a convex combination of a test sample and a
//! randomly drawn training partner.
//!
//! Ratios are stored as the weight on the *test* sample, so a spec of
//! `U[0.7, 1]` keeps at least 70% of the test image in every row. The
//! expansion variable used by the analysis code (weight on the training
//! partner) is `1 − ratio`.

use std::sync::Arc;

use rand::Rng;

use crate::data::{sample_partners, Dataset};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    /// One ratio per optimization step, shared by every row.
    PerStep,
    /// An independent ratio for every row.
    #[default]
    PerPair,
}

impl std::str::FromStr for Granularity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per_step" => Ok(Granularity::PerStep),
            "per_pair" => Ok(Granularity::PerPair),
            other => Err(Error::config(format!(
                "unknown ratio granularity {other:?}"
            ))),
        }
    }
}

/// Uniform distribution of the weight on the test sample.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MixupRatioSpec {
    pub low: f64,
    pub high: f64,
    pub granularity: Granularity,
}

impl MixupRatioSpec {
    pub fn new(low: f64, high: f64) -> Result<Self> {
        let spec = MixupRatioSpec {
            low,
            high,
            granularity: Granularity::default(),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_granularity(mut self, granularity: Granularity) -> Self {
        self.granularity = granularity;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.low && self.low <= self.high && self.high <= 1.0) {
            return Err(Error::config(format!(
                "mixup ratio bounds must satisfy 0 <= low <= high <= 1, got [{}, {}]",
                self.low, self.high
            )));
        }
        Ok(())
    }

    /// True when every draw is exactly 1, i.e. mixing is a no-op.
    pub fn is_identity(&self) -> bool {
        self.low == 1.0 && self.high == 1.0
    }
}

pub fn sample_ratio(spec: &MixupRatioSpec, rng: &mut impl Rng) -> f64 {
    if spec.low == spec.high {
        return spec.low;
    }
    let u: f64 = rng.random();
    (spec.low + (spec.high - spec.low) * u).min(spec.high)
}

fn mix_value(t: f64, s: f64, ratio: f64) -> f64 {
    if t == s {
        return t;
    }
    let v = ratio * t + (1.0 - ratio) * s;
    v.clamp(t.min(s), t.max(s))
}

/// `ratio·x_test + (1 − ratio)·x_train`, elementwise.
pub fn mix_pair(x_test: &[f64], x_train: &[f64], ratio_on_test: f64) -> Result<Vec<f64>> {
    if x_test.len() != x_train.len() {
        return Err(Error::input(format!(
            "cannot mix images of {} and {} values",
            x_test.len(),
            x_train.len()
        )));
    }
    Ok(x_test
        .iter()
        .zip(x_train)
        .map(|(&t, &s)| mix_value(t, s, ratio_on_test))
        .collect())
}

/// Source of training partners.
#[derive(Clone, Debug)]
pub struct TrainPartnerPool {
    data: Arc<Dataset>,
}

impl TrainPartnerPool {
    pub fn new(data: Arc<Dataset>) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::input("training partner pool is empty"));
        }
        Ok(TrainPartnerPool { data })
    }

    pub fn dataset(&self) -> &Dataset {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.len() == 0
    }

    /// Partner indices for one step; distinct whenever `b <= len`.
    pub fn draw(&self, rng: &mut impl Rng, b: usize) -> Vec<usize> {
        let n = self.len();
        let mut out = Vec::with_capacity(b);
        while out.len() < b {
            let take = (b - out.len()).min(n);
            out.extend(sample_partners(&self.data, rng, take).expect("take <= n").1);
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixedBatch {
    /// `[B, C, H, W]`
    pub inputs: Tensor,
    pub partner_ids: Vec<usize>,
    /// Weight on the test sample, per row.
    pub ratios: Vec<f64>,
    /// Which test sample each row derives from.
    pub test_ids: Vec<usize>,
}

/// Mixes `test_samples` (cycled over rows) with `b` freshly drawn partners.
pub fn build_mixed_batch(
    test_samples: &Tensor,
    pool: &TrainPartnerPool,
    spec: &MixupRatioSpec,
    b: usize,
    rng: &mut impl Rng,
) -> Result<MixedBatch> {
    spec.validate()?;
    if b == 0 {
        return Err(Error::input("mixed batch size must be at least 1"));
    }
    let t = test_samples.rows();
    if t == 0 {
        return Err(Error::input("no test samples to mix"));
    }
    if test_samples.row_len() != pool.dataset().images.row_len() {
        return Err(Error::input(
            "test samples and training images differ in shape",
        ));
    }
    let partner_ids = pool.draw(rng, b);
    let ratios: Vec<f64> = match spec.granularity {
        Granularity::PerStep => vec![sample_ratio(spec, rng); b],
        Granularity::PerPair => (0..b).map(|_| sample_ratio(spec, rng)).collect(),
    };
    let test_ids: Vec<usize> = (0..b).map(|r| r % t).collect();
    let mut data = Vec::with_capacity(b * test_samples.row_len());
    for r in 0..b {
        data.extend(mix_pair(
            test_samples.row(test_ids[r]),
            pool.dataset().images.row(partner_ids[r]),
            ratios[r],
        )?);
    }
    let mut shape = test_samples.shape().to_vec();
    shape[0] = b;
    Ok(MixedBatch {
        inputs: Tensor::new(shape, data)?,
        partner_ids,
        ratios,
        test_ids,
    })
}

/// The unmixed counterpart of [`build_mixed_batch`]: test samples cycled over `b` rows.
pub fn replicate_test_batch(test_samples: &Tensor, b: usize) -> Tensor {
    let idx: Vec<usize> = (0..b).map(|r| r % test_samples.rows()).collect();
    test_samples.select_rows(&idx)
}
