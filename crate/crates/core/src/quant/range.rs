//! Range estimators for quantizer calibration.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{spec_from_range, QuantizerSpec};
use crate::error::{Error, Result};

/// EMA momentum used to combine per-batch percentiles.
pub const PERCENTILE_MOMENTUM: f64 = 0.9;

/// Smallest shrinkage factor tried by the MSE search.
pub const MSE_MIN_FACTOR: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum RangeEstimator {
    MinMax,
    RunningMinMax { momentum: f64, n_batches: usize },
    Mse { grid_size: usize },
    Percentile { p: f64 },
}

impl RangeEstimator {
    pub const RUNNING_DEFAULT: RangeEstimator = RangeEstimator::RunningMinMax { momentum: 0.9, n_batches: 16 };
    pub const MSE_DEFAULT: RangeEstimator = RangeEstimator::Mse { grid_size: 100 };

    pub fn validate(&self) -> Result<()> {
        match *self {
            RangeEstimator::MinMax => Ok(()),
            RangeEstimator::RunningMinMax { momentum, n_batches } => {
                if !(momentum > 0.0 && momentum < 1.0) {
                    return Err(Error::config("estimator.momentum", "must lie in (0, 1)"));
                }
                if n_batches == 0 {
                    return Err(Error::config("estimator.n_batches", "must be >= 1"));
                }
                Ok(())
            }
            RangeEstimator::Mse { grid_size } if grid_size < 2 => {
                Err(Error::config("estimator.grid_size", "must be >= 2"))
            }
            RangeEstimator::Mse { .. } => Ok(()),
            RangeEstimator::Percentile { p } if !(p > 0.5 && p <= 1.0) => {
                Err(Error::config("estimator.p", "must lie in (0.5, 1]"))
            }
            RangeEstimator::Percentile { .. } => Ok(()),
        }
    }

    /// Number of batches consumed from a calibration stream, if bounded.
    pub fn batch_limit(&self) -> Option<usize> {
        match *self {
            RangeEstimator::RunningMinMax { n_batches, .. } => Some(n_batches),
            _ => None,
        }
    }

    pub fn observer(&self, bits: u32, symmetric: bool) -> Result<RangeObserver> {
        self.validate()?;
        Ok(RangeObserver {
            estimator: *self,
            bits,
            symmetric,
            batches: 0,
            lo: f64::INFINITY,
            hi: f64::NEG_INFINITY,
            sse: Vec::new(),
        })
    }
}

impl fmt::Display for RangeEstimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            RangeEstimator::MinMax => f.write_str("minmax"),
            RangeEstimator::RunningMinMax { momentum, n_batches } => write!(f, "running_minmax:{momentum}:{n_batches}"),
            RangeEstimator::Mse { grid_size } => write!(f, "mse:{grid_size}"),
            RangeEstimator::Percentile { p } => write!(f, "percentile:{p}"),
        }
    }
}

/// Accepts `minmax`, `running_minmax[:momentum[:n_batches]]`,
/// `mse[:grid_size]` and `percentile:p`.
impl FromStr for RangeEstimator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut parts = s.split(':');
        let head = parts.next().unwrap_or_default();
        let args: Vec<&str> = parts.collect();
        let bad = |why: &str| Error::config("estimator", format!("cannot parse {s:?}: {why}"));
        let num = |a: &str| a.parse::<f64>().map_err(|_| bad("expected a number"));
        let int = |a: &str| a.parse::<usize>().map_err(|_| bad("expected an integer"));
        let est = match (head, args.as_slice()) {
            ("minmax", []) => RangeEstimator::MinMax,
            ("running_minmax", []) => RangeEstimator::RUNNING_DEFAULT,
            ("running_minmax", [m]) => RangeEstimator::RunningMinMax { momentum: num(m)?, n_batches: 16 },
            ("running_minmax", [m, n]) => RangeEstimator::RunningMinMax { momentum: num(m)?, n_batches: int(n)? },
            ("mse", []) => RangeEstimator::MSE_DEFAULT,
            ("mse", [g]) => RangeEstimator::Mse { grid_size: int(g)? },
            ("percentile", [p]) => RangeEstimator::Percentile { p: num(p)? },
            _ => return Err(bad("unknown estimator or wrong number of arguments")),
        };
        est.validate()?;
        Ok(est)
    }
}

impl TryFrom<String> for RangeEstimator {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<RangeEstimator> for String {
    fn from(e: RangeEstimator) -> String {
        e.to_string()
    }
}

/// Linear-interpolation quantile of unsorted data (`q ∈ [0, 1]`).
fn quantile(data: &mut [f64], q: f64) -> f64 {
    let pos = q * (data.len() - 1) as f64;
    let k = pos.floor() as usize;
    let frac = pos - k as f64;
    let (_, &mut lo, upper) = data.select_nth_unstable_by(k, f64::total_cmp);
    if frac == 0.0 || upper.is_empty() {
        return lo;
    }
    let hi = upper.iter().copied().fold(f64::INFINITY, f64::min);
    lo + frac * (hi - lo)
}

/// Streaming state of one estimator. Feed batches with [`observe`] for
/// each of [`passes`] passes over the same stream, then call [`finish`].
///
/// [`observe`]: RangeObserver::observe
/// [`passes`]: RangeObserver::passes
/// [`finish`]: RangeObserver::finish
#[derive(Clone, Debug)]
pub struct RangeObserver {
    estimator: RangeEstimator,
    bits: u32,
    symmetric: bool,
    batches: usize,
    lo: f64,
    hi: f64,
    /// MSE only: SSE per candidate, filled during the second pass.
    sse: Vec<f64>,
}

impl RangeObserver {
    /// MSE needs the global min-max before it can score candidates.
    pub fn passes(&self) -> usize {
        match self.estimator {
            RangeEstimator::Mse { .. } => 2,
            _ => 1,
        }
    }

    pub fn observe(&mut self, pass: usize, batch: &[f64]) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::Contract("empty calibration batch".into()));
        }
        if batch.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite value in calibration batch".into()));
        }
        if pass == 1 {
            if let RangeEstimator::Mse { grid_size } = self.estimator {
                if self.sse.is_empty() {
                    self.sse = vec![0.0; grid_size];
                }
                for (i, acc) in self.sse.iter_mut().enumerate() {
                    let (lo, hi) = mse_candidate(self.lo, self.hi, i, grid_size);
                    *acc += spec_from_range(lo, hi, self.bits, self.symmetric)?.sse(batch);
                }
            }
            return Ok(());
        }
        if let Some(limit) = self.estimator.batch_limit() {
            if self.batches >= limit {
                return Ok(());
            }
        }
        let (b_lo, b_hi) = match self.estimator {
            RangeEstimator::Percentile { p } => {
                let mut v = batch.to_vec();
                let hi = quantile(&mut v, p);
                (quantile(&mut v, 1.0 - p), hi)
            }
            _ => batch.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x))),
        };
        let momentum = match self.estimator {
            RangeEstimator::RunningMinMax { momentum, .. } => Some(momentum),
            RangeEstimator::Percentile { .. } => Some(PERCENTILE_MOMENTUM),
            _ => None,
        };
        if self.batches == 0 {
            (self.lo, self.hi) = (b_lo, b_hi);
        } else if let Some(m) = momentum {
            self.lo = m * self.lo + (1.0 - m) * b_lo;
            self.hi = m * self.hi + (1.0 - m) * b_hi;
        } else {
            self.lo = self.lo.min(b_lo);
            self.hi = self.hi.max(b_hi);
        }
        self.batches += 1;
        Ok(())
    }

    pub fn finish(&self) -> Result<(f64, f64)> {
        if self.batches == 0 {
            return Err(Error::Contract("range estimation needs at least one batch".into()));
        }
        if let Some(limit) = self.estimator.batch_limit() {
            if self.batches < limit {
                return Err(Error::Contract(format!(
                    "{} consumes {limit} calibration batches but only {} were provided",
                    self.estimator, self.batches
                )));
            }
        }
        if let RangeEstimator::Mse { grid_size } = self.estimator {
            if self.sse.is_empty() {
                return Err(Error::Contract("MSE estimator finished before its second pass".into()));
            }
            // First minimum wins, so ties prefer the widest range.
            let best = (0..grid_size).fold(0, |b, i| if self.sse[i] < self.sse[b] { i } else { b });
            return Ok(mse_candidate(self.lo, self.hi, best, grid_size));
        }
        Ok((self.lo, self.hi))
    }

    pub fn spec(&self) -> Result<QuantizerSpec> {
        let (lo, hi) = self.finish()?;
        spec_from_range(lo, hi, self.bits, self.symmetric)
    }
}

/// Candidate `i` of the MSE search: the min-max range shrunk by a factor
/// falling linearly from 1 to [`MSE_MIN_FACTOR`].
fn mse_candidate(lo: f64, hi: f64, i: usize, grid_size: usize) -> (f64, f64) {
    let f = 1.0 - (1.0 - MSE_MIN_FACTOR) * i as f64 / (grid_size - 1) as f64;
    (f * lo, f * hi)
}

/// Runs `estimator` over an in-memory stream of batches.
///
/// `bits`/`symmetric` describe the target quantizer; only the MSE search
/// depends on them.
pub fn estimate_range(batches: &[&[f64]], estimator: RangeEstimator, bits: u32, symmetric: bool) -> Result<(f64, f64)> {
    if batches.is_empty() {
        return Err(Error::Contract("range estimation needs at least one batch".into()));
    }
    let mut obs = estimator.observer(bits, symmetric)?;
    for pass in 0..obs.passes() {
        for b in batches {
            obs.observe(pass, b)?;
        }
    }
    obs.finish()
}
