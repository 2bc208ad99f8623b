//! Simulated uniform quantization, range estimation and the PTQ harness.

mod ptq;
mod range;

pub use ptq::{
    bitwidth_sweep, calibrate_and_quantize, sweep_csv, QuantConfig, QuantizedModel, SpecTable, SweepRow,
};
pub use range::{estimate_range, RangeEstimator, RangeObserver, PERCENTILE_MOMENTUM};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Uniform quantizer `s·(clip(round(x/s) + z, qmin, qmax) − z)`.
///
/// Asymmetric grids use integers `[0, 2^b − 1]` with zero point `z`;
/// symmetric grids use the signed range `[−2^{b−1}, 2^{b−1} − 1]` with `z = 0`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantizerSpec {
    pub bits: u32,
    pub symmetric: bool,
    pub scale: f64,
    pub zero_point: i64,
}

pub const MIN_BITS: u32 = 2;
pub const MAX_BITS: u32 = 16;

pub fn check_bits(field: &str, bits: u32) -> Result<()> {
    if !(MIN_BITS..=MAX_BITS).contains(&bits) {
        return Err(Error::config(field, format!("bit-width {bits} outside [{MIN_BITS}, {MAX_BITS}]")));
    }
    Ok(())
}

impl QuantizerSpec {
    pub fn new(bits: u32, symmetric: bool, scale: f64, zero_point: i64) -> Result<Self> {
        let spec = QuantizerSpec { bits, symmetric, scale, zero_point };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        check_bits("quant.bits", self.bits)?;
        if !(self.scale > 0.0) || !self.scale.is_finite() {
            return Err(Error::config("quant.scale", format!("scale must be positive and finite, got {}", self.scale)));
        }
        if self.symmetric && self.zero_point != 0 {
            return Err(Error::config("quant.zero_point", "symmetric quantizers have zero point 0"));
        }
        if !self.symmetric && !(0..=self.levels_max()).contains(&self.zero_point) {
            return Err(Error::config("quant.zero_point", format!("{} outside [0, {}]", self.zero_point, self.levels_max())));
        }
        Ok(())
    }

    fn levels_max(&self) -> i64 {
        (1i64 << self.bits) - 1
    }

    /// Integer range `[qmin, qmax]` that `round(x/s) + z` is clipped to.
    pub fn int_range(&self) -> (i64, i64) {
        if self.symmetric {
            let half = 1i64 << (self.bits - 1);
            (-half, half - 1)
        } else {
            (0, self.levels_max())
        }
    }

    pub fn grid_min(&self) -> f64 {
        self.scale * (self.int_range().0 - self.zero_point) as f64
    }

    pub fn grid_max(&self) -> f64 {
        self.scale * (self.int_range().1 - self.zero_point) as f64
    }

    /// Integer code of `x` on the grid.
    pub fn code(&self, x: f64) -> i64 {
        let (lo, hi) = self.int_range();
        let q = (x / self.scale).round_ties_even() + self.zero_point as f64;
        // NaN maps to lo through the clamp below; callers reject NaN earlier.
        q.clamp(lo as f64, hi as f64) as i64
    }

    pub fn dequantize(&self, code: i64) -> f64 {
        self.scale * (code - self.zero_point) as f64
    }

    pub fn quantize_scalar(&self, x: f64) -> f64 {
        self.dequantize(self.code(x))
    }

    pub fn quantize(&self, x: &Tensor) -> Tensor {
        x.map(|v| self.quantize_scalar(v))
    }

    /// `Σ (x − q(x))²`.
    pub fn sse(&self, data: &[f64]) -> f64 {
        data.iter()
            .map(|&v| {
                let e = v - self.quantize_scalar(v);
                e * e
            })
            .sum()
    }
}

/// Quantizer whose grid spans `[min, max]`.
pub fn spec_from_range(min: f64, max: f64, bits: u32, symmetric: bool) -> Result<QuantizerSpec> {
    check_bits("quant.bits", bits)?;
    if !(min.is_finite() && max.is_finite()) || max < min {
        return Err(Error::Contract(format!("invalid range ({min}, {max})")));
    }
    let levels = ((1i64 << bits) - 1) as f64;
    if symmetric {
        let amax = min.abs().max(max.abs());
        let scale = if amax == 0.0 {
            1.0
        } else if min == max {
            // A constant sits on grid point ±1.
            amax
        } else {
            amax / ((1i64 << (bits - 1)) - 1) as f64
        };
        return QuantizerSpec::new(bits, true, scale, 0);
    }
    if min == max {
        // Centre the constant on the grid; non-zero constants become
        // exactly one step away from the zero point.
        let z = 1i64 << (bits - 1);
        let (scale, z) = if min == 0.0 { (1.0, z) } else { (min.abs(), z - min.signum() as i64) };
        return QuantizerSpec::new(bits, false, scale, z);
    }
    let scale = (max - min) / levels;
    let z = (-min / scale).round_ties_even().clamp(0.0, levels) as i64;
    QuantizerSpec::new(bits, false, scale, z)
}
