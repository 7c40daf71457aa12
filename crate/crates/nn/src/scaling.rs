//! Compound depth/width/resolution scaling.

use serde::{Deserialize, Serialize};

/// `depth = alpha^phi`, `width = beta^phi`, `resolution = gamma_r^phi`,
/// with `alpha * beta^2 * gamma_r^2` close to 2 so cost roughly doubles per
/// unit of `phi`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalingCoefficients {
    pub phi: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma_r: f64,
}

/// Accepted relative deviation of the cost product from 2.
pub const CONSTRAINT_TOLERANCE: f64 = 0.05;

impl Default for ScalingCoefficients {
    fn default() -> Self {
        Self { phi: 1.0, alpha: 1.2, beta: 1.1, gamma_r: 1.15 }
    }
}

impl ScalingCoefficients {
    pub fn constraint_product(&self) -> f64 {
        self.alpha * self.beta * self.beta * self.gamma_r * self.gamma_r
    }

    pub fn satisfies_constraint(&self) -> bool {
        self.alpha >= 1.0
            && self.beta >= 1.0
            && self.gamma_r >= 1.0
            && ((self.constraint_product() - 2.0) / 2.0).abs() <= CONSTRAINT_TOLERANCE
    }

    /// `(depth, width, resolution)` multipliers.
    pub fn multipliers(&self) -> (f64, f64, f64) {
        (self.alpha.powf(self.phi), self.beta.powf(self.phi), self.gamma_r.powf(self.phi))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    pub repeats: usize,
    pub channels: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScaledConfig {
    pub stages: Vec<StageSpec>,
    pub resolution: usize,
}

/// Rounds channels to a multiple of 8 without dropping more than 10%.
pub fn round_channels(c: f64) -> usize {
    let divisor = 8.0;
    let mut r = ((c + divisor / 2.0) / divisor).floor() * divisor;
    r = r.max(divisor);
    if r < 0.9 * c {
        r += divisor;
    }
    r as usize
}

fn round_even(v: f64) -> usize {
    let r = (v / 2.0).round() * 2.0;
    r.max(2.0) as usize
}

/// Scales repeats (ceil), channels (multiple of 8) and input resolution (even).
/// A unit multiplier leaves the corresponding base value untouched.
pub fn compound_scale(c: &ScalingCoefficients, base: &[StageSpec], base_res: usize) -> ScaledConfig {
    let (d, w, r) = c.multipliers();
    let stages = base
        .iter()
        .map(|s| StageSpec {
            repeats: if d == 1.0 { s.repeats } else { (s.repeats as f64 * d).ceil() as usize },
            channels: if w == 1.0 { s.channels } else { round_channels(s.channels as f64 * w) },
        })
        .collect();
    let resolution = if r == 1.0 { base_res } else { round_even(base_res as f64 * r) };
    ScaledConfig { stages, resolution }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn phi_zero_is_identity() {
        let base = [StageSpec { repeats: 1, channels: 16 }, StageSpec { repeats: 2, channels: 24 }];
        let c = ScalingCoefficients { phi: 0.0, ..Default::default() };
        let s = compound_scale(&c, &base, 224);
        assert_eq!(s.stages, base.to_vec());
        assert_eq!(s.resolution, 224);
    }

    #[test]
    fn phi_one_scales_b0_stage() {
        let c = ScalingCoefficients::default();
        let s = compound_scale(&c, &[StageSpec { repeats: 2, channels: 24 }], 224);
        // 2 * 1.2 = 2.4 -> 3; 24 * 1.1 = 26.4 -> 24 (within 10%); 224 * 1.15 = 257.6 -> 258
        assert_eq!(s.stages[0], StageSpec { repeats: 3, channels: 24 });
        assert_eq!(s.resolution, 258);
    }

    #[test]
    fn rounding_never_loses_more_than_ten_percent() {
        for c in 1..400 {
            let r = round_channels(c as f64);
            assert_eq!(r % 8, 0);
            assert!(r as f64 >= 0.9 * c as f64);
        }
    }
}
