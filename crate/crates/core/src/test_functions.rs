//! Test functions `f` fed to the evolution operator, with analytic jets.
//!
//! Coordinate-type functions act on the first coordinate; bumps are radial.

use crate::coefficient_model::Jet;
use crate::error::{Error, Result};
use crate::linalg;
use serde::{Deserialize, Serialize};
use std::f64::consts::{FRAC_1_SQRT_2, PI};

pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * FRAC_1_SQRT_2)
}

pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TestFunction {
    Constant { value: f64 },
    /// `x₁` (unbounded)
    Coordinate,
    /// `x₁²` (unbounded)
    Square,
    /// `clip · tanh(x₁ / clip)`, a smooth clip of the first coordinate
    ClippedCoordinate { clip: f64 },
    /// `½(1 + tanh((1 - |x|²) / width))`
    TanhBump { width: f64 },
    /// `exp(-|x|² / (2 width²))`
    GaussianBump { width: f64 },
    /// `Φ(x₁ / scale)`: the indicator of `{x₁ > 0}` mollified by a Gaussian
    MollifiedIndicator { scale: f64 },
    /// `tanh(slope · x₁)`
    TanhRamp { slope: f64 },
    Scaled { factor: f64, inner: Box<TestFunction> },
    Shifted { offset: f64, inner: Box<TestFunction> },
    /// `|inner|^exponent`; value only
    AbsPower { exponent: f64, inner: Box<TestFunction> },
}

impl TestFunction {
    /// Bounded battery: clipped coordinate, tanh bump, Gaussian bump, mollified indicator.
    pub fn battery() -> Vec<TestFunction> {
        vec![
            TestFunction::ClippedCoordinate { clip: 2.0 },
            TestFunction::TanhBump { width: 0.5 },
            TestFunction::GaussianBump { width: 1.0 },
            TestFunction::MollifiedIndicator { scale: 0.1 },
        ]
    }

    pub fn label(&self) -> String {
        match self {
            TestFunction::Constant { value } => format!("const({value})"),
            TestFunction::Coordinate => "x1".into(),
            TestFunction::Square => "x1^2".into(),
            TestFunction::ClippedCoordinate { clip } => format!("clipped-x1({clip})"),
            TestFunction::TanhBump { width } => format!("tanh-bump({width})"),
            TestFunction::GaussianBump { width } => format!("gauss-bump({width})"),
            TestFunction::MollifiedIndicator { scale } => format!("mollified-indicator({scale})"),
            TestFunction::TanhRamp { slope } => format!("tanh({slope}x1)"),
            TestFunction::Scaled { factor, inner } => format!("{factor}*{}", inner.label()),
            TestFunction::Shifted { offset, inner } => format!("{}+{offset}", inner.label()),
            TestFunction::AbsPower { exponent, inner } => format!("|{}|^{exponent}", inner.label()),
        }
    }

    pub fn scaled(self, factor: f64) -> Self {
        TestFunction::Scaled {
            factor,
            inner: Box::new(self),
        }
    }

    pub fn shifted(self, offset: f64) -> Self {
        TestFunction::Shifted {
            offset,
            inner: Box::new(self),
        }
    }

    pub fn abs_power(self, exponent: f64) -> Self {
        TestFunction::AbsPower {
            exponent,
            inner: Box::new(self),
        }
    }

    pub fn is_constant(&self) -> bool {
        match self {
            TestFunction::Constant { .. } => true,
            TestFunction::Scaled { inner, .. }
            | TestFunction::Shifted { inner, .. }
            | TestFunction::AbsPower { inner, .. } => inner.is_constant(),
            _ => false,
        }
    }

    /// `sup |f|` when f is bounded.
    pub fn sup_norm(&self) -> Option<f64> {
        match self {
            TestFunction::Constant { value } => Some(value.abs()),
            TestFunction::Coordinate | TestFunction::Square => None,
            TestFunction::ClippedCoordinate { clip } => Some(clip.abs()),
            TestFunction::TanhBump { .. }
            | TestFunction::GaussianBump { .. }
            | TestFunction::MollifiedIndicator { .. }
            | TestFunction::TanhRamp { .. } => Some(1.0),
            TestFunction::Scaled { factor, inner } => inner.sup_norm().map(|s| s * factor.abs()),
            TestFunction::Shifted { offset, inner } => inner.sup_norm().map(|s| s + offset.abs()),
            TestFunction::AbsPower { exponent, inner } => inner.sup_norm().map(|s| s.powf(*exponent)),
        }
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        match self {
            TestFunction::Constant { value } => *value,
            TestFunction::Coordinate => x[0],
            TestFunction::Square => x[0] * x[0],
            TestFunction::ClippedCoordinate { clip } => clip * (x[0] / clip).tanh(),
            TestFunction::TanhBump { width } => 0.5 * (1.0 + ((1.0 - linalg::dot(x, x)) / width).tanh()),
            TestFunction::GaussianBump { width } => (-linalg::dot(x, x) / (2.0 * width * width)).exp(),
            TestFunction::MollifiedIndicator { scale } => normal_cdf(x[0] / scale),
            TestFunction::TanhRamp { slope } => (slope * x[0]).tanh(),
            TestFunction::Scaled { factor, inner } => factor * inner.value(x),
            TestFunction::Shifted { offset, inner } => inner.value(x) + offset,
            TestFunction::AbsPower { exponent, inner } => inner.value(x).abs().powf(*exponent),
        }
    }

    pub fn jet(&self, x: &[f64]) -> Result<Jet> {
        let d = x.len();
        let mut jet = Jet::zero(d);
        jet.value = self.value(x);
        // first-coordinate functions: f(x₁) with derivatives (f', f'')
        let first = |jet: &mut Jet, d1: f64, d2: f64| {
            jet.gradient[0] = d1;
            jet.hessian[0] = d2;
        };
        // radial functions of s = |x|²: g(s) with (g', g'') in s
        let radial = |jet: &mut Jet, g1: f64, g2: f64| {
            for i in 0..d {
                jet.gradient[i] = 2.0 * g1 * x[i];
                for j in 0..d {
                    let delta = if i == j { 1.0 } else { 0.0 };
                    jet.hessian[i * d + j] = 2.0 * g1 * delta + 4.0 * g2 * x[i] * x[j];
                }
            }
        };
        match self {
            TestFunction::Constant { .. } => {}
            TestFunction::Coordinate => first(&mut jet, 1.0, 0.0),
            TestFunction::Square => first(&mut jet, 2.0 * x[0], 2.0),
            TestFunction::ClippedCoordinate { clip } => {
                let th = (x[0] / clip).tanh();
                let s2 = 1.0 - th * th;
                first(&mut jet, s2, -2.0 * th * s2 / clip);
            }
            TestFunction::TanhRamp { slope } => {
                let th = (slope * x[0]).tanh();
                let s2 = 1.0 - th * th;
                first(&mut jet, slope * s2, -2.0 * slope * slope * th * s2);
            }
            TestFunction::MollifiedIndicator { scale } => {
                let z = x[0] / scale;
                let p = normal_pdf(z);
                first(&mut jet, p / scale, -z * p / (scale * scale));
            }
            TestFunction::TanhBump { width } => {
                let s = linalg::dot(x, x);
                let th = ((1.0 - s) / width).tanh();
                let s2 = 1.0 - th * th;
                // g(s) = ½(1 + tanh((1-s)/w))
                let g1 = -0.5 * s2 / width;
                let g2 = -th * s2 / (width * width);
                radial(&mut jet, g1, g2);
            }
            TestFunction::GaussianBump { width } => {
                let w2 = width * width;
                let g = jet.value;
                radial(&mut jet, -g / (2.0 * w2), g / (4.0 * w2 * w2));
            }
            TestFunction::Scaled { factor, inner } => {
                let j = inner.jet(x)?;
                jet.gradient = j.gradient.iter().map(|v| factor * v).collect();
                jet.hessian = j.hessian.iter().map(|v| factor * v).collect();
            }
            TestFunction::Shifted { inner, .. } => {
                let j = inner.jet(x)?;
                jet.gradient = j.gradient;
                jet.hessian = j.hessian;
            }
            TestFunction::AbsPower { .. } => {
                return Err(Error::Unsupported(format!("no jet for {}", self.label())))
            }
        }
        Ok(jet)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_jet(f: &TestFunction, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let d = x.len();
        let h = 1e-4;
        let mut g = vec![0.0; d];
        let mut hess = vec![0.0; d * d];
        for i in 0..d {
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[i] += h;
            xm[i] -= h;
            g[i] = (f.value(&xp) - f.value(&xm)) / (2.0 * h);
            for j in 0..d {
                let e = |si: f64, sj: f64| {
                    let mut y = x.to_vec();
                    y[i] += si * h;
                    y[j] += sj * h;
                    f.value(&y)
                };
                hess[i * d + j] = (e(1.0, 1.0) - e(1.0, -1.0) - e(-1.0, 1.0) + e(-1.0, -1.0)) / (4.0 * h * h);
            }
        }
        (g, hess)
    }

    #[test]
    fn jets_match_finite_differences() {
        let mut fs = TestFunction::battery();
        fs.extend([
            TestFunction::Coordinate,
            TestFunction::Square,
            TestFunction::TanhRamp { slope: 5.0 },
            TestFunction::GaussianBump { width: 0.7 }.scaled(-2.0).shifted(0.3),
        ]);
        for f in &fs {
            for x in [vec![0.3], vec![-0.8, 0.45], vec![0.2, -0.1, 0.6]] {
                let j = f.jet(&x).unwrap();
                let (g, h) = fd_jet(f, &x);
                for (a, b) in j.gradient.iter().zip(&g) {
                    assert!((a - b).abs() < 1e-6, "{} grad {a} vs {b}", f.label());
                }
                for (a, b) in j.hessian.iter().zip(&h) {
                    assert!((a - b).abs() < 1e-4, "{} hess {a} vs {b}", f.label());
                }
            }
        }
    }

    #[test]
    fn battery_is_bounded() {
        for f in TestFunction::battery() {
            let s = f.sup_norm().unwrap();
            for k in -40..=40 {
                let x = [k as f64 * 0.25];
                assert!(f.value(&x).abs() <= s + 1e-15);
            }
        }
        assert!(TestFunction::Coordinate.sup_norm().is_none());
    }

    #[test]
    fn serde_shape() {
        let f: TestFunction = serde_json::from_str(r#"{"kind":"tanh-bump","width":0.5}"#).unwrap();
        assert_eq!(f, TestFunction::TanhBump { width: 0.5 });
        assert!(serde_json::from_str::<TestFunction>(r#"{"kind":"tanh-bump","w":0.5}"#).is_err());
    }

    #[test]
    fn abs_power_has_no_jet() {
        let f = TestFunction::TanhRamp { slope: 5.0 }.abs_power(2.0);
        assert!((f.value(&[0.1]) - (0.5f64).tanh().powi(2)).abs() < 1e-15);
        assert!(f.jet(&[0.1]).is_err());
    }
}
