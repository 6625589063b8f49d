//! Smooth vector fields used as body forces and boundary data.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A term `c x^px y^py`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Monomial {
    pub c: f64,
    pub px: u32,
    pub py: u32,
}

/// Vector field sampler on the unit square.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VectorField {
    Zero,
    /// `grad(x^2 - y^2) = (2x, -2y)`.
    Gradient,
    /// `(-y, x)`.
    Rotation,
    /// `(sin(pi y), sin(pi x))`.
    Trig,
    /// Rigid rotation about the centre, `(1/2 - y, x - 1/2)`: zero net flux
    /// through every side of the square.
    CenteredRotation,
    Polynomial { u: Vec<Monomial>, v: Vec<Monomial> },
    Scaled(f64, Box<VectorField>),
    Sum(Vec<VectorField>),
}

impl VectorField {
    /// Parses a built-in name.
    pub fn named(name: &str) -> Result<Self> {
        Ok(match name {
            "zero" => Self::Zero,
            "gradient" => Self::Gradient,
            "rotation" => Self::Rotation,
            "trig" => Self::Trig,
            "centered-rotation" => Self::CenteredRotation,
            _ => return Err(Error::Config(format!("unknown vector field `{name}`"))),
        })
    }

    pub fn eval(&self, x: f64, y: f64) -> [f64; 2] {
        match self {
            Self::Zero => [0.0, 0.0],
            Self::Gradient => [2.0 * x, -2.0 * y],
            Self::Rotation => [-y, x],
            Self::Trig => [(PI * y).sin(), (PI * x).sin()],
            Self::CenteredRotation => [0.5 - y, x - 0.5],
            Self::Polynomial { u, v } => [poly(u, x, y), poly(v, x, y)],
            Self::Scaled(a, f) => {
                let [p, q] = f.eval(x, y);
                [a * p, a * q]
            }
            Self::Sum(parts) => parts.iter().fold([0.0, 0.0], |acc, f| {
                let [p, q] = f.eval(x, y);
                [acc[0] + p, acc[1] + q]
            }),
        }
    }

    pub fn is_zero(&self) -> bool {
        match self {
            Self::Zero => true,
            Self::Polynomial { u, v } => u.iter().chain(v).all(|t| t.c == 0.0),
            Self::Scaled(a, f) => *a == 0.0 || f.is_zero(),
            Self::Sum(parts) => parts.iter().all(|f| f.is_zero()),
            _ => false,
        }
    }

    /// Short label for manifests and logs.
    pub fn label(&self) -> String {
        match self {
            Self::Zero => "zero".into(),
            Self::Gradient => "gradient".into(),
            Self::Rotation => "rotation".into(),
            Self::Trig => "trig".into(),
            Self::CenteredRotation => "centered-rotation".into(),
            Self::Polynomial { .. } => "polynomial".into(),
            Self::Scaled(a, f) => format!("{a}*{}", f.label()),
            Self::Sum(parts) => parts.iter().map(|f| f.label()).collect::<Vec<_>>().join("+"),
        }
    }
}

fn poly(terms: &[Monomial], x: f64, y: f64) -> f64 {
    terms
        .iter()
        .map(|t| t.c * x.powi(t.px as i32) * y.powi(t.py as i32))
        .sum()
}
