//! External confinement potentials with closed-form gradients.

use serde::{Deserialize, Serialize};

/// The supplied potential shapes. All have bounded gradients on any compact
/// box, which is what the moment bounds require of the external force.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PotentialSpec {
    Zero,
    /// `psi = stiffness |x|^2 / 2`, force `-stiffness x`.
    Quadratic { stiffness: f64 },
    /// `psi = -depth exp(-|x|^2 / (2 width^2))`.
    GaussianWell { depth: f64, width: f64 },
    /// `psi = slope . x`, a constant force field.
    UniformShear { slope: Vec<f64> },
}

impl PotentialSpec {
    pub fn psi(&self, _t: f64, x: &[f64]) -> f64 {
        match self {
            PotentialSpec::Zero => 0.0,
            PotentialSpec::Quadratic { stiffness } => {
                0.5 * stiffness * x.iter().map(|v| v * v).sum::<f64>()
            }
            PotentialSpec::GaussianWell { depth, width } => {
                let r2: f64 = x.iter().map(|v| v * v).sum();
                -depth * (-r2 / (2.0 * width * width)).exp()
            }
            PotentialSpec::UniformShear { slope } => {
                slope.iter().zip(x).map(|(s, v)| s * v).sum()
            }
        }
    }

    /// Gradient of `psi` written into `out`.
    pub fn grad(&self, _t: f64, x: &[f64], out: &mut [f64]) {
        match self {
            PotentialSpec::Zero => out.fill(0.0),
            PotentialSpec::Quadratic { stiffness } => {
                for (o, v) in out.iter_mut().zip(x) {
                    *o = stiffness * v;
                }
            }
            PotentialSpec::GaussianWell { depth, width } => {
                let w2 = width * width;
                let r2: f64 = x.iter().map(|v| v * v).sum();
                let scale = depth / w2 * (-r2 / (2.0 * w2)).exp();
                for (o, v) in out.iter_mut().zip(x) {
                    *o = scale * v;
                }
            }
            PotentialSpec::UniformShear { slope } => out.copy_from_slice(slope),
        }
    }

    /// Largest gradient magnitude over the box `[-half_width, half_width]^dim`,
    /// by dense sampling. All supplied shapes are radial or constant, so a
    /// moderate sample count is exact enough for budget bookkeeping.
    pub fn sup_grad_on_box(&self, dim: usize, half_width: f64) -> f64 {
        match self {
            PotentialSpec::Zero => 0.0,
            PotentialSpec::UniformShear { slope } => {
                slope.iter().map(|s| s * s).sum::<f64>().sqrt()
            }
            _ => {
                // radial profiles: the sup over the box is the sup over
                // radii up to the box corner distance
                let r_max = half_width * (dim as f64).sqrt();
                let mut sup = 0.0f64;
                let samples = 4096;
                let mut x = vec![0.0; dim];
                let mut g = vec![0.0; dim];
                for k in 0..=samples {
                    let r = r_max * k as f64 / samples as f64;
                    x[0] = r;
                    self.grad(0.0, &x, &mut g);
                    sup = sup.max(g.iter().map(|v| v * v).sum::<f64>().sqrt());
                }
                sup
            }
        }
    }
}
