//! First-order under-estimators of the quadratic-over-linear SINR terms.
//!
//! `f(p, theta) = (b^T p)^2 / theta` is jointly convex for `theta > 0`, so its
//! linearization at an anchor `(p_t, theta_t)` is a global lower bound that is
//! tight at the anchor.

use crate::error::{Error, Result};

/// `(b^T p)^2 / theta`.
pub fn quad_over_lin(p: &[f64], b: &[f64], theta: f64) -> Result<f64> {
    if !(theta > 0.0) {
        return Err(Error::Domain(format!("theta must be positive, got {theta}")));
    }
    let s: f64 = p.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok(s * s / theta)
}

/// Linearization of [`quad_over_lin`] around `(p_t, theta_t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Surrogate {
    pub value_at_anchor: f64,
    /// Gradient with respect to `p`: `2 (b^T p_t) b / theta_t`.
    pub grad_p: Vec<f64>,
    /// Gradient with respect to `theta`: `-f_t / theta_t`.
    pub grad_theta: f64,
    pub anchor_p: Vec<f64>,
    pub anchor_theta: f64,
}

impl Surrogate {
    pub fn new(b: &[f64], anchor_p: &[f64], anchor_theta: f64) -> Result<Self> {
        if b.len() != anchor_p.len() {
            return Err(Error::Domain("signal and power vectors differ in length".into()));
        }
        let f_t = quad_over_lin(anchor_p, b, anchor_theta)?;
        let s: f64 = anchor_p.iter().zip(b).map(|(x, y)| x * y).sum();
        Ok(Self {
            value_at_anchor: f_t,
            grad_p: b.iter().map(|bi| 2.0 * s * bi / anchor_theta).collect(),
            grad_theta: -f_t / anchor_theta,
            anchor_p: anchor_p.to_vec(),
            anchor_theta,
        })
    }

    pub fn eval(&self, p: &[f64], theta: f64) -> f64 {
        let lin: f64 = self.grad_p.iter().zip(p.iter().zip(&self.anchor_p)).map(|(g, (x, x0))| g * (x - x0)).sum();
        self.value_at_anchor + lin + self.grad_theta * (theta - self.anchor_theta)
    }
}

/// CJT surrogate `F_coh` around the anchor.
pub fn surrogate_coh(p: &[f64], theta: f64, b: &[f64], anchor_p: &[f64], anchor_theta: f64) -> Result<f64> {
    Ok(Surrogate::new(b, anchor_p, anchor_theta)?.eval(p, theta))
}

/// NCJT surrogate `F_nc` for a single stream with scalar gain `b`.
pub fn surrogate_nc(p: f64, theta: f64, b: f64, anchor_p: f64, anchor_theta: f64) -> Result<f64> {
    Ok(Surrogate::new(&[b], &[anchor_p], anchor_theta)?.eval(&[p], theta))
}
