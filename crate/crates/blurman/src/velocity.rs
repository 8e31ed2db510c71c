//! Canonical-space velocity of body points and the scalar blur score.
//!
//! A point's velocity is the finite difference of its canonical coordinates
//! over a short time step. The component normal to the body surface does not
//! smear pixels, so it is projected away before the magnitude is pushed
//! through a softplus with a variance floor.

use crate::autodiff::softplus;
use crate::body::{BoneTransforms, CapsuleBody};
use crate::error::{Error, Result};
use crate::math::Vec3;

#[derive(Debug, Clone, Copy)]
pub struct VelocityConfig {
    /// Finite-difference time step (seconds).
    pub dt: f64,
    /// Variance floor added to every score.
    pub v0: f64,
}

impl VelocityConfig {
    pub fn new(dt: f64, v0: f64) -> Result<Self> {
        if !(dt > 0.0) {
            return Err(Error::config("velocity dt must be > 0"));
        }
        if !(v0 > 0.0) {
            return Err(Error::config("velocity v0 must be > 0"));
        }
        Ok(VelocityConfig { dt, v0 })
    }

    /// Score of a perfectly static point: v0 + softplus(0).
    pub fn static_score(&self) -> f64 {
        self.v0 + std::f64::consts::LN_2
    }
}

/// Canonical velocity of observation point x between poses at t and t + dt:
/// (T(x, p(t+dt)) - T(x, p(t))) / dt.
pub fn point_velocity(
    body: &CapsuleBody,
    x: Vec3,
    transforms_t: &BoneTransforms,
    transforms_next: &BoneTransforms,
    dt: f64,
) -> Vec3 {
    let a = body.deform_to_canonical(x, transforms_t);
    let b = body.deform_to_canonical(x, transforms_next);
    (b - a) / dt
}

/// Remove the component of v along the unit normal n.
pub fn project_tangential(v: Vec3, n: Vec3) -> Result<Vec3> {
    if (n.norm() - 1.0).abs() > 1e-6 {
        return Err(Error::usage("project_tangential requires a unit normal"));
    }
    Ok(v - n * v.dot(n))
}

/// Blur score: v0 + softplus(|v_hat|), strictly increasing in the speed.
pub fn velocity_score(v_hat: Vec3, cfg: &VelocityConfig) -> f64 {
    cfg.v0 + softplus(v_hat.norm())
}

/// Full per-point pipeline: finite-difference velocity, tangential projection
/// against the canonical surface normal (skipped for degenerate on-axis
/// points, which keep the unprojected magnitude), then the score.
pub fn point_blur_score(
    body: &CapsuleBody,
    x: Vec3,
    x_hat_t: Vec3,
    transforms_next: &BoneTransforms,
    cfg: &VelocityConfig,
) -> f64 {
    let x_hat_next = body.deform_to_canonical(x, transforms_next);
    let v = (x_hat_next - x_hat_t) / cfg.dt;
    let (n, degenerate) = body.nearest_surface_normal(x_hat_t);
    let v_hat = if degenerate { v } else { v - n * v.dot(n) };
    cfg.v0 + softplus(v_hat.norm())
}
