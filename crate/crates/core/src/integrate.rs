//! Explicit time stepping of clump states from accumulated wrenches.

use nalgebra::{UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::model::{ClumpState, ClumpTemplate};
use crate::{Error, Result};

/// Step size shared by every clump.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct StepConfig {
    /// Time step, s.
    pub h: f64,
}

impl StepConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.h > 0.0) {
            return Err(Error::Param(format!("time step must be > 0, got {}", self.h)));
        }
        Ok(())
    }
}

/// Semi-implicit Euler update of one clump.
///
/// Velocities are advanced first and positions use the new velocities. The
/// angular update integrates Euler's equations in the body frame, where the
/// principal-axis inertia is diagonal, and applies the rotation increment via
/// the quaternion exponential map before renormalizing. Fixed clumps are left
/// untouched.
///
/// Non-finite input or output yields [`Error::NonFinite`] with zeroed
/// indices; the caller substitutes the clump index and step it knows.
pub fn step_clump(
    state: &mut ClumpState,
    force: Vector3<f64>,
    torque_body: Vector3<f64>,
    template: &ClumpTemplate,
    cfg: &StepConfig,
) -> Result<()> {
    if state.fixed {
        return Ok(());
    }
    if !(force.iter().all(|v| v.is_finite()) && torque_body.iter().all(|v| v.is_finite())) {
        return Err(Error::NonFinite { clump: 0, step: 0 });
    }

    state.lin_vel += force * (cfg.h / template.mass);
    state.position += state.lin_vel * cfg.h;

    let i = template.inertia;
    let w = state.ang_vel;
    let i_w = Vector3::new(i.x * w.x, i.y * w.y, i.z * w.z);
    let gyro = w.cross(&i_w);
    let ang_acc = Vector3::new(
        (torque_body.x - gyro.x) / i.x,
        (torque_body.y - gyro.y) / i.y,
        (torque_body.z - gyro.z) / i.z,
    );
    state.ang_vel += ang_acc * cfg.h;

    // Body-frame angular velocity rotates the orientation from the right.
    let dq = UnitQuaternion::from_scaled_axis(state.ang_vel * cfg.h);
    state.orientation = UnitQuaternion::new_normalize((state.orientation * dq).into_inner());

    if !(state.position.iter().all(|v| v.is_finite()) && state.lin_vel.iter().all(|v| v.is_finite()))
    {
        return Err(Error::NonFinite { clump: 0, step: 0 });
    }
    Ok(())
}

/// Conservative speed estimate for the broad-phase margin check: COM speed
/// plus the fastest surface point from rotation.
pub fn effective_speed(state: &ClumpState, template: &ClumpTemplate) -> f64 {
    state.lin_vel.norm() + state.ang_vel.norm() * template.bounding_radius
}
