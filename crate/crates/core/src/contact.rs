//! Narrow-phase contact kinematics and the Hertz–Mindlin force model with
//! tangential micro-displacement history.
//!
//! Conventions used throughout: a contact pairs a body `i` with a body `j`,
//! the unit normal points from `i` toward `j`, and the force returned by the
//! model acts on body `j` (body `i` receives the exact negation). For
//! sphere–sphere contacts `i` is the lower canonical key; for contacts with a
//! boundary the boundary is always `i`, so the normal points from the surface
//! toward the sphere center.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::model::{ClumpState, PairParams, SphereComponent};
use crate::{Error, Result};

/// Identity of one side of a contact. The variant order defines the global
/// ordering used for canonical pair keys: spheres sort before facets, facets
/// before planes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum GeomId {
    Sphere { clump: u32, comp: u32 },
    Facet { body: u32, tri: u32 },
    Plane { plane: u32 },
}

/// Canonical unordered pair key: `a < b` always holds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ContactKey {
    pub a: GeomId,
    pub b: GeomId,
}

impl ContactKey {
    pub fn new(x: GeomId, y: GeomId) -> Self {
        if x <= y {
            ContactKey { a: x, b: y }
        } else {
            ContactKey { a: y, b: x }
        }
    }
}

/// An entry of the active contact set: the pair key plus the tangential
/// history that must survive contact-set rebuilds.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ContactRecord {
    pub key: ContactKey,
    /// Accumulated tangential micro-displacement, m. Zero at contact birth
    /// and reset to zero whenever the pair separates.
    pub u_t: Vector3<f64>,
    /// True while the pair was actually penetrating at the last force pass
    /// (candidates produced by the margin may be present but not alive).
    pub alive: bool,
}

impl ContactRecord {
    pub fn fresh(key: ContactKey) -> Self {
        ContactRecord {
            key,
            u_t: Vector3::zeros(),
            alive: false,
        }
    }
}

/// Instantaneous geometry and relative velocity of one touching pair.
#[derive(Clone, Copy, Debug)]
pub struct ContactFrame {
    /// Unit normal from body `i` toward body `j`.
    pub normal: Vector3<f64>,
    /// Penetration depth, m; non-negative for touching pairs.
    pub delta_n: f64,
    /// Global contact point (midpoint of the overlap segment), m.
    pub point: Vector3<f64>,
    /// Normal component of the relative velocity of `j` with respect to `i`.
    pub v_n: Vector3<f64>,
    /// Tangential component of the same relative velocity.
    pub v_t: Vector3<f64>,
    /// Contact point minus body `i`'s reference point (COM or boundary ref).
    pub r_i: Vector3<f64>,
    /// Contact point minus body `j`'s COM.
    pub r_j: Vector3<f64>,
}

impl ContactFrame {
    /// Splits a relative velocity into the stored normal/tangential parts.
    pub fn with_velocity(mut self, v_rel: Vector3<f64>) -> Self {
        let vn = self.normal * v_rel.dot(&self.normal);
        self.v_n = vn;
        self.v_t = v_rel - vn;
        self
    }
}

/// Geometry and relative velocity for two component spheres.
///
/// Returns `Ok(None)` when the spheres do not touch. Errors out when the
/// centers coincide and no normal direction exists.
pub fn contact_kinematics(
    state_i: &ClumpState,
    comp_i: &SphereComponent,
    state_j: &ClumpState,
    comp_j: &SphereComponent,
) -> Result<Option<ContactFrame>> {
    let c_i = state_i.component_center(comp_i);
    let c_j = state_j.component_center(comp_j);
    let d = c_j - c_i;
    let dist = d.norm();
    let delta_n = comp_i.radius + comp_j.radius - dist;
    if delta_n < 0.0 {
        return Ok(None);
    }
    if dist == 0.0 {
        return Err(Error::DegenerateNormal(format!(
            "coincident sphere centers at {c_i:?}"
        )));
    }
    let normal = d / dist;
    // Midpoint of the overlap segment between the two surface points.
    let point = ((c_i + normal * comp_i.radius) + (c_j - normal * comp_j.radius)) * 0.5;
    let v_rel = state_j.point_velocity(point) - state_i.point_velocity(point);
    let frame = ContactFrame {
        normal,
        delta_n,
        point,
        v_n: Vector3::zeros(),
        v_t: Vector3::zeros(),
        r_i: point - state_i.position,
        r_j: point - state_j.position,
    };
    Ok(Some(frame.with_velocity(v_rel)))
}

/// Geometry and relative velocity for a sphere against a boundary surface
/// point. `surface_point` is the closest point on the boundary, `v_surface`
/// its material velocity, and `boundary_ref` the point wrenches are reported
/// about.
pub fn surface_kinematics(
    center: Vector3<f64>,
    radius: f64,
    sphere_state: &ClumpState,
    surface_point: Vector3<f64>,
    v_surface: Vector3<f64>,
    boundary_ref: Vector3<f64>,
) -> Result<Option<ContactFrame>> {
    let d = center - surface_point;
    let dist = d.norm();
    let delta_n = radius - dist;
    if delta_n < 0.0 {
        return Ok(None);
    }
    if dist == 0.0 {
        return Err(Error::DegenerateNormal(format!(
            "sphere center {center:?} exactly on the boundary surface"
        )));
    }
    let normal = d / dist;
    let point = surface_point - normal * (delta_n * 0.5);
    let v_rel = sphere_state.point_velocity(point) - v_surface;
    let frame = ContactFrame {
        normal,
        delta_n,
        point,
        v_n: Vector3::zeros(),
        v_t: Vector3::zeros(),
        r_i: point - boundary_ref,
        r_j: point - sphere_state.position,
    };
    Ok(Some(frame.with_velocity(v_rel)))
}

/// Hertzian normal force on body `j`: elastic push along the normal plus a
/// dashpot opposing the normal relative velocity.
pub fn normal_force(frame: &ContactFrame, pp: &PairParams) -> Vector3<f64> {
    if frame.delta_n <= 0.0 {
        return Vector3::zeros();
    }
    let sqrt_r_delta = (pp.r_bar * frame.delta_n).sqrt();
    let k_n = (4.0 / 3.0) * pp.e_star * sqrt_r_delta;
    let s_n = 2.0 * pp.e_star * sqrt_r_delta;
    let c_n = 2.0 * (5.0_f64 / 6.0).sqrt() * pp.beta * (s_n * pp.m_bar).sqrt();
    frame.normal * (k_n * frame.delta_n) - frame.v_n * c_n
}

/// Mindlin tangential force on body `j` with Coulomb clamping.
///
/// Advances the micro-displacement by `h·v_t`, projects it into the current
/// tangent plane, and applies spring + dashpot. When the trial force exceeds
/// `μ‖F_n‖` the stored displacement is shortened so the spring alone sits
/// exactly on the Coulomb cone and the dashpot contribution is dropped.
pub fn tangential_force(
    frame: &ContactFrame,
    pp: &PairParams,
    u_t: Vector3<f64>,
    h: f64,
) -> (Vector3<f64>, Vector3<f64>) {
    let u_prime = u_t + frame.v_t * h;
    let u_tangent = u_prime - frame.normal * u_prime.dot(&frame.normal);

    let sqrt_r_delta = (pp.r_bar * frame.delta_n).sqrt();
    let k_t = 8.0 * pp.g_star * sqrt_r_delta;
    let c_t = 2.0 * (5.0_f64 / 6.0).sqrt() * pp.beta * (k_t * pp.m_bar).sqrt();
    let trial = -u_tangent * k_t - frame.v_t * c_t;

    let f_n = normal_force(frame, pp).norm();
    let cap = pp.mu * f_n;
    let trial_mag = trial.norm();
    if trial_mag <= cap {
        return (trial, u_tangent);
    }

    let u_mag = u_tangent.norm();
    if u_mag == 0.0 || cap == 0.0 || k_t == 0.0 {
        return (Vector3::zeros(), Vector3::zeros());
    }
    let dir = u_tangent / u_mag;
    let clamped_u = dir * (cap / k_t);
    (-clamped_u * k_t, clamped_u)
}

/// Normal force, tangential force (both on body `j`), and the history to
/// store for the next step.
#[derive(Clone, Copy, Debug)]
pub struct ContactForces {
    pub normal: Vector3<f64>,
    pub tangential: Vector3<f64>,
    pub u_t: Vector3<f64>,
}

/// Replaceable contact force law. The default is Hertz–Mindlin; scenarios can
/// plug in a custom law without touching the pipeline.
pub trait ForceModel: Send + Sync {
    fn evaluate(&self, frame: &ContactFrame, pp: &PairParams, u_t: Vector3<f64>, h: f64)
        -> ContactForces;
}

/// The default spring–dashpot law with tangential history.
#[derive(Clone, Copy, Debug, Default)]
pub struct HertzMindlin;

impl ForceModel for HertzMindlin {
    fn evaluate(
        &self,
        frame: &ContactFrame,
        pp: &PairParams,
        u_t: Vector3<f64>,
        h: f64,
    ) -> ContactForces {
        let normal = normal_force(frame, pp);
        let (tangential, new_u_t) = tangential_force(frame, pp, u_t, h);
        ContactForces {
            normal,
            tangential,
            u_t: new_u_t,
        }
    }
}

/// Total force and body-frame torque on one clump from gravity plus a list of
/// contact contributions, which must already be sorted by canonical key so
/// the accumulation order is deterministic.
pub fn accumulate_wrench(
    state: &ClumpState,
    mass: f64,
    contributions: &[(Vector3<f64>, Vector3<f64>)],
    gravity: Vector3<f64>,
) -> (Vector3<f64>, Vector3<f64>) {
    let mut force = gravity * mass;
    let mut torque_global = Vector3::zeros();
    for (point, f) in contributions {
        force += f;
        torque_global += (point - state.position).cross(f);
    }
    let torque_body = state.orientation.inverse_transform_vector(&torque_global);
    (force, torque_body)
}
