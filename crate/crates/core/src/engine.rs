//! The single-step engine shared by every pipeline mode: one force pass over
//! the active contact set, one integration pass, one boundary advance. Both
//! the lockstep and the threaded drivers call exactly this code on identical
//! data, which is what makes them bitwise comparable.

use nalgebra::Vector3;

use crate::boundary::closest_point_triangle;
use crate::broadphase::ContactSet;
use crate::contact::{surface_kinematics, ContactFrame, ContactRecord, ForceModel, GeomId};
use crate::integrate::{effective_speed, step_clump, StepConfig};
use crate::model::PairParams;
use crate::scene::{PairTable, Scene};
use crate::{Error, Result};

/// Per-step observables handed to hooks and statistics.
#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub step: u64,
    /// Simulation time after the step, s.
    pub t: f64,
    /// Kinetic energy after the step, J.
    pub kinetic_energy: f64,
    /// Largest effective body speed seen after the step, m/s.
    pub max_speed: f64,
    /// True when `max_speed` exceeded the configured bound.
    pub speed_violation: bool,
    /// Reaction wrench on each plane: (force, torque about the plane point).
    pub plane_wrenches: Vec<(Vector3<f64>, Vector3<f64>)>,
    /// Reaction wrench on each mesh body: (force, torque about its pose
    /// origin), the readback channel for external coupling.
    pub mesh_wrenches: Vec<(Vector3<f64>, Vector3<f64>)>,
    /// Number of actually penetrating records this step.
    pub live_contacts: usize,
}

fn harmonic(a: f64, b: f64) -> f64 {
    if a.is_infinite() {
        return b;
    }
    if b.is_infinite() {
        return a;
    }
    a * b / (a + b)
}

fn kill(rec: &mut ContactRecord) {
    rec.u_t = Vector3::zeros();
    rec.alive = false;
}

pub(crate) struct Engine {
    pairs: PairTable,
    /// Per-clump (force, world torque) accumulators, reused across steps.
    slots: Vec<(Vector3<f64>, Vector3<f64>)>,
}

impl Engine {
    pub fn new(scene: &Scene) -> Engine {
        Engine {
            pairs: PairTable::build(&scene.materials),
            slots: Vec::new(),
        }
    }

    /// Advances the scene from `step` to `step + 1` against the given
    /// contact set, updating tangential history in place.
    pub fn step(
        &mut self,
        scene: &mut Scene,
        set: &mut ContactSet,
        model: &dyn ForceModel,
        cfg: &StepConfig,
        v_max: f64,
        step: u64,
    ) -> Result<StepOutcome> {
        let h = cfg.h;
        let t = step as f64 * h;

        self.slots.clear();
        self.slots.reserve(scene.clumps.len());
        for s in &scene.clumps {
            let mass = scene.templates[s.template_id].mass;
            self.slots.push((scene.gravity * mass, Vector3::zeros()));
        }
        let mut plane_wrenches = vec![(Vector3::zeros(), Vector3::zeros()); scene.planes.len()];
        let mut mesh_wrenches = vec![(Vector3::zeros(), Vector3::zeros()); scene.meshes.len()];
        let mut live_contacts = 0usize;

        for rec in &mut set.records {
            match (rec.key.a, rec.key.b) {
                (GeomId::Sphere { clump: ca, comp: ka }, GeomId::Sphere { clump: cb, comp: kb }) => {
                    let state_i = &scene.clumps[ca as usize];
                    let state_j = &scene.clumps[cb as usize];
                    // Two anchored bodies cannot exchange momentum, and their
                    // infinite pair mass would poison the dashpot terms.
                    if state_i.fixed && state_j.fixed {
                        kill(rec);
                        continue;
                    }
                    let tmpl_i = &scene.templates[state_i.template_id];
                    let tmpl_j = &scene.templates[state_j.template_id];
                    let comp_i = &tmpl_i.components[ka as usize];
                    let comp_j = &tmpl_j.components[kb as usize];
                    let Some(frame) =
                        crate::contact::contact_kinematics(state_i, comp_i, state_j, comp_j)?
                    else {
                        kill(rec);
                        continue;
                    };
                    let m_i = if state_i.fixed { f64::INFINITY } else { tmpl_i.mass };
                    let m_j = if state_j.fixed { f64::INFINITY } else { tmpl_j.mass };
                    let pp = PairParams::from_parts(
                        self.pairs.get(comp_i.material_id, comp_j.material_id),
                        harmonic(comp_i.radius, comp_j.radius),
                        harmonic(m_i, m_j),
                    );
                    let forces = model.evaluate(&frame, &pp, rec.u_t, h);
                    rec.u_t = forces.u_t;
                    rec.alive = true;
                    live_contacts += 1;
                    let total = forces.normal + forces.tangential;
                    let (fi, ti) = &mut self.slots[ca as usize];
                    *fi -= total;
                    *ti -= frame.r_i.cross(&total);
                    let (fj, tj) = &mut self.slots[cb as usize];
                    *fj += total;
                    *tj += frame.r_j.cross(&total);
                }
                (GeomId::Sphere { clump, comp }, boundary) => {
                    let state = &scene.clumps[clump as usize];
                    let tmpl = &scene.templates[state.template_id];
                    let c = &tmpl.components[comp as usize];
                    let center = state.component_center(c);

                    // Boundary side is body i: surface point, its material
                    // velocity, the wrench reference, and the material id.
                    let (hit, mat_b): (Option<ContactFrame>, usize) = match boundary {
                        GeomId::Facet { body, tri } => {
                            let mesh = &scene.meshes[body as usize];
                            let tri_w = mesh.world_triangle(tri as usize);
                            let (cp, _) =
                                closest_point_triangle(center, tri_w[0], tri_w[1], tri_w[2]);
                            (
                                surface_kinematics(
                                    center,
                                    c.radius,
                                    state,
                                    cp,
                                    mesh.point_velocity(cp),
                                    mesh.pose_pos,
                                )?,
                                mesh.material_id,
                            )
                        }
                        GeomId::Plane { plane } => {
                            let pl = &scene.planes[plane as usize];
                            let dist = (center - pl.point).dot(&pl.normal);
                            let surface = center - pl.normal.into_inner() * dist;
                            (
                                surface_kinematics(center, c.radius, state, surface, pl.velocity, pl.point)?,
                                pl.material_id,
                            )
                        }
                        GeomId::Sphere { .. } => {
                            return Err(Error::Param(format!(
                                "malformed contact key {:?}",
                                rec.key
                            )))
                        }
                    };
                    let Some(frame) = hit else {
                        kill(rec);
                        continue;
                    };
                    let pp = PairParams::against_surface(
                        self.pairs.get(mat_b, c.material_id),
                        c.radius,
                        tmpl.mass,
                    );
                    let forces = model.evaluate(&frame, &pp, rec.u_t, h);
                    rec.u_t = forces.u_t;
                    rec.alive = true;
                    live_contacts += 1;
                    let total = forces.normal + forces.tangential;
                    let (fj, tj) = &mut self.slots[clump as usize];
                    *fj += total;
                    *tj += frame.r_j.cross(&total);
                    let (fb, tb) = match boundary {
                        GeomId::Facet { body, .. } => &mut mesh_wrenches[body as usize],
                        GeomId::Plane { plane } => &mut plane_wrenches[plane as usize],
                        GeomId::Sphere { .. } => unreachable!(),
                    };
                    *fb -= total;
                    *tb -= frame.r_i.cross(&total);
                }
                _ => {
                    return Err(Error::Param(format!(
                        "contact set holds an unsupported pair {:?}",
                        rec.key
                    )))
                }
            }
        }

        let mut max_speed = 0.0f64;
        for (k, state) in scene.clumps.iter_mut().enumerate() {
            let template = &scene.templates[state.template_id];
            let (force, torque_world) = self.slots[k];
            let torque_body = state.orientation.inverse_transform_vector(&torque_world);
            step_clump(state, force, torque_body, template, cfg).map_err(|e| match e {
                Error::NonFinite { .. } => Error::NonFinite { clump: k, step },
                other => other,
            })?;
            if !state.fixed {
                max_speed = max_speed.max(effective_speed(state, template));
            }
        }

        for (k, body) in scene.meshes.iter_mut().enumerate() {
            crate::boundary::advance_mesh(body, k, t, h)?;
            max_speed = max_speed.max(body.max_surface_speed());
        }
        for (k, plane) in scene.planes.iter_mut().enumerate() {
            crate::boundary::advance_plane(plane, k, t, h)?;
            max_speed = max_speed.max(plane.velocity.norm());
        }

        Ok(StepOutcome {
            step,
            t: (step + 1) as f64 * h,
            kinetic_energy: scene.kinetic_energy(),
            max_speed,
            speed_violation: max_speed > v_max,
            plane_wrenches,
            mesh_wrenches,
            live_contacts,
        })
    }
}
