//! Scene assembly: clumps, boundaries, gravity, and the broad-phase grid,
//! plus the immutable snapshots exchanged between pipeline workers.

use nalgebra::{UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::boundary::{PlaneBoundary, TriMeshBody};
use crate::model::{material_pair, ClumpState, ClumpTemplate, Material, MaterialPair};
use crate::{Error, Result};

/// Axis-aligned box.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Vector3<f64>,
    pub max: Vector3<f64>,
}

impl Aabb {
    pub fn new(min: Vector3<f64>, max: Vector3<f64>) -> Self {
        Aabb { min, max }
    }

    pub fn contains(&self, p: Vector3<f64>) -> bool {
        (0..3).all(|k| p[k] >= self.min[k] && p[k] <= self.max[k])
    }

    pub fn size(&self) -> Vector3<f64> {
        self.max - self.min
    }

    pub fn center(&self) -> Vector3<f64> {
        (self.min + self.max) * 0.5
    }

    pub fn volume(&self) -> f64 {
        let s = self.size();
        s.x * s.y * s.z
    }

    pub fn grown(&self, pad: f64) -> Aabb {
        Aabb {
            min: self.min.add_scalar(-pad),
            max: self.max.add_scalar(pad),
        }
    }
}

/// Uniform-grid sizing for the broad phase.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct GridConfig {
    /// Cell edge length, m. Must cover two margin-enlarged sphere radii so a
    /// 27-cell neighborhood scan finds every candidate pair.
    pub cell_size: f64,
    /// Every sphere center must stay inside this box during the run.
    pub domain: Aabb,
}

impl GridConfig {
    /// Smallest admissible cell for the given largest sphere and margin, with
    /// the supplied domain.
    pub fn fit(max_radius: f64, margin: f64, domain: Aabb) -> Self {
        GridConfig {
            cell_size: 2.0 * max_radius + margin,
            domain,
        }
    }
}

/// Precomputed material combinations, indexed `(i, j)` in either order.
#[derive(Clone, Debug)]
pub struct PairTable {
    n: usize,
    pairs: Vec<MaterialPair>,
}

impl PairTable {
    pub fn build(materials: &[Material]) -> Self {
        let n = materials.len();
        let mut pairs = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                pairs.push(material_pair(&materials[i], &materials[j]));
            }
        }
        PairTable { n, pairs }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> MaterialPair {
        self.pairs[i * self.n + j]
    }
}

/// Everything the engine steps: elements, boundaries, gravity, grid.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Scene {
    pub materials: Vec<Material>,
    pub templates: Vec<ClumpTemplate>,
    pub clumps: Vec<ClumpState>,
    pub planes: Vec<PlaneBoundary>,
    pub meshes: Vec<TriMeshBody>,
    pub gravity: Vector3<f64>,
    pub grid: GridConfig,
}

impl Scene {
    pub fn new(materials: Vec<Material>, gravity: Vector3<f64>, grid: GridConfig) -> Self {
        Scene {
            materials,
            templates: Vec::new(),
            clumps: Vec::new(),
            planes: Vec::new(),
            meshes: Vec::new(),
            gravity,
            grid,
        }
    }

    pub fn add_template(&mut self, template: ClumpTemplate) -> usize {
        self.templates.push(template);
        self.templates.len() - 1
    }

    pub fn add_clump(&mut self, state: ClumpState) -> usize {
        self.clumps.push(state);
        self.clumps.len() - 1
    }

    pub fn template_of(&self, clump: usize) -> &ClumpTemplate {
        &self.templates[self.clumps[clump].template_id]
    }

    pub fn max_sphere_radius(&self) -> f64 {
        self.templates
            .iter()
            .flat_map(|t| t.components.iter().map(|c| c.radius))
            .fold(0.0, f64::max)
    }

    /// Translational plus rotational kinetic energy of all free clumps, J.
    pub fn kinetic_energy(&self) -> f64 {
        let mut ke = 0.0;
        for s in &self.clumps {
            if s.fixed {
                continue;
            }
            let t = &self.templates[s.template_id];
            let w = s.ang_vel;
            ke += 0.5 * t.mass * s.lin_vel.norm_squared()
                + 0.5 * (t.inertia.x * w.x * w.x + t.inertia.y * w.y * w.y + t.inertia.z * w.z * w.z);
        }
        ke
    }

    pub fn validate(&self) -> Result<()> {
        for m in &self.materials {
            m.validate()?;
        }
        for (k, t) in self.templates.iter().enumerate() {
            if !(t.mass > 0.0) {
                return Err(Error::Param(format!("template {k} has non-positive mass")));
            }
            for c in &t.components {
                if c.material_id >= self.materials.len() {
                    return Err(Error::Param(format!(
                        "template {k} references material {} outside the table",
                        c.material_id
                    )));
                }
            }
        }
        for (k, s) in self.clumps.iter().enumerate() {
            if s.template_id >= self.templates.len() {
                return Err(Error::Param(format!(
                    "clump {k} references template {} outside the table",
                    s.template_id
                )));
            }
        }
        for (k, p) in self.planes.iter().enumerate() {
            if p.material_id >= self.materials.len() {
                return Err(Error::Param(format!("plane {k} has an invalid material")));
            }
        }
        for (k, b) in self.meshes.iter().enumerate() {
            if b.material_id >= self.materials.len() {
                return Err(Error::Param(format!("mesh {k} has an invalid material")));
            }
        }
        if !(self.grid.cell_size > 0.0) {
            return Err(Error::Param("grid cell_size must be > 0".into()));
        }
        Ok(())
    }
}

/// Positions and orientations frozen at one step, the only dynamic data the
/// contact-set producer needs.
#[derive(Clone, Debug)]
pub struct StateSnapshot {
    /// Step index the snapshot was taken at.
    pub stamp: u64,
    pub clump_poses: Vec<(Vector3<f64>, UnitQuaternion<f64>)>,
    pub mesh_poses: Vec<(Vector3<f64>, UnitQuaternion<f64>)>,
    pub plane_points: Vec<Vector3<f64>>,
}

impl StateSnapshot {
    pub fn capture(scene: &Scene, stamp: u64) -> Self {
        StateSnapshot {
            stamp,
            clump_poses: scene
                .clumps
                .iter()
                .map(|s| (s.position, s.orientation))
                .collect(),
            mesh_poses: scene
                .meshes
                .iter()
                .map(|b| (b.pose_pos, b.pose_rot))
                .collect(),
            plane_points: scene.planes.iter().map(|p| p.point).collect(),
        }
    }
}
