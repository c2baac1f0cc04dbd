//! Core domain types: materials, clump templates built from sphere unions,
//! per-element dynamic state, and derived pairwise contact coefficients.

use nalgebra::{Matrix3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Bulk material carried by individual component spheres.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Material {
    /// Young's modulus, N/m².
    pub young_modulus: f64,
    /// Poisson ratio.
    pub poisson: f64,
    /// Coulomb friction coefficient.
    pub friction: f64,
    /// Coefficient of restitution.
    pub cor: f64,
    /// Grain density, kg/m³.
    pub density: f64,
}

impl Material {
    pub fn validate(&self) -> Result<()> {
        if !(self.young_modulus > 0.0) {
            return Err(Error::Param(format!(
                "young_modulus must be > 0, got {}",
                self.young_modulus
            )));
        }
        if !(self.poisson >= 0.0 && self.poisson < 0.5) {
            return Err(Error::Param(format!(
                "poisson must lie in [0, 0.5), got {}",
                self.poisson
            )));
        }
        if !(self.friction >= 0.0) {
            return Err(Error::Param(format!(
                "friction must be >= 0, got {}",
                self.friction
            )));
        }
        if !(self.cor > 0.0 && self.cor <= 1.0) {
            return Err(Error::Param(format!(
                "cor must lie in (0, 1], got {}",
                self.cor
            )));
        }
        if !(self.density > 0.0) {
            return Err(Error::Param(format!(
                "density must be > 0, got {}",
                self.density
            )));
        }
        Ok(())
    }
}

/// One sphere of a clump, in the clump body frame.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SphereComponent {
    /// Center offset from the body-frame origin, m.
    pub offset: Vector3<f64>,
    /// Sphere radius, m.
    pub radius: f64,
    /// Index into the scene's material table.
    pub material_id: usize,
}

/// Immutable clump shape with mass properties of the geometric sphere union.
///
/// The body frame has its origin at the center of mass and its axes aligned
/// with the principal axes of inertia, so `inertia` is a diagonal 3-vector.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClumpTemplate {
    pub components: Vec<SphereComponent>,
    /// Total mass of the union, kg.
    pub mass: f64,
    /// Principal moments of inertia, kg·m².
    pub inertia: Vector3<f64>,
    /// Radius of the tightest origin-centered ball containing the clump, m.
    pub bounding_radius: f64,
    /// Grid pitch used when the union was voxelized, m.
    pub voxel_pitch: f64,
}

/// Dynamic state of one clump instance.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ClumpState {
    /// Center of mass, global frame, m.
    pub position: Vector3<f64>,
    /// Body-to-global rotation.
    pub orientation: UnitQuaternion<f64>,
    /// Linear velocity, global frame, m/s.
    pub lin_vel: Vector3<f64>,
    /// Angular velocity in the body frame, rad/s.
    pub ang_vel: Vector3<f64>,
    /// Index into the scene's template table.
    pub template_id: usize,
    /// Free user tag propagated through patches and snapshots.
    pub family: u32,
    /// Infinite-mass flag: the integrator leaves the clump untouched.
    pub fixed: bool,
}

impl ClumpState {
    pub fn at_rest(position: Vector3<f64>, template_id: usize) -> Self {
        ClumpState {
            position,
            orientation: UnitQuaternion::identity(),
            lin_vel: Vector3::zeros(),
            ang_vel: Vector3::zeros(),
            template_id,
            family: 0,
            fixed: false,
        }
    }

    /// Global-frame center of a component sphere.
    pub fn component_center(&self, comp: &SphereComponent) -> Vector3<f64> {
        self.position + self.orientation * comp.offset
    }

    /// Global-frame velocity of a material point at global position `p`.
    pub fn point_velocity(&self, p: Vector3<f64>) -> Vector3<f64> {
        let omega_global = self.orientation * self.ang_vel;
        self.lin_vel + omega_global.cross(&(p - self.position))
    }
}

/// Material-dependent part of the pair coefficients, cacheable per
/// (material, material) combination.
#[derive(Clone, Copy, Debug)]
pub struct MaterialPair {
    pub e_star: f64,
    pub g_star: f64,
    pub beta: f64,
    pub mu: f64,
}

/// Effective pair coefficients feeding the contact force model.
#[derive(Clone, Copy, Debug)]
pub struct PairParams {
    /// Effective Young's modulus, N/m².
    pub e_star: f64,
    /// Effective shear modulus, N/m².
    pub g_star: f64,
    /// Damping factor derived from the restitution coefficient.
    pub beta: f64,
    /// Pair friction coefficient.
    pub mu: f64,
    /// Effective radius of curvature, m.
    pub r_bar: f64,
    /// Effective mass, kg.
    pub m_bar: f64,
}

/// Combines two materials: compliance-series moduli, min friction,
/// min restitution.
pub fn material_pair(a: &Material, b: &Material) -> MaterialPair {
    let inv_e = (1.0 - a.poisson * a.poisson) / a.young_modulus
        + (1.0 - b.poisson * b.poisson) / b.young_modulus;
    let inv_g = 2.0 * (2.0 - a.poisson) * (1.0 + a.poisson) / a.young_modulus
        + 2.0 * (2.0 - b.poisson) * (1.0 + b.poisson) / b.young_modulus;
    let cor = a.cor.min(b.cor);
    let ln_cor = cor.ln();
    let beta = -ln_cor / (ln_cor * ln_cor + std::f64::consts::PI * std::f64::consts::PI).sqrt();
    MaterialPair {
        e_star: 1.0 / inv_e,
        g_star: 1.0 / inv_g,
        beta,
        mu: a.friction.min(b.friction),
    }
}

impl PairParams {
    /// Attaches the geometric/mass part to a cached material combination.
    pub fn from_parts(mp: MaterialPair, r_bar: f64, m_bar: f64) -> Self {
        PairParams {
            e_star: mp.e_star,
            g_star: mp.g_star,
            beta: mp.beta,
            mu: mp.mu,
            r_bar,
            m_bar,
        }
    }

    /// Pair against a flat boundary: curvature and mass of the sphere side
    /// only (the boundary acts as an infinite-radius, infinite-mass wall).
    pub fn against_surface(mp: MaterialPair, sphere_radius: f64, clump_mass: f64) -> Self {
        PairParams::from_parts(mp, sphere_radius, clump_mass)
    }
}

fn harmonic_half(a: f64, b: f64) -> f64 {
    a * b / (a + b)
}

/// Full pair coefficients for two touching spheres.
///
/// `r_i, r_j` are the component sphere radii; `m_i, m_j` are the owning
/// clump masses (the clump, not the sphere, is the inertial body).
pub fn pair_params(
    mat_i: &Material,
    mat_j: &Material,
    r_i: f64,
    r_j: f64,
    m_i: f64,
    m_j: f64,
) -> PairParams {
    PairParams::from_parts(
        material_pair(mat_i, mat_j),
        harmonic_half(r_i, r_j),
        harmonic_half(m_i, m_j),
    )
}

/// Union voxelization used for mass properties and volume queries.
///
/// Voxel centers sit on the lattice `(i + 0.5) * pitch` of the input frame,
/// so growing one sphere can only add voxels, never drop them. Each voxel is
/// owned by the lowest-index component containing its center, which fixes the
/// density used for overlap regions deterministically.
pub struct VoxelUnion {
    pub pitch: f64,
    /// Voxel center and voxel mass for every occupied cell, in input-frame
    /// coordinates, ordered by lattice index.
    pub voxels: Vec<(Vector3<f64>, f64)>,
    pub mass: f64,
}

pub fn voxelize_union(
    components: &[SphereComponent],
    densities: &[f64],
    pitch: f64,
) -> Result<VoxelUnion> {
    if !(pitch > 0.0) {
        return Err(Error::Param(format!("voxel pitch must be > 0, got {pitch}")));
    }
    let mut lo = Vector3::repeat(f64::INFINITY);
    let mut hi = Vector3::repeat(f64::NEG_INFINITY);
    for c in components {
        lo = lo.inf(&c.offset.add_scalar(-c.radius));
        hi = hi.sup(&c.offset.add_scalar(c.radius));
    }
    let idx_lo = lo.map(|v| (v / pitch).floor() as i64 - 1);
    let idx_hi = hi.map(|v| (v / pitch).ceil() as i64 + 1);

    let cell_mass = pitch * pitch * pitch;
    let mut voxels = Vec::new();
    let mut mass = 0.0;
    for ix in idx_lo.x..=idx_hi.x {
        let x = (ix as f64 + 0.5) * pitch;
        for iy in idx_lo.y..=idx_hi.y {
            let y = (iy as f64 + 0.5) * pitch;
            for iz in idx_lo.z..=idx_hi.z {
                let z = (iz as f64 + 0.5) * pitch;
                let p = Vector3::new(x, y, z);
                let owner = components
                    .iter()
                    .position(|c| (p - c.offset).norm_squared() <= c.radius * c.radius);
                if let Some(k) = owner {
                    let m = densities[components[k].material_id] * cell_mass;
                    voxels.push((p, m));
                    mass += m;
                }
            }
        }
    }
    Ok(VoxelUnion { pitch, voxels, mass })
}

fn check_connected(components: &[SphereComponent]) -> Result<()> {
    let n = components.len();
    let mut seen = vec![false; n];
    let mut stack = vec![0usize];
    seen[0] = true;
    while let Some(i) = stack.pop() {
        for j in 0..n {
            if !seen[j] {
                let d = (components[i].offset - components[j].offset).norm();
                if d <= components[i].radius + components[j].radius {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
    }
    match seen.iter().position(|s| !s) {
        Some(component) => Err(Error::Disconnected { component }),
        None => Ok(()),
    }
}

/// Deterministic principal frame from a symmetric inertia tensor: eigenvalues
/// sorted ascending, first two axes sign-fixed by their largest entry, third
/// axis completing a right-handed triad.
fn principal_frame(inertia: Matrix3<f64>) -> (Vector3<f64>, Matrix3<f64>) {
    let eig = nalgebra::SymmetricEigen::new(inertia);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));

    let canonical = |v: Vector3<f64>| -> Vector3<f64> {
        let mut dominant = 0;
        for k in 1..3 {
            if v[k].abs() > v[dominant].abs() {
                dominant = k;
            }
        }
        if v[dominant] < 0.0 {
            -v
        } else {
            v
        }
    };

    let e0 = canonical(eig.eigenvectors.column(order[0]).into_owned());
    let e1 = canonical(eig.eigenvectors.column(order[1]).into_owned());
    let e2 = e0.cross(&e1);
    let values = Vector3::new(
        eig.eigenvalues[order[0]],
        eig.eigenvalues[order[1]],
        eig.eigenvalues[order[2]],
    );
    (values, Matrix3::from_columns(&[e0, e1, e2]))
}

/// Builds a clump template from raw components: voxelizes the sphere union
/// (overlaps counted once), moves the frame to the center of mass, rotates it
/// to principal axes, and records a tight bounding radius.
pub fn build_clump_template(
    components: &[SphereComponent],
    materials: &[Material],
    voxel_resolution: f64,
) -> Result<ClumpTemplate> {
    if components.is_empty() {
        return Err(Error::Param("clump needs at least one component".into()));
    }
    for (k, c) in components.iter().enumerate() {
        if !(c.radius > 0.0) {
            return Err(Error::Param(format!(
                "component {k} radius must be > 0, got {}",
                c.radius
            )));
        }
        if c.material_id >= materials.len() {
            return Err(Error::Param(format!(
                "component {k} references material {} outside the table",
                c.material_id
            )));
        }
    }
    check_connected(components)?;

    let densities: Vec<f64> = materials.iter().map(|m| m.density).collect();
    let vox = voxelize_union(components, &densities, voxel_resolution)?;
    if vox.voxels.is_empty() {
        return Err(Error::Param(
            "voxel resolution too coarse: union produced no voxels".into(),
        ));
    }

    let mass = vox.mass;
    let mut com = Vector3::zeros();
    for (p, m) in &vox.voxels {
        com += p * *m;
    }
    com /= mass;

    // Second moments about the COM. The pitch²/12 diagonal term is each
    // voxel's own moment, which makes the sums exact for the voxelized solid.
    let self_term = vox.pitch * vox.pitch / 12.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut szz = 0.0;
    let mut sxy = 0.0;
    let mut sxz = 0.0;
    let mut syz = 0.0;
    for (p, m) in &vox.voxels {
        let d = p - com;
        sxx += m * (d.x * d.x + self_term);
        syy += m * (d.y * d.y + self_term);
        szz += m * (d.z * d.z + self_term);
        sxy += m * d.x * d.y;
        sxz += m * d.x * d.z;
        syz += m * d.y * d.z;
    }
    let inertia_tensor = Matrix3::new(
        syy + szz,
        -sxy,
        -sxz,
        -sxy,
        sxx + szz,
        -syz,
        -sxz,
        -syz,
        sxx + syy,
    );

    let (inertia, rot) = principal_frame(inertia_tensor);
    let rot_t = rot.transpose();

    let mut placed = Vec::with_capacity(components.len());
    let mut bounding_radius: f64 = 0.0;
    for c in components {
        let offset = rot_t * (c.offset - com);
        bounding_radius = bounding_radius.max(offset.norm() + c.radius);
        placed.push(SphereComponent { offset, ..*c });
    }

    Ok(ClumpTemplate {
        components: placed,
        mass,
        inertia,
        bounding_radius,
        voxel_pitch: voxel_resolution,
    })
}

#[derive(Deserialize)]
struct TemplateFileComponent {
    offset: [f64; 3],
    radius: f64,
    material: usize,
}

#[derive(Deserialize)]
struct TemplateFile {
    components: Vec<TemplateFileComponent>,
    #[serde(default)]
    density_override: Option<f64>,
}

/// Parses a clump template document and recomputes mass properties.
///
/// Format: `{"components": [{"offset": [x,y,z], "radius": r, "material": id}],
/// "density_override": optional}`. The override replaces every referenced
/// material's density for the mass computation only.
pub fn load_template_json(
    text: &str,
    materials: &[Material],
    voxel_resolution: f64,
) -> Result<ClumpTemplate> {
    let file: TemplateFile = serde_json::from_str(text)?;
    let components: Vec<SphereComponent> = file
        .components
        .iter()
        .map(|c| SphereComponent {
            offset: Vector3::new(c.offset[0], c.offset[1], c.offset[2]),
            radius: c.radius,
            material_id: c.material,
        })
        .collect();
    let table: Vec<Material>;
    let effective = if let Some(density) = file.density_override {
        if !(density > 0.0) {
            return Err(Error::Param(format!(
                "density_override must be > 0, got {density}"
            )));
        }
        table = materials.iter().map(|m| Material { density, ..*m }).collect();
        &table[..]
    } else {
        materials
    };
    build_clump_template(&components, effective, voxel_resolution)
}

pub fn load_template_file(
    path: &std::path::Path,
    materials: &[Material],
    voxel_resolution: f64,
) -> Result<ClumpTemplate> {
    let text = std::fs::read_to_string(path)?;
    load_template_json(&text, materials, voxel_resolution)
}
