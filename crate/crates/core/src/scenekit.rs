//! Scene construction and measurement: the built-in granular simulant family,
//! lattice spawning, batch settling, terrain patch persistence and tiling,
//! plate compression, and the quantities the scenario harness reports.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read as IoRead, Write as IoWrite};
use std::path::Path;

use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::boundary::{MotionSpec, PlaneBoundary};
use crate::broadphase::{build_contact_set, ContactSet};
use crate::contact::{ForceModel, GeomId};
use crate::engine::StepOutcome;
use crate::integrate::StepConfig;
use crate::model::{
    build_clump_template, voxelize_union, ClumpState, ClumpTemplate, Material, SphereComponent,
};
use crate::pipeline::{run, HookFlow, PipelineConfig, StepHook};
use crate::scene::{Aabb, Scene, StateSnapshot};
use crate::{Error, Result};

/// One granular element type: three or six overlapping spheres of one radius
/// arranged in a plane with 120° symmetry.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SimulantType {
    /// Overall bounding diameter, m.
    pub diameter: f64,
    /// Component sphere radius, m.
    pub radius: f64,
    /// Mass fraction of the mix.
    pub weight: f64,
    /// Six-sphere construction (three outer plus three fillers) instead of
    /// the plain three-sphere triangle.
    pub six_sphere: bool,
}

/// The full simulant family plus global shape knobs.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SimulantSpec {
    pub types: Vec<SimulantType>,
    /// Uniform geometric scale applied to diameters and radii.
    pub scale: f64,
    /// In-plane dilation: scales sphere center distances, not radii.
    pub dilation: f64,
}

impl SimulantSpec {
    /// The built-in seven-type mix (sizes 21 mm down to 2.5 mm).
    pub fn builtin() -> Self {
        let mm = 1e-3;
        let rows: [(f64, f64, f64, bool); 7] = [
            (21.0, 3.6, 0.17, true),
            (11.4, 1.95, 0.21, true),
            (6.6, 1.81, 0.14, false),
            (4.5, 1.24, 0.19, false),
            (3.0, 0.82, 0.16, false),
            (2.75, 0.75, 0.05, false),
            (2.5, 0.7, 0.08, false),
        ];
        SimulantSpec {
            types: rows
                .iter()
                .map(|&(d, r, w, six)| SimulantType {
                    diameter: d * mm,
                    radius: r * mm,
                    weight: w,
                    six_sphere: six,
                })
                .collect(),
            scale: 1.0,
            dilation: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.types.is_empty() {
            return Err(Error::Param("simulant spec has no types".into()));
        }
        if !(self.scale > 0.0) || !(self.dilation > 0.0) {
            return Err(Error::Param("scale and dilation must be > 0".into()));
        }
        let total: f64 = self.types.iter().map(|t| t.weight).sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Param(format!(
                "weight fractions must sum to 1, got {total}"
            )));
        }
        for (k, t) in self.types.iter().enumerate() {
            if !(t.radius > 0.0) || !(t.diameter > 2.0 * t.radius) {
                return Err(Error::Param(format!(
                    "type {k}: need 0 < 2*radius < diameter"
                )));
            }
            if !(t.weight > 0.0) {
                return Err(Error::Param(format!("type {k}: weight must be > 0")));
            }
            if k > 0 && t.diameter >= self.types[k - 1].diameter {
                return Err(Error::Param(
                    "diameters must be strictly decreasing by type".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn weights(&self) -> Vec<f64> {
        self.types.iter().map(|t| t.weight).collect()
    }
}

fn planar_ring(ring_radius: f64, start_deg: f64, radius: f64, material_id: usize) -> Vec<SphereComponent> {
    (0..3)
        .map(|k| {
            let a = (start_deg + 120.0 * k as f64).to_radians();
            SphereComponent {
                offset: Vector3::new(ring_radius * a.cos(), ring_radius * a.sin(), 0.0),
                radius,
                material_id,
            }
        })
        .collect()
}

/// Builds one template per simulant type. Three-sphere types place their
/// spheres on a circle of radius D/2 − r, 120° apart; six-sphere types add
/// three filler spheres on half that circle, rotated 60°. Dilation scales the
/// circle radii only, so the plate thickness (2r) never changes.
pub fn generate_ds_templates(
    spec: &SimulantSpec,
    materials: &[Material],
    material_id: usize,
) -> Result<Vec<ClumpTemplate>> {
    spec.validate()?;
    if material_id >= materials.len() {
        return Err(Error::Param(format!(
            "material {material_id} outside the table"
        )));
    }
    let mut out = Vec::with_capacity(spec.types.len());
    for t in &spec.types {
        let d = t.diameter * spec.scale;
        let r = t.radius * spec.scale;
        let ring = (d / 2.0 - r) * spec.dilation;
        let mut comps = planar_ring(ring, 0.0, r, material_id);
        if t.six_sphere {
            comps.extend(planar_ring(ring / 2.0, 60.0, r, material_id));
        }
        // Twelve voxels per sphere radius keeps mass and inertia within a
        // few tenths of a percent of the true union.
        let pitch = r / 12.0;
        out.push(build_clump_template(&comps, materials, pitch)?);
    }
    Ok(out)
}

/// Converts mass fractions into per-type clump counts for a batch of `count`,
/// proportional to weight/mass and exact in total via largest remainders.
pub fn number_quota(count: usize, masses: &[f64], weights: &[f64]) -> Result<Vec<usize>> {
    if masses.len() != weights.len() || masses.is_empty() {
        return Err(Error::Param("masses and weights must match and be nonempty".into()));
    }
    let rates: Vec<f64> = masses
        .iter()
        .zip(weights)
        .map(|(m, w)| w / m)
        .collect();
    let total: f64 = rates.iter().sum();
    let ideal: Vec<f64> = rates.iter().map(|r| r / total * count as f64).collect();
    let mut quota: Vec<usize> = ideal.iter().map(|x| x.floor() as usize).collect();
    let assigned: usize = quota.iter().sum();
    let mut order: Vec<usize> = (0..quota.len()).collect();
    order.sort_by(|&i, &j| {
        let ri = ideal[i] - ideal[i].floor();
        let rj = ideal[j] - ideal[j].floor();
        rj.partial_cmp(&ri).unwrap().then(i.cmp(&j))
    });
    for k in 0..count - assigned {
        quota[order[k % order.len()]] += 1;
    }
    Ok(quota)
}

/// Expands a quota into a shuffled per-clump type sequence (seeded, so the
/// same inputs always give the same batch).
pub fn type_sequence(
    count: usize,
    masses: &[f64],
    weights: &[f64],
    seed: u64,
) -> Result<Vec<usize>> {
    let quota = number_quota(count, masses, weights)?;
    let mut seq = Vec::with_capacity(count);
    for (ty, n) in quota.iter().enumerate() {
        seq.extend(std::iter::repeat(ty).take(*n));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    seq.shuffle(&mut rng);
    Ok(seq)
}

/// Uniformly random orientation (Shoemake's quaternion construction).
pub fn random_orientation(rng: &mut impl Rng) -> UnitQuaternion<f64> {
    let u1: f64 = rng.gen();
    let u2: f64 = rng.gen();
    let u3: f64 = rng.gen();
    let (a, b) = ((1.0 - u1).sqrt(), u1.sqrt());
    let (t2, t3) = (std::f64::consts::TAU * u2, std::f64::consts::TAU * u3);
    UnitQuaternion::from_quaternion(Quaternion::new(
        b * t3.cos(),
        a * t2.sin(),
        a * t2.cos(),
        b * t3.sin(),
    ))
}

/// Drops a batch of clumps into the scene at the given positions with seeded
/// random orientations. `type_seq[i]` indexes templates starting at
/// `template_base`. Returns the new clump indices.
pub fn spawn_batch(
    scene: &mut Scene,
    positions: &[Vector3<f64>],
    type_seq: &[usize],
    template_base: usize,
    family: u32,
    seed: u64,
) -> Result<Vec<usize>> {
    if positions.len() != type_seq.len() {
        return Err(Error::Param("positions and type sequence differ in length".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ids = Vec::with_capacity(positions.len());
    for (p, ty) in positions.iter().zip(type_seq) {
        let template_id = template_base + ty;
        if template_id >= scene.templates.len() {
            return Err(Error::Param(format!(
                "type {ty} points past the template table"
            )));
        }
        let mut st = ClumpState::at_rest(*p, template_id);
        st.orientation = random_orientation(&mut rng);
        st.family = family;
        ids.push(scene.add_clump(st));
    }
    Ok(ids)
}

/// Hexagonal close-packed lattice sites inside `bounds` with nearest-neighbor
/// distance exactly `separation`. Sites are emitted layer by layer, row by
/// row, so the ordering is reproducible.
pub fn sample_hcp(bounds: Aabb, separation: f64) -> Vec<Vector3<f64>> {
    let s = separation;
    assert!(s > 0.0, "separation must be > 0");
    let size = bounds.size();
    if size.x < 0.0 || size.y < 0.0 || size.z < 0.0 {
        eprintln!("warning: lattice box is empty, no sites generated");
        return Vec::new();
    }
    let row_dy = s * 3f64.sqrt() / 2.0;
    let layer_dz = s * (2f64 / 3.0).sqrt();
    let mut out = Vec::new();
    let layers = (size.z / layer_dz).floor() as i64 + 1;
    for k in 0..layers {
        let z = bounds.min.z + k as f64 * layer_dz;
        let odd_layer = k % 2 == 1;
        let rows = (size.y / row_dy).floor() as i64 + 1;
        for j in 0..rows {
            let mut y = bounds.min.y + j as f64 * row_dy;
            if odd_layer {
                y += row_dy / 3.0;
            }
            if y > bounds.max.y + 1e-12 {
                continue;
            }
            let mut x0 = bounds.min.x;
            if j % 2 == 1 {
                x0 += s / 2.0;
            }
            if odd_layer {
                x0 += s / 2.0;
            }
            let cols = ((bounds.max.x - x0) / s).floor() as i64 + 1;
            for i in 0..cols.max(0) {
                let x = x0 + i as f64 * s;
                out.push(Vector3::new(x, y, z));
            }
        }
    }
    if out.is_empty() {
        eprintln!("warning: lattice box too small for a single site");
    }
    out
}

#[derive(Clone, Copy, Debug)]
pub struct SettleParams {
    /// Mean kinetic energy per free clump below which the scene counts as
    /// settled, J.
    pub ke_per_clump: f64,
    /// Simulated-time budget, s.
    pub max_time: f64,
    /// Steps between convergence checks.
    pub check_every: u64,
}

#[derive(Clone, Copy, Debug)]
pub struct SettleReport {
    pub settled: bool,
    pub steps: u64,
    pub sim_time: f64,
    pub mean_ke: f64,
}

struct SettleHook {
    ke_per_clump: f64,
    check_every: u64,
}

impl StepHook for SettleHook {
    fn post_step(&mut self, scene: &mut Scene, outcome: &StepOutcome) -> Result<HookFlow> {
        if (outcome.step + 1) % self.check_every != 0 {
            return Ok(HookFlow::Continue);
        }
        let free = scene.clumps.iter().filter(|c| !c.fixed).count();
        if free == 0 {
            return Ok(HookFlow::Stop);
        }
        if outcome.kinetic_energy / (free as f64) < self.ke_per_clump {
            return Ok(HookFlow::Stop);
        }
        Ok(HookFlow::Continue)
    }
}

/// Runs the scene until mean kinetic energy per free clump falls below the
/// threshold or the time budget runs out, and reports which happened.
pub fn settle(
    scene: &mut Scene,
    step_cfg: &StepConfig,
    pipe: &PipelineConfig,
    model: &dyn ForceModel,
    params: &SettleParams,
) -> Result<SettleReport> {
    if params.check_every == 0 {
        return Err(Error::Param("check_every must be >= 1".into()));
    }
    let n_steps = (params.max_time / step_cfg.h).ceil() as u64;
    let mut hook = SettleHook {
        ke_per_clump: params.ke_per_clump,
        check_every: params.check_every,
    };
    let (stats, _) = run(scene, 0, n_steps, step_cfg, pipe, model, None, &mut hook)?;
    let free = scene.clumps.iter().filter(|c| !c.fixed).count().max(1);
    Ok(SettleReport {
        settled: stats.stopped_early,
        steps: stats.steps_run,
        sim_time: stats.steps_run as f64 * step_cfg.h,
        mean_ke: scene.kinetic_energy() / free as f64,
    })
}

/// Marks every clump whose center sits below `z` as fixed; returns how many.
pub fn fix_below(scene: &mut Scene, z: f64) -> usize {
    let mut n = 0;
    for c in &mut scene.clumps {
        if c.position.z < z && !c.fixed {
            c.fixed = true;
            c.lin_vel = Vector3::zeros();
            c.ang_vel = Vector3::zeros();
            n += 1;
        }
    }
    n
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PatchMeta {
    pub provenance: String,
    /// Free-form generation settings for the record.
    #[serde(default)]
    pub settings: serde_json::Value,
}

/// A reusable block of settled material: clump states plus the tables they
/// reference and the box they occupy.
#[derive(Clone, Debug)]
pub struct Patch {
    pub materials: Vec<Material>,
    pub templates: Vec<ClumpTemplate>,
    pub clumps: Vec<ClumpState>,
    pub extent: Aabb,
    pub metadata: PatchMeta,
}

#[derive(Serialize, Deserialize)]
struct PatchHeader {
    materials: Vec<Material>,
    templates: Vec<ClumpTemplate>,
    extent_min: [f64; 3],
    extent_max: [f64; 3],
    metadata: PatchMeta,
}

const PATCH_MAGIC: &[u8; 8] = b"DSPATCH1";
const PATCH_RECORD_BYTES: usize = 112;

impl Patch {
    /// Cuts a patch out of a scene: every clump whose center lies inside
    /// `extent`, with full material and template tables.
    pub fn from_scene(scene: &Scene, extent: Aabb, provenance: &str) -> Self {
        Patch {
            materials: scene.materials.clone(),
            templates: scene.templates.clone(),
            clumps: scene
                .clumps
                .iter()
                .filter(|c| extent.contains(c.position))
                .cloned()
                .collect(),
            extent,
            metadata: PatchMeta {
                provenance: provenance.to_string(),
                settings: serde_json::Value::Null,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (k, c) in self.clumps.iter().enumerate() {
            if c.template_id >= self.templates.len() {
                return Err(Error::Format(format!(
                    "patch clump {k} references template {} outside the table",
                    c.template_id
                )));
            }
            if !self.extent.contains(c.position) {
                return Err(Error::Format(format!("patch clump {k} lies outside the extent")));
            }
        }
        Ok(())
    }
}

fn put_f64(buf: &mut Vec<u8>, v: f64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn get_f64(buf: &[u8], at: &mut usize) -> f64 {
    let v = f64::from_le_bytes(buf[*at..*at + 8].try_into().unwrap());
    *at += 8;
    v
}

/// Writes a patch: magic, header length, JSON header, record count, then one
/// 112-byte record per clump (position, orientation quaternion wxyz, linear
/// and angular velocity, template id, family tag; all little-endian).
pub fn save_patch(patch: &Patch, path: &Path) -> Result<()> {
    patch.validate()?;
    let header = PatchHeader {
        materials: patch.materials.clone(),
        templates: patch.templates.clone(),
        extent_min: patch.extent.min.into(),
        extent_max: patch.extent.max.into(),
        metadata: patch.metadata.clone(),
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(PATCH_MAGIC)?;
    w.write_all(&(header_bytes.len() as u32).to_le_bytes())?;
    w.write_all(&header_bytes)?;
    w.write_all(&(patch.clumps.len() as u64).to_le_bytes())?;
    for c in &patch.clumps {
        let mut rec = Vec::with_capacity(PATCH_RECORD_BYTES);
        for k in 0..3 {
            put_f64(&mut rec, c.position[k]);
        }
        let q = c.orientation.quaternion();
        put_f64(&mut rec, q.w);
        put_f64(&mut rec, q.i);
        put_f64(&mut rec, q.j);
        put_f64(&mut rec, q.k);
        for k in 0..3 {
            put_f64(&mut rec, c.lin_vel[k]);
        }
        for k in 0..3 {
            put_f64(&mut rec, c.ang_vel[k]);
        }
        rec.extend_from_slice(&(c.template_id as u32).to_le_bytes());
        rec.extend_from_slice(&c.family.to_le_bytes());
        debug_assert_eq!(rec.len(), PATCH_RECORD_BYTES);
        w.write_all(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_patch(path: &Path) -> Result<Patch> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Format("patch file truncated before magic".into()))?;
    if &magic != PATCH_MAGIC {
        return Err(Error::Format("not a patch file (bad magic)".into()));
    }
    let mut len4 = [0u8; 4];
    r.read_exact(&mut len4)
        .map_err(|_| Error::Format("patch file truncated in header length".into()))?;
    let hlen = u32::from_le_bytes(len4) as usize;
    let mut hbytes = vec![0u8; hlen];
    r.read_exact(&mut hbytes)
        .map_err(|_| Error::Format("patch file truncated in header".into()))?;
    let header: PatchHeader = serde_json::from_slice(&hbytes)?;
    let mut cnt8 = [0u8; 8];
    r.read_exact(&mut cnt8)
        .map_err(|_| Error::Format("patch file truncated in record count".into()))?;
    let count = u64::from_le_bytes(cnt8) as usize;
    let mut clumps = Vec::with_capacity(count);
    let mut rec = [0u8; PATCH_RECORD_BYTES];
    for k in 0..count {
        r.read_exact(&mut rec)
            .map_err(|_| Error::Format(format!("patch file truncated in record {k}")))?;
        let mut at = 0usize;
        let position = Vector3::new(get_f64(&rec, &mut at), get_f64(&rec, &mut at), get_f64(&rec, &mut at));
        let (w, i, j, kq) = (
            get_f64(&rec, &mut at),
            get_f64(&rec, &mut at),
            get_f64(&rec, &mut at),
            get_f64(&rec, &mut at),
        );
        let lin_vel = Vector3::new(get_f64(&rec, &mut at), get_f64(&rec, &mut at), get_f64(&rec, &mut at));
        let ang_vel = Vector3::new(get_f64(&rec, &mut at), get_f64(&rec, &mut at), get_f64(&rec, &mut at));
        let template_id = u32::from_le_bytes(rec[at..at + 4].try_into().unwrap()) as usize;
        let family = u32::from_le_bytes(rec[at + 4..at + 8].try_into().unwrap());
        clumps.push(ClumpState {
            position,
            orientation: UnitQuaternion::new_unchecked(Quaternion::new(w, i, j, kq)),
            lin_vel,
            ang_vel,
            template_id,
            family,
            fixed: false,
        });
    }
    let patch = Patch {
        materials: header.materials,
        templates: header.templates,
        clumps,
        extent: Aabb::new(header.extent_min.into(), header.extent_max.into()),
        metadata: header.metadata,
    };
    patch.validate()?;
    Ok(patch)
}

/// Tiles a patch `nx × ny × nz` times, translating copies by the extent size
/// plus `gap` per axis. A gap more negative than 1% of the smallest sphere
/// radius would interpenetrate tiles and is rejected.
pub fn replicate_patch(patch: &Patch, tiling: [u32; 3], gap: f64) -> Result<Patch> {
    if tiling.iter().any(|&t| t < 1) {
        return Err(Error::Param("tiling must be >= 1 per axis".into()));
    }
    let min_r = patch
        .templates
        .iter()
        .flat_map(|t| t.components.iter().map(|c| c.radius))
        .fold(f64::INFINITY, f64::min);
    if gap < -0.01 * min_r {
        return Err(Error::Param(format!(
            "gap {gap} would interpenetrate tiles (tolerance {})",
            0.01 * min_r
        )));
    }
    let size = patch.extent.size();
    let pitch = size + Vector3::repeat(gap);
    let mut clumps = Vec::with_capacity(patch.clumps.len() * (tiling[0] * tiling[1] * tiling[2]) as usize);
    for ix in 0..tiling[0] {
        for iy in 0..tiling[1] {
            for iz in 0..tiling[2] {
                let shift = Vector3::new(
                    ix as f64 * pitch.x,
                    iy as f64 * pitch.y,
                    iz as f64 * pitch.z,
                );
                for c in &patch.clumps {
                    let mut copy = c.clone();
                    copy.position += shift;
                    clumps.push(copy);
                }
            }
        }
    }
    let grown = Vector3::new(
        size.x * tiling[0] as f64 + gap * (tiling[0] - 1) as f64,
        size.y * tiling[1] as f64 + gap * (tiling[1] - 1) as f64,
        size.z * tiling[2] as f64 + gap * (tiling[2] - 1) as f64,
    );
    Ok(Patch {
        materials: patch.materials.clone(),
        templates: patch.templates.clone(),
        clumps,
        extent: Aabb::new(patch.extent.min, patch.extent.min + grown),
        metadata: PatchMeta {
            provenance: format!(
                "{} | tiled {}x{}x{} gap {gap}",
                patch.metadata.provenance, tiling[0], tiling[1], tiling[2]
            ),
            settings: patch.metadata.settings.clone(),
        },
    })
}

/// Largest sphere-sphere penetration depth in the scene, m (0 when nothing
/// touches). Uses the broad phase, so it stays affordable on big patches.
pub fn max_penetration(scene: &Scene) -> Result<f64> {
    let snap = StateSnapshot::capture(scene, 0);
    let tiny = scene.max_sphere_radius() * 1e-6;
    let set: ContactSet = build_contact_set(scene, &snap, tiny, 0)?;
    let mut worst = 0.0f64;
    for rec in &set.records {
        let (GeomId::Sphere { clump: ci, comp: ki }, GeomId::Sphere { clump: cj, comp: kj }) =
            (rec.key.a, rec.key.b)
        else {
            continue;
        };
        let (si, sj) = (&scene.clumps[ci as usize], &scene.clumps[cj as usize]);
        let (ti, tj) = (&scene.templates[si.template_id], &scene.templates[sj.template_id]);
        let (ci_c, cj_c) = (
            &ti.components[ki as usize],
            &tj.components[kj as usize],
        );
        let pi = si.component_center(ci_c);
        let pj = sj.component_center(cj_c);
        let delta = ci_c.radius + cj_c.radius - (pj - pi).norm();
        worst = worst.max(delta);
    }
    Ok(worst)
}

/// Builds a runnable scene around a patch: its tables and clumps, the given
/// gravity, and a grid sized from the patch's spheres plus `margin`, covering
/// the extent grown by `domain_pad` on every side.
pub fn build_scene(patch: &Patch, gravity: Vector3<f64>, margin: f64, domain_pad: f64) -> Result<Scene> {
    patch.validate()?;
    let max_r = patch
        .templates
        .iter()
        .flat_map(|t| t.components.iter().map(|c| c.radius))
        .fold(0.0f64, f64::max);
    if !(max_r > 0.0) {
        return Err(Error::Param("patch has no spheres".into()));
    }
    let domain = patch.extent.grown(domain_pad);
    let grid = crate::scene::GridConfig::fit(max_r, margin, domain);
    let mut scene = Scene::new(patch.materials.clone(), gravity, grid);
    scene.templates = patch.templates.clone();
    scene.clumps = patch.clumps.clone();
    scene.validate()?;
    Ok(scene)
}

/// Mass inside the probe box divided by the box volume. Clump volume fractions
/// come from each template's voxel decomposition, so partially covered clumps
/// contribute exactly their covered voxels.
pub fn measure_bulk_density(scene: &Scene, probe: Aabb) -> Result<f64> {
    let vol = probe.volume();
    if !(vol > 0.0) {
        return Err(Error::Param("probe box has no volume".into()));
    }
    let densities: Vec<f64> = scene.materials.iter().map(|m| m.density).collect();
    // A coarser cloud than the template build keeps repeated probes cheap;
    // normalizing each cloud to the template mass removes the resulting
    // discretization bias for fully covered clumps.
    let mut clouds: Vec<Option<Vec<(Vector3<f64>, f64)>>> = vec![None; scene.templates.len()];
    let mut inside_mass = 0.0;
    for c in &scene.clumps {
        let t = &scene.templates[c.template_id];
        let bounding = Aabb::new(
            c.position - Vector3::repeat(t.bounding_radius),
            c.position + Vector3::repeat(t.bounding_radius),
        );
        if bounding.max.x < probe.min.x
            || bounding.max.y < probe.min.y
            || bounding.max.z < probe.min.z
            || bounding.min.x > probe.max.x
            || bounding.min.y > probe.max.y
            || bounding.min.z > probe.max.z
        {
            continue;
        }
        if clouds[c.template_id].is_none() {
            let vox = voxelize_union(&t.components, &densities, t.voxel_pitch * 2.5)?;
            let scale = t.mass / vox.mass;
            clouds[c.template_id] = Some(
                vox.voxels
                    .into_iter()
                    .map(|(p, m)| (p, m * scale))
                    .collect(),
            );
        }
        let cloud = clouds[c.template_id].as_ref().unwrap();
        for (p, m) in cloud {
            let world = c.position + c.orientation * p;
            if probe.contains(world) {
                inside_mass += m;
            }
        }
    }
    if inside_mass == 0.0 {
        return Err(Error::Scenario("probe box contains no material".into()));
    }
    Ok(inside_mass / vol)
}

#[derive(Clone, Copy, Debug)]
pub enum CompressTarget {
    /// Stop the descent once the probe box reaches this bulk density, kg/m³.
    BulkDensity(f64),
    /// Stop once the plate reaches this height, m.
    PlateHeight(f64),
}

#[derive(Clone, Copy, Debug)]
pub struct CompressParams {
    /// Plate starting height, m; must sit above the material.
    pub start_height: f64,
    /// Descent (and retraction) speed, m/s.
    pub speed: f64,
    pub target: CompressTarget,
    /// Density probe region used for the BulkDensity target and reporting.
    pub probe: Aabb,
    /// Upward force on the plate past which the target counts as unreachable, N.
    pub max_force: f64,
    pub plate_material: usize,
    /// Steps between target checks.
    pub check_every: u64,
    /// Height the plate retracts to before it is removed, m.
    pub retract_to: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct CompressReport {
    pub achieved_density: f64,
    pub peak_force: f64,
}

enum PlatePhase {
    Descend,
    Retract,
}

struct CompressHook {
    plane_idx: usize,
    params: CompressParams,
    phase: PlatePhase,
    peak_force: f64,
}

impl StepHook for CompressHook {
    fn post_step(&mut self, scene: &mut Scene, outcome: &StepOutcome) -> Result<HookFlow> {
        let lift = outcome.plane_wrenches[self.plane_idx].0.z;
        self.peak_force = self.peak_force.max(lift);
        if (outcome.step + 1) % self.params.check_every != 0 {
            return Ok(HookFlow::Continue);
        }
        let plate_z = scene.planes[self.plane_idx].point.z;
        match self.phase {
            PlatePhase::Descend => {
                let met = match self.params.target {
                    CompressTarget::BulkDensity(rho) => {
                        measure_bulk_density(scene, self.params.probe)? >= rho
                    }
                    CompressTarget::PlateHeight(hz) => plate_z <= hz,
                };
                if met {
                    self.phase = PlatePhase::Retract;
                    scene.planes[self.plane_idx].motion = MotionSpec::ConstantVelocity {
                        linear: Vector3::new(0.0, 0.0, self.params.speed),
                        angular: Vector3::zeros(),
                    };
                } else if lift > self.params.max_force {
                    let achieved = measure_bulk_density(scene, self.params.probe)?;
                    return Err(Error::TargetUnreachable { achieved });
                }
                Ok(HookFlow::Continue)
            }
            PlatePhase::Retract => {
                if plate_z >= self.params.retract_to {
                    Ok(HookFlow::Stop)
                } else {
                    Ok(HookFlow::Continue)
                }
            }
        }
    }
}

/// Presses a horizontal plate down onto the material until the target density
/// or height is reached, retracts it, and removes it. Already-met targets
/// return without touching the scene.
pub fn compress(
    scene: &mut Scene,
    step_cfg: &StepConfig,
    pipe: &PipelineConfig,
    model: &dyn ForceModel,
    params: &CompressParams,
) -> Result<CompressReport> {
    if params.check_every == 0 || !(params.speed > 0.0) {
        return Err(Error::Param("compress needs speed > 0 and check_every >= 1".into()));
    }
    let already = match params.target {
        CompressTarget::BulkDensity(rho) => measure_bulk_density(scene, params.probe)? >= rho,
        CompressTarget::PlateHeight(hz) => params.start_height <= hz,
    };
    if already {
        return Ok(CompressReport {
            achieved_density: measure_bulk_density(scene, params.probe)?,
            peak_force: 0.0,
        });
    }
    let mut plate = PlaneBoundary::fixed(
        Vector3::new(0.0, 0.0, params.start_height),
        Vector3::new(0.0, 0.0, -1.0),
        params.plate_material,
    );
    plate.motion = MotionSpec::ConstantVelocity {
        linear: Vector3::new(0.0, 0.0, -params.speed),
        angular: Vector3::zeros(),
    };
    scene.planes.push(plate);
    let plane_idx = scene.planes.len() - 1;

    let travel = (params.start_height - scene.grid.domain.min.z).abs()
        + (params.retract_to - scene.grid.domain.min.z).abs();
    let n_steps = (travel / params.speed / step_cfg.h).ceil() as u64 * 2;
    let mut hook = CompressHook {
        plane_idx,
        params: *params,
        phase: PlatePhase::Descend,
        peak_force: 0.0,
    };
    let outcome = run(scene, 0, n_steps, step_cfg, pipe, model, None, &mut hook);
    scene.planes.remove(plane_idx);
    let (stats, _) = outcome?;
    if !stats.stopped_early {
        return Err(Error::TargetUnreachable {
            achieved: measure_bulk_density(scene, params.probe)?,
        });
    }
    Ok(CompressReport {
        achieved_density: measure_bulk_density(scene, params.probe)?,
        peak_force: hook.peak_force,
    })
}

/// Angle of repose from clump centers, degrees. Radial annuli around the pile
/// axis take their 95th-percentile height as the surface; a straight line is
/// fit over the 20%–80% radial band and the angle is its slope.
pub fn measure_repose_angle(positions: &[Vector3<f64>], center: Vector3<f64>) -> Result<f64> {
    if positions.len() < 500 {
        return Err(Error::Scenario(format!(
            "repose angle needs at least 500 clumps, got {}",
            positions.len()
        )));
    }
    let radial: Vec<(f64, f64)> = positions
        .iter()
        .map(|p| {
            let d = p - center;
            ((d.x * d.x + d.y * d.y).sqrt(), p.z)
        })
        .collect();
    let r_max = radial.iter().map(|(r, _)| *r).fold(0.0, f64::max);
    if !(r_max > 0.0) {
        return Err(Error::Scenario("all clumps sit on the pile axis".into()));
    }
    let n_bins = 30usize;
    let mut bins: Vec<Vec<f64>> = vec![Vec::new(); n_bins];
    for (r, z) in &radial {
        let k = ((r / r_max * n_bins as f64) as usize).min(n_bins - 1);
        bins[k].push(*z);
    }
    let mut pts = Vec::new();
    for (k, b) in bins.iter_mut().enumerate() {
        let r_mid = (k as f64 + 0.5) / n_bins as f64 * r_max;
        if r_mid < 0.2 * r_max || r_mid > 0.8 * r_max || b.len() < 3 {
            continue;
        }
        b.sort_by(|a, c| a.partial_cmp(c).unwrap());
        let idx = ((b.len() - 1) as f64 * 0.95).round() as usize;
        pts.push((r_mid, b[idx]));
    }
    if pts.len() < 2 {
        return Err(Error::Scenario("too few populated annuli for a slope fit".into()));
    }
    let n = pts.len() as f64;
    let (sx, sy): (f64, f64) = pts.iter().fold((0.0, 0.0), |(a, b), (x, y)| (a + x, b + y));
    let (sxx, sxy): (f64, f64) = pts
        .iter()
        .fold((0.0, 0.0), |(a, b), (x, y)| (a + x * x, b + x * y));
    let slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
    Ok(slope.abs().atan().to_degrees())
}

#[derive(Clone, Copy, Debug)]
pub struct SlipMeasure {
    /// 1 − v/(ωr), clamped to [0, 1].
    pub slip: f64,
    /// The unclamped value.
    pub raw: f64,
    pub clamped: bool,
    /// Mean drive-direction velocity over the window, m/s.
    pub mean_velocity: f64,
}

/// Slip ratio of a driven wheel from its trajectory: mean drive-direction
/// velocity over [window_start, window_end] against the commanded rim speed
/// ω·r.
pub fn measure_slip(
    trajectory: &[(f64, Vector3<f64>)],
    drive_dir: Vector3<f64>,
    omega: f64,
    radius: f64,
    window_start: f64,
    window_end: f64,
) -> Result<SlipMeasure> {
    let rim = omega * radius;
    if rim == 0.0 {
        return Err(Error::Param("commanded rim speed is zero".into()));
    }
    if !(window_end > window_start) {
        return Err(Error::Param("slip window is empty".into()));
    }
    let dir = drive_dir
        .try_normalize(1e-12)
        .ok_or_else(|| Error::Param("drive direction is zero".into()))?;
    let at = |t: f64| -> Result<Vector3<f64>> {
        let first = trajectory.first().ok_or_else(|| Error::Param("empty trajectory".into()))?;
        let last = trajectory.last().unwrap();
        if t < first.0 - 1e-9 || t > last.0 + 1e-9 {
            return Err(Error::Param(format!("slip window time {t} outside the trajectory")));
        }
        let mut best = first;
        for s in trajectory {
            if (s.0 - t).abs() < (best.0 - t).abs() {
                best = s;
            }
        }
        Ok(best.1)
    };
    let v = (at(window_end)? - at(window_start)?).dot(&dir) / (window_end - window_start);
    let raw = 1.0 - v / rim;
    let slip = raw.clamp(0.0, 1.0);
    Ok(SlipMeasure {
        slip,
        raw,
        clamped: slip != raw,
        mean_velocity: v,
    })
}

/// Runs several hooks as one: pre-steps in order, post-steps in order, and
/// a single `Stop` vote ends the run after every hook has seen the step.
pub struct Hooks<'a> {
    pub list: Vec<&'a mut dyn StepHook>,
}

impl StepHook for Hooks<'_> {
    fn pre_step(&mut self, scene: &mut Scene, step: u64, t: f64) -> Result<()> {
        for hook in &mut self.list {
            hook.pre_step(scene, step, t)?;
        }
        Ok(())
    }

    fn post_step(&mut self, scene: &mut Scene, outcome: &StepOutcome) -> Result<HookFlow> {
        let mut flow = HookFlow::Continue;
        for hook in &mut self.list {
            if let HookFlow::Stop = hook.post_step(scene, outcome)? {
                flow = HookFlow::Stop;
            }
        }
        Ok(flow)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct WrenchSample {
    pub t: f64,
    /// Mesh pose origin, world frame, m.
    pub position: Vector3<f64>,
    /// Reaction force on the mesh, N.
    pub force: Vector3<f64>,
    /// Reaction torque about the pose origin, N·m.
    pub torque: Vector3<f64>,
}

/// Records the reaction wrench and pose of one mesh body every `every`
/// steps; the penetrometer and prescribed-motion wheel channels read from
/// this.
pub struct MeshWrenchLog {
    pub mesh: usize,
    pub every: u64,
    pub rows: Vec<WrenchSample>,
}

impl MeshWrenchLog {
    pub fn new(mesh: usize, every: u64) -> Self {
        Self {
            mesh,
            every: every.max(1),
            rows: Vec::new(),
        }
    }
}

impl StepHook for MeshWrenchLog {
    fn pre_step(&mut self, scene: &mut Scene, _step: u64, _t: f64) -> Result<()> {
        if self.mesh >= scene.meshes.len() {
            return Err(Error::Param(format!(
                "wrench log watches mesh {} but the scene has {}",
                self.mesh,
                scene.meshes.len()
            )));
        }
        Ok(())
    }

    fn post_step(&mut self, scene: &mut Scene, outcome: &StepOutcome) -> Result<HookFlow> {
        if outcome.step % self.every == 0 {
            let (force, torque) = outcome.mesh_wrenches[self.mesh];
            self.rows.push(WrenchSample {
                t: outcome.t,
                position: scene.meshes[self.mesh].pose_pos,
                force,
                torque,
            });
        }
        Ok(HookFlow::Continue)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct WheelRigParams {
    /// Index of the wheel mesh in `scene.meshes`.
    pub mesh: usize,
    /// Unit rail direction the carriage slides along, world frame.
    pub drive: Vector3<f64>,
    /// Unit direction sinkage is measured against, normal to the rails.
    pub up: Vector3<f64>,
    /// Spin rate about the axle, rad/s; positive rolls toward `drive`.
    pub omega: f64,
    /// `Some(v)`: the carriage is towed at v m/s. `None`: the terrain
    /// reaction drives it.
    pub drive_speed: Option<f64>,
    /// Free sinkage along `up` when true, hub height locked when false.
    pub free_vertical: bool,
    /// Carriage mass felt by the free translations, kg. The load the wheel
    /// presses into the bed is this mass under the scene gravity.
    pub effective_mass: f64,
    pub gravity: Vector3<f64>,
    /// Integrator step, s; must match the run's step config.
    pub time_step: f64,
    /// Steps between trajectory samples.
    pub log_every: u64,
}

#[derive(Clone, Copy, Debug)]
pub struct WheelSample {
    pub t: f64,
    /// Hub position, world frame, m.
    pub position: Vector3<f64>,
    /// Carriage velocity, world frame, m/s.
    pub velocity: Vector3<f64>,
    /// Reaction force on the wheel, N.
    pub force: Vector3<f64>,
}

/// Single-wheel test rig: the mesh spins at a commanded rate about its axle
/// while the carriage it hangs from slides on rails. Drive and vertical
/// translation are prescribed or integrated from the terrain reaction with
/// the carriage's effective mass; lateral motion and steering stay locked.
pub struct WheelRig {
    params: WheelRigParams,
    spin_axis: Vector3<f64>,
    v_drive: f64,
    v_up: f64,
    claimed: bool,
    pub samples: Vec<WheelSample>,
}

impl WheelRig {
    pub fn new(params: WheelRigParams) -> Result<Self> {
        if (params.drive.norm() - 1.0).abs() > 1e-9 || (params.up.norm() - 1.0).abs() > 1e-9 {
            return Err(Error::Param("rig axes must be unit vectors".into()));
        }
        if params.drive.dot(&params.up).abs() > 1e-9 {
            return Err(Error::Param("rig drive and up axes must be orthogonal".into()));
        }
        if !(params.effective_mass > 0.0) {
            return Err(Error::Param(format!(
                "rig effective mass must be positive, got {}",
                params.effective_mass
            )));
        }
        if !(params.time_step > 0.0) || !params.omega.is_finite() {
            return Err(Error::Param("rig time step or spin rate is not usable".into()));
        }
        let spin_axis = params.up.cross(&params.drive);
        Ok(Self {
            v_drive: params.drive_speed.unwrap_or(0.0),
            v_up: 0.0,
            claimed: false,
            samples: Vec::new(),
            params,
            spin_axis,
        })
    }

    pub fn velocity(&self) -> Vector3<f64> {
        self.params.drive * self.v_drive + self.params.up * self.v_up
    }

    /// (time, hub position) pairs in the shape `measure_slip` takes.
    pub fn trajectory(&self) -> Vec<(f64, Vector3<f64>)> {
        self.samples.iter().map(|s| (s.t, s.position)).collect()
    }
}

impl StepHook for WheelRig {
    fn pre_step(&mut self, scene: &mut Scene, _step: u64, _t: f64) -> Result<()> {
        let p = &self.params;
        if !self.claimed {
            if p.mesh >= scene.meshes.len() {
                return Err(Error::Param(format!(
                    "wheel rig drives mesh {} but the scene has {}",
                    p.mesh,
                    scene.meshes.len()
                )));
            }
            scene.meshes[p.mesh].motion = MotionSpec::Driven;
            self.claimed = true;
        }
        let body = &mut scene.meshes[p.mesh];
        body.lin_vel = self.velocity();
        body.ang_vel = self.spin_axis * p.omega;
        Ok(())
    }

    fn post_step(&mut self, scene: &mut Scene, outcome: &StepOutcome) -> Result<HookFlow> {
        let p = &self.params;
        let (force, _) = outcome.mesh_wrenches[p.mesh];
        let accel = p.gravity + force / p.effective_mass;
        if p.drive_speed.is_none() {
            self.v_drive += p.time_step * accel.dot(&p.drive);
        }
        if p.free_vertical {
            self.v_up += p.time_step * accel.dot(&p.up);
        }
        if !(self.v_drive.is_finite() && self.v_up.is_finite()) {
            return Err(Error::Scenario(format!(
                "wheel carriage velocity went non-finite at step {}",
                outcome.step
            )));
        }
        if outcome.step % p.log_every == 0 {
            self.samples.push(WheelSample {
                t: outcome.t,
                position: scene.meshes[p.mesh].pose_pos,
                velocity: self.velocity(),
                force,
            });
        }
        Ok(HookFlow::Continue)
    }
}
