//! Parametric meshes for the bundled scenarios: penetrometer cone, pouring
//! funnel, and a grousered wheel. Generators emit vertex/triangle lists that
//! feed [`crate::boundary::TriMeshBody`] directly or can be written as OBJ.

use nalgebra::Vector3;

use crate::Result;

pub type MeshData = (Vec<Vector3<f64>>, Vec<[u32; 3]>);

fn ring(radius: f64, z: f64, segments: u32) -> Vec<Vector3<f64>> {
    (0..segments)
        .map(|k| {
            let phi = 2.0 * std::f64::consts::PI * k as f64 / segments as f64;
            Vector3::new(radius * phi.cos(), radius * phi.sin(), z)
        })
        .collect()
}

/// Closed band between two rings of equal segment count.
fn band(tris: &mut Vec<[u32; 3]>, lower_start: u32, upper_start: u32, segments: u32) {
    for k in 0..segments {
        let k1 = (k + 1) % segments;
        tris.push([lower_start + k, lower_start + k1, upper_start + k]);
        tris.push([lower_start + k1, upper_start + k1, upper_start + k]);
    }
}

/// Fan from a center vertex to a ring.
fn fan(tris: &mut Vec<[u32; 3]>, center: u32, ring_start: u32, segments: u32, flip: bool) {
    for k in 0..segments {
        let k1 = (k + 1) % segments;
        if flip {
            tris.push([center, ring_start + k1, ring_start + k]);
        } else {
            tris.push([center, ring_start + k, ring_start + k1]);
        }
    }
}

/// Penetrometer tip: a downward-pointing cone with the apex at the local
/// origin, opening to `base_radius` at the given full apex angle, topped by a
/// cylindrical shaft of the same radius and a closed top disc.
pub struct ConeSpec {
    pub base_radius: f64,
    /// Full apex angle in degrees (the paper-style penetrometer uses 60).
    pub apex_angle_deg: f64,
    pub shaft_length: f64,
    pub segments: u32,
}

pub fn cone_mesh(spec: &ConeSpec) -> MeshData {
    let half = (spec.apex_angle_deg * 0.5).to_radians();
    let cone_height = spec.base_radius / half.tan();
    let mut verts = vec![Vector3::zeros()];
    let base_start = verts.len() as u32;
    verts.extend(ring(spec.base_radius, cone_height, spec.segments));
    let top_start = verts.len() as u32;
    verts.extend(ring(spec.base_radius, cone_height + spec.shaft_length, spec.segments));
    let top_center = verts.len() as u32;
    verts.push(Vector3::new(0.0, 0.0, cone_height + spec.shaft_length));

    let mut tris = Vec::new();
    fan(&mut tris, 0, base_start, spec.segments, true);
    band(&mut tris, base_start, top_start, spec.segments);
    fan(&mut tris, top_center, top_start, spec.segments, false);
    (verts, tris)
}

/// Open conical funnel shell: aperture ring of `aperture_radius` at the local
/// origin widening to `top_radius` at `height`.
pub struct FunnelSpec {
    pub aperture_radius: f64,
    pub top_radius: f64,
    pub height: f64,
    pub segments: u32,
}

pub fn funnel_mesh(spec: &FunnelSpec) -> MeshData {
    let mut verts = ring(spec.aperture_radius, 0.0, spec.segments);
    verts.extend(ring(spec.top_radius, spec.height, spec.segments));
    let mut tris = Vec::new();
    band(&mut tris, 0, spec.segments, spec.segments);
    (verts, tris)
}

/// Grousered wheel: a closed cylinder spinning about the local y axis with
/// rectangular tread bars across the width.
pub struct WheelSpec {
    pub radius: f64,
    pub width: f64,
    pub segments: u32,
    pub grousers: u32,
    pub grouser_height: f64,
    pub grouser_thickness: f64,
}

pub fn wheel_mesh(spec: &WheelSpec) -> MeshData {
    let hw = spec.width * 0.5;
    let mut verts = Vec::new();
    let mut tris = Vec::new();

    // Cylinder rings lie in x–z planes at y = ±hw.
    let circle =
        |k: u32| 2.0 * std::f64::consts::PI * k as f64 / spec.segments as f64;
    let left_start = verts.len() as u32;
    for k in 0..spec.segments {
        let phi = circle(k);
        verts.push(Vector3::new(spec.radius * phi.cos(), -hw, spec.radius * phi.sin()));
    }
    let right_start = verts.len() as u32;
    for k in 0..spec.segments {
        let phi = circle(k);
        verts.push(Vector3::new(spec.radius * phi.cos(), hw, spec.radius * phi.sin()));
    }
    band(&mut tris, left_start, right_start, spec.segments);

    let left_center = verts.len() as u32;
    verts.push(Vector3::new(0.0, -hw, 0.0));
    fan(&mut tris, left_center, left_start, spec.segments, false);
    let right_center = verts.len() as u32;
    verts.push(Vector3::new(0.0, hw, 0.0));
    fan(&mut tris, right_center, right_start, spec.segments, true);

    for g in 0..spec.grousers {
        let phi = 2.0 * std::f64::consts::PI * g as f64 / spec.grousers as f64;
        let radial = Vector3::new(phi.cos(), 0.0, phi.sin());
        let tangent = Vector3::new(-phi.sin(), 0.0, phi.cos());
        let half_t = spec.grouser_thickness * 0.5;
        let base = verts.len() as u32;
        for &dr in &[0.0, spec.grouser_height] {
            for &dy in &[-hw, hw] {
                for &dt in &[-half_t, half_t] {
                    verts.push(radial * (spec.radius + dr) + Vector3::new(0.0, dy, 0.0) + tangent * dt);
                }
            }
        }
        // Vertex order per bar: index = 4*radial + 2*side + tangential.
        let quads = [
            [0u32, 1, 3, 2], // inner face, buried in the rim
            [4, 6, 7, 5],    // outer face
            [0, 2, 6, 4],
            [1, 5, 7, 3],
            [0, 4, 5, 1],
            [2, 3, 7, 6],
        ];
        for q in quads {
            tris.push([base + q[0], base + q[1], base + q[2]]);
            tris.push([base + q[0], base + q[2], base + q[3]]);
        }
    }

    (verts, tris)
}

/// Writes a vertex/triangle list as ASCII Wavefront OBJ.
pub fn write_obj(path: &std::path::Path, mesh: &MeshData) -> Result<()> {
    use std::io::Write;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for v in &mesh.0 {
        writeln!(out, "v {} {} {}", v.x, v.y, v.z)?;
    }
    for t in &mesh.1 {
        writeln!(out, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1)?;
    }
    out.flush()?;
    Ok(())
}
