//! Boundary bodies: analytic planes and kinematic triangle meshes with
//! prescribed motion, plus the sphere–triangle narrow phase and aggregated
//! wrench readback used for external coupling.

use nalgebra::{UnitQuaternion, UnitVector3, Vector3};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Piecewise definition of a boundary's motion. Velocities are global-frame;
/// angular velocity acts about the body's current reference point.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub enum MotionSpec {
    /// No motion.
    Static,
    /// Same velocities forever.
    ConstantVelocity {
        linear: Vector3<f64>,
        angular: Vector3<f64>,
    },
    /// Constant-velocity segments; motion is undefined past the last end
    /// time, which is an error when queried.
    Segments(Vec<MotionSegment>),
    /// Velocities are written by an external driver before each step; the
    /// motion itself is always defined.
    Driven,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct MotionSegment {
    /// Segment is active for t < t_end.
    pub t_end: f64,
    pub linear: Vector3<f64>,
    pub angular: Vector3<f64>,
}

impl MotionSpec {
    /// Velocities prescribed at time `t`, or `None` for `Driven`.
    fn velocities_at(&self, t: f64, body: usize) -> Result<Option<(Vector3<f64>, Vector3<f64>)>> {
        match self {
            MotionSpec::Static => Ok(Some((Vector3::zeros(), Vector3::zeros()))),
            MotionSpec::ConstantVelocity { linear, angular } => Ok(Some((*linear, *angular))),
            MotionSpec::Segments(segments) => {
                for seg in segments {
                    if t < seg.t_end {
                        return Ok(Some((seg.linear, seg.angular)));
                    }
                }
                Err(Error::MotionUndefined { body, t })
            }
            MotionSpec::Driven => Ok(None),
        }
    }
}

/// Infinite analytic plane. Material sits on the side the normal points to.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PlaneBoundary {
    /// A point on the plane, m.
    pub point: Vector3<f64>,
    /// Unit outward normal.
    pub normal: UnitVector3<f64>,
    pub material_id: usize,
    pub motion: MotionSpec,
    /// Current translational velocity, kept in sync by `advance_boundary`.
    pub velocity: Vector3<f64>,
}

impl PlaneBoundary {
    pub fn fixed(point: Vector3<f64>, normal: Vector3<f64>, material_id: usize) -> Self {
        PlaneBoundary {
            point,
            normal: UnitVector3::new_normalize(normal),
            material_id,
            motion: MotionSpec::Static,
            velocity: Vector3::zeros(),
        }
    }
}

/// Kinematic triangle-mesh body. Vertices are stored in the body frame;
/// `pose_pos`/`pose_rot` place it in the world. The mesh never responds to
/// forces itself; scenarios prescribe its motion and read the wrench back.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TriMeshBody {
    pub vertices: Vec<Vector3<f64>>,
    pub triangles: Vec<[u32; 3]>,
    pub pose_pos: Vector3<f64>,
    pub pose_rot: UnitQuaternion<f64>,
    /// Current velocities, world frame; angular about `pose_pos`.
    pub lin_vel: Vector3<f64>,
    pub ang_vel: Vector3<f64>,
    pub motion: MotionSpec,
    pub material_id: usize,
    /// Radius of the body-frame bounding ball about the pose origin, m.
    pub bounding_radius: f64,
}

impl TriMeshBody {
    pub fn new(
        vertices: Vec<Vector3<f64>>,
        triangles: Vec<[u32; 3]>,
        material_id: usize,
    ) -> Result<Self> {
        for (k, tri) in triangles.iter().enumerate() {
            for &i in tri {
                if i as usize >= vertices.len() {
                    return Err(Error::UnsupportedGeometry(format!(
                        "triangle {k} references vertex {i} outside the table"
                    )));
                }
            }
            let [a, b, c] = [
                vertices[tri[0] as usize],
                vertices[tri[1] as usize],
                vertices[tri[2] as usize],
            ];
            if (b - a).cross(&(c - a)).norm() == 0.0 {
                return Err(Error::UnsupportedGeometry(format!(
                    "triangle {k} is degenerate (zero area)"
                )));
            }
        }
        let bounding_radius = vertices.iter().map(|v| v.norm()).fold(0.0, f64::max);
        Ok(TriMeshBody {
            vertices,
            triangles,
            pose_pos: Vector3::zeros(),
            pose_rot: UnitQuaternion::identity(),
            lin_vel: Vector3::zeros(),
            ang_vel: Vector3::zeros(),
            motion: MotionSpec::Static,
            material_id,
            bounding_radius,
        })
    }

    /// World-space corners of triangle `tri`.
    pub fn world_triangle(&self, tri: usize) -> [Vector3<f64>; 3] {
        let idx = self.triangles[tri];
        [
            self.pose_pos + self.pose_rot * self.vertices[idx[0] as usize],
            self.pose_pos + self.pose_rot * self.vertices[idx[1] as usize],
            self.pose_pos + self.pose_rot * self.vertices[idx[2] as usize],
        ]
    }

    /// Velocity of the material point currently at world position `p`.
    pub fn point_velocity(&self, p: Vector3<f64>) -> Vector3<f64> {
        self.lin_vel + self.ang_vel.cross(&(p - self.pose_pos))
    }

    /// Conservative bound on any surface point's speed.
    pub fn max_surface_speed(&self) -> f64 {
        self.lin_vel.norm() + self.ang_vel.norm() * self.bounding_radius
    }
}

/// Loads the triangles-only Wavefront OBJ subset: `v` records and 3-index `f`
/// records. Normal/texture indices inside face tokens are ignored; `vn`/`vt`/
/// comment lines are skipped; quads and n-gons are rejected.
pub fn load_mesh(path: &std::path::Path, material_id: usize) -> Result<TriMeshBody> {
    let text = std::fs::read_to_string(path)?;
    parse_obj(&text, material_id)
}

pub fn parse_obj(text: &str, material_id: usize) -> Result<TriMeshBody> {
    let mut vertices = Vec::new();
    let mut triangles = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let mut tokens = line.split_whitespace();
        match tokens.next() {
            Some("v") => {
                let mut xyz = [0.0f64; 3];
                for slot in &mut xyz {
                    *slot = tokens
                        .next()
                        .and_then(|t| t.parse().ok())
                        .ok_or_else(|| {
                            Error::Format(format!("line {}: malformed vertex", lineno + 1))
                        })?;
                }
                vertices.push(Vector3::new(xyz[0], xyz[1], xyz[2]));
            }
            Some("f") => {
                let corners: Vec<&str> = tokens.collect();
                if corners.len() != 3 {
                    return Err(Error::UnsupportedGeometry(format!(
                        "line {}: face with {} vertices; only triangles are supported",
                        lineno + 1,
                        corners.len()
                    )));
                }
                let mut idx = [0u32; 3];
                for (slot, tok) in idx.iter_mut().zip(&corners) {
                    let vi: i64 = tok.split('/').next().unwrap_or("").parse().map_err(|_| {
                        Error::Format(format!("line {}: malformed face index", lineno + 1))
                    })?;
                    if vi < 1 {
                        return Err(Error::UnsupportedGeometry(format!(
                            "line {}: only positive 1-based indices are supported",
                            lineno + 1
                        )));
                    }
                    *slot = (vi - 1) as u32;
                }
                triangles.push(idx);
            }
            _ => {}
        }
    }
    TriMeshBody::new(vertices, triangles, material_id)
}

/// Which feature of the triangle the closest point lies on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TriRegion {
    Face,
    Edge(u8),
    Vertex(u8),
}

/// Closest point on a triangle to `p`, with the region it falls in.
/// Edge k connects vertices k and (k+1)%3.
pub fn closest_point_triangle(
    p: Vector3<f64>,
    a: Vector3<f64>,
    b: Vector3<f64>,
    c: Vector3<f64>,
) -> (Vector3<f64>, TriRegion) {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;

    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return (a, TriRegion::Vertex(0));
    }

    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return (b, TriRegion::Vertex(1));
    }

    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return (a + ab * v, TriRegion::Edge(0));
    }

    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return (c, TriRegion::Vertex(2));
    }

    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return (a + ac * w, TriRegion::Edge(2));
    }

    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return (b + (c - b) * w, TriRegion::Edge(1));
    }

    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    (a + ab * v + ac * w, TriRegion::Face)
}

/// Surface point of a sphere–triangle query, if the sphere (enlarged to
/// `radius`, which may include a margin) reaches the triangle. The geometric
/// normal points from the surface toward the sphere center.
pub fn sphere_triangle_contact(
    center: Vector3<f64>,
    radius: f64,
    tri: &[Vector3<f64>; 3],
) -> Result<Option<SurfaceHit>> {
    let (point, region) = closest_point_triangle(center, tri[0], tri[1], tri[2]);
    let d = center - point;
    let dist = d.norm();
    if dist >= radius {
        return Ok(None);
    }
    if dist == 0.0 {
        return Err(Error::DegenerateNormal(format!(
            "sphere center {center:?} lies exactly on the triangle"
        )));
    }
    Ok(Some(SurfaceHit {
        point,
        normal: d / dist,
        delta_n: radius - dist,
        region,
    }))
}

/// Result of a narrow-phase query against a boundary surface.
#[derive(Clone, Copy, Debug)]
pub struct SurfaceHit {
    /// Closest point on the surface, m.
    pub point: Vector3<f64>,
    /// Unit normal from the surface toward the sphere center.
    pub normal: Vector3<f64>,
    /// Penetration of the (possibly margin-enlarged) sphere, m.
    pub delta_n: f64,
    pub region: TriRegion,
}

/// Sphere–plane query under the same conventions as the triangle case.
pub fn sphere_plane_contact(
    center: Vector3<f64>,
    radius: f64,
    plane: &PlaneBoundary,
) -> Option<SurfaceHit> {
    let dist = (center - plane.point).dot(&plane.normal);
    let delta_n = radius - dist;
    if delta_n < 0.0 {
        return None;
    }
    Some(SurfaceHit {
        point: center - plane.normal.into_inner() * dist,
        normal: plane.normal.into_inner(),
        delta_n,
        region: TriRegion::Face,
    })
}

/// Advances a mesh body from `t` to `t + h` under its prescribed motion and
/// records the velocities so contact kinematics see the moving surface.
pub fn advance_mesh(body: &mut TriMeshBody, index: usize, t: f64, h: f64) -> Result<()> {
    if let Some((lin, ang)) = body.motion.velocities_at(t, index)? {
        body.lin_vel = lin;
        body.ang_vel = ang;
    }
    body.pose_pos += body.lin_vel * h;
    let ang = body.ang_vel * h;
    if ang.norm_squared() > 0.0 {
        let dq = UnitQuaternion::from_scaled_axis(ang);
        body.pose_rot = UnitQuaternion::new_normalize((dq * body.pose_rot).into_inner());
    }
    Ok(())
}

/// Advances a plane boundary; planes only translate.
pub fn advance_plane(plane: &mut PlaneBoundary, index: usize, t: f64, h: f64) -> Result<()> {
    if let Some((lin, _)) = plane.motion.velocities_at(t, index)? {
        plane.velocity = lin;
    }
    plane.point += plane.velocity * h;
    Ok(())
}
