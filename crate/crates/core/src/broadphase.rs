//! Margin-enlarged uniform-grid broad phase. The produced contact set lists
//! every candidate pair whose enlarged geometries intersect, so the force
//! pass can run several steps against one set without missing a contact, as
//! long as no body exceeds the speed bound the margin was derived from.

use std::collections::HashMap;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::boundary::closest_point_triangle;
use crate::contact::{ContactKey, ContactRecord, GeomId};
use crate::scene::{Scene, StateSnapshot};
use crate::{Error, Result};

/// The active candidate set the force pass iterates over.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct ContactSet {
    /// Sorted by canonical key, no duplicates, no intra-clump pairs.
    pub records: Vec<ContactRecord>,
    /// Monotone counter distinguishing rebuilds.
    pub generation: u64,
    /// Margin the set was built with, m.
    pub margin_used: f64,
    /// Step index of the states the set was built from.
    pub state_stamp: u64,
}

impl ContactSet {
    pub fn find(&self, key: ContactKey) -> Option<&ContactRecord> {
        self.records
            .binary_search_by(|r| r.key.cmp(&key))
            .ok()
            .map(|i| &self.records[i])
    }
}

/// Enlargement that keeps a pair detectable across a full deferral window:
/// two bodies closing at the speed bound for `cd_every` steps, times a safety
/// factor.
pub fn compute_margin(v_max: f64, h: f64, cd_every: u32, safety: f64) -> f64 {
    debug_assert!(v_max > 0.0 && h > 0.0 && cd_every >= 1 && safety >= 1.0);
    safety * 2.0 * v_max * h * cd_every as f64
}

struct WorldSphere {
    center: Vector3<f64>,
    radius: f64,
    clump: u32,
    comp: u32,
}

#[inline]
fn cell_of(p: Vector3<f64>, origin: Vector3<f64>, inv_cell: f64) -> (i64, i64, i64) {
    (
        ((p.x - origin.x) * inv_cell).floor() as i64,
        ((p.y - origin.y) * inv_cell).floor() as i64,
        ((p.z - origin.z) * inv_cell).floor() as i64,
    )
}

/// Builds the candidate set from a state snapshot.
///
/// `scene` supplies the immutable side (templates, mesh topology, grid,
/// planes); every pose comes from `snap`, so a producer thread can build
/// sets while the dynamics side keeps mutating its own scene copy.
///
/// Records are emitted ordered by canonical key. A sphere pair is found
/// exactly once: while processing its lower-key sphere, whose center cell
/// owns the pair and whose 27-cell neighborhood must contain the partner
/// because `cell_size ≥ 2·max_radius + margin`.
pub fn build_contact_set(
    scene: &Scene,
    snap: &StateSnapshot,
    margin: f64,
    generation: u64,
) -> Result<ContactSet> {
    let grid = &scene.grid;
    let max_r = scene.max_sphere_radius();
    if grid.cell_size < 2.0 * max_r + margin {
        return Err(Error::Param(format!(
            "grid cell_size {} is smaller than 2·max_radius + margin = {}",
            grid.cell_size,
            2.0 * max_r + margin
        )));
    }
    assert_eq!(snap.clump_poses.len(), scene.clumps.len());

    let mut spheres = Vec::new();
    for (ci, state) in scene.clumps.iter().enumerate() {
        let (pos, rot) = snap.clump_poses[ci];
        let template = &scene.templates[state.template_id];
        for (k, comp) in template.components.iter().enumerate() {
            spheres.push(WorldSphere {
                center: pos + rot * comp.offset,
                radius: comp.radius,
                clump: ci as u32,
                comp: k as u32,
            });
        }
    }

    let origin = grid.domain.min;
    let inv_cell = 1.0 / grid.cell_size;
    let mut cells: HashMap<(i64, i64, i64), Vec<u32>> = HashMap::new();
    for (i, s) in spheres.iter().enumerate() {
        if !grid.domain.contains(s.center) {
            return Err(Error::OutOfDomain {
                clump: s.clump as usize,
            });
        }
        cells
            .entry(cell_of(s.center, origin, inv_cell))
            .or_default()
            .push(i as u32);
    }

    // Triangles are binned into every cell their world AABB overlaps; the
    // sphere-side 27-cell scan then covers any surface point within
    // radius + margin.
    let mut facet_cells: HashMap<(i64, i64, i64), Vec<(u32, u32)>> = HashMap::new();
    let mut world_tris: Vec<Vec<[Vector3<f64>; 3]>> = Vec::with_capacity(scene.meshes.len());
    for (bi, body) in scene.meshes.iter().enumerate() {
        let (pos, rot) = snap.mesh_poses[bi];
        let mut tris = Vec::with_capacity(body.triangles.len());
        for (ti, idx) in body.triangles.iter().enumerate() {
            let tri = [
                pos + rot * body.vertices[idx[0] as usize],
                pos + rot * body.vertices[idx[1] as usize],
                pos + rot * body.vertices[idx[2] as usize],
            ];
            let lo = tri[0].inf(&tri[1]).inf(&tri[2]);
            let hi = tri[0].sup(&tri[1]).sup(&tri[2]);
            let c_lo = cell_of(lo, origin, inv_cell);
            let c_hi = cell_of(hi, origin, inv_cell);
            for x in c_lo.0..=c_hi.0 {
                for y in c_lo.1..=c_hi.1 {
                    for z in c_lo.2..=c_hi.2 {
                        facet_cells.entry((x, y, z)).or_default().push((bi as u32, ti as u32));
                    }
                }
            }
            tris.push(tri);
        }
        world_tris.push(tris);
    }

    let mut records = Vec::new();
    let mut partners: Vec<u32> = Vec::new();
    let mut facet_partners: Vec<(u32, u32)> = Vec::new();
    for (i, s) in spheres.iter().enumerate() {
        let own = cell_of(s.center, origin, inv_cell);
        let key_s = GeomId::Sphere {
            clump: s.clump,
            comp: s.comp,
        };

        partners.clear();
        facet_partners.clear();
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    let key = (own.0 + dx, own.1 + dy, own.2 + dz);
                    if let Some(list) = cells.get(&key) {
                        for &j in list {
                            if j as usize <= i {
                                continue;
                            }
                            let t = &spheres[j as usize];
                            if t.clump == s.clump {
                                continue;
                            }
                            let reach = s.radius + t.radius + margin;
                            if (t.center - s.center).norm_squared() < reach * reach {
                                partners.push(j);
                            }
                        }
                    }
                    if let Some(list) = facet_cells.get(&key) {
                        facet_partners.extend_from_slice(list);
                    }
                }
            }
        }

        partners.sort_unstable();
        for &j in &partners {
            let t = &spheres[j as usize];
            records.push(ContactRecord::fresh(ContactKey {
                a: key_s,
                b: GeomId::Sphere {
                    clump: t.clump,
                    comp: t.comp,
                },
            }));
        }

        facet_partners.sort_unstable();
        facet_partners.dedup();
        let reach = s.radius + margin;
        for &(bi, ti) in &facet_partners {
            let tri = &world_tris[bi as usize][ti as usize];
            let (cp, _) = closest_point_triangle(s.center, tri[0], tri[1], tri[2]);
            if (cp - s.center).norm_squared() < reach * reach {
                records.push(ContactRecord::fresh(ContactKey {
                    a: key_s,
                    b: GeomId::Facet { body: bi, tri: ti },
                }));
            }
        }

        for (pi, plane) in scene.planes.iter().enumerate() {
            let point = snap.plane_points[pi];
            let dist = (s.center - point).dot(&plane.normal);
            if dist < reach {
                records.push(ContactRecord::fresh(ContactKey {
                    a: key_s,
                    b: GeomId::Plane { plane: pi as u32 },
                }));
            }
        }
    }

    debug_assert!(records.windows(2).all(|w| w[0].key < w[1].key));
    Ok(ContactSet {
        records,
        generation,
        margin_used: margin,
        state_stamp: snap.stamp,
    })
}

/// Copies tangential history from a previous set into a freshly built one for
/// every key present in both. New keys keep zeroed history; vanished keys are
/// dropped with their history.
pub fn adopt_history(new_set: &mut ContactSet, prev: &ContactSet) {
    let mut pi = 0;
    for rec in &mut new_set.records {
        while pi < prev.records.len() && prev.records[pi].key < rec.key {
            pi += 1;
        }
        if pi < prev.records.len() && prev.records[pi].key == rec.key {
            rec.u_t = prev.records[pi].u_t;
            rec.alive = prev.records[pi].alive;
        }
    }
}
