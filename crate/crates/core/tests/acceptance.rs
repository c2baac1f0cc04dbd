//! End-to-end acceptance checks: contact fidelity, conservation, pipeline
//! equivalence and throughput, terrain scenarios, simulant construction, and
//! the geometric oracle suite. Each test prints one verdict line.

use std::collections::BTreeSet;

use demgrain::broadphase::{build_contact_set, ContactSet};
use demgrain::contact::{ContactKey, GeomId};
use demgrain::model::SphereComponent;
use demgrain::nalgebra::{Matrix3, SymmetricEigen, UnitQuaternion, Vector3};
use demgrain::scene::{Aabb, StateSnapshot};
use demgrain::scenekit::{SettleParams, SimulantType};
use demgrain::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn verdict(name: &str, ok: bool, detail: &str) {
    println!(
        "[acceptance] {name}: {} ({detail})",
        if ok { "PASS" } else { "FAIL" }
    );
    assert!(ok, "{name}: {detail}");
}

fn grain(young_modulus: f64) -> Material {
    Material {
        young_modulus,
        poisson: 0.3,
        friction: 0.4,
        cor: 0.5,
        density: 2600.0,
    }
}

fn ball_template(radius: f64, materials: &[Material]) -> ClumpTemplate {
    build_clump_template(
        &[SphereComponent {
            offset: Vector3::zeros(),
            radius,
            material_id: 0,
        }],
        materials,
        radius / 10.0,
    )
    .unwrap()
}

fn one_type_spec(row: usize) -> SimulantSpec {
    let mut spec = SimulantSpec::builtin();
    let keep = spec.types.remove(row);
    spec.types = vec![SimulantType { weight: 1.0, ..keep }];
    spec
}

fn lockstep(cd_every: u32, v_max: f64) -> PipelineConfig {
    PipelineConfig {
        cd_every,
        v_max,
        safety: 1.5,
        mode: PipelineMode::Lockstep,
    }
}

fn momenta(scene: &Scene) -> (Vector3<f64>, Vector3<f64>) {
    let mut p = Vector3::zeros();
    let mut l = Vector3::zeros();
    for c in &scene.clumps {
        let t = &scene.templates[c.template_id];
        p += t.mass * c.lin_vel;
        l += t.mass * c.position.cross(&c.lin_vel);
        let iw = Vector3::new(
            t.inertia.x * c.ang_vel.x,
            t.inertia.y * c.ang_vel.y,
            t.inertia.z * c.ang_vel.z,
        );
        l += c.orientation * iw;
    }
    (p, l)
}

/// Strictly penetrating pairs at the scene's current poses: sphere-sphere
/// across clumps plus sphere-plane.
fn penetrating_pairs(scene: &Scene) -> Vec<ContactKey> {
    let mut spheres = Vec::new();
    for (ci, st) in scene.clumps.iter().enumerate() {
        let t = &scene.templates[st.template_id];
        for (k, c) in t.components.iter().enumerate() {
            spheres.push((st.component_center(c), c.radius, ci as u32, k as u32));
        }
    }
    let mut keys = Vec::new();
    for i in 0..spheres.len() {
        for j in i + 1..spheres.len() {
            if spheres[i].2 == spheres[j].2 {
                continue;
            }
            let reach = spheres[i].1 + spheres[j].1;
            if (spheres[j].0 - spheres[i].0).norm_squared() < reach * reach {
                keys.push(ContactKey::new(
                    GeomId::Sphere {
                        clump: spheres[i].2,
                        comp: spheres[i].3,
                    },
                    GeomId::Sphere {
                        clump: spheres[j].2,
                        comp: spheres[j].3,
                    },
                ));
            }
        }
    }
    for &(center, radius, clump, comp) in &spheres {
        for (pi, plane) in scene.planes.iter().enumerate() {
            if (center - plane.point).dot(&plane.normal) < radius {
                keys.push(ContactKey::new(
                    GeomId::Sphere { clump, comp },
                    GeomId::Plane { plane: pi as u32 },
                ));
            }
        }
    }
    keys
}

#[test]
fn head_on_rebound_ratio_matches_the_material() {
    let mat = grain(1e9);
    let r = 0.005;
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for &v in &[0.1, 0.5, 1.0, 2.0] {
        let domain = Aabb::new(Vector3::repeat(-0.1), Vector3::repeat(0.1));
        let pipe = lockstep(1, 3.0);
        let margin = pipe.margin(h);
        let mut scene = Scene::new(
            vec![mat],
            Vector3::zeros(),
            GridConfig::fit(r, margin, domain),
        );
        let tid = scene.add_template(ball_template(r, &[mat]));
        let gap = 1e-4;
        let mut a = ClumpState::at_rest(Vector3::new(-(r + gap / 2.0), 0.0, 0.0), tid);
        a.lin_vel = Vector3::new(v / 2.0, 0.0, 0.0);
        let mut b = ClumpState::at_rest(Vector3::new(r + gap / 2.0, 0.0, 0.0), tid);
        b.lin_vel = Vector3::new(-v / 2.0, 0.0, 0.0);
        scene.add_clump(a);
        scene.add_clump(b);

        let n = ((gap / v + 6e-4) / h).ceil() as u64;
        let step = StepConfig { h };
        run(
            &mut scene,
            0,
            n,
            &step,
            &pipe,
            &HertzMindlin,
            None,
            &mut NoHook,
        )
        .unwrap();

        let sep = scene.clumps[1].position.x - scene.clumps[0].position.x;
        assert!(
            sep > 2.0 * r + gap / 4.0,
            "impact at {v} m/s should have rebounded clear, separation {sep}"
        );
        let rebound = scene.clumps[1].lin_vel.x - scene.clumps[0].lin_vel.x;
        let ratio = rebound / v;
        println!("  impact {v:.1} m/s -> rebound ratio {ratio:.4}");
        worst = worst.max((ratio - 0.5).abs());
    }
    verdict(
        "head-on rebound ratio",
        worst < 0.05,
        &format!("worst deviation from 0.5 is {worst:.4} over 0.1-2 m/s"),
    );
}

#[test]
fn sliding_block_holds_at_twenty_degrees_and_slips_at_twenty_five() {
    // A single sphere with rotation suppressed through a huge moment of
    // inertia: pure translation makes the stick/slide threshold sharp.
    let run_incline = |alpha_deg: f64, t_end: f64| -> (Vec<(f64, f64, f64)>, f64) {
        let mat = grain(5e7);
        let r = 0.01;
        let h = 1e-5;
        let pipe = lockstep(10, 2.0);
        let margin = pipe.margin(h);
        let domain = Aabb::new(
            Vector3::new(-0.05, -0.05, -0.01),
            Vector3::new(0.45, 0.05, 0.05),
        );
        let alpha = alpha_deg.to_radians();
        let g = 9.81 * Vector3::new(alpha.sin(), 0.0, -alpha.cos());
        let mut scene = Scene::new(vec![mat], g, GridConfig::fit(r, margin, domain));
        let mut tmpl = ball_template(r, &[mat]);
        tmpl.inertia *= 1e8;
        let tid = scene.add_template(tmpl);
        scene.add_clump(ClumpState::at_rest(Vector3::new(0.0, 0.0, r), tid));
        scene
            .planes
            .push(PlaneBoundary::fixed(Vector3::zeros(), Vector3::z(), 0));

        let step = StepConfig { h };
        let mut track = Vec::new();
        let mut history: Option<ContactSet> = None;
        let chunks = 10u64;
        let total = (t_end / h).round() as u64;
        for c in 0..chunks {
            let (s, e) = (total * c / chunks, total * (c + 1) / chunks);
            let (_, set) = run(
                &mut scene,
                s,
                e,
                &step,
                &pipe,
                &HertzMindlin,
                history.as_ref(),
                &mut NoHook,
            )
            .unwrap();
            history = Some(set);
            let st = &scene.clumps[0];
            track.push((e as f64 * h, st.position.x, st.lin_vel.x));
        }
        (track, scene.clumps[0].ang_vel.norm())
    };

    let (hold, spin_hold) = run_incline(20.0, 2.0);
    let drift = hold.last().unwrap().1.abs();
    println!("  20 deg: drift {drift:.2e} m over 2 s, residual spin {spin_hold:.2e} rad/s");

    let (slide, _) = run_incline(25.0, 1.0);
    let (t0, _, v0) = slide[3];
    let (t1, _, v1) = slide[9];
    let a_meas = (v1 - v0) / (t1 - t0);
    let al = 25f64.to_radians();
    let a_th = 9.81 * (al.sin() - 0.4 * al.cos());
    let rel = (a_meas - a_th).abs() / a_th;
    println!("  25 deg: acceleration {a_meas:.4} vs {a_th:.4} m/s^2 ({:.2}%)", rel * 100.0);

    verdict(
        "stick below and slide above the friction angle",
        drift < 1e-3 && rel < 0.05,
        &format!("drift {drift:.2e} m, slide accel within {:.2}%", rel * 100.0),
    );
}

#[test]
fn frictional_soup_conserves_linear_and_angular_momentum() {
    struct ContactPeak(usize);
    impl StepHook for ContactPeak {
        fn post_step(&mut self, _s: &mut Scene, o: &StepOutcome) -> demgrain::Result<HookFlow> {
            self.0 = self.0.max(o.live_contacts);
            Ok(HookFlow::Continue)
        }
    }

    let mats = vec![grain(5e7)];
    let spec = one_type_spec(3);
    let templates = generate_ds_templates(&spec, &mats, 0).unwrap();
    let h = 2e-6;
    let pipe = lockstep(5, 2.0);
    let margin = pipe.margin(h);
    let max_r = templates[0]
        .components
        .iter()
        .map(|c| c.radius)
        .fold(0.0, f64::max);
    let domain = Aabb::new(Vector3::repeat(-0.5), Vector3::repeat(0.5));
    let mut scene = Scene::new(mats, Vector3::zeros(), GridConfig::fit(max_r, margin, domain));
    scene.templates = templates;

    let spacing = 0.0052;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for ix in 0..5 {
        for iy in 0..5 {
            for iz in 0..4 {
                let p = Vector3::new(
                    (ix as f64 - 2.0) * spacing,
                    (iy as f64 - 2.0) * spacing,
                    (iz as f64 - 1.5) * spacing,
                );
                let mut c = ClumpState::at_rest(p, 0);
                c.orientation = UnitQuaternion::from_scaled_axis(Vector3::new(
                    rng.gen_range(-3.0..3.0),
                    rng.gen_range(-3.0..3.0),
                    rng.gen_range(-3.0..3.0),
                ));
                c.lin_vel = Vector3::new(0.2, -0.1, 0.15)
                    + Vector3::new(
                        rng.gen_range(-0.5..0.5),
                        rng.gen_range(-0.5..0.5),
                        rng.gen_range(-0.5..0.5),
                    );
                c.ang_vel = Vector3::new(
                    rng.gen_range(-10.0..10.0),
                    rng.gen_range(-10.0..10.0),
                    rng.gen_range(-10.0..10.0),
                );
                scene.add_clump(c);
            }
        }
    }
    assert_eq!(scene.clumps.len(), 100);

    let (p0, l0) = momenta(&scene);
    let p_scale: f64 = scene
        .clumps
        .iter()
        .map(|c| scene.templates[c.template_id].mass * c.lin_vel.norm())
        .sum();
    let l_scale: f64 = scene
        .clumps
        .iter()
        .map(|c| {
            let t = &scene.templates[c.template_id];
            t.mass * c.position.cross(&c.lin_vel).norm()
                + (t.inertia.component_mul(&c.ang_vel)).norm()
        })
        .sum();

    let ke0 = scene.kinetic_energy();
    let mut peak = ContactPeak(0);
    let step = StepConfig { h };
    run(
        &mut scene,
        0,
        1000,
        &step,
        &pipe,
        &HertzMindlin,
        None,
        &mut peak,
    )
    .unwrap();
    let ke1 = scene.kinetic_energy();

    let (p1, l1) = momenta(&scene);
    let dp = (p1 - p0).norm() / p_scale;
    let dl = (l1 - l0).norm() / l_scale;
    println!(
        "  {} peak live contacts, KE {ke0:.3e} -> {ke1:.3e} J, dP {dp:.2e}, dL {dl:.2e}",
        peak.0
    );
    assert!(peak.0 > 5, "soup should actually collide, peak {}", peak.0);
    assert!(ke1 < ke0, "inelastic collisions should shed energy");
    verdict(
        "momentum conservation through frictional collisions",
        dp < 1e-9 && dl < 1e-6,
        &format!("relative drift per 1e3 steps: linear {dp:.2e}, angular {dl:.2e}"),
    );
}

/// A one-thousand-clump settling box shared by the two pipeline-equivalence
/// checks.
fn settling_box(n_target: usize, seed: u64) -> (Scene, f64) {
    let mats = vec![grain(1e7)];
    let spec = one_type_spec(3);
    let templates = generate_ds_templates(&spec, &mats, 0).unwrap();
    let bounding = templates[0].bounding_radius;
    let max_r = templates[0]
        .components
        .iter()
        .map(|c| c.radius)
        .fold(0.0, f64::max);
    let h = 8e-6;
    let pipe = lockstep(10, 3.0);
    let margin = pipe.margin(h);
    let domain = Aabb::new(
        Vector3::new(-0.08, -0.08, -0.01),
        Vector3::new(0.08, 0.08, 0.25),
    );
    let mut scene = Scene::new(
        mats,
        Vector3::new(0.0, 0.0, -9.81),
        GridConfig::fit(max_r, margin, domain),
    );
    scene.templates = templates;
    scene
        .planes
        .push(PlaneBoundary::fixed(Vector3::zeros(), Vector3::z(), 0));
    for (p, n) in [
        (Vector3::new(-0.03, 0.0, 0.0), Vector3::x()),
        (Vector3::new(0.03, 0.0, 0.0), -Vector3::x()),
        (Vector3::new(0.0, -0.03, 0.0), Vector3::y()),
        (Vector3::new(0.0, 0.03, 0.0), -Vector3::y()),
    ] {
        scene.planes.push(PlaneBoundary::fixed(p, n, 0));
    }

    let spacing = 2.05 * bounding;
    let lo = Vector3::new(-0.028, -0.028, bounding + 5e-4);
    let hi = Vector3::new(0.028, 0.028, 0.2);
    let mut sites = sample_hcp(Aabb::new(lo, hi), spacing);
    sites.truncate(n_target);
    assert!(sites.len() >= n_target, "spawn box too small: {}", sites.len());
    let seq = vec![0usize; sites.len()];
    spawn_batch(&mut scene, &sites, &seq, 0, 0, seed).unwrap();
    (scene, h)
}

fn states_identical(a: &Scene, b: &Scene) -> (bool, String) {
    for (k, (ca, cb)) in a.clumps.iter().zip(&b.clumps).enumerate() {
        let same = ca.position == cb.position
            && ca.orientation == cb.orientation
            && ca.lin_vel == cb.lin_vel
            && ca.ang_vel == cb.ang_vel;
        if !same {
            let dp = (ca.position - cb.position).norm();
            return (false, format!("clump {k} differs, |dx| = {dp:.3e} m"));
        }
        let bits = |v: &Vector3<f64>| [v.x.to_bits(), v.y.to_bits(), v.z.to_bits()];
        if bits(&ca.position) != bits(&cb.position) || bits(&ca.lin_vel) != bits(&cb.lin_vel) {
            return (false, format!("clump {k} differs in bit pattern only"));
        }
    }
    (true, "every pose, orientation and velocity bit-identical".into())
}

#[test]
fn pinned_pipeline_reproduces_lockstep_bitwise() {
    let (scene, h) = settling_box(1000, 11);
    let steps = 10_000u64;
    let step = StepConfig { h };
    let base = PipelineConfig {
        cd_every: 10,
        v_max: 3.0,
        safety: 1.5,
        mode: PipelineMode::Lockstep,
    };

    let mut a = scene.clone();
    let (stats_a, _) = run(
        &mut a,
        0,
        steps,
        &step,
        &base,
        &HertzMindlin,
        None,
        &mut NoHook,
    )
    .unwrap();

    let mut b = scene;
    let pinned = PipelineConfig {
        mode: PipelineMode::PipelinedPinned,
        ..base
    };
    let (stats_b, _) = run(
        &mut b,
        0,
        steps,
        &step,
        &pinned,
        &HertzMindlin,
        None,
        &mut NoHook,
    )
    .unwrap();

    println!(
        "  lockstep {} rebuilds, pinned {} rebuilds over {steps} steps",
        stats_a.rebuilds, stats_b.rebuilds
    );
    let (same, detail) = states_identical(&a, &b);
    verdict("pinned pipeline vs lockstep", same, &detail);
}

#[test]
fn twenty_step_rebuild_cadence_misses_nothing_and_stays_on_course() {
    let (scene, h) = settling_box(150, 23);
    let steps = 5_000u64;
    let step = StepConfig { h };

    let mut a = scene.clone();
    let (stats_a, _) = run(
        &mut a,
        0,
        steps,
        &step,
        &lockstep(1, 3.0),
        &HertzMindlin,
        None,
        &mut NoHook,
    )
    .unwrap();

    // The deferred run advances one rebuild window at a time so the exact
    // candidate set that served each window can be audited against an
    // all-pairs penetration scan at the window's end, its stalest moment.
    let mut b = scene;
    let pipe20 = lockstep(20, 3.0);
    let mut history: Option<ContactSet> = None;
    let mut missed = 0u64;
    let mut scanned_pairs = 0u64;
    let mut rebuilds = 0u64;
    let mut k = 0u64;
    while k < steps {
        let e = (k + 20).min(steps);
        let (stats, set) = run(
            &mut b,
            k,
            e,
            &step,
            &pipe20,
            &HertzMindlin,
            history.as_ref(),
            &mut NoHook,
        )
        .unwrap();
        rebuilds += stats.rebuilds;
        for key in penetrating_pairs(&b) {
            scanned_pairs += 1;
            if set.find(key).is_none() {
                missed += 1;
            }
        }
        history = Some(set);
        k = e;
    }

    let diverge = a
        .clumps
        .iter()
        .zip(&b.clumps)
        .map(|(ca, cb)| (ca.position - cb.position).norm())
        .fold(0.0f64, f64::max);
    println!(
        "  rebuilds {} vs {}, {scanned_pairs} window-end penetrations audited",
        stats_a.rebuilds, rebuilds
    );
    verdict(
        "deferred contact detection",
        missed == 0 && diverge < 1e-6,
        &format!("missed contacts {missed}, max COM divergence {diverge:.3e} m"),
    );
}

#[test]
fn free_pipeline_with_deferred_rebuilds_outruns_per_step_rebuilds() {
    let mats = vec![grain(1e7)];
    let r = 0.002;
    let h = 1e-5;
    let v_max = 1.0;
    let domain = Aabb::new(Vector3::repeat(-0.5), Vector3::repeat(0.5));
    let pipe_free = PipelineConfig {
        cd_every: 20,
        v_max,
        safety: 1.5,
        mode: PipelineMode::PipelinedFree,
    };
    let pipe_lock = lockstep(1, v_max);
    let margin = pipe_free.margin(h).max(pipe_lock.margin(h));
    let mut scene = Scene::new(mats.clone(), Vector3::zeros(), GridConfig::fit(r, margin, domain));
    let tid = scene.add_template(ball_template(r, &mats));

    let sites = sample_hcp(
        Aabb::new(Vector3::repeat(-0.14), Vector3::repeat(0.14)),
        0.008,
    );
    assert!(sites.len() >= 50_000, "need 50k spheres, got {}", sites.len());
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for p in sites.iter().take(50_000) {
        let mut c = ClumpState::at_rest(*p, tid);
        c.lin_vel = Vector3::new(
            rng.gen_range(-0.05..0.05),
            rng.gen_range(-0.05..0.05),
            rng.gen_range(-0.05..0.05),
        );
        scene.add_clump(c);
    }

    let step = StepConfig { h };
    let steps = 300u64;

    let mut warm = scene.clone();
    run(&mut warm, 0, 30, &step, &pipe_lock, &HertzMindlin, None, &mut NoHook).unwrap();
    drop(warm);

    let mut a = scene.clone();
    let (stats_lock, _) = run(
        &mut a,
        0,
        steps,
        &step,
        &pipe_lock,
        &HertzMindlin,
        None,
        &mut NoHook,
    )
    .unwrap();

    let mut b = scene;
    let (stats_free, _) = run(
        &mut b,
        0,
        steps,
        &step,
        &pipe_free,
        &HertzMindlin,
        None,
        &mut NoHook,
    )
    .unwrap();

    let tp_lock = stats_lock.steps_per_second();
    let tp_free = stats_free.steps_per_second();
    let ratio = tp_free / tp_lock;
    println!(
        "  50k spheres: every-step rebuilds {:.1} steps/s ({} rebuilds), free deferred {:.1} steps/s ({} rebuilds)",
        tp_lock, stats_lock.rebuilds, tp_free, stats_free.rebuilds
    );
    verdict(
        "deferred-detection throughput",
        ratio >= 1.2,
        &format!("speedup {ratio:.2}x (threshold 1.2x)"),
    );
}

#[test]
fn rained_grains_pile_at_their_repose_angle() {
    let mats = vec![grain(1e7)];
    let spec = one_type_spec(4);
    let templates = generate_ds_templates(&spec, &mats, 0).unwrap();
    let bounding = templates[0].bounding_radius;
    let max_r = templates[0]
        .components
        .iter()
        .map(|c| c.radius)
        .fold(0.0, f64::max);
    let mass = templates[0].mass;

    let h = 8e-6;
    let pipe = lockstep(10, 6.0);
    let margin = pipe.margin(h);
    let domain = Aabb::new(
        Vector3::new(-0.09, -0.09, -0.01),
        Vector3::new(0.09, 0.09, 0.2),
    );
    let mut scene = Scene::new(
        mats,
        Vector3::new(0.0, 0.0, -9.81),
        GridConfig::fit(max_r, margin, domain),
    );
    scene.templates = templates;
    scene
        .planes
        .push(PlaneBoundary::fixed(Vector3::zeros(), Vector3::z(), 0));
    for (p, n) in [
        (Vector3::new(-0.085, 0.0, 0.0), Vector3::x()),
        (Vector3::new(0.085, 0.0, 0.0), -Vector3::x()),
        (Vector3::new(0.0, -0.085, 0.0), Vector3::y()),
        (Vector3::new(0.0, 0.085, 0.0), -Vector3::y()),
    ] {
        scene.planes.push(PlaneBoundary::fixed(p, n, 0));
    }

    // A fixed monolayer carpet keeps the pile from skating on the flat
    // floor, standing in for a rough base.
    let carpet: Vec<Vector3<f64>> = sample_hcp(
        Aabb::new(
            Vector3::new(-0.035, -0.035, bounding),
            Vector3::new(0.035, 0.035, bounding + 1e-4),
        ),
        2.05 * bounding,
    )
    .into_iter()
    .filter(|p| p.xy().norm() <= 0.034)
    .collect();
    let seq = vec![0usize; carpet.len()];
    let base_ids = spawn_batch(&mut scene, &carpet, &seq, 0, 0, 5).unwrap();
    for id in &base_ids {
        scene.clumps[*id].fixed = true;
    }

    let step = StepConfig { h };
    let mut history: Option<ContactSet> = None;
    let mut start = 0u64;
    let batches = 6;
    for b in 0..batches {
        let apex = scene
            .clumps
            .iter()
            .map(|c| c.position.z)
            .fold(0.0f64, f64::max);
        let sites: Vec<Vector3<f64>> = sample_hcp(
            Aabb::new(
                Vector3::new(-0.0095, -0.0095, apex + 0.008),
                Vector3::new(0.0095, 0.0095, apex + 0.03),
            ),
            2.05 * bounding,
        )
        .into_iter()
        .filter(|p| p.xy().norm() <= 0.0095)
        .collect();
        let seq = vec![0usize; sites.len()];
        spawn_batch(&mut scene, &sites, &seq, 0, 1 + b as u32, 100 + b).unwrap();

        let n = 15_000u64;
        let (_, set) = run(
            &mut scene,
            start,
            start + n,
            &step,
            &pipe,
            &HertzMindlin,
            history.as_ref(),
            &mut NoHook,
        )
        .unwrap();
        history = Some(set);
        start += n;
    }

    let settle_params = SettleParams {
        ke_per_clump: 0.5 * mass * 1e-6,
        max_time: 0.8,
        check_every: 5_000,
    };
    let report = settle(&mut scene, &step, &pipe, &HertzMindlin, &settle_params).unwrap();
    println!(
        "  poured {} clumps, settled={} at mean KE {:.2e} J",
        scene.clumps.len() - base_ids.len(),
        report.settled,
        report.mean_ke
    );

    let pile: Vec<Vector3<f64>> = scene
        .clumps
        .iter()
        .filter(|c| !c.fixed && c.position.xy().norm() < 0.04)
        .map(|c| c.position)
        .collect();
    let angle = measure_repose_angle(&pile, Vector3::zeros()).unwrap();
    verdict(
        "repose angle of a rained pile",
        (25.0..=35.0).contains(&angle),
        &format!("{angle:.1} degrees from {} piled clumps (target 30 +/- 5)", pile.len()),
    );
}

/// Settles a walled bed of one simulant type and returns the scene plus the
/// surface height. `half_x`/`half_y` set the wall positions; the spawn
/// column height scales the grain budget.
fn settled_bed(
    row: usize,
    half_x: f64,
    half_y: f64,
    column_top: f64,
    h: f64,
    pipe: &PipelineConfig,
    seed: u64,
) -> (Scene, f64) {
    let mats = vec![grain(1e7)];
    let spec = one_type_spec(row);
    let templates = generate_ds_templates(&spec, &mats, 0).unwrap();
    let bounding = templates[0].bounding_radius;
    let max_r = templates[0]
        .components
        .iter()
        .map(|c| c.radius)
        .fold(0.0, f64::max);
    let mass = templates[0].mass;

    let margin = pipe.margin(h);
    let domain = Aabb::new(
        Vector3::new(-half_x - 0.03, -half_y - 0.03, -0.01),
        Vector3::new(half_x + 0.03, half_y + 0.03, column_top + 0.1),
    );
    let mut scene = Scene::new(
        mats,
        Vector3::new(0.0, 0.0, -9.81),
        GridConfig::fit(max_r, margin, domain),
    );
    scene.templates = templates;
    scene
        .planes
        .push(PlaneBoundary::fixed(Vector3::zeros(), Vector3::z(), 0));
    for (p, n) in [
        (Vector3::new(-half_x, 0.0, 0.0), Vector3::x()),
        (Vector3::new(half_x, 0.0, 0.0), -Vector3::x()),
        (Vector3::new(0.0, -half_y, 0.0), Vector3::y()),
        (Vector3::new(0.0, half_y, 0.0), -Vector3::y()),
    ] {
        scene.planes.push(PlaneBoundary::fixed(p, n, 0));
    }

    let pad = bounding * 1.1;
    let sites = sample_hcp(
        Aabb::new(
            Vector3::new(-half_x + pad, -half_y + pad, bounding + 5e-4),
            Vector3::new(half_x - pad, half_y - pad, column_top),
        ),
        2.05 * bounding,
    );
    let seq = vec![0usize; sites.len()];
    spawn_batch(&mut scene, &sites, &seq, 0, 0, seed).unwrap();

    let step = StepConfig { h };
    let settle_params = SettleParams {
        ke_per_clump: 0.5 * mass * 1e-6,
        max_time: 0.6,
        check_every: 5_000,
    };
    let report = settle(&mut scene, &step, pipe, &HertzMindlin, &settle_params).unwrap();
    assert!(report.settled, "bed failed to settle: mean KE {:.2e}", report.mean_ke);
    let bed_top = scene
        .clumps
        .iter()
        .map(|c| c.position.z)
        .fold(0.0f64, f64::max);
    (scene, bed_top)
}

/// Drives a cone tip into the bed at constant speed and returns binned mean
/// pressure per depth band, Pa.
fn cone_pressure_profile(
    mut scene: Scene,
    bed_top: f64,
    h: f64,
    pipe: &PipelineConfig,
    bins: &[(f64, f64)],
) -> Vec<f64> {
    let base_radius = 0.0035;
    let mesh = cone_mesh(&ConeSpec {
        base_radius,
        apex_angle_deg: 60.0,
        shaft_length: 0.012,
        segments: 24,
    });
    let mut body = TriMeshBody::new(mesh.0, mesh.1, 0).unwrap();
    let descent = 0.03;
    body.pose_pos = Vector3::new(0.0, 0.0, bed_top + 5e-4);
    body.motion = MotionSpec::ConstantVelocity {
        linear: Vector3::new(0.0, 0.0, -descent),
        angular: Vector3::zeros(),
    };
    scene.meshes.push(body);

    let target_depth = bins.iter().fold(0.0f64, |m, b| m.max(b.1)) + 1e-3;
    let steps = (((target_depth + 5e-4) / descent) / h).ceil() as u64;
    let step = StepConfig { h };
    let mut log = MeshWrenchLog::new(0, 40);
    run(
        &mut scene,
        0,
        steps,
        &step,
        pipe,
        &HertzMindlin,
        None,
        &mut log,
    )
    .unwrap();

    let area = std::f64::consts::PI * base_radius * base_radius;
    bins.iter()
        .map(|&(d0, d1)| {
            let mut sum = 0.0;
            let mut n = 0u32;
            for row in &log.rows {
                let depth = bed_top - row.position.z;
                if depth >= d0 && depth < d1 {
                    sum += row.force.z / area;
                    n += 1;
                }
            }
            assert!(n > 0, "no samples in depth bin {d0}..{d1}");
            sum / n as f64
        })
        .collect()
}

#[test]
fn cone_resistance_grows_with_depth_and_with_compaction() {
    let h = 8e-6;
    let pipe = lockstep(10, 6.0);
    let (scene, bed_top) = settled_bed(5, 0.011, 0.011, 0.042, h, &pipe, 31);

    let probe = Aabb::new(
        Vector3::new(-0.008, -0.008, 0.002),
        Vector3::new(0.008, 0.008, bed_top * 0.75),
    );
    let rho_nat = measure_bulk_density(&scene, probe).unwrap();
    println!("  natural bed: top {bed_top:.4} m, bulk density {rho_nat:.0} kg/m^3");

    let bins = [(0.001, 0.0025), (0.0025, 0.004), (0.004, 0.0055), (0.0055, 0.007)];

    let natural = cone_pressure_profile(scene.clone(), bed_top, h, &pipe, &bins);
    println!("  natural pressure bins: {:?}", natural.iter().map(|p| *p as i64).collect::<Vec<_>>());

    let mut dense_scene = scene;
    let compress_params = CompressParams {
        start_height: bed_top + 0.002,
        speed: 0.04,
        target: CompressTarget::BulkDensity(rho_nat * 1.06),
        probe,
        max_force: 400.0,
        plate_material: 0,
        check_every: 400,
        retract_to: bed_top + 0.004,
    };
    let step = StepConfig { h };
    let report = compress(&mut dense_scene, &step, &pipe, &HertzMindlin, &compress_params).unwrap();
    let settle_params = SettleParams {
        ke_per_clump: 1e-11,
        max_time: 0.1,
        check_every: 2_000,
    };
    settle(&mut dense_scene, &step, &pipe, &HertzMindlin, &settle_params).unwrap();
    let dense_top = dense_scene
        .clumps
        .iter()
        .map(|c| c.position.z)
        .fold(0.0f64, f64::max);
    println!(
        "  compressed bed: density {:.0} kg/m^3 (peak plate force {:.1} N), top {dense_top:.4} m",
        report.achieved_density, report.peak_force
    );

    let dense = cone_pressure_profile(dense_scene, dense_top, h, &pipe, &bins);
    println!("  compressed pressure bins: {:?}", dense.iter().map(|p| *p as i64).collect::<Vec<_>>());

    let monotone = natural.windows(2).all(|w| w[1] > w[0]);
    let stiffer = natural
        .iter()
        .zip(&dense)
        .skip(1)
        .all(|(n, d)| d > n);
    verdict(
        "cone penetration trends",
        monotone && stiffer,
        &format!(
            "natural curve monotone: {monotone}, compacted bed stiffer beyond the surface band: {stiffer}"
        ),
    );
}

#[test]
#[ignore = "long scenario run, executed in scheduled full passes"]
fn steady_slip_survives_quarter_gravity_half_spin_scaling() {
    let h = 8e-6;
    let pipe = lockstep(10, 6.0);
    let (scene, bed_top) = settled_bed(5, 0.03, 0.01, 0.036, h, &pipe, 47);
    let step = StepConfig { h };

    let wheel_case = |mut scene: Scene, bed_top: f64, g: f64, omega: f64, t_end: f64, w0: f64, w1: f64| {
        scene.gravity = Vector3::new(0.0, 0.0, -g);
        // Let the bed relax under the new weight before the wheel engages.
        let relax = SettleParams {
            ke_per_clump: 1e-11,
            max_time: 0.08,
            check_every: 2_000,
        };
        settle(&mut scene, &step, &pipe, &HertzMindlin, &relax).unwrap();
        fix_below(&mut scene, 0.002);

        let mesh = wheel_mesh(&WheelSpec {
            radius: 0.012,
            width: 0.009,
            segments: 20,
            grousers: 10,
            grouser_height: 0.0012,
            grouser_thickness: 0.002,
        });
        let mut body = TriMeshBody::new(mesh.0, mesh.1, 0).unwrap();
        body.pose_pos = Vector3::new(-0.02, 0.0, bed_top + 0.012 - 5e-4);
        scene.meshes.push(body);

        let rig_params = WheelRigParams {
            mesh: 0,
            drive: Vector3::x(),
            up: Vector3::z(),
            omega,
            drive_speed: None,
            free_vertical: true,
            effective_mass: 0.12,
            gravity: scene.gravity,
            time_step: h,
            log_every: 100,
        };
        let mut rig = WheelRig::new(rig_params).unwrap();
        let steps = (t_end / h).round() as u64;
        run(&mut scene, 0, steps, &step, &pipe, &HertzMindlin, None, &mut rig).unwrap();
        measure_slip(&rig.trajectory(), Vector3::x(), omega, 0.0132, w0, w1).unwrap()
    };

    let slip_a = wheel_case(scene.clone(), bed_top, 9.81, 10.0, 0.36, 0.12, 0.34);
    let slip_b = wheel_case(scene, bed_top, 9.81 / 4.0, 5.0, 0.72, 0.24, 0.68);
    let delta = (slip_a.slip - slip_b.slip).abs();
    println!(
        "  slip at (g, w) {:.3}, at (g/4, w/2) {:.3}",
        slip_a.slip, slip_b.slip
    );
    verdict(
        "granular scaling of steady slip",
        delta <= 0.05,
        &format!("slip difference {delta:.3} (allowed 0.05)"),
    );
}

#[test]
fn simulant_templates_hit_their_sizes_and_weight_mix() {
    let spec = SimulantSpec::builtin();
    let sum: f64 = spec.types.iter().map(|t| t.weight).sum();
    let mats = vec![grain(1e9)];
    let templates = generate_ds_templates(&spec, &mats, 0).unwrap();

    let mut worst_size = 0.0f64;
    for (t, ty) in templates.iter().zip(&spec.types) {
        let err = (2.0 * t.bounding_radius - ty.diameter).abs();
        worst_size = worst_size.max(err / t.voxel_pitch);
        println!(
            "  type d={:.1} mm: bounding {:.4} mm, voxel {:.4} mm, error {:.3} voxels",
            ty.diameter * 1e3,
            2.0 * t.bounding_radius * 1e3,
            t.voxel_pitch * 1e3,
            err / t.voxel_pitch
        );
    }

    let masses: Vec<f64> = templates.iter().map(|t| t.mass).collect();
    let weights: Vec<f64> = spec.types.iter().map(|t| t.weight).collect();
    let seq = type_sequence(10_000, &masses, &weights, 4242).unwrap();
    let mut mass_per_type = vec![0.0f64; templates.len()];
    for ty in &seq {
        mass_per_type[*ty] += masses[*ty];
    }
    let total: f64 = mass_per_type.iter().sum();
    let mut worst_frac = 0.0f64;
    for (k, m) in mass_per_type.iter().enumerate() {
        let frac = m / total;
        let rel = (frac - weights[k]).abs() / weights[k];
        worst_frac = worst_frac.max(rel);
        println!("  type {k}: mass fraction {:.4} vs spec {:.4}", frac, weights[k]);
    }

    verdict(
        "simulant size and weight table",
        (sum - 1.0).abs() < 1e-12 && worst_size <= 1.0 && worst_frac <= 0.02,
        &format!(
            "weights sum residual {:.1e}, worst size error {worst_size:.3} voxels, worst 10k-batch fraction error {:.2}%",
            (sum - 1.0).abs(),
            worst_frac * 100.0
        ),
    );
}

fn mc_inertia(comps: &[SphereComponent], density: f64, samples: u64, seed: u64) -> (f64, Vector3<f64>) {
    let mut lo = Vector3::repeat(f64::INFINITY);
    let mut hi = Vector3::repeat(f64::NEG_INFINITY);
    for c in comps {
        lo = lo.inf(&c.offset.add_scalar(-c.radius));
        hi = hi.sup(&c.offset.add_scalar(c.radius));
    }
    let box_vol = (hi - lo).iter().product::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pts = Vec::new();
    for _ in 0..samples {
        let p = Vector3::new(
            rng.gen_range(lo.x..hi.x),
            rng.gen_range(lo.y..hi.y),
            rng.gen_range(lo.z..hi.z),
        );
        if comps
            .iter()
            .any(|c| (p - c.offset).norm_squared() <= c.radius * c.radius)
        {
            pts.push(p);
        }
    }
    let mass = density * box_vol * pts.len() as f64 / samples as f64;
    let com: Vector3<f64> = pts.iter().sum::<Vector3<f64>>() / pts.len() as f64;
    let mut diag: Vector3<f64> = Vector3::zeros();
    let mut cross: Vector3<f64> = Vector3::zeros();
    for p in &pts {
        let d = p - com;
        diag.x += d.y * d.y + d.z * d.z;
        diag.y += d.x * d.x + d.z * d.z;
        diag.z += d.x * d.x + d.y * d.y;
        cross.x += d.x * d.y;
        cross.y += d.x * d.z;
        cross.z += d.y * d.z;
    }
    let w = mass / pts.len() as f64;
    let t = Matrix3::new(
        diag.x * w,
        -cross.x * w,
        -cross.y * w,
        -cross.x * w,
        diag.y * w,
        -cross.z * w,
        -cross.y * w,
        -cross.z * w,
        diag.z * w,
    );
    let mut ev: Vec<f64> = SymmetricEigen::new(t).eigenvalues.iter().copied().collect();
    ev.sort_by(|a, b| a.total_cmp(b));
    (mass, Vector3::new(ev[0], ev[1], ev[2]))
}

fn sampled_triangle_distance(p: Vector3<f64>, tri: &[Vector3<f64>; 3], steps: usize) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..=steps {
        for j in 0..=(steps - i) {
            let a = i as f64 / steps as f64;
            let b = j as f64 / steps as f64;
            let q = tri[0] + a * (tri[1] - tri[0]) + b * (tri[2] - tri[0]);
            best = best.min((q - p).norm());
        }
    }
    best
}

#[test]
fn broadphase_inertia_and_triangle_oracles_agree() {
    // Grid against the quadratic all-pairs oracle on one thousand spheres.
    let mats = vec![grain(1e7)];
    let domain = Aabb::new(Vector3::repeat(-0.5), Vector3::repeat(0.5));
    let margin = 0.004;
    let radii = [0.002, 0.003, 0.004, 0.005, 0.006];
    let mut scene = Scene::new(mats.clone(), Vector3::zeros(), GridConfig::fit(0.006, margin, domain));
    for r in radii {
        scene.add_template(ball_template(r, &mats));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for k in 0..1000 {
        let p = Vector3::new(
            rng.gen_range(-0.45..0.45),
            rng.gen_range(-0.45..0.45),
            rng.gen_range(-0.45..0.45),
        );
        scene.add_clump(ClumpState::at_rest(p, k % radii.len()));
    }
    let snap = StateSnapshot::capture(&scene, 0);
    let set = build_contact_set(&scene, &snap, margin, 1).unwrap();
    let grid_keys: BTreeSet<ContactKey> = set.records.iter().map(|r| r.key).collect();

    let mut oracle_keys: BTreeSet<ContactKey> = BTreeSet::new();
    let spheres: Vec<(Vector3<f64>, f64, u32)> = scene
        .clumps
        .iter()
        .enumerate()
        .map(|(ci, c)| {
            let t = &scene.templates[c.template_id];
            (c.position, t.components[0].radius, ci as u32)
        })
        .collect();
    for i in 0..spheres.len() {
        for j in i + 1..spheres.len() {
            let reach = spheres[i].1 + spheres[j].1 + margin;
            if (spheres[j].0 - spheres[i].0).norm_squared() < reach * reach {
                oracle_keys.insert(ContactKey::new(
                    GeomId::Sphere { clump: spheres[i].2, comp: 0 },
                    GeomId::Sphere { clump: spheres[j].2, comp: 0 },
                ));
            }
        }
    }
    let grid_exact = grid_keys == oracle_keys;
    println!(
        "  broad phase: {} grid pairs vs {} oracle pairs",
        grid_keys.len(),
        oracle_keys.len()
    );

    // Clump inertia against a Monte Carlo union for a six-sphere and a
    // three-sphere build.
    let spec = SimulantSpec::builtin();
    let templates = generate_ds_templates(&spec, &[grain(1e9)], 0).unwrap();
    let mut worst_inertia = 0.0f64;
    for row in [0usize, 3] {
        let (_, mc_i) = mc_inertia(&templates[row].components, 2600.0, 4_000_000, 7 + row as u64);
        for a in 0..3 {
            let rel = (templates[row].inertia[a] - mc_i[a]).abs() / mc_i[a];
            worst_inertia = worst_inertia.max(rel);
        }
    }
    println!("  inertia: worst principal deviation {:.3}%", worst_inertia * 100.0);

    // Closest-point frames against dense barycentric sampling.
    let mut worst_frame = 0.0f64;
    for case in 0..40 {
        let mut rng = ChaCha8Rng::seed_from_u64(900 + case);
        let mut v = || {
            Vector3::new(
                rng.gen_range(-0.025..0.025),
                rng.gen_range(-0.025..0.025),
                rng.gen_range(-0.025..0.025),
            )
        };
        let tri = [v(), v(), v()];
        let p = v() * 2.0;
        let (cp, _) = demgrain::boundary::closest_point_triangle(p, tri[0], tri[1], tri[2]);
        let exact = (cp - p).norm();
        let sampled = sampled_triangle_distance(p, &tri, 600);
        worst_frame = worst_frame.max((sampled - exact).abs());
    }
    println!("  triangle frames: worst sampling gap {worst_frame:.2e} m");

    verdict(
        "geometric oracle suite",
        grid_exact && worst_inertia < 0.01 && worst_frame < 1e-6,
        &format!(
            "broad phase exact: {grid_exact}, inertia within {:.2}%, frame gap {worst_frame:.1e} m",
            worst_inertia * 100.0
        ),
    );
}
