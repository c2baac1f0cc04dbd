//! Orchestration of the contact-set producer and the dynamics consumer.
//!
//! Three drive modes share one consumer loop and one engine:
//!
//! * `Lockstep` — a single control flow; the contact set is rebuilt inline
//!   every `cd_every` steps.
//! * `PipelinedPinned` — a producer thread builds sets, but the consumer
//!   waits at each window boundary for the set built from its own just
//!   published states. The schedule is therefore identical to lockstep and
//!   so, bitwise, are the results.
//! * `PipelinedFree` — the consumer adopts whatever newer set is available at
//!   a boundary and otherwise keeps stepping, bounded by a staleness cap of
//!   two windows, past which it blocks (back-pressure) rather than proceed
//!   with an older set. The margin is sized for the capped window.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::broadphase::{adopt_history, build_contact_set, compute_margin, ContactSet};
use crate::contact::ForceModel;
use crate::engine::{Engine, StepOutcome};
use crate::integrate::StepConfig;
use crate::scene::{Scene, StateSnapshot};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PipelineMode {
    Lockstep,
    /// Two threads, cadence pinned to the lockstep schedule.
    PipelinedPinned,
    /// Two threads, consumer free-runs under the staleness cap.
    PipelinedFree,
}

/// How many windows a contact set may serve in free-running mode before the
/// consumer must block for a fresher one.
pub const STALENESS_CAP_WINDOWS: u32 = 2;

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct PipelineConfig {
    /// Steps per scheduled contact-set rebuild.
    pub cd_every: u32,
    /// Speed bound the margin is derived from, m/s.
    pub v_max: f64,
    /// Margin safety factor, ≥ 1.
    pub safety: f64,
    pub mode: PipelineMode,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.cd_every < 1 {
            return Err(Error::Param("cd_every must be >= 1".into()));
        }
        if !(self.v_max > 0.0) {
            return Err(Error::Param(format!("v_max must be > 0, got {}", self.v_max)));
        }
        if !(self.safety >= 1.0) {
            return Err(Error::Param(format!("safety must be >= 1, got {}", self.safety)));
        }
        Ok(())
    }

    /// Steps a set may stay in use: one window normally, the staleness cap
    /// times that when free-running.
    pub fn effective_window(&self) -> u32 {
        match self.mode {
            PipelineMode::PipelinedFree => self.cd_every * STALENESS_CAP_WINDOWS,
            _ => self.cd_every,
        }
    }

    pub fn margin(&self, h: f64) -> f64 {
        compute_margin(self.v_max, h, self.effective_window(), self.safety)
    }
}

/// Whether the run should keep going after a hook call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HookFlow {
    Continue,
    Stop,
}

/// Scenario callbacks around every step. `pre_step` runs before forces (a
/// driver writes prescribed velocities here); `post_step` sees the outcome
/// (wrench readback, convergence checks) and may stop the run.
pub trait StepHook {
    fn pre_step(&mut self, _scene: &mut Scene, _step: u64, _t: f64) -> Result<()> {
        Ok(())
    }
    fn post_step(&mut self, _scene: &mut Scene, _outcome: &StepOutcome) -> Result<HookFlow> {
        Ok(HookFlow::Continue)
    }
}

/// The do-nothing hook.
pub struct NoHook;

impl StepHook for NoHook {}

/// Counters and timing for one run.
#[derive(Clone, Debug, Default)]
pub struct RunStats {
    pub steps_run: u64,
    pub rebuilds: u64,
    pub speed_violations: u64,
    /// A hook requested an early stop.
    pub stopped_early: bool,
    pub wall_time: Duration,
    pub final_kinetic_energy: f64,
}

impl RunStats {
    pub fn steps_per_second(&self) -> f64 {
        self.steps_run as f64 / self.wall_time.as_secs_f64().max(1e-12)
    }
}

/// Double-buffered exchange between the dynamics consumer and the contact-set
/// producer: a latest-states slot written by the consumer and a latest-set
/// slot written by the producer. Readers never observe partial writes (each
/// slot moves whole values under a mutex) and generations are monotone.
pub struct ExchangeBuffers {
    states: Mutex<Option<Arc<StateSnapshot>>>,
    states_cv: Condvar,
    contacts: Mutex<ContactsSlot>,
    contacts_cv: Condvar,
    done: AtomicBool,
}

#[derive(Default)]
struct ContactsSlot {
    set: Option<ContactSet>,
    error: Option<Error>,
}

impl ExchangeBuffers {
    fn new() -> Self {
        ExchangeBuffers {
            states: Mutex::new(None),
            states_cv: Condvar::new(),
            contacts: Mutex::new(ContactsSlot::default()),
            contacts_cv: Condvar::new(),
            done: AtomicBool::new(false),
        }
    }

    /// Publishes states, replacing any pending snapshot.
    fn publish_states(&self, snap: StateSnapshot) {
        *self.states.lock().unwrap() = Some(Arc::new(snap));
        self.states_cv.notify_all();
    }

    /// Publishes states only if the producer has already taken the previous
    /// snapshot, so the consumer never copies states faster than they can be
    /// consumed.
    fn offer_states(&self, make: impl FnOnce() -> StateSnapshot) {
        let mut slot = self.states.lock().unwrap();
        if slot.is_none() {
            *slot = Some(Arc::new(make()));
            self.states_cv.notify_all();
        }
    }

    fn set_done(&self) {
        self.done.store(true, Ordering::SeqCst);
        self.states_cv.notify_all();
        self.contacts_cv.notify_all();
    }

    /// Blocks until a set built from states at least as new as `min_stamp`
    /// is available, then takes it.
    fn wait_for_set(&self, min_stamp: u64) -> Result<ContactSet> {
        let mut slot = self.contacts.lock().unwrap();
        loop {
            if let Some(e) = slot.error.take() {
                return Err(e);
            }
            if slot
                .set
                .as_ref()
                .map(|s| s.state_stamp >= min_stamp)
                .unwrap_or(false)
            {
                return Ok(slot.set.take().unwrap());
            }
            let (guard, _) = self
                .contacts_cv
                .wait_timeout(slot, Duration::from_millis(50))
                .unwrap();
            slot = guard;
        }
    }

    /// Takes the pending set if one is available, without blocking.
    fn try_take_set(&self) -> Result<Option<ContactSet>> {
        let mut slot = self.contacts.lock().unwrap();
        if let Some(e) = slot.error.take() {
            return Err(e);
        }
        Ok(slot.set.take())
    }
}

fn producer_loop(static_scene: &Scene, bufs: &ExchangeBuffers, margin: f64) {
    let mut generation = 0u64;
    loop {
        let snap = {
            let mut slot = bufs.states.lock().unwrap();
            loop {
                if bufs.done.load(Ordering::SeqCst) {
                    return;
                }
                if let Some(s) = slot.take() {
                    break s;
                }
                let (guard, _) = bufs
                    .states_cv
                    .wait_timeout(slot, Duration::from_millis(50))
                    .unwrap();
                slot = guard;
            }
        };
        generation += 1;
        match build_contact_set(static_scene, &snap, margin, generation) {
            Ok(set) => {
                let mut slot = bufs.contacts.lock().unwrap();
                slot.set = Some(set);
                bufs.contacts_cv.notify_all();
            }
            Err(e) => {
                let mut slot = bufs.contacts.lock().unwrap();
                slot.error = Some(e);
                bufs.contacts_cv.notify_all();
                return;
            }
        }
    }
}

enum Source<'a> {
    Inline { generation: u64 },
    Threaded { bufs: &'a ExchangeBuffers, pinned: bool },
}

/// Advances `scene` from `start_step` to `end_step` under the configured
/// mode. `initial_history` seeds tangential histories when resuming from a
/// checkpoint. Returns run statistics and the final contact set (whose
/// records carry the histories a checkpoint must persist).
pub fn run(
    scene: &mut Scene,
    start_step: u64,
    end_step: u64,
    step_cfg: &StepConfig,
    pipe: &PipelineConfig,
    model: &dyn ForceModel,
    initial_history: Option<&ContactSet>,
    hook: &mut dyn StepHook,
) -> Result<(RunStats, ContactSet)> {
    step_cfg.validate()?;
    pipe.validate()?;
    scene.validate()?;
    let margin = pipe.margin(step_cfg.h);

    match pipe.mode {
        PipelineMode::Lockstep => {
            let mut source = Source::Inline { generation: 0 };
            consumer_loop(
                scene,
                start_step,
                end_step,
                step_cfg,
                pipe,
                margin,
                model,
                initial_history,
                hook,
                &mut source,
            )
        }
        PipelineMode::PipelinedPinned | PipelineMode::PipelinedFree => {
            let static_scene = scene.clone();
            let bufs = ExchangeBuffers::new();
            let pinned = pipe.mode == PipelineMode::PipelinedPinned;
            std::thread::scope(|s| {
                let producer = s.spawn(|| producer_loop(&static_scene, &bufs, margin));
                let mut source = Source::Threaded { bufs: &bufs, pinned };
                let result = consumer_loop(
                    scene,
                    start_step,
                    end_step,
                    step_cfg,
                    pipe,
                    margin,
                    model,
                    initial_history,
                    hook,
                    &mut source,
                );
                bufs.set_done();
                if producer.join().is_err() {
                    return Err(Error::Scenario("contact-set producer panicked".into()));
                }
                result
            })
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn consumer_loop(
    scene: &mut Scene,
    start_step: u64,
    end_step: u64,
    step_cfg: &StepConfig,
    pipe: &PipelineConfig,
    margin: f64,
    model: &dyn ForceModel,
    initial_history: Option<&ContactSet>,
    hook: &mut dyn StepHook,
    source: &mut Source,
) -> Result<(RunStats, ContactSet)> {
    let started = Instant::now();
    let mut engine = Engine::new(scene);
    let mut stats = RunStats::default();
    let cd = pipe.cd_every as u64;

    let mut current = match initial_history {
        Some(h) => h.clone(),
        None => ContactSet::default(),
    };
    let mut have_set = false;
    let mut forced_rebuild = false;
    let mut violated_window: Option<u64> = None;
    let mut last_outcome_ke = 0.0;

    for k in start_step..end_step {
        hook.pre_step(scene, k, k as f64 * step_cfg.h)?;

        let at_boundary = k % cd == 0;
        let need_fresh = !have_set || forced_rebuild;

        match source {
            Source::Inline { generation } => {
                if need_fresh || at_boundary {
                    let snap = StateSnapshot::capture(scene, k);
                    *generation += 1;
                    let mut set = build_contact_set(scene, &snap, margin, *generation)?;
                    adopt_history(&mut set, &current);
                    current = set;
                    have_set = true;
                    forced_rebuild = false;
                    stats.rebuilds += 1;
                }
            }
            Source::Threaded { bufs, pinned } => {
                if *pinned {
                    if need_fresh || at_boundary {
                        bufs.publish_states(StateSnapshot::capture(scene, k));
                        let mut set = bufs.wait_for_set(k)?;
                        adopt_history(&mut set, &current);
                        current = set;
                        have_set = true;
                        forced_rebuild = false;
                        stats.rebuilds += 1;
                    }
                } else {
                    // Free-running: stock the states slot once per window
                    // (sets are only adopted at boundaries, so building more
                    // often is wasted work), block only when forced (first
                    // set, violation) or when the current set has exceeded
                    // the staleness cap.
                    if at_boundary {
                        bufs.offer_states(|| StateSnapshot::capture(scene, k));
                    }
                    let cap = cd * STALENESS_CAP_WINDOWS as u64;
                    let too_stale = have_set && current.state_stamp + cap <= k;
                    if need_fresh || too_stale {
                        bufs.publish_states(StateSnapshot::capture(scene, k));
                        // A violation or a first build needs states from this
                        // very step; plain staleness accepts anything inside
                        // the cap.
                        let min_stamp = if need_fresh { k } else { k + 1 - cap };
                        let mut set = bufs.wait_for_set(min_stamp)?;
                        adopt_history(&mut set, &current);
                        current = set;
                        have_set = true;
                        forced_rebuild = false;
                        stats.rebuilds += 1;
                    } else if at_boundary {
                        if let Some(mut set) = bufs.try_take_set()? {
                            if set.generation > current.generation {
                                adopt_history(&mut set, &current);
                                current = set;
                                stats.rebuilds += 1;
                            }
                        }
                    }
                }
            }
        }

        let outcome = engine.step(scene, &mut current, model, step_cfg, pipe.v_max, k)?;
        stats.steps_run += 1;
        last_outcome_ke = outcome.kinetic_energy;

        if outcome.speed_violation {
            stats.speed_violations += 1;
            let window = k / cd;
            if violated_window == Some(window) {
                return Err(Error::SpeedAbort {
                    step: k,
                    speed: outcome.max_speed,
                });
            }
            violated_window = Some(window);
            forced_rebuild = true;
        }

        if hook.post_step(scene, &outcome)? == HookFlow::Stop {
            stats.stopped_early = true;
            break;
        }
    }

    stats.wall_time = started.elapsed();
    stats.final_kinetic_energy = last_outcome_ke;
    Ok((stats, current))
}

/// Single-threaded drive: rebuild inline every `cd_every` steps.
pub fn run_lockstep(
    scene: &mut Scene,
    n_steps: u64,
    step_cfg: &StepConfig,
    pipe: &PipelineConfig,
    model: &dyn ForceModel,
    hook: &mut dyn StepHook,
) -> Result<(RunStats, ContactSet)> {
    let cfg = PipelineConfig {
        mode: PipelineMode::Lockstep,
        ..*pipe
    };
    run(scene, 0, n_steps, step_cfg, &cfg, model, None, hook)
}

/// Two-thread drive; `pipe.mode` selects pinned or free-running cadence
/// (a `Lockstep` mode input is promoted to pinned).
pub fn run_pipelined(
    scene: &mut Scene,
    n_steps: u64,
    step_cfg: &StepConfig,
    pipe: &PipelineConfig,
    model: &dyn ForceModel,
    hook: &mut dyn StepHook,
) -> Result<(RunStats, ContactSet)> {
    let mode = match pipe.mode {
        PipelineMode::Lockstep => PipelineMode::PipelinedPinned,
        m => m,
    };
    let cfg = PipelineConfig { mode, ..*pipe };
    run(scene, 0, n_steps, step_cfg, &cfg, model, None, hook)
}
