//! Discrete-event simulator for the non-interleaved 1F1B pipeline schedule.
//!
//! Stage `i` of `pp` runs `min(m, pp - i)` warmup forwards, then alternates
//! one backward and one forward, then drains the remaining backwards. A
//! forward waits for its activations from the previous stage and a
//! backward for its gradients from the next one. Transfers occupy the
//! sending stage unless p2p overlap is enabled.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::canon;
use crate::costmodel::{recompute_workspace, stage_memory, CostInputs};
use crate::error::{Error, Result};
use crate::profiles::{ClusterProfile, ModelProfile, TrainingConfig};
use crate::search::{validate_plan, Plan, PlanCost};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Fwd,
    Bwd,
    Recompute,
    P2pSend,
    P2pRecv,
    DpSync,
}

/// Field order is the JSON-lines trace column order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimEvent {
    pub time: f64,
    pub device_stage: usize,
    pub kind: EventKind,
    /// `-1` for per-iteration events (data-parallel sync).
    pub microbatch_id: i64,
    pub duration: f64,
}

impl SimEvent {
    pub fn end(&self) -> f64 {
        self.time + self.duration
    }

    fn is_compute(&self) -> bool {
        matches!(self.kind, EventKind::Fwd | EventKind::Bwd | EventKind::Recompute)
    }
}

/// Per-microbatch durations of one stage.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StageTimings {
    pub fwd: f64,
    pub bwd: f64,
    /// Rematerialization before each backward.
    pub recompute: f64,
    /// Activation transfer to the next stage.
    pub send_fwd: f64,
    /// Gradient transfer to the previous stage.
    pub send_bwd: f64,
    /// Once per iteration, after the last backward.
    pub dp_sync: f64,
}

/// Activation residency a stage reached during the run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Residency {
    /// Most microbatches whose activations were held at once.
    pub max_in_flight: u64,
    /// Most microbatches held while a recomputation workspace was live.
    pub max_in_flight_recomputing: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    pub makespan: f64,
    pub trace: Vec<SimEvent>,
    pub residency: Vec<Residency>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimResult {
    pub makespan: f64,
    pub stage_peak_memory: Vec<f64>,
    pub bubble_fraction: f64,
    #[serde(skip)]
    pub trace: Vec<SimEvent>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SimOptions {
    pub transitions: bool,
    pub overlap_p2p: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub sim_makespan: f64,
    pub analytic_time: f64,
    pub relative_gap: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Op {
    Forward(u64),
    Backward(u64),
}

/// The fixed 1F1B operation order of one stage.
fn stage_program(stage: usize, pp: usize, m: u64) -> Vec<Op> {
    let warmup = m.min((pp - stage) as u64);
    let mut ops: Vec<Op> = (0..warmup).map(Op::Forward).collect();
    for k in 0..(m - warmup) {
        ops.push(Op::Backward(k));
        ops.push(Op::Forward(warmup + k));
    }
    ops.extend((m - warmup..m).map(Op::Backward));
    ops
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Wake {
    time: f64,
    stage: usize,
}

impl Eq for Wake {}

impl PartialOrd for Wake {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Wake {
    fn cmp(&self, other: &Self) -> Ordering {
        self.time.total_cmp(&other.time).then(self.stage.cmp(&other.stage))
    }
}

struct StageState {
    program: Vec<Op>,
    next: usize,
    busy_until: f64,
    activations_ready: Vec<Option<f64>>,
    gradients_ready: Vec<Option<f64>>,
    in_flight: u64,
    residency: Residency,
}

/// Runs the 1F1B schedule on explicit per-stage durations.
pub fn simulate_schedule(stages: &[StageTimings], n_microbatches: u64, overlap_p2p: bool) -> Result<Schedule> {
    let pp = stages.len();
    assert!(
        pp >= 1 && n_microbatches >= 1,
        "need at least one stage and one microbatch"
    );
    let m = n_microbatches as usize;
    let mut state: Vec<StageState> = (0..pp)
        .map(|i| StageState {
            program: stage_program(i, pp, n_microbatches),
            next: 0,
            busy_until: 0.0,
            activations_ready: vec![if i == 0 { Some(0.0) } else { None }; m],
            gradients_ready: vec![None; m],
            in_flight: 0,
            residency: Residency::default(),
        })
        .collect();

    let mut trace = Vec::new();
    let mut queue: BinaryHeap<Reverse<Wake>> = (0..pp).map(|stage| Reverse(Wake { time: 0.0, stage })).collect();

    while let Some(Reverse(Wake { time: now, stage: i })) = queue.pop() {
        let st = &mut state[i];
        let Some(&op) = st.program.get(st.next) else { continue };
        if st.busy_until > now {
            continue;
        }
        let ready = match op {
            Op::Forward(k) => st.activations_ready[k as usize],
            Op::Backward(k) => st.gradients_ready[k as usize],
        };
        let Some(ready) = ready else { continue };
        if ready > now {
            continue;
        }
        let start = st.busy_until.max(ready);
        let t = stages[i];
        st.next += 1;

        let event = |time, kind, mb: u64, duration| SimEvent {
            time,
            device_stage: i,
            kind,
            microbatch_id: mb as i64,
            duration,
        };
        let (end, send) = match op {
            Op::Forward(k) => {
                st.in_flight += 1;
                st.residency.max_in_flight = st.residency.max_in_flight.max(st.in_flight);
                trace.push(event(start, EventKind::Fwd, k, t.fwd));
                let end = start + t.fwd;
                if i + 1 == pp {
                    st.gradients_ready[k as usize] = Some(end);
                    (end, None)
                } else {
                    (end, Some((i + 1, k, t.send_fwd)))
                }
            }
            Op::Backward(k) => {
                let mut cursor = start;
                if t.recompute > 0.0 {
                    let r = &mut st.residency;
                    r.max_in_flight_recomputing = Some(r.max_in_flight_recomputing.unwrap_or(0).max(st.in_flight));
                    trace.push(event(cursor, EventKind::Recompute, k, t.recompute));
                    cursor += t.recompute;
                }
                trace.push(event(cursor, EventKind::Bwd, k, t.bwd));
                let end = cursor + t.bwd;
                st.in_flight -= 1;
                (end, (i > 0).then(|| (i - 1, k, t.send_bwd)))
            }
        };

        let mut free_at = end;
        if let Some((to, k, duration)) = send {
            trace.push(event(end, EventKind::P2pSend, k, duration));
            let arrival = end + duration;
            if !overlap_p2p {
                free_at = arrival;
            }
            let target = &mut state[to];
            match op {
                Op::Forward(_) => target.activations_ready[k as usize] = Some(arrival),
                Op::Backward(_) => target.gradients_ready[k as usize] = Some(arrival),
            }
            trace.push(SimEvent {
                time: arrival,
                device_stage: to,
                kind: EventKind::P2pRecv,
                microbatch_id: k as i64,
                duration: 0.0,
            });
            queue.push(Reverse(Wake {
                time: arrival,
                stage: to,
            }));
        }

        let st = &mut state[i];
        st.busy_until = free_at;
        if st.next == st.program.len() {
            trace.push(SimEvent {
                time: free_at,
                device_stage: i,
                kind: EventKind::DpSync,
                microbatch_id: -1,
                duration: t.dp_sync,
            });
            st.busy_until = free_at + t.dp_sync;
        } else {
            queue.push(Reverse(Wake {
                time: free_at,
                stage: i,
            }));
        }
    }

    if let Some(stuck) = state.iter().position(|s| s.next < s.program.len()) {
        return Err(Error::SchedulingDeadlock { stage: stuck });
    }

    trace.sort_by(|a, b| {
        a.time
            .total_cmp(&b.time)
            .then(a.device_stage.cmp(&b.device_stage))
            .then(a.kind.cmp(&b.kind))
            .then(a.microbatch_id.cmp(&b.microbatch_id))
    });
    let makespan = trace.iter().map(SimEvent::end).fold(0.0, f64::max);
    Ok(Schedule {
        makespan,
        trace,
        residency: state.iter().map(|s| s.residency).collect(),
    })
}

/// Per-stage durations of a plan, derived from the cost model.
pub fn plan_timings(
    plan: &Plan,
    model: &ModelProfile,
    cluster: &ClusterProfile,
    training: &TrainingConfig,
    transitions: bool,
) -> Result<Vec<StageTimings>> {
    let inputs = CostInputs {
        cluster,
        training,
        seq_len: model.seq_len,
        hidden_size: model.hidden_size,
    };
    let cost = PlanCost::evaluate(
        model,
        cluster,
        training,
        plan.pp,
        plan.microbatch,
        &plan.stage_ranges,
        &plan.layer_strategies,
        transitions,
    )?;
    let devices = cluster.n_devices / plan.pp;
    let pp = plan.pp as usize;
    let mut timings = Vec::with_capacity(pp);
    for (i, &[start, end]) in plan.stage_ranges.iter().enumerate() {
        let mut t = StageTimings::default();
        for (layer, s) in model.layers[start..end].iter().zip(&plan.layer_strategies[start..end]) {
            let bd = inputs.layer_time(layer, s, plan.microbatch)?;
            t.fwd += bd.forward();
            t.bwd += bd.backward();
            t.recompute += bd.recompute_extra;
        }
        let transition = cost.stages[i].transition_time;
        t.fwd += 0.5 * transition;
        t.bwd += 0.5 * transition;
        if i + 1 < pp {
            t.send_fwd = inputs.boundary_transfer_time(i, plan.microbatch, devices)?;
        }
        if i > 0 {
            t.send_bwd = inputs.boundary_transfer_time(i - 1, plan.microbatch, devices)?;
        }
        t.dp_sync = cost.stages[i].dp_sync_time;
        timings.push(t);
    }
    Ok(timings)
}

fn ensure_valid(
    plan: &Plan,
    model: &ModelProfile,
    cluster: &ClusterProfile,
    training: &TrainingConfig,
    transitions: bool,
) -> Result<()> {
    let violations = validate_plan(plan, model, cluster, training, transitions);
    if violations.is_empty() {
        return Ok(());
    }
    let listed: Vec<String> = violations.iter().map(ToString::to_string).collect();
    Err(Error::Validation(format!(
        "plan is inconsistent: {}",
        listed.join("; ")
    )))
}

/// Simulates one training iteration of `plan`.
pub fn simulate(
    plan: &Plan,
    model: &ModelProfile,
    cluster: &ClusterProfile,
    training: &TrainingConfig,
    opts: SimOptions,
) -> Result<SimResult> {
    ensure_valid(plan, model, cluster, training, opts.transitions)?;
    let timings = plan_timings(plan, model, cluster, training, opts.transitions)?;
    let schedule = simulate_schedule(&timings, plan.n_microbatches, opts.overlap_p2p)?;

    let mut stage_peak_memory = Vec::with_capacity(timings.len());
    for (&[start, end], residency) in plan.stage_ranges.iter().zip(&schedule.residency) {
        let layers = &model.layers[start..end];
        let strategies = &plan.layer_strategies[start..end];
        let resident = |count: u64| -> Result<f64> {
            stage_memory(layers, strategies, plan.microbatch, model.seq_len, count, training).map(|m| m.total())
        };
        let mut peak = resident(residency.max_in_flight.max(1))?;
        if let Some(count) = residency.max_in_flight_recomputing {
            let workspace = recompute_workspace(layers, strategies, plan.microbatch, model.seq_len)?;
            peak = peak.max(resident(count.max(1))? + workspace);
        }
        stage_peak_memory.push(peak);
    }

    let compute: f64 = schedule
        .trace
        .iter()
        .filter(|e| e.is_compute())
        .map(|e| e.duration)
        .sum();
    let bubble_fraction = if schedule.makespan > 0.0 {
        1.0 - compute / (plan.pp as f64 * schedule.makespan)
    } else {
        0.0
    };
    Ok(SimResult {
        makespan: schedule.makespan,
        stage_peak_memory,
        bubble_fraction,
        trace: schedule.trace,
    })
}

pub fn compare_with_analytic(
    plan: &Plan,
    model: &ModelProfile,
    cluster: &ClusterProfile,
    training: &TrainingConfig,
    opts: SimOptions,
) -> Result<Comparison> {
    let sim = simulate(plan, model, cluster, training, opts)?;
    let analytic = PlanCost::evaluate(
        model,
        cluster,
        training,
        plan.pp,
        plan.microbatch,
        &plan.stage_ranges,
        &plan.layer_strategies,
        opts.transitions,
    )?
    .iteration_time;
    Ok(Comparison {
        sim_makespan: sim.makespan,
        analytic_time: analytic,
        relative_gap: (sim.makespan - analytic) / analytic,
    })
}

/// Writes the trace as JSON lines, one event per line.
pub fn write_trace<W: Write>(trace: &[SimEvent], mut out: W) -> Result<()> {
    for e in trace {
        writeln!(out, "{}", canon::to_canonical_line(e)?)?;
    }
    Ok(())
}
