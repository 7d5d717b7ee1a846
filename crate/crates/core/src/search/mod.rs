//! Plan search: pipeline degree and microbatch size in an outer loop, a
//! memory-bucketed dynamic program over per-layer strategies inside.

mod brute;
mod dp;
mod plan;
mod validate;

use std::time::Instant;

use rayon::prelude::*;

pub use brute::{brute_force_optimize, OracleLimits};
pub use dp::{dp_optimize_stage, StageChoice, StageFrontier, StageOption, StageProblem};
pub use plan::{load_plan, parse_plan, stage_split, Plan, PlanCost, PLAN_VERSION};
pub use validate::{validate_plan, Violation};

use crate::costmodel::CostInputs;
use crate::error::{Error, Result};
use crate::profiles::{ClusterProfile, ModelProfile, TrainingConfig};
use crate::strategy::{enumerate_strategies, ParallelStrategy, StrategyConstraints};

#[derive(Debug, Clone, PartialEq)]
pub struct SearchConfig {
    pub memory_buckets: usize,
    pub constraints: StrategyConstraints,
    pub transitions: bool,
    pub max_pp: Option<u64>,
    pub time_limit_s: Option<f64>,
    /// Worker threads for evaluating (pp, microbatch) pairs; `None` uses
    /// the global rayon pool.
    pub jobs: Option<usize>,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            memory_buckets: 1024,
            constraints: StrategyConstraints::default(),
            transitions: true,
            max_pp: None,
            time_limit_s: None,
            jobs: None,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.memory_buckets < 16 {
            return Err(Error::Validation("memory_buckets must be >= 16".into()));
        }
        if self.max_pp == Some(0) {
            return Err(Error::Validation("max_pp must be >= 1".into()));
        }
        self.constraints.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchOutcome {
    pub plan: Plan,
    /// True when the memory budget forced a slower plan than the best
    /// memory-unconstrained one.
    pub memory_binding: bool,
    /// False when the time limit cut the search short.
    pub completed: bool,
}

pub(crate) fn check_inputs(model: &ModelProfile, cluster: &ClusterProfile, training: &TrainingConfig) -> Result<()> {
    model.validate()?;
    cluster.validate()?;
    training.validate()
}

/// Pipeline degrees to try, ascending.
pub(crate) fn pipeline_degrees(model: &ModelProfile, cluster: &ClusterProfile, max_pp: Option<u64>) -> Vec<u64> {
    let cap = cluster.n_devices.min(model.n_layers).min(max_pp.unwrap_or(u64::MAX));
    std::iter::successors(Some(1u64), |p| Some(p * 2))
        .take_while(|&p| p <= cap)
        .collect()
}

/// Microbatch sizes to try, descending.
pub(crate) fn microbatch_sizes(training: &TrainingConfig) -> Vec<u64> {
    let mut sizes: Vec<u64> = std::iter::successors(Some(1u64), |m| Some(m * 2))
        .take_while(|&m| m <= training.global_batch)
        .collect();
    sizes.reverse();
    sizes
}

/// Strategies usable for a stage of `devices` devices when each
/// microbatch must split evenly across the data-parallel ranks.
pub(crate) fn stage_strategies(
    devices: u64,
    microbatch: u64,
    cluster: &ClusterProfile,
    constraints: &StrategyConstraints,
) -> Result<Vec<ParallelStrategy>> {
    Ok(enumerate_strategies(devices, cluster, constraints)?
        .into_iter()
        .filter(|s| microbatch.is_multiple_of(s.dp))
        .collect())
}

struct ComboResult {
    plan: Option<Plan>,
    unconstrained_time: Option<f64>,
    /// (stage, minimum achievable bytes) of the stage furthest from fitting.
    tightest: Option<(usize, f64)>,
    skipped: bool,
}

struct Combo {
    pp: u64,
    microbatch: u64,
}

/// Per-stage frontiers combined into the assignment minimizing the
/// iteration time. Returns `None` when some stage has no options.
fn combine_frontiers(
    frontiers: &[StageFrontier],
    p2p: &[f64],
    n_microbatches: u64,
    overlap: f64,
) -> Option<Vec<usize>> {
    let mut thresholds: Vec<f64> = frontiers
        .iter()
        .flat_map(|f| f.options.iter().map(|o| o.sync))
        .collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();

    let mut best: Option<(f64, Vec<usize>)> = None;
    for &cap in &thresholds {
        let picks: Option<Vec<usize>> = frontiers.iter().map(|f| f.fastest_within_sync(cap)).collect();
        let Some(picks) = picks else { continue };
        let chosen = frontiers.iter().zip(&picks).map(|(f, &k)| &f.options[k]);
        let mut slowest: f64 = 0.0;
        let mut traversal = 0.0;
        let mut sync: f64 = 0.0;
        for (o, p) in chosen.zip(p2p) {
            let t = o.time + p;
            slowest = slowest.max(t);
            traversal += t;
            sync = sync.max(o.sync * (1.0 - overlap));
        }
        let total = (n_microbatches as f64 - 1.0) * slowest + traversal + sync;
        if best.as_ref().is_none_or(|(b, _)| total < *b) {
            best = Some((total, picks));
        }
    }
    best.map(|(_, picks)| picks)
}

fn evaluate_combo(
    combo: &Combo,
    model: &ModelProfile,
    cluster: &ClusterProfile,
    training: &TrainingConfig,
    cfg: &SearchConfig,
) -> Result<ComboResult> {
    let Combo { pp, microbatch } = *combo;
    let devices = cluster.n_devices / pp;
    let n_microbatches = training.global_batch / microbatch;
    let strategies = stage_strategies(devices, microbatch, cluster, &cfg.constraints)?;
    let empty = ComboResult {
        plan: None,
        unconstrained_time: None,
        tightest: None,
        skipped: false,
    };
    if strategies.is_empty() {
        return Ok(empty);
    }
    let inputs = CostInputs {
        cluster,
        training,
        seq_len: model.seq_len,
        hidden_size: model.hidden_size,
    };
    let ranges = stage_split(model.n_layers as usize, pp as usize);
    let p2p = inputs.stage_p2p_times(pp, microbatch, devices)?;
    let budget = cluster.memory_budget();

    let problem = |stage: usize, budget: Option<f64>| StageProblem {
        inputs,
        layers: &model.layers[ranges[stage][0]..ranges[stage][1]],
        strategies: &strategies,
        stage_index: stage,
        pp,
        microbatch,
        n_microbatches,
        transitions: cfg.transitions,
        budget,
        memory_buckets: cfg.memory_buckets,
    };

    let assemble = |frontiers: &[StageFrontier]| -> Result<Option<Plan>> {
        let Some(picks) = combine_frontiers(frontiers, &p2p, n_microbatches, training.comm_overlap_fraction) else {
            return Ok(None);
        };
        let assignment: Vec<ParallelStrategy> = frontiers
            .iter()
            .zip(&picks)
            .flat_map(|(f, &k)| f.options[k].choices.iter().map(|&i| strategies[i]))
            .collect();
        Plan::build(model, cluster, training, pp, microbatch, assignment, cfg.transitions).map(Some)
    };

    let mut unconstrained = Vec::with_capacity(pp as usize);
    for stage in 0..pp as usize {
        unconstrained.push(problem(stage, None).frontier()?);
    }
    let unconstrained_time = assemble(&unconstrained)?.map(|p| p.predicted_iteration_time);

    let mut frontiers = Vec::with_capacity(pp as usize);
    let mut tightest: Option<(usize, f64)> = None;
    let mut feasible = true;
    for stage in 0..pp as usize {
        let prob = problem(stage, Some(budget));
        match prob.frontier() {
            Ok(f) => frontiers.push(f),
            Err(Error::Infeasible { .. }) => feasible = false,
            Err(e) => return Err(e),
        }
        let need = prob.min_memory_bytes()?;
        if need > budget && tightest.is_none_or(|(_, t)| need > t) {
            tightest = Some((stage, need));
        }
    }
    let plan = if feasible { assemble(&frontiers)? } else { None };
    Ok(ComboResult {
        plan,
        unconstrained_time,
        tightest,
        skipped: false,
    })
}

/// Searches for the plan with the lowest predicted iteration time.
pub fn search(
    model: &ModelProfile,
    cluster: &ClusterProfile,
    training: &TrainingConfig,
    cfg: &SearchConfig,
) -> Result<SearchOutcome> {
    check_inputs(model, cluster, training)?;
    cfg.validate()?;

    let combos: Vec<Combo> = pipeline_degrees(model, cluster, cfg.max_pp)
        .into_iter()
        .flat_map(|pp| {
            microbatch_sizes(training)
                .into_iter()
                .map(move |microbatch| Combo { pp, microbatch })
        })
        .collect();

    let started = Instant::now();
    let run = |combo: &Combo| -> Result<ComboResult> {
        if let Some(limit) = cfg.time_limit_s {
            if started.elapsed().as_secs_f64() > limit {
                return Ok(ComboResult {
                    plan: None,
                    unconstrained_time: None,
                    tightest: None,
                    skipped: true,
                });
            }
        }
        evaluate_combo(combo, model, cluster, training, cfg)
    };
    let results: Vec<Result<ComboResult>> = match cfg.jobs {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map_err(|e| Error::Validation(format!("cannot start {n} worker threads: {e}")))?
            .install(|| combos.par_iter().map(run).collect()),
        None => combos.par_iter().map(run).collect(),
    };

    let mut best: Option<Plan> = None;
    let mut best_unconstrained: Option<f64> = None;
    let mut completed = true;
    let mut diagnostic: Option<(f64, String)> = None;
    let budget = cluster.memory_budget();
    for (combo, result) in combos.iter().zip(results) {
        let r = result?;
        completed &= !r.skipped;
        if let Some(t) = r.unconstrained_time {
            if best_unconstrained.is_none_or(|b| t < b) {
                best_unconstrained = Some(t);
            }
        }
        if let Some(plan) = r.plan {
            if best
                .as_ref()
                .is_none_or(|b| plan.predicted_iteration_time < b.predicted_iteration_time)
            {
                best = Some(plan);
            }
        } else if let Some((stage, need)) = r.tightest {
            if diagnostic.as_ref().is_none_or(|(d, _)| need < *d) {
                diagnostic = Some((
                    need,
                    format!(
                        "tightest stage {stage} (pp={}, microbatch={}) needs at least {need:.0} bytes per device, budget is {budget:.0} bytes",
                        combo.pp, combo.microbatch
                    ),
                ));
            }
        }
    }

    let Some(plan) = best else {
        let msg = diagnostic
            .map(|(_, m)| m)
            .unwrap_or_else(|| "no (pp, microbatch) combination admits any strategy".into());
        return Err(Error::NoFeasiblePlan(msg));
    };
    let memory_binding = match best_unconstrained {
        Some(free) => plan.predicted_iteration_time > free * (1.0 + 1e-12),
        None => false,
    };
    Ok(SearchOutcome {
        plan,
        memory_binding,
        completed,
    })
}

pub fn optimize(
    model: &ModelProfile,
    cluster: &ClusterProfile,
    training: &TrainingConfig,
    cfg: &SearchConfig,
) -> Result<Plan> {
    search(model, cluster, training, cfg).map(|o| o.plan)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::profiles::{synth_cluster, synth_transformer_profile, LinkSpec};

    fn link(bw: f64) -> LinkSpec {
        LinkSpec {
            bus_bandwidth: bw,
            latency: 1e-6,
        }
    }

    #[test]
    fn degrees_and_microbatches() {
        let model = synth_transformer_profile(3, 16, 16).unwrap();
        let cluster = synth_cluster(8, 8, 1e12, 1 << 30, link(1e11), link(1e10)).unwrap();
        assert_eq!(pipeline_degrees(&model, &cluster, None), vec![1, 2]);
        assert_eq!(pipeline_degrees(&model, &cluster, Some(1)), vec![1]);
        assert_eq!(microbatch_sizes(&TrainingConfig::new(8)), vec![8, 4, 2, 1]);
    }

    #[test]
    fn single_device_prefers_no_recompute() {
        let model = synth_transformer_profile(2, 64, 128).unwrap();
        let cluster = synth_cluster(1, 1, 1e12, 1 << 34, link(1e11), link(1e10)).unwrap();
        let plan = optimize(&model, &cluster, &TrainingConfig::new(4), &SearchConfig::default()).unwrap();
        assert_eq!(plan.pp, 1);
        assert!(plan
            .layer_strategies
            .iter()
            .all(|s| !s.recompute && s.tp == 1 && s.dp == 1));
    }

    #[test]
    fn single_device_recomputes_when_memory_is_short() {
        let model = synth_transformer_profile(2, 64, 128).unwrap();
        let training = TrainingConfig::new(4);
        let p = model.layers[0].param_count;
        // microbatch 1: full activation 128 * 34h, boundary 128 * 2h per layer.
        let states = 2.0 * 16.0 * p;
        let full = 128.0 * 34.0 * 64.0;
        let boundary = 128.0 * 2.0 * 64.0;
        // Fits both layers recomputed plus one rematerialized layer, but
        // not two fully resident layers.
        let budget = states + 2.0 * boundary + full + 10_000.0;
        assert!(budget < states + 2.0 * full);
        let cluster = synth_cluster(1, 1, 1e12, budget as u64, link(1e11), link(1e10)).unwrap();
        let out = search(&model, &cluster, &training, &SearchConfig::default()).unwrap();
        assert_eq!(out.plan.microbatch, 1);
        assert!(out.plan.layer_strategies.iter().all(|s| s.recompute));
        assert!(out.memory_binding);
    }

    #[test]
    fn infeasible_reports_tightest_stage() {
        let model = synth_transformer_profile(2, 64, 128).unwrap();
        let cluster = synth_cluster(2, 2, 1e12, 1024, link(1e11), link(1e10)).unwrap();
        match optimize(&model, &cluster, &TrainingConfig::new(4), &SearchConfig::default()) {
            Err(Error::NoFeasiblePlan(msg)) => assert!(msg.contains("tightest stage"), "{msg}"),
            other => panic!("expected NoFeasiblePlan, got {other:?}"),
        }
    }

    #[test]
    fn rejects_too_few_buckets() {
        let model = synth_transformer_profile(1, 8, 8).unwrap();
        let cluster = synth_cluster(1, 1, 1e12, 1 << 30, link(1e11), link(1e10)).unwrap();
        let cfg = SearchConfig {
            memory_buckets: 8,
            ..Default::default()
        };
        assert!(optimize(&model, &cluster, &TrainingConfig::new(1), &cfg).is_err());
    }
}
