use std::fmt;

use crate::profiles::{is_pow2, ClusterProfile, ModelProfile, TrainingConfig};

use super::{Plan, PlanCost, PLAN_VERSION};

/// Relative tolerance for recorded costs against a fresh re-costing.
const STALE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub invariant: &'static str,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.invariant, self.detail)
    }
}

fn rel_diff(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / a.abs().max(b.abs())
    }
}

/// Re-derives every plan invariant and re-costs the plan. An empty result
/// means the plan is consistent with the given profiles.
pub fn validate_plan(
    plan: &Plan,
    model: &ModelProfile,
    cluster: &ClusterProfile,
    training: &TrainingConfig,
    transitions: bool,
) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |invariant: &'static str, detail: String| out.push(Violation { invariant, detail });
    let n_layers = model.n_layers as usize;

    if plan.version != PLAN_VERSION {
        push("unsupported version", format!("version {}", plan.version));
    }
    let pp_ok = is_pow2(plan.pp) && plan.pp <= cluster.n_devices && plan.pp <= model.n_layers;
    if !pp_ok {
        push(
            "invalid pipeline degree",
            format!(
                "pp={} with {} devices and {} layers",
                plan.pp, cluster.n_devices, model.n_layers
            ),
        );
    }

    let mut partition_ok = plan.stage_ranges.len() as u64 == plan.pp;
    let mut cursor = 0;
    for &[start, end] in &plan.stage_ranges {
        partition_ok &= start == cursor && end > start;
        cursor = end;
    }
    partition_ok &= cursor == n_layers;
    if !partition_ok {
        push(
            "stage_ranges not a partition",
            format!(
                "{:?} does not partition [0, {n_layers}) into {} stages",
                plan.stage_ranges, plan.pp
            ),
        );
    }

    let strategies_ok = plan.layer_strategies.len() == n_layers;
    if !strategies_ok {
        push(
            "layer_strategies length",
            format!("{} strategies for {n_layers} layers", plan.layer_strategies.len()),
        );
    }

    let devices = if pp_ok { cluster.n_devices / plan.pp } else { 0 };
    let mut layers_ok = true;
    for (i, s) in plan.layer_strategies.iter().enumerate() {
        if let Err(e) = s.check() {
            push("invalid strategy", format!("layer {i}: {e}"));
            layers_ok = false;
        }
        if pp_ok && s.tp * s.dp != devices {
            push(
                "strategy does not tile its stage",
                format!(
                    "layer {i}: tp*dp = {} but each stage has {devices} devices",
                    s.tp * s.dp
                ),
            );
            layers_ok = false;
        }
        if s.dp != 0 && !plan.microbatch.is_multiple_of(s.dp) {
            push(
                "microbatch not divisible by dp",
                format!("layer {i}: microbatch {} with dp {}", plan.microbatch, s.dp),
            );
            layers_ok = false;
        }
    }

    let batch_ok =
        plan.microbatch >= 1 && plan.microbatch.checked_mul(plan.n_microbatches) == Some(training.global_batch);
    if !batch_ok {
        push(
            "microbatch * n_microbatches != global_batch",
            format!(
                "{} * {} vs {}",
                plan.microbatch, plan.n_microbatches, training.global_batch
            ),
        );
    }

    if !(pp_ok && partition_ok && strategies_ok && layers_ok && batch_ok) {
        return out;
    }

    let cost = match PlanCost::evaluate(
        model,
        cluster,
        training,
        plan.pp,
        plan.microbatch,
        &plan.stage_ranges,
        &plan.layer_strategies,
        transitions,
    ) {
        Ok(c) => c,
        Err(e) => {
            push("cost evaluation failed", e.to_string());
            return out;
        }
    };

    let diff = rel_diff(plan.predicted_iteration_time, cost.iteration_time);
    // Written negated so a NaN cost is reported as stale.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    let stale = !(diff <= STALE_TOLERANCE);
    if stale {
        push(
            "stale cost",
            format!(
                "recorded iteration time {} vs re-costed {} (relative {diff:e})",
                plan.predicted_iteration_time, cost.iteration_time
            ),
        );
    }

    let budget = cluster.memory_budget();
    let peaks: Vec<u64> = cost.stages.iter().map(|s| s.peak_memory_bytes.ceil() as u64).collect();
    if plan.predicted_stage_peak_memory != peaks {
        push(
            "stale memory",
            format!(
                "recorded peaks {:?} vs re-costed {peaks:?}",
                plan.predicted_stage_peak_memory
            ),
        );
    }
    for (i, s) in cost.stages.iter().enumerate() {
        if s.peak_memory_bytes > budget {
            push(
                "stage memory exceeds budget",
                format!("stage {i}: {} bytes > {budget} bytes", s.peak_memory_bytes),
            );
        }
    }

    let breakdown_ok = plan.cost_breakdown.len() == cost.stages.len()
        && plan.cost_breakdown.iter().zip(&cost.stages).all(|(a, b)| {
            [
                (a.per_microbatch_time, b.per_microbatch_time),
                (a.dp_sync_time, b.dp_sync_time),
                (a.peak_memory_bytes, b.peak_memory_bytes),
                (a.transition_time, b.transition_time),
            ]
            .iter()
            .all(|&(x, y)| rel_diff(x, y) <= STALE_TOLERANCE)
        });
    if !breakdown_ok {
        push(
            "stale cost breakdown",
            "recorded stage costs differ from re-costing".into(),
        );
    }
    out
}
