use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::canon;
use crate::costmodel::{iteration_time, CostInputs, StageCost};
use crate::error::{Error, Result};
use crate::profiles::{ClusterProfile, ModelProfile, TrainingConfig};
use crate::strategy::ParallelStrategy;

pub const PLAN_VERSION: u32 = 1;

/// A complete hybrid-parallel training plan. Field order is the canonical
/// key order of the plan file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Plan {
    pub version: u32,
    pub pp: u64,
    pub microbatch: u64,
    pub n_microbatches: u64,
    /// Half-open `[start, end)` layer intervals, one per stage.
    pub stage_ranges: Vec<[usize; 2]>,
    pub layer_strategies: Vec<ParallelStrategy>,
    pub predicted_iteration_time: f64,
    pub predicted_stage_peak_memory: Vec<u64>,
    pub cost_breakdown: Vec<StageCost>,
}

/// Costs of a concrete assignment, before it is frozen into a [`Plan`].
#[derive(Debug, Clone, PartialEq)]
pub struct PlanCost {
    pub stages: Vec<StageCost>,
    /// Per-microbatch boundary transfer charge of each stage.
    pub p2p: Vec<f64>,
    pub iteration_time: f64,
}

/// Contiguous near-equal split: every stage gets `n_layers / pp` layers
/// and the first `n_layers % pp` stages one more.
pub fn stage_split(n_layers: usize, pp: usize) -> Vec<[usize; 2]> {
    let base = n_layers / pp;
    let extra = n_layers % pp;
    let mut start = 0;
    (0..pp)
        .map(|i| {
            let len = base + usize::from(i < extra);
            let range = [start, start + len];
            start += len;
            range
        })
        .collect()
}

impl PlanCost {
    #[allow(clippy::too_many_arguments)]
    pub fn evaluate(
        model: &ModelProfile,
        cluster: &ClusterProfile,
        training: &TrainingConfig,
        pp: u64,
        microbatch: u64,
        stage_ranges: &[[usize; 2]],
        strategies: &[ParallelStrategy],
        transitions: bool,
    ) -> Result<PlanCost> {
        let inputs = CostInputs {
            cluster,
            training,
            seq_len: model.seq_len,
            hidden_size: model.hidden_size,
        };
        let n_microbatches = training.global_batch / microbatch;
        let devices = cluster.n_devices / pp;
        let stages = stage_ranges
            .iter()
            .enumerate()
            .map(|(i, &[start, end])| {
                inputs.stage_cost(
                    &model.layers[start..end],
                    &strategies[start..end],
                    i,
                    pp,
                    microbatch,
                    n_microbatches,
                    transitions,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let p2p = inputs.stage_p2p_times(pp, microbatch, devices)?;
        let iteration_time = iteration_time(&stages, n_microbatches, &p2p);
        Ok(PlanCost {
            stages,
            p2p,
            iteration_time,
        })
    }
}

impl Plan {
    /// Costs `strategies` (one per layer) under the near-equal stage split.
    pub fn build(
        model: &ModelProfile,
        cluster: &ClusterProfile,
        training: &TrainingConfig,
        pp: u64,
        microbatch: u64,
        strategies: Vec<ParallelStrategy>,
        transitions: bool,
    ) -> Result<Plan> {
        let stage_ranges = stage_split(model.n_layers as usize, pp as usize);
        let cost = PlanCost::evaluate(
            model,
            cluster,
            training,
            pp,
            microbatch,
            &stage_ranges,
            &strategies,
            transitions,
        )?;
        Ok(Plan {
            version: PLAN_VERSION,
            pp,
            microbatch,
            n_microbatches: training.global_batch / microbatch,
            stage_ranges,
            layer_strategies: strategies,
            predicted_iteration_time: cost.iteration_time,
            predicted_stage_peak_memory: cost.stages.iter().map(|s| s.peak_memory_bytes.ceil() as u64).collect(),
            cost_breakdown: cost.stages,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        canon::to_canonical_string(self)
    }

    pub fn stage_of_layer(&self, layer: usize) -> Option<usize> {
        self.stage_ranges.iter().position(|&[s, e]| (s..e).contains(&layer))
    }
}

/// Parses a plan file. Structural consistency is checked separately by
/// [`super::validate_plan`].
pub fn parse_plan(text: &str) -> Result<Plan> {
    let plan: Plan = serde_json::from_str(text)?;
    if plan.version != PLAN_VERSION {
        return Err(Error::Validation(format!(
            "unsupported plan version {} (expected {PLAN_VERSION})",
            plan.version
        )));
    }
    Ok(plan)
}

pub fn load_plan(path: &Path) -> Result<Plan> {
    let text = std::fs::read_to_string(path)?;
    parse_plan(&text)
}
