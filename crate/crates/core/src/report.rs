//! Structured cost breakdowns of a plan, for plotting and inspection.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::canon::{self, format_g17};
use crate::costmodel::{in_flight_microbatches, layer_memory, stage_group, transition_time, CostInputs};
use crate::error::Result;
use crate::pipesim::{compare_with_analytic, simulate, SimOptions};
use crate::profiles::{ClusterProfile, ModelProfile, TrainingConfig};
use crate::search::{Plan, PlanCost};
use crate::strategy::ParallelStrategy;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanSummary {
    pub pp: u64,
    pub microbatch: u64,
    pub n_microbatches: u64,
    pub devices_per_stage: u64,
    pub predicted_iteration_time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub layer: usize,
    pub stage: usize,
    pub strategy: ParallelStrategy,
    /// Per microbatch, excluding the layout transition into this layer.
    pub time: f64,
    pub transition_in: f64,
    pub fwd_compute: f64,
    pub bwd_compute: f64,
    pub recompute_extra: f64,
    pub tp_comm: f64,
    pub zero3_param_gather: f64,
    /// Per iteration, before overlap.
    pub dp_sync: f64,
    pub param_bytes: f64,
    pub grad_bytes: f64,
    pub optimizer_bytes: f64,
    pub activation_bytes: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: usize,
    pub layers: [usize; 2],
    pub per_microbatch_time: f64,
    pub compute_time: f64,
    pub tp_comm_time: f64,
    pub zero3_time: f64,
    pub transition_time: f64,
    pub p2p_time: f64,
    pub dp_sync_time: f64,
    pub param_bytes: f64,
    pub grad_bytes: f64,
    pub optimizer_bytes: f64,
    pub activation_bytes: f64,
    pub recompute_workspace_bytes: f64,
    pub peak_memory_bytes: f64,
    pub simulated_peak_memory_bytes: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub sim_makespan: f64,
    pub analytic_time: f64,
    pub relative_gap: f64,
    pub bubble_fraction: f64,
    pub overlap_p2p: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportBundle {
    pub summary: PlanSummary,
    pub layers: Vec<LayerReport>,
    pub stages: Vec<StageReport>,
    pub simulation: SimulationReport,
}

pub fn build_report(
    plan: &Plan,
    model: &ModelProfile,
    cluster: &ClusterProfile,
    training: &TrainingConfig,
    opts: SimOptions,
) -> Result<ReportBundle> {
    let sim = simulate(plan, model, cluster, training, opts)?;
    let gap = compare_with_analytic(plan, model, cluster, training, opts)?;
    let cost = PlanCost::evaluate(
        model,
        cluster,
        training,
        plan.pp,
        plan.microbatch,
        &plan.stage_ranges,
        &plan.layer_strategies,
        opts.transitions,
    )?;
    let inputs = CostInputs {
        cluster,
        training,
        seq_len: model.seq_len,
        hidden_size: model.hidden_size,
    };
    let devices = cluster.n_devices / plan.pp;

    let mut layers = Vec::with_capacity(model.layers.len());
    for (stage, &[start, end]) in plan.stage_ranges.iter().enumerate() {
        let in_flight = in_flight_microbatches(plan.n_microbatches, plan.pp, stage);
        for l in start..end {
            let layer = &model.layers[l];
            let s = plan.layer_strategies[l];
            let t = inputs.layer_time(layer, &s, plan.microbatch)?;
            let mem = layer_memory(layer, &s, plan.microbatch, model.seq_len, in_flight, training)?;
            let transition_in = if opts.transitions && l > start {
                let boundary = plan.microbatch as f64 * model.seq_len as f64 * layer.boundary_bytes_per_token;
                transition_time(
                    &plan.layer_strategies[l - 1],
                    &s,
                    boundary,
                    stage_group(devices, cluster),
                    cluster,
                )?
            } else {
                0.0
            };
            layers.push(LayerReport {
                layer: l,
                stage,
                strategy: s,
                time: t.total(),
                transition_in,
                fwd_compute: t.fwd_compute,
                bwd_compute: t.bwd_compute,
                recompute_extra: t.recompute_extra,
                tp_comm: t.tp_comm,
                zero3_param_gather: t.zero3_param_gather,
                dp_sync: inputs.layer_dp_sync(layer, &s)?,
                param_bytes: mem.param_bytes,
                grad_bytes: mem.grad_bytes,
                optimizer_bytes: mem.optimizer_bytes,
                activation_bytes: mem.activation_bytes,
            });
        }
    }

    let stages = cost
        .stages
        .iter()
        .enumerate()
        .map(|(i, c)| StageReport {
            stage: i,
            layers: plan.stage_ranges[i],
            per_microbatch_time: c.per_microbatch_time,
            compute_time: c.compute_time,
            tp_comm_time: c.tp_comm_time,
            zero3_time: c.zero3_time,
            transition_time: c.transition_time,
            p2p_time: cost.p2p[i],
            dp_sync_time: c.dp_sync_time,
            param_bytes: c.memory.param_bytes,
            grad_bytes: c.memory.grad_bytes,
            optimizer_bytes: c.memory.optimizer_bytes,
            activation_bytes: c.memory.activation_bytes,
            recompute_workspace_bytes: c.recompute_workspace_bytes,
            peak_memory_bytes: c.peak_memory_bytes,
            simulated_peak_memory_bytes: sim.stage_peak_memory[i],
        })
        .collect();

    Ok(ReportBundle {
        summary: PlanSummary {
            pp: plan.pp,
            microbatch: plan.microbatch,
            n_microbatches: plan.n_microbatches,
            devices_per_stage: devices,
            predicted_iteration_time: cost.iteration_time,
        },
        layers,
        stages,
        simulation: SimulationReport {
            sim_makespan: gap.sim_makespan,
            analytic_time: gap.analytic_time,
            relative_gap: gap.relative_gap,
            bubble_fraction: sim.bubble_fraction,
            overlap_p2p: opts.overlap_p2p,
        },
    })
}

pub const CSV_HEADER: &str =
    "scope,index,stage,tp,dp,zero_stage,sp,recompute,time,compute,tp_comm,zero3,transition,p2p,dp_sync,memory_bytes";

fn strategy_cells(s: &ParallelStrategy) -> String {
    format!("{},{},{},{},{}", s.tp, s.dp, s.zero_stage, s.sp, s.recompute)
}

impl ReportBundle {
    pub fn to_json(&self) -> Result<String> {
        canon::to_canonical_string(self)
    }

    /// One row per layer, one per stage and a final total row.
    pub fn to_csv(&self) -> String {
        let g = format_g17;
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for l in &self.layers {
            let memory = l.param_bytes + l.grad_bytes + l.optimizer_bytes + l.activation_bytes;
            let _ = writeln!(
                out,
                "layer,{},{},{},{},{},{},{},{},,{},{}",
                l.layer,
                l.stage,
                strategy_cells(&l.strategy),
                g(l.time),
                g(l.fwd_compute + l.bwd_compute + l.recompute_extra),
                g(l.tp_comm),
                g(l.zero3_param_gather),
                g(l.transition_in),
                g(l.dp_sync),
                g(memory),
            );
        }
        for s in &self.stages {
            let _ = writeln!(
                out,
                "stage,{},{},,,,,,{},{},{},{},{},{},{},{}",
                s.stage,
                s.stage,
                g(s.per_microbatch_time),
                g(s.compute_time),
                g(s.tp_comm_time),
                g(s.zero3_time),
                g(s.transition_time),
                g(s.p2p_time),
                g(s.dp_sync_time),
                g(s.peak_memory_bytes),
            );
        }
        let peak = self.stages.iter().map(|s| s.peak_memory_bytes).fold(0.0, f64::max);
        let _ = writeln!(
            out,
            "total,,,,,,,,{},,,,,,,{}",
            g(self.summary.predicted_iteration_time),
            g(peak)
        );
        out
    }
}
