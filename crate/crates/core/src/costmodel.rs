//! Time and memory cost model for layers, pipeline stages and whole
//! training iterations.
//!
//! Times are seconds per microbatch unless noted; memory is bytes per
//! device. Communication goes through the ring estimates in
//! [`crate::collectives`].

use serde::{Deserialize, Serialize};

use crate::collectives::{all_gather_time, all_reduce_time, p2p_time, reduce_scatter_time, CommGroup};
use crate::error::{Error, Result};
use crate::profiles::{ClusterProfile, LayerProfile, TrainingConfig};
use crate::strategy::ParallelStrategy;

/// Backward FLOPs per forward FLOP for dense layers.
pub const BACKWARD_FORWARD_RATIO: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TimeBreakdown {
    pub fwd_compute: f64,
    pub bwd_compute: f64,
    pub recompute_extra: f64,
    /// Forward and backward tensor-parallel collectives together.
    pub tp_comm: f64,
    pub zero3_param_gather: f64,
}

impl TimeBreakdown {
    pub fn total(&self) -> f64 {
        self.fwd_compute + self.bwd_compute + self.recompute_extra + self.tp_comm + self.zero3_param_gather
    }

    /// Portion spent in the forward pass; communication splits evenly
    /// between passes.
    pub fn forward(&self) -> f64 {
        self.fwd_compute + 0.5 * self.tp_comm + 0.5 * self.zero3_param_gather
    }

    /// Portion spent in the backward pass, excluding recomputation.
    pub fn backward(&self) -> f64 {
        self.bwd_compute + 0.5 * self.tp_comm + 0.5 * self.zero3_param_gather
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemoryBreakdown {
    pub param_bytes: f64,
    pub grad_bytes: f64,
    pub optimizer_bytes: f64,
    pub activation_bytes: f64,
}

impl MemoryBreakdown {
    pub fn total(&self) -> f64 {
        self.param_bytes + self.grad_bytes + self.optimizer_bytes + self.activation_bytes
    }

    fn accumulate(&mut self, other: &MemoryBreakdown) {
        self.param_bytes += other.param_bytes;
        self.grad_bytes += other.grad_bytes;
        self.optimizer_bytes += other.optimizer_bytes;
        self.activation_bytes += other.activation_bytes;
    }
}

/// Aggregated cost of one pipeline stage.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageCost {
    pub per_microbatch_time: f64,
    /// Per iteration.
    pub dp_sync_time: f64,
    pub peak_memory_bytes: f64,
    pub transition_time: f64,
    pub compute_time: f64,
    pub tp_comm_time: f64,
    pub zero3_time: f64,
    pub memory: MemoryBreakdown,
    /// Largest single-layer activation rematerialized during a backward pass.
    pub recompute_workspace_bytes: f64,
}

/// Model-wide and hardware inputs shared by every cost query.
#[derive(Debug, Clone, Copy)]
pub struct CostInputs<'a> {
    pub cluster: &'a ClusterProfile,
    pub training: &'a TrainingConfig,
    pub seq_len: u64,
    pub hidden_size: u64,
}

fn check_divisible(microbatch: u64, dp: u64) -> Result<()> {
    if dp == 0 || !microbatch.is_multiple_of(dp) {
        return Err(Error::IndivisibleMicrobatch { microbatch, dp });
    }
    Ok(())
}

pub fn tp_group(s: &ParallelStrategy, cluster: &ClusterProfile) -> CommGroup {
    CommGroup::contiguous(s.tp, cluster.devices_per_node)
}

/// Data-parallel ranks are strided by the tensor degree, so the group
/// spans all of the stage's devices.
pub fn dp_group(s: &ParallelStrategy, cluster: &ClusterProfile) -> CommGroup {
    CommGroup::spanning(s.dp, s.tp * s.dp, cluster.devices_per_node)
}

pub fn stage_group(devices_per_stage: u64, cluster: &ClusterProfile) -> CommGroup {
    CommGroup::contiguous(devices_per_stage, cluster.devices_per_node)
}

impl CostInputs<'_> {
    pub fn layer_time(&self, layer: &LayerProfile, s: &ParallelStrategy, microbatch: u64) -> Result<TimeBreakdown> {
        check_divisible(microbatch, s.dp)?;
        let b = microbatch as f64;
        let seq = self.seq_len as f64;
        let tokens = b * seq;
        let devices = (s.tp * s.dp) as f64;

        let flops = layer.flops_per_token * tokens + layer.flops_per_token_sq * b * seq * seq;
        let fwd_compute = flops / (devices * self.cluster.device_flops);
        let bwd_compute = BACKWARD_FORWARD_RATIO * fwd_compute;

        let hidden_bytes = self.training.bytes_per_param * self.hidden_size as f64;
        let volume = 2.0 * tokens * hidden_bytes / s.dp as f64;
        let one_all_reduce = all_reduce_time(tp_group(s, self.cluster), volume, self.cluster)?;
        let tp_comm = 4.0 * one_all_reduce;
        let recompute_extra = if s.recompute {
            fwd_compute + 2.0 * one_all_reduce
        } else {
            0.0
        };

        let zero3_param_gather = if s.zero_stage == 3 {
            let shard = self.training.bytes_per_param * layer.param_count / s.tp as f64;
            2.0 * all_gather_time(dp_group(s, self.cluster), shard, self.cluster)?
        } else {
            0.0
        };

        Ok(TimeBreakdown {
            fwd_compute,
            bwd_compute,
            recompute_extra,
            tp_comm,
            zero3_param_gather,
        })
    }

    /// Gradient (and, when sharded, parameter) collectives one layer issues
    /// once per iteration, before the overlap discount.
    pub fn layer_dp_sync(&self, layer: &LayerProfile, s: &ParallelStrategy) -> Result<f64> {
        let params = layer.param_count / s.tp as f64;
        let group = dp_group(s, self.cluster);
        let grads = self.training.bytes_per_grad * params;
        if s.zero_stage == 0 {
            all_reduce_time(group, grads, self.cluster)
        } else {
            let weights = self.training.bytes_per_param * params;
            Ok(reduce_scatter_time(group, grads, self.cluster)? + all_gather_time(group, weights, self.cluster)?)
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn stage_cost(
        &self,
        layers: &[LayerProfile],
        strategies: &[ParallelStrategy],
        stage_index: usize,
        pp: u64,
        microbatch: u64,
        n_microbatches: u64,
        transitions: bool,
    ) -> Result<StageCost> {
        assert_eq!(layers.len(), strategies.len(), "one strategy per layer");
        let Some(first) = strategies.first() else {
            return Ok(StageCost::default());
        };
        let devices = first.devices();
        if let Some(bad) = strategies.iter().find(|s| s.devices() != devices) {
            return Err(Error::InconsistentStrategy {
                tp: bad.tp,
                dp: bad.dp,
                devices_per_stage: devices,
            });
        }
        let in_flight = in_flight_microbatches(n_microbatches, pp, stage_index);

        let mut cost = StageCost::default();
        let mut layer_sum = 0.0;
        let mut sync = 0.0;
        for (layer, s) in layers.iter().zip(strategies) {
            let t = self.layer_time(layer, s, microbatch)?;
            layer_sum += t.total();
            cost.compute_time += t.fwd_compute + t.bwd_compute + t.recompute_extra;
            cost.tp_comm_time += t.tp_comm;
            cost.zero3_time += t.zero3_param_gather;
            sync += self.layer_dp_sync(layer, s)?;
        }
        cost.memory = stage_memory(layers, strategies, microbatch, self.seq_len, in_flight, self.training)?;
        if transitions {
            let group = stage_group(devices, self.cluster);
            for (j, pair) in strategies.windows(2).enumerate() {
                let boundary = microbatch as f64 * self.seq_len as f64 * layers[j + 1].boundary_bytes_per_token;
                cost.transition_time += transition_time(&pair[0], &pair[1], boundary, group, self.cluster)?;
            }
        }
        cost.recompute_workspace_bytes = recompute_workspace(layers, strategies, microbatch, self.seq_len)?;
        cost.per_microbatch_time = layer_sum + cost.transition_time;
        cost.dp_sync_time = sync * (1.0 - self.training.comm_overlap_fraction);
        cost.peak_memory_bytes = cost.memory.total() + cost.recompute_workspace_bytes;
        Ok(cost)
    }

    /// Bytes one device sends across a stage boundary per microbatch in
    /// one direction; the hidden state is split over the stage's devices.
    pub fn p2p_volume(&self, microbatch: u64, devices_per_stage: u64) -> f64 {
        microbatch as f64 * self.seq_len as f64 * self.hidden_size as f64 * self.training.bytes_per_param
            / devices_per_stage as f64
    }

    /// One-directional transfer time across the boundary after `stage_index`.
    pub fn boundary_transfer_time(&self, stage_index: usize, microbatch: u64, devices_per_stage: u64) -> Result<f64> {
        let volume = self.p2p_volume(microbatch, devices_per_stage);
        p2p_time(
            volume,
            boundary_crosses_node(stage_index, devices_per_stage, self.cluster),
            self.cluster,
        )
    }

    /// Per-microbatch boundary charge for each stage: activations sent to
    /// the next stage plus gradients sent to the previous one.
    pub fn stage_p2p_times(&self, pp: u64, microbatch: u64, devices_per_stage: u64) -> Result<Vec<f64>> {
        let pp = pp as usize;
        let boundaries = (0..pp.saturating_sub(1))
            .map(|i| self.boundary_transfer_time(i, microbatch, devices_per_stage))
            .collect::<Result<Vec<f64>>>()?;
        Ok((0..pp)
            .map(|i| {
                let forward = if i + 1 < pp { boundaries[i] } else { 0.0 };
                let backward = if i > 0 { boundaries[i - 1] } else { 0.0 };
                forward + backward
            })
            .collect())
    }
}

/// 1F1B warmup depth for a stage.
pub fn in_flight_microbatches(n_microbatches: u64, pp: u64, stage_index: usize) -> u64 {
    n_microbatches.min(pp - stage_index as u64).max(1)
}

/// Whether rank `r` of stage `i` and rank `r` of stage `i + 1` sit on
/// different nodes under contiguous placement.
pub fn boundary_crosses_node(stage_index: usize, devices_per_stage: u64, cluster: &ClusterProfile) -> bool {
    ((stage_index as u64 + 1) * devices_per_stage).is_multiple_of(cluster.devices_per_node)
}

/// Activation bytes of one microbatch held between a layer's forward and
/// backward pass, ignoring recomputation.
pub fn full_activation_bytes(layer: &LayerProfile, s: &ParallelStrategy, microbatch: u64, seq_len: u64) -> f64 {
    let tokens = (microbatch * seq_len) as f64 / s.dp as f64;
    let tp = s.tp as f64;
    let replicated_split = if s.sp { tp } else { 1.0 };
    tokens * (layer.act_shardable_bytes_per_token / tp + layer.act_replicated_bytes_per_token / replicated_split)
}

pub fn layer_memory(
    layer: &LayerProfile,
    s: &ParallelStrategy,
    microbatch: u64,
    seq_len: u64,
    in_flight: u64,
    training: &TrainingConfig,
) -> Result<MemoryBreakdown> {
    check_divisible(microbatch, s.dp)?;
    assert!(in_flight >= 1, "at least one microbatch is in flight");
    let params = layer.param_count / s.tp as f64;
    let dp = s.dp as f64;
    let shard = |from_stage: u8| if s.zero_stage >= from_stage { dp } else { 1.0 };

    let per_microbatch = if s.recompute {
        (microbatch * seq_len) as f64 / dp * layer.boundary_bytes_per_token
    } else {
        full_activation_bytes(layer, s, microbatch, seq_len)
    };
    Ok(MemoryBreakdown {
        param_bytes: training.bytes_per_param * params / shard(3),
        grad_bytes: training.bytes_per_grad * params / shard(2),
        optimizer_bytes: training.optimizer_bytes_per_param * params / shard(1),
        activation_bytes: in_flight as f64 * per_microbatch,
    })
}

/// Per-device memory of a stage's layers with `in_flight` microbatches of
/// activations resident.
pub fn stage_memory(
    layers: &[LayerProfile],
    strategies: &[ParallelStrategy],
    microbatch: u64,
    seq_len: u64,
    in_flight: u64,
    training: &TrainingConfig,
) -> Result<MemoryBreakdown> {
    let mut total = MemoryBreakdown::default();
    for (layer, s) in layers.iter().zip(strategies) {
        total.accumulate(&layer_memory(layer, s, microbatch, seq_len, in_flight, training)?);
    }
    Ok(total)
}

/// Extra bytes a stage needs while one recomputed layer is rematerialized.
pub fn recompute_workspace(
    layers: &[LayerProfile],
    strategies: &[ParallelStrategy],
    microbatch: u64,
    seq_len: u64,
) -> Result<f64> {
    let mut workspace: f64 = 0.0;
    for (layer, s) in layers.iter().zip(strategies) {
        check_divisible(microbatch, s.dp)?;
        if s.recompute {
            workspace = workspace.max(full_activation_bytes(layer, s, microbatch, seq_len));
        }
    }
    Ok(workspace)
}

/// Cost of redistributing the boundary tensor between adjacent layers
/// whose layouts differ. Modeled as one all-gather over the stage.
pub fn transition_time(
    prev: &ParallelStrategy,
    next: &ParallelStrategy,
    layer_boundary_bytes: f64,
    stage_group: CommGroup,
    cluster: &ClusterProfile,
) -> Result<f64> {
    if prev.layout() == next.layout() {
        return Ok(0.0);
    }
    all_gather_time(stage_group, layer_boundary_bytes, cluster)
}

/// 1F1B iteration time: the slowest stage paces `m - 1` microbatches, one
/// microbatch traverses every stage, then the slowest data-parallel sync.
pub fn iteration_time(stages: &[StageCost], n_microbatches: u64, p2p: &[f64]) -> f64 {
    assert_eq!(stages.len(), p2p.len(), "one p2p charge per stage");
    let per_stage = stages.iter().zip(p2p).map(|(s, p)| s.per_microbatch_time + p);
    let slowest = per_stage.clone().fold(0.0, f64::max);
    let traversal: f64 = per_stage.sum();
    let sync = stages.iter().map(|s| s.dp_sync_time).fold(0.0, f64::max);
    (n_microbatches as f64 - 1.0) * slowest + traversal + sync
}
