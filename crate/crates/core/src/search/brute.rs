//! Exhaustive reference search for small instances. Every per-layer
//! assignment is costed through the cost model with exact memory, so it
//! serves as the optimality oracle for [`super::search`].

use crate::costmodel::{iteration_time, CostInputs, StageCost};
use crate::error::{Error, Result};
use crate::profiles::{ClusterProfile, ModelProfile, TrainingConfig};
use crate::strategy::ParallelStrategy;

use super::{check_inputs, microbatch_sizes, pipeline_degrees, stage_split, stage_strategies, Plan, SearchConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OracleLimits {
    pub max_layers: u64,
    pub max_devices: u64,
}

impl Default for OracleLimits {
    fn default() -> Self {
        Self {
            max_layers: 4,
            max_devices: 8,
        }
    }
}

/// All assignments of `strategies` to `n` layers in lexicographic order.
fn assignments(strategies: &[ParallelStrategy], n: usize) -> Vec<Vec<ParallelStrategy>> {
    let mut out = vec![Vec::with_capacity(n)];
    for _ in 0..n {
        out = out
            .into_iter()
            .flat_map(|prefix| {
                strategies.iter().map(move |s| {
                    let mut next = prefix.clone();
                    next.push(*s);
                    next
                })
            })
            .collect();
    }
    out
}

struct Candidate {
    time: f64,
    memory: f64,
    strategies: Vec<ParallelStrategy>,
}

pub fn brute_force_optimize(
    model: &ModelProfile,
    cluster: &ClusterProfile,
    training: &TrainingConfig,
    cfg: &SearchConfig,
    limits: OracleLimits,
) -> Result<Plan> {
    check_inputs(model, cluster, training)?;
    cfg.validate()?;
    if model.n_layers > limits.max_layers || cluster.n_devices > limits.max_devices {
        return Err(Error::OracleTooLarge(format!(
            "{} layers on {} devices exceeds the {} layer / {} device limit",
            model.n_layers, cluster.n_devices, limits.max_layers, limits.max_devices
        )));
    }
    let inputs = CostInputs {
        cluster,
        training,
        seq_len: model.seq_len,
        hidden_size: model.hidden_size,
    };
    let budget = cluster.memory_budget();

    let mut best: Option<(u64, u64, Candidate)> = None;
    for pp in pipeline_degrees(model, cluster, cfg.max_pp) {
        let devices = cluster.n_devices / pp;
        let ranges = stage_split(model.n_layers as usize, pp as usize);
        for microbatch in microbatch_sizes(training) {
            let n_microbatches = training.global_batch / microbatch;
            let strategies = stage_strategies(devices, microbatch, cluster, &cfg.constraints)?;
            if strategies.is_empty() {
                continue;
            }
            let p2p = inputs.stage_p2p_times(pp, microbatch, devices)?;

            // Feasible assignments of each stage, with their exact costs.
            let mut per_stage: Vec<Vec<(StageCost, Vec<ParallelStrategy>)>> = Vec::new();
            for (i, &[start, end]) in ranges.iter().enumerate() {
                let layers = &model.layers[start..end];
                let mut feasible = Vec::new();
                for a in assignments(&strategies, layers.len()) {
                    let cost = inputs.stage_cost(layers, &a, i, pp, microbatch, n_microbatches, cfg.transitions)?;
                    if cost.peak_memory_bytes <= budget {
                        feasible.push((cost, a));
                    }
                }
                per_stage.push(feasible);
            }
            if per_stage.iter().any(Vec::is_empty) {
                continue;
            }

            // Walk the cross product of stage assignments like an odometer.
            let mut idx = vec![0usize; per_stage.len()];
            let mut costs: Vec<StageCost> = Vec::with_capacity(per_stage.len());
            'odometer: loop {
                costs.clear();
                costs.extend(per_stage.iter().zip(&idx).map(|(opts, &i)| opts[i].0));
                let time = iteration_time(&costs, n_microbatches, &p2p);
                let memory: f64 = costs.iter().map(|c| c.peak_memory_bytes).sum();
                let better = match &best {
                    None => true,
                    Some((_, _, b)) => time < b.time || (time == b.time && memory < b.memory),
                };
                if better {
                    let strategies = per_stage
                        .iter()
                        .zip(&idx)
                        .flat_map(|(opts, &i)| opts[i].1.iter().copied())
                        .collect();
                    best = Some((
                        pp,
                        microbatch,
                        Candidate {
                            time,
                            memory,
                            strategies,
                        },
                    ));
                }

                for pos in (0..idx.len()).rev() {
                    idx[pos] += 1;
                    if idx[pos] < per_stage[pos].len() {
                        continue 'odometer;
                    }
                    idx[pos] = 0;
                }
                break;
            }
        }
    }

    let Some((pp, microbatch, c)) = best else {
        return Err(Error::NoFeasiblePlan("no assignment fits the memory budget".into()));
    };
    Plan::build(model, cluster, training, pp, microbatch, c.strategies, cfg.transitions)
}
