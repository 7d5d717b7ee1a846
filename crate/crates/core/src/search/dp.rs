//! Memory-bucketed dynamic program over the layers of one pipeline stage.
//!
//! Memory is discretized into `memory_buckets` buckets of width
//! `budget / memory_buckets`. States are keyed by (buckets of the memory
//! used so far, buckets of the largest recompute workspace so far, layout
//! of the previous layer), with bucket counts rounded up. Labels carry the
//! exact byte counts as well, so feasibility is decided on exact memory and
//! the buckets only group comparable partial assignments. Each state keeps
//! the Pareto set of (per-microbatch time, data-parallel sync time, memory,
//! workspace) labels, since the iteration time charges the sync of the
//! slowest stage separately from the pipelined compute.

use std::collections::BTreeMap;

use crate::costmodel::{
    full_activation_bytes, in_flight_microbatches, layer_memory, stage_group, transition_time, CostInputs,
};
use crate::error::{Error, Result};
use crate::profiles::LayerProfile;
use crate::strategy::{Layout, ParallelStrategy};

/// One stage's optimization problem.
#[derive(Debug, Clone, Copy)]
pub struct StageProblem<'a> {
    pub inputs: CostInputs<'a>,
    pub layers: &'a [LayerProfile],
    /// Candidate strategies, in enumeration order.
    pub strategies: &'a [ParallelStrategy],
    pub stage_index: usize,
    pub pp: u64,
    pub microbatch: u64,
    pub n_microbatches: u64,
    pub transitions: bool,
    /// Per-device bytes; `None` ignores memory entirely.
    pub budget: Option<f64>,
    pub memory_buckets: usize,
}

/// A non-dominated assignment for a stage.
#[derive(Debug, Clone, PartialEq)]
pub struct StageOption {
    /// Indices into the problem's strategy list, one per layer.
    pub choices: Vec<usize>,
    /// Per-microbatch time including transitions.
    pub time: f64,
    /// Data-parallel sync per iteration, before the overlap discount.
    pub sync: f64,
    /// Exact peak bytes, including the recompute workspace.
    pub peak_memory: f64,
}

/// Options sorted by ascending time (and therefore descending sync).
#[derive(Debug, Clone, PartialEq)]
pub struct StageFrontier {
    pub options: Vec<StageOption>,
}

impl StageFrontier {
    /// Index of the fastest option whose sync does not exceed `cap`.
    pub fn fastest_within_sync(&self, cap: f64) -> Option<usize> {
        self.options.iter().position(|o| o.sync <= cap)
    }
}

/// Result of the single-stage optimization.
#[derive(Debug, Clone, PartialEq)]
pub struct StageChoice {
    pub strategies: Vec<ParallelStrategy>,
    /// Per-microbatch stage time from the cost model.
    pub time: f64,
    /// Exact (unbucketed) peak memory.
    pub peak_memory: f64,
}

#[derive(Debug, Clone)]
struct Label {
    time: f64,
    sync: f64,
    memory: f64,
    workspace: f64,
    choices: Vec<u16>,
}

impl Label {
    fn weakly_dominates(&self, other: &Label) -> bool {
        self.time <= other.time
            && self.sync <= other.sync
            && self.memory <= other.memory
            && self.workspace <= other.workspace
    }
}

type StateKey = (u64, u64, u16);

/// Per-(layer, strategy) costs.
struct Tables {
    time: Vec<Vec<f64>>,
    sync: Vec<Vec<f64>>,
    memory: Vec<Vec<f64>>,
    workspace: Vec<Vec<f64>>,
    layout_of: Vec<u16>,
    /// Per layer, the strategies no other same-layout strategy beats on
    /// every cost. Ties keep the earlier one.
    useful: Vec<Vec<usize>>,
    /// `transition[j][a][b]`: cost entering layer `j` in layout `b` from `a`.
    transition: Vec<Vec<Vec<f64>>>,
    width: f64,
    /// Exact byte limit with a little headroom for summation order.
    limit: f64,
}

/// Relative headroom so that re-summing a stage in a different order never
/// lands above the budget.
const SUM_SLACK: f64 = 1e-12;

fn to_buckets(bytes: f64, width: f64) -> u64 {
    if bytes <= 0.0 || width.is_infinite() {
        return 0;
    }
    let k = (bytes / width).ceil();
    let k = if k * width < bytes { k + 1.0 } else { k };
    if k >= u64::MAX as f64 {
        u64::MAX
    } else {
        k as u64
    }
}

impl StageProblem<'_> {
    fn in_flight(&self) -> u64 {
        in_flight_microbatches(self.n_microbatches, self.pp, self.stage_index)
    }

    fn tables(&self) -> Result<Tables> {
        let (width, limit) = match self.budget {
            Some(b) => (b / self.memory_buckets as f64, b * (1.0 - SUM_SLACK)),
            None => (f64::INFINITY, f64::INFINITY),
        };
        let in_flight = self.in_flight();
        let training = self.inputs.training;
        let seq_len = self.inputs.seq_len;

        let mut layouts: Vec<(Layout, ParallelStrategy)> = Vec::new();
        let layout_of = self
            .strategies
            .iter()
            .map(|s| {
                let pos = layouts.iter().position(|(l, _)| *l == s.layout()).unwrap_or_else(|| {
                    layouts.push((s.layout(), *s));
                    layouts.len() - 1
                });
                pos as u16
            })
            .collect();

        let n = self.layers.len();
        let mut t = Tables {
            time: Vec::with_capacity(n),
            sync: Vec::with_capacity(n),
            memory: Vec::with_capacity(n),
            workspace: Vec::with_capacity(n),
            layout_of,
            useful: Vec::with_capacity(n),
            transition: Vec::with_capacity(n),
            width,
            limit,
        };
        for (j, layer) in self.layers.iter().enumerate() {
            let mut time = Vec::with_capacity(self.strategies.len());
            let mut sync = Vec::with_capacity(self.strategies.len());
            let mut memory = Vec::with_capacity(self.strategies.len());
            let mut workspace = Vec::with_capacity(self.strategies.len());
            for s in self.strategies {
                time.push(self.inputs.layer_time(layer, s, self.microbatch)?.total());
                sync.push(self.inputs.layer_dp_sync(layer, s)?);
                memory.push(layer_memory(layer, s, self.microbatch, seq_len, in_flight, training)?.total());
                workspace.push(if s.recompute {
                    full_activation_bytes(layer, s, self.microbatch, seq_len)
                } else {
                    0.0
                });
            }
            let costs = |k: usize| [time[k], sync[k], memory[k], workspace[k]];
            let useful = (0..self.strategies.len())
                .filter(|&k| {
                    !(0..self.strategies.len()).any(|o| {
                        let (a, b) = (costs(o), costs(k));
                        o != k
                            && t.layout_of[o] == t.layout_of[k]
                            && a.iter().zip(&b).all(|(x, y)| x <= y)
                            && (o < k || a != b)
                    })
                })
                .collect();
            t.useful.push(useful);
            t.time.push(time);
            t.sync.push(sync);
            t.memory.push(memory);
            t.workspace.push(workspace);

            let mut matrix = vec![vec![0.0; layouts.len()]; layouts.len()];
            if self.transitions && j > 0 {
                let boundary = (self.microbatch * seq_len) as f64 * layer.boundary_bytes_per_token;
                let devices = self.strategies.first().map_or(1, |s| s.devices());
                let group = stage_group(devices, self.inputs.cluster);
                for (a, (_, from)) in layouts.iter().enumerate() {
                    for (b, (_, to)) in layouts.iter().enumerate() {
                        matrix[a][b] = transition_time(from, to, boundary, group, self.inputs.cluster)?;
                    }
                }
            }
            t.transition.push(matrix);
        }
        Ok(t)
    }

    /// Smallest exact peak memory any assignment of this stage can reach.
    pub fn min_memory_bytes(&self) -> Result<f64> {
        if self.strategies.is_empty() {
            return Ok(f64::INFINITY);
        }
        let t = self.tables()?;
        let mut caps: Vec<f64> = std::iter::once(0.0)
            .chain(t.workspace.iter().flatten().copied())
            .collect();
        caps.sort_by(f64::total_cmp);
        caps.dedup();
        let mut best = f64::INFINITY;
        for cap in caps {
            let mut total = cap;
            for j in 0..self.layers.len() {
                let layer_min = (0..self.strategies.len())
                    .filter(|&k| t.workspace[j][k] <= cap)
                    .map(|k| t.memory[j][k])
                    .fold(f64::INFINITY, f64::min);
                total += layer_min;
            }
            best = best.min(total);
        }
        Ok(best)
    }

    fn infeasible(&self) -> Result<Error> {
        Ok(Error::Infeasible {
            stage: self.stage_index,
            min_memory_bytes: self.min_memory_bytes()?,
            budget_bytes: self.budget.unwrap_or(f64::INFINITY),
        })
    }

    /// Pareto frontier of (time, sync) over assignments that fit memory.
    pub fn frontier(&self) -> Result<StageFrontier> {
        if self.strategies.is_empty() || self.layers.is_empty() {
            return Err(self.infeasible()?);
        }
        let t = self.tables()?;
        let bounded = self.budget.is_some();
        let key = |l: &Label, layout: u16| (to_buckets(l.memory, t.width), to_buckets(l.workspace, t.width), layout);

        let mut states: BTreeMap<StateKey, Vec<Label>> = BTreeMap::new();
        let root = Label {
            time: 0.0,
            sync: 0.0,
            memory: 0.0,
            workspace: 0.0,
            choices: Vec::new(),
        };
        for j in 0..self.layers.len() {
            let mut next: BTreeMap<StateKey, Vec<Label>> = BTreeMap::new();
            let mut extend = |label: &Label, prev_layout: Option<u16>| {
                for &k in &t.useful[j] {
                    let layout = t.layout_of[k];
                    let transition = prev_layout.map_or(0.0, |p| t.transition[j][p as usize][layout as usize]);
                    let mut l = Label {
                        time: label.time + (t.time[j][k] + transition),
                        sync: label.sync + t.sync[j][k],
                        memory: label.memory + t.memory[j][k],
                        workspace: label.workspace.max(t.workspace[j][k]),
                        choices: Vec::new(),
                    };
                    if bounded {
                        if l.memory + l.workspace > t.limit {
                            continue;
                        }
                    } else {
                        // Without a budget memory never decides anything.
                        l.memory = 0.0;
                        l.workspace = 0.0;
                    }
                    let cell = next.entry(key(&l, layout)).or_default();
                    if cell.iter().any(|c| c.weakly_dominates(&l)) {
                        continue;
                    }
                    l.choices.reserve_exact(j + 1);
                    l.choices.extend_from_slice(&label.choices);
                    l.choices.push(k as u16);
                    insert(cell, l);
                }
            };
            if j == 0 {
                extend(&root, None);
            } else {
                for (&(_, _, layout), labels) in &states {
                    for label in labels {
                        extend(label, Some(layout));
                    }
                }
            }
            prune_dominated(&mut next);
            states = next;
        }

        let mut candidates: Vec<Label> = states.into_values().flatten().collect();
        if candidates.is_empty() {
            return Err(self.infeasible()?);
        }
        candidates.sort_by(|a, b| {
            a.time
                .total_cmp(&b.time)
                .then(a.sync.total_cmp(&b.sync))
                .then((a.memory + a.workspace).total_cmp(&(b.memory + b.workspace)))
                .then(a.choices.cmp(&b.choices))
        });
        let mut options = Vec::new();
        let mut best_sync = f64::INFINITY;
        for label in candidates {
            if label.sync < best_sync {
                best_sync = label.sync;
                options.push(StageOption {
                    choices: label.choices.iter().map(|&c| c as usize).collect(),
                    time: label.time,
                    sync: label.sync,
                    peak_memory: label.memory + label.workspace,
                });
            }
        }
        Ok(StageFrontier { options })
    }
}

/// Labels kept per state. Small stages never reach it, which keeps their
/// search exact; larger ones keep the fastest labels and the leanest one.
const CELL_CAPACITY: usize = 6;

fn insert(cell: &mut Vec<Label>, candidate: Label) {
    if cell.iter().any(|l| l.weakly_dominates(&candidate)) {
        return;
    }
    cell.retain(|l| !candidate.weakly_dominates(l));
    cell.push(candidate);
}

fn shrink(cell: &mut Vec<Label>) {
    if cell.len() <= CELL_CAPACITY {
        return;
    }
    cell.sort_by(|a, b| a.time.total_cmp(&b.time).then(a.choices.cmp(&b.choices)));
    let leanest = (0..cell.len())
        .min_by(|&a, &b| {
            let (x, y) = (&cell[a], &cell[b]);
            (x.memory + x.workspace)
                .total_cmp(&(y.memory + y.workspace))
                .then(a.cmp(&b))
        })
        .expect("cell is not empty");
    let lean = cell[leanest].clone();
    cell.truncate(CELL_CAPACITY - 1);
    if leanest >= CELL_CAPACITY - 1 {
        cell.push(lean);
    }
}

/// Drops labels dominated by a label of a state with the same workspace
/// bucket and layout but fewer memory buckets, then caps every state.
fn prune_dominated(states: &mut BTreeMap<StateKey, Vec<Label>>) {
    let mut groups: BTreeMap<(u64, u16), Vec<u64>> = BTreeMap::new();
    for &(used, ws, layout) in states.keys() {
        groups.entry((ws, layout)).or_default().push(used);
    }
    for ((ws, layout), useds) in groups {
        // Keys arrive sorted by `used`, so every label seen so far uses
        // strictly less memory than the current state's labels.
        let mut seen: Vec<(f64, f64, f64)> = Vec::new();
        for used in useds {
            let key = (used, ws, layout);
            let cell = states.get_mut(&key).expect("key collected above");
            cell.retain(|l| {
                !seen
                    .iter()
                    .any(|&(t, s, w)| t <= l.time && s <= l.sync && w <= l.workspace)
            });
            shrink(cell);
            for l in cell.iter() {
                seen.retain(|&(t, s, w)| !(l.time <= t && l.sync <= s && l.workspace <= w));
                seen.push((l.time, l.sync, l.workspace));
            }
            if cell.is_empty() {
                states.remove(&key);
            }
        }
    }
}

/// Picks the per-layer strategies minimizing the stage's per-microbatch
/// time under its memory budget.
pub fn dp_optimize_stage(problem: &StageProblem<'_>) -> Result<StageChoice> {
    let frontier = problem.frontier()?;
    let best = &frontier.options[0];
    let strategies: Vec<ParallelStrategy> = best.choices.iter().map(|&k| problem.strategies[k]).collect();
    let cost = problem.inputs.stage_cost(
        problem.layers,
        &strategies,
        problem.stage_index,
        problem.pp,
        problem.microbatch,
        problem.n_microbatches,
        problem.transitions,
    )?;
    Ok(StageChoice {
        strategies,
        time: cost.per_microbatch_time,
        peak_memory: cost.peak_memory_bytes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::profiles::{synth_cluster, synth_transformer_profile, ClusterProfile, LinkSpec, TrainingConfig};
    use crate::strategy::{enumerate_strategies, StrategyConstraints};

    fn cluster(devices: u64) -> ClusterProfile {
        let link = LinkSpec {
            bus_bandwidth: 5e10,
            latency: 2e-6,
        };
        synth_cluster(devices, devices, 5e11, 1 << 40, link, link).unwrap()
    }

    fn problem<'a>(
        inputs: CostInputs<'a>,
        layers: &'a [LayerProfile],
        strategies: &'a [ParallelStrategy],
        budget: Option<f64>,
    ) -> StageProblem<'a> {
        StageProblem {
            inputs,
            layers,
            strategies,
            stage_index: 0,
            pp: 1,
            microbatch: 8,
            n_microbatches: 1,
            transitions: true,
            budget,
            memory_buckets: 1024,
        }
    }

    #[test]
    fn forced_choice() {
        let c = cluster(1);
        let training = TrainingConfig::new(8);
        let model = synth_transformer_profile(1, 32, 64).unwrap();
        let inputs = CostInputs {
            cluster: &c,
            training: &training,
            seq_len: 64,
            hidden_size: 32,
        };
        let only = [enumerate_strategies(1, &c, &StrategyConstraints::default()).unwrap()[0]];
        let choice = dp_optimize_stage(&problem(inputs, &model.layers, &only, Some(1e12))).unwrap();
        assert_eq!(choice.strategies, only.to_vec());
        let expected = inputs.layer_time(&model.layers[0], &only[0], 8).unwrap().total();
        assert_eq!(choice.time, expected);
    }

    #[test]
    fn everything_over_budget_is_infeasible() {
        let c = cluster(2);
        let training = TrainingConfig::new(8);
        let model = synth_transformer_profile(2, 32, 64).unwrap();
        let inputs = CostInputs {
            cluster: &c,
            training: &training,
            seq_len: 64,
            hidden_size: 32,
        };
        let all = enumerate_strategies(2, &c, &StrategyConstraints::default()).unwrap();
        let p = problem(inputs, &model.layers, &all, Some(100.0));
        match dp_optimize_stage(&p) {
            Err(Error::Infeasible {
                min_memory_bytes,
                budget_bytes,
                ..
            }) => {
                assert!(min_memory_bytes > budget_bytes);
                assert_eq!(min_memory_bytes, p.min_memory_bytes().unwrap());
            }
            other => panic!("expected Infeasible, got {other:?}"),
        }
    }

    #[test]
    fn accepted_assignments_fit_exactly() {
        let c = cluster(4);
        let training = TrainingConfig::new(8);
        let model = synth_transformer_profile(3, 64, 128).unwrap();
        let inputs = CostInputs {
            cluster: &c,
            training: &training,
            seq_len: 128,
            hidden_size: 64,
        };
        let all = enumerate_strategies(4, &c, &StrategyConstraints::default()).unwrap();
        let floor = problem(inputs, &model.layers, &all, None).min_memory_bytes().unwrap();
        for scale in [1.01, 1.1, 1.5, 3.0] {
            let budget = floor * scale;
            if let Ok(choice) = dp_optimize_stage(&problem(inputs, &model.layers, &all, Some(budget))) {
                assert!(choice.peak_memory <= budget, "scale {scale}");
            }
        }
    }

    #[test]
    fn frontier_is_sorted_and_non_dominated() {
        let c = cluster(8);
        let training = TrainingConfig::new(8);
        let model = synth_transformer_profile(3, 64, 128).unwrap();
        let inputs = CostInputs {
            cluster: &c,
            training: &training,
            seq_len: 128,
            hidden_size: 64,
        };
        let all = enumerate_strategies(8, &c, &StrategyConstraints::default()).unwrap();
        let f = problem(inputs, &model.layers, &all, None).frontier().unwrap();
        for w in f.options.windows(2) {
            assert!(w[0].time <= w[1].time);
            assert!(w[0].sync > w[1].sync);
        }
    }

    #[test]
    fn bucket_rounding_never_under_reports() {
        assert_eq!(to_buckets(0.0, 10.0), 0);
        assert_eq!(to_buckets(10.0, 10.0), 1);
        assert_eq!(to_buckets(10.5, 10.0), 2);
        let width = 0.1;
        let k = to_buckets(0.3, width);
        assert!(k as f64 * width >= 0.3);
    }
}
