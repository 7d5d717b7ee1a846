//! Per-layer parallel strategies and the decision-tree enumeration of the
//! strategy space for one pipeline stage.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::profiles::{is_pow2, ClusterProfile};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParallelStrategy {
    pub tp: u64,
    pub dp: u64,
    /// 0 = plain data parallelism, 3 = fully sharded.
    pub zero_stage: u8,
    pub sp: bool,
    pub recompute: bool,
}

/// The part of a strategy that determines how tensors are laid out across
/// the stage's devices. Adjacent layers with different layouts pay a
/// redistribution cost.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Layout {
    pub tp: u64,
    pub dp: u64,
    pub sp: bool,
}

impl ParallelStrategy {
    pub fn layout(&self) -> Layout {
        Layout {
            tp: self.tp,
            dp: self.dp,
            sp: self.sp,
        }
    }

    pub fn devices(&self) -> u64 {
        self.tp * self.dp
    }

    /// Checks the invariants that do not depend on the enclosing plan.
    pub fn check(&self) -> std::result::Result<(), String> {
        if !is_pow2(self.tp) || !is_pow2(self.dp) {
            return Err(format!("tp={} and dp={} must be powers of two", self.tp, self.dp));
        }
        if self.zero_stage > 3 {
            return Err(format!("zero_stage {} out of range", self.zero_stage));
        }
        if self.sp && self.tp == 1 {
            return Err("sequence parallelism requires tp > 1".into());
        }
        if self.zero_stage > 0 && self.dp == 1 {
            return Err("zero_stage > 0 requires dp > 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StrategyConstraints {
    pub allow_internode_tp: bool,
    pub allowed_zero_stages: Vec<u8>,
    pub force_recompute: Option<bool>,
}

impl Default for StrategyConstraints {
    fn default() -> Self {
        Self {
            allow_internode_tp: false,
            allowed_zero_stages: vec![0, 1, 2, 3],
            force_recompute: None,
        }
    }
}

impl StrategyConstraints {
    pub fn validate(&self) -> Result<()> {
        if !self.allowed_zero_stages.contains(&0) {
            return Err(Error::InvalidConstraints("allowed_zero_stages must contain 0".into()));
        }
        if self.allowed_zero_stages.iter().any(|&z| z > 3) {
            return Err(Error::InvalidConstraints("zero stages range over 0..=3".into()));
        }
        Ok(())
    }
}

/// Leaves of the strategy decision tree for a stage of `devices_per_stage`
/// devices. The tree splits on tp (ascending), then zero stage, then sp
/// (off first), then recompute (off first); pruned branches never appear.
pub fn enumerate_strategies(
    devices_per_stage: u64,
    cluster: &ClusterProfile,
    constraints: &StrategyConstraints,
) -> Result<Vec<ParallelStrategy>> {
    if !is_pow2(devices_per_stage) || devices_per_stage > cluster.n_devices {
        return Err(Error::InvalidDeviceCount(devices_per_stage));
    }
    constraints.validate()?;
    let recompute_choices: &[bool] = match constraints.force_recompute {
        Some(true) => &[true],
        Some(false) => &[false],
        None => &[false, true],
    };

    let mut out = Vec::new();
    let mut tp = 1;
    while tp <= devices_per_stage {
        let dp = devices_per_stage / tp;
        let tp_ok = tp <= cluster.devices_per_node || constraints.allow_internode_tp;
        if tp_ok {
            for zero_stage in 0..=3u8 {
                if (zero_stage > 0 && dp == 1) || !constraints.allowed_zero_stages.contains(&zero_stage) {
                    continue;
                }
                for sp in [false, true] {
                    if sp && tp == 1 {
                        continue;
                    }
                    for &recompute in recompute_choices {
                        out.push(ParallelStrategy {
                            tp,
                            dp,
                            zero_stage,
                            sp,
                            recompute,
                        });
                    }
                }
            }
        }
        tp *= 2;
    }
    Ok(out)
}

pub fn strategy_dp_degree(s: &ParallelStrategy, devices_per_stage: u64) -> Result<u64> {
    let inconsistent = Error::InconsistentStrategy {
        tp: s.tp,
        dp: s.dp,
        devices_per_stage,
    };
    if s.tp == 0 || !devices_per_stage.is_multiple_of(s.tp) {
        return Err(inconsistent);
    }
    let dp = devices_per_stage / s.tp;
    if dp != s.dp {
        return Err(inconsistent);
    }
    Ok(dp)
}
