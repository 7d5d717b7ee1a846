//! Latency/bandwidth (alpha-beta) estimates for ring collectives and
//! pipeline point-to-point transfers.
//!
//! A ring reduce-scatter or all-gather over `g` ranks takes `g - 1` steps,
//! each moving `volume / g` bytes; an all-reduce is one of each. All
//! estimates use the bus bandwidth from the cluster's bandwidth table.

use crate::error::Result;
use crate::profiles::{lookup_bandwidth, ClusterProfile, Span};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CommGroup {
    pub size: u64,
    pub span: Span,
}

impl CommGroup {
    pub fn new(size: u64, span: Span) -> Self {
        Self { size, span }
    }

    /// A group of `size` ranks whose members sit within `extent` contiguous
    /// devices starting on a node boundary. Tensor-parallel groups have
    /// `extent == size`; data-parallel groups are strided by the tensor
    /// degree and span the whole stage.
    pub fn spanning(size: u64, extent: u64, devices_per_node: u64) -> Self {
        let span = if extent <= devices_per_node {
            Span::IntraNode
        } else {
            Span::InterNode
        };
        Self { size, span }
    }

    pub fn contiguous(size: u64, devices_per_node: u64) -> Self {
        Self::spanning(size, size, devices_per_node)
    }
}

/// Returns `(latency term, bandwidth term)` of one ring pass.
fn ring_pass(group: CommGroup, volume: f64, cluster: &ClusterProfile) -> Result<(f64, f64)> {
    let link = lookup_bandwidth(cluster, group.span, group.size)?;
    let g = group.size as f64;
    let steps = g - 1.0;
    Ok((steps * link.latency, (steps / g) * volume / link.bus_bandwidth))
}

pub fn all_reduce_time(group: CommGroup, volume: f64, cluster: &ClusterProfile) -> Result<f64> {
    if group.size <= 1 {
        return Ok(0.0);
    }
    let (lat, bw) = ring_pass(group, volume, cluster)?;
    // Written as 2a + 2b so it rounds identically to (a + b) + (a + b).
    Ok(2.0 * lat + 2.0 * bw)
}

pub fn all_gather_time(group: CommGroup, volume: f64, cluster: &ClusterProfile) -> Result<f64> {
    if group.size <= 1 {
        return Ok(0.0);
    }
    let (lat, bw) = ring_pass(group, volume, cluster)?;
    Ok(lat + bw)
}

pub fn reduce_scatter_time(group: CommGroup, volume: f64, cluster: &ClusterProfile) -> Result<f64> {
    all_gather_time(group, volume, cluster)
}

/// One point-to-point transfer between adjacent pipeline stages.
pub fn p2p_time(volume: f64, cross_node: bool, cluster: &ClusterProfile) -> Result<f64> {
    let span = if cross_node { Span::InterNode } else { Span::IntraNode };
    let link = lookup_bandwidth(cluster, span, 2)?;
    Ok(link.latency + volume / link.bus_bandwidth)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::profiles::BandwidthEntry;

    fn cluster(entries: &[(Span, u64, f64, f64)]) -> ClusterProfile {
        ClusterProfile {
            n_devices: 16,
            devices_per_node: 8,
            device_flops: 1e12,
            device_memory_bytes: 1 << 30,
            memory_reserve_fraction: 0.0,
            bandwidth_table: entries
                .iter()
                .map(|&(span, group_size, bus_bandwidth, latency)| BandwidthEntry {
                    span,
                    group_size,
                    bus_bandwidth,
                    latency,
                })
                .collect(),
        }
    }

    #[test]
    fn single_rank_groups_are_free() {
        let c = cluster(&[]);
        let g = CommGroup::new(1, Span::IntraNode);
        assert_eq!(all_reduce_time(g, 1e9, &c).unwrap(), 0.0);
        assert_eq!(all_gather_time(g, 1e9, &c).unwrap(), 0.0);
        assert_eq!(reduce_scatter_time(g, 1e9, &c).unwrap(), 0.0);
    }

    #[test]
    fn all_reduce_bandwidth_term() {
        let c = cluster(&[(Span::IntraNode, 4, 1e11, 0.0)]);
        let t = all_reduce_time(CommGroup::new(4, Span::IntraNode), 1e9, &c).unwrap();
        assert!((t - 0.015).abs() < 1e-15);
    }

    #[test]
    fn all_reduce_latency_counts_both_ring_passes() {
        let c = cluster(&[(Span::IntraNode, 2, 1e11, 1e-5)]);
        let g = CommGroup::new(2, Span::IntraNode);
        assert_eq!(all_reduce_time(g, 0.0, &c).unwrap(), 2e-5);
        assert_eq!(all_gather_time(g, 0.0, &c).unwrap(), 1e-5);
    }

    #[test]
    fn all_gather_values() {
        let c = cluster(&[(Span::IntraNode, 4, 1e11, 0.0), (Span::InterNode, 8, 2.5e10, 5e-6)]);
        let t = all_gather_time(CommGroup::new(4, Span::IntraNode), 1e9, &c).unwrap();
        assert!((t - 0.0075).abs() < 1e-15);
        let t = all_gather_time(CommGroup::new(8, Span::InterNode), 2e8, &c).unwrap();
        assert!((t - 7.035e-3).abs() < 1e-15);
    }

    #[test]
    fn gather_is_half_of_reduce_without_latency() {
        let c = cluster(&[(Span::IntraNode, 2, 3e11, 0.0)]);
        let g = CommGroup::new(2, Span::IntraNode);
        let v = 123_456.0;
        assert_eq!(
            all_gather_time(g, v, &c).unwrap() * 2.0,
            all_reduce_time(g, v, &c).unwrap()
        );
    }

    #[test]
    fn p2p_values() {
        let c = cluster(&[(Span::IntraNode, 2, 3e11, 0.0), (Span::InterNode, 2, 2.5e10, 0.0)]);
        let intra = p2p_time(1e9, false, &c).unwrap();
        let inter = p2p_time(1e9, true, &c).unwrap();
        assert!((intra - 1e9 / 3e11).abs() < 1e-15);
        assert!((inter - 0.04).abs() < 1e-15);
        assert!(inter > intra);

        let c = cluster(&[(Span::IntraNode, 2, 1e10, 1e-5)]);
        assert_eq!(p2p_time(0.0, false, &c).unwrap(), 1e-5);
        let c = cluster(&[(Span::IntraNode, 2, 1e10, 0.0)]);
        assert_eq!(p2p_time(1e8, false, &c).unwrap(), 0.01);
    }

    #[test]
    fn group_span_follows_node_boundaries() {
        assert_eq!(CommGroup::contiguous(8, 8).span, Span::IntraNode);
        assert_eq!(CommGroup::contiguous(16, 8).span, Span::InterNode);
        assert_eq!(CommGroup::spanning(2, 16, 8).span, Span::InterNode);
    }
}
