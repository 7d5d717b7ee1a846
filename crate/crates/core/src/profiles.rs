//! Hardware and model profiles: schema, validation, JSON ingestion and an
//! analytic dense-Transformer synthesizer.
//!
//! A profile document is a single JSON object whose top-level keys are
//! `"cluster"`, or `"model"` and/or `"training"`. Unknown keys anywhere in
//! the document are rejected unless the caller asks for lenient parsing.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::canon;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Span {
    IntraNode,
    InterNode,
}

impl fmt::Display for Span {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Span::IntraNode => "intra_node",
            Span::InterNode => "inter_node",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandwidthEntry {
    pub span: Span,
    pub group_size: u64,
    /// Bytes per second.
    pub bus_bandwidth: f64,
    /// Seconds.
    pub latency: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterProfile {
    pub n_devices: u64,
    pub devices_per_node: u64,
    /// Sustained FLOP/s of one device.
    pub device_flops: f64,
    pub device_memory_bytes: u64,
    pub memory_reserve_fraction: f64,
    pub bandwidth_table: Vec<BandwidthEntry>,
}

/// Per-layer cost coefficients. All byte and FLOP quantities are per token
/// (or per token times sequence length for the quadratic FLOP term).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerProfile {
    pub param_count: f64,
    pub flops_per_token: f64,
    pub flops_per_token_sq: f64,
    pub act_shardable_bytes_per_token: f64,
    pub act_replicated_bytes_per_token: f64,
    pub boundary_bytes_per_token: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelProfile {
    pub n_layers: u64,
    pub hidden_size: u64,
    pub seq_len: u64,
    pub layers: Vec<LayerProfile>,
}

fn default_bytes_per_param() -> f64 {
    2.0
}

fn default_bytes_per_grad() -> f64 {
    2.0
}

fn default_optimizer_bytes() -> f64 {
    12.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub global_batch: u64,
    #[serde(default = "default_bytes_per_param")]
    pub bytes_per_param: f64,
    #[serde(default = "default_bytes_per_grad")]
    pub bytes_per_grad: f64,
    #[serde(default = "default_optimizer_bytes")]
    pub optimizer_bytes_per_param: f64,
    #[serde(default)]
    pub comm_overlap_fraction: f64,
}

impl TrainingConfig {
    pub fn new(global_batch: u64) -> Self {
        Self {
            global_batch,
            bytes_per_param: default_bytes_per_param(),
            bytes_per_grad: default_bytes_per_grad(),
            optimizer_bytes_per_param: default_optimizer_bytes(),
            comm_overlap_fraction: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !is_pow2(self.global_batch) {
            return Err(invalid("global_batch must be a power of two >= 1"));
        }
        for (name, v) in [
            ("bytes_per_param", self.bytes_per_param),
            ("bytes_per_grad", self.bytes_per_grad),
            ("optimizer_bytes_per_param", self.optimizer_bytes_per_param),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(invalid(format!("{name} must be > 0")));
            }
        }
        if !(0.0..=1.0).contains(&self.comm_overlap_fraction) {
            return Err(invalid("comm_overlap_fraction must lie in [0, 1]"));
        }
        Ok(())
    }
}

pub(crate) fn is_pow2(n: u64) -> bool {
    n != 0 && n.is_power_of_two()
}

fn invalid(msg: impl Into<String>) -> Error {
    Error::Validation(msg.into())
}

impl ClusterProfile {
    /// Per-device bytes available to the planner.
    pub fn memory_budget(&self) -> f64 {
        self.device_memory_bytes as f64 * (1.0 - self.memory_reserve_fraction)
    }

    pub fn validate(&self) -> Result<()> {
        if !is_pow2(self.n_devices) {
            return Err(invalid("n_devices must be a power of two"));
        }
        if !is_pow2(self.devices_per_node) {
            return Err(invalid("devices_per_node must be a power of two"));
        }
        if self.devices_per_node > self.n_devices {
            return Err(invalid("devices_per_node must not exceed n_devices"));
        }
        if !(self.device_flops.is_finite() && self.device_flops > 0.0) {
            return Err(invalid("device_flops must be > 0"));
        }
        if self.device_memory_bytes == 0 {
            return Err(invalid("device_memory_bytes must be > 0"));
        }
        if !(0.0..1.0).contains(&self.memory_reserve_fraction) {
            return Err(invalid("memory_reserve_fraction must lie in [0, 1)"));
        }
        for (i, e) in self.bandwidth_table.iter().enumerate() {
            if e.group_size < 2 {
                return Err(invalid(format!("bandwidth_table[{i}]: group_size must be >= 2")));
            }
            if !(e.bus_bandwidth.is_finite() && e.bus_bandwidth > 0.0) {
                return Err(invalid(format!("bandwidth_table[{i}]: bus_bandwidth must be > 0")));
            }
            if !(e.latency.is_finite() && e.latency >= 0.0) {
                return Err(invalid(format!("bandwidth_table[{i}]: latency must be >= 0")));
            }
            if self.bandwidth_table[..i]
                .iter()
                .any(|p| p.span == e.span && p.group_size == e.group_size)
            {
                return Err(invalid(format!(
                    "bandwidth_table has duplicate entries for ({}, {})",
                    e.span, e.group_size
                )));
            }
        }
        for (span, size) in self.required_links() {
            if lookup_bandwidth(self, span, size).is_err() {
                return Err(invalid(format!(
                    "bandwidth_table has no entry resolving ({span}, {size})"
                )));
            }
        }
        Ok(())
    }

    /// Every (span, group size) some enumerated communication group can ask for.
    fn required_links(&self) -> Vec<(Span, u64)> {
        let mut out = Vec::new();
        let mut g = 2;
        while g <= self.devices_per_node {
            out.push((Span::IntraNode, g));
            g *= 2;
        }
        if self.n_devices > self.devices_per_node {
            let mut g = 2;
            while g <= self.n_devices {
                out.push((Span::InterNode, g));
                g *= 2;
            }
        }
        out
    }
}

/// Bandwidth and latency for a communication group.
///
/// Exact `(span, group_size)` hits win; otherwise the entry with the largest
/// group size not exceeding the request is used.
pub fn lookup_bandwidth(cluster: &ClusterProfile, span: Span, group_size: u64) -> Result<BandwidthEntry> {
    if group_size < 2 {
        return Err(invalid("bandwidth lookups need group_size >= 2"));
    }
    cluster
        .bandwidth_table
        .iter()
        .filter(|e| e.span == span && e.group_size <= group_size)
        .max_by_key(|e| e.group_size)
        .copied()
        .ok_or(Error::NoBandwidthEntry { span, group_size })
}

impl LayerProfile {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("param_count", self.param_count),
            ("flops_per_token", self.flops_per_token),
            ("flops_per_token_sq", self.flops_per_token_sq),
            ("act_shardable_bytes_per_token", self.act_shardable_bytes_per_token),
            ("act_replicated_bytes_per_token", self.act_replicated_bytes_per_token),
            ("boundary_bytes_per_token", self.boundary_bytes_per_token),
        ];
        for (name, v) in fields {
            if !(v.is_finite() && v >= 0.0) {
                return Err(invalid(format!("{name} must be >= 0")));
            }
        }
        if self.boundary_bytes_per_token > self.act_shardable_bytes_per_token + self.act_replicated_bytes_per_token {
            return Err(invalid(
                "boundary_bytes_per_token must not exceed total activation bytes per token",
            ));
        }
        Ok(())
    }
}

impl ModelProfile {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 {
            return Err(invalid("n_layers must be >= 1"));
        }
        if self.hidden_size == 0 {
            return Err(invalid("hidden_size must be >= 1"));
        }
        if self.seq_len == 0 {
            return Err(invalid("seq_len must be >= 1"));
        }
        if self.layers.len() as u64 != self.n_layers {
            return Err(invalid(format!(
                "layers has {} entries but n_layers is {}",
                self.layers.len(),
                self.n_layers
            )));
        }
        for (i, l) in self.layers.iter().enumerate() {
            l.validate().map_err(|e| match e {
                Error::Validation(m) => invalid(format!("layers[{i}]: {m}")),
                other => other,
            })?;
        }
        Ok(())
    }
}

/// Canonical dense-Transformer layer of hidden size `h`: fused QKV and
/// output projection, a 4h MLP, biases and two layer norms.
pub fn synth_transformer_layer(h: u64) -> LayerProfile {
    let h = h as f64;
    let param_count = 12.0 * h * h + 13.0 * h;
    LayerProfile {
        param_count,
        flops_per_token: 2.0 * param_count,
        flops_per_token_sq: 4.0 * h,
        act_shardable_bytes_per_token: 24.0 * h,
        act_replicated_bytes_per_token: 10.0 * h,
        boundary_bytes_per_token: 2.0 * h,
    }
}

pub fn synth_transformer_profile(n_layers: u64, hidden_size: u64, seq_len: u64) -> Result<ModelProfile> {
    if n_layers == 0 || hidden_size == 0 || seq_len == 0 {
        return Err(invalid("n_layers, hidden_size and seq_len must be positive"));
    }
    let layer = synth_transformer_layer(hidden_size);
    Ok(ModelProfile {
        n_layers,
        hidden_size,
        seq_len,
        layers: vec![layer; n_layers as usize],
    })
}

/// Link parameters for [`synth_cluster`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkSpec {
    pub bus_bandwidth: f64,
    pub latency: f64,
}

/// Builds a cluster whose bandwidth table covers every power-of-two group
/// size with flat per-tier link parameters.
pub fn synth_cluster(
    n_devices: u64,
    devices_per_node: u64,
    device_flops: f64,
    device_memory_bytes: u64,
    intra: LinkSpec,
    inter: LinkSpec,
) -> Result<ClusterProfile> {
    let mut table = Vec::new();
    let mut g = 2;
    while g <= devices_per_node {
        table.push(BandwidthEntry {
            span: Span::IntraNode,
            group_size: g,
            bus_bandwidth: intra.bus_bandwidth,
            latency: intra.latency,
        });
        g *= 2;
    }
    if n_devices > devices_per_node {
        let mut g = 2;
        while g <= n_devices {
            table.push(BandwidthEntry {
                span: Span::InterNode,
                group_size: g,
                bus_bandwidth: inter.bus_bandwidth,
                latency: inter.latency,
            });
            g *= 2;
        }
    }
    let cluster = ClusterProfile {
        n_devices,
        devices_per_node,
        device_flops,
        device_memory_bytes,
        memory_reserve_fraction: 0.0,
        bandwidth_table: table,
    };
    cluster.validate()?;
    Ok(cluster)
}

/// The contents of one profile file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ProfileDocument {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cluster: Option<ClusterProfile>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelProfile>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub training: Option<TrainingConfig>,
}

const TOP_KEYS: &[&str] = &["cluster", "model", "training"];
const CLUSTER_KEYS: &[&str] = &[
    "n_devices",
    "devices_per_node",
    "device_flops",
    "device_memory_bytes",
    "memory_reserve_fraction",
    "bandwidth_table",
];
const ENTRY_KEYS: &[&str] = &["span", "group_size", "bus_bandwidth", "latency"];
const MODEL_KEYS: &[&str] = &["n_layers", "hidden_size", "seq_len", "layers"];
const LAYER_KEYS: &[&str] = &[
    "param_count",
    "flops_per_token",
    "flops_per_token_sq",
    "act_shardable_bytes_per_token",
    "act_replicated_bytes_per_token",
    "boundary_bytes_per_token",
];
const TRAINING_KEYS: &[&str] = &[
    "global_batch",
    "bytes_per_param",
    "bytes_per_grad",
    "optimizer_bytes_per_param",
    "comm_overlap_fraction",
];

fn check_keys(v: &Value, allowed: &[&str], at: &str) -> Result<()> {
    if let Value::Object(map) = v {
        if let Some(k) = map.keys().find(|k| !allowed.contains(&k.as_str())) {
            return Err(invalid(format!("unknown key `{k}` in {at}")));
        }
    }
    Ok(())
}

fn check_array_keys(v: Option<&Value>, allowed: &[&str], at: &str) -> Result<()> {
    if let Some(Value::Array(items)) = v {
        for (i, item) in items.iter().enumerate() {
            check_keys(item, allowed, &format!("{at}[{i}]"))?;
        }
    }
    Ok(())
}

fn check_strict(doc: &Value) -> Result<()> {
    check_keys(doc, TOP_KEYS, "document")?;
    if let Some(c) = doc.get("cluster") {
        check_keys(c, CLUSTER_KEYS, "cluster")?;
        check_array_keys(c.get("bandwidth_table"), ENTRY_KEYS, "cluster.bandwidth_table")?;
    }
    if let Some(m) = doc.get("model") {
        check_keys(m, MODEL_KEYS, "model")?;
        check_array_keys(m.get("layers"), LAYER_KEYS, "model.layers")?;
    }
    if let Some(t) = doc.get("training") {
        check_keys(t, TRAINING_KEYS, "training")?;
    }
    Ok(())
}

/// Parses and validates a profile document.
pub fn parse_profile_document(text: &str, strict: bool) -> Result<ProfileDocument> {
    let raw: Value = serde_json::from_str(text)?;
    if !raw.is_object() {
        return Err(Error::Parse("profile document must be a JSON object".into()));
    }
    if strict {
        check_strict(&raw)?;
    }
    let doc: ProfileDocument = serde_json::from_value(raw)?;
    if doc.cluster.is_none() && doc.model.is_none() && doc.training.is_none() {
        return Err(invalid("profile document has none of `cluster`, `model`, `training`"));
    }
    if doc.cluster.is_some() && (doc.model.is_some() || doc.training.is_some()) {
        return Err(invalid("a cluster profile cannot share a file with model or training"));
    }
    if let Some(c) = &doc.cluster {
        c.validate()?;
    }
    if let Some(m) = &doc.model {
        m.validate()?;
    }
    if let Some(t) = &doc.training {
        t.validate()?;
    }
    Ok(doc)
}

pub fn parse_cluster_profile(text: &str, strict: bool) -> Result<ClusterProfile> {
    parse_profile_document(text, strict)?
        .cluster
        .ok_or_else(|| invalid("document has no `cluster` object"))
}

pub fn load_profile_document(path: &Path, strict: bool) -> Result<ProfileDocument> {
    let text = std::fs::read_to_string(path)?;
    parse_profile_document(&text, strict)
}

pub fn load_cluster_profile(path: &Path, strict: bool) -> Result<ClusterProfile> {
    let text = std::fs::read_to_string(path)?;
    parse_cluster_profile(&text, strict)
}

/// Canonical serialization: sorted keys, 17-significant-digit floats.
pub fn to_json(doc: &ProfileDocument) -> Result<String> {
    canon::to_sorted_string(doc)
}

pub fn cluster_to_json(cluster: &ClusterProfile) -> Result<String> {
    to_json(&ProfileDocument {
        cluster: Some(cluster.clone()),
        ..Default::default()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(span: Span, group_size: u64, bw: f64, lat: f64) -> BandwidthEntry {
        BandwidthEntry {
            span,
            group_size,
            bus_bandwidth: bw,
            latency: lat,
        }
    }

    fn cluster_with(table: Vec<BandwidthEntry>) -> ClusterProfile {
        ClusterProfile {
            n_devices: 8,
            devices_per_node: 8,
            device_flops: 1e12,
            device_memory_bytes: 1 << 30,
            memory_reserve_fraction: 0.0,
            bandwidth_table: table,
        }
    }

    #[test]
    fn single_device_needs_no_links() {
        let text = r#"{"cluster":{"n_devices":1,"devices_per_node":1,"device_flops":1e12,
            "device_memory_bytes":1000,"memory_reserve_fraction":0.0,"bandwidth_table":[]}}"#;
        let c = parse_cluster_profile(text, true).unwrap();
        assert_eq!(c.n_devices, 1);
    }

    #[test]
    fn rejects_non_power_of_two_devices() {
        let text = r#"{"cluster":{"n_devices":6,"devices_per_node":2,"device_flops":1e12,
            "device_memory_bytes":1000,"memory_reserve_fraction":0.0,"bandwidth_table":[]}}"#;
        let err = parse_cluster_profile(text, true).unwrap_err();
        assert_eq!(err, Error::Validation("n_devices must be a power of two".into()));
    }

    #[test]
    fn strict_mode_rejects_unknown_keys() {
        let text = r#"{"cluster":{"n_devices":1,"devices_per_node":1,"device_flops":1e12,
            "device_memory_bytes":1000,"memory_reserve_fraction":0.0,"bandwidth_table":[],"colour":1}}"#;
        assert!(matches!(parse_cluster_profile(text, true), Err(Error::Validation(m)) if m.contains("colour")));
        assert!(parse_cluster_profile(text, false).is_ok());
    }

    #[test]
    fn malformed_json_is_a_parse_error() {
        assert!(matches!(
            parse_profile_document("{\"cluster\": ", true),
            Err(Error::Parse(_))
        ));
        assert!(matches!(parse_profile_document("[1,2]", true), Err(Error::Parse(_))));
    }

    #[test]
    fn missing_link_fails_validation() {
        let mut c = cluster_with(vec![entry(Span::IntraNode, 4, 1e11, 0.0)]);
        assert!(c.validate().is_err());
        c.bandwidth_table.push(entry(Span::IntraNode, 2, 1e11, 0.0));
        c.validate().unwrap();
    }

    #[test]
    fn duplicate_entries_rejected() {
        let c = cluster_with(vec![
            entry(Span::IntraNode, 2, 1e11, 0.0),
            entry(Span::IntraNode, 2, 2e11, 0.0),
        ]);
        assert!(matches!(c.validate(), Err(Error::Validation(m)) if m.contains("duplicate")));
    }

    #[test]
    fn lookup_exact_fallback_and_mismatch() {
        let c = cluster_with(vec![
            entry(Span::IntraNode, 2, 300e9, 1e-6),
            entry(Span::IntraNode, 8, 100e9, 2e-6),
        ]);
        let hit = lookup_bandwidth(&c, Span::IntraNode, 2).unwrap();
        assert_eq!(hit, entry(Span::IntraNode, 2, 300e9, 1e-6));
        let fallback = lookup_bandwidth(&c, Span::IntraNode, 4).unwrap();
        assert_eq!(fallback.group_size, 2);
        assert_eq!(lookup_bandwidth(&c, Span::IntraNode, 16).unwrap().group_size, 8);

        let inter_only = cluster_with(vec![entry(Span::InterNode, 2, 25e9, 5e-6)]);
        assert_eq!(
            lookup_bandwidth(&inter_only, Span::IntraNode, 2),
            Err(Error::NoBandwidthEntry {
                span: Span::IntraNode,
                group_size: 2
            })
        );
    }

    #[test]
    fn synth_formulas() {
        assert_eq!(synth_transformer_layer(2).param_count, 74.0);
        let l = synth_transformer_layer(1024);
        assert_eq!(l.param_count, 12_596_224.0);
        assert_eq!(l.act_shardable_bytes_per_token, 24_576.0);
        assert_eq!(l.act_replicated_bytes_per_token, 10_240.0);
        assert_eq!(l.boundary_bytes_per_token, 2_048.0);
        assert_eq!(l.flops_per_token, 2.0 * 12_596_224.0);
        assert_eq!(l.flops_per_token_sq, 4096.0);
        assert!(synth_transformer_profile(0, 8, 8).is_err());
    }

    #[test]
    fn training_defaults_fill_in() {
        let doc = parse_profile_document(r#"{"training":{"global_batch":8}}"#, true).unwrap();
        assert_eq!(doc.training.unwrap(), TrainingConfig::new(8));
        assert!(parse_profile_document(r#"{"training":{"global_batch":6}}"#, true).is_err());
    }

    #[test]
    fn cluster_cannot_mix_with_model() {
        let m = synth_transformer_profile(1, 2, 2).unwrap();
        let c = synth_cluster(
            1,
            1,
            1e9,
            1000,
            LinkSpec {
                bus_bandwidth: 1.0,
                latency: 0.0,
            },
            LinkSpec {
                bus_bandwidth: 1.0,
                latency: 0.0,
            },
        )
        .unwrap();
        let text = to_json(&ProfileDocument {
            cluster: Some(c),
            model: Some(m),
            training: None,
        })
        .unwrap();
        assert!(parse_profile_document(&text, true).is_err());
    }
}
