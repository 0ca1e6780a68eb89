//! Ground-truth oracles for the metric vector of an architecture (FLOPs,
//! parameters, peak memory, per-device latency, synthetic accuracy) and the
//! JSONL dataset built from them.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::graphir::{
    elaborate, tss_active_edges, tss_has_path, CompGraph, GraphError, MacroConfig, ADD, AVG_POOL, BATCH_NORM,
    CONV, GLOBAL_AVG_POOL, LINEAR, RELU,
};
use crate::netstring::{graph_to_string, Traversal};
use crate::searchspace::{ArchSpec, OpKind, SpaceId};

pub const BYTES_PER_ELEMENT: u64 = 4;
pub const DATASET_SCHEMA_VERSION: u32 = 1;

pub const ACCURACY: &str = "accuracy";
pub const MEMORY: &str = "memory";
pub const LATENCY: &str = "latency";

#[derive(Debug, Error)]
pub enum CostError {
    #[error("node {node}: no cost rule for op `{op}`")]
    UnknownOp { node: usize, op: String },
    #[error("device profile `{profile}` has no coefficient for op `{op}` (node {node})")]
    MissingCoefficient {
        profile: String,
        op: String,
        node: usize,
    },
    #[error("invalid device profile `{name}`: {reason}")]
    InvalidProfile { name: String, reason: String },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("duplicate arch_index {index} (line {line})")]
    Duplicate { index: usize, line: usize },
    #[error("dataset: {0}")]
    Dataset(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CostError + '_ {
    move |source| CostError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// FLOPs of one node: `2*Cin*Cout*K^2*Hout*Wout` for convs, `2*in*out` per
/// row for linear layers, one op per output element otherwise.
pub fn node_flops(graph: &CompGraph, id: usize) -> Result<u64, CostError> {
    let node = &graph.nodes[id];
    let attr = |k: &str| node.attrs.get(k).copied().unwrap_or(0).max(0) as u64;
    let s = node.shape;
    Ok(match node.op.as_str() {
        CONV => {
            let k = attr("kernel");
            2 * attr("in_channels") * attr("out_channels") * k * k * (s.n * s.h * s.w) as u64
        }
        LINEAR => 2 * attr("in_features") * attr("out_features") * s.n as u64,
        AVG_POOL | RELU | BATCH_NORM | ADD | GLOBAL_AVG_POOL => s.numel(),
        other => {
            return Err(CostError::UnknownOp {
                node: id,
                op: other.to_string(),
            })
        }
    })
}

pub fn flops(graph: &CompGraph) -> Result<u64, CostError> {
    (0..graph.nodes.len()).map(|i| node_flops(graph, i)).sum()
}

pub fn tensor_bytes(graph: &CompGraph, id: usize) -> u64 {
    graph.nodes[id].shape.numel() * BYTES_PER_ELEMENT
}

/// Peak bytes over a topological execution: parameters are resident, each
/// node allocates its output, and a tensor is released once its last
/// consumer has run. The graph input is not counted.
pub fn peak_memory(graph: &CompGraph) -> u64 {
    let n = graph.nodes.len();
    let mut last_use = vec![None; n];
    for node in &graph.nodes {
        for &src in &node.inputs {
            last_use[src] = Some(node.id);
        }
    }
    let mut running = graph.param_count * BYTES_PER_ELEMENT;
    let mut peak = running;
    for node in &graph.nodes {
        running += tensor_bytes(graph, node.id);
        peak = peak.max(running);
        let mut freed: Vec<usize> = node
            .inputs
            .iter()
            .copied()
            .filter(|&src| last_use[src] == Some(node.id))
            .collect();
        freed.sort_unstable();
        freed.dedup();
        for src in freed {
            running -= tensor_bytes(graph, src);
        }
    }
    peak
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceProfile {
    pub name: String,
    /// Milliseconds per 10^6 FLOPs, keyed by op name.
    pub coefficients: BTreeMap<String, f64>,
    pub per_node_overhead_ms: f64,
    /// Relative standard deviation of multiplicative measurement noise.
    pub noise_sigma: f64,
}

const BUILTIN_PROFILES: [(&str, &str); 6] = [
    ("edgegpu", include_str!("../profiles/edgegpu.json")),
    ("edgetpu", include_str!("../profiles/edgetpu.json")),
    ("eyeriss", include_str!("../profiles/eyeriss.json")),
    ("fpga", include_str!("../profiles/fpga.json")),
    ("pixel3", include_str!("../profiles/pixel3.json")),
    ("raspi4", include_str!("../profiles/raspi4.json")),
];

impl DeviceProfile {
    pub fn validate(&self) -> Result<(), CostError> {
        let bad = |reason: String| CostError::InvalidProfile {
            name: self.name.clone(),
            reason,
        };
        if self.name.is_empty() || self.name.contains(['@', ',', '/']) {
            return Err(bad("name must be nonempty without '@', ',' or '/'".into()));
        }
        if let Some((op, c)) = self
            .coefficients
            .iter()
            .find(|(_, &c)| !(c.is_finite() && c > 0.0))
        {
            return Err(bad(format!("coefficient for {op} must be > 0, got {c}")));
        }
        if !(self.per_node_overhead_ms.is_finite() && self.per_node_overhead_ms >= 0.0) {
            return Err(bad("per_node_overhead_ms must be >= 0".into()));
        }
        if !(0.0..=0.2).contains(&self.noise_sigma) {
            return Err(bad(format!("noise_sigma {} outside [0, 0.2]", self.noise_sigma)));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, CostError> {
        let p: DeviceProfile = serde_json::from_str(text).map_err(|e| CostError::InvalidProfile {
            name: "?".into(),
            reason: e.to_string(),
        })?;
        p.validate()?;
        Ok(p)
    }

    /// The six shipped profiles, in a fixed order.
    pub fn builtin() -> Vec<DeviceProfile> {
        BUILTIN_PROFILES
            .iter()
            .map(|(_, text)| Self::from_json(text).expect("shipped profile is valid"))
            .collect()
    }

    /// Every `*.json` profile in `dir`, sorted by file name.
    pub fn load_dir(dir: &Path) -> Result<Vec<DeviceProfile>, CostError> {
        let mut paths: Vec<_> = fs::read_dir(dir)
            .map_err(io_err(dir))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        paths.sort();
        paths
            .iter()
            .map(|p| Self::from_json(&fs::read_to_string(p).map_err(io_err(p))?))
            .collect()
    }

    pub fn with_noise(mut self, sigma: f64) -> Self {
        self.noise_sigma = sigma;
        self
    }
}

/// Noise-free latency: `sum coeff(op) * flops / 1e6 + overhead * |nodes|`.
pub fn latency_mean(graph: &CompGraph, profile: &DeviceProfile) -> Result<f64, CostError> {
    let mut total = 0.0;
    for node in &graph.nodes {
        let coeff = profile
            .coefficients
            .get(&node.op)
            .ok_or_else(|| CostError::MissingCoefficient {
                profile: profile.name.clone(),
                op: node.op.clone(),
                node: node.id,
            })?;
        total += coeff * node_flops(graph, node.id)? as f64 / 1e6;
    }
    Ok(total + profile.per_node_overhead_ms * graph.nodes.len() as f64)
}

/// Mean latency scaled by `1 + eps`, `eps ~ Normal(0, noise_sigma)`.
pub fn latency<R: Rng + ?Sized>(
    graph: &CompGraph,
    profile: &DeviceProfile,
    rng: &mut R,
) -> Result<f64, CostError> {
    let mean = latency_mean(graph, profile)?;
    if profile.noise_sigma == 0.0 {
        return Ok(mean);
    }
    let eps = Normal::new(0.0, profile.noise_sigma)
        .expect("validated sigma")
        .sample(rng);
    Ok(mean * (1.0 + eps))
}

pub const DEFAULT_ACCURACY_NOISE: f64 = 3.0;

/// Weights over active-edge counts of (skip_connect, conv_1x1, conv_3x3,
/// avg_pool_3x3) and the bias of the TSS accuracy logit.
pub const TSS_ACCURACY_WEIGHTS: [f64; 4] = [0.0, 0.12, 0.20, 0.04];
pub const TSS_ACCURACY_BIAS: f64 = 0.9;
/// Weights over `log2(channels / 8)` per SSS layer, and bias.
pub const SSS_ACCURACY_WEIGHTS: [f64; 5] = [0.10, 0.12, 0.14, 0.16, 0.18];
pub const SSS_ACCURACY_BIAS: f64 = -1.0;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Noise-free synthetic accuracy in percent.
pub fn base_accuracy(arch: &ArchSpec) -> f64 {
    let logit = match arch {
        ArchSpec::Tss(a) => {
            let mut counts = [0.0f64; 4];
            for (_, op) in tss_active_edges(a) {
                let slot = match op {
                    OpKind::SkipConnect => 0,
                    OpKind::Conv1x1 => 1,
                    OpKind::Conv3x3 => 2,
                    OpKind::AvgPool3x3 => 3,
                    OpKind::None => continue,
                };
                counts[slot] += 1.0;
            }
            TSS_ACCURACY_BIAS
                + counts
                    .iter()
                    .zip(TSS_ACCURACY_WEIGHTS)
                    .map(|(c, w)| c * w)
                    .sum::<f64>()
        }
        ArchSpec::Sss(a) => {
            SSS_ACCURACY_BIAS
                + a.channels
                    .iter()
                    .zip(SSS_ACCURACY_WEIGHTS)
                    .map(|(&c, w)| w * (c as f64 / 8.0).log2())
                    .sum::<f64>()
        }
    };
    100.0 * sigmoid(logit)
}

/// Base accuracy plus seeded `Normal(0, noise)` percentage points, clamped to
/// `[0, 100]`.
pub fn synthetic_accuracy(arch: &ArchSpec, seed: u64, noise: f64) -> f64 {
    let base = base_accuracy(arch);
    let value = if noise > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, arch.index() as u64));
        base + Normal::new(0.0, noise).expect("positive sigma").sample(&mut rng)
    } else {
        base
    };
    value.clamp(0.0, 100.0)
}

/// SplitMix64-style combination of two words into a seed.
pub fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_add(0x9E37_79B9_7F4A_7C15).rotate_left(17);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn name_seed(name: &str) -> u64 {
    let d = Sha256::digest(name.as_bytes());
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub flops: u64,
    pub params: u64,
    pub peak_mem_bytes: u64,
    pub latency_ms: BTreeMap<String, f64>,
    pub accuracy_pct: Option<f64>,
}

/// Metric key for a device's latency.
pub fn latency_key(device: &str) -> String {
    format!("{LATENCY}@{device}")
}

/// Family of a metric key: `accuracy`, `memory` or `latency`.
pub fn metric_family(name: &str) -> Option<&'static str> {
    match name.split_once('@') {
        None => match name {
            ACCURACY => Some(ACCURACY),
            MEMORY => Some(MEMORY),
            LATENCY => Some(LATENCY),
            _ => None,
        },
        Some((LATENCY, dev)) if !dev.is_empty() => Some(LATENCY),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleOptions {
    pub macro_config: MacroConfig,
    pub accuracy_noise: f64,
    /// Replaces every profile's `noise_sigma` when set.
    pub latency_noise: Option<f64>,
}

impl Default for OracleOptions {
    fn default() -> Self {
        Self {
            macro_config: MacroConfig::default(),
            accuracy_noise: DEFAULT_ACCURACY_NOISE,
            latency_noise: None,
        }
    }
}

pub fn cost_report(
    arch: &ArchSpec,
    profiles: &[DeviceProfile],
    opts: &OracleOptions,
    seed: u64,
) -> Result<CostReport, CostError> {
    let graph = elaborate(arch, &opts.macro_config)?;
    let arch_seed = mix(seed, arch.index() as u64);
    let mut latency_ms = BTreeMap::new();
    for p in profiles {
        let mut profile = p.clone();
        if let Some(sigma) = opts.latency_noise {
            profile.noise_sigma = sigma;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix(arch_seed, name_seed(&p.name)));
        latency_ms.insert(p.name.clone(), latency(&graph, &profile, &mut rng)?);
    }
    Ok(CostReport {
        flops: flops(&graph)?,
        params: graph.param_count,
        peak_mem_bytes: peak_memory(&graph),
        latency_ms,
        accuracy_pct: Some(synthetic_accuracy(arch, seed, opts.accuracy_noise)),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordSource {
    Oracle,
    Ingested,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub space: SpaceId,
    pub arch_index: usize,
    pub string_hash: String,
    pub metrics: BTreeMap<String, f64>,
    pub source: RecordSource,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
}

impl DatasetRecord {
    pub fn arch(&self) -> Result<ArchSpec, CostError> {
        ArchSpec::decode(self.space, self.arch_index).map_err(|e| CostError::Dataset(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub schema_version: u32,
    pub space: SpaceId,
    pub metrics: Vec<String>,
    pub source: RecordSource,
    pub oracle_digest: String,
    /// Device names in profile order; `latency` resolves to the first.
    pub devices: Vec<String>,
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub records: Vec<DatasetRecord>,
}

impl Dataset {
    /// Map a requested objective onto a stored metric key. Bare `latency`
    /// means the first device.
    pub fn resolve_metric(&self, name: &str) -> Result<String, CostError> {
        let key = if name == LATENCY {
            match self.header.devices.first() {
                Some(d) => latency_key(d),
                None => name.to_string(),
            }
        } else {
            name.to_string()
        };
        if self.header.metrics.contains(&key) {
            Ok(key)
        } else {
            Err(CostError::Dataset(format!(
                "unknown metric `{name}`; available: {}",
                self.header.metrics.join(", ")
            )))
        }
    }

    pub fn column(&self, key: &str) -> Result<Vec<f64>, CostError> {
        self.records
            .iter()
            .map(|r| {
                r.metrics.get(key).copied().ok_or_else(|| {
                    CostError::Dataset(format!("record {} lacks metric `{key}`", r.arch_index))
                })
            })
            .collect()
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{}", serde_json::to_string(&self.header)?)?;
        for r in &self.records {
            writeln!(w, "{}", serde_json::to_string(r)?)?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), CostError> {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).map_err(io_err(path))?;
        fs::write(path, buf).map_err(io_err(path))
    }

    pub fn read_jsonl<R: Read>(r: R) -> Result<Dataset, CostError> {
        let mut lines = BufReader::new(r).lines();
        let malformed = |line: usize, reason: String| CostError::Malformed { line, reason };
        let header_line = lines
            .next()
            .ok_or_else(|| malformed(1, "empty dataset file".into()))?
            .map_err(|e| malformed(1, e.to_string()))?;
        let header: DatasetHeader =
            serde_json::from_str(&header_line).map_err(|e| malformed(1, e.to_string()))?;
        if header.schema_version != DATASET_SCHEMA_VERSION {
            return Err(malformed(
                1,
                format!("unsupported schema version {}", header.schema_version),
            ));
        }
        let mut records = Vec::new();
        let mut seen = HashSet::new();
        for (i, line) in lines.enumerate() {
            let lineno = i + 2;
            let line = line.map_err(|e| malformed(lineno, e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let r: DatasetRecord =
                serde_json::from_str(&line).map_err(|e| malformed(lineno, e.to_string()))?;
            if r.source != header.source || r.space != header.space {
                return Err(malformed(lineno, "record source/space differs from header".into()));
            }
            if !seen.insert(r.arch_index) {
                return Err(CostError::Duplicate {
                    index: r.arch_index,
                    line: lineno,
                });
            }
            records.push(r);
        }
        Ok(Dataset { header, records })
    }

    pub fn load(path: &Path) -> Result<Dataset, CostError> {
        Dataset::read_jsonl(fs::File::open(path).map_err(io_err(path))?)
    }
}

fn oracle_digest(space: SpaceId, profiles: &[DeviceProfile], opts: &OracleOptions) -> String {
    let doc = serde_json::json!({
        "space": space,
        "profiles": profiles,
        "options": opts,
        "accuracy": {
            "tss_weights": TSS_ACCURACY_WEIGHTS,
            "tss_bias": TSS_ACCURACY_BIAS,
            "sss_weights": SSS_ACCURACY_WEIGHTS,
            "sss_bias": SSS_ACCURACY_BIAS,
        },
    });
    hex::encode(Sha256::digest(doc.to_string().as_bytes()))
}

pub fn string_hash(arch: &ArchSpec, cfg: &MacroConfig) -> Result<String, CostError> {
    let graph = elaborate(arch, cfg)?;
    let s = graph_to_string(&graph, Traversal::PostorderDfs)
        .map_err(|e| CostError::Dataset(e.to_string()))?;
    Ok(s.digest())
}

/// One oracle record per index.
/// `n` distinct indices of `space` that elaborate to a network, in a
/// seeded random order.
pub fn sample_valid_indices(space: SpaceId, n: usize, seed: u64) -> Result<Vec<usize>, CostError> {
    let mut all: Vec<usize> = (0..space.size()).collect();
    all.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let valid: Vec<usize> = all
        .into_iter()
        .filter(|&i| match ArchSpec::decode(space, i) {
            Ok(ArchSpec::Tss(t)) => tss_has_path(&t),
            Ok(ArchSpec::Sss(_)) => true,
            Err(_) => false,
        })
        .take(n)
        .collect();
    if valid.len() < n {
        return Err(CostError::Dataset(format!(
            "requested {n} architectures but {} has only {} valid ones",
            space.as_str(),
            valid.len()
        )));
    }
    Ok(valid)
}

pub fn build_dataset(
    space: SpaceId,
    indices: &[usize],
    profiles: &[DeviceProfile],
    opts: &OracleOptions,
    seed: u64,
) -> Result<Dataset, CostError> {
    let mut metrics = vec![ACCURACY.to_string(), MEMORY.to_string()];
    metrics.extend(profiles.iter().map(|p| latency_key(&p.name)));
    let header = DatasetHeader {
        schema_version: DATASET_SCHEMA_VERSION,
        space,
        metrics,
        source: RecordSource::Oracle,
        oracle_digest: oracle_digest(space, profiles, opts),
        devices: profiles.iter().map(|p| p.name.clone()).collect(),
        seed: Some(seed),
        manifest: None,
    };
    let mut seen = HashSet::new();
    let mut records = Vec::with_capacity(indices.len());
    for (pos, &index) in indices.iter().enumerate() {
        if !seen.insert(index) {
            return Err(CostError::Duplicate { index, line: pos + 1 });
        }
        let arch = ArchSpec::decode(space, index).map_err(|e| CostError::Dataset(e.to_string()))?;
        let report = cost_report(&arch, profiles, opts, seed)?;
        let mut m = BTreeMap::new();
        m.insert(ACCURACY.to_string(), report.accuracy_pct.expect("oracle accuracy"));
        m.insert(MEMORY.to_string(), report.peak_mem_bytes as f64);
        for (dev, ms) in &report.latency_ms {
            m.insert(latency_key(dev), *ms);
        }
        records.push(DatasetRecord {
            space,
            arch_index: index,
            string_hash: string_hash(&arch, &opts.macro_config)?,
            metrics: m,
            source: RecordSource::Oracle,
            flags: Vec::new(),
        });
    }
    Ok(Dataset { header, records })
}

/// Read benchmark rows `space,arch_index,<metric>...`. Negative latencies are
/// kept and flagged.
pub fn ingest_csv(path: &Path, cfg: &MacroConfig) -> Result<Dataset, CostError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    ingest_csv_reader(file, cfg)
}

pub fn ingest_csv_reader<R: Read>(input: R, cfg: &MacroConfig) -> Result<Dataset, CostError> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let malformed = |line: usize, reason: String| CostError::Malformed { line, reason };
    let headers = reader
        .headers()
        .map_err(|e| malformed(1, e.to_string()))?
        .clone();
    if headers.len() < 3 || &headers[0] != "space" || &headers[1] != "arch_index" {
        return Err(malformed(
            1,
            "header must be `space,arch_index,<metric>...`".into(),
        ));
    }
    let metric_names: Vec<String> = headers.iter().skip(2).map(str::to_string).collect();
    for m in &metric_names {
        if metric_family(m).is_none() {
            return Err(malformed(1, format!("unknown metric column `{m}`")));
        }
    }
    let mut space = None;
    let mut seen = HashSet::new();
    let mut records = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| malformed(line, e.to_string()))?;
        if row.len() != headers.len() {
            return Err(malformed(
                line,
                format!("expected {} fields, found {}", headers.len(), row.len()),
            ));
        }
        let row_space: SpaceId = row[0]
            .parse()
            .map_err(|e: crate::searchspace::SpaceError| malformed(line, e.to_string()))?;
        if *space.get_or_insert(row_space) != row_space {
            return Err(malformed(line, "mixed search spaces".into()));
        }
        let index: usize = row[1]
            .parse()
            .map_err(|_| malformed(line, format!("bad arch_index `{}`", &row[1])))?;
        let arch = ArchSpec::decode(row_space, index).map_err(|e| malformed(line, e.to_string()))?;
        if !seen.insert(index) {
            return Err(CostError::Duplicate { index, line });
        }
        let mut metrics = BTreeMap::new();
        let mut flags = Vec::new();
        for (name, field) in metric_names.iter().zip(row.iter().skip(2)) {
            let v: f64 = field
                .parse()
                .map_err(|_| malformed(line, format!("bad value `{field}` for {name}")))?;
            if !v.is_finite() {
                return Err(malformed(line, format!("non-finite value for {name}")));
            }
            if v < 0.0 {
                flags.push(format!("negative:{name}"));
            }
            metrics.insert(name.clone(), v);
        }
        records.push(DatasetRecord {
            space: row_space,
            arch_index: index,
            string_hash: string_hash(&arch, cfg).map_err(|e| malformed(line, e.to_string()))?,
            metrics,
            source: RecordSource::Ingested,
            flags,
        });
    }
    let space = space.ok_or_else(|| malformed(2, "no data rows".into()))?;
    let devices = metric_names
        .iter()
        .filter_map(|m| m.split_once('@').map(|(_, d)| d.to_string()))
        .collect();
    Ok(Dataset {
        header: DatasetHeader {
            schema_version: DATASET_SCHEMA_VERSION,
            space,
            metrics: metric_names,
            source: RecordSource::Ingested,
            oracle_digest: String::new(),
            devices,
            seed: None,
            manifest: None,
        },
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graphir::{GNode, TensorShape};
    use crate::searchspace::{TssArch, TSS_SIZE};

    fn node(id: usize, op: &str, attrs: &[(&str, i64)], inputs: Vec<usize>, shape: TensorShape) -> GNode {
        GNode {
            id,
            op: op.into(),
            attrs: attrs.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            inputs,
            shape,
        }
    }

    fn graph(nodes: Vec<GNode>, params: u64) -> CompGraph {
        CompGraph {
            nodes,
            input_shape: TensorShape::new(1, 16, 32, 32),
            param_count: params,
        }
    }

    fn identity() -> ArchSpec {
        "tss/125".parse().unwrap()
    }

    #[test]
    fn sampled_indices_are_distinct_and_valid() {
        let a = sample_valid_indices(SpaceId::Tss, 500, 3).unwrap();
        assert_eq!(a, sample_valid_indices(SpaceId::Tss, 500, 3).unwrap());
        let mut d = a.clone();
        d.sort_unstable();
        d.dedup();
        assert_eq!(d.len(), 500);
        assert!(a.iter().all(|&i| elaborate(&ArchSpec::decode(SpaceId::Tss, i).unwrap(), &MacroConfig::default()).is_ok()));
        assert!(sample_valid_indices(SpaceId::Tss, 15625, 0).is_err());
        assert_eq!(sample_valid_indices(SpaceId::Sss, 32768, 0).unwrap().len(), 32768);
    }

    #[test]
    fn single_conv_flops() {
        let s = TensorShape::new(1, 16, 32, 32);
        let g = graph(
            vec![node(
                0,
                CONV,
                &[("in_channels", 16), ("kernel", 3), ("out_channels", 16), ("padding", 1), ("stride", 1)],
                vec![],
                s,
            )],
            0,
        );
        assert_eq!(flops(&g).unwrap(), 4_718_592);
    }

    #[test]
    fn unknown_op_is_reported() {
        let s = TensorShape::new(1, 1, 1, 1);
        let g = graph(vec![node(0, "Gelu", &[], vec![], s)], 0);
        assert!(matches!(flops(&g), Err(CostError::UnknownOp { node: 0, .. })));
    }

    #[test]
    fn identity_cell_flops_are_skeleton_only() {
        let g = elaborate(&identity(), &MacroConfig::default()).unwrap();
        let stem = 2 * 3 * 16 * 9 * 1024 + 16 * 1024;
        let down1 = 2 * 16 * 32 * 9 * 256 + 32 * 256;
        let down2 = 2 * 32 * 64 * 9 * 64 + 64 * 64;
        let head = 64 + 2 * 64 * 10;
        assert_eq!(flops(&g).unwrap(), (stem + down1 + down2 + head) as u64);
    }

    #[test]
    fn conv3x3_arch_costs_more_than_conv1x1() {
        let cfg = MacroConfig::default();
        let big = elaborate(&ArchSpec::Tss(TssArch::new([OpKind::Conv3x3; 6])), &cfg).unwrap();
        let small = elaborate(&ArchSpec::Tss(TssArch::new([OpKind::Conv1x1; 6])), &cfg).unwrap();
        assert!(flops(&big).unwrap() > flops(&small).unwrap());
    }

    #[test]
    fn chain_and_diamond_peaks() {
        let s = TensorShape::new(1, 4, 8, 8);
        let bytes = s.numel() * 4;
        let chain = graph(
            vec![
                node(0, RELU, &[], vec![], s),
                node(1, RELU, &[], vec![0], s),
                node(2, RELU, &[], vec![1], s),
            ],
            10,
        );
        assert_eq!(peak_memory(&chain), 40 + 2 * bytes);
        let diamond = graph(
            vec![
                node(0, RELU, &[], vec![], s),
                node(1, RELU, &[], vec![0], s),
                node(2, RELU, &[], vec![0], s),
                node(3, ADD, &[], vec![1, 2], s),
            ],
            10,
        );
        assert_eq!(peak_memory(&diamond), 40 + 3 * bytes);
    }

    #[test]
    fn peak_at_least_params() {
        let g = elaborate(&"tss/11111".parse().unwrap(), &MacroConfig::default()).unwrap();
        assert!(peak_memory(&g) >= g.param_count * 4);
    }

    fn profile(coeff: f64, overhead: f64) -> DeviceProfile {
        DeviceProfile {
            name: "test".into(),
            coefficients: [CONV, BATCH_NORM, RELU, AVG_POOL, ADD, GLOBAL_AVG_POOL, LINEAR]
                .iter()
                .map(|op| (op.to_string(), coeff))
                .collect(),
            per_node_overhead_ms: overhead,
            noise_sigma: 0.0,
        }
    }

    #[test]
    fn single_node_latency() {
        let s = TensorShape::new(1, 16, 32, 32);
        let g = graph(
            vec![node(
                0,
                CONV,
                &[("in_channels", 16), ("kernel", 3), ("out_channels", 16), ("padding", 1), ("stride", 1)],
                vec![],
                s,
            )],
            0,
        );
        let p = profile(0.5, 0.25);
        let expected = 0.5 * 4_718_592.0 / 1e6 + 0.25;
        assert!((latency_mean(&g, &p).unwrap() - expected).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(latency(&g, &p, &mut rng).unwrap(), latency_mean(&g, &p).unwrap());
    }

    #[test]
    fn doubling_coefficients_doubles_compute_term_only() {
        let g = elaborate(&"tss/4242".parse().unwrap(), &MacroConfig::default()).unwrap();
        let overhead = 0.3 * g.nodes.len() as f64;
        let a = latency_mean(&g, &profile(0.1, 0.3)).unwrap();
        let b = latency_mean(&g, &profile(0.2, 0.3)).unwrap();
        assert!(((b - overhead) - 2.0 * (a - overhead)).abs() < 1e-9);
    }

    #[test]
    fn latency_is_monotone_in_each_coefficient() {
        let g = elaborate(&"tss/9999".parse().unwrap(), &MacroConfig::default()).unwrap();
        let base = profile(0.1, 0.05);
        let l0 = latency_mean(&g, &base).unwrap();
        for op in base.coefficients.keys() {
            if !g.nodes.iter().any(|n| &n.op == op) {
                continue;
            }
            let mut p = base.clone();
            *p.coefficients.get_mut(op).unwrap() *= 1.5;
            assert!(latency_mean(&g, &p).unwrap() > l0, "{op}");
        }
    }

    #[test]
    fn missing_coefficient_is_an_error() {
        let g = elaborate(&identity(), &MacroConfig::default()).unwrap();
        let mut p = profile(0.1, 0.0);
        p.coefficients.remove(LINEAR);
        assert!(matches!(
            latency_mean(&g, &p),
            Err(CostError::MissingCoefficient { .. })
        ));
    }

    #[test]
    fn shipped_profiles() {
        let profiles = DeviceProfile::builtin();
        assert_eq!(profiles.len(), 6);
        let tpu = profiles.iter().find(|p| p.name == "edgetpu").unwrap();
        for p in &profiles {
            assert!(p.per_node_overhead_ms <= tpu.per_node_overhead_ms);
            assert!(p.noise_sigma <= tpu.noise_sigma);
        }
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("profiles");
        assert_eq!(DeviceProfile::load_dir(&dir).unwrap(), profiles);
        let mut bad = profiles[0].clone();
        bad.noise_sigma = 0.5;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn identity_cell_is_minimum_base_accuracy() {
        let id = base_accuracy(&identity());
        for i in 0..TSS_SIZE {
            let a = ArchSpec::decode(SpaceId::Tss, i).unwrap();
            assert!(base_accuracy(&a) >= id);
        }
    }

    #[test]
    fn synthetic_accuracy_is_seeded() {
        let a: ArchSpec = "tss/777".parse().unwrap();
        assert_eq!(synthetic_accuracy(&a, 5, 3.0), synthetic_accuracy(&a, 5, 3.0));
        assert_ne!(synthetic_accuracy(&a, 5, 3.0), synthetic_accuracy(&a, 6, 3.0));
        assert_eq!(synthetic_accuracy(&a, 5, 0.0), base_accuracy(&a));
        let v = synthetic_accuracy(&a, 5, 3.0);
        assert!((0.0..=100.0).contains(&v));
    }

    #[test]
    fn build_dataset_ten_records() {
        let profiles = DeviceProfile::builtin();
        let idx: Vec<usize> = (1000..1010).collect();
        let ds = build_dataset(SpaceId::Tss, &idx, &profiles, &OracleOptions::default(), 1).unwrap();
        assert_eq!(ds.records.len(), 10);
        for r in &ds.records {
            for m in &ds.header.metrics {
                assert!(r.metrics.contains_key(m));
            }
            assert!(r.metrics.values().all(|v| *v >= 0.0));
        }
        let mut buf = Vec::new();
        ds.write_jsonl(&mut buf).unwrap();
        let back = Dataset::read_jsonl(buf.as_slice()).unwrap();
        assert_eq!(back, ds);
        assert_eq!(ds.resolve_metric("latency").unwrap(), "latency@edgegpu");
        assert!(ds.resolve_metric("energy").is_err());
    }

    #[test]
    fn build_dataset_rejects_no_path_arch() {
        let profiles = DeviceProfile::builtin();
        assert!(build_dataset(SpaceId::Tss, &[0], &profiles, &OracleOptions::default(), 1).is_err());
    }

    #[test]
    fn ingest_well_formed_csv() {
        let csv = "space,arch_index,accuracy,latency@edgetpu\n\
                   tss,125,91.5,1.25\n\
                   tss,126,90.0,-0.5\n\
                   tss,7000,88.0,2.0\n";
        let ds = ingest_csv_reader(csv.as_bytes(), &MacroConfig::default()).unwrap();
        assert_eq!(ds.records.len(), 3);
        assert!(ds.records.iter().all(|r| r.source == RecordSource::Ingested));
        assert_eq!(ds.records[1].flags, vec!["negative:latency@edgetpu".to_string()]);
        assert_eq!(ds.records[1].metrics["latency@edgetpu"], -0.5);
        assert_eq!(ds.header.devices, vec!["edgetpu".to_string()]);
    }

    #[test]
    fn ingest_errors_carry_line_numbers() {
        let cfg = MacroConfig::default();
        let bad = "space,arch_index,accuracy\ntss,125,91.5\ntss,126,abc\n";
        match ingest_csv_reader(bad.as_bytes(), &cfg) {
            Err(CostError::Malformed { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        let dup = "space,arch_index,accuracy\ntss,125,91.5\ntss,125,90\n";
        assert!(matches!(
            ingest_csv_reader(dup.as_bytes(), &cfg),
            Err(CostError::Duplicate { index: 125, line: 3 })
        ));
        let short = "space,arch_index,accuracy\ntss,125\n";
        assert!(ingest_csv_reader(short.as_bytes(), &cfg).is_err());
    }

    #[test]
    fn metric_families() {
        assert_eq!(metric_family("latency@pixel3"), Some(LATENCY));
        assert_eq!(metric_family("memory"), Some(MEMORY));
        assert_eq!(metric_family("latency@"), None);
        assert_eq!(metric_family("energy"), None);
    }
}
