//! Experiment configuration: a small `key = value` format with dotted
//! sections (`[section]` headers or fully dotted keys), versioned by a
//! mandatory `config-version` key. Unknown keys are rejected so configs
//! cannot drift silently.

use crate::coherence::system::MechanismKind;
use crate::error::{SimError, SimResult};
use crate::mem::TimingConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExperimentKind {
    ImpicaMicro,
    ImpicaSensitivity,
    Coherence,
}

impl ExperimentKind {
    pub fn name(&self) -> &'static str {
        match self {
            ExperimentKind::ImpicaMicro => "impica-micro",
            ExperimentKind::ImpicaSensitivity => "impica-sensitivity",
            ExperimentKind::Coherence => "coherence",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WorkloadKind {
    List,
    Hash,
    Btree,
    Graph,
    Htap,
}

impl WorkloadKind {
    pub fn name(&self) -> &'static str {
        match self {
            WorkloadKind::List => "list",
            WorkloadKind::Hash => "hash",
            WorkloadKind::Btree => "btree",
            WorkloadKind::Graph => "graph",
            WorkloadKind::Htap => "htap",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PageTableKind {
    Rpt,
    FourLevel,
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub workload: WorkloadKind,
    // list/btree/hash sizes
    pub nodes: u64,
    pub buckets: u64,
    pub fill: u64,
    pub keys: u64,
    pub lookups: u64,
    // graph/htap sizes
    pub vertices: u64,
    pub edges: u64,
    pub tuples: u64,
    pub transactions: u64,
    pub analytic_kernels: usize,
    pub edge_file: Option<String>,
    // system shape
    pub timing: TimingConfig,
    pub cpu_cores: usize,
    pub pim_cores: usize,
    pub tlb_entries: usize,
    pub page_table: PageTableKind,
    pub translations: u64,
    // run control
    pub mechanism: MechanismKind,
    pub mechanisms: Vec<MechanismKind>,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            kind: ExperimentKind::ImpicaMicro,
            workload: WorkloadKind::List,
            nodes: 1024,
            buckets: 1 << 14,
            fill: 3 * (1 << 14) / 2,
            keys: 100_000,
            lookups: 10_000,
            vertices: 256,
            edges: 2048,
            tuples: 10_000,
            transactions: 2_000,
            analytic_kernels: 16,
            edge_file: None,
            timing: TimingConfig::default(),
            cpu_cores: 16,
            pim_cores: 16,
            tlb_entries: 32,
            page_table: PageTableKind::Rpt,
            translations: 10_000,
            mechanism: MechanismKind::LazyPim,
            mechanisms: vec![
                MechanismKind::CpuOnly,
                MechanismKind::Fg,
                MechanismKind::Cg,
                MechanismKind::Nc,
                MechanismKind::LazyPim,
                MechanismKind::IdealPim,
            ],
            seed: 1,
        }
    }
}

impl ExperimentConfig {
    /// Switch the workload sizes to the full-scale presets.
    pub fn apply_paper_scale(&mut self) {
        self.nodes = 30_000;
        self.buckets = 1 << 20;
        self.fill = 3 * (1 << 20) / 2;
        self.keys = 3_000_000;
        self.lookups = 100_000;
        self.tuples = 200_000;
        self.transactions = 200_000;
        self.analytic_kernels = 256;
        self.vertices = 1 << 16;
        self.edges = 1 << 19;
    }

    pub fn validate(&self) -> SimResult<()> {
        self.timing.validate()?;
        if self.kind == ExperimentKind::Coherence {
            for (what, n) in [("cores.cpu", self.cpu_cores), ("cores.pim", self.pim_cores)] {
                if !(4..=16).contains(&n) {
                    return Err(SimError::Config(format!(
                        "{what} = {n} outside the supported 4..=16 range"
                    )));
                }
            }
            if !matches!(self.workload, WorkloadKind::Graph | WorkloadKind::Htap) {
                return Err(SimError::Config(format!(
                    "coherence experiments need workload.kind graph|htap, got {}",
                    self.workload.name()
                )));
            }
        } else if !matches!(
            self.workload,
            WorkloadKind::List | WorkloadKind::Hash | WorkloadKind::Btree
        ) {
            return Err(SimError::Config(format!(
                "{} experiments need workload.kind list|hash|btree, got {}",
                self.kind.name(),
                self.workload.name()
            )));
        }
        if self.tlb_entries == 0 {
            return Err(SimError::Config("tlb.entries must be positive".into()));
        }
        if self.mechanisms.is_empty() {
            return Err(SimError::Config("run.mechanisms must be non-empty".into()));
        }
        Ok(())
    }
}

fn bad(key: &str, val: &str) -> SimError {
    SimError::Config(format!("bad value '{val}' for key '{key}'"))
}

fn parse_u64(key: &str, val: &str) -> SimResult<u64> {
    val.parse().map_err(|_| bad(key, val))
}

fn parse_usize(key: &str, val: &str) -> SimResult<usize> {
    val.parse().map_err(|_| bad(key, val))
}

/// Parse a config text into an [`ExperimentConfig`]. Every key must be
/// known; `config-version = 1` must be present.
pub fn parse_config(text: &str) -> SimResult<ExperimentConfig> {
    let mut cfg = ExperimentConfig::default();
    let mut section = String::new();
    let mut saw_version = false;
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(hdr) = line.strip_prefix('[') {
            let hdr = hdr.strip_suffix(']').ok_or_else(|| {
                SimError::Config(format!("line {}: unterminated section", lineno + 1))
            })?;
            section = hdr.trim().to_string();
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(SimError::Config(format!(
                "line {}: expected 'key = value'",
                lineno + 1
            )));
        };
        let local = k.trim();
        let val = v.trim();
        let key = if section.is_empty() || local.contains('.') {
            local.to_string()
        } else {
            format!("{section}.{local}")
        };
        match key.as_str() {
            "config-version" => {
                if val != "1" {
                    return Err(SimError::Config(format!(
                        "unsupported config-version '{val}' (expected 1)"
                    )));
                }
                saw_version = true;
            }
            "experiment.kind" => {
                cfg.kind = match val {
                    "impica-micro" => ExperimentKind::ImpicaMicro,
                    "impica-sensitivity" => ExperimentKind::ImpicaSensitivity,
                    "coherence" => ExperimentKind::Coherence,
                    _ => return Err(bad(&key, val)),
                }
            }
            "workload.kind" => {
                cfg.workload = match val {
                    "list" => WorkloadKind::List,
                    "hash" => WorkloadKind::Hash,
                    "btree" => WorkloadKind::Btree,
                    "graph" => WorkloadKind::Graph,
                    "htap" => WorkloadKind::Htap,
                    _ => return Err(bad(&key, val)),
                }
            }
            "workload.nodes" => cfg.nodes = parse_u64(&key, val)?,
            "workload.buckets" => cfg.buckets = parse_u64(&key, val)?,
            "workload.fill" => cfg.fill = parse_u64(&key, val)?,
            "workload.keys" => cfg.keys = parse_u64(&key, val)?,
            "workload.lookups" => cfg.lookups = parse_u64(&key, val)?,
            "workload.vertices" => cfg.vertices = parse_u64(&key, val)?,
            "workload.edges" => cfg.edges = parse_u64(&key, val)?,
            "workload.tuples" => cfg.tuples = parse_u64(&key, val)?,
            "workload.transactions" => cfg.transactions = parse_u64(&key, val)?,
            "workload.kernels" => cfg.analytic_kernels = parse_usize(&key, val)?,
            "workload.edge-file" => cfg.edge_file = Some(val.to_string()),
            "timing.cpu-dram-latency" => cfg.timing.cpu_dram_latency = parse_u64(&key, val)?,
            "timing.pim-dram-latency" => cfg.timing.pim_dram_latency = parse_u64(&key, val)?,
            "timing.cpu-channel-bw" => cfg.timing.cpu_channel_bw = parse_u64(&key, val)?,
            "timing.pim-internal-bw" => cfg.timing.pim_internal_bw = parse_u64(&key, val)?,
            "cores.cpu" => cfg.cpu_cores = parse_usize(&key, val)?,
            "cores.pim" => cfg.pim_cores = parse_usize(&key, val)?,
            "tlb.entries" => cfg.tlb_entries = parse_usize(&key, val)?,
            "page-table.kind" => {
                cfg.page_table = match val {
                    "rpt" => PageTableKind::Rpt,
                    "four-level" => PageTableKind::FourLevel,
                    _ => return Err(bad(&key, val)),
                }
            }
            "run.translations" => cfg.translations = parse_u64(&key, val)?,
            "run.mechanism" => cfg.mechanism = MechanismKind::parse(val)?,
            "run.mechanisms" => {
                cfg.mechanisms = val
                    .split(',')
                    .map(|m| MechanismKind::parse(m.trim()))
                    .collect::<SimResult<Vec<_>>>()?;
            }
            "run.seed" => cfg.seed = parse_u64(&key, val)?,
            other => {
                return Err(SimError::Config(format!(
                    "line {}: unknown key '{other}'",
                    lineno + 1
                )))
            }
        }
    }
    if !saw_version {
        return Err(SimError::Config(
            "missing mandatory 'config-version' key".into(),
        ));
    }
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    const GOOD: &str = "\
config-version = 1
[experiment]
kind = coherence
[workload]
kind = graph
vertices = 128
edges = 512
[cores]
cpu = 8
pim = 8
[run]
mechanism = lazypim
seed = 7
";

    #[test]
    fn parses_sections_and_dotted_keys() {
        let cfg = parse_config(GOOD).unwrap();
        assert_eq!(cfg.kind, ExperimentKind::Coherence);
        assert_eq!(cfg.workload, WorkloadKind::Graph);
        assert_eq!(cfg.vertices, 128);
        assert_eq!(cfg.seed, 7);

        let dotted = "config-version = 1\nexperiment.kind = impica-micro\nworkload.kind = list\nworkload.nodes = 5\n";
        let cfg = parse_config(dotted).unwrap();
        assert_eq!(cfg.nodes, 5);
    }

    #[test]
    fn rejects_unknown_keys() {
        let err = parse_config("config-version = 1\nworkload.nodez = 5\n").unwrap_err();
        assert!(matches!(err, SimError::Config(ref m) if m.contains("unknown key")));
    }

    #[test]
    fn requires_version() {
        let err = parse_config("experiment.kind = impica-micro\n").unwrap_err();
        assert!(matches!(err, SimError::Config(ref m) if m.contains("config-version")));
        assert!(parse_config("config-version = 2\n").is_err());
    }

    #[test]
    fn validates_core_ranges() {
        let text = GOOD.replace("cpu = 8", "cpu = 2");
        let err = parse_config(&text).unwrap_err();
        assert!(matches!(err, SimError::Config(ref m) if m.contains("cores.cpu")));
    }

    #[test]
    fn comments_and_blanks_are_ignored() {
        let cfg = parse_config("# header\nconfig-version = 1  # inline\n\nrun.seed = 3\n").unwrap();
        assert_eq!(cfg.seed, 3);
    }
}
