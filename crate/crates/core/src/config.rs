//! Experiment files.
//!
//! One `section.key = value` pair per line; `#` starts a comment. Sizes take
//! binary suffixes (`K`, `KB`, `KiB`, `M`, ...). Unknown keys are errors.
//!
//! ```text
//! engine.max_events = 1000000
//! cache.l4.size = 512MiB
//! synth.locality = zipf:0.8
//! ```

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::cachehier::{configure_l4, CacheConfig};
use crate::engine::{EngineConfig, MachineConfig};
use crate::tlb::{Associativity, TlbConfig};
use crate::vmem::PageSize;
use crate::workload::{IntraPage, PageLocality, SynthConfig};

/// Environment variable consulted when no seed is given explicitly.
pub const SEED_ENV: &str = "MMU_SIM_SEED";

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{}{key}: {message}", line.map(|l| format!("line {l}: ")).unwrap_or_default())]
pub struct ConfigError {
    pub line: Option<usize>,
    pub key: String,
    pub message: String,
}

impl ConfigError {
    pub fn new(key: &str, message: impl Into<String>) -> Self {
        Self {
            line: None,
            key: key.to_string(),
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Workload {
    Trace(PathBuf),
    Synth(SynthConfig),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SweepConfig {
    pub l4_sizes: Vec<u64>,
    pub l4_blocks: Vec<u64>,
    pub ideal_tlb: Vec<bool>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            l4_sizes: [64, 128, 256, 512, 1024].iter().map(|m| m << 20).collect(),
            l4_blocks: vec![64, 512],
            ideal_tlb: vec![false, true],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub machine: MachineConfig,
    pub engine: EngineConfig,
    pub workload: Workload,
    pub sweep: SweepConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            machine: MachineConfig::default(),
            engine: EngineConfig::default(),
            workload: Workload::Synth(SynthConfig::default()),
            sweep: SweepConfig::default(),
        }
    }
}

pub fn parse_size(s: &str) -> Result<u64, String> {
    let s = s.trim();
    let split = s.find(|c: char| !c.is_ascii_digit()).unwrap_or(s.len());
    let (num, unit) = s.split_at(split);
    let n: u64 = num.parse().map_err(|_| format!("invalid size `{s}`"))?;
    let shift = match unit.trim().to_ascii_lowercase().as_str() {
        "" | "b" => 0,
        "k" | "kb" | "kib" => 10,
        "m" | "mb" | "mib" => 20,
        "g" | "gb" | "gib" => 30,
        _ => return Err(format!("unknown size unit in `{s}`")),
    };
    n.checked_mul(1 << shift).ok_or_else(|| format!("size `{s}` overflows"))
}

pub fn format_size(bytes: u64) -> String {
    for (shift, unit) in [(30, "GiB"), (20, "MiB"), (10, "KiB")] {
        if bytes != 0 && bytes.is_multiple_of(1 << shift) {
            return format!("{}{unit}", bytes >> shift);
        }
    }
    bytes.to_string()
}

pub fn parse_bool(s: &str) -> Result<bool, String> {
    match s.trim().to_ascii_lowercase().as_str() {
        "true" | "on" | "1" | "yes" => Ok(true),
        "false" | "off" | "0" | "no" => Ok(false),
        _ => Err(format!("expected a boolean, got `{s}`")),
    }
}

fn parse_num<T: std::str::FromStr>(s: &str) -> Result<T, String> {
    let s = s.trim();
    let r = if let Some(hex) = s.strip_prefix("0x") {
        u64::from_str_radix(&hex.replace('_', ""), 16)
            .map_err(|e| e.to_string())
            .and_then(|v| v.to_string().parse::<T>().map_err(|_| String::new()))
    } else {
        s.replace('_', "").parse::<T>().map_err(|_| String::new())
    };
    r.map_err(|_| format!("invalid number `{s}`"))
}

fn parse_list<T>(s: &str, f: impl Fn(&str) -> Result<T, String>) -> Result<Vec<T>, String> {
    let v = s.split(',').map(|p| f(p.trim())).collect::<Result<Vec<_>, _>>()?;
    if v.is_empty() {
        return Err("empty list".into());
    }
    Ok(v)
}

fn join<T>(v: &[T], f: impl Fn(&T) -> String) -> String {
    v.iter().map(f).collect::<Vec<_>>().join(",")
}

fn parse_locality(s: &str) -> Result<PageLocality, String> {
    let s = s.trim();
    if s == "uniform" {
        return Ok(PageLocality::Uniform);
    }
    match s.strip_prefix("zipf:") {
        Some(x) => Ok(PageLocality::Zipf(parse_num(x)?)),
        None => Err(format!("expected `uniform` or `zipf:<s>`, got `{s}`")),
    }
}

fn parse_assoc(s: &str) -> Result<Associativity, String> {
    if s.trim() == "full" {
        Ok(Associativity::Full)
    } else {
        Ok(Associativity::Ways(parse_num(s)?))
    }
}

fn format_assoc(a: Associativity) -> String {
    match a {
        Associativity::Full => "full".into(),
        Associativity::Ways(w) => w.to_string(),
    }
}

impl ExperimentConfig {
    /// Parses a config file body, taking the seed from [`SEED_ENV`] when the
    /// file does not set `engine.seed`.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        Self::parse_with_env(text, std::env::var(SEED_ENV).ok().as_deref())
    }

    pub fn parse_with_env(text: &str, env_seed: Option<&str>) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        let mut seed_set = false;
        let mut trace: Option<PathBuf> = None;
        let mut synth_keys = false;
        let mut synth = SynthConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |key: &str, message: String| ConfigError {
                line: Some(i + 1),
                key: key.to_string(),
                message,
            };
            let Some((key, value)) = line.split_once('=') else {
                return Err(err(line, "expected `key = value`".into()));
            };
            let (key, value) = (key.trim(), value.trim());
            if key == "workload.trace" {
                trace = Some(PathBuf::from(value));
            } else if let Some(k) = key.strip_prefix("synth.") {
                synth_keys = true;
                set_synth(&mut synth, k, value).map_err(|m| err(key, m))?;
            } else {
                if key == "engine.seed" {
                    seed_set = true;
                }
                cfg.set(key, value).map_err(|m| err(key, m))?;
            }
        }
        if !seed_set {
            if let Some(s) = env_seed {
                cfg.engine.seed = parse_num(s).map_err(|m| ConfigError::new(SEED_ENV, m))?;
            }
        }
        cfg.workload = match (trace, synth_keys) {
            (Some(_), true) => {
                return Err(ConfigError::new(
                    "workload.trace",
                    "a trace file and synth.* keys cannot both be given",
                ))
            }
            (Some(p), false) => Workload::Trace(p),
            (None, _) => Workload::Synth(synth),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self, crate::Error> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::new(&path.display().to_string(), e.to_string()))?;
        Ok(Self::parse(&text)?)
    }

    /// Checks cross-key constraints and structure geometries.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let m = &self.machine;
        for t in [&m.tlb.l1i, &m.tlb.l1d] {
            t.validate().map_err(|e| ConfigError::new(&format!("tlb.{}", t.name), e))?;
        }
        for t in [&m.tlb.l2, &m.tlb.superpage] {
            if t.entries > 0 {
                t.validate().map_err(|e| ConfigError::new(&format!("tlb.{}", t.name), e))?;
            }
        }
        if m.tlb.superpage.page_size == PageSize::Page4K {
            return Err(ConfigError::new("tlb.super.page_size", "must be 2M or 1G"));
        }
        m.caches
            .validate()
            .map_err(|e| ConfigError::new(&format!("cache.{}", e.name), e.reason))?;
        let n = &m.walker.nested;
        for (key, v) in [("walker.nested.levels", n.nested_levels), ("walker.nested.guest_levels", n.guest_levels)] {
            if !(2..=4).contains(&v) {
                return Err(ConfigError::new(key, format!("must be 2, 3 or 4, got {v}")));
            }
        }
        if m.vmem.region_frames == 0 {
            return Err(ConfigError::new("vmem.region_frames", "must be positive"));
        }
        let c = &self.engine.cycle;
        if !(c.base_cpi > 0.0 && c.base_cpi.is_finite()) {
            return Err(ConfigError::new("engine.base_cpi", "must be positive"));
        }
        if !(0.0..1.0).contains(&c.overlap) {
            return Err(ConfigError::new("engine.overlap", "must lie in [0, 1)"));
        }
        if self.engine.hist_bucket == 0 {
            return Err(ConfigError::new("engine.hist_bucket", "must be positive"));
        }
        if let Workload::Synth(s) = &self.workload {
            s.validate().map_err(|e| ConfigError::new("synth", e))?;
        }
        let l4 = &m.caches.l4;
        for &size in &self.sweep.l4_sizes {
            for &block in &self.sweep.l4_blocks {
                configure_l4(size, block, l4.associativity, l4.latency_cycles)
                    .map_err(|e| ConfigError::new("sweep.l4_sizes", e.reason))?;
            }
        }
        if self.sweep.ideal_tlb.is_empty() {
            return Err(ConfigError::new("sweep.ideal_tlb", "empty list"));
        }
        Ok(())
    }

    /// Applies one non-workload key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let m = &mut self.machine;
        let e = &mut self.engine;
        let parts: Vec<&str> = key.split('.').collect();
        match parts.as_slice() {
            ["engine", "seed"] => e.seed = parse_num(value)?,
            ["engine", "max_events"] => e.max_events = parse_num(value)?,
            ["engine", "ideal_tlb"] => e.ideal_tlb = parse_bool(value)?,
            ["engine", "base_cpi"] => e.cycle.base_cpi = parse_num(value)?,
            ["engine", "overlap"] => e.cycle.overlap = parse_num(value)?,
            ["engine", "hist_bucket"] => e.hist_bucket = parse_num(value)?,
            ["engine", "page_size"] => e.page_size = value.parse()?,
            ["tlb", "l2", "penalty"] => m.tlb.l2_penalty = parse_num(value)?,
            ["tlb", "super", "page_size"] => m.tlb.superpage.page_size = value.parse()?,
            ["tlb", "policy", "flush_on_switch"] => m.tlb.flush_on_switch = parse_bool(value)?,
            ["tlb", name, field] => {
                let t = match *name {
                    "l1i" => &mut m.tlb.l1i,
                    "l1d" => &mut m.tlb.l1d,
                    "l2" => &mut m.tlb.l2,
                    "super" => &mut m.tlb.superpage,
                    _ => return Err("unknown key".into()),
                };
                match *field {
                    "entries" => t.entries = parse_num(value)?,
                    "assoc" => t.associativity = parse_assoc(value)?,
                    _ => return Err("unknown key".into()),
                }
            }
            ["walker", "pwc", "enabled"] => m.walker.pwc.enabled = parse_bool(value)?,
            ["walker", "pwc", "latency"] => m.walker.pwc.latency = parse_num(value)?,
            ["walker", "pwc", "entries"] => {
                let v: Vec<usize> = parse_list(value, parse_num)?;
                m.walker.pwc.entries_per_level = match v.as_slice() {
                    [n] => [*n; 3],
                    [a, b, c] => [*a, *b, *c],
                    _ => return Err("expected one count or three comma-separated counts".into()),
                };
            }
            ["walker", "walk_from_l2"] => m.walker.walk_from_l2 = parse_bool(value)?,
            ["walker", "pollution_off"] => m.walker.pollution_off = parse_bool(value)?,
            ["walker", "nested", "enabled"] => m.walker.nested.enabled = parse_bool(value)?,
            ["walker", "nested", "levels"] => m.walker.nested.nested_levels = parse_num(value)?,
            ["walker", "nested", "guest_levels"] => m.walker.nested.guest_levels = parse_num(value)?,
            ["cache", "l4", "enabled"] => m.caches.l4_enabled = parse_bool(value)?,
            ["cache", name, field] => {
                let c: &mut CacheConfig = match *name {
                    "l1i" => &mut m.caches.l1i,
                    "l1d" => &mut m.caches.l1d,
                    "l2" => &mut m.caches.l2,
                    "l3" => &mut m.caches.l3,
                    "l4" => &mut m.caches.l4,
                    _ => return Err("unknown key".into()),
                };
                match *field {
                    "size" => c.size_bytes = parse_size(value)?,
                    "assoc" => c.associativity = parse_num(value)?,
                    "block" => c.block_bytes = parse_size(value)?,
                    "latency" => c.latency_cycles = parse_num(value)?,
                    "writeback" => c.writeback = parse_bool(value)?,
                    _ => return Err("unknown key".into()),
                }
            }
            ["mem", "latency_cycles"] => m.caches.mem_latency_cycles = parse_num(value)?,
            ["vmem", "frame_base"] => m.vmem.frame_base = parse_num(value)?,
            ["vmem", "region_frames"] => m.vmem.region_frames = parse_num(value)?,
            ["vmem", "shuffle"] => m.vmem.shuffle = parse_bool(value)?,
            ["sweep", "l4_sizes"] => self.sweep.l4_sizes = parse_list(value, parse_size)?,
            ["sweep", "l4_blocks"] => self.sweep.l4_blocks = parse_list(value, parse_size)?,
            ["sweep", "ideal_tlb"] => self.sweep.ideal_tlb = parse_list(value, parse_bool)?,
            _ => return Err("unknown key".into()),
        }
        Ok(())
    }

    /// Every key with its effective value, in file order.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let mut out: Vec<(String, String)> = Vec::new();
        let mut put = |k: &str, v: String| out.push((k.to_string(), v));
        let e = &self.engine;
        put("engine.seed", e.seed.to_string());
        put("engine.max_events", e.max_events.to_string());
        put("engine.ideal_tlb", e.ideal_tlb.to_string());
        put("engine.base_cpi", e.cycle.base_cpi.to_string());
        put("engine.overlap", e.cycle.overlap.to_string());
        put("engine.hist_bucket", e.hist_bucket.to_string());
        put("engine.page_size", e.page_size.to_string());
        let m = &self.machine;
        let tlbs: [(&str, &TlbConfig); 4] = [
            ("l1i", &m.tlb.l1i),
            ("l1d", &m.tlb.l1d),
            ("l2", &m.tlb.l2),
            ("super", &m.tlb.superpage),
        ];
        for (name, t) in tlbs {
            put(&format!("tlb.{name}.entries"), t.entries.to_string());
            put(&format!("tlb.{name}.assoc"), format_assoc(t.associativity));
        }
        put("tlb.l2.penalty", m.tlb.l2_penalty.to_string());
        put("tlb.super.page_size", m.tlb.superpage.page_size.to_string());
        put("tlb.policy.flush_on_switch", m.tlb.flush_on_switch.to_string());
        let w = &m.walker;
        put("walker.pwc.enabled", w.pwc.enabled.to_string());
        put("walker.pwc.entries", join(&w.pwc.entries_per_level, usize::to_string));
        put("walker.pwc.latency", w.pwc.latency.to_string());
        put("walker.walk_from_l2", w.walk_from_l2.to_string());
        put("walker.pollution_off", w.pollution_off.to_string());
        put("walker.nested.enabled", w.nested.enabled.to_string());
        put("walker.nested.levels", w.nested.nested_levels.to_string());
        put("walker.nested.guest_levels", w.nested.guest_levels.to_string());
        let c = &m.caches;
        for (name, cc) in [("l1i", &c.l1i), ("l1d", &c.l1d), ("l2", &c.l2), ("l3", &c.l3), ("l4", &c.l4)] {
            put(&format!("cache.{name}.size"), format_size(cc.size_bytes));
            put(&format!("cache.{name}.assoc"), cc.associativity.to_string());
            put(&format!("cache.{name}.block"), cc.block_bytes.to_string());
            put(&format!("cache.{name}.latency"), cc.latency_cycles.to_string());
            put(&format!("cache.{name}.writeback"), cc.writeback.to_string());
        }
        put("cache.l4.enabled", c.l4_enabled.to_string());
        put("mem.latency_cycles", c.mem_latency_cycles.to_string());
        put("vmem.frame_base", format!("{:#x}", m.vmem.frame_base));
        put("vmem.region_frames", m.vmem.region_frames.to_string());
        put("vmem.shuffle", m.vmem.shuffle.to_string());
        match &self.workload {
            Workload::Trace(p) => put("workload.trace", p.display().to_string()),
            Workload::Synth(s) => {
                put("synth.footprint", format_size(s.footprint_bytes));
                put(
                    "synth.locality",
                    match s.page_locality {
                        PageLocality::Uniform => "uniform".into(),
                        PageLocality::Zipf(x) => format!("zipf:{x}"),
                    },
                );
                put(
                    "synth.intra_page",
                    match s.intra_page {
                        IntraPage::Sequential => "sequential".into(),
                        IntraPage::Random => "random".into(),
                    },
                );
                put("synth.inst_ratio", s.inst_ratio.to_string());
                put("synth.code_bytes", format_size(s.code_bytes));
                put("synth.write_ratio", s.write_ratio.to_string());
                put("synth.switch_period", s.switch_period.to_string());
                put("synth.threads", s.threads.to_string());
                put("synth.processes", s.processes.to_string());
                put("synth.base_va", format!("{:#x}", s.base_va));
                put("synth.superpage", s.superpage.to_string());
            }
        }
        let sw = &self.sweep;
        put("sweep.l4_sizes", join(&sw.l4_sizes, |&b| format_size(b)));
        put("sweep.l4_blocks", join(&sw.l4_blocks, u64::to_string));
        put("sweep.ideal_tlb", join(&sw.ideal_tlb, bool::to_string));
        out
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.to_pairs() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// Engine settings with workload-implied overrides applied.
    pub fn engine_config(&self) -> EngineConfig {
        let mut e = self.engine.clone();
        if matches!(&self.workload, Workload::Synth(s) if s.superpage) {
            e.page_size = PageSize::Page2M;
        }
        e
    }

    /// The synthetic workload with the engine seed applied.
    pub fn synth(&self) -> Option<SynthConfig> {
        match &self.workload {
            Workload::Synth(s) => Some(SynthConfig {
                seed: self.engine.seed,
                ..s.clone()
            }),
            Workload::Trace(_) => None,
        }
    }
}

fn set_synth(s: &mut SynthConfig, key: &str, value: &str) -> Result<(), String> {
    match key {
        "footprint" => s.footprint_bytes = parse_size(value)?,
        "locality" => s.page_locality = parse_locality(value)?,
        "intra_page" => {
            s.intra_page = match value {
                "sequential" => IntraPage::Sequential,
                "random" => IntraPage::Random,
                _ => return Err(format!("expected `sequential` or `random`, got `{value}`")),
            }
        }
        "inst_ratio" => s.inst_ratio = parse_num(value)?,
        "code_bytes" => s.code_bytes = parse_size(value)?,
        "write_ratio" => s.write_ratio = parse_num(value)?,
        "switch_period" => s.switch_period = parse_num(value)?,
        "threads" => s.threads = parse_num(value)?,
        "processes" => s.processes = parse_num(value)?,
        "base_va" => s.base_va = parse_num(value)?,
        "superpage" => s.superpage = parse_bool(value)?,
        _ => return Err("unknown key".into()),
    }
    Ok(())
}
