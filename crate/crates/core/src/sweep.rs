//! Running experiments and L4 design-space sweeps.

use std::fmt::Write as _;
use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::cachehier::configure_l4;
use crate::config::{format_size, ExperimentConfig, Workload};
use crate::engine::{emit_report, Engine, Report};
use crate::workload::{SynthGenerator, TraceReader};
use crate::{Error, Result};

/// Runs one experiment to completion.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Report> {
    let engine = Engine::new(cfg.machine.clone(), cfg.engine_config())?;
    let mut report = match &cfg.workload {
        Workload::Trace(path) => {
            let file = File::open(path).map_err(|source| Error::Io {
                path: path.clone(),
                source,
            })?;
            engine.run(TraceReader::new(BufReader::new(file)))?
        }
        Workload::Synth(_) => {
            let synth = cfg.synth().expect("synthetic workload");
            let gen = SynthGenerator::new(synth)
                .map_err(|m| crate::config::ConfigError::new("synth", m))?;
            engine.run(gen.map(Ok))?
        }
    };
    report.config = cfg.to_pairs();
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SweepPoint {
    pub l4_size: u64,
    pub l4_block: u64,
    pub ideal_tlb: bool,
}

impl SweepPoint {
    /// Directory name for this point's report files.
    pub fn label(&self) -> String {
        format!(
            "l4_{}_b{}_{}",
            format_size(self.l4_size),
            self.l4_block,
            if self.ideal_tlb { "ideal" } else { "base" }
        )
    }
}

/// The cross product of the sweep lists, ideal-TLB varying fastest.
pub fn sweep_points(cfg: &ExperimentConfig) -> Vec<SweepPoint> {
    let s = &cfg.sweep;
    let mut pts = Vec::new();
    for &l4_size in &s.l4_sizes {
        for &l4_block in &s.l4_blocks {
            for &ideal_tlb in &s.ideal_tlb {
                pts.push(SweepPoint {
                    l4_size,
                    l4_block,
                    ideal_tlb,
                });
            }
        }
    }
    pts
}

pub fn point_config(base: &ExperimentConfig, p: SweepPoint) -> Result<ExperimentConfig> {
    let mut cfg = base.clone();
    let l4 = &base.machine.caches.l4;
    let mut new = configure_l4(p.l4_size, p.l4_block, l4.associativity, l4.latency_cycles)?;
    new.writeback = l4.writeback;
    cfg.machine.caches.l4 = new;
    cfg.machine.caches.l4_enabled = true;
    cfg.engine.ideal_tlb = p.ideal_tlb;
    Ok(cfg)
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub points: Vec<(SweepPoint, Report)>,
}

pub const SWEEP_CSV_HEADER: &str =
    "l4_size,l4_block,ideal_tlb,l4_hit_rate,l4hit_tlbmiss_per_1k,avg_walk_cycles,est_ipc";

impl SweepResult {
    pub fn csv(&self) -> String {
        let mut s = format!("{SWEEP_CSV_HEADER}\n");
        for (p, r) in &self.points {
            let _ = writeln!(
                s,
                "{},{},{},{:.6},{:.6},{:.6},{:.6}",
                p.l4_size,
                p.l4_block,
                p.ideal_tlb,
                r.l4_hit_rate(),
                r.l4hit_tlbmiss_per_1k().value(),
                r.avg_walk_cycles(),
                r.est_ipc()
            );
        }
        s
    }

    /// Writes `sweep.csv` and one report directory per point.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        let mut written = Vec::new();
        for (p, r) in &self.points {
            written.extend(emit_report(r, &dir.join(p.label()))?);
        }
        let path = dir.join("sweep.csv");
        std::fs::write(&path, self.csv()).map_err(|source| Error::Io {
            path: path.clone(),
            source,
        })?;
        written.push(path);
        Ok(written)
    }
}

/// Runs every sweep point on `jobs` worker threads. Each point replays the
/// same seeded event stream, so results do not depend on `jobs`.
pub fn run_sweep(cfg: &ExperimentConfig, jobs: usize) -> Result<SweepResult> {
    let configs = sweep_points(cfg)
        .into_iter()
        .map(|p| Ok((p, point_config(cfg, p)?)))
        .collect::<Result<Vec<_>>>()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Invariant(format!("thread pool: {e}")))?;
    let points = pool.install(|| {
        configs
            .par_iter()
            .map(|(p, c)| run_experiment(c).map(|r| (*p, r)))
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(SweepResult { points })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_grid_order() {
        let pts = sweep_points(&ExperimentConfig::default());
        assert_eq!(pts.len(), 20);
        assert_eq!(
            pts[0],
            SweepPoint {
                l4_size: 64 << 20,
                l4_block: 64,
                ideal_tlb: false
            }
        );
        assert!(pts[1].ideal_tlb);
        assert_eq!(pts[2].l4_block, 512);
        assert_eq!(pts[19].l4_size, 1 << 30);
    }

    #[test]
    fn labels_are_unique() {
        let pts = sweep_points(&ExperimentConfig::default());
        let labels: std::collections::HashSet<_> = pts.iter().map(SweepPoint::label).collect();
        assert_eq!(labels.len(), pts.len());
    }

    #[test]
    fn superpage_workload_fills_superpage_tlb() {
        let cfg = ExperimentConfig::parse_with_env(
            "engine.max_events = 20000\nsynth.footprint = 32MiB\nsynth.superpage = on\n",
            None,
        )
        .unwrap();
        let r = run_experiment(&cfg).unwrap();
        let sp = r.tlb_structures.iter().find(|(n, _)| n == "super").unwrap().1;
        assert!(sp.hit_rate() > 0.99);
        assert_eq!(r.walks, 16);
    }

    #[test]
    fn small_sweep_is_job_count_independent() {
        let mut cfg = ExperimentConfig::default();
        cfg.engine.max_events = 5_000;
        cfg.sweep.l4_sizes = vec![64 << 20];
        let a = run_sweep(&cfg, 1).unwrap().csv();
        let b = run_sweep(&cfg, 3).unwrap().csv();
        assert_eq!(a, b);
        assert_eq!(a.lines().count(), 5);
    }
}
