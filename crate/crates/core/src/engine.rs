//! The simulation loop: TLB lookup, page walk on a miss, translation, cache
//! access, then classification of the (cache, TLB) outcome pair.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};

use crate::cachehier::{AccessResult, CacheHierarchy, HierarchyConfig, HierarchySnapshot, PtwPolicy, RefKind, Service};
use crate::tlb::{AccessKind, FlushScope, TlbHierarchy, TlbHierarchyConfig, TlbLevel, TlbLookup, TlbStats};
use crate::vmem::{AddressSpace, FrameAllocator, Level, PageSize, VirtualAddress, BASE_PAGE_BYTES};
use crate::walker::{WalkResult, Walker, WalkerConfig};
use crate::workload::{Event, TraceError};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VmemConfig {
    /// Physical byte address where the first address space's frames start.
    pub frame_base: u64,
    /// Frames reserved per address space; spaces never share frames.
    pub region_frames: u64,
    /// Shuffle frame order (seeded) to emulate fragmented physical memory.
    pub shuffle: bool,
}

impl Default for VmemConfig {
    fn default() -> Self {
        Self {
            frame_base: 0,
            region_frames: 1 << 22,
            shuffle: false,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MachineConfig {
    pub tlb: TlbHierarchyConfig,
    pub walker: WalkerConfig,
    pub caches: HierarchyConfig,
    pub vmem: VmemConfig,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CycleModel {
    pub base_cpi: f64,
    /// Fraction of walk cycles hidden by out-of-order execution.
    pub overlap: f64,
}

impl Default for CycleModel {
    fn default() -> Self {
        Self {
            base_cpi: 1.0,
            overlap: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EngineConfig {
    pub max_events: u64,
    pub ideal_tlb: bool,
    pub cycle: CycleModel,
    pub hist_bucket: u32,
    pub seed: u64,
    /// Leaf size used when touching a page for the first time (native walks).
    pub page_size: PageSize,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            max_events: 1_000_000,
            ideal_tlb: false,
            cycle: CycleModel::default(),
            hist_bucket: 10,
            seed: 1,
            page_size: PageSize::Page4K,
        }
    }
}

/// Outcome pair of a data access, named (cache outcome, TLB outcome).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum InterplayCase {
    HitHit,
    MissHit,
    HitMiss,
    MissMiss,
}

impl InterplayCase {
    pub const ALL: [InterplayCase; 4] = [
        InterplayCase::HitHit,
        InterplayCase::MissHit,
        InterplayCase::HitMiss,
        InterplayCase::MissMiss,
    ];

    pub fn classify(cache_hit: bool, tlb_hit: bool) -> Self {
        match (cache_hit, tlb_hit) {
            (true, true) => InterplayCase::HitHit,
            (false, true) => InterplayCase::MissHit,
            (true, false) => InterplayCase::HitMiss,
            (false, false) => InterplayCase::MissMiss,
        }
    }

    fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            InterplayCase::HitHit => "hit_hit",
            InterplayCase::MissHit => "miss_hit",
            InterplayCase::HitMiss => "hit_miss",
            InterplayCase::MissMiss => "miss_miss",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TlbOutcome {
    Hit(TlbLevel),
    /// Ideal-TLB mode: translation always available.
    Ideal,
    Miss,
}

impl TlbOutcome {
    pub fn is_hit(self) -> bool {
        !matches!(self, TlbOutcome::Miss)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AccessOutcome {
    pub asid: u16,
    pub kind: AccessKind,
    pub tlb: TlbOutcome,
    pub walk: Option<WalkResult>,
    /// Walk latency plus the L2-TLB probe penalty, as seen by the access.
    pub walk_cycles: u32,
    pub paddr: u64,
    pub cache: AccessResult,
    /// Only data accesses are classified.
    pub case: Option<InterplayCase>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StepOutcome {
    Access(AccessOutcome),
    Switch { tid: u16, asid: u16, flushed: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Histogram {
    pub bucket_width: u32,
    pub buckets: BTreeMap<u64, u64>,
    pub count: u64,
    pub sum: u64,
    pub min: Option<u64>,
    pub max: Option<u64>,
}

impl Histogram {
    pub fn new(bucket_width: u32) -> Self {
        Self {
            bucket_width: bucket_width.max(1),
            buckets: BTreeMap::new(),
            count: 0,
            sum: 0,
            min: None,
            max: None,
        }
    }

    pub fn record(&mut self, value: u64) {
        *self.buckets.entry(value / self.bucket_width as u64).or_default() += 1;
        self.count += 1;
        self.sum += value;
        self.min = Some(self.min.map_or(value, |m| m.min(value)));
        self.max = Some(self.max.map_or(value, |m| m.max(value)));
    }

    pub fn mean(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.sum as f64 / self.count as f64
        }
    }

    /// `(low, high_exclusive, count)` for every bucket from zero to the last
    /// non-empty one.
    pub fn rows(&self) -> Vec<(u64, u64, u64)> {
        let Some(&last) = self.buckets.keys().next_back() else {
            return Vec::new();
        };
        let w = self.bucket_width as u64;
        (0..=last)
            .map(|b| (b * w, (b + 1) * w, self.buckets.get(&b).copied().unwrap_or(0)))
            .collect()
    }
}

/// `1000 * numerator / denominator`, kept exact.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PerThousand {
    pub numerator: u64,
    pub denominator: u64,
}

impl PerThousand {
    /// True when there were no L4 hits to normalise by.
    pub fn degenerate(&self) -> bool {
        self.denominator == 0
    }

    pub fn is_zero(&self) -> bool {
        self.numerator == 0
    }

    pub fn value(&self) -> f64 {
        if self.denominator == 0 {
            0.0
        } else {
            self.numerator as f64 * 1000.0 / self.denominator as f64
        }
    }

    /// Reduced `(p, q)` with value `p / q`.
    pub fn as_ratio(&self) -> (u64, u64) {
        if self.denominator == 0 {
            return (0, 1);
        }
        let p = self.numerator * 1000;
        let g = gcd(p, self.denominator);
        (p / g, self.denominator / g)
    }
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a.max(1)
}

impl fmt::Display for PerThousand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (p, q) = self.as_ratio();
        write!(f, "{p}/{q}")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub config: Vec<(String, String)>,
    pub ideal_tlb: bool,
    pub events: u64,
    /// Access events; one per simulated instruction.
    pub instructions: u64,
    pub data_accesses: u64,
    pub instruction_accesses: u64,
    pub switches: u64,
    pub flushed_entries: u64,
    pub dtlb: TlbStats,
    pub itlb: TlbStats,
    pub tlb_structures: Vec<(String, TlbStats)>,
    pub walks: u64,
    pub walk_refs: u64,
    pub walk_histogram: Histogram,
    /// Service-level counts of walk references, `[level][service]`.
    pub locality: [[u64; 5]; 4],
    /// Distinct 64 B lines of PTEs on the translated paths, per level.
    pub pte_lines: [u64; 4],
    pub interplay: [u64; 4],
    pub l4_data_hits: u64,
    pub l4_data_hits_tlb_miss: u64,
    pub caches: HierarchySnapshot,
    pub access_cycles: u64,
    pub translation_cycles: u64,
    pub walk_cycles: u64,
    pub cycle: CycleModel,
}

impl Report {
    pub fn est_cycles(&self) -> f64 {
        self.instructions as f64 * self.cycle.base_cpi
            + self.access_cycles as f64
            + self.translation_cycles as f64
            + (1.0 - self.cycle.overlap) * self.walk_cycles as f64
    }

    pub fn est_ipc(&self) -> f64 {
        let cycles = self.est_cycles();
        if self.instructions == 0 || cycles == 0.0 {
            1.0 / self.cycle.base_cpi
        } else {
            self.instructions as f64 / cycles
        }
    }

    pub fn interplay_count(&self, case: InterplayCase) -> u64 {
        self.interplay[case.index()]
    }

    pub fn l4hit_tlbmiss_per_1k(&self) -> PerThousand {
        l4hit_tlbmiss_per_1k(self)
    }

    pub fn avg_walk_cycles(&self) -> f64 {
        self.walk_histogram.mean()
    }

    /// Fraction of `level`'s walk references serviced at each of L1..MEM.
    pub fn locality_fractions(&self, level: Level) -> [f64; 5] {
        let row = &self.locality[level.depth()];
        let total: u64 = row.iter().sum();
        let mut out = [0.0; 5];
        if total > 0 {
            for (o, c) in out.iter_mut().zip(row) {
                *o = *c as f64 / total as f64;
            }
        }
        out
    }

    pub fn l4_hit_rate(&self) -> f64 {
        self.caches
            .levels
            .iter()
            .find(|l| l.service == Service::L4)
            .map_or(0.0, |l| l.total.hit_rate())
    }

    pub fn summary_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("ideal_tlb", self.ideal_tlb.to_string());
        kv("events", self.events.to_string());
        kv("instructions", self.instructions.to_string());
        kv("data_accesses", self.data_accesses.to_string());
        kv("instruction_accesses", self.instruction_accesses.to_string());
        kv("switches", self.switches.to_string());
        kv("flushed_entries", self.flushed_entries.to_string());
        kv("dtlb.lookups", self.dtlb.lookups.to_string());
        kv("dtlb.hits", self.dtlb.hits.to_string());
        kv("dtlb.hit_rate", format!("{:.6}", self.dtlb.hit_rate()));
        kv("itlb.lookups", self.itlb.lookups.to_string());
        kv("itlb.hits", self.itlb.hits.to_string());
        kv("itlb.hit_rate", format!("{:.6}", self.itlb.hit_rate()));
        for (name, st) in &self.tlb_structures {
            kv(&format!("tlb.{name}.lookups"), st.lookups.to_string());
            kv(&format!("tlb.{name}.hits"), st.hits.to_string());
            kv(&format!("tlb.{name}.hit_rate"), format!("{:.6}", st.hit_rate()));
        }
        kv("walks", self.walks.to_string());
        kv("walk_refs", self.walk_refs.to_string());
        kv("walk_latency.mean", format!("{:.6}", self.walk_histogram.mean()));
        kv("walk_latency.min", self.walk_histogram.min.unwrap_or(0).to_string());
        kv("walk_latency.max", self.walk_histogram.max.unwrap_or(0).to_string());
        for level in Level::ALL {
            kv(
                &format!("pte_lines.{}", level.name().to_ascii_lowercase()),
                self.pte_lines[level.depth()].to_string(),
            );
        }
        for case in InterplayCase::ALL {
            kv(&format!("interplay.{}", case.name()), self.interplay_count(case).to_string());
        }
        let per1k = self.l4hit_tlbmiss_per_1k();
        kv("l4_data_hits", self.l4_data_hits.to_string());
        kv("l4_data_hits_tlb_miss", self.l4_data_hits_tlb_miss.to_string());
        kv("l4hit_tlbmiss_per_1k", format!("{:.6}", per1k.value()));
        kv("l4hit_tlbmiss_per_1k.exact", per1k.to_string());
        kv("l4hit_tlbmiss_per_1k.degenerate", per1k.degenerate().to_string());
        for l in &self.caches.levels {
            kv(&format!("cache.{}.accesses", l.name), l.total.accesses.to_string());
            kv(&format!("cache.{}.hits", l.name), l.total.hits.to_string());
            kv(&format!("cache.{}.misses", l.name), l.total.misses.to_string());
            kv(&format!("cache.{}.writebacks", l.name), l.total.writebacks.to_string());
            kv(&format!("cache.{}.ptw_accesses", l.name), l.by_kind[2].accesses.to_string());
            kv(&format!("cache.{}.ptw_hits", l.name), l.by_kind[2].hits.to_string());
        }
        kv("mem.accesses", self.caches.memory.iter().sum::<u64>().to_string());
        kv("mem.ptw_accesses", self.caches.memory[2].to_string());
        kv("cycles.access", self.access_cycles.to_string());
        kv("cycles.translation", self.translation_cycles.to_string());
        kv("cycles.walk", self.walk_cycles.to_string());
        kv("est_cycles", format!("{:.3}", self.est_cycles()));
        kv("est_ipc", format!("{:.6}", self.est_ipc()));
        for (k, v) in &self.config {
            kv(&format!("config.{k}"), v.clone());
        }
        s
    }

    pub fn histogram_csv(&self) -> String {
        let mut s = String::from("bucket_low,bucket_high,count\n");
        for (lo, hi, c) in self.walk_histogram.rows() {
            let _ = writeln!(s, "{lo},{hi},{c}");
        }
        s
    }

    pub fn locality_csv(&self) -> String {
        let mut s = String::from("level,l1,l2,l3,l4,mem\n");
        for level in Level::ALL {
            let f = self.locality_fractions(level);
            let _ = writeln!(s, "{},{},{},{},{},{}", level.name(), f[0], f[1], f[2], f[3], f[4]);
        }
        s
    }
}

/// L4 hits that needed a page walk, per thousand data L4 hits.
pub fn l4hit_tlbmiss_per_1k(report: &Report) -> PerThousand {
    PerThousand {
        numerator: report.l4_data_hits_tlb_miss,
        denominator: report.l4_data_hits,
    }
}

/// IPC of `variant` relative to `base`, over the same event stream.
pub fn normalized_ipc(base: &Report, variant: &Report) -> Result<f64> {
    if base.instructions != variant.instructions {
        return Err(Error::MismatchedRuns(format!(
            "{} vs {} instructions",
            base.instructions, variant.instructions
        )));
    }
    let (b, v) = (base.est_cycles(), variant.est_cycles());
    if b == 0.0 && v == 0.0 {
        return Ok(1.0);
    }
    Ok(b / v)
}

/// Writes `summary.txt`, `histogram.csv` and `locality.csv` into `dir`.
pub fn emit_report(report: &Report, dir: &Path) -> Result<Vec<PathBuf>> {
    let io = |path: &Path, source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    std::fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    let files = [
        ("summary.txt", report.summary_text()),
        ("histogram.csv", report.histogram_csv()),
        ("locality.csv", report.locality_csv()),
    ];
    let mut written = Vec::new();
    for (name, body) in files {
        let path = dir.join(name);
        std::fs::write(&path, body).map_err(|e| io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}

#[derive(Debug, Default)]
struct Accumulators {
    events: u64,
    instructions: u64,
    data_accesses: u64,
    instruction_accesses: u64,
    switches: u64,
    flushed: u64,
    dtlb: TlbStats,
    itlb: TlbStats,
    walks: u64,
    walk_refs: u64,
    locality: [[u64; 5]; 4],
    pte_lines: [HashSet<u64>; 4],
    interplay: [u64; 4],
    l4_hits: u64,
    l4_hits_tlb_miss: u64,
    access_cycles: u64,
    translation_cycles: u64,
    walk_cycles: u64,
}

pub struct Engine {
    machine: MachineConfig,
    config: EngineConfig,
    tlb: TlbHierarchy,
    walker: Walker,
    caches: CacheHierarchy,
    spaces: HashMap<u16, AddressSpace>,
    host: Option<AddressSpace>,
    thread_asid: HashMap<u16, u16>,
    histogram: Histogram,
    acc: Accumulators,
}

impl Engine {
    pub fn new(machine: MachineConfig, config: EngineConfig) -> Result<Self> {
        let mut caches = CacheHierarchy::new(&machine.caches)?;
        caches.set_ptw_policy(PtwPolicy {
            from_l2: machine.walker.walk_from_l2,
            no_fill: machine.walker.pollution_off,
        });
        let host = if machine.walker.nested.enabled {
            Some(Self::new_space(&machine.vmem, &config, 0, u16::MAX)?)
        } else {
            None
        };
        Ok(Self {
            tlb: TlbHierarchy::new(&machine.tlb),
            walker: Walker::new(machine.walker.clone()),
            caches,
            spaces: HashMap::new(),
            host,
            thread_asid: HashMap::new(),
            histogram: Histogram::new(config.hist_bucket),
            acc: Accumulators::default(),
            machine,
            config,
        })
    }

    fn new_space(vmem: &VmemConfig, config: &EngineConfig, region: u64, asid: u16) -> Result<AddressSpace> {
        let base = vmem.frame_base + region * vmem.region_frames * BASE_PAGE_BYTES;
        let shuffle = vmem
            .shuffle
            .then(|| config.seed ^ (region.wrapping_mul(0x9E37_79B9_7F4A_7C15)));
        Ok(AddressSpace::new(
            asid,
            FrameAllocator::new(base, vmem.region_frames, shuffle),
        )?)
    }

    pub fn machine(&self) -> &MachineConfig {
        &self.machine
    }

    pub fn caches(&self) -> &CacheHierarchy {
        &self.caches
    }

    pub fn tlb(&self) -> &TlbHierarchy {
        &self.tlb
    }

    pub fn address_space(&self, asid: u16) -> Option<&AddressSpace> {
        self.spaces.get(&asid)
    }

    fn guest_page_size(&self) -> PageSize {
        let nested = &self.machine.walker.nested;
        if nested.enabled {
            PageSize::from_walk_depth(nested.guest_levels).unwrap_or(PageSize::Page4K)
        } else {
            self.config.page_size
        }
    }

    /// Maps the page holding `va` on first touch, standing in for the OS
    /// fault handler. Costs no simulated time.
    fn touch(&mut self, asid: u16, va: VirtualAddress) -> Result<()> {
        if !self.spaces.contains_key(&asid) {
            let space = Self::new_space(&self.machine.vmem, &self.config, asid as u64 + 1, asid)?;
            self.spaces.insert(asid, space);
        }
        let size = self.guest_page_size();
        let space = self.spaces.get_mut(&asid).expect("inserted above");
        if space.walk_path(va).is_ok() {
            return Ok(());
        }
        let path = space.map_page(va, size)?;
        if let Some(host) = self.host.as_mut() {
            let nsize = PageSize::from_walk_depth(self.machine.walker.nested.nested_levels)
                .unwrap_or(PageSize::Page4K);
            let data_gpa = path.physical_base();
            for &gpa in path.pte_addrs.iter().chain(std::iter::once(&data_gpa)) {
                host.map_page(VirtualAddress(gpa), nsize)?;
            }
        }
        Ok(())
    }

    fn walk(&mut self, asid: u16, va: VirtualAddress) -> Result<WalkResult> {
        let space = &self.spaces[&asid];
        let result = match &self.host {
            Some(host) => self.walker.nested_walk(space, host, va, &mut self.caches)?,
            None => self.walker.walk(space, va, &mut self.caches)?,
        };
        let path = space.walk_path(va)?;
        for (d, addr) in path.pte_addrs.iter().enumerate() {
            self.acc.pte_lines[d].insert(addr >> 6);
        }
        Ok(result)
    }

    fn flush(&mut self, scope: FlushScope) -> usize {
        self.walker.flush(scope);
        self.tlb.flush(scope)
    }

    pub fn step(&mut self, event: Event) -> Result<StepOutcome> {
        self.acc.events += 1;
        let (tid, kind, rw, va) = match event {
            Event::Switch { tid, asid } => {
                self.acc.switches += 1;
                self.thread_asid.insert(tid, asid);
                let flushed = if self.machine.tlb.flush_on_switch {
                    self.flush(FlushScope::All)
                } else {
                    0
                };
                self.acc.flushed += flushed as u64;
                return Ok(StepOutcome::Switch { tid, asid, flushed });
            }
            Event::Access { tid, kind, rw, va } => (tid, kind, rw, va),
        };
        let asid = self.thread_asid.get(&tid).copied().unwrap_or(tid);
        self.acc.instructions += 1;

        let mut walk = None;
        let mut walk_cycles = 0;
        let (tlb, paddr) = if self.config.ideal_tlb {
            self.touch(asid, va)?;
            let space = &self.spaces[&asid];
            let gpa = space.translate(va)?;
            let paddr = match &self.host {
                Some(host) => host.translate(VirtualAddress(gpa))?,
                None => gpa,
            };
            (TlbOutcome::Ideal, paddr)
        } else {
            match self.tlb.lookup(asid, va, kind) {
                TlbLookup::Hit { level, ppn, size } => {
                    if level == TlbLevel::L2 {
                        self.acc.translation_cycles += self.machine.tlb.l2_penalty as u64;
                    }
                    (TlbOutcome::Hit(level), (ppn << size.offset_bits()) | va.offset(size))
                }
                TlbLookup::Miss => {
                    self.touch(asid, va)?;
                    let result = self.walk(asid, va)?;
                    let penalty = if self.machine.tlb.l2.entries > 0 {
                        self.machine.tlb.l2_penalty
                    } else {
                        0
                    };
                    walk_cycles = result.latency_cycles + penalty;
                    self.record_walk(&result, walk_cycles);
                    self.tlb.insert(asid, va, result.ppn, result.size, kind);
                    let paddr = (result.ppn << result.size.offset_bits()) | va.offset(result.size);
                    walk = Some(result);
                    (TlbOutcome::Miss, paddr)
                }
            }
        };

        let ref_kind = match kind {
            AccessKind::Data => RefKind::Data,
            AccessKind::Instruction => RefKind::Instruction,
        };
        let cache = self.caches.access(paddr, ref_kind, rw);
        self.acc.access_cycles += cache.cycles as u64;

        let tlb_stats = match kind {
            AccessKind::Data => &mut self.acc.dtlb,
            AccessKind::Instruction => &mut self.acc.itlb,
        };
        tlb_stats.lookups += 1;
        tlb_stats.hits += tlb.is_hit() as u64;

        let case = (kind == AccessKind::Data).then(|| {
            self.acc.data_accesses += 1;
            let case = InterplayCase::classify(cache.service.is_cache_hit(), tlb.is_hit());
            self.acc.interplay[case.index()] += 1;
            if cache.service == Service::L4 {
                self.acc.l4_hits += 1;
                if !tlb.is_hit() {
                    self.acc.l4_hits_tlb_miss += 1;
                }
            }
            case
        });
        if kind == AccessKind::Instruction {
            self.acc.instruction_accesses += 1;
        }

        Ok(StepOutcome::Access(AccessOutcome {
            asid,
            kind,
            tlb,
            walk,
            walk_cycles,
            paddr,
            cache,
            case,
        }))
    }

    fn record_walk(&mut self, result: &WalkResult, cycles: u32) {
        self.acc.walks += 1;
        self.acc.walk_refs += result.refs.len() as u64;
        self.acc.walk_cycles += cycles as u64;
        self.histogram.record(cycles as u64);
        for r in &result.refs {
            self.acc.locality[r.level.depth()][r.service.index()] += 1;
        }
    }

    /// Consumes at most `max_events` events and returns the final report.
    pub fn run<I>(mut self, events: I) -> Result<Report>
    where
        I: IntoIterator<Item = Result<Event, TraceError>>,
    {
        for ev in events.into_iter().take(self.config.max_events as usize) {
            self.step(ev?)?;
        }
        self.finish()
    }

    /// Builds the report, checking the accounting invariants.
    pub fn finish(self) -> Result<Report> {
        let acc = &self.acc;
        let report = Report {
            config: Vec::new(),
            ideal_tlb: self.config.ideal_tlb,
            events: acc.events,
            instructions: acc.instructions,
            data_accesses: acc.data_accesses,
            instruction_accesses: acc.instruction_accesses,
            switches: acc.switches,
            flushed_entries: acc.flushed,
            dtlb: acc.dtlb,
            itlb: acc.itlb,
            tlb_structures: self
                .tlb
                .structures()
                .into_iter()
                .map(|t| (t.config().name.clone(), t.stats()))
                .collect(),
            walks: acc.walks,
            walk_refs: acc.walk_refs,
            walk_histogram: self.histogram.clone(),
            locality: acc.locality,
            pte_lines: std::array::from_fn(|i| acc.pte_lines[i].len() as u64),
            interplay: acc.interplay,
            l4_data_hits: acc.l4_hits,
            l4_data_hits_tlb_miss: acc.l4_hits_tlb_miss,
            caches: self.caches.snapshot(),
            access_cycles: acc.access_cycles,
            translation_cycles: acc.translation_cycles,
            walk_cycles: acc.walk_cycles,
            cycle: self.config.cycle,
        };
        check_invariants(&report)?;
        Ok(report)
    }
}

fn check_invariants(r: &Report) -> Result<()> {
    let fail = |m: String| Err(Error::Invariant(m));
    if r.walk_histogram.count != r.walks {
        return fail(format!("histogram holds {} walks, expected {}", r.walk_histogram.count, r.walks));
    }
    let misses = (r.dtlb.lookups - r.dtlb.hits) + (r.itlb.lookups - r.itlb.hits);
    if misses != r.walks {
        return fail(format!("{misses} TLB misses but {} walks", r.walks));
    }
    if r.interplay.iter().sum::<u64>() != r.data_accesses {
        return fail("interplay cases do not partition data accesses".into());
    }
    let located: u64 = r.locality.iter().flatten().sum();
    if located != r.walk_refs {
        return fail(format!("{located} located walk refs, expected {}", r.walk_refs));
    }
    for l in &r.caches.levels {
        if l.total.accesses != l.total.hits + l.total.misses {
            return fail(format!("cache {} counters do not partition", l.name));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cachehier::Rw;

    fn data(va: u64) -> Event {
        Event::Access {
            tid: 0,
            kind: AccessKind::Data,
            rw: Rw::Read,
            va: VirtualAddress(va),
        }
    }

    fn engine() -> Engine {
        Engine::new(MachineConfig::default(), EngineConfig::default()).unwrap()
    }

    fn access(e: &mut Engine, va: u64) -> AccessOutcome {
        match e.step(data(va)).unwrap() {
            StepOutcome::Access(a) => a,
            _ => unreachable!(),
        }
    }

    #[test]
    fn empty_run() {
        let r = engine().run(std::iter::empty()).unwrap();
        assert_eq!(r.walks, 0);
        assert_eq!(r.interplay, [0; 4]);
        assert_eq!(r.est_ipc(), 1.0);
        assert!(r.l4hit_tlbmiss_per_1k().degenerate());
    }

    #[test]
    fn first_access_walks_then_hits() {
        let mut e = engine();
        let a = access(&mut e, 0x1234_5678);
        assert_eq!(a.tlb, TlbOutcome::Miss);
        assert_eq!(a.case, Some(InterplayCase::MissMiss));
        assert_eq!(a.walk.as_ref().unwrap().refs.len(), 4);
        assert_eq!(a.walk_cycles, 936 + 7);
        let b = access(&mut e, 0x1234_5670);
        assert_eq!(b.tlb, TlbOutcome::Hit(TlbLevel::L1));
        assert_eq!(b.cache.service, Service::L1);
        assert_eq!(b.case, Some(InterplayCase::HitHit));
        assert_eq!(a.paddr & !0x3f, b.paddr & !0x3f);
        let r = e.finish().unwrap();
        assert_eq!((r.walks, r.interplay_count(InterplayCase::MissMiss)), (1, 1));
    }

    #[test]
    fn ideal_tlb_never_walks() {
        let cfg = EngineConfig {
            ideal_tlb: true,
            ..Default::default()
        };
        let mut e = Engine::new(MachineConfig::default(), cfg).unwrap();
        let a = access(&mut e, 0x5000);
        assert_eq!(a.tlb, TlbOutcome::Ideal);
        assert!(a.walk.is_none());
        let r = e.finish().unwrap();
        assert_eq!(r.walks, 0);
        assert_eq!(r.caches.memory[2], 0);
        assert!(r.l4hit_tlbmiss_per_1k().is_zero());
    }

    #[test]
    fn per_thousand_arithmetic() {
        let p = PerThousand {
            numerator: 50,
            denominator: 1000,
        };
        assert_eq!(p.value(), 50.0);
        assert_eq!(p.as_ratio(), (50, 1));
        let z = PerThousand {
            numerator: 0,
            denominator: 0,
        };
        assert!(z.degenerate());
        assert_eq!(z.value(), 0.0);
    }

    #[test]
    fn switch_with_flush_policy() {
        let mut machine = MachineConfig::default();
        machine.tlb.flush_on_switch = true;
        let mut e = Engine::new(machine, EngineConfig::default()).unwrap();
        access(&mut e, 0x1000);
        access(&mut e, 0x2000);
        let out = e.step(Event::Switch { tid: 0, asid: 0 }).unwrap();
        assert_eq!(out, StepOutcome::Switch { tid: 0, asid: 0, flushed: 2 });
        assert_eq!(access(&mut e, 0x1000).tlb, TlbOutcome::Miss);

        // ASID-tagged retention keeps entries across switches
        let mut e = engine();
        access(&mut e, 0x1000);
        e.step(Event::Switch { tid: 0, asid: 5 }).unwrap();
        let a = access(&mut e, 0x1000);
        assert_eq!((a.asid, a.tlb), (5, TlbOutcome::Miss));
        e.step(Event::Switch { tid: 0, asid: 0 }).unwrap();
        assert!(access(&mut e, 0x1000).tlb.is_hit());
    }

    #[test]
    fn address_spaces_do_not_share_frames() {
        let mut e = engine();
        let a = access(&mut e, 0x1000);
        e.step(Event::Switch { tid: 0, asid: 1 }).unwrap();
        let b = access(&mut e, 0x1000);
        assert_ne!(a.paddr >> 12, b.paddr >> 12);
    }

    #[test]
    fn histogram_rows_cover_range() {
        let mut h = Histogram::new(10);
        h.record(5);
        h.record(27);
        h.record(27);
        assert_eq!(h.rows(), vec![(0, 10, 1), (10, 20, 0), (20, 30, 2)]);
        assert_eq!(h.mean(), 59.0 / 3.0);
    }

    #[test]
    fn normalized_ipc_examples() {
        let r = engine().run(std::iter::empty()).unwrap();
        assert_eq!(normalized_ipc(&r, &r).unwrap(), 1.0);
        let mut base = r.clone();
        let mut ideal = r.clone();
        base.instructions = 1000;
        ideal.instructions = 1000;
        base.access_cycles = 11_000;
        ideal.access_cycles = 9_000;
        assert!((normalized_ipc(&base, &ideal).unwrap() - 1.2).abs() < 1e-12);
        ideal.instructions = 999;
        assert!(matches!(normalized_ipc(&base, &ideal), Err(Error::MismatchedRuns(_))));
    }

    #[test]
    fn superpage_mode_uses_superpage_tlb() {
        let cfg = EngineConfig {
            page_size: PageSize::Page2M,
            ..Default::default()
        };
        let mut e = Engine::new(MachineConfig::default(), cfg).unwrap();
        let a = access(&mut e, 0x4000_0000);
        assert_eq!(a.walk.unwrap().refs.len(), 3);
        let b = access(&mut e, 0x401F_F000);
        assert_eq!(b.tlb, TlbOutcome::Hit(TlbLevel::Superpage));
    }

    #[test]
    fn nested_mode_walks_two_dimensions() {
        let mut machine = MachineConfig::default();
        machine.walker.nested.enabled = true;
        let mut e = Engine::new(machine, EngineConfig::default()).unwrap();
        let a = access(&mut e, 0x7000_1000);
        assert_eq!(a.walk.unwrap().refs.len(), 24);
        assert!(access(&mut e, 0x7000_1008).tlb.is_hit());
    }
}
