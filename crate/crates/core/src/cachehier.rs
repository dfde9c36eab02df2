//! Set-associative writeback caches stacked L1 → L2 → L3 → L4 in front of a
//! flat-latency main memory.
//!
//! The hierarchy is non-inclusive with allocate-on-fill: a miss installs the
//! block in every level that was probed. Cycle cost of an access is the sum of
//! the latencies of every level probed, plus the memory latency when nothing
//! hit. Dirty evictions are counted but cost nothing.

use std::collections::hash_map::DefaultHasher;
use std::collections::HashMap;
use std::fmt;
use std::hash::{Hash, Hasher};

use crate::lru::LruSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Service {
    L1,
    L2,
    L3,
    L4,
    Mem,
}

impl Service {
    pub const ALL: [Service; 5] = [Service::L1, Service::L2, Service::L3, Service::L4, Service::Mem];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn is_cache_hit(self) -> bool {
        self != Service::Mem
    }
}

impl fmt::Display for Service {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Service::L1 => "L1",
            Service::L2 => "L2",
            Service::L3 => "L3",
            Service::L4 => "L4",
            Service::Mem => "MEM",
        })
    }
}

/// What issued a reference: the program's data stream, its instruction
/// fetches, or the page-table walker.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RefKind {
    Data,
    Instruction,
    Ptw,
}

impl RefKind {
    pub const ALL: [RefKind; 3] = [RefKind::Data, RefKind::Instruction, RefKind::Ptw];

    fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Rw {
    Read,
    Write,
}

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
#[error("invalid geometry for cache {name}: {reason}")]
pub struct InvalidGeometry {
    pub name: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CacheConfig {
    pub name: String,
    pub size_bytes: u64,
    pub associativity: u64,
    pub block_bytes: u64,
    pub latency_cycles: u32,
    pub writeback: bool,
}

impl CacheConfig {
    pub fn new(name: &str, size_bytes: u64, associativity: u64, block_bytes: u64, latency_cycles: u32) -> Self {
        Self {
            name: name.to_string(),
            size_bytes,
            associativity,
            block_bytes,
            latency_cycles,
            writeback: true,
        }
    }

    pub fn sets(&self) -> u64 {
        self.size_bytes / (self.associativity * self.block_bytes)
    }

    pub fn validate(&self) -> Result<(), InvalidGeometry> {
        let fail = |reason: String| {
            Err(InvalidGeometry {
                name: self.name.clone(),
                reason,
            })
        };
        if !self.block_bytes.is_power_of_two() {
            return fail(format!("block size {} is not a power of two", self.block_bytes));
        }
        if self.associativity == 0 {
            return fail("associativity must be at least 1".into());
        }
        let way_bytes = self.associativity * self.block_bytes;
        if self.size_bytes == 0 || !self.size_bytes.is_multiple_of(way_bytes) {
            return fail(format!(
                "size {} is not a multiple of {} ways x {} B blocks",
                self.size_bytes, self.associativity, self.block_bytes
            ));
        }
        Ok(())
    }
}

/// Builds a die-stacked L4 configuration. The set count must be a power of two.
pub fn configure_l4(
    size_bytes: u64,
    block_bytes: u64,
    associativity: u64,
    latency_cycles: u32,
) -> Result<CacheConfig, InvalidGeometry> {
    let cfg = CacheConfig::new("l4", size_bytes, associativity, block_bytes, latency_cycles);
    cfg.validate()?;
    if !cfg.sets().is_power_of_two() {
        return Err(InvalidGeometry {
            reason: format!("{} sets is not a power of two", cfg.sets()),
            name: cfg.name,
        });
    }
    Ok(cfg)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CacheOutcome {
    pub hit: bool,
    pub writeback: bool,
}

/// A single set-associative LRU cache. Sets are materialised on first touch.
#[derive(Debug, Clone)]
pub struct Cache {
    config: CacheConfig,
    sets: HashMap<u64, LruSet<u64, bool>>,
    num_sets: u64,
    block_shift: u32,
}

impl Cache {
    pub fn new(config: CacheConfig) -> Result<Self, InvalidGeometry> {
        config.validate()?;
        Ok(Self {
            num_sets: config.sets(),
            block_shift: config.block_bytes.trailing_zeros(),
            sets: HashMap::new(),
            config,
        })
    }

    pub fn config(&self) -> &CacheConfig {
        &self.config
    }

    pub fn block_of(&self, paddr: u64) -> u64 {
        paddr >> self.block_shift
    }

    fn set_index(&self, block: u64) -> u64 {
        block % self.num_sets
    }

    pub fn contains(&self, paddr: u64) -> bool {
        let block = self.block_of(paddr);
        self.sets
            .get(&self.set_index(block))
            .is_some_and(|s| s.contains(&block))
    }

    /// Tag check with LRU update; marks the line dirty when `write`.
    pub fn probe(&mut self, paddr: u64, write: bool) -> bool {
        let block = self.block_of(paddr);
        let idx = self.set_index(block);
        let write = write && self.config.writeback;
        match self.sets.get_mut(&idx).and_then(|s| s.get_mut(&block)) {
            Some(dirty) => {
                *dirty |= write;
                true
            }
            None => false,
        }
    }

    /// Installs the block; returns true when a dirty victim was evicted.
    pub fn fill(&mut self, paddr: u64, dirty: bool) -> bool {
        let block = self.block_of(paddr);
        let idx = self.set_index(block);
        let ways = self.config.associativity as usize;
        let dirty = dirty && self.config.writeback;
        let set = self.sets.entry(idx).or_insert_with(|| LruSet::new(ways));
        matches!(set.insert(block, dirty), Some((_, true)))
    }

    /// Probe, and fill on a miss.
    pub fn access(&mut self, paddr: u64, write: bool) -> CacheOutcome {
        if self.probe(paddr, write) {
            CacheOutcome {
                hit: true,
                writeback: false,
            }
        } else {
            CacheOutcome {
                hit: false,
                writeback: self.fill(paddr, write),
            }
        }
    }

    fn digest_into(&self, h: &mut impl Hasher) {
        let mut idx: Vec<_> = self.sets.keys().copied().collect();
        idx.sort_unstable();
        for i in idx {
            i.hash(h);
            for (block, dirty) in self.sets[&i].iter_lru() {
                block.hash(h);
                dirty.hash(h);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LevelStats {
    pub accesses: u64,
    pub hits: u64,
    pub misses: u64,
    pub writebacks: u64,
    pub fills: u64,
}

impl LevelStats {
    pub fn hit_rate(&self) -> f64 {
        if self.accesses == 0 {
            0.0
        } else {
            self.hits as f64 / self.accesses as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LevelSnapshot {
    pub name: String,
    pub service: Service,
    pub total: LevelStats,
    /// Indexed by `RefKind` (data, instruction, ptw).
    pub by_kind: [LevelStats; 3],
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HierarchySnapshot {
    pub levels: Vec<LevelSnapshot>,
    /// Accesses serviced by main memory, indexed by `RefKind`.
    pub memory: [u64; 3],
}

impl HierarchySnapshot {
    pub fn level(&self, name: &str) -> Option<&LevelSnapshot> {
        self.levels.iter().find(|l| l.name == name)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HierarchyConfig {
    pub l1i: CacheConfig,
    pub l1d: CacheConfig,
    pub l2: CacheConfig,
    pub l3: CacheConfig,
    pub l4: CacheConfig,
    pub l4_enabled: bool,
    pub mem_latency_cycles: u32,
}

/// 50 ns of DRAM latency at a 3.9 GHz core clock.
pub const DEFAULT_MEM_LATENCY: u32 = 195;

impl Default for HierarchyConfig {
    fn default() -> Self {
        Self {
            l1i: CacheConfig::new("l1i", 32 << 10, 4, 64, 2),
            l1d: CacheConfig::new("l1d", 32 << 10, 8, 64, 4),
            l2: CacheConfig::new("l2", 256 << 10, 8, 64, 6),
            l3: CacheConfig::new("l3", 4 << 20, 16, 64, 9),
            l4: CacheConfig::new("l4", 256 << 20, 16, 64, 20),
            l4_enabled: true,
            mem_latency_cycles: DEFAULT_MEM_LATENCY,
        }
    }
}

impl HierarchyConfig {
    pub fn validate(&self) -> Result<(), InvalidGeometry> {
        for c in [&self.l1i, &self.l1d, &self.l2, &self.l3] {
            c.validate()?;
        }
        if self.l4_enabled {
            let l4 = &self.l4;
            configure_l4(l4.size_bytes, l4.block_bytes, l4.associativity, l4.latency_cycles)?;
        }
        Ok(())
    }
}

/// How page-walk references use the hierarchy.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PtwPolicy {
    /// Start walk references at L2, bypassing the L1 data cache.
    pub from_l2: bool,
    /// Walk references observe the caches without filling or reordering them.
    pub no_fill: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AccessResult {
    pub service: Service,
    pub cycles: u32,
    /// Dirty lines written back as a side effect of the fills.
    pub evictions: u32,
}

const L1I: usize = 0;
const L1D: usize = 1;

#[derive(Debug, Clone)]
pub struct CacheHierarchy {
    /// l1i, l1d, l2, l3 and optionally l4.
    levels: Vec<Cache>,
    mem_latency: u32,
    ptw_policy: PtwPolicy,
    stats: Vec<[LevelStats; 3]>,
    memory: [u64; 3],
}

impl CacheHierarchy {
    pub fn new(config: &HierarchyConfig) -> Result<Self, InvalidGeometry> {
        config.validate()?;
        let mut levels = vec![
            Cache::new(config.l1i.clone())?,
            Cache::new(config.l1d.clone())?,
            Cache::new(config.l2.clone())?,
            Cache::new(config.l3.clone())?,
        ];
        if config.l4_enabled {
            levels.push(Cache::new(config.l4.clone())?);
        }
        Ok(Self {
            stats: vec![[LevelStats::default(); 3]; levels.len()],
            levels,
            mem_latency: config.mem_latency_cycles,
            ptw_policy: PtwPolicy::default(),
            memory: [0; 3],
        })
    }

    pub fn set_ptw_policy(&mut self, policy: PtwPolicy) {
        self.ptw_policy = policy;
    }

    pub fn ptw_policy(&self) -> PtwPolicy {
        self.ptw_policy
    }

    pub fn has_l4(&self) -> bool {
        self.levels.len() == 5
    }

    fn service_of(level: usize) -> Service {
        match level {
            L1I | L1D => Service::L1,
            2 => Service::L2,
            3 => Service::L3,
            _ => Service::L4,
        }
    }

    fn probe_order(&self, kind: RefKind) -> impl Iterator<Item = usize> {
        let first = match kind {
            RefKind::Instruction => Some(L1I),
            RefKind::Ptw if self.ptw_policy.from_l2 => None,
            _ => Some(L1D),
        };
        first.into_iter().chain(2..self.levels.len())
    }

    pub fn access(&mut self, paddr: u64, kind: RefKind, rw: Rw) -> AccessResult {
        let no_fill = kind == RefKind::Ptw && self.ptw_policy.no_fill;
        let write = rw == Rw::Write;
        let mut cycles = 0;
        let mut missed: [usize; 5] = [0; 5];
        let mut n_missed = 0;
        let mut service = Service::Mem;
        let order: Vec<usize> = self.probe_order(kind).collect();
        for (pos, &lvl) in order.iter().enumerate() {
            let cache = &mut self.levels[lvl];
            cycles += cache.config.latency_cycles;
            let hit = if no_fill {
                cache.contains(paddr)
            } else {
                cache.probe(paddr, write && pos == 0)
            };
            let s = &mut self.stats[lvl][kind.index()];
            s.accesses += 1;
            if hit {
                s.hits += 1;
                service = Self::service_of(lvl);
                break;
            }
            s.misses += 1;
            missed[n_missed] = lvl;
            n_missed += 1;
        }
        if service == Service::Mem {
            cycles += self.mem_latency;
            self.memory[kind.index()] += 1;
        }
        let mut evictions = 0;
        if !no_fill {
            for (i, &lvl) in missed[..n_missed].iter().enumerate() {
                let dirty = write && i == 0 && lvl == order[0];
                let s = &mut self.stats[lvl][kind.index()];
                s.fills += 1;
                if self.levels[lvl].fill(paddr, dirty) {
                    s.writebacks += 1;
                    evictions += 1;
                }
            }
        }
        AccessResult {
            service,
            cycles,
            evictions,
        }
    }

    /// Cycle cost of a reference that misses everywhere.
    pub fn cold_cost(&self, kind: RefKind) -> u32 {
        self.probe_order(kind)
            .map(|l| self.levels[l].config.latency_cycles)
            .sum::<u32>()
            + self.mem_latency
    }

    pub fn snapshot(&self) -> HierarchySnapshot {
        let levels = self
            .levels
            .iter()
            .zip(&self.stats)
            .enumerate()
            .map(|(i, (cache, by_kind))| {
                let mut total = LevelStats::default();
                for k in by_kind {
                    total.accesses += k.accesses;
                    total.hits += k.hits;
                    total.misses += k.misses;
                    total.writebacks += k.writebacks;
                    total.fills += k.fills;
                }
                LevelSnapshot {
                    name: cache.config.name.clone(),
                    service: Self::service_of(i),
                    total,
                    by_kind: *by_kind,
                }
            })
            .collect();
        HierarchySnapshot {
            levels,
            memory: self.memory,
        }
    }

    pub fn reset_stats(&mut self) {
        for s in &mut self.stats {
            *s = [LevelStats::default(); 3];
        }
        self.memory = [0; 3];
    }

    /// Hash of every cache's contents and recency order (statistics excluded).
    pub fn state_digest(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for c in &self.levels {
            c.digest_into(&mut h);
        }
        h.finish()
    }
}
