//! Translation lookaside buffers: split L1 instruction/data TLBs, a unified
//! L2 TLB and a dedicated superpage TLB probed in parallel with L1.

use std::collections::HashSet;

use crate::lru::LruSet;
use crate::vmem::{PageSize, VirtualAddress};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AccessKind {
    Instruction,
    Data,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Associativity {
    Full,
    Ways(usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TlbConfig {
    pub name: String,
    pub entries: usize,
    pub associativity: Associativity,
    pub page_size: PageSize,
}

impl TlbConfig {
    pub fn fully_associative(name: &str, entries: usize, page_size: PageSize) -> Self {
        Self {
            name: name.to_string(),
            entries,
            associativity: Associativity::Full,
            page_size,
        }
    }

    pub fn ways(&self) -> usize {
        match self.associativity {
            Associativity::Full => self.entries,
            Associativity::Ways(w) => w,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let ways = self.ways();
        if self.entries == 0 || ways == 0 || !self.entries.is_multiple_of(ways) {
            return Err(format!(
                "TLB {}: {} entries not divisible into {}-way sets",
                self.name, self.entries, ways
            ));
        }
        Ok(())
    }
}

/// Bytes mapped when every entry of every structure holds a translation.
pub fn reach(configs: &[&TlbConfig]) -> u64 {
    configs
        .iter()
        .map(|c| c.entries as u64 * c.page_size.bytes())
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TlbKey {
    pub asid: u16,
    pub vpn: u64,
    pub size: PageSize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TlbEntry {
    pub asid: u16,
    pub vpn: u64,
    pub ppn: u64,
    pub size: PageSize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TlbStats {
    pub lookups: u64,
    pub hits: u64,
}

impl TlbStats {
    pub fn hit_rate(&self) -> f64 {
        if self.lookups == 0 {
            0.0
        } else {
            self.hits as f64 / self.lookups as f64
        }
    }
}

/// One TLB structure: `entries / ways` LRU sets indexed by low VPN bits.
#[derive(Debug, Clone)]
pub struct Tlb {
    config: TlbConfig,
    sets: Vec<LruSet<TlbKey, u64>>,
    stats: TlbStats,
}

impl Tlb {
    pub fn new(config: TlbConfig) -> Self {
        config.validate().expect("invalid TLB geometry");
        let ways = config.ways();
        let sets = (0..config.entries / ways).map(|_| LruSet::new(ways)).collect();
        Self {
            config,
            sets,
            stats: TlbStats::default(),
        }
    }

    pub fn config(&self) -> &TlbConfig {
        &self.config
    }

    pub fn stats(&self) -> TlbStats {
        self.stats
    }

    fn set_for(&mut self, vpn: u64) -> &mut LruSet<TlbKey, u64> {
        let n = self.sets.len() as u64;
        &mut self.sets[(vpn % n) as usize]
    }

    /// Probes for the page containing `va`; returns the PPN on a hit.
    pub fn lookup(&mut self, asid: u16, va: VirtualAddress) -> Option<u64> {
        let size = self.config.page_size;
        let key = TlbKey {
            asid,
            vpn: va.vpn(size),
            size,
        };
        self.stats.lookups += 1;
        let hit = self.set_for(key.vpn).get_mut(&key).copied();
        if hit.is_some() {
            self.stats.hits += 1;
        }
        hit
    }

    pub fn contains(&self, asid: u16, vpn: u64) -> bool {
        let size = self.config.page_size;
        let n = self.sets.len() as u64;
        self.sets[(vpn % n) as usize].contains(&TlbKey { asid, vpn, size })
    }

    pub fn insert(&mut self, asid: u16, vpn: u64, ppn: u64) -> Option<TlbEntry> {
        let size = self.config.page_size;
        self.set_for(vpn)
            .insert(TlbKey { asid, vpn, size }, ppn)
            .map(|(k, ppn)| TlbEntry {
                asid: k.asid,
                vpn: k.vpn,
                ppn,
                size: k.size,
            })
    }

    /// Removes entries matching `scope`, returning their keys.
    pub fn flush(&mut self, scope: FlushScope) -> Vec<TlbKey> {
        self.sets
            .iter_mut()
            .flat_map(|set| set.retain(|k, _| !scope.matches(k.asid)))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.sets.iter().map(LruSet::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlushScope {
    Asid(u16),
    All,
}

impl FlushScope {
    fn matches(self, asid: u16) -> bool {
        match self {
            FlushScope::Asid(a) => a == asid,
            FlushScope::All => true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TlbLevel {
    L1,
    Superpage,
    L2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TlbLookup {
    Hit {
        level: TlbLevel,
        ppn: u64,
        size: PageSize,
    },
    Miss,
}

impl TlbLookup {
    pub fn is_hit(&self) -> bool {
        matches!(self, TlbLookup::Hit { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TlbHierarchyConfig {
    pub l1i: TlbConfig,
    pub l1d: TlbConfig,
    /// Zero entries disables the structure.
    pub l2: TlbConfig,
    /// Zero entries disables the structure.
    pub superpage: TlbConfig,
    /// Cycles added when an L1 miss probes the L2 TLB.
    pub l2_penalty: u32,
    /// Flush all entries on a context switch instead of relying on ASID tags.
    pub flush_on_switch: bool,
}

impl Default for TlbHierarchyConfig {
    fn default() -> Self {
        Self {
            l1i: TlbConfig::fully_associative("l1i", 64, PageSize::Page4K),
            l1d: TlbConfig::fully_associative("l1d", 64, PageSize::Page4K),
            l2: TlbConfig::fully_associative("l2", 1024, PageSize::Page4K),
            superpage: TlbConfig::fully_associative("super", 32, PageSize::Page2M),
            l2_penalty: 7,
            flush_on_switch: false,
        }
    }
}

impl TlbHierarchyConfig {
    /// Combined reach of the data-side structures.
    pub fn data_reach(&self) -> u64 {
        let cfgs: Vec<_> = [&self.l1d, &self.l2, &self.superpage]
            .into_iter()
            .filter(|c| c.entries > 0)
            .collect();
        reach(&cfgs)
    }
}

#[derive(Debug, Clone)]
pub struct TlbHierarchy {
    l1i: Tlb,
    l1d: Tlb,
    l2: Option<Tlb>,
    superpage: Option<Tlb>,
}

impl TlbHierarchy {
    pub fn new(config: &TlbHierarchyConfig) -> Self {
        Self {
            l1i: Tlb::new(config.l1i.clone()),
            l1d: Tlb::new(config.l1d.clone()),
            l2: (config.l2.entries > 0).then(|| Tlb::new(config.l2.clone())),
            superpage: (config.superpage.entries > 0).then(|| Tlb::new(config.superpage.clone())),
        }
    }

    fn l1_mut(&mut self, kind: AccessKind) -> &mut Tlb {
        match kind {
            AccessKind::Instruction => &mut self.l1i,
            AccessKind::Data => &mut self.l1d,
        }
    }

    /// Probes L1 and the superpage TLB in parallel, then L2. An L2 hit is
    /// promoted into the L1 for `kind`.
    pub fn lookup(&mut self, asid: u16, va: VirtualAddress, kind: AccessKind) -> TlbLookup {
        let l1 = self.l1_mut(kind);
        let l1_size = l1.config.page_size;
        let l1_hit = l1.lookup(asid, va);
        let sp_hit = self
            .superpage
            .as_mut()
            .and_then(|sp| sp.lookup(asid, va).map(|ppn| (ppn, sp.config.page_size)));
        if let Some(ppn) = l1_hit {
            return TlbLookup::Hit {
                level: TlbLevel::L1,
                ppn,
                size: l1_size,
            };
        }
        if let Some((ppn, size)) = sp_hit {
            return TlbLookup::Hit {
                level: TlbLevel::Superpage,
                ppn,
                size,
            };
        }
        let Some(l2) = self.l2.as_mut() else {
            return TlbLookup::Miss;
        };
        let l2_size = l2.config.page_size;
        match l2.lookup(asid, va) {
            Some(ppn) => {
                let l1 = self.l1_mut(kind);
                if l1.config.page_size == l2_size {
                    l1.insert(asid, va.vpn(l2_size), ppn);
                }
                TlbLookup::Hit {
                    level: TlbLevel::L2,
                    ppn,
                    size: l2_size,
                }
            }
            None => TlbLookup::Miss,
        }
    }

    /// Installs a completed translation. Superpage translations go to the
    /// superpage TLB when one serves their size; otherwise they are split
    /// down to the 4 KiB page containing `va`. Base-page translations go to
    /// the L1 for `kind` and to L2.
    pub fn insert(
        &mut self,
        asid: u16,
        va: VirtualAddress,
        ppn: u64,
        size: PageSize,
        kind: AccessKind,
    ) -> Vec<TlbEntry> {
        let mut evicted = Vec::new();
        if let Some(sp) = self.superpage.as_mut() {
            if sp.config.page_size == size {
                evicted.extend(sp.insert(asid, va.vpn(size), ppn));
                return evicted;
            }
        }
        let (vpn, ppn) = if size == PageSize::Page4K {
            (va.vpn(size), ppn)
        } else {
            let sub = va.offset(size) >> PageSize::Page4K.offset_bits();
            (
                va.vpn(PageSize::Page4K),
                (ppn << (size.offset_bits() - PageSize::Page4K.offset_bits())) + sub,
            )
        };
        evicted.extend(self.l1_mut(kind).insert(asid, vpn, ppn));
        if let Some(l2) = self.l2.as_mut() {
            evicted.extend(l2.insert(asid, vpn, ppn));
        }
        evicted
    }

    /// Invalidates matching entries everywhere; returns the number of
    /// distinct translations removed.
    pub fn flush(&mut self, scope: FlushScope) -> usize {
        let mut removed: HashSet<TlbKey> = HashSet::new();
        removed.extend(self.l1i.flush(scope));
        removed.extend(self.l1d.flush(scope));
        if let Some(l2) = self.l2.as_mut() {
            removed.extend(l2.flush(scope));
        }
        if let Some(sp) = self.superpage.as_mut() {
            removed.extend(sp.flush(scope));
        }
        removed.len()
    }

    pub fn structures(&self) -> Vec<&Tlb> {
        let mut v = vec![&self.l1i, &self.l1d];
        v.extend(self.l2.as_ref());
        v.extend(self.superpage.as_ref());
        v
    }
}
