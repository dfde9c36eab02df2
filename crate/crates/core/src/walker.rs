//! Hardware page-table walker with per-level page-walk caches (PWC).
//!
//! Every PTE read goes through the cache hierarchy as a `RefKind::Ptw`
//! reference, so walk latency depends on where the page-table lines currently
//! live. Nested walks translate each guest table pointer and the final guest
//! physical address through the nested page table.

use crate::cachehier::{CacheHierarchy, RefKind, Rw, Service};
use crate::lru::LruSet;
use crate::tlb::FlushScope;
use crate::vmem::{AddressSpace, Level, PageSize, VirtualAddress, VmemError, WalkPath, VA_MASK};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PwcConfig {
    pub enabled: bool,
    /// Capacity for cached PL4, PL3 and PL2 pointers.
    pub entries_per_level: [usize; 3],
    pub latency: u32,
}

impl Default for PwcConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            entries_per_level: [16; 3],
            latency: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NestedConfig {
    pub enabled: bool,
    pub guest_levels: usize,
    pub nested_levels: usize,
}

impl Default for NestedConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            guest_levels: 4,
            nested_levels: 4,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct WalkerConfig {
    pub pwc: PwcConfig,
    pub walk_from_l2: bool,
    pub pollution_off: bool,
    pub nested: NestedConfig,
}

/// Number of memory references for a two-dimensional walk with `g` guest
/// and `n` nested levels and nothing cached.
pub fn ref_count(g: usize, n: usize) -> usize {
    if n == 0 {
        g
    } else {
        (g + 1) * n + g
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Dimension {
    /// A native walk, or the guest page table in a nested walk.
    Guest,
    Nested,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WalkRef {
    pub dimension: Dimension,
    pub level: Level,
    pub paddr: u64,
    pub service: Service,
    pub cycles: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WalkResult {
    pub latency_cycles: u32,
    pub refs: Vec<WalkRef>,
    pub skipped_levels: usize,
    pub pwc_cycles: u32,
    /// Resulting translation, in units of `size`.
    pub ppn: u64,
    pub size: PageSize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PwcHit {
    /// Level whose entry was cached; the walk resumes one level below it.
    pub level: Level,
    pub next_table: u64,
}

fn prefix(va: VirtualAddress, level: Level) -> u64 {
    (va.raw() & VA_MASK) >> (39 - 9 * level.depth() as u32)
}

/// Caches of upper-level page-table pointers keyed by (ASID, index prefix).
#[derive(Debug, Clone)]
pub struct Pwc {
    latency: u32,
    levels: [LruSet<(u16, u64), u64>; 3],
}

impl Pwc {
    pub fn new(config: &PwcConfig) -> Self {
        let [a, b, c] = config.entries_per_level;
        Self {
            latency: config.latency,
            levels: [LruSet::new(a.max(1)), LruSet::new(b.max(1)), LruSet::new(c.max(1))],
        }
    }

    /// Deepest cached pointer usable by a walk of depth `walk_depth`.
    pub fn access(&mut self, asid: u16, va: VirtualAddress, walk_depth: usize) -> Option<PwcHit> {
        let mut best = None;
        for d in 0..walk_depth.saturating_sub(1).min(3) {
            let level = Level::from_depth(d);
            if let Some(&mut next) = self.levels[d].get_mut(&(asid, prefix(va, level))) {
                best = Some(PwcHit {
                    level,
                    next_table: next,
                });
            }
        }
        best
    }

    /// Installs every non-leaf pointer found along `path`.
    pub fn fill(&mut self, asid: u16, va: VirtualAddress, path: &WalkPath) {
        for d in 0..path.pte_addrs.len() - 1 {
            let next_table = path.pte_addrs[d + 1] & !0xfff;
            self.levels[d].insert((asid, prefix(va, Level::from_depth(d))), next_table);
        }
    }

    pub fn flush(&mut self, scope: FlushScope) {
        for l in &mut self.levels {
            match scope {
                FlushScope::All => l.clear(),
                FlushScope::Asid(a) => {
                    l.retain(|(asid, _), _| *asid != a);
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct Walker {
    config: WalkerConfig,
    pwc: Pwc,
}

impl Walker {
    pub fn new(config: WalkerConfig) -> Self {
        Self {
            pwc: Pwc::new(&config.pwc),
            config,
        }
    }

    pub fn config(&self) -> &WalkerConfig {
        &self.config
    }

    pub fn pwc_mut(&mut self) -> &mut Pwc {
        &mut self.pwc
    }

    fn read(
        caches: &mut CacheHierarchy,
        refs: &mut Vec<WalkRef>,
        dimension: Dimension,
        level: Level,
        paddr: u64,
    ) -> u32 {
        let r = caches.access(paddr, RefKind::Ptw, Rw::Read);
        refs.push(WalkRef {
            dimension,
            level,
            paddr,
            service: r.service,
            cycles: r.cycles,
        });
        r.cycles
    }

    /// Walks the native page table of `aspace` for `va`. The PWC is probed
    /// first; its probe latency is charged only when it supplies a pointer.
    pub fn walk(
        &mut self,
        aspace: &AddressSpace,
        va: VirtualAddress,
        caches: &mut CacheHierarchy,
    ) -> Result<WalkResult, VmemError> {
        let path = aspace.walk_path(va)?;
        let depth = path.pte_addrs.len();
        let mut start = 0;
        let mut pwc_cycles = 0;
        if self.config.pwc.enabled {
            if let Some(hit) = self.pwc.access(aspace.asid(), va, depth) {
                start = hit.level.depth() + 1;
                pwc_cycles = self.pwc.latency;
                debug_assert_eq!(hit.next_table, path.pte_addrs[start] & !0xfff);
            }
        }
        let mut refs = Vec::with_capacity(depth - start);
        let mut latency = pwc_cycles;
        for d in start..depth {
            latency += Self::read(caches, &mut refs, Dimension::Guest, Level::from_depth(d), path.pte_addrs[d]);
        }
        if self.config.pwc.enabled {
            self.pwc.fill(aspace.asid(), va, &path);
        }
        Ok(WalkResult {
            latency_cycles: latency,
            refs,
            skipped_levels: start,
            pwc_cycles,
            ppn: path.ppn,
            size: path.size,
        })
    }

    fn nested_translate(
        nested: &AddressSpace,
        gpa: u64,
        caches: &mut CacheHierarchy,
        refs: &mut Vec<WalkRef>,
        latency: &mut u32,
    ) -> Result<(u64, PageSize), VmemError> {
        let gpa = VirtualAddress(gpa);
        let path = nested.walk_path(gpa)?;
        for (d, &addr) in path.pte_addrs.iter().enumerate() {
            *latency += Self::read(caches, refs, Dimension::Nested, Level::from_depth(d), addr);
        }
        Ok((path.physical_base() | gpa.offset(path.size), path.size))
    }

    /// Two-dimensional walk: every guest table address and the final guest
    /// physical address are translated through `nested` before use.
    pub fn nested_walk(
        &mut self,
        guest: &AddressSpace,
        nested: &AddressSpace,
        gva: VirtualAddress,
        caches: &mut CacheHierarchy,
    ) -> Result<WalkResult, VmemError> {
        let gpath = guest.walk_path(gva)?;
        let mut refs = Vec::new();
        let mut latency = 0;
        for (d, &gpte) in gpath.pte_addrs.iter().enumerate() {
            let (hpa, _) = Self::nested_translate(nested, gpte, caches, &mut refs, &mut latency)?;
            latency += Self::read(caches, &mut refs, Dimension::Guest, Level::from_depth(d), hpa);
        }
        let data_gpa = gpath.physical_base() | gva.offset(gpath.size);
        let (data_hpa, nsize) = Self::nested_translate(nested, data_gpa, caches, &mut refs, &mut latency)?;
        let size = gpath.size.min(nsize);
        Ok(WalkResult {
            latency_cycles: latency,
            refs,
            skipped_levels: 0,
            pwc_cycles: 0,
            ppn: data_hpa >> size.offset_bits(),
            size,
        })
    }

    pub fn flush(&mut self, scope: FlushScope) {
        self.pwc.flush(scope);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cachehier::HierarchyConfig;
    use crate::vmem::FrameAllocator;

    fn setup() -> (AddressSpace, CacheHierarchy) {
        let a = AddressSpace::new(1, FrameAllocator::new(1 << 32, 1 << 22, None)).unwrap();
        (a, CacheHierarchy::new(&HierarchyConfig::default()).unwrap())
    }

    fn no_pwc() -> WalkerConfig {
        WalkerConfig {
            pwc: PwcConfig {
                enabled: false,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn cold_walk_costs_four_memory_refs() {
        let (mut a, mut c) = setup();
        let va = VirtualAddress(0x7f00_1234_5678);
        a.map_page(va, PageSize::Page4K).unwrap();
        let mut w = Walker::new(no_pwc());
        let r = w.walk(&a, va, &mut c).unwrap();
        assert_eq!(r.refs.len(), 4);
        assert!(r.refs.iter().all(|x| x.service == Service::Mem));
        assert_eq!(r.latency_cycles, 4 * 234);
        assert_eq!(r.latency_cycles, 936);
    }

    #[test]
    fn warm_walk_hits_l1() {
        let (mut a, mut c) = setup();
        let va = VirtualAddress(0x1234_5000);
        a.map_page(va, PageSize::Page4K).unwrap();
        let mut w = Walker::new(no_pwc());
        w.walk(&a, va, &mut c).unwrap();
        let r = w.walk(&a, va, &mut c).unwrap();
        assert!(r.refs.iter().all(|x| x.service == Service::L1));
        assert_eq!(r.latency_cycles, 16);
        let sum: u32 = r.refs.iter().map(|x| x.cycles).sum();
        assert_eq!(r.latency_cycles, sum + r.pwc_cycles);
    }

    #[test]
    fn pwc_skips_to_leaf_level() {
        let (mut a, mut c) = setup();
        let va = VirtualAddress(0x1234_5000);
        a.map_page(va, PageSize::Page4K).unwrap();
        let mut w = Walker::new(WalkerConfig::default());
        let first = w.walk(&a, va, &mut c).unwrap();
        assert_eq!((first.refs.len(), first.pwc_cycles), (4, 0));
        let r = w.walk(&a, va, &mut c).unwrap();
        assert_eq!(r.refs.len(), 1);
        assert_eq!(r.refs[0].level, Level::Pl1);
        assert_eq!(r.skipped_levels, 3);
        assert_eq!(r.latency_cycles, 4 + 1);
    }

    #[test]
    fn pwc_prefix_matching() {
        let (mut a, _) = setup();
        let va = VirtualAddress(0x0000_0080_0040_3000);
        // same PL4/PL3 index, different PL2 index
        let va2 = VirtualAddress(0x0000_0080_0060_3000);
        let path = a.map_page(va, PageSize::Page4K).unwrap();
        let path2 = a.map_page(va2, PageSize::Page4K).unwrap();
        let mut pwc = Pwc::new(&PwcConfig::default());
        assert_eq!(pwc.access(1, va, 4), None);
        pwc.fill(1, va, &path);
        assert_eq!(pwc.access(1, va, 4).unwrap().level, Level::Pl2);
        let hit = pwc.access(1, va2, 4).unwrap();
        assert_eq!(hit.level, Level::Pl3);
        assert_eq!(hit.next_table, path2.pte_addrs[2] & !0xfff);
        // different ASID never matches
        assert_eq!(pwc.access(2, va, 4), None);
        pwc.flush(FlushScope::Asid(1));
        assert_eq!(pwc.access(1, va, 4), None);
    }

    #[test]
    fn superpage_walk_has_three_refs_and_no_pl2_pointer() {
        let (mut a, mut c) = setup();
        let va = VirtualAddress(0x4000_0000);
        a.map_page(va, PageSize::Page2M).unwrap();
        let mut w = Walker::new(WalkerConfig::default());
        let r = w.walk(&a, va, &mut c).unwrap();
        assert_eq!(r.refs.len(), 3);
        assert_eq!(r.size, PageSize::Page2M);
        let r = w.walk(&a, va, &mut c).unwrap();
        assert_eq!(r.refs.len(), 1);
        assert_eq!(r.refs[0].level, Level::Pl2);
    }

    #[test]
    fn unmapped_walk_faults() {
        let (a, mut c) = setup();
        let mut w = Walker::new(WalkerConfig::default());
        assert!(matches!(
            w.walk(&a, VirtualAddress(0x5000), &mut c),
            Err(VmemError::PageFault(_))
        ));
    }

    #[test]
    fn ref_count_closed_form() {
        assert_eq!(ref_count(4, 4), 24);
        assert_eq!(ref_count(4, 0), 4);
        assert_eq!(ref_count(1, 1), 3);
        assert_eq!(ref_count(2, 3), 11);
    }

    fn nested_pair(gsize: PageSize, nsize: PageSize, gva: VirtualAddress) -> (AddressSpace, AddressSpace) {
        let mut guest = AddressSpace::new(1, FrameAllocator::new(0, 1 << 22, None)).unwrap();
        let mut host = AddressSpace::new(0, FrameAllocator::new(1 << 40, 1 << 22, None)).unwrap();
        let gpath = guest.map_page(gva, gsize).unwrap();
        for gpa in gpath.pte_addrs.iter().chain(std::iter::once(&gpath.physical_base())) {
            host.map_page(VirtualAddress(*gpa), nsize).unwrap();
        }
        (guest, host)
    }

    #[test]
    fn nested_walk_issues_twenty_four_refs() {
        let gva = VirtualAddress(0x7f12_3456_7000);
        let (guest, host) = nested_pair(PageSize::Page4K, PageSize::Page4K, gva);
        let mut c = CacheHierarchy::new(&HierarchyConfig::default()).unwrap();
        let mut w = Walker::new(WalkerConfig::default());
        let r = w.nested_walk(&guest, &host, gva, &mut c).unwrap();
        assert_eq!(r.refs.len(), ref_count(4, 4));
        let guest_refs = r.refs.iter().filter(|x| x.dimension == Dimension::Guest).count();
        assert_eq!(guest_refs, 4);
        let sum: u32 = r.refs.iter().map(|x| x.cycles).sum();
        assert_eq!(sum, r.latency_cycles);
        // end-to-end translation agrees with composing the two tables
        let gpa = guest.translate(gva).unwrap();
        let hpa = host.translate(VirtualAddress(gpa)).unwrap();
        assert_eq!(r.ppn << r.size.offset_bits(), hpa & !0xfff);
    }

    #[test]
    fn nested_walk_with_superpages_in_both_dimensions() {
        let gva = VirtualAddress(0x40_0000);
        let (guest, host) = nested_pair(PageSize::Page2M, PageSize::Page1G, gva);
        let mut c = CacheHierarchy::new(&HierarchyConfig::default()).unwrap();
        let mut w = Walker::new(WalkerConfig::default());
        let r = w.nested_walk(&guest, &host, gva, &mut c).unwrap();
        assert_eq!(r.refs.len(), ref_count(3, 2));
        assert_eq!(r.size, PageSize::Page2M);
    }
}
