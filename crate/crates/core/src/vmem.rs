//! Virtual addresses, the four-level radix page table and per-process
//! address spaces.
//!
//! Page tables live in simulated physical memory: every table page is a 4 KiB
//! frame drawn from the same allocator as data frames, so the PTE addresses a
//! walk produces contend with data in the cache hierarchy.

use std::collections::{HashMap, HashSet};
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const VA_BITS: u32 = 48;
pub const VA_MASK: u64 = (1 << VA_BITS) - 1;
pub const INDEX_BITS: u32 = 9;
pub const ENTRIES_PER_TABLE: usize = 1 << INDEX_BITS;
pub const PTE_BYTES: u64 = 8;
pub const BASE_PAGE_BYTES: u64 = 4096;
const BASE_PAGE_SHIFT: u32 = 12;

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
pub enum VmemError {
    #[error("page fault at {0}")]
    PageFault(VirtualAddress),
    #[error("{va} is already mapped with a {existing} page, cannot map as {requested}")]
    ConflictingMapping {
        va: VirtualAddress,
        existing: PageSize,
        requested: PageSize,
    },
    #[error("address space {asid} ran out of physical frames")]
    OutOfFrames { asid: u16 },
}

/// A 48-bit virtual address. Bits 48..64 are carried but ignored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct VirtualAddress(pub u64);

impl VirtualAddress {
    pub fn new(raw: u64) -> Self {
        Self(raw)
    }

    pub fn raw(self) -> u64 {
        self.0
    }

    /// The 9-bit table index used at `level`.
    pub fn index(self, level: Level) -> usize {
        let shift = BASE_PAGE_SHIFT + INDEX_BITS * (3 - level.depth() as u32);
        ((self.0 >> shift) & (ENTRIES_PER_TABLE as u64 - 1)) as usize
    }

    pub fn offset(self, size: PageSize) -> u64 {
        self.0 & (size.bytes() - 1)
    }

    /// Virtual page number at the granularity of `size`.
    pub fn vpn(self, size: PageSize) -> u64 {
        (self.0 & VA_MASK) >> size.offset_bits()
    }
}

impl fmt::Display for VirtualAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#x}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub enum PageSize {
    #[default]
    Page4K,
    Page2M,
    Page1G,
}

impl PageSize {
    pub const ALL: [PageSize; 3] = [PageSize::Page4K, PageSize::Page2M, PageSize::Page1G];

    pub fn offset_bits(self) -> u32 {
        match self {
            PageSize::Page4K => 12,
            PageSize::Page2M => 21,
            PageSize::Page1G => 30,
        }
    }

    pub fn bytes(self) -> u64 {
        1 << self.offset_bits()
    }

    /// Number of page-table levels a walk reads for a leaf of this size.
    pub fn walk_depth(self) -> usize {
        match self {
            PageSize::Page4K => 4,
            PageSize::Page2M => 3,
            PageSize::Page1G => 2,
        }
    }

    /// The page size whose leaf sits at the given walk depth.
    pub fn from_walk_depth(depth: usize) -> Option<Self> {
        match depth {
            4 => Some(PageSize::Page4K),
            3 => Some(PageSize::Page2M),
            2 => Some(PageSize::Page1G),
            _ => None,
        }
    }

    /// Number of 4 KiB frames the page covers.
    pub fn frames(self) -> u64 {
        self.bytes() / BASE_PAGE_BYTES
    }
}

impl fmt::Display for PageSize {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PageSize::Page4K => "4K",
            PageSize::Page2M => "2M",
            PageSize::Page1G => "1G",
        })
    }
}

impl std::str::FromStr for PageSize {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "4K" | "4KB" | "4KIB" => Ok(PageSize::Page4K),
            "2M" | "2MB" | "2MIB" => Ok(PageSize::Page2M),
            "1G" | "1GB" | "1GIB" => Ok(PageSize::Page1G),
            other => Err(format!("unknown page size `{other}`")),
        }
    }
}

/// Page-table level, root first: PL4 (PML4), PL3 (PDP), PL2 (PD), PL1 (PT).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Level {
    Pl4,
    Pl3,
    Pl2,
    Pl1,
}

impl Level {
    pub const ALL: [Level; 4] = [Level::Pl4, Level::Pl3, Level::Pl2, Level::Pl1];

    /// Zero-based distance from the root.
    pub fn depth(self) -> usize {
        self as usize
    }

    pub fn from_depth(depth: usize) -> Level {
        Level::ALL[depth]
    }

    pub fn name(self) -> &'static str {
        match self {
            Level::Pl4 => "PL4",
            Level::Pl3 => "PL3",
            Level::Pl2 => "PL2",
            Level::Pl1 => "PL1",
        }
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Splits `va` into root-first table indices and the page offset for a leaf
/// of `size`.
pub fn split_address(va: VirtualAddress, size: PageSize) -> (Vec<u16>, u64) {
    let indices = Level::ALL[..size.walk_depth()]
        .iter()
        .map(|&l| va.index(l) as u16)
        .collect();
    (indices, va.offset(size))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Pte {
    pub present: bool,
    pub leaf: bool,
    /// Physical byte address of the next table page or of the mapped page.
    pub target: u64,
    pub size: PageSize,
}

type TablePage = Box<[Pte; ENTRIES_PER_TABLE]>;

fn empty_table() -> TablePage {
    Box::new([Pte::default(); ENTRIES_PER_TABLE])
}

#[derive(Debug, Clone)]
pub struct PageTable {
    root: u64,
    nodes: HashMap<u64, TablePage>,
}

impl PageTable {
    fn new(root: u64) -> Self {
        let mut nodes = HashMap::new();
        nodes.insert(root, empty_table());
        Self { root, nodes }
    }

    /// Physical address of the PL4 table (the CR3 value).
    pub fn root(&self) -> u64 {
        self.root
    }

    pub fn table_pages(&self) -> impl Iterator<Item = u64> + '_ {
        self.nodes.keys().copied()
    }

    pub fn table_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn entry(&self, table: u64, index: usize) -> Option<&Pte> {
        self.nodes.get(&table).map(|t| &t[index])
    }

    /// Table pages found by following non-leaf entries from the root.
    pub fn reachable_tables(&self) -> HashSet<u64> {
        let mut seen = HashSet::new();
        let mut stack = vec![self.root];
        while let Some(table) = stack.pop() {
            if !seen.insert(table) {
                continue;
            }
            if let Some(entries) = self.nodes.get(&table) {
                stack.extend(entries.iter().filter(|e| e.present && !e.leaf).map(|e| e.target));
            }
        }
        seen
    }
}

/// Bump allocator over 4 KiB frames with an optional seeded shuffle applied
/// in chunks of 512 frames to break up physical contiguity.
#[derive(Debug, Clone)]
pub struct FrameAllocator {
    base: u64,
    limit: u64,
    cursor: u64,
    pool: Vec<u64>,
    rng: Option<ChaCha8Rng>,
    table_frames: u64,
    data_frames: u64,
}

const SHUFFLE_CHUNK: u64 = 512;

impl FrameAllocator {
    /// `base` is a physical byte address; `limit` the number of frames owned.
    pub fn new(base: u64, limit: u64, shuffle_seed: Option<u64>) -> Self {
        assert_eq!(base % BASE_PAGE_BYTES, 0, "frame base must be page aligned");
        Self {
            base,
            limit,
            cursor: 0,
            pool: Vec::new(),
            rng: shuffle_seed.map(ChaCha8Rng::seed_from_u64),
            table_frames: 0,
            data_frames: 0,
        }
    }

    /// Frames handed out or reserved so far.
    pub fn cursor(&self) -> u64 {
        self.cursor
    }

    pub fn table_frames(&self) -> u64 {
        self.table_frames
    }

    pub fn data_frames(&self) -> u64 {
        self.data_frames
    }

    fn bump(&mut self, count: u64, align: u64) -> Option<u64> {
        let start = self.cursor.div_ceil(align) * align;
        let end = start.checked_add(count)?;
        if end > self.limit {
            return None;
        }
        self.cursor = end;
        Some(start)
    }

    fn single(&mut self) -> Option<u64> {
        let frame = match self.rng.as_mut() {
            None => self.bump(1, 1)?,
            Some(_) => {
                if self.pool.is_empty() {
                    let start = self.bump(SHUFFLE_CHUNK, 1)?;
                    self.pool.extend(start..start + SHUFFLE_CHUNK);
                    let rng = self.rng.as_mut().expect("checked above");
                    self.pool.shuffle(rng);
                }
                self.pool.pop()?
            }
        };
        Some(self.base + frame * BASE_PAGE_BYTES)
    }

    fn table(&mut self) -> Option<u64> {
        let addr = self.single()?;
        self.table_frames += 1;
        Some(addr)
    }

    fn data(&mut self, size: PageSize) -> Option<u64> {
        let addr = if size == PageSize::Page4K {
            self.single()?
        } else {
            let frames = size.frames();
            self.base + self.bump(frames, frames)? * BASE_PAGE_BYTES
        };
        self.data_frames += size.frames();
        Some(addr)
    }
}

/// The physical locations a hardware walker reads to translate one address.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WalkPath {
    /// Root-first physical byte addresses of each PTE read.
    pub pte_addrs: Vec<u64>,
    /// Physical page number in units of `size`.
    pub ppn: u64,
    pub size: PageSize,
}

impl WalkPath {
    pub fn physical_base(&self) -> u64 {
        self.ppn << self.size.offset_bits()
    }
}

#[derive(Debug, Clone)]
pub struct AddressSpace {
    asid: u16,
    page_table: PageTable,
    allocator: FrameAllocator,
}

impl AddressSpace {
    pub fn new(asid: u16, mut allocator: FrameAllocator) -> Result<Self, VmemError> {
        let root = allocator.table().ok_or(VmemError::OutOfFrames { asid })?;
        Ok(Self {
            asid,
            page_table: PageTable::new(root),
            allocator,
        })
    }

    pub fn asid(&self) -> u16 {
        self.asid
    }

    pub fn page_table(&self) -> &PageTable {
        &self.page_table
    }

    pub fn allocator(&self) -> &FrameAllocator {
        &self.allocator
    }

    /// Maps the page containing `va` with a leaf of `size`, creating any
    /// missing table pages. Mapping an already-mapped page is a no-op.
    pub fn map_page(&mut self, va: VirtualAddress, size: PageSize) -> Result<WalkPath, VmemError> {
        let depth = size.walk_depth();
        let mut table = self.page_table.root;
        let mut pte_addrs = Vec::with_capacity(depth);
        for d in 0..depth {
            let index = va.index(Level::from_depth(d));
            pte_addrs.push(table + PTE_BYTES * index as u64);
            let entry = self.page_table.nodes[&table][index];
            let conflict = |existing| VmemError::ConflictingMapping {
                va,
                existing,
                requested: size,
            };
            if d + 1 == depth {
                if entry.present {
                    if entry.leaf && entry.size == size {
                        return Ok(WalkPath {
                            pte_addrs,
                            ppn: entry.target >> size.offset_bits(),
                            size,
                        });
                    }
                    // a table here means smaller pages already live in the range
                    return Err(conflict(PageSize::Page4K));
                }
                let frame = self
                    .allocator
                    .data(size)
                    .ok_or(VmemError::OutOfFrames { asid: self.asid })?;
                self.page_table.nodes.get_mut(&table).expect("table exists")[index] = Pte {
                    present: true,
                    leaf: true,
                    target: frame,
                    size,
                };
                return Ok(WalkPath {
                    pte_addrs,
                    ppn: frame >> size.offset_bits(),
                    size,
                });
            }
            if entry.present {
                if entry.leaf {
                    return Err(conflict(entry.size));
                }
                table = entry.target;
            } else {
                let next = self
                    .allocator
                    .table()
                    .ok_or(VmemError::OutOfFrames { asid: self.asid })?;
                self.page_table.nodes.insert(next, empty_table());
                self.page_table.nodes.get_mut(&table).expect("table exists")[index] = Pte {
                    present: true,
                    leaf: false,
                    target: next,
                    size: PageSize::Page4K,
                };
                table = next;
            }
        }
        unreachable!("walk depth is at least two")
    }

    /// The PTE addresses a walk of `va` reads, without modifying anything.
    pub fn walk_path(&self, va: VirtualAddress) -> Result<WalkPath, VmemError> {
        let mut table = self.page_table.root;
        let mut pte_addrs = Vec::with_capacity(4);
        for level in Level::ALL {
            let index = va.index(level);
            pte_addrs.push(table + PTE_BYTES * index as u64);
            let entry = self
                .page_table
                .entry(table, index)
                .filter(|e| e.present)
                .ok_or(VmemError::PageFault(va))?;
            if entry.leaf {
                return Ok(WalkPath {
                    pte_addrs,
                    ppn: entry.target >> entry.size.offset_bits(),
                    size: entry.size,
                });
            }
            table = entry.target;
        }
        // a PL1 entry is always a leaf
        Err(VmemError::PageFault(va))
    }

    /// Physical byte address of `va`.
    pub fn translate(&self, va: VirtualAddress) -> Result<u64, VmemError> {
        let path = self.walk_path(va)?;
        Ok(path.physical_base() | va.offset(path.size))
    }
}
