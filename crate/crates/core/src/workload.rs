//! Event streams: a line-oriented text trace format and a seeded synthetic
//! generator.
//!
//! Trace grammar, one event per line:
//!
//! ```text
//! A <tid> <I|D> <R|W> <hex-va>    memory access
//! S <tid> <asid>                  context switch of thread <tid> to <asid>
//! # ...                           comment
//! ```

use std::fmt;
use std::io::BufRead;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Zipf};

use crate::cachehier::Rw;
use crate::tlb::AccessKind;
use crate::vmem::{VirtualAddress, BASE_PAGE_BYTES};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Event {
    Access {
        tid: u16,
        kind: AccessKind,
        rw: Rw,
        va: VirtualAddress,
    },
    Switch {
        tid: u16,
        asid: u16,
    },
}

impl fmt::Display for Event {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Event::Access { tid, kind, rw, va } => {
                let k = match kind {
                    AccessKind::Instruction => 'I',
                    AccessKind::Data => 'D',
                };
                let r = match rw {
                    Rw::Read => 'R',
                    Rw::Write => 'W',
                };
                write!(f, "A {tid} {k} {r} {:x}", va.raw())
            }
            Event::Switch { tid, asid } => write!(f, "S {tid} {asid}"),
        }
    }
}

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
#[error("line {line}: {message}")]
pub struct ParseError {
    pub line: usize,
    pub message: String,
}

#[derive(Debug, thiserror::Error)]
pub enum TraceError {
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error("reading trace: {0}")]
    Io(#[from] std::io::Error),
}

/// Parses one trace line. Blank and comment lines yield `Ok(None)`.
pub fn parse_line(text: &str, line: usize) -> Result<Option<Event>, ParseError> {
    let text = text.trim();
    if text.is_empty() || text.starts_with('#') {
        return Ok(None);
    }
    let err = |message: String| ParseError { line, message };
    let fields: Vec<&str> = text.split_whitespace().collect();
    let int = |s: &str, what: &str| {
        s.parse::<u16>()
            .map_err(|_| err(format!("invalid {what} `{s}`")))
    };
    match fields.as_slice() {
        ["A", tid, kind, rw, va] => {
            let kind = match *kind {
                "I" => AccessKind::Instruction,
                "D" => AccessKind::Data,
                other => return Err(err(format!("invalid access kind `{other}`"))),
            };
            let rw = match *rw {
                "R" => Rw::Read,
                "W" => Rw::Write,
                other => return Err(err(format!("invalid access direction `{other}`"))),
            };
            let digits = va
                .strip_prefix("0x")
                .or_else(|| va.strip_prefix("0X"))
                .unwrap_or(va);
            let raw = u64::from_str_radix(digits, 16)
                .map_err(|_| err(format!("invalid hex address `{va}`")))?;
            Ok(Some(Event::Access {
                tid: int(tid, "thread id")?,
                kind,
                rw,
                va: VirtualAddress(raw),
            }))
        }
        ["S", tid, asid] => Ok(Some(Event::Switch {
            tid: int(tid, "thread id")?,
            asid: int(asid, "asid")?,
        })),
        [tag, ..] if *tag == "A" || *tag == "S" => Err(err(format!(
            "wrong number of fields for `{tag}` record"
        ))),
        [tag, ..] => Err(err(format!("unknown record type `{tag}`"))),
        [] => unreachable!("empty lines handled above"),
    }
}

/// Streams events out of a text trace.
pub struct TraceReader<R> {
    inner: R,
    line: usize,
    buf: String,
}

impl<R: BufRead> TraceReader<R> {
    pub fn new(inner: R) -> Self {
        Self {
            inner,
            line: 0,
            buf: String::new(),
        }
    }
}

impl<R: BufRead> Iterator for TraceReader<R> {
    type Item = Result<Event, TraceError>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            self.buf.clear();
            match self.inner.read_line(&mut self.buf) {
                Ok(0) => return None,
                Ok(_) => {}
                Err(e) => return Some(Err(e.into())),
            }
            self.line += 1;
            match parse_line(&self.buf, self.line) {
                Ok(Some(ev)) => return Some(Ok(ev)),
                Ok(None) => continue,
                Err(e) => return Some(Err(e.into())),
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PageLocality {
    Uniform,
    Zipf(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IntraPage {
    /// Each visit to a page touches the next 64 B line of that page.
    Sequential,
    /// Each visit touches a random 8-byte word of the page.
    Random,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub footprint_bytes: u64,
    pub page_locality: PageLocality,
    pub intra_page: IntraPage,
    /// Fraction of events that are instruction fetches.
    pub inst_ratio: f64,
    /// Bytes at the start of the footprint used as the code region.
    pub code_bytes: u64,
    pub write_ratio: f64,
    /// A switch event is emitted every `switch_period` events; 0 disables.
    pub switch_period: u64,
    pub threads: u16,
    /// Number of address spaces switch events rotate through.
    pub processes: u16,
    pub base_va: u64,
    /// Map the footprint with 2 MiB leaves instead of 4 KiB pages.
    pub superpage: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            footprint_bytes: 64 << 20,
            page_locality: PageLocality::Uniform,
            intra_page: IntraPage::Random,
            inst_ratio: 0.0,
            code_bytes: 64 << 10,
            write_ratio: 0.3,
            switch_period: 0,
            threads: 1,
            processes: 1,
            base_va: 0x0000_1000_0000_0000,
            superpage: false,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.footprint_bytes < BASE_PAGE_BYTES {
            return Err("synth.footprint must cover at least one page".into());
        }
        if let PageLocality::Zipf(s) = self.page_locality {
            if !(s > 0.0 && s.is_finite()) {
                return Err(format!("zipf exponent must be positive, got {s}"));
            }
        }
        for (name, v) in [("synth.inst_ratio", self.inst_ratio), ("synth.write_ratio", self.write_ratio)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        if self.threads == 0 || self.processes == 0 {
            return Err("synth.threads and synth.processes must be at least 1".into());
        }
        if !self.base_va.is_multiple_of(BASE_PAGE_BYTES) || self.base_va + self.footprint_bytes > 1 << 48 {
            return Err("synthetic footprint must be page aligned and inside the 48-bit space".into());
        }
        Ok(())
    }

    pub fn pages(&self) -> u64 {
        self.footprint_bytes / BASE_PAGE_BYTES
    }
}

/// Infinite, deterministic event generator.
pub struct SynthGenerator {
    config: SynthConfig,
    rng: ChaCha8Rng,
    zipf: Option<Zipf<f64>>,
    /// Popularity rank to page index.
    rank_to_page: Vec<u64>,
    cursors: Vec<u8>,
    code_cursor: u64,
    emitted: u64,
    switches: u64,
    thread_asid: Vec<u16>,
}

const LINE: u64 = 64;
const LINES_PER_PAGE: u64 = BASE_PAGE_BYTES / LINE;

impl SynthGenerator {
    pub fn new(config: SynthConfig) -> Result<Self, String> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let pages = config.pages();
        let (zipf, rank_to_page) = match config.page_locality {
            PageLocality::Uniform => (None, Vec::new()),
            PageLocality::Zipf(s) => {
                let mut perm: Vec<u64> = (0..pages).collect();
                perm.shuffle(&mut rng);
                (
                    Some(Zipf::new(pages as f64, s).map_err(|e| e.to_string())?),
                    perm,
                )
            }
        };
        let cursors = match config.intra_page {
            IntraPage::Sequential => vec![0; pages as usize],
            IntraPage::Random => Vec::new(),
        };
        let thread_asid = (0..config.threads).collect();
        Ok(Self {
            config,
            rng,
            zipf,
            rank_to_page,
            cursors,
            code_cursor: 0,
            emitted: 0,
            switches: 0,
            thread_asid,
        })
    }

    pub fn config(&self) -> &SynthConfig {
        &self.config
    }

    fn pick_page(&mut self) -> u64 {
        match &self.zipf {
            None => self.rng.random_range(0..self.config.pages()),
            Some(z) => {
                let rank = z.sample(&mut self.rng) as u64;
                self.rank_to_page[(rank.max(1) - 1) as usize]
            }
        }
    }

    fn next_event(&mut self) -> Event {
        let index = self.emitted;
        self.emitted += 1;
        let period = self.config.switch_period;
        if period > 0 && (index + 1).is_multiple_of(period) {
            let tid = (self.switches % self.config.threads as u64) as u16;
            self.switches += 1;
            let asid = (self.thread_asid[tid as usize] + 1) % self.config.processes.max(1);
            self.thread_asid[tid as usize] = asid;
            return Event::Switch { tid, asid };
        }
        let tid = (index % self.config.threads as u64) as u16;
        let base = self.config.base_va;
        if self.config.inst_ratio > 0.0 && self.rng.random_bool(self.config.inst_ratio) {
            let code = self.config.code_bytes.clamp(LINE, self.config.footprint_bytes);
            let off = self.code_cursor % code;
            self.code_cursor += 16;
            return Event::Access {
                tid,
                kind: AccessKind::Instruction,
                rw: Rw::Read,
                va: VirtualAddress(base + off),
            };
        }
        let page = self.pick_page();
        let offset = match self.config.intra_page {
            IntraPage::Sequential => {
                let c = &mut self.cursors[page as usize];
                let line = *c as u64;
                *c = ((line + 1) % LINES_PER_PAGE) as u8;
                line * LINE
            }
            IntraPage::Random => self.rng.random_range(0..BASE_PAGE_BYTES / 8) * 8,
        };
        let rw = if self.rng.random_bool(self.config.write_ratio) {
            Rw::Write
        } else {
            Rw::Read
        };
        Event::Access {
            tid,
            kind: AccessKind::Data,
            rw,
            va: VirtualAddress(base + page * BASE_PAGE_BYTES + offset),
        }
    }
}

impl Iterator for SynthGenerator {
    type Item = Event;

    fn next(&mut self) -> Option<Event> {
        Some(self.next_event())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashMap;

    #[test]
    fn parses_access_and_switch() {
        assert_eq!(
            parse_line("A 2 D R 7f0012345678", 1).unwrap(),
            Some(Event::Access {
                tid: 2,
                kind: AccessKind::Data,
                rw: Rw::Read,
                va: VirtualAddress(0x7f0012345678)
            })
        );
        assert_eq!(
            parse_line("  S 1 7  ", 1).unwrap(),
            Some(Event::Switch { tid: 1, asid: 7 })
        );
        assert_eq!(parse_line("# comment", 3).unwrap(), None);
        assert_eq!(parse_line("   ", 3).unwrap(), None);
    }

    #[test]
    fn rejects_malformed_lines() {
        let e = parse_line("A 2 Q R 0", 12).unwrap_err();
        assert_eq!(e.line, 12);
        for bad in ["A 2 D R", "A 2 D X 10", "A x D R 10", "A 2 D R zz", "S 1", "Q 1 2", "S 1 70000"] {
            assert!(parse_line(bad, 1).is_err(), "{bad}");
        }
    }

    #[test]
    fn reader_reports_line_numbers() {
        let text = "# header\nA 0 I R 1000\n\nS 0 3\nA 0 D W nothex\n";
        let events: Vec<_> = TraceReader::new(text.as_bytes()).collect();
        assert_eq!(events.len(), 3);
        match &events[2] {
            Err(TraceError::Parse(p)) => assert_eq!(p.line, 5),
            other => panic!("unexpected {other:?}"),
        }
    }

    fn event_strategy() -> impl Strategy<Value = Event> {
        prop_oneof![
            (any::<u16>(), any::<bool>(), any::<bool>(), any::<u64>()).prop_map(|(tid, i, w, va)| {
                Event::Access {
                    tid,
                    kind: if i { AccessKind::Instruction } else { AccessKind::Data },
                    rw: if w { Rw::Write } else { Rw::Read },
                    va: VirtualAddress(va),
                }
            }),
            (any::<u16>(), any::<u16>()).prop_map(|(tid, asid)| Event::Switch { tid, asid }),
        ]
    }

    proptest! {
        #[test]
        fn format_parse_round_trip(ev in event_strategy()) {
            let line = ev.to_string();
            prop_assert_eq!(parse_line(&line, 1).unwrap(), Some(ev));
            let spaced = format!("  {}\t", line.replace(' ', "   "));
            prop_assert_eq!(parse_line(&spaced, 1).unwrap().unwrap().to_string(), line);
        }
    }

    #[test]
    fn hex_prefix_is_canonicalised() {
        let ev = parse_line("A 0 D W 0xABC", 1).unwrap().unwrap();
        assert_eq!(ev.to_string(), "A 0 D W abc");
    }

    fn take(cfg: SynthConfig, n: usize) -> Vec<Event> {
        SynthGenerator::new(cfg).unwrap().take(n).collect()
    }

    #[test]
    fn generator_is_deterministic() {
        let cfg = SynthConfig {
            page_locality: PageLocality::Zipf(0.9),
            inst_ratio: 0.2,
            switch_period: 100,
            threads: 2,
            processes: 3,
            ..Default::default()
        };
        assert_eq!(take(cfg.clone(), 5000), take(cfg.clone(), 5000));
        let other = SynthConfig { seed: 2, ..cfg.clone() };
        assert_ne!(take(cfg, 5000), take(other, 5000));
    }

    #[test]
    fn footprint_bounds_addresses() {
        let base = SynthConfig::default().base_va;
        for locality in [PageLocality::Uniform, PageLocality::Zipf(1.0)] {
            for intra in [IntraPage::Sequential, IntraPage::Random] {
                let cfg = SynthConfig {
                    footprint_bytes: 1 << 20,
                    page_locality: locality,
                    intra_page: intra,
                    inst_ratio: 0.1,
                    ..Default::default()
                };
                for ev in SynthGenerator::new(cfg).unwrap().take(1_000_000) {
                    if let Event::Access { va, .. } = ev {
                        assert!(va.raw() >= base && va.raw() < base + (1 << 20));
                    }
                }
            }
        }
    }

    #[test]
    fn zipf_skews_page_popularity() {
        let cfg = SynthConfig {
            footprint_bytes: 1024 * 4096,
            page_locality: PageLocality::Zipf(1.0),
            ..Default::default()
        };
        let mut counts: HashMap<u64, u64> = HashMap::new();
        for ev in take(cfg, 100_000) {
            if let Event::Access { va, .. } = ev {
                *counts.entry(va.raw() >> 12).or_default() += 1;
            }
        }
        let mut all: Vec<u64> = (0..1024)
            .map(|p| counts.get(&((SynthConfig::default().base_va >> 12) + p)).copied().unwrap_or(0))
            .collect();
        all.sort_unstable();
        let median = all[512];
        assert!(*all.last().unwrap() > median);
    }

    #[test]
    fn switches_arrive_on_schedule() {
        let cfg = SynthConfig {
            switch_period: 7,
            threads: 2,
            processes: 2,
            ..Default::default()
        };
        for (i, ev) in take(cfg, 700).into_iter().enumerate() {
            let is_switch = matches!(ev, Event::Switch { .. });
            assert_eq!(is_switch, (i + 1) % 7 == 0, "event {i}");
        }
    }

    #[test]
    fn sequential_pages_walk_lines() {
        let cfg = SynthConfig {
            footprint_bytes: 4096,
            intra_page: IntraPage::Sequential,
            ..Default::default()
        };
        let offs: Vec<u64> = take(cfg, 65)
            .into_iter()
            .map(|e| match e {
                Event::Access { va, .. } => va.raw() & 0xfff,
                _ => unreachable!(),
            })
            .collect();
        assert_eq!(&offs[..3], &[0, 64, 128]);
        assert_eq!(offs[64], 0);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(SynthGenerator::new(SynthConfig { footprint_bytes: 100, ..Default::default() }).is_err());
        assert!(SynthGenerator::new(SynthConfig {
            page_locality: PageLocality::Zipf(0.0),
            ..Default::default()
        })
        .is_err());
        assert!(SynthGenerator::new(SynthConfig { inst_ratio: 1.5, ..Default::default() }).is_err());
    }
}
