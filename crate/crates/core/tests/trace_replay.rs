use std::io::Cursor;

use mmu_sim_core::engine::{EngineConfig, InterplayCase, MachineConfig};
use mmu_sim_core::workload::{SynthConfig, SynthGenerator, TraceError, TraceReader};
use mmu_sim_core::{Engine, Error};

const TRACE: &str = "\
# two threads, one switch
A 0 D R 7f0000001000
A 0 D W 7f0000001008
A 1 I R 400000
S 1 0
A 1 D R 7f0000001010
A 0 D R 7f0000200000
";

fn engine() -> Engine {
    Engine::new(MachineConfig::default(), EngineConfig::default()).unwrap()
}

#[test]
fn small_trace_counts() {
    let r = engine().run(TraceReader::new(Cursor::new(TRACE))).unwrap();
    assert_eq!((r.events, r.instructions, r.switches), (6, 5, 1));
    assert_eq!((r.data_accesses, r.instruction_accesses), (4, 1));
    // thread 1 switched into thread 0's space, so its access shares the page
    assert_eq!(r.walks, 3);
    assert_eq!(r.interplay_count(InterplayCase::HitHit), 2);
    assert_eq!(r.interplay_count(InterplayCase::MissMiss), 2);
}

#[test]
fn malformed_line_reports_position() {
    let text = "A 0 D R 1000\nA 0 Q R 2000\n";
    match engine().run(TraceReader::new(Cursor::new(text))) {
        Err(Error::Trace(TraceError::Parse(e))) => assert_eq!(e.line, 2),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn synthetic_stream_replays_identically_from_text() {
    let cfg = SynthConfig {
        footprint_bytes: 8 << 20,
        inst_ratio: 0.2,
        switch_period: 500,
        threads: 2,
        processes: 3,
        ..SynthConfig::default()
    };
    let events: Vec<_> = SynthGenerator::new(cfg).unwrap().take(5_000).collect();
    let text: String = events.iter().map(|e| format!("{e}\n")).collect();
    let direct = engine().run(events.into_iter().map(Ok)).unwrap();
    let replayed = engine().run(TraceReader::new(Cursor::new(text))).unwrap();
    assert_eq!(direct, replayed);
}

#[test]
fn max_events_truncates() {
    let cfg = EngineConfig {
        max_events: 3,
        ..Default::default()
    };
    let r = Engine::new(MachineConfig::default(), cfg)
        .unwrap()
        .run(TraceReader::new(Cursor::new(TRACE)))
        .unwrap();
    assert_eq!(r.events, 3);
}
