use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn mmu_sim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mmu-sim"))
        .args(args)
        .env_remove("MMU_SIM_SEED")
        .output()
        .expect("spawn mmu-sim")
}

fn summary_value(dir: &Path, key: &str) -> String {
    let text = fs::read_to_string(dir.join("summary.txt")).unwrap();
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{key} = ")))
        .unwrap_or_else(|| panic!("{key} missing"))
        .to_string()
}

#[test]
fn synthetic_run_writes_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let o = mmu_sim(&["--max-events", "20000", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["summary.txt", "histogram.csv", "locality.csv"] {
        assert!(out.join(f).exists());
    }
    assert_eq!(String::from_utf8_lossy(&o.stdout).lines().count(), 3);
    assert_eq!(summary_value(&out, "events"), "20000");
    let hist = fs::read_to_string(out.join("histogram.csv")).unwrap();
    assert!(hist.starts_with("bucket_low,bucket_high,count\n"));
    let walks: u64 = summary_value(&out, "walks").parse().unwrap();
    let total: u64 = hist.lines().skip(1).map(|l| l.rsplit(',').next().unwrap().parse::<u64>().unwrap()).sum();
    assert_eq!(walks, total);
}

#[test]
fn trace_run_and_ideal_flag() {
    let tmp = tempfile::tempdir().unwrap();
    let trace = tmp.path().join("t.trace");
    fs::write(&trace, "A 0 D R 1000\nA 0 D R 2000\nA 0 D R 1008\n").unwrap();
    let out = tmp.path().join("o");
    let o = mmu_sim(&["--trace", trace.to_str().unwrap(), "--ideal-tlb", "--out", out.to_str().unwrap()]);
    assert!(o.status.success());
    assert_eq!(summary_value(&out, "walks"), "0");
    assert_eq!(summary_value(&out, "ideal_tlb"), "true");
}

#[test]
fn flags_override_config_file() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("exp.cfg");
    fs::write(&cfg, "engine.max_events = 5000\nengine.seed = 3\nsynth.footprint = 4MiB\n").unwrap();
    let out = tmp.path().join("o");
    let o = mmu_sim(&[
        "--config",
        cfg.to_str().unwrap(),
        "--max-events",
        "700",
        "--seed",
        "9",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success());
    assert_eq!(summary_value(&out, "events"), "700");
    assert_eq!(summary_value(&out, "config.engine.seed"), "9");
    assert_eq!(summary_value(&out, "config.synth.footprint"), "4MiB");
}

#[test]
fn seed_from_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    let o = Command::new(env!("CARGO_BIN_EXE_mmu-sim"))
        .args(["--max-events", "10", "--out", out.to_str().unwrap()])
        .env("MMU_SIM_SEED", "1234")
        .output()
        .unwrap();
    assert!(o.status.success());
    assert_eq!(summary_value(&out, "config.engine.seed"), "1234");
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let bad_cfg = tmp.path().join("bad.cfg");
    fs::write(&bad_cfg, "cache.l4.size = 96MiB\n").unwrap();
    let out = tmp.path().join("o");
    let o = mmu_sim(&["--config", bad_cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));

    let conflict = tmp.path().join("conflict.cfg");
    fs::write(&conflict, "workload.trace = x\nsynth.footprint = 1MiB\n").unwrap();
    let o = mmu_sim(&["--config", conflict.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("workload.trace"));

    let trace = tmp.path().join("bad.trace");
    fs::write(&trace, "A 0 D R 1000\nnonsense\n").unwrap();
    let o = mmu_sim(&["--trace", trace.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 2"));

    let missing = tmp.path().join("missing.trace");
    let o = mmu_sim(&["--trace", missing.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));

    let o = mmu_sim(&["--config", missing.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn sweep_is_deterministic_across_job_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("sweep.cfg");
    fs::write(
        &cfg,
        "engine.max_events = 4000\nsweep.l4_sizes = 64MiB,128MiB\nsynth.locality = zipf:0.9\n",
    )
    .unwrap();
    let run = |jobs: &str, name: &str| {
        let out = tmp.path().join(name);
        let o = mmu_sim(&[
            "--config",
            cfg.to_str().unwrap(),
            "--sweep",
            "--jobs",
            jobs,
            "--seed",
            "5",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        fs::read(out.join("sweep.csv")).unwrap()
    };
    let a = run("1", "a");
    let b = run("4", "b");
    assert_eq!(a, b);
    let text = String::from_utf8(a).unwrap();
    assert!(text.starts_with("l4_size,l4_block,ideal_tlb,"));
    assert_eq!(text.lines().count(), 1 + 2 * 2 * 2);
    assert!(tmp.path().join("a/l4_64MiB_b512_ideal/summary.txt").exists());
}
