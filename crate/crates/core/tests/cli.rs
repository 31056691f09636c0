//! Runner registry, determinism and the command-line contract.

use std::collections::HashSet;
use std::fs;
use std::path::PathBuf;
use std::process::Command;

use gbo_lab::cli_runner::{
    emit_results, parse_config, parse_json_lines, run_experiment, ConfigError, ExperimentId, OutputFormat,
};

fn scratch_dir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("gbo-lab-{tag}-{}", std::process::id()));
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

/// Cheap configuration for every id.
fn quick_config(id: ExperimentId) -> &'static str {
    match id {
        ExperimentId::Solve => "experiment=solve\nalpha=1\nT=0.05\nN=128",
        ExperimentId::Linearized => "experiment=linearized\nalpha=1\nT=0.02\nN=128",
        ExperimentId::Conserve => "experiment=conserve\nalpha=1.5\nT=0.05\nN=128",
        ExperimentId::Scaling => "experiment=scaling\nalpha=2\nT=0.01\nN=128",
        ExperimentId::GaugeKernel => "experiment=gauge-kernel\nalpha=1.5\nk=4\nK_L=0\nN=128",
        ExperimentId::NfCancel => "experiment=nf-cancel\nalpha=1\nk=4\nK_L=0\nN=128",
        ExperimentId::NfResidual => "experiment=nf-residual\nalpha=2\nk=4\nK_L=0\nN=256",
        ExperimentId::Hamilton => "experiment=hamilton\nm=2\nlambda=32\ntau=1",
        ExperimentId::Eikonal => "experiment=eikonal\nm=2\nlambda=64\nK_L=2\nN=128",
        ExperimentId::Fbi => "experiment=fbi\nN=128\nK_L=3",
        ExperimentId::Packet => "experiment=packet\nm=2\nk=4\nK_L=3\nN=1024\nT=0.02",
        ExperimentId::DispersiveDecay => "experiment=dispersive-decay\nm=2\nlambda=16",
        ExperimentId::Strichartz => "experiment=strichartz\nalpha=1.5\nk=4\nK_L=0\nN=128\nT=0.2",
        ExperimentId::Bilinear => "experiment=bilinear\nalpha=2\nlambda=16",
        ExperimentId::Envelope => "experiment=envelope\nK_L=2\nN=1024",
        ExperimentId::LwpConverge => "experiment=lwp-converge\nalpha=1.5\nK_L=2\nN=1024\nT=0.05",
    }
}

#[test]
fn registry_is_complete_and_one_to_one() {
    let ids: HashSet<&str> = ExperimentId::ALL.iter().map(|id| id.as_str()).collect();
    assert_eq!(ids.len(), 16);
    let owners: HashSet<(&str, &str)> = ExperimentId::ALL.iter().map(|id| id.owner()).collect();
    assert_eq!(owners.len(), 16, "two ids share an operation");
    let modules = ["evolution", "gauge", "normal_forms", "wavepacket", "estimates_lab"];
    for id in ExperimentId::ALL {
        assert!(modules.contains(&id.owner().0));
        let cfg = parse_config(quick_config(id)).unwrap_or_else(|e| panic!("{id}: {e}"));
        assert_eq!(cfg.experiment, id);
        let rec = run_experiment(&cfg).unwrap_or_else(|e| panic!("{e}"));
        assert_eq!(rec.experiment, id.as_str());
        assert!(rec.metric("wrap_around").is_some(), "{id} lacks the wrap-around diagnostic");
        assert!(rec.metrics.iter().all(|m| !m.units.is_empty()));
    }
}

#[test]
fn each_required_key_is_enforced() {
    for id in ExperimentId::ALL {
        for key in id.required_keys() {
            let text: String =
                quick_config(id).lines().filter(|l| !l.starts_with(&format!("{key}="))).collect::<Vec<_>>().join("\n");
            assert_eq!(parse_config(&text), Err(ConfigError::MissingKey(key.to_string())), "{id}");
        }
    }
}

#[test]
fn same_seed_gives_identical_bytes() {
    for text in [quick_config(ExperimentId::GaugeKernel), quick_config(ExperimentId::Envelope), quick_config(ExperimentId::Hamilton)] {
        let cfg = parse_config(text).unwrap();
        let (a, b) = (run_experiment(&cfg).unwrap(), run_experiment(&cfg).unwrap());
        for format in [OutputFormat::Csv, OutputFormat::JsonLines] {
            let (da, db) = (scratch_dir("det-a"), scratch_dir("det-b"));
            let fa = emit_results(&a, &da, format).unwrap();
            let fb = emit_results(&b, &db, format).unwrap();
            for (pa, pb) in fa.iter().zip(&fb).filter(|(p, _)| !p.to_string_lossy().ends_with("timing.json")) {
                assert_eq!(fs::read(pa).unwrap(), fs::read(pb).unwrap(), "{}", pa.display());
            }
        }
    }
    let other = parse_config(&format!("{}\nseed=2", quick_config(ExperimentId::Envelope))).unwrap();
    let base = parse_config(quick_config(ExperimentId::Envelope)).unwrap();
    assert_ne!(run_experiment(&other).unwrap().table, run_experiment(&base).unwrap().table);
}

#[test]
fn emitted_json_lines_parse_back() {
    let rec = run_experiment(&parse_config(quick_config(ExperimentId::NfCancel)).unwrap()).unwrap();
    let dir = scratch_dir("jsonl");
    let files = emit_results(&rec, &dir, OutputFormat::JsonLines).unwrap();
    let back = parse_json_lines(&fs::read_to_string(&files[0]).unwrap()).unwrap();
    assert_eq!(back, gbo_lab::cli_runner::ResultRecord { wall_clock: 0.0, ..rec });
}

#[test]
fn csv_tables_are_long_format() {
    let rec = run_experiment(&parse_config(quick_config(ExperimentId::Conserve)).unwrap()).unwrap();
    let dir = scratch_dir("csv");
    emit_results(&rec, &dir, OutputFormat::Csv).unwrap();
    let table = fs::read_to_string(dir.join("conserve.table.csv")).unwrap();
    let body: Vec<&str> = table.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(body[0], "t,mass,energy,sup,l2");
    assert!(body[1..].iter().all(|l| l.split(',').count() == 5));
    assert!(table.contains("# alpha=1.5000000000000000e0"));
}

fn binary() -> Command {
    Command::new(env!("CARGO_BIN_EXE_gbo-lab"))
}

#[test]
fn exit_codes_follow_the_contract() {
    let dir = scratch_dir("exit");
    let good = dir.join("good.cfg");
    fs::write(&good, "[experiment]\nexperiment=fbi\nK_L=3\nN=128\n").unwrap();
    let status = binary().args(["run", good.to_str().unwrap(), "--out", dir.to_str().unwrap(), "--format", "jsonl"]).status().unwrap();
    assert_eq!(status.code(), Some(0));
    assert!(dir.join("fbi.jsonl").exists() && dir.join("fbi.timing.json").exists());

    let bad = dir.join("bad.cfg");
    fs::write(&bad, "experiment=warp\n").unwrap();
    let out = binary().args(["run", bad.to_str().unwrap(), "--out", dir.to_str().unwrap()]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("warp"));

    // Valid configuration whose run fails: the FBI grid needs a period of at least 4π.
    let failing = dir.join("failing.cfg");
    fs::write(&failing, "experiment=fbi\nK_L=0\nN=64\n").unwrap();
    let out = binary().args(["run", failing.to_str().unwrap(), "--out", dir.to_str().unwrap()]).output().unwrap();
    assert_eq!(out.status.code(), Some(3));

    let status = binary()
        .env("GBO_LAB_THREADS", "2")
        .args(["run", good.to_str().unwrap(), "--out", dir.to_str().unwrap()])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
}
