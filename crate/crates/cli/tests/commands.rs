use std::path::Path;
use std::process::{Command, Output};

use tpr_cli::commands::*;
use tpr_cli::resolve;

const BIN: &str = env!("CARGO_BIN_EXE_tpr");

fn tpr(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().unwrap()
}

fn tiny() -> Vec<String> {
    ["protocol.steps=4", "synth.videos=2", "eval.videos=2", "model.backbone.channels=4"]
        .iter()
        .flat_map(|s| ["--set".to_string(), s.to_string()])
        .collect()
}

fn train_run(dir: &Path, seed: &str) -> Output {
    let out = dir.to_str().unwrap();
    let mut args = vec!["train", "--seed", seed, "--out", out];
    let extra = tiny();
    args.extend(extra.iter().map(String::as_str));
    tpr(&args)
}

#[test]
fn missing_config_exits_2_and_names_it() {
    let o = tpr(&["train", "--config", "/no/such/run.toml", "--out", "/tmp/unused"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("/no/such/run.toml"));
    let o = tpr(&["train", "--set", "protocol.bogus=1", "--out", "/tmp/unused"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn train_twice_is_byte_identical() {
    let d = tempfile::tempdir().unwrap();
    let (a, b) = (d.path().join("a"), d.path().join("b"));
    for p in [&a, &b] {
        let o = train_run(p, "7");
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in [CHECKPOINT, METRIC_LOG, RESOLVED_CONFIG] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    assert_eq!(&std::fs::read(a.join(CHECKPOINT)).unwrap()[..4], b"TPR1");
    assert_eq!(std::fs::read_to_string(a.join(METRIC_LOG)).unwrap().lines().count(), 4);
}

#[test]
fn default_config_trains_and_writes_checkpoint() {
    // defaults apart from the step count, which only sets the run time
    let d = tempfile::tempdir().unwrap();
    let out = d.path().join("run");
    let o = tpr(&["train", "--set", "protocol.steps=2", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(&std::fs::read(out.join(CHECKPOINT)).unwrap()[..4], b"TPR1");
    let cfg = tpr_cli::config::load_run(&out).unwrap();
    assert_eq!(cfg, resolve(None, &["protocol.steps=2".into()], None).unwrap());
}

#[test]
fn eval_flops_gates_on_a_run() {
    let d = tempfile::tempdir().unwrap();
    let (run, data, gates) = (d.path().join("run"), d.path().join("data"), d.path().join("gates"));
    assert!(train_run(&run, "1").status.success());
    let cfg = tpr_cli::config::load_run(&run).unwrap();
    cmd_data(&cfg, &data, true).unwrap();

    let oracle = cmd_eval(None, &data, None).unwrap();
    assert_eq!(oracle.all.st_map, 1.0);
    assert_eq!(oracle.all.association_accuracy, 1.0);
    let o = tpr(&["eval", "--oracle", "--data", data.to_str().unwrap()]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stdout).contains("1.0000"));

    let e1 = cmd_eval(Some(&run), &data, None).unwrap();
    let e2 = cmd_eval(Some(&run), &data, None).unwrap();
    assert_eq!(e1, e2);
    assert!((0.0..=1.0).contains(&e1.all.st_map));

    let f = cmd_flops(&run, &data, None).unwrap();
    assert_eq!(f.frames, 2 * cfg.synth.frames);
    assert!(f.report.min <= f.report.avg && f.report.avg <= f.report.max);
    assert!(f.gates.iter().all(|g| g.b <= g.c));

    let written = cmd_gates(&run, &data, 1, 2, &gates).unwrap();
    let shapes = cfg.model.backbone.level_shapes(cfg.synth.height, cfg.synth.width);
    for (l, &(h, w)) in shapes.iter().enumerate() {
        for kind in ["inner", "outer"] {
            let p = gates.join(format!("dacr.{l}.{kind}.pgm"));
            assert!(written.contains(&p), "{}", p.display());
            let bytes = std::fs::read(&p).unwrap();
            let header = format!("P5\n{w} {h}\n255\n");
            assert!(bytes.starts_with(header.as_bytes()));
            assert_eq!(bytes.len(), header.len() + h * w);
        }
    }
}

#[test]
fn checkpoint_config_mismatch_is_descriptive() {
    let d = tempfile::tempdir().unwrap();
    let (run, data) = (d.path().join("run"), d.path().join("data"));
    assert!(train_run(&run, "1").status.success());
    let cfg = tpr_cli::config::load_run(&run).unwrap();
    cmd_data(&cfg, &data, true).unwrap();
    let text = std::fs::read_to_string(run.join(RESOLVED_CONFIG)).unwrap();
    let eval = |text: String| {
        std::fs::write(run.join(RESOLVED_CONFIG), text).unwrap();
        tpr(&["eval", "--run", run.to_str().unwrap(), "--data", data.to_str().unwrap()])
    };
    let o = eval(text.replace("channels = 4", "channels = 8"));
    assert_eq!(o.status.code(), Some(3));
    let msg = String::from_utf8_lossy(&o.stderr).to_string();
    assert!(msg.contains("model.tpr") && msg.contains("shape"), "{msg}");
    let o = eval(text.replace("levels = 4", "levels = 3").replace("depths = [3, 2, 1, 1]", "depths = [2, 1, 1]"));
    assert_eq!(o.status.code(), Some(3));
    let msg = String::from_utf8_lossy(&o.stderr).to_string();
    assert!(msg.contains("unknown to this model"), "{msg}");
}

#[test]
fn ablate_static_costs() {
    let cfg = resolve(None, &[], None).unwrap();
    let rows = cmd_ablate(&cfg, &tpr_core::cpr::SpaceKind::ALL, true).unwrap();
    let names: Vec<_> = rows.iter().map(|r| r.space.name()).collect();
    assert_eq!(names, ["cpr", "full_routing", "full_align", "top_down"]);
    assert!(rows.iter().all(|r| r.eval.is_none() && r.static_macs > 0));
    let d = tempfile::tempdir().unwrap();
    let json = d.path().join("ablate.json");
    let o = tpr(&["ablate", "--static-only", "--spaces", "cpr,full_align", "--json", json.to_str().unwrap()]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(json).unwrap()).unwrap();
    assert_eq!(v[1]["space"], "full_align");
    assert_eq!(v[0]["static_macs"], rows[0].static_macs);
}
