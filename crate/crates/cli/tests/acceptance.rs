//! One PASS/FAIL line per acceptance criterion, at the stated tolerances.
//! Criterion 5 is known red; see the README.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tpr_cli::commands::{cmd_train, CHECKPOINT, METRIC_LOG, RESOLVED_CONFIG};
use tpr_cli::resolve;
use tpr_core::budget::{budget_loss, flops_report, FlopLedger, FrameCost, LedgerMode};
use tpr_core::cpr::{self, build_space, cell_forward, route_pyramid, static_cost, RouteOptions, SpaceKind};
use tpr_core::dacr::{self, dacr_cell, dacr_forward, DacrConfig, DacrForce, Exec};
use tpr_core::gate::{GateKind, GateMap};
use tpr_core::gradsuite::{cases, SEEDS};
use tpr_core::pyramid::{BackboneConfig, FeaturePyramid};
use tpr_core::tracker::{assign_probs_from_logits, TrackMemory};
use tpr_core::{ParamStore, Tape, Tensor};
use tpr_synthlab::data::{mask_bbox, InstanceGt};
use tpr_synthlab::metrics::oracle_predictions;
use tpr_synthlab::*;

/// Criteria whose failure is analysed rather than fatal.
const KNOWN_RED: &[usize] = &[5];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

fn scramble(store: &mut ParamStore, rng: &mut ChaCha8Rng, scale: f64) {
    let names: Vec<String> = store.names().map(str::to_owned).collect();
    for n in names {
        let shape = store.get(&n).unwrap().shape().to_vec();
        store.set(&n, random(rng, &shape, scale)).unwrap();
    }
}

fn gradient_integrity() -> Outcome {
    let t0 = Instant::now();
    let mut worst = (0.0f64, "");
    let mut failures = Vec::new();
    for case in cases() {
        for seed in 0..SEEDS {
            match case.check(seed) {
                Ok(r) => {
                    if r.max_rel_err > worst.0 {
                        worst = (r.max_rel_err, case.label);
                    }
                    if r.max_rel_err >= 1e-5 {
                        failures.push(format!("{} seed {seed}: {:e}", case.label, r.max_rel_err));
                    }
                }
                Err(e) => failures.push(format!("{} seed {seed}: {e}", case.label)),
            }
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    let pass = failures.is_empty() && secs < 60.0;
    outcome(
        pass,
        format!(
            "{} cases x {SEEDS} seeds, worst rel err {:.2e} ({}), {secs:.1}s{}",
            cases().len(),
            worst.0,
            worst.1,
            if failures.is_empty() { String::new() } else { format!("; failed: {}", failures.join(", ")) }
        ),
    )
}

fn sparse_dense() -> Outcome {
    let mut worst = 0.0f64;
    let shapes = [(8, 8), (4, 4), (2, 2), (1, 1)];
    let space = build_space(SpaceKind::Cpr, 4, &[3, 2, 1, 1]).unwrap();
    let mut cells = 0;
    for fixture in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(fixture);
        let c = rng.gen_range(2..5);
        let (h, w) = (rng.gen_range(2..9), rng.gen_range(2..9));
        let cfg = DacrConfig { shared_cells: fixture % 2 == 1 };
        let mut s = ParamStore::new(fixture);
        dacr::register(&mut s, "d", c, &cfg).unwrap();
        scramble(&mut s, &mut rng, 0.6);
        let (xq, xr) = (random(&mut rng, &[c, h, w], 1.0), random(&mut rng, &[c, h, w], 1.0));
        let run = |exec| {
            let mut t = Tape::no_grad();
            let (q, r) = (t.constant(xq.clone()), t.constant(xr.clone()));
            let mut ledger = FlopLedger::new(LedgerMode::Infer);
            let o = dacr_cell(&mut t, &s, "d", &cfg, q, r, &mut ledger, 3, DacrForce::default(), exec).unwrap();
            [t.value(o.y_merge).clone(), t.value(o.y_final).clone()]
        };
        for (a, b) in run(Exec::Sparse).iter().zip(&run(Exec::Dense)) {
            worst = worst.max(a.max_abs_diff(b));
        }
        cells += 1;

        let mut s = ParamStore::new(fixture);
        cpr::register(&mut s, &space, c, &DacrConfig::default()).unwrap();
        scramble(&mut s, &mut rng, 0.5);
        for node in &space.nodes {
            let (h, w) = shapes[node.level];
            let x = random(&mut rng, &[c, h, w], 1.0);
            let run = |exec| {
                let mut t = Tape::no_grad();
                let xv = t.constant(x.clone());
                let mut ledger = FlopLedger::new(LedgerMode::Infer);
                let o = cell_forward(&mut t, &s, node, xv, &shapes, &mut ledger, 3, None, exec).unwrap();
                o.transfers.iter().map(|&(_, _, v)| t.value(v).clone()).collect::<Vec<_>>()
            };
            for (a, b) in run(Exec::Sparse).iter().zip(&run(Exec::Dense)) {
                worst = worst.max(a.max_abs_diff(b));
            }
            cells += 1;
        }
    }
    outcome(worst < 1e-10, format!("100 fixtures, {cells} cells, max |sparse - dense| {worst:.2e}"))
}

fn assignment_contract() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0f64;
    for draw in 0..1000 {
        let k = rng.gen_range(0..=16);
        let d = rng.gen_range(1..=64);
        let logits: Vec<f64> = if draw % 2 == 0 {
            // extreme logits, including the +/-500 endpoints
            (0..k).map(|i| if i % 3 == 0 { 500.0 * if rng.gen_bool(0.5) { 1.0 } else { -1.0 } } else { rng.gen_range(-500.0..500.0) }).collect()
        } else {
            let mut mem = TrackMemory::new(d);
            for _ in 0..k {
                mem.insert((0..d).map(|_| rng.gen_range(-3.0..3.0)).collect(), 0).unwrap();
            }
            let f: Vec<f64> = (0..d).map(|_| rng.gen_range(-3.0..3.0)).collect();
            mem.logits(&f).unwrap()
        };
        let p = assign_probs_from_logits(&logits);
        let err = if p.iter().all(|v| v.is_finite()) { (p.iter().sum::<f64>() - 1.0).abs() } else { f64::INFINITY };
        worst = worst.max(err);
    }
    let empty = assign_probs_from_logits(&[]) == vec![1.0];
    let p = assign_probs_from_logits(&[3f64.ln()]);
    let ln3 = (p[0] - 0.25).abs().max((p[1] - 0.75).abs());
    outcome(
        worst < 1e-9 && empty && ln3 < 1e-12,
        format!("1000 draws max |sum - 1| {worst:.1e}; K=0 -> [1.0]: {empty}; ln 3 fixture err {ln3:.1e}"),
    )
}

fn budget_of(gates: &[(Vec<f64>, usize, usize)], mode: LedgerMode) -> f64 {
    let mut t = Tape::new();
    let mut ledger = FlopLedger::new(mode);
    for (i, (vals, h, w)) in gates.iter().enumerate() {
        let g = t.leaf(Tensor::new(vec![1, *h, *w], vals.clone()).unwrap(), true);
        let gate = GateMap::new(&t, g, GateKind::Inner).unwrap();
        ledger.record(&mut t, &gate, format!("g{i}"), format!("l{i}"), 1.0 + i as f64, 3).unwrap();
    }
    let v = budget_loss(&mut t, &ledger).unwrap();
    t.value(v).item()
}

fn budget_contract() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut in_range = true;
    for _ in 0..500 {
        let layers = rng.gen_range(1..4);
        let gates: Vec<_> = (0..layers)
            .map(|_| {
                let (h, w) = (rng.gen_range(1..7), rng.gen_range(1..7));
                let vals = (0..h * w).map(|_| rng.gen_range(-1.0f64..1.0).max(0.0)).collect();
                (vals, h, w)
            })
            .collect();
        for mode in [LedgerMode::Train, LedgerMode::Infer] {
            in_range &= (0.0..=1.0).contains(&budget_of(&gates, mode));
        }
    }
    let closed = [(vec![0.0; 16], 4, 4), (vec![0.0; 9], 3, 3)];
    let closed_zero = budget_of(&closed, LedgerMode::Train) == 0.0 && budget_of(&closed, LedgerMode::Infer) == 0.0;
    let open_one = budget_of(&[(vec![0.3; 16], 4, 4), (vec![0.9; 9], 3, 3)], LedgerMode::Infer) == 1.0;
    // two unit-cost 4x4 layers, one interior pixel open: B = 9, C = 32
    let mut t = Tape::new();
    let mut ledger = FlopLedger::new(LedgerMode::Infer);
    let mut one = vec![0.0; 16];
    one[5] = 0.7;
    for (i, v) in [one, vec![0.0; 16]].into_iter().enumerate() {
        let g = t.leaf(Tensor::new(vec![1, 4, 4], v).unwrap(), true);
        let gate = GateMap::new(&t, g, GateKind::Inner).unwrap();
        ledger.record(&mut t, &gate, format!("g{i}"), "l", 1.0, 3).unwrap();
    }
    let l = budget_loss(&mut t, &ledger).unwrap();
    let fixture = t.value(l).item();
    outcome(
        in_range && closed_zero && open_one && fixture == 9.0 / 32.0,
        format!("1000 random ledgers in [0,1]: {in_range}; closed = 0: {closed_zero}; open hard = 1: {open_one}; fixture {fixture} (9/32)"),
    )
}

fn cost_ordering() -> Outcome {
    let b = BackboneConfig::default();
    let shapes = b.level_shapes(96, 96);
    let cost = |kind, depths: &[usize]| static_cost(&build_space(kind, b.levels, depths).unwrap(), &shapes, b.channels);
    let cpr = cost(SpaceKind::Cpr, &[3, 2, 1, 1]);
    let align = cost(SpaceKind::FullAlign, &[3, 2, 1, 1]);
    let routing = cost(SpaceKind::FullRouting, &[3, 3, 3, 3]);
    outcome(
        cpr < align && align < routing,
        format!("cpr {cpr}, full_align {align}, full_routing {routing} (needs cpr < full_align < full_routing)"),
    )
}

struct Bench {
    train: Vec<Clip>,
    eval: Vec<Clip>,
}

fn bench() -> Bench {
    let cfg = SynthConfig { videos: 200, overlap_bias: 0.9, seed: 10, ..SynthConfig::default() };
    Bench {
        train: gen_dataset(&cfg).unwrap(),
        eval: gen_dataset(&SynthConfig { videos: 50, seed: 11, ..cfg }).unwrap(),
    }
}

fn train_eval(b: &Bench, temporal: bool, lambda_budget: f64, seed: u64) -> EvalReport {
    let mut model = Model::new(ModelConfig { temporal, ..ModelConfig::default() }, seed).unwrap();
    let mut protocol = TrainProtocol::default();
    protocol.loss.lambda_budget = lambda_budget;
    train(&mut model, &protocol, &b.train, seed, |_| {}).unwrap();
    evaluate_model(&model, &b.eval, InferOptions::default()).unwrap()
}

const SEEDS3: [u64; 3] = [0, 1, 2];

fn temporal_benefit(b: &Bench, tpr: &[EvalReport]) -> Outcome {
    let t0 = Instant::now();
    let base: Vec<EvalReport> = SEEDS3.iter().map(|&s| train_eval(b, false, 0.0, s)).collect();
    let med = |r: &[EvalReport], f: fn(&EvalReport) -> f64| median(r.iter().map(f).collect());
    let (tm, bm) = (med(tpr, |r| r.all.st_map), med(&base, |r| r.all.st_map));
    let (ta, ba) = (med(tpr, |r| r.all.association_accuracy), med(&base, |r| r.all.association_accuracy));
    let (to, bo) = (med(tpr, |r| r.overlap.association_accuracy), med(&base, |r| r.overlap.association_accuracy));
    outcome(
        tm >= bm && ta >= ba && to > bo,
        format!(
            "median st_mAP {tm:.4} vs baseline {bm:.4}; assoc acc {ta:.4} vs {ba:.4}; overlap subset ({} clips) assoc acc {to:.4} vs {bo:.4}; baseline runs {:.0}s",
            tpr[0].overlap_clips,
            t0.elapsed().as_secs_f64()
        ),
    )
}

fn budget_tradeoff(b: &Bench, at_default: &[EvalReport]) -> Outcome {
    let mut medians = Vec::new();
    for lambda in [0.5, 1.5, 4.5] {
        let avg: Vec<f64> = if lambda == TrainProtocol::default().loss.lambda_budget {
            at_default.iter().map(|r| r.flops.avg).collect()
        } else {
            SEEDS3.iter().map(|&s| train_eval(b, true, lambda, s).flops.avg).collect()
        };
        medians.push((lambda, median(avg)));
    }
    let pass = medians.windows(2).all(|w| w[1].1 <= w[0].1);
    let list: Vec<String> = medians.iter().map(|(l, m)| format!("lambda2 {l}: {:.0}", m)).collect();
    outcome(pass, format!("median avg MACs/frame {}", list.join(", ")))
}

fn closed_identity() -> Outcome {
    let shapes = [(12, 12), (6, 6), (3, 3), (2, 2)];
    let c = 4;
    let mut ok = true;
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let levels: Vec<Tensor> = shapes.iter().map(|&(h, w)| random(&mut rng, &[c, h, w], 1.0)).collect();
        let reference: Vec<Tensor> = shapes.iter().map(|&(h, w)| random(&mut rng, &[c, h, w], 1.0)).collect();
        for kind in [SpaceKind::Cpr, SpaceKind::FullRouting, SpaceKind::TopDown] {
            let space = build_space(kind, 4, &[3, 2, 1, 1]).unwrap();
            let mut s = ParamStore::new(seed);
            cpr::register(&mut s, &space, c, &DacrConfig::default()).unwrap();
            scramble(&mut s, &mut rng, 0.5);
            // zero gates from the parameters themselves, and forced
            let closed = {
                let mut s = s.clone();
                for n in &space.nodes {
                    let k = n.dirs.len();
                    s.set(&format!("{}.gate.w", n.prefix()), Tensor::zeros(&[k, c, 3, 3])).unwrap();
                    s.set(&format!("{}.gate.b", n.prefix()), Tensor::full(&[k], -1.0)).unwrap();
                }
                s
            };
            for (store, force) in [(&closed, None), (&s, Some(0.0))] {
                let mut t = Tape::no_grad();
                let p = FeaturePyramid::from_tensors(&mut t, 0, &levels);
                let mut ledger = FlopLedger::new(LedgerMode::Infer);
                let opts = RouteOptions { force, ..RouteOptions::default() };
                let (out, _) = route_pyramid(&mut t, store, &space, &p, &mut ledger, opts).unwrap();
                ok &= out.to_tensors(&t) == levels && ledger.total_b() == 0.0;
            }
        }
        let mut s = ParamStore::new(seed);
        for l in 0..4 {
            dacr::register(&mut s, &dacr::level_prefix(l), c, &DacrConfig::default()).unwrap();
        }
        scramble(&mut s, &mut rng, 0.5);
        let mut t = Tape::no_grad();
        let q = FeaturePyramid::from_tensors(&mut t, 1, &levels);
        let r = FeaturePyramid::from_tensors(&mut t, 0, &reference);
        let mut ledger = FlopLedger::new(LedgerMode::Infer);
        let cfg = DacrConfig::default();
        let (out, _) = dacr_forward(&mut t, &s, &cfg, &q, &r, &mut ledger, 3, DacrForce::BYPASS, Exec::Sparse).unwrap();
        ok &= out.to_tensors(&t) == levels && ledger.total_b() == 0.0;
    }
    outcome(ok, "5 seeds: closed route_pyramid (cpr, full_routing, top_down) and DACR bypass return the query pyramid bit-exactly, zero executed gated MACs")
}

fn determinism(costs: &[Vec<FrameCost>]) -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let overrides: Vec<String> = ["protocol.steps=20", "synth.videos=4", "model.backbone.channels=8"].map(String::from).to_vec();
    let cfg = resolve(None, &overrides, Some(7)).unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    cmd_train(&cfg, &a).unwrap();
    cmd_train(&cfg, &b).unwrap();
    let same_files = [CHECKPOINT, METRIC_LOG, RESOLVED_CONFIG]
        .iter()
        .all(|f| std::fs::read(a.join(f)).unwrap() == std::fs::read(b.join(f)).unwrap());
    let base = flops_report(costs).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut shuffled = costs.to_vec();
    let mut invariant = true;
    for _ in 0..10 {
        shuffled.shuffle(&mut rng);
        invariant &= flops_report(&shuffled).unwrap() == base;
    }
    outcome(
        same_files && invariant,
        format!("train --seed 7 twice byte-identical (checkpoint, log, config): {same_files}; flops_report over {} clips invariant to 10 shuffles: {invariant}", costs.len()),
    )
}

fn tube_fixture() -> Outcome {
    let (h, w) = (16, 16);
    let strip = |y: usize, len: usize| {
        let mut m = vec![false; h * w];
        for x in 2..2 + len {
            m[y * w + x] = true;
        }
        m
    };
    let gt = ClipGroundTruth {
        height: h,
        width: w,
        frames: (0..8)
            .map(|t| {
                let mask = strip(t, 10);
                vec![InstanceGt { id: 1, class: 0, bbox: mask_bbox(&mask, h, w).unwrap(), mask }]
            })
            .collect(),
    };
    let mut p = oracle_predictions(&gt);
    for (t, f) in p.frames.iter_mut().enumerate() {
        f.instances[0].mask = strip(t, 6);
    }
    let ap = evaluate(&[p], &[gt]).st_map;
    outcome(ap == 0.3, format!("per-frame IoU 6/10 over 8 frames -> AP {ap} (expected exactly 3/10)"))
}

fn main() {
    let t0 = Instant::now();
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut report = |id: usize, name: &'static str, o: Outcome| {
        let tag = match (o.pass, KNOWN_RED.contains(&id)) {
            (true, _) => "PASS",
            (false, false) => "FAIL",
            (false, true) => "FAIL (known red)",
        };
        println!("{tag} {id:>2} {name}: {}", o.detail);
        results.push((id, name, o));
    };
    report(1, "gradient integrity", gradient_integrity());
    report(2, "sparse/dense equivalence", sparse_dense());
    report(3, "assignment probabilities", assignment_contract());
    report(4, "budget ratio", budget_contract());
    report(5, "routing-space cost ordering", cost_ordering());

    let t6 = Instant::now();
    let b = bench();
    let tpr: Vec<EvalReport> = SEEDS3
        .iter()
        .map(|&s| train_eval(&b, true, TrainProtocol::default().loss.lambda_budget, s))
        .collect();
    eprintln!("  TPR runs took {:.0}s", t6.elapsed().as_secs_f64());
    report(6, "temporal benefit at desk scale", temporal_benefit(&b, &tpr));
    report(7, "budget trade-off", budget_tradeoff(&b, &tpr));
    report(8, "closed-space identity and bypass", closed_identity());

    let model = {
        let mut m = Model::new(ModelConfig::default(), 0).unwrap();
        let p = TrainProtocol { steps: 50, ..TrainProtocol::default() };
        train(&mut m, &p, &b.train[..20], 0, |_| {}).unwrap();
        m
    };
    let costs: Vec<Vec<FrameCost>> = b.eval[..12]
        .iter()
        .map(|c| infer_clip(&model, &c.frames, InferOptions::default()).unwrap().frames.iter().map(|f| f.cost).collect())
        .collect();
    report(9, "determinism", determinism(&costs));
    report(10, "tube-IoU metric fixture", tube_fixture());

    let unexpected: Vec<usize> = results.iter().filter(|(id, _, o)| !o.pass && !KNOWN_RED.contains(id)).map(|r| r.0).collect();
    let passed = results.iter().filter(|r| r.2.pass).count();
    println!("acceptance: {passed}/{} PASS in {:.0}s", results.len(), t0.elapsed().as_secs_f64());
    if !unexpected.is_empty() {
        println!("unexpected FAIL: {unexpected:?}");
        std::process::exit(1);
    }
}
