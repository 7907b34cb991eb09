//! Finite-difference checks of every differentiable operation, 5 seeds each.

use tpr_core::budget::{budget_loss, FlopLedger, LedgerMode};
use tpr_core::gate::{GateKind, GateMap};
use tpr_core::gradsuite::{cases, EPS, SEEDS};
use tpr_core::{Init, ParamStore, Result, Tape, Var};

fn check(prefix: &str) {
    let picked: Vec<_> = cases().into_iter().filter(|c| c.label.starts_with(prefix)).collect();
    assert!(!picked.is_empty(), "no case {prefix}");
    for case in picked {
        for seed in 0..SEEDS {
            let r = case.check(seed).unwrap();
            assert!(
                r.max_rel_err < case.tol,
                "{} seed {seed}: max relative error {:e} at {:?}",
                case.label,
                r.max_rel_err,
                r.worst
            );
        }
    }
}

#[test]
fn conv2d() {
    check("conv2d");
}

#[test]
fn masked_conv2d() {
    check("masked_conv2d");
}

#[test]
fn deformable_sampling() {
    check("deform_conv");
}

#[test]
fn resampling_and_pooling() {
    check("resample_pool");
}

#[test]
fn gate_activations() {
    check("gate_activations");
}

#[test]
fn elementwise_and_losses() {
    check("elementwise_losses");
}

#[test]
fn dacr_fusion() {
    check("dacr_fusion");
}

#[test]
fn cross_pyramid_routing() {
    check("cpr_routing");
}

#[test]
fn assignment_softmax() {
    check("assignment_softmax");
}

#[test]
fn soft_budget() {
    check("soft_budget");
}

#[test]
fn box_embedding() {
    check("box_embedding");
}

#[test]
fn backbone_pyramid() {
    check("backbone_pyramid");
}

/// Opening a gate can only raise the budget: at positive-gate points the
/// derivative of the loss with respect to each pre-activation is >= 0.
#[test]
fn budget_gradient_sign() {
    for seed in 0..SEEDS {
        let mut s = ParamStore::new(seed);
        s.register("a", &[1, 6, 6], Init::FanIn { fan_in: 1, gain: 1.0 }).unwrap();
        let f = |t: &mut Tape, s: &ParamStore| -> Result<Var> {
            let x = t.param(s, "a")?;
            let g = t.gate_act(x);
            let gate = GateMap::new(t, g, GateKind::Inner)?;
            let mut ledger = FlopLedger::new(LedgerMode::Train);
            ledger.record(t, &gate, "a", "a", 5.0, 3)?;
            budget_loss(t, &ledger)
        };
        let base = s.get("a").unwrap().clone();
        for i in 0..base.len() {
            if base.data()[i] <= 100.0 * EPS {
                continue;
            }
            let at = |d: f64| {
                let mut p = s.clone();
                p.get_mut("a").unwrap().data_mut()[i] += d;
                let mut t = Tape::no_grad();
                let v = f(&mut t, &p).unwrap();
                t.value(v).item()
            };
            let slope = (at(EPS) - at(-EPS)) / (2.0 * EPS);
            assert!(slope >= 0.0, "seed {seed} index {i}: slope {slope}");
        }
        s.zero_grad();
        let mut t = Tape::new();
        let v = f(&mut t, &s).unwrap();
        t.backward(v, Some(&mut s)).unwrap();
        assert!(s.grad("a").unwrap().data().iter().all(|&g| g >= 0.0));
    }
}
