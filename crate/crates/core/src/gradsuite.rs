//! Finite-difference fixtures for every differentiable operation, shared by
//! the gradient tests and the acceptance run.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::budget::{budget_loss, FlopLedger, LedgerMode};
use crate::cpr::{self, route_pyramid, RouteOptions, SpaceKind};
use crate::dacr::{self, dacr_cell, DacrConfig, DacrForce, Exec};
use crate::error::{Result, TprError};
use crate::gate::{GateKind, GateMap};
use crate::gradcheck::{finite_diff_check, GradCheck};
use crate::params::{Init, ParamStore};
use crate::pyramid::{build_pyramid, BackboneConfig, FeaturePyramid, Level, FINEST_STRIDE};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::tracker::{self, assign_log_probs, embed_box, BBox};

/// Single operations.
pub const OP_TOL: f64 = 1e-6;
/// Composed cells.
pub const CELL_TOL: f64 = 1e-5;
pub const EPS: f64 = 1e-5;
pub const SEEDS: u64 = 5;
const SAMPLES: usize = 256;

type Setup = Box<dyn Fn(&mut ParamStore)>;
type Program = Box<dyn Fn(&mut Tape, &ParamStore, u64) -> Result<Var>>;

pub struct Case {
    pub label: &'static str,
    pub tol: f64,
    setup: Setup,
    f: Program,
}

impl Case {
    fn new(
        label: &'static str,
        tol: f64,
        setup: impl Fn(&mut ParamStore) + 'static,
        f: impl Fn(&mut Tape, &ParamStore, u64) -> Result<Var> + 'static,
    ) -> Self {
        Self {
            label,
            tol,
            setup: Box::new(setup),
            f: Box::new(f),
        }
    }

    /// A test point whose relu / gate pre-activations all sit at least
    /// `100 eps` from the kink, drawn by re-seeding the setup.
    pub fn point(&self, seed: u64) -> Result<ParamStore> {
        for attempt in 0..100 {
            let mut store = ParamStore::new(seed * 1000 + attempt);
            (self.setup)(&mut store);
            let mut t = Tape::new();
            (self.f)(&mut t, &store, seed)?;
            if t.kink_margin() >= 100.0 * EPS {
                return Ok(store);
            }
        }
        Err(TprError::Invalid(format!("{}: no non-degenerate point for seed {seed}", self.label)))
    }

    pub fn check(&self, seed: u64) -> Result<GradCheck> {
        let store = self.point(seed)?;
        finite_diff_check(|t, s| (self.f)(t, s, seed), &store, EPS, SAMPLES, seed)
    }
}

fn uniform(store: &mut ParamStore, name: &str, shape: &[usize], scale: f64) {
    store
        .register(name, shape, Init::FanIn { fan_in: 1, gain: scale })
        .expect("fixture parameter names are unique");
}

fn probe(seed: u64, shape: &[usize]) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("shape matches data")
}

/// `<y, r>` with a fixed random `r`, so every output element matters.
fn project(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let r = probe(seed, tape.shape(y));
    let r = tape.constant(r);
    tape.dot(y, r)
}

fn sum_projections(t: &mut Tape, first: Var, rest: &[Var], seed: u64) -> Result<Var> {
    let mut sum = project(t, first, seed)?;
    for (i, &v) in rest.iter().enumerate() {
        let p = project(t, v, seed + 10 * (i as u64 + 1))?;
        sum = t.add(sum, p)?;
    }
    Ok(sum)
}

/// Moves the offset predictor and the deformable kernel off their
/// initial values, so every offset channel carries signal.
fn perturb_alignment(store: &mut ParamStore, prefix: &str, seed: u64) {
    for (i, (part, scale)) in [("offset.w", 0.6), ("deform.w", 0.5)].into_iter().enumerate() {
        let w = store.get_mut(&format!("{prefix}.{part}")).expect("registered by dacr::register");
        let shape = w.shape().to_vec();
        *w = probe(seed + 77 + i as u64, &shape).map(|v| v * scale);
    }
}

fn small_pyramid(tape: &mut Tape, store: &ParamStore) -> Result<FeaturePyramid> {
    let mut levels = Vec::new();
    for l in 0..3 {
        levels.push(Level {
            stride: FINEST_STRIDE << l,
            var: tape.param(store, &format!("p{l}"))?,
        });
    }
    Ok(FeaturePyramid { frame_index: 0, levels })
}

fn conv_case(label: &'static str, stride: usize, pad: usize) -> Case {
    Case::new(
        label,
        OP_TOL,
        |s| {
            uniform(s, "x", &[3, 7, 6], 1.0);
            uniform(s, "w", &[4, 3, 3, 3], 0.5);
            uniform(s, "b", &[4], 0.5);
        },
        move |t, s, seed| {
            let (x, w, b) = (t.param(s, "x")?, t.param(s, "w")?, t.param(s, "b")?);
            let y = t.conv2d(x, w, Some(b), stride, pad, None)?;
            project(t, y, seed)
        },
    )
}

fn dacr_case(label: &'static str, shared: bool) -> Case {
    // offsets, deformable alignment, inner gate, merge, outer gate and the
    // soft budget of both gates, end to end
    let cfg = DacrConfig { shared_cells: shared };
    let cfg2 = cfg.clone();
    Case::new(
        label,
        CELL_TOL,
        move |s| {
            uniform(s, "xq", &[2, 6, 6], 1.0);
            uniform(s, "xr", &[2, 6, 6], 1.0);
            dacr::register(s, "d", 2, &cfg).expect("fresh store");
            perturb_alignment(s, "d", s.seed());
        },
        move |t, s, seed| {
            let (xq, xr) = (t.param(s, "xq")?, t.param(s, "xr")?);
            let mut ledger = FlopLedger::new(LedgerMode::Train);
            let o = dacr_cell(t, s, "d", &cfg2, xq, xr, &mut ledger, 3, DacrForce::default(), Exec::Dense)?;
            let y = project(t, o.y_final, seed)?;
            let b = budget_loss(t, &ledger)?;
            t.add(y, b)
        },
    )
}

pub fn cases() -> Vec<Case> {
    let space = cpr::build_space(SpaceKind::Cpr, 3, &[2, 2, 1]).expect("valid space");
    let space2 = space.clone();
    let backbone = BackboneConfig {
        stem_channels: 4,
        channels: 4,
        levels: 3,
        ..BackboneConfig::default()
    };
    let backbone2 = backbone.clone();
    vec![
        conv_case("conv2d", 1, 1),
        conv_case("conv2d_stride2", 2, 1),
        conv_case("conv2d_valid", 1, 0),
        Case::new(
            "masked_conv2d",
            OP_TOL,
            |s| {
                uniform(s, "x", &[2, 5, 5], 1.0);
                uniform(s, "w", &[3, 2, 3, 3], 0.5);
            },
            |t, s, seed| {
                let (x, w) = (t.param(s, "x")?, t.param(s, "w")?);
                let mask: Vec<bool> = (0..25).map(|i| (i * 7 + seed as usize) % 3 != 0).collect();
                let y = t.conv2d(x, w, None, 1, 1, Some(std::rc::Rc::new(mask)))?;
                project(t, y, seed)
            },
        ),
        Case::new(
            "deform_conv",
            OP_TOL,
            |s| {
                uniform(s, "x", &[2, 6, 6], 1.0);
                // non-integer offsets keep the bilinear weights differentiable
                uniform(s, "off", &[18, 6, 6], 2.3);
                uniform(s, "w", &[3, 2, 3, 3], 0.5);
            },
            |t, s, seed| {
                let (x, off, w) = (t.param(s, "x")?, t.param(s, "off")?, t.param(s, "w")?);
                let y = t.deform_conv(x, off, w)?;
                project(t, y, seed)
            },
        ),
        Case::new(
            "resample_pool",
            OP_TOL,
            |s| uniform(s, "x", &[2, 6, 5], 1.0),
            |t, s, seed| {
                let x = t.param(s, "x")?;
                let a = t.upsample_bilinear(x, 11, 9)?;
                let b = t.upsample_nearest(x, 12, 10)?;
                let c = t.maxpool2d(x, 3, 1, 1)?;
                let d = t.maxpool2d(x, 3, 2, 1)?;
                let e = t.avgpool2(x)?;
                sum_projections(t, a, &[b, c, d, e], seed)
            },
        ),
        Case::new(
            "gate_activations",
            OP_TOL,
            |s| uniform(s, "x", &[1, 5, 5], 2.0),
            |t, s, seed| {
                let x = t.param(s, "x")?;
                let a = t.sigmoid(x);
                let b = t.tanh(x);
                let c = t.gate_act(x);
                let d = t.relu(x);
                sum_projections(t, a, &[b, c, d], seed)
            },
        ),
        Case::new(
            "elementwise_losses",
            OP_TOL,
            |s| {
                uniform(s, "x", &[3, 4, 4], 1.5);
                uniform(s, "g", &[1, 4, 4], 1.0);
                uniform(s, "w", &[5, 3], 1.0);
                uniform(s, "v", &[3], 1.0);
            },
            |t, s, seed| {
                let (x, g, w, v) = (t.param(s, "x")?, t.param(s, "g")?, t.param(s, "w")?, t.param(s, "v")?);
                let xg = t.mul_gate(x, g)?;
                let cat = t.concat_channels(&[x, xg])?;
                let sl = t.slice_channels(cat, 2, 3)?;
                let pooled = t.crop_mean(sl, 1, 3, 0, 4)?;
                let lin = t.linear(pooled, w, None)?;
                let lv = t.linear(v, w, None)?;
                let sm = t.log_softmax(lv);
                let target = probe(seed + 1, &[3, 4, 4]).map(|v| if v > 0.0 { 1.0 } else { 0.0 });
                let weight = probe(seed + 2, &[3, 4, 4]).map(f64::abs);
                let bce = t.bce_with_logits(x, &target, &weight)?;
                let l1 = t.smooth_l1(xg, &probe(seed + 3, &[3, 4, 4]), &weight, 0.3)?;
                let mut sum = project(t, lin, seed)?;
                let p = project(t, sm, seed + 4)?;
                for v in [p, bce, l1] {
                    sum = t.add(sum, v)?;
                }
                Ok(sum)
            },
        ),
        dacr_case("dacr_fusion", false),
        dacr_case("dacr_fusion_shared", true),
        Case::new(
            "cpr_routing",
            CELL_TOL,
            move |s| {
                for (l, hw) in [8usize, 4, 2].into_iter().enumerate() {
                    uniform(s, &format!("p{l}"), &[2, hw, hw], 1.0);
                }
                cpr::register(s, &space, 2, &DacrConfig::default()).expect("fresh store");
            },
            move |t, s, seed| {
                let pyr = small_pyramid(t, s)?;
                let mut ledger = FlopLedger::new(LedgerMode::Train);
                let opts = RouteOptions {
                    exec: Exec::Dense,
                    ..RouteOptions::default()
                };
                let (out, _) = route_pyramid(t, s, &space2, &pyr, &mut ledger, opts)?;
                let mut sum = budget_loss(t, &ledger)?;
                for (i, v) in out.vars().into_iter().enumerate() {
                    let p = project(t, v, seed + i as u64)?;
                    sum = t.add(sum, p)?;
                }
                Ok(sum)
            },
        ),
        Case::new(
            "assignment_softmax",
            OP_TOL,
            |s| {
                uniform(s, "f", &[6], 1.0);
                for k in 0..4 {
                    uniform(s, &format!("m{k}"), &[6], 1.0);
                }
            },
            |t, s, seed| {
                let f = t.param(s, "f")?;
                let mem: Vec<Var> = (0..4).map(|k| t.param(s, &format!("m{k}"))).collect::<Result<_>>()?;
                let lp = assign_log_probs(t, f, &mem)?;
                project(t, lp, seed)
            },
        ),
        Case::new(
            "soft_budget",
            OP_TOL,
            |s| {
                uniform(s, "a", &[1, 5, 4], 1.0);
                uniform(s, "b", &[1, 3, 3], 1.0);
            },
            |t, s, _| {
                let mut ledger = FlopLedger::new(LedgerMode::Train);
                for (name, cost) in [("a", 7.0), ("b", 3.0)] {
                    let x = t.param(s, name)?;
                    let g = t.gate_act(x);
                    let gate = GateMap::new(t, g, GateKind::Path)?;
                    ledger.record(t, &gate, name, name, cost, 3)?;
                }
                budget_loss(t, &ledger)
            },
        ),
        Case::new(
            "box_embedding",
            OP_TOL,
            |s| {
                for (l, hw) in [8usize, 4, 2].into_iter().enumerate() {
                    uniform(s, &format!("p{l}"), &[4, hw, hw], 1.0);
                }
                tracker::register(s, 4).expect("fresh store");
            },
            |t, s, seed| {
                let pyr = small_pyramid(t, s)?;
                let a = embed_box(t, s, &pyr, &BBox { x0: 3.0, y0: 5.0, x1: 17.0, y1: 19.0 })?;
                let b = embed_box(t, s, &pyr, &BBox { x0: 10.0, y0: 0.0, x1: 60.0, y1: 40.0 })?;
                let pa = project(t, a, seed)?;
                let pb = project(t, b, seed + 1)?;
                t.add(pa, pb)
            },
        ),
        Case::new(
            "backbone_pyramid",
            CELL_TOL,
            move |s| {
                uniform(s, "frame", &[3, 32, 32], 1.0);
                backbone.register(s).expect("fresh store");
            },
            move |t, s, seed| {
                let f = t.param(s, "frame")?;
                let pyr = build_pyramid(t, f, 0, &backbone2, s)?;
                let mut sum = t.constant(Tensor::scalar(0.0));
                for (i, v) in pyr.vars().into_iter().enumerate() {
                    let p = project(t, v, seed + i as u64)?;
                    sum = t.add(sum, p)?;
                }
                Ok(sum)
            },
        ),
    ]
}
