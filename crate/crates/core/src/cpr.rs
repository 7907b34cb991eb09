//! Cross-scale routing spaces over a feature pyramid.
//!
//! Nodes sit on a (level, stage) grid. Level `i` with depth `d_i` owns the
//! last `d_i` of `max(d)` stages, so with depths `[3, 2, 1, 1]` the finest
//! level runs three stages and the coarse levels join at the end. Each
//! non-terminal node sends gated transfers to stage `t + 1` at the finer
//! level (`Down`), the same level (`Keep`) and the coarser level (`Up`) when
//! those nodes exist; a terminal node keeps a single `Keep` gate that forms
//! the level's output.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::budget::FlopLedger;
use crate::dacr::{self, DacrConfig, DacrForce, Exec, GATE_BIAS_INIT};
use crate::error::{Result, TprError};
use crate::gate::{union_mask, GateKind, GateMap};
use crate::params::{Init, ParamStore};
use crate::pyramid::{resize_to_level, FeaturePyramid};
use crate::tape::{Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpaceKind {
    Cpr,
    FullRouting,
    FullAlign,
    TopDown,
}

impl SpaceKind {
    pub const ALL: [SpaceKind; 4] = [SpaceKind::Cpr, SpaceKind::FullRouting, SpaceKind::FullAlign, SpaceKind::TopDown];

    pub fn name(self) -> &'static str {
        match self {
            SpaceKind::Cpr => "cpr",
            SpaceKind::FullRouting => "full_routing",
            SpaceKind::FullAlign => "full_align",
            SpaceKind::TopDown => "top_down",
        }
    }
}

impl std::str::FromStr for SpaceKind {
    type Err = TprError;

    fn from_str(s: &str) -> Result<Self> {
        SpaceKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| TprError::Invalid(format!("unknown routing space '{s}'")))
    }
}

/// Transfer direction; `Up` goes to the next coarser level.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dir {
    Down,
    Keep,
    Up,
}

impl Dir {
    pub fn target(self, level: usize) -> Option<usize> {
        match self {
            Dir::Down => level.checked_sub(1),
            Dir::Keep => Some(level),
            Dir::Up => Some(level + 1),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellNode {
    pub level: usize,
    /// 1-based routing stage.
    pub stage: usize,
    pub dirs: Vec<Dir>,
    pub terminal: bool,
}

impl CellNode {
    pub fn prefix(&self) -> String {
        format!("cpr.{}.{}", self.level, self.stage)
    }
}

/// One reference-level to query-level alignment of the `full_align` space.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignPair {
    pub reference: usize,
    pub query: usize,
}

impl AlignPair {
    pub fn prefix(&self) -> String {
        format!("align.{}.{}", self.reference, self.query)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoutingSpace {
    pub kind: SpaceKind,
    /// Depths as configured (before mirroring or flattening).
    pub depths: Vec<usize>,
    pub nodes: Vec<CellNode>,
    pub pairs: Vec<AlignPair>,
}

pub fn build_space(kind: SpaceKind, levels: usize, depths: &[usize]) -> Result<RoutingSpace> {
    if depths.len() != levels {
        return Err(TprError::Invalid(format!(
            "depth list has {} entries for {levels} levels",
            depths.len()
        )));
    }
    if depths.iter().any(|&d| d == 0) {
        return Err(TprError::Invalid(format!("depths must be >= 1, got {depths:?}")));
    }
    if matches!(kind, SpaceKind::Cpr | SpaceKind::TopDown) && depths.windows(2).any(|w| w[1] > w[0]) {
        return Err(TprError::Invalid(format!("depths must be non-increasing, got {depths:?}")));
    }
    let maxd = depths.iter().copied().max().unwrap_or(0);
    let effective: Vec<usize> = match kind {
        SpaceKind::Cpr => depths.to_vec(),
        SpaceKind::FullRouting => vec![maxd; levels],
        SpaceKind::TopDown => depths.iter().rev().copied().collect(),
        SpaceKind::FullAlign => {
            let pairs = (0..levels)
                .flat_map(|q| (0..levels).map(move |r| AlignPair { reference: r, query: q }))
                .collect();
            return Ok(RoutingSpace {
                kind,
                depths: depths.to_vec(),
                nodes: Vec::new(),
                pairs,
            });
        }
    };
    let exists = |level: usize, stage: usize| level < levels && stage > maxd - effective[level] && stage <= maxd;
    let mut nodes = Vec::new();
    for stage in 1..=maxd {
        for level in 0..levels {
            if !exists(level, stage) {
                continue;
            }
            let terminal = stage == maxd;
            let dirs = if terminal {
                vec![Dir::Keep]
            } else {
                [Dir::Down, Dir::Keep, Dir::Up]
                    .into_iter()
                    .filter(|d| d.target(level).is_some_and(|t| exists(t, stage + 1)))
                    .collect()
            };
            nodes.push(CellNode {
                level,
                stage,
                dirs,
                terminal,
            });
        }
    }
    Ok(RoutingSpace {
        kind,
        depths: depths.to_vec(),
        nodes,
        pairs: Vec::new(),
    })
}

impl RoutingSpace {
    pub fn levels(&self) -> usize {
        self.depths.len()
    }

    pub fn node_index(&self) -> BTreeMap<(usize, usize), usize> {
        self.nodes.iter().enumerate().map(|(i, n)| ((n.level, n.stage), i)).collect()
    }

    /// `(source, target)` node-index pairs of all gated transfers.
    pub fn edges(&self) -> Vec<(usize, usize, Dir)> {
        let index = self.node_index();
        let mut out = Vec::new();
        for (i, n) in self.nodes.iter().enumerate() {
            if n.terminal {
                continue;
            }
            for &d in &n.dirs {
                if let Some(&j) = d.target(n.level).and_then(|t| index.get(&(t, n.stage + 1))) {
                    out.push((i, j, d));
                }
            }
        }
        out
    }

    /// A topological order of the nodes (Kahn, lowest index first).
    pub fn topo_order(&self) -> Result<Vec<usize>> {
        topo_sort(self.nodes.len(), &self.edges().iter().map(|&(a, b, _)| (a, b)).collect::<Vec<_>>())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Parses a serialized space and checks it against a fresh build.
    pub fn from_json(s: &str) -> Result<Self> {
        let space: RoutingSpace = serde_json::from_str(s)?;
        let rebuilt = build_space(space.kind, space.depths.len(), &space.depths)?;
        if rebuilt != space {
            return Err(TprError::Invalid(format!(
                "serialized {} space does not match its depths {:?}",
                space.kind.name(),
                space.depths
            )));
        }
        Ok(space)
    }
}

pub fn topo_sort(n: usize, edges: &[(usize, usize)]) -> Result<Vec<usize>> {
    let mut indeg = vec![0usize; n];
    let mut out_edges = vec![Vec::new(); n];
    for &(a, b) in edges {
        indeg[b] += 1;
        out_edges[a].push(b);
    }
    let mut ready: std::collections::BTreeSet<usize> = (0..n).filter(|&i| indeg[i] == 0).collect();
    let mut order = Vec::with_capacity(n);
    while let Some(i) = ready.pop_first() {
        order.push(i);
        for &j in &out_edges[i] {
            indeg[j] -= 1;
            if indeg[j] == 0 {
                ready.insert(j);
            }
        }
    }
    if order.len() != n {
        let stuck = (0..n).find(|&i| indeg[i] > 0).unwrap_or(0);
        return Err(TprError::Cycle(stuck));
    }
    Ok(order)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpaceConfig {
    pub kind: SpaceKind,
    pub depths: Vec<usize>,
}

impl Default for SpaceConfig {
    fn default() -> Self {
        Self {
            kind: SpaceKind::Cpr,
            depths: vec![3, 2, 1, 1],
        }
    }
}

pub fn register(store: &mut ParamStore, space: &RoutingSpace, c: usize, dacr_cfg: &DacrConfig) -> Result<()> {
    for n in &space.nodes {
        let p = n.prefix();
        let k = n.dirs.len();
        store.register(&format!("{p}.gate.w"), &[k, c, 3, 3], Init::FanIn { fan_in: 9 * c, gain: 0.5 })?;
        store.register(&format!("{p}.gate.b"), &[k], Init::Const(GATE_BIAS_INIT))?;
        store.register(&format!("{p}.cell.w"), &[c, c, 3, 3], Init::FanIn { fan_in: 9 * c, gain: 1.0 })?;
    }
    for pair in &space.pairs {
        dacr::register(store, &pair.prefix(), c, dacr_cfg)?;
    }
    Ok(())
}

/// Worst-case MACs of the routed cell operations (all gates open).
pub fn static_cost(space: &RoutingSpace, shapes: &[(usize, usize)], c: usize) -> u64 {
    let cell = 9 * (c * c) as u64;
    let area = |l: usize| shapes.get(l).map_or(0, |&(h, w)| (h * w) as u64);
    let grid: u64 = space.nodes.iter().map(|n| cell * area(n.level)).sum();
    let align: u64 = space.pairs.iter().map(|p| 2 * cell * area(p.query)).sum();
    grid + align
}

/// MACs of a cell's always-executed gate conv.
pub fn gate_macs(space: &RoutingSpace, shapes: &[(usize, usize)], c: usize) -> u64 {
    let area = |l: usize| shapes.get(l).map_or(0, |&(h, w)| (h * w) as u64);
    let grid: u64 = space.nodes.iter().map(|n| 9 * c as u64 * n.dirs.len() as u64 * area(n.level)).sum();
    let align: u64 = space
        .pairs
        .iter()
        .map(|p| {
            let (h, w) = shapes[p.query];
            dacr::static_macs(c, h, w)
        })
        .sum();
    grid + align
}

pub struct CellOutputs {
    pub h: Var,
    pub gates: Vec<(Dir, GateMap)>,
    /// `(direction, target level, transferred map)`.
    pub transfers: Vec<(Dir, usize, Var)>,
}

/// One routing cell: `H = relu(conv3x3(x)) + x`, one gate per direction
/// from the node's input, `Y_dir = resize(H · m_dir)`.
#[allow(clippy::too_many_arguments)]
pub fn cell_forward(
    tape: &mut Tape,
    store: &ParamStore,
    node: &CellNode,
    x: Var,
    shapes: &[(usize, usize)],
    ledger: &mut FlopLedger,
    receptive_field: usize,
    force: Option<f64>,
    exec: Exec,
) -> Result<CellOutputs> {
    let (c, h, w) = tape.value(x).dims3()?;
    if shapes.get(node.level) != Some(&(h, w)) {
        return Err(crate::error::shape_err(
            "cell_forward",
            format!("input {h}x{w} does not match level {} of {shapes:?}", node.level),
        ));
    }
    let p = node.prefix();
    let k = node.dirs.len();
    let mut gates = Vec::with_capacity(k);
    match force {
        Some(v) => {
            for &d in &node.dirs {
                gates.push((d, GateMap::constant(tape, h, w, v, GateKind::Path)?));
            }
        }
        None => {
            let gw = tape.param(store, &format!("{p}.gate.w"))?;
            let gb = tape.param(store, &format!("{p}.gate.b"))?;
            let pre = tape.conv2d(x, gw, Some(gb), 1, 1, None)?;
            let act = tape.gate_act(pre);
            for (i, &d) in node.dirs.iter().enumerate() {
                let g = tape.slice_channels(act, i, 1)?;
                gates.push((d, GateMap::new(tape, g, GateKind::Path)?));
            }
        }
    }
    let cost = (9 * c * c) as f64 / k as f64;
    for (d, g) in &gates {
        ledger.record(tape, g, format!("{p}.gate.{d:?}").to_lowercase(), format!("{p}.cell"), cost, receptive_field)?;
    }
    let mask = match exec {
        Exec::Sparse => Some(union_mask(&gates.iter().map(|(_, g)| g).collect::<Vec<_>>())),
        Exec::Dense => None,
    };
    let cw = tape.param(store, &format!("{p}.cell.w"))?;
    let conv = tape.conv2d(x, cw, None, 1, 1, mask)?;
    let act = tape.relu(conv);
    let hid = tape.add(act, x)?;
    let mut transfers = Vec::with_capacity(k);
    for (d, g) in &gates {
        let target = d.target(node.level).expect("constructed direction");
        let gated = tape.mul_gate(hid, g.values)?;
        transfers.push((*d, target, resize_to_level(tape, gated, node.level, target, shapes)?));
    }
    Ok(CellOutputs {
        h: hid,
        gates,
        transfers,
    })
}

#[derive(Clone, Copy, Debug)]
pub struct RouteOptions {
    pub receptive_field: usize,
    /// Forces every path gate to a constant.
    pub force: Option<f64>,
    pub exec: Exec,
}

impl Default for RouteOptions {
    fn default() -> Self {
        Self {
            receptive_field: 3,
            force: None,
            exec: Exec::Sparse,
        }
    }
}

/// Gates produced by one routing pass, keyed by node index.
pub type RouteGates = Vec<(usize, Vec<(Dir, GateMap)>)>;

/// Evaluates the routing grid in topological order. The refined level is
/// `input + terminal output`, so a closed space returns its input.
pub fn route_pyramid(
    tape: &mut Tape,
    store: &ParamStore,
    space: &RoutingSpace,
    pyr: &FeaturePyramid,
    ledger: &mut FlopLedger,
    opts: RouteOptions,
) -> Result<(FeaturePyramid, RouteGates)> {
    let order = space.topo_order()?;
    route_pyramid_in_order(tape, store, space, pyr, ledger, opts, &order)
}

/// As [`route_pyramid`] with a caller-chosen node order, which must be a
/// permutation of the nodes respecting every edge.
pub fn route_pyramid_in_order(
    tape: &mut Tape,
    store: &ParamStore,
    space: &RoutingSpace,
    pyr: &FeaturePyramid,
    ledger: &mut FlopLedger,
    opts: RouteOptions,
    order: &[usize],
) -> Result<(FeaturePyramid, RouteGates)> {
    if pyr.levels.len() != space.levels() {
        return Err(crate::error::shape_err(
            "route_pyramid",
            format!("pyramid has {} levels, space has {}", pyr.levels.len(), space.levels()),
        ));
    }
    check_order(space, order)?;
    let shapes = pyr.shapes(tape);
    let index = space.node_index();
    let first_stage: BTreeMap<usize, usize> = space.nodes.iter().rev().map(|n| (n.level, n.stage)).collect();
    let mut inbox: BTreeMap<usize, Vec<(usize, Var)>> = BTreeMap::new();
    let mut terminal_out: BTreeMap<usize, Var> = BTreeMap::new();
    let mut gates = Vec::with_capacity(order.len());
    for &i in order {
        let node = &space.nodes[i];
        let mut incoming = inbox.remove(&i).unwrap_or_default();
        incoming.sort_by_key(|&(src, _)| src);
        let mut x = if first_stage.get(&node.level) == Some(&node.stage) {
            Some(pyr.levels[node.level].var)
        } else {
            None
        };
        for (_, v) in incoming {
            x = Some(match x {
                Some(acc) => tape.add(acc, v)?,
                None => v,
            });
        }
        let x = x.ok_or_else(|| TprError::Invalid(format!("node {} has no input", node.prefix())))?;
        let out = cell_forward(
            tape,
            store,
            node,
            x,
            &shapes,
            ledger,
            opts.receptive_field,
            opts.force,
            opts.exec,
        )?;
        for &(d, target, v) in &out.transfers {
            if node.terminal {
                terminal_out.insert(node.level, v);
            } else {
                let j = index[&(target, node.stage + 1)];
                debug_assert!(d.target(node.level) == Some(target));
                inbox.entry(j).or_default().push((i, v));
            }
        }
        gates.push((i, out.gates));
    }
    let mut vars = Vec::with_capacity(pyr.levels.len());
    for (l, level) in pyr.levels.iter().enumerate() {
        vars.push(match terminal_out.get(&l) {
            Some(&t) => tape.add(level.var, t)?,
            None => level.var,
        });
    }
    Ok((pyr.with_vars(vars), gates))
}

fn check_order(space: &RoutingSpace, order: &[usize]) -> Result<()> {
    let n = space.nodes.len();
    let mut pos = vec![usize::MAX; n];
    for (k, &i) in order.iter().enumerate() {
        if i >= n || pos[i] != usize::MAX {
            return Err(TprError::Invalid(format!("evaluation order {order:?} is not a permutation")));
        }
        pos[i] = k;
    }
    if order.len() != n {
        return Err(TprError::Invalid(format!("evaluation order {order:?} is not a permutation")));
    }
    for (a, b, _) in space.edges() {
        if pos[a] > pos[b] {
            return Err(TprError::Cycle(b));
        }
    }
    Ok(())
}

/// `full_align`: every reference level, resized to every query level, is
/// aligned by its own cell; each query level averages its aligned results.
#[allow(clippy::too_many_arguments)]
pub fn align_pyramid(
    tape: &mut Tape,
    store: &ParamStore,
    space: &RoutingSpace,
    cfg: &DacrConfig,
    pyr_q: &FeaturePyramid,
    pyr_r: &FeaturePyramid,
    ledger: &mut FlopLedger,
    receptive_field: usize,
    force: DacrForce,
    exec: Exec,
) -> Result<(FeaturePyramid, Vec<(AlignPair, dacr::DacrOutputs)>)> {
    pyr_q.check_matches(pyr_r, tape)?;
    let shapes = pyr_q.shapes(tape);
    let mut per_query: BTreeMap<usize, Vec<Var>> = BTreeMap::new();
    let mut outs = Vec::with_capacity(space.pairs.len());
    for &pair in &space.pairs {
        let r = resize_to_level(tape, pyr_r.levels[pair.reference].var, pair.reference, pair.query, &shapes)?;
        let o = dacr::dacr_cell(
            tape,
            store,
            &pair.prefix(),
            cfg,
            pyr_q.levels[pair.query].var,
            r,
            ledger,
            receptive_field,
            force,
            exec,
        )?;
        per_query.entry(pair.query).or_default().push(o.y_final);
        outs.push((pair, o));
    }
    let mut vars = Vec::with_capacity(pyr_q.levels.len());
    for (l, level) in pyr_q.levels.iter().enumerate() {
        vars.push(match per_query.get(&l) {
            Some(parts) => {
                let mut acc = parts[0];
                for &p in &parts[1..] {
                    acc = tape.add(acc, p)?;
                }
                tape.scale(acc, 1.0 / parts.len() as f64)
            }
            None => level.var,
        });
    }
    Ok((pyr_q.with_vars(vars), outs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::budget::LedgerMode;
    use crate::tensor::Tensor;

    const SHAPES: [(usize, usize); 4] = [(12, 12), (6, 6), (3, 3), (2, 2)];

    #[test]
    fn node_counts() {
        let cpr = build_space(SpaceKind::Cpr, 4, &[3, 2, 1, 1]).unwrap();
        assert_eq!(cpr.nodes.len(), 7);
        let full = build_space(SpaceKind::FullRouting, 4, &[3, 2, 1, 1]).unwrap();
        assert_eq!(full.nodes.len(), 12);
        let td = build_space(SpaceKind::TopDown, 4, &[3, 2, 1, 1]).unwrap();
        assert_eq!(td.nodes.len(), 7);
        assert_eq!(td.nodes[0].level, 3);
        let fa = build_space(SpaceKind::FullAlign, 4, &[3, 2, 1, 1]).unwrap();
        assert_eq!((fa.nodes.len(), fa.pairs.len()), (0, 16));
        let a = build_space(SpaceKind::Cpr, 4, &[1; 4]).unwrap();
        let b = build_space(SpaceKind::FullRouting, 4, &[1; 4]).unwrap();
        assert_eq!(a.nodes, b.nodes);
    }

    #[test]
    fn invalid_depths() {
        assert!(build_space(SpaceKind::Cpr, 4, &[3, 2, 1]).is_err());
        assert!(build_space(SpaceKind::Cpr, 4, &[1, 2, 1, 1]).is_err());
        assert!(build_space(SpaceKind::Cpr, 4, &[3, 2, 1, 0]).is_err());
    }

    #[test]
    fn edges_are_adjacent_and_acyclic() {
        for kind in SpaceKind::ALL {
            let s = build_space(kind, 4, &[3, 2, 1, 1]).unwrap();
            for (a, b, _) in s.edges() {
                let (na, nb) = (&s.nodes[a], &s.nodes[b]);
                assert_eq!(nb.stage, na.stage + 1);
                assert!(na.level.abs_diff(nb.level) <= 1);
            }
            assert_eq!(s.topo_order().unwrap().len(), s.nodes.len());
        }
    }

    #[test]
    fn cycle_is_reported() {
        assert!(matches!(topo_sort(3, &[(0, 1), (1, 2), (2, 1)]), Err(TprError::Cycle(_))));
    }

    #[test]
    fn cost_examples() {
        let one = RoutingSpace {
            kind: SpaceKind::Cpr,
            depths: vec![1],
            nodes: vec![CellNode { level: 0, stage: 1, dirs: vec![Dir::Keep], terminal: true }],
            pairs: vec![],
        };
        assert_eq!(static_cost(&one, &SHAPES, 16), 331_776);
        let empty = RoutingSpace { nodes: vec![], ..one };
        assert_eq!(static_cost(&empty, &SHAPES, 16), 0);
        let cost = |k| static_cost(&build_space(k, 4, &[3, 2, 1, 1]).unwrap(), &SHAPES, 16);
        assert_eq!(cost(SpaceKind::Cpr), 1_191_168);
        assert_eq!(cost(SpaceKind::FullRouting), 1_334_016);
        assert_eq!(cost(SpaceKind::FullAlign), 3_557_376);
    }

    #[test]
    fn json_round_trip() {
        let s = build_space(SpaceKind::TopDown, 4, &[3, 2, 1, 1]).unwrap();
        assert_eq!(RoutingSpace::from_json(&s.to_json().unwrap()).unwrap(), s);
        let mut bad = s.clone();
        bad.nodes.pop();
        assert!(RoutingSpace::from_json(&bad.to_json().unwrap()).is_err());
    }

    fn pyramid(tape: &mut Tape, c: usize, seed: u64) -> FeaturePyramid {
        let levels: Vec<Tensor> = SHAPES
            .iter()
            .map(|&(h, w)| Tensor::from_fn3(c, h, w, |k, y, x| (((k * 7 + y * 5 + x * 3) as u64 + seed) % 11) as f64 / 5.5 - 1.0))
            .collect();
        FeaturePyramid::from_tensors(tape, 0, &levels)
    }

    #[test]
    fn closed_space_is_identity() {
        let space = build_space(SpaceKind::Cpr, 4, &[3, 2, 1, 1]).unwrap();
        let mut s = ParamStore::new(0);
        register(&mut s, &space, 4, &DacrConfig::default()).unwrap();
        let mut t = Tape::new();
        let p = pyramid(&mut t, 4, 1);
        let mut ledger = FlopLedger::new(LedgerMode::Infer);
        let opts = RouteOptions { force: Some(0.0), ..RouteOptions::default() };
        let (out, _) = route_pyramid(&mut t, &s, &space, &p, &mut ledger, opts).unwrap();
        for (a, b) in out.vars().into_iter().zip(p.vars()) {
            assert_eq!(t.value(a), t.value(b));
        }
        assert_eq!(ledger.total_b(), 0.0);
    }

    #[test]
    fn keep_only_depth_one_is_per_scale_cell() {
        let space = build_space(SpaceKind::Cpr, 4, &[1; 4]).unwrap();
        let mut s = ParamStore::new(2);
        register(&mut s, &space, 4, &DacrConfig::default()).unwrap();
        let mut t = Tape::new();
        let p = pyramid(&mut t, 4, 3);
        let mut ledger = FlopLedger::new(LedgerMode::Infer);
        let opts = RouteOptions { force: Some(1.0), ..RouteOptions::default() };
        let (out, _) = route_pyramid(&mut t, &s, &space, &p, &mut ledger, opts).unwrap();
        for (l, (a, x)) in out.vars().into_iter().zip(p.vars()).enumerate() {
            let w = t.param(&s, &format!("cpr.{l}.1.cell.w")).unwrap();
            let conv = t.conv2d(x, w, None, 1, 1, None).unwrap();
            let r = t.relu(conv);
            let hid = t.add(r, x).unwrap();
            let want = t.add(x, hid).unwrap();
            assert!(t.value(a).max_abs_diff(t.value(want)) < 1e-12);
        }
    }

    #[test]
    fn shuffled_orders_agree() {
        let space = build_space(SpaceKind::FullRouting, 4, &[3, 2, 1, 1]).unwrap();
        let mut s = ParamStore::new(4);
        register(&mut s, &space, 4, &DacrConfig::default()).unwrap();
        let run = |order: &[usize]| {
            let mut t = Tape::new();
            let p = pyramid(&mut t, 4, 5);
            let mut ledger = FlopLedger::new(LedgerMode::Infer);
            let (out, _) = route_pyramid_in_order(&mut t, &s, &space, &p, &mut ledger, RouteOptions::default(), order).unwrap();
            (out.to_tensors(&t), ledger.total_b())
        };
        let base = space.topo_order().unwrap();
        // stage-major, levels reversed within a stage
        let mut alt = base.clone();
        alt.sort_by_key(|&i| (space.nodes[i].stage, std::cmp::Reverse(space.nodes[i].level)));
        assert_ne!(base, alt);
        assert_eq!(run(&base), run(&alt));
        let mut bad = base.clone();
        bad.reverse();
        let mut t = Tape::new();
        let p = pyramid(&mut t, 4, 5);
        let mut ledger = FlopLedger::new(LedgerMode::Infer);
        assert!(route_pyramid_in_order(&mut t, &s, &space, &p, &mut ledger, RouteOptions::default(), &bad).is_err());
    }

    #[test]
    fn sparse_cells_match_dense() {
        let space = build_space(SpaceKind::Cpr, 4, &[3, 2, 1, 1]).unwrap();
        for seed in 0..4 {
            let mut s = ParamStore::new(seed);
            register(&mut s, &space, 4, &DacrConfig::default()).unwrap();
            for n in &space.nodes {
                let k = n.dirs.len();
                s.set(&format!("{}.gate.b", n.prefix()), Tensor::full(&[k], -0.1)).unwrap();
            }
            let run = |exec| {
                let mut t = Tape::new();
                let p = pyramid(&mut t, 4, seed);
                let mut ledger = FlopLedger::new(LedgerMode::Infer);
                let opts = RouteOptions { exec, ..RouteOptions::default() };
                let (out, _) = route_pyramid(&mut t, &s, &space, &p, &mut ledger, opts).unwrap();
                (out.to_tensors(&t), t.macs())
            };
            let (a, ma) = run(Exec::Sparse);
            let (b, mb) = run(Exec::Dense);
            for (x, y) in a.iter().zip(&b) {
                assert!(x.max_abs_diff(y) < 1e-10);
            }
            assert!(ma <= mb);
        }
    }
}
