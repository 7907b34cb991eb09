//! Backbone + temporal routing + heads, wired as one model.

use std::path::Path;

use serde::{Deserialize, Serialize};
use tpr_core::budget::FlopLedger;
use tpr_core::cpr::{self, RouteGates, RouteOptions, RoutingSpace, SpaceConfig, SpaceKind};
use tpr_core::dacr::{self, DacrConfig, DacrForce, DacrOutputs, Exec};
use tpr_core::pyramid::{build_pyramid, BackboneConfig, FeaturePyramid};
use tpr_core::tracker;
use tpr_core::{ParamStore, Result, Tape, TprError, Var};

use crate::data::SynthConfig;
use crate::heads::{self, HeadConfig, HeadOutputs};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub dacr: DacrConfig,
    pub space: SpaceConfig,
    /// `false` gives the per-frame baseline: the query pyramid goes
    /// straight to the heads.
    pub temporal: bool,
    pub receptive_field: usize,
    pub heads: HeadConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            dacr: DacrConfig::default(),
            space: SpaceConfig::default(),
            temporal: true,
            receptive_field: 3,
            heads: HeadConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.receptive_field % 2 == 0 {
            return Err(TprError::Invalid(format!(
                "receptive_field must be odd, got {}",
                self.receptive_field
            )));
        }
        cpr::build_space(self.space.kind, self.backbone.levels, &self.space.depths)?;
        Ok(())
    }
}

/// Gate overrides for one forward pass.
#[derive(Clone, Copy, Debug, Default)]
pub struct RunOptions {
    pub exec: Exec,
    pub dacr: DacrForce,
    pub path: Option<f64>,
}

impl RunOptions {
    /// Inner gates closed, outer gates passing the query, path gates closed.
    pub fn closed() -> Self {
        Self {
            exec: Exec::Sparse,
            dacr: DacrForce::BYPASS,
            path: Some(0.0),
        }
    }
}

pub enum Reference {
    /// The query frame is its own reference.
    SelfPair,
    Pyramid(FeaturePyramid),
}

pub struct ForwardOut {
    pub raw: FeaturePyramid,
    pub refined: FeaturePyramid,
    pub dacr: Vec<(String, DacrOutputs)>,
    pub routes: RouteGates,
    pub heads: HeadOutputs,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub space: RoutingSpace,
}

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.backbone.channels;
        let space = cpr::build_space(cfg.space.kind, cfg.backbone.levels, &cfg.space.depths)?;
        let mut store = ParamStore::new(seed);
        cfg.backbone.register(&mut store)?;
        if space.kind != SpaceKind::FullAlign {
            for l in 0..cfg.backbone.levels {
                dacr::register(&mut store, &dacr::level_prefix(l), c, &cfg.dacr)?;
            }
        }
        cpr::register(&mut store, &space, c, &cfg.dacr)?;
        heads::register(&mut store, c)?;
        tracker::register(&mut store, c)?;
        Ok(Self { cfg, store, space })
    }

    pub fn load(cfg: ModelConfig, path: impl AsRef<Path>) -> Result<Self> {
        let mut m = Self::new(cfg, 0)?;
        m.store.load_into(path)?;
        Ok(m)
    }

    /// Errors when clips cannot feed this model.
    pub fn check_dataset(&self, data: &SynthConfig) -> Result<()> {
        let shapes = self.cfg.backbone.level_shapes(data.height, data.width);
        if data.height % 8 != 0 || data.width % 8 != 0 || shapes.iter().any(|&(h, w)| h == 0 || w == 0) {
            return Err(TprError::Invalid(format!(
                "dataset frames {}x{} cannot feed a {}-level pyramid",
                data.height, data.width, self.cfg.backbone.levels
            )));
        }
        if self.cfg.backbone.in_channels != 3 {
            return Err(TprError::Invalid(format!(
                "dataset frames have 3 channels, model expects {}",
                self.cfg.backbone.in_channels
            )));
        }
        Ok(())
    }

    pub fn pyramid(&self, tape: &mut Tape, frame: Var, index: usize) -> Result<FeaturePyramid> {
        build_pyramid(tape, frame, index, &self.cfg.backbone, &self.store)
    }

    /// Aligns and routes the query pyramid against a reference.
    pub fn temporal(
        &self,
        tape: &mut Tape,
        raw: &FeaturePyramid,
        reference: &Reference,
        ledger: &mut FlopLedger,
        opts: RunOptions,
    ) -> Result<(FeaturePyramid, Vec<(String, DacrOutputs)>, RouteGates)> {
        if !self.cfg.temporal {
            return Ok((raw.clone(), Vec::new(), Vec::new()));
        }
        let pyr_r = match reference {
            Reference::SelfPair => raw,
            Reference::Pyramid(p) => p,
        };
        let rf = self.cfg.receptive_field;
        if self.space.kind == SpaceKind::FullAlign {
            let (out, cells) = cpr::align_pyramid(
                tape,
                &self.store,
                &self.space,
                &self.cfg.dacr,
                raw,
                pyr_r,
                ledger,
                rf,
                opts.dacr,
                opts.exec,
            )?;
            let named = cells.into_iter().map(|(p, o)| (p.prefix(), o)).collect();
            return Ok((out, named, Vec::new()));
        }
        let (aligned, cells) = dacr::dacr_forward(
            tape,
            &self.store,
            &self.cfg.dacr,
            raw,
            pyr_r,
            ledger,
            rf,
            opts.dacr,
            opts.exec,
        )?;
        let route = RouteOptions {
            receptive_field: rf,
            force: opts.path,
            exec: opts.exec,
        };
        let (refined, gates) = cpr::route_pyramid(tape, &self.store, &self.space, &aligned, ledger, route)?;
        let named = cells
            .into_iter()
            .enumerate()
            .map(|(l, o)| (dacr::level_prefix(l), o))
            .collect();
        Ok((refined, named, gates))
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        frame: Var,
        index: usize,
        reference: &Reference,
        ledger: &mut FlopLedger,
        opts: RunOptions,
    ) -> Result<ForwardOut> {
        let raw = self.pyramid(tape, frame, index)?;
        let (refined, dacr, routes) = self.temporal(tape, &raw, reference, ledger, opts)?;
        let heads = heads::heads_forward(tape, &self.store, &refined)?;
        Ok(ForwardOut {
            raw,
            refined,
            dacr,
            routes,
            heads,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tpr_core::budget::LedgerMode;
    use tpr_core::Tensor;

    fn frame(t: &mut Tape, seed: usize) -> Var {
        t.constant(Tensor::from_fn3(3, 32, 32, |c, y, x| ((c * 5 + y * 3 + x * 7 + seed) % 13) as f64 / 13.0))
    }

    #[test]
    fn baseline_equals_closed_gates() {
        let cfg = ModelConfig {
            backbone: BackboneConfig { channels: 4, ..BackboneConfig::default() },
            ..ModelConfig::default()
        };
        let tpr = Model::new(cfg.clone(), 3).unwrap();
        let base = Model {
            cfg: ModelConfig { temporal: false, ..cfg },
            ..tpr.clone()
        };
        let mut t = Tape::new();
        let f = frame(&mut t, 1);
        let g = frame(&mut t, 2);
        let r = tpr.pyramid(&mut t, g, 1).unwrap();
        let mut ledger = FlopLedger::new(LedgerMode::Infer);
        let a = tpr.forward(&mut t, f, 0, &Reference::Pyramid(r), &mut ledger, RunOptions::closed()).unwrap();
        let b = base.forward(&mut t, f, 0, &Reference::SelfPair, &mut ledger, RunOptions::default()).unwrap();
        for (x, y) in a.refined.vars().into_iter().zip(b.refined.vars()) {
            assert_eq!(t.value(x), t.value(y));
        }
        for (x, y) in a.heads.cls.iter().zip(&b.heads.cls) {
            assert_eq!(t.value(*x), t.value(*y));
        }
    }

    #[test]
    fn every_space_runs() {
        for kind in SpaceKind::ALL {
            let cfg = ModelConfig {
                backbone: BackboneConfig { channels: 4, ..BackboneConfig::default() },
                space: SpaceConfig { kind, depths: vec![3, 2, 1, 1] },
                ..ModelConfig::default()
            };
            let m = Model::new(cfg, 0).unwrap();
            let mut t = Tape::new();
            let f = frame(&mut t, 0);
            let mut ledger = FlopLedger::new(LedgerMode::Train);
            let out = m.forward(&mut t, f, 0, &Reference::SelfPair, &mut ledger, RunOptions::default()).unwrap();
            assert_eq!(out.refined.shapes(&t), out.raw.shapes(&t));
            assert!(!ledger.is_empty());
        }
    }
}
