//! Named trainable parameters, their gradients, and the SGD optimizer.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, TprError};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Const(f64),
    /// Uniform in `±sqrt(1/fan_in) * gain`.
    FanIn { fan_in: usize, gain: f64 },
    /// Identity-like kernel `(C, C, k, k)` with 1 at the centre tap of the
    /// diagonal, plus a fan-in uniform perturbation scaled by `noise`.
    Delta { noise: f64 },
}

#[derive(Clone, Debug)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
    pub group: String,
}

/// Parameters keyed by unique dotted names (`dacr.0.offset.w`). The group
/// of a parameter is its first name segment; every parameter belongs to
/// exactly one optimizer group.
#[derive(Clone, Debug)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
    rng: ChaCha8Rng,
    seed: u64,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self {
            params: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            seed,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Registers a parameter. Initialization draws from the store's seeded
    /// generator in registration order.
    pub fn register(&mut self, name: &str, shape: &[usize], init: Init) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(TprError::Invalid(format!("duplicate parameter name `{name}`")));
        }
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Const(v) => vec![v; n],
            Init::FanIn { fan_in, gain } => {
                let bound = gain / (fan_in.max(1) as f64).sqrt();
                (0..n).map(|_| self.rng.gen_range(-bound..bound)).collect()
            }
            Init::Delta { noise } => {
                let [co, ci, k, _] = shape[..] else {
                    return Err(TprError::Invalid(format!("delta init needs a rank-4 kernel, got {shape:?}")));
                };
                let bound = noise / ((ci * k * k) as f64).sqrt();
                let mut d: Vec<f64> = (0..n).map(|_| self.rng.gen_range(-bound..=bound)).collect();
                for c in 0..co.min(ci) {
                    d[((c * ci + c) * k + k / 2) * k + k / 2] += 1.0;
                }
                d
            }
        };
        let group = name.split('.').next().unwrap_or(name).to_owned();
        self.params.insert(
            name.to_owned(),
            Param {
                value: Tensor::new(shape.to_vec(), data)?,
                grad: Tensor::zeros(shape),
                group,
            },
        );
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| TprError::UnknownParam(name.to_owned()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| TprError::UnknownParam(name.to_owned()))
    }

    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| TprError::UnknownParam(name.to_owned()))?;
        if p.value.shape() != value.shape() {
            return Err(TprError::Shape {
                op: "param_set",
                detail: format!("`{name}`: {:?} vs {:?}", p.value.shape(), value.shape()),
            });
        }
        p.value = value;
        Ok(())
    }

    pub fn grad(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .map(|p| &p.grad)
            .ok_or_else(|| TprError::UnknownParam(name.to_owned()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn groups(&self) -> BTreeMap<String, Vec<String>> {
        let mut out: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for (name, p) in &self.params {
            out.entry(p.group.clone()).or_default().push(name.clone());
        }
        out
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    pub(crate) fn accumulate_grad(&mut self, name: &str, g: &[f64]) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| TprError::UnknownParam(name.to_owned()))?;
        p.grad.data_mut().iter_mut().zip(g).for_each(|(a, b)| *a += b);
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for p in self.params.values_mut() {
            p.grad.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.params
            .values()
            .flat_map(|p| p.grad.data())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// Checkpoint: one named `TPR1` record per parameter, sorted by name.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for (name, p) in &self.params {
            p.value.write_to(&mut f, Some(name))?;
        }
        f.flush()?;
        Ok(())
    }

    /// Loads values into an already-registered store; names and shapes must
    /// match exactly.
    pub fn load_into(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut seen = 0;
        while let Some((name, t)) = Tensor::read_from(&mut f)? {
            let name = name.ok_or_else(|| TprError::Format("checkpoint record without a name".into()))?;
            let Some(p) = self.params.get_mut(&name) else {
                return Err(TprError::Format(format!(
                    "checkpoint {} has parameter `{name}` unknown to this model configuration",
                    path.display()
                )));
            };
            if p.value.shape() != t.shape() {
                return Err(TprError::Format(format!(
                    "checkpoint parameter `{name}` has shape {:?}, model expects {:?} (channel or level count mismatch?)",
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = t;
            seen += 1;
        }
        if seen != self.params.len() {
            return Err(TprError::Format(format!(
                "checkpoint {} holds {seen} parameters, model expects {}",
                path.display(),
                self.params.len()
            )));
        }
        Ok(())
    }
}

/// Plain SGD with optional heavy-ball momentum and global-norm clipping.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    pub clip_norm: Option<f64>,
    velocity: BTreeMap<String, Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64, clip_norm: Option<f64>) -> Self {
        Self {
            momentum,
            weight_decay,
            clip_norm,
            velocity: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, lr: f64) {
        let scale = match self.clip_norm {
            Some(c) => {
                let n = store.grad_norm();
                if n > c {
                    c / n
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        for (name, p) in store.params.iter_mut() {
            let vel = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; p.value.len()]);
            let grad = p.grad.data();
            for ((w, g), v) in p.value.data_mut().iter_mut().zip(grad).zip(vel.iter_mut()) {
                let g = g * scale + self.weight_decay * *w;
                *v = self.momentum * *v + g;
                *w -= lr * *v;
            }
        }
    }
}
