//! Named parameters, AdamW with per-group hyperparameters, and the LR schedule.

use std::collections::HashMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::checkpoint::CheckpointRecord;
use super::{arg_err, Gradients, Real, Result, Tensor};

/// Optimizer group a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamGroup {
    /// Encoder (stem and hierarchical stages).
    Backbone,
    /// Decoder and classifier heads.
    Head,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
pub struct Parameter<T: Real> {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor<T>,
}

/// Ordered collection of uniquely named trainable tensors.
#[derive(Debug, Clone)]
pub struct ParamStore<T: Real> {
    params: Vec<Parameter<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self { params: Vec::new(), by_name: HashMap::new() }
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(arg_err("ParamStore::add", format!("duplicate parameter name {name}")));
        }
        let id = self.params.len();
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter { name, group, value: value.detach().requires_grad() });
        Ok(ParamId(id))
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn param(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Replaces a parameter's values, keeping its shape.
    pub fn set_data(&mut self, id: ParamId, data: Vec<T>) -> Result<()> {
        let p = &mut self.params[id.0];
        let fresh = Tensor::new(data, p.value.shape())?;
        p.value = fresh.requires_grad();
        Ok(())
    }

    /// Total trainable scalars.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn numel_in(&self, group: ParamGroup) -> usize {
        self.params.iter().filter(|p| p.group == group).map(|p| p.value.numel()).sum()
    }

    /// Same parameters in another element type.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter { name: p.name.clone(), group: p.group, value: p.value.cast::<U>().requires_grad() })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }

    pub fn to_records(&self) -> Vec<CheckpointRecord> {
        self.params
            .iter()
            .map(|p| CheckpointRecord {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                data: p.value.data().iter().map(|v| v.to_f64() as f32).collect(),
            })
            .collect()
    }

    /// Loads every parameter from `records` by name; shapes must match exactly.
    pub fn load_records(&mut self, records: &[CheckpointRecord]) -> Result<()> {
        let index: HashMap<&str, &CheckpointRecord> = records.iter().map(|r| (r.name.as_str(), r)).collect();
        for p in &mut self.params {
            let r = index
                .get(p.name.as_str())
                .ok_or_else(|| arg_err("load_records", format!("missing parameter {}", p.name)))?;
            if r.shape != p.value.shape() {
                return Err(arg_err(
                    "load_records",
                    format!("{}: checkpoint shape {:?}, model shape {:?}", p.name, r.shape, p.value.shape()),
                ));
            }
            let data = r.data.iter().map(|&v| T::from_f64(v as f64)).collect();
            p.value = Tensor::new(data, &r.shape)?.requires_grad();
        }
        Ok(())
    }
}

/// Learning rate and decoupled weight decay for one group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupHyper {
    pub lr: f64,
    pub weight_decay: f64,
}

/// AdamW with decoupled weight decay; one moment pair per parameter.
#[derive(Debug, Clone)]
pub struct AdamW<T: Real> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        Self::with_betas(store, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(store: &ParamStore<T>, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = |p: &Parameter<T>| vec![T::zero(); p.value.numel()];
        Self {
            beta1,
            beta2,
            eps,
            step: 0,
            m: store.params.iter().map(zeros).collect(),
            v: store.params.iter().map(zeros).collect(),
        }
    }

    /// Number of completed updates.
    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of every parameter; `hyper` supplies the group's current settings.
    /// Parameters without a gradient are treated as having a zero gradient.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>, hyper: impl Fn(ParamGroup) -> GroupHyper) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, p) in store.params.iter_mut().enumerate() {
            let GroupHyper { lr, weight_decay } = hyper(p.group);
            let g = grads.get(&p.value);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let w: Vec<T> = p
                .value
                .data()
                .iter()
                .enumerate()
                .map(|(j, &wj)| {
                    let gj = g.map_or(0.0, |g| g[j].to_f64());
                    let mj = self.beta1 * m[j].to_f64() + (1.0 - self.beta1) * gj;
                    let vj = self.beta2 * v[j].to_f64() + (1.0 - self.beta2) * gj * gj;
                    m[j] = T::from_f64(mj);
                    v[j] = T::from_f64(vj);
                    let mhat = mj / bc1;
                    let vhat = vj / bc2;
                    let decayed = wj.to_f64() * (1.0 - lr * weight_decay);
                    T::from_f64(decayed - lr * mhat / (vhat.sqrt() + self.eps))
                })
                .collect();
            p.value = Tensor::from_vec(w, p.value.shape()).requires_grad();
        }
    }

    /// Moment buffers and step counter as checkpoint records, named after the parameters.
    pub fn to_records(&self, store: &ParamStore<T>) -> Vec<CheckpointRecord> {
        let mut out = Vec::with_capacity(2 * store.len() + 1);
        out.push(CheckpointRecord { name: "optim.step".into(), shape: vec![2], data: split_u64(self.step).to_vec() });
        for (i, p) in store.params.iter().enumerate() {
            for (kind, buf) in [("m", &self.m[i]), ("v", &self.v[i])] {
                out.push(CheckpointRecord {
                    name: format!("optim.{kind}.{}", p.name),
                    shape: p.value.shape().to_vec(),
                    data: buf.iter().map(|v| v.to_f64() as f32).collect(),
                });
            }
        }
        out
    }

    pub fn load_records(&mut self, store: &ParamStore<T>, records: &[CheckpointRecord]) -> Result<()> {
        let index: HashMap<&str, &CheckpointRecord> = records.iter().map(|r| (r.name.as_str(), r)).collect();
        let step = index.get("optim.step").ok_or_else(|| arg_err("AdamW::load_records", "missing optim.step"))?;
        if step.data.len() != 2 {
            return Err(arg_err("AdamW::load_records", "malformed optim.step"));
        }
        self.step = join_u64([step.data[0], step.data[1]]);
        for (i, p) in store.params.iter().enumerate() {
            for kind in ["m", "v"] {
                let name = format!("optim.{kind}.{}", p.name);
                let r = index.get(name.as_str()).ok_or_else(|| arg_err("AdamW::load_records", format!("missing {name}")))?;
                if r.data.len() != p.value.numel() {
                    return Err(arg_err("AdamW::load_records", format!("{name}: wrong length")));
                }
                let buf = r.data.iter().map(|&v| T::from_f64(v as f64)).collect();
                if kind == "m" {
                    self.m[i] = buf;
                } else {
                    self.v[i] = buf;
                }
            }
        }
        Ok(())
    }
}

// Step counters ride in f32 records as two exact 24-bit-safe halves.
fn split_u64(v: u64) -> [f32; 2] {
    [(v >> 20) as f32, (v & 0xF_FFFF) as f32]
}

fn join_u64(h: [f32; 2]) -> u64 {
    ((h[0] as u64) << 20) | (h[1] as u64)
}

/// Linear warm-up from 0 to `base_lr` over `warmup_steps`, then cosine
/// annealing to 0 at `total_steps`.
pub fn lr_schedule(step: u64, total_steps: u64, warmup_steps: u64, base_lr: f64) -> f64 {
    if step < warmup_steps {
        return base_lr * step as f64 / warmup_steps as f64;
    }
    if step >= total_steps {
        return if total_steps == warmup_steps && step == warmup_steps { base_lr } else { 0.0 };
    }
    let progress = (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
    base_lr * 0.5 * (1.0 + (PI * progress).cos())
}
