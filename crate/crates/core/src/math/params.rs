use std::collections::BTreeMap;

use super::{MathError, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct GroupId(pub usize);

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub group: GroupId,
    pub value: Tensor<T>,
    /// Adam first moment.
    pub m: Tensor<T>,
    /// Adam second moment.
    pub v: Tensor<T>,
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroupInfo {
    pub name: String,
    pub frozen: bool,
}

/// Model parameters partitioned into named groups, each with a freeze flag.
///
/// Frozen parameters still take part in forward passes and still pass
/// gradients to upstream nodes; the optimizer just never touches them.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    groups: Vec<GroupInfo>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Gradients produced by a backward pass, keyed by parameter.
#[derive(Clone, Debug, Default)]
pub struct GradMap<T> {
    grads: BTreeMap<ParamId, Tensor<T>>,
}

impl<T: Real> GradMap<T> {
    pub fn new() -> Self {
        Self { grads: BTreeMap::new() }
    }

    pub fn insert(&mut self, id: ParamId, grad: Tensor<T>) {
        self.grads.insert(id, grad);
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.grads.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.grads.iter().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Sum of squares over every gradient value.
    pub fn sq_norm(&self) -> f64 {
        self.grads.values().flat_map(|t| t.data().iter()).map(|v| v.as_f64().powi(2)).sum()
    }

    /// Scales all gradients so that their global L2 norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.sq_norm().sqrt();
        if norm > max_norm && norm > 0.0 {
            let s = T::lit(max_norm / norm);
            for t in self.grads.values_mut() {
                t.data_mut().iter_mut().for_each(|v| *v *= s);
            }
        }
        norm
    }

    /// Accumulates `other` into `self`.
    pub fn accumulate(&mut self, other: &GradMap<T>) -> Result<(), MathError> {
        for (id, g) in other.iter() {
            match self.grads.get_mut(&id) {
                Some(acc) => {
                    if acc.shape() != g.shape() {
                        return Err(MathError::Shape {
                            op: "grad_accumulate",
                            shapes: vec![acc.shape().to_vec(), g.shape().to_vec()],
                        });
                    }
                    acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += *b);
                }
                None => {
                    self.grads.insert(id, g.clone());
                }
            }
        }
        Ok(())
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new(), groups: Vec::new() }
    }

    pub fn add_group(&mut self, name: &str) -> GroupId {
        if let Some(id) = self.group_id(name) {
            return id;
        }
        self.groups.push(GroupInfo { name: name.to_string(), frozen: false });
        GroupId(self.groups.len() - 1)
    }

    pub fn add_param(&mut self, group: GroupId, name: &str, value: Tensor<T>) -> ParamId {
        let zeros = Tensor::zeros(value.shape());
        self.params.push(Param {
            name: name.to_string(),
            group,
            m: zeros.clone(),
            v: zeros,
            value,
            step: 0,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn group_id(&self, name: &str) -> Option<GroupId> {
        self.groups.iter().position(|g| g.name == name).map(GroupId)
    }

    pub fn groups(&self) -> &[GroupInfo] {
        &self.groups
    }

    pub fn group_names(&self) -> Vec<String> {
        self.groups.iter().map(|g| g.name.clone()).collect()
    }

    pub fn set_frozen(&mut self, group: &str, frozen: bool) -> Result<(), MathError> {
        let id = self.group_id(group).ok_or_else(|| MathError::UnknownGroup(group.to_string()))?;
        self.groups[id.0].frozen = frozen;
        Ok(())
    }

    /// Freezes every group except the listed ones.
    pub fn freeze_all_except(&mut self, trainable: &[&str]) {
        for g in self.groups.iter_mut() {
            g.frozen = !trainable.contains(&g.name.as_str());
        }
    }

    pub fn is_group_frozen(&self, group: &str) -> Option<bool> {
        self.group_id(group).map(|g| self.groups[g.0].frozen)
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.groups[self.params[id.0].group.0].frozen
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn param(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn group_params(&self, group: &str) -> Vec<ParamId> {
        match self.group_id(group) {
            Some(g) => self.ids().filter(|id| self.params[id.0].group == g).collect(),
            None => Vec::new(),
        }
    }

    pub fn group_name_of(&self, id: ParamId) -> &str {
        &self.groups[self.params[id.0].group.0].name
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Replaces a parameter's value and resets its optimizer state.
    pub fn reset_param(&mut self, id: ParamId, value: Tensor<T>) -> Result<(), MathError> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(MathError::Shape {
                op: "reset_param",
                shapes: vec![p.value.shape().to_vec(), value.shape().to_vec()],
            });
        }
        p.m = Tensor::zeros(value.shape());
        p.v = Tensor::zeros(value.shape());
        p.step = 0;
        p.value = value;
        Ok(())
    }

    /// Copies the store into another precision (optimizer state included).
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    group: p.group,
                    value: p.value.cast(),
                    m: p.m.cast(),
                    v: p.v.cast(),
                    step: p.step,
                })
                .collect(),
            groups: self.groups.clone(),
        }
    }

    /// Parameter values only, for cheap comparisons.
    pub fn values_snapshot(&self) -> Vec<Tensor<T>> {
        self.params.iter().map(|p| p.value.clone()).collect()
    }

    pub(crate) fn from_parts(params: Vec<Param<T>>, groups: Vec<GroupInfo>) -> Self {
        Self { params, groups }
    }

    /// One Adam update. Frozen groups are skipped entirely: neither their
    /// values nor their moments change.
    pub fn adam_step(&mut self, grads: &GradMap<T>, lr: f64, cfg: AdamConfig) -> Result<(), MathError> {
        for (id, _) in grads.iter() {
            if id.0 >= self.params.len() {
                return Err(MathError::UnknownParam(id.0));
            }
        }
        for (id, g) in grads.iter() {
            if self.is_frozen(id) {
                continue;
            }
            let p = &mut self.params[id.0];
            if p.value.shape() != g.shape() {
                return Err(MathError::Shape {
                    op: "adam_step",
                    shapes: vec![p.value.shape().to_vec(), g.shape().to_vec()],
                });
            }
            p.step += 1;
            let t = p.step as i32;
            let b1 = T::lit(cfg.beta1);
            let b2 = T::lit(cfg.beta2);
            let bc1 = T::lit(1.0 - cfg.beta1.powi(t));
            let bc2 = T::lit(1.0 - cfg.beta2.powi(t));
            let eps = T::lit(cfg.eps);
            let lr = T::lit(lr);
            let one = T::one();
            let Param { value, m, v, .. } = p;
            let (value, m, v) = (value.data_mut(), m.data_mut(), v.data_mut());
            for (i, &gi) in g.data().iter().enumerate() {
                let mi = b1 * m[i] + (one - b1) * gi;
                let vi = b2 * v[i] + (one - b2) * gi * gi;
                m[i] = mi;
                v[i] = vi;
                value[i] -= lr * (mi / bc1) / ((vi / bc2).sqrt() + eps);
            }
        }
        Ok(())
    }
}
