//! Parameter storage shared across tapes, with optimizer-group tags.

use crate::tape::Scalar;
use ndarray::ArrayD;
use std::sync::Arc;

pub type PId = usize;

/// Which optimizer owns a parameter, and whether critic clipping
/// applies to it.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum ParamGroup {
    /// MCN encoder-decoder (decoupled-weight-decay optimizer).
    McnBackbone,
    /// Generators, normal generator, fusion/attention parameters.
    Generator,
    /// Wasserstein critics (weight-clipped).
    Critic,
}

pub struct ParamEntry<F: Scalar> {
    pub name: String,
    pub value: Arc<ArrayD<F>>,
    pub group: ParamGroup,
}

pub struct ParamStore<F: Scalar> {
    entries: Vec<ParamEntry<F>>,
}

impl<F: Scalar> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new() }
    }

    pub fn register(&mut self, name: impl Into<String>, value: ArrayD<F>, group: ParamGroup) -> PId {
        self.entries.push(ParamEntry {
            name: name.into(),
            value: Arc::new(value),
            group,
        });
        self.entries.len() - 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value(&self, id: PId) -> &Arc<ArrayD<F>> {
        &self.entries[id].value
    }

    pub fn name(&self, id: PId) -> &str {
        &self.entries[id].name
    }

    pub fn group(&self, id: PId) -> ParamGroup {
        self.entries[id].group
    }

    pub fn set_value(&mut self, id: PId, value: ArrayD<F>) {
        self.entries[id].value = Arc::new(value);
    }

    /// In-place mutation; copy-on-write if a tape still holds the Arc.
    pub fn update(&mut self, id: PId, f: impl FnOnce(&mut ArrayD<F>)) {
        f(Arc::make_mut(&mut self.entries[id].value));
    }

    pub fn ids(&self) -> impl Iterator<Item = PId> {
        0..self.entries.len()
    }

    pub fn ids_in_group(&self, group: ParamGroup) -> Vec<PId> {
        (0..self.entries.len())
            .filter(|&i| self.entries[i].group == group)
            .collect()
    }

    /// Clamp every parameter in the group to `[-c, c]`.
    pub fn clip_group(&mut self, group: ParamGroup, c: F) {
        for i in 0..self.entries.len() {
            if self.entries[i].group == group {
                self.update(i, |a| {
                    a.mapv_inplace(|v| {
                        if v > c {
                            c
                        } else if v < -c {
                            -c
                        } else {
                            v
                        }
                    })
                });
            }
        }
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }
}

/// Per-parameter gradient accumulator (summed over samples, then scaled).
pub struct GradAccum<F: Scalar> {
    by_param: Vec<Option<ArrayD<F>>>,
}

impl<F: Scalar> GradAccum<F> {
    pub fn new(n_params: usize) -> Self {
        GradAccum {
            by_param: (0..n_params).map(|_| None).collect(),
        }
    }

    /// Fold gradients from one tape's backward pass into the accumulator.
    pub fn absorb(&mut self, tape: &crate::tape::Tape<F>, grads: &crate::tape::Grads<F>) {
        for id in 0..self.by_param.len() {
            if let Some(g) = tape.param_grad(grads, id) {
                match &mut self.by_param[id] {
                    Some(acc) => *acc += g,
                    slot @ None => *slot = Some(g.clone()),
                }
            }
        }
    }

    pub fn scale(&mut self, s: F) {
        for g in self.by_param.iter_mut().flatten() {
            g.mapv_inplace(|v| v * s);
        }
    }

    pub fn get(&self, id: PId) -> Option<&ArrayD<F>> {
        self.by_param[id].as_ref()
    }

    /// Largest absolute gradient entry (NaN-propagating), for diagnostics.
    pub fn max_abs(&self) -> F {
        let mut m = F::zero();
        for g in self.by_param.iter().flatten() {
            for &v in g.iter() {
                if v.abs() > m || v != v {
                    m = v.abs();
                }
            }
        }
        m
    }

    pub fn all_finite(&self) -> bool {
        self.by_param
            .iter()
            .flatten()
            .all(|g| g.iter().all(|v| v.is_finite()))
    }
}
