use std::collections::HashMap;

use crate::error::{MsdemError, Result};
use crate::numerics::Tensor;

/// Index of a parameter inside its owning [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize, serde::Deserialize)]
#[serde(transparent)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Option<Tensor>,
    pub frozen: bool,
}

/// Round every entry onto the `f32` grid. Stored parameter values always
/// satisfy this so that 32-bit checkpoints are lossless.
pub(crate) fn round_to_f32(t: &mut Tensor) {
    for v in t.data_mut() {
        *v = *v as f32 as f64;
    }
}

/// Owning registry of all parameters of a model, addressed by [`ParamId`]
/// and by unique name.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a trainable parameter. The value is rounded to `f32`.
    pub fn add(&mut self, name: impl Into<String>, mut value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(MsdemError::invalid(format!("duplicate parameter `{name}`")));
        }
        value.check_finite("parameter init")?;
        round_to_f32(&mut value);
        let id = ParamId(self.params.len());
        self.params.push(Parameter {
            name: name.clone(),
            value,
            grad: None,
            frozen: false,
        });
        self.by_name.insert(name, id);
        Ok(id)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub(crate) fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn trainable(&self) -> Vec<ParamId> {
        self.iter().filter(|(_, p)| !p.frozen).map(|(id, _)| id).collect()
    }

    /// Permanently freeze a parameter; its gradient slot is dropped.
    pub fn freeze(&mut self, id: ParamId) {
        let p = &mut self.params[id.0];
        p.frozen = true;
        p.grad = None;
    }

    /// Overwrite a value, e.g. when restoring a checkpoint or perturbing for
    /// a finite-difference probe. Frozen parameters are refused.
    pub fn set_value(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.frozen {
            return Err(MsdemError::Frozen(p.name.clone()));
        }
        if p.value.shape() != value.shape() {
            return Err(MsdemError::Shape {
                op: "set_value",
                lhs: p.value.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        p.value = value;
        Ok(())
    }

    /// Install gradients produced by a backward pass.
    pub fn set_grads(&mut self, grads: crate::numerics::Gradients) -> Result<()> {
        for (id, g) in grads {
            let p = &mut self.params[id.0];
            if p.frozen {
                return Err(MsdemError::Frozen(p.name.clone()));
            }
            if g.shape() != p.value.shape() {
                return Err(MsdemError::Shape {
                    op: "set_grads",
                    lhs: p.value.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            p.grad = Some(g);
        }
        Ok(())
    }

    pub fn clear_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    pub fn numel(&self, id: ParamId) -> usize {
        self.params[id.0].value.numel()
    }
}
