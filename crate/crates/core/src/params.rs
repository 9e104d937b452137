//! Named parameter tables, linear-layer re-parameterizations and tape binding.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, NodeId, Tape};
use crate::digest::Hasher;
use crate::error::{Error, Result};
use crate::linalg::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamRole {
    Weight,
    Bias,
    NormWeight,
    NormBias,
    PosEmbed,
    SvfU,
    SvfS,
    SvfVt,
    LoraA,
    LoraB,
}

impl ParamRole {
    pub fn is_bias(self) -> bool {
        matches!(self, ParamRole::Bias | ParamRole::NormBias)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub value: Matrix,
    pub trainable: bool,
    pub role: ParamRole,
}

impl Param {
    pub fn numel(&self) -> usize {
        self.value.len()
    }
}

/// How a linear layer `y = x·Wᵀ + b` obtains its effective weight.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "form")]
pub enum LinearForm {
    Dense,
    /// `W = U·diag(s)·Vt`, stored as `<prefix>.svf_u`, `.svf_s`, `.svf_vt`.
    Svf,
    /// `y = x·Wᵀ + b + (alpha/rank)·(x·Aᵀ)·Bᵀ`, stored as `<prefix>.lora_a`, `.lora_b`.
    Lora { rank: usize, alpha: f64 },
    /// A LoRA delta that has been folded into `<prefix>.weight`.
    LoraMerged { rank: usize, alpha: f64 },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamTable {
    params: Vec<Param>,
    linears: BTreeMap<String, LinearForm>,
}

impl ParamTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Matrix, role: ParamRole, trainable: bool) {
        let name = name.into();
        match self.position(&name) {
            Some(i) => self.params[i] = Param { name, value, trainable, role },
            None => self.params.push(Param { name, value, trainable, role }),
        }
    }

    /// Register `<prefix>.weight` (out × in) and optionally `<prefix>.bias` as a dense linear layer.
    pub fn insert_linear(&mut self, prefix: &str, weight: Matrix, bias: Option<Matrix>) {
        self.insert(format!("{prefix}.weight"), weight, ParamRole::Weight, true);
        if let Some(b) = bias {
            self.insert(format!("{prefix}.bias"), b, ParamRole::Bias, true);
        }
        self.linears.insert(prefix.into(), LinearForm::Dense);
    }

    pub fn remove(&mut self, name: &str) -> Option<Param> {
        self.position(name).map(|i| self.params.remove(i))
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.params.iter().find(|p| p.name == name).ok_or_else(|| Error::MissingParam(name.into()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param> {
        self.params.iter_mut().find(|p| p.name == name).ok_or_else(|| Error::MissingParam(name.into()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.position(name).is_some()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn by_index(&self, i: usize) -> &Param {
        &self.params[i]
    }

    pub fn by_index_mut(&mut self, i: usize) -> &mut Param {
        &mut self.params[i]
    }

    pub fn linear_form(&self, prefix: &str) -> Option<LinearForm> {
        self.linears.get(prefix).copied()
    }

    pub fn set_linear_form(&mut self, prefix: &str, form: LinearForm) {
        self.linears.insert(prefix.into(), form);
    }

    /// Linear-layer prefixes in sorted order.
    pub fn linear_prefixes(&self) -> impl Iterator<Item = &str> {
        self.linears.keys().map(|s| s.as_str())
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        self.params.iter_mut().for_each(|p| p.trainable = trainable);
    }

    pub fn total_count(&self) -> usize {
        self.params.iter().map(Param::numel).sum()
    }

    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(Param::numel).sum()
    }

    /// SHA-256 of each parameter's value bits, keyed by name.
    pub fn digests(&self) -> BTreeMap<String, String> {
        self.params
            .iter()
            .map(|p| (p.name.clone(), Hasher::new().u64(p.value.rows as u64).f64s(&p.value.data).finish_hex()))
            .collect()
    }

    /// The effective dense weight of a linear layer, whatever its form.
    pub fn effective_weight(&self, prefix: &str) -> Result<Matrix> {
        match self.linear_form(prefix).ok_or_else(|| Error::MissingParam(prefix.into()))? {
            LinearForm::Dense | LinearForm::LoraMerged { .. } => Ok(self.get(&format!("{prefix}.weight"))?.value.clone()),
            LinearForm::Svf => {
                let u = &self.get(&format!("{prefix}.svf_u"))?.value;
                let s = &self.get(&format!("{prefix}.svf_s"))?.value;
                let vt = &self.get(&format!("{prefix}.svf_vt"))?.value;
                Ok(u.mul_cols(&s.data).matmul(vt))
            }
            LinearForm::Lora { rank, alpha } => {
                let w = &self.get(&format!("{prefix}.weight"))?.value;
                let a = &self.get(&format!("{prefix}.lora_a"))?.value;
                let b = &self.get(&format!("{prefix}.lora_b"))?.value;
                Ok(w.add(&b.matmul(a).scale(alpha / rank as f64)))
            }
        }
    }
}

/// Lazily creates one tape leaf per parameter for a single forward pass.
pub struct Binder {
    leaves: Vec<Option<NodeId>>,
    grad: bool,
}

impl Binder {
    /// `grad = false` creates every leaf as a constant regardless of the trainable flag.
    pub fn new(table: &ParamTable, grad: bool) -> Self {
        Binder { leaves: alloc::vec![None; table.len()], grad }
    }

    pub fn get(&mut self, tape: &mut Tape, table: &ParamTable, name: &str) -> Result<NodeId> {
        let i = table.position(name).ok_or_else(|| Error::MissingParam(name.into()))?;
        if let Some(id) = self.leaves[i] {
            return Ok(id);
        }
        let p = &table.params[i];
        let id = tape.leaf(p.value.clone(), self.grad && p.trainable);
        self.leaves[i] = Some(id);
        Ok(id)
    }

    /// Apply the linear layer registered under `prefix` to the rows of `x`.
    pub fn linear(&mut self, tape: &mut Tape, table: &ParamTable, x: NodeId, prefix: &str) -> Result<NodeId> {
        let form = table.linear_form(prefix).ok_or_else(|| Error::MissingParam(format!("{prefix} (linear layer)")))?;
        let mut y = match form {
            LinearForm::Dense | LinearForm::LoraMerged { .. } => {
                let w = self.get(tape, table, &format!("{prefix}.weight"))?;
                tape.matmul_nt(x, w)
            }
            LinearForm::Svf => {
                let u = self.get(tape, table, &format!("{prefix}.svf_u"))?;
                let s = self.get(tape, table, &format!("{prefix}.svf_s"))?;
                let vt = self.get(tape, table, &format!("{prefix}.svf_vt"))?;
                let us = tape.mul_cols(u, s);
                let w = tape.matmul(us, vt);
                tape.matmul_nt(x, w)
            }
            LinearForm::Lora { .. } => {
                let w = self.get(tape, table, &format!("{prefix}.weight"))?;
                tape.matmul_nt(x, w)
            }
        };
        let bias = format!("{prefix}.bias");
        if table.contains(&bias) {
            let b = self.get(tape, table, &bias)?;
            y = tape.add_row(y, b);
        }
        if let LinearForm::Lora { rank, alpha } = form {
            let a = self.get(tape, table, &format!("{prefix}.lora_a"))?;
            let b = self.get(tape, table, &format!("{prefix}.lora_b"))?;
            let xa = tape.matmul_nt(x, a);
            let delta = tape.matmul_nt(xa, b);
            let delta = tape.scale(delta, alpha / rank as f64);
            y = tape.add(y, delta);
        }
        Ok(y)
    }

    /// Gradients of every bound trainable parameter, as `(table index, gradient)`.
    pub fn gradients(&self, grads: &Gradients) -> Vec<(usize, Matrix)> {
        self.leaves
            .iter()
            .enumerate()
            .filter_map(|(i, leaf)| leaf.and_then(|id| grads.get(id).map(|g| (i, g.clone()))))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn insert_replaces_by_name() {
        let mut t = ParamTable::new();
        t.insert("a", Matrix::zeros(1, 2), ParamRole::Bias, true);
        t.insert("a", Matrix::zeros(1, 3), ParamRole::Bias, false);
        assert_eq!(t.len(), 1);
        assert_eq!(t.total_count(), 3);
        assert_eq!(t.trainable_count(), 0);
    }

    #[test]
    fn dense_linear_forward() {
        let mut t = ParamTable::new();
        t.insert_linear("fc", Matrix::from_vec(2, 3, alloc::vec![1., 0., 0., 0., 1., 1.]), Some(Matrix::row(alloc::vec![0.5, -1.0])));
        let mut tape = Tape::new();
        let mut b = Binder::new(&t, true);
        let x = tape.constant(Matrix::from_vec(1, 3, alloc::vec![2., 3., 4.]));
        let y = b.linear(&mut tape, &t, x, "fc").unwrap();
        assert_eq!(tape.value(y).data, alloc::vec![2.5, 6.0]);
        assert!(b.linear(&mut tape, &t, x, "nope").is_err());
    }

    #[test]
    fn digests_change_with_values() {
        let mut t = ParamTable::new();
        t.insert("w", Matrix::zeros(2, 2), ParamRole::Weight, true);
        let d0 = t.digests();
        t.get_mut("w").unwrap().value.data[3] = 1e-300;
        assert_ne!(d0, t.digests());
    }
}
