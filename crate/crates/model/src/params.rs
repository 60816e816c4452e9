//! Named, ordered parameter sets.
//!
//! A `ParamSet` is the single source of truth for a component's weights:
//! insertion order is the canonical order used by the optimizer and the
//! gradient checker, names are used by checkpoints and the integrity
//! manifest. `VarSet` mirrors a set onto a graph for one forward pass.

use std::fs;
use std::path::Path;

use fmd_tensor::{io, Graph, Scalar, Tensor, Var};

use crate::error::{validation, ModelError, Result};

#[derive(Clone, Debug)]
pub struct ParamSet<E: Scalar> {
    entries: Vec<(String, Tensor<E>)>,
}

impl<E: Scalar> Default for ParamSet<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Scalar> ParamSet<E> {
    pub fn new() -> ParamSet<E> {
        ParamSet {
            entries: Vec::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<E>) {
        let name = name.into();
        assert!(
            self.get(&name).is_none(),
            "duplicate parameter name '{name}'"
        );
        self.entries.push((name, t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<E>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[(String, Tensor<E>)] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [(String, Tensor<E>)] {
        &mut self.entries
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    /// Merges `other` under `prefix.`.
    pub fn adopt(&mut self, prefix: &str, other: ParamSet<E>) {
        for (name, t) in other.entries {
            self.insert(format!("{prefix}.{name}"), t);
        }
    }

    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Inserts every tensor into `g` (trainable leaves or constants),
    /// preserving order.
    pub fn vars<'g>(&self, g: &'g Graph<E>, trainable: bool) -> VarSet<'g, E> {
        let entries = self
            .entries
            .iter()
            .map(|(n, t)| {
                let v = if trainable {
                    g.leaf(t.clone())
                } else {
                    g.constant(t.clone())
                };
                (n.clone(), v)
            })
            .collect();
        VarSet { entries }
    }

    /// Pairs this set's names with externally supplied vars, in order; used
    /// by the gradient checker, which owns the leaves.
    pub fn vars_from_ordered<'g>(&self, vars: &[Var<'g, E>]) -> Result<VarSet<'g, E>> {
        if vars.len() < self.entries.len() {
            return Err(validation(format!(
                "expected at least {} vars, got {}",
                self.entries.len(),
                vars.len()
            )));
        }
        Ok(VarSet {
            entries: self
                .entries
                .iter()
                .zip(vars)
                .map(|((n, _), v)| (n.clone(), *v))
                .collect(),
        })
    }

    /// Ordered tensors, for handing to the gradient checker.
    pub fn tensors(&self) -> Vec<Tensor<E>> {
        self.entries.iter().map(|(_, t)| t.clone()).collect()
    }

    /// Writes every tensor as `<name>.fdtn` plus a `manifest.txt` of
    /// `name<TAB>dims` lines used as an integrity check on load.
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| validation(format!("create {dir:?}: {e}")))?;
        let mut manifest = String::new();
        for (name, t) in &self.entries {
            let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
            manifest.push_str(&format!("{name}\t{}\n", dims.join(" ")));
            io::save_tensor(&dir.join(format!("{name}.fdtn")), t)?;
        }
        fs::write(dir.join("manifest.txt"), manifest)
            .map_err(|e| validation(format!("write manifest: {e}")))?;
        Ok(())
    }

    /// Loads a directory written by `save_dir`, in manifest order, verifying
    /// each tensor's shape against the manifest.
    pub fn load_dir(dir: &Path) -> Result<ParamSet<E>> {
        let manifest = fs::read_to_string(dir.join("manifest.txt"))
            .map_err(|e| validation(format!("read manifest in {dir:?}: {e}")))?;
        let mut set = ParamSet::new();
        for line in manifest.lines() {
            if line.trim().is_empty() {
                continue;
            }
            let (name, dims) = line
                .split_once('\t')
                .ok_or_else(|| validation(format!("malformed manifest line '{line}'")))?;
            let shape: Vec<usize> = dims
                .split_whitespace()
                .map(|d| {
                    d.parse()
                        .map_err(|_| validation(format!("bad dim '{d}' for '{name}'")))
                })
                .collect::<Result<_>>()?;
            let t: Tensor<E> = io::load_tensor(&dir.join(format!("{name}.fdtn")))?;
            if t.shape() != shape.as_slice() {
                return Err(validation(format!(
                    "parameter '{name}' has shape {:?}, manifest says {shape:?}",
                    t.shape()
                )));
            }
            set.insert(name, t);
        }
        Ok(set)
    }
}

/// Graph-side view of a `ParamSet` for one forward pass.
pub struct VarSet<'g, E: Scalar> {
    entries: Vec<(String, Var<'g, E>)>,
}

impl<'g, E: Scalar> VarSet<'g, E> {
    pub fn get(&self, name: &str) -> Result<Var<'g, E>> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))
    }

    pub fn entries(&self) -> &[(String, Var<'g, E>)] {
        &self.entries
    }

    /// Sub-view with `prefix.` prepended to every lookup.
    pub fn scope<'a>(&'a self, prefix: &str) -> Scope<'a, 'g, E> {
        Scope {
            set: self,
            prefix: prefix.to_string(),
        }
    }

    /// View with bare names.
    pub fn root<'a>(&'a self) -> Scope<'a, 'g, E> {
        Scope {
            set: self,
            prefix: String::new(),
        }
    }
}

pub struct Scope<'a, 'g, E: Scalar> {
    set: &'a VarSet<'g, E>,
    prefix: String,
}

impl<'a, 'g, E: Scalar> Scope<'a, 'g, E> {
    fn joined(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn get(&self, name: &str) -> Result<Var<'g, E>> {
        self.set.get(&self.joined(name))
    }

    pub fn scope(&self, prefix: &str) -> Scope<'a, 'g, E> {
        Scope {
            set: self.set,
            prefix: self.joined(prefix),
        }
    }
}

/// Xavier-uniform bound `sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}
