use candle_core::{DType, Tensor, Var};

use crate::error::{DiscError, Result};

/// Ordered parameter groups g_1..g_L (input side first) with an unlock
/// index i: groups 1..=i are trainable, the rest are held at their
/// recorded initialization.
#[derive(Debug)]
pub struct LayerGroups {
    names: Vec<String>,
    groups: Vec<Vec<Var>>,
    init: Vec<Vec<Tensor>>,
    unlock: usize,
}

impl LayerGroups {
    pub fn new(named: Vec<(String, Vec<Var>)>) -> Result<Self> {
        let (names, groups): (Vec<_>, Vec<_>) = named.into_iter().unzip();
        let mut g = Self {
            names,
            groups,
            init: Vec::new(),
            unlock: 0,
        };
        g.snapshot_init()?;
        Ok(g)
    }

    /// L, the number of groups.
    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn unlock_index(&self) -> usize {
        self.unlock
    }

    /// Make exactly groups 1..=i trainable and restore every later group to
    /// its snapshot.
    pub fn set_unlock(&mut self, i: usize) -> Result<()> {
        if i > self.len() {
            return Err(DiscError::Config(format!(
                "unlock index {i} out of range 0..={}",
                self.len()
            )));
        }
        for k in i..self.len() {
            for (v, t) in self.groups[k].iter().zip(&self.init[k]) {
                v.set(t)?;
            }
        }
        self.unlock = i;
        Ok(())
    }

    pub fn trainable_vars(&self) -> Vec<Var> {
        self.groups[..self.unlock].iter().flatten().cloned().collect()
    }

    pub fn all_vars(&self) -> Vec<Var> {
        self.groups.iter().flatten().cloned().collect()
    }

    pub fn group(&self, k: usize) -> &[Var] {
        &self.groups[k]
    }

    /// Record current values as the initialization that frozen groups are held at.
    pub fn snapshot_init(&mut self) -> Result<()> {
        self.init = self
            .groups
            .iter()
            .map(|g| g.iter().map(|v| v.as_tensor().copy()).collect::<candle_core::Result<Vec<_>>>())
            .collect::<candle_core::Result<Vec<_>>>()?;
        Ok(())
    }

    /// Bitwise comparison of group k against its snapshot.
    pub fn group_matches_init(&self, k: usize) -> Result<bool> {
        for (v, t) in self.groups[k].iter().zip(&self.init[k]) {
            if !bitwise_equal(v.as_tensor(), t)? {
                return Ok(false);
            }
        }
        Ok(true)
    }

    /// True when every group beyond the unlock index still equals its snapshot.
    pub fn verify_frozen(&self) -> Result<bool> {
        for k in self.unlock..self.len() {
            if !self.group_matches_init(k)? {
                return Ok(false);
            }
        }
        Ok(true)
    }

    /// Current values of every group, for external snapshot comparisons.
    pub fn values(&self) -> Result<Vec<Vec<Tensor>>> {
        Ok(self
            .groups
            .iter()
            .map(|g| g.iter().map(|v| v.as_tensor().copy()).collect::<candle_core::Result<Vec<_>>>())
            .collect::<candle_core::Result<Vec<_>>>()?)
    }
}

pub fn bitwise_equal(a: &Tensor, b: &Tensor) -> Result<bool> {
    if a.dims() != b.dims() || a.dtype() != b.dtype() {
        return Ok(false);
    }
    let bits = |t: &Tensor| -> Result<Vec<u64>> {
        let v: Vec<f64> = t.flatten_all()?.to_dtype(DType::F64)?.to_vec1()?;
        Ok(v.into_iter().map(f64::to_bits).collect())
    };
    Ok(bits(a)? == bits(b)?)
}
