use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One named parameter block. Running BN statistics live here too but are
/// flagged non-trainable so the optimizer skips them.
#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub tensor: Tensor,
    pub trainable: bool,
}

/// Flat, ordered parameter arena. Order is fixed by the architecture
/// builder and defines the snapshot layout.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    entries: Vec<ParamEntry>,
}

impl ParamSet {
    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor, trainable: bool) -> usize {
        let name = name.into();
        debug_assert!(
            self.index_of(&name).is_none(),
            "duplicate parameter name {name}"
        );
        self.entries.push(ParamEntry {
            name,
            tensor,
            trainable,
        });
        self.entries.len() - 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, idx: usize) -> &Tensor {
        &self.entries[idx].tensor
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut Tensor {
        &mut self.entries[idx].tensor
    }

    /// Two distinct mutable borrows, used by the BN running-stat update.
    pub fn get_pair_mut(&mut self, a: usize, b: usize) -> (&mut Tensor, &mut Tensor) {
        assert_ne!(a, b);
        if a < b {
            let (lo, hi) = self.entries.split_at_mut(b);
            (&mut lo[a].tensor, &mut hi[0].tensor)
        } else {
            let (lo, hi) = self.entries.split_at_mut(a);
            (&mut hi[0].tensor, &mut lo[b].tensor)
        }
    }

    pub fn entry(&self, idx: usize) -> &ParamEntry {
        &self.entries[idx]
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamEntry> {
        self.entries.iter()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    pub fn by_name(&self, name: &str) -> Result<&Tensor> {
        self.index_of(name)
            .map(|i| &self.entries[i].tensor)
            .ok_or_else(|| Error::Argument(format!("unknown parameter {name}")))
    }

    pub fn by_name_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        match self.index_of(name) {
            Some(i) => Ok(&mut self.entries[i].tensor),
            None => Err(Error::Argument(format!("unknown parameter {name}"))),
        }
    }

    pub fn bits_eq(&self, other: &ParamSet) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|(a, b)| {
                a.name == b.name && a.trainable == b.trainable && a.tensor.bits_eq(&b.tensor)
            })
    }
}
