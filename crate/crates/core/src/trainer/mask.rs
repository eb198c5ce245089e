use crate::error::{Error, Result};
use crate::model::{FfnModule, Model, NeuronId, NeuronSpace};

/// Boolean output-column mask for every FFN projection. Column `i` of module
/// `m` in layer `l` is set iff neuron `(l, m, i)` is selected; the same
/// pattern applies to that module's bias.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SelectionMask {
    space: NeuronSpace,
    columns: Vec<bool>,
}

impl SelectionMask {
    pub fn build(neurons: &[NeuronId], space: NeuronSpace) -> Result<Self> {
        let mut columns = vec![false; space.len()];
        for &id in neurons {
            space.check(id)?;
            columns[space.flat(id)] = true;
        }
        Ok(Self { space, columns })
    }

    pub fn empty(space: NeuronSpace) -> Self {
        Self {
            space,
            columns: vec![false; space.len()],
        }
    }

    pub fn full(space: NeuronSpace) -> Self {
        Self {
            space,
            columns: vec![true; space.len()],
        }
    }

    pub fn space(&self) -> NeuronSpace {
        self.space
    }

    pub fn columns(&self, layer: usize, module: FfnModule) -> &[bool] {
        &self.columns[self.space.range(layer, module)]
    }

    pub fn contains(&self, id: NeuronId) -> bool {
        self.space.contains(id) && self.columns[self.space.flat(id)]
    }

    pub fn popcount(&self) -> usize {
        self.columns.iter().filter(|&&c| c).count()
    }

    pub fn selected(&self) -> Vec<NeuronId> {
        (0..self.columns.len())
            .filter(|&i| self.columns[i])
            .map(|i| self.space.id(i))
            .collect()
    }

    /// Trainable parameter entries: each selected column's fan-in plus one
    /// bias entry.
    pub fn entry_count(&self) -> u64 {
        self.selected()
            .iter()
            .map(|id| match id.module {
                FfnModule::Gate | FfnModule::Up => self.space.d_model as u64 + 1,
                FfnModule::Down => self.space.d_ffn as u64 + 1,
            })
            .sum()
    }

    pub fn check_model(&self, model: &Model) -> Result<()> {
        if self.space != model.space() {
            return Err(Error::Invalid(format!(
                "mask built for {:?} but the model has {:?}",
                self.space,
                model.space()
            )));
        }
        Ok(())
    }
}
