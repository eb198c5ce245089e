use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::ModelConfig;
use crate::error::{Error, Result};

/// One of the three projections inside a gated FFN block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FfnModule {
    Gate,
    Up,
    Down,
}

impl FfnModule {
    pub const ALL: [FfnModule; 3] = [FfnModule::Gate, FfnModule::Up, FfnModule::Down];

    pub fn as_str(self) -> &'static str {
        match self {
            FfnModule::Gate => "gate",
            FfnModule::Up => "up",
            FfnModule::Down => "down",
        }
    }
}

impl fmt::Display for FfnModule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FfnModule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gate" => Ok(FfnModule::Gate),
            "up" => Ok(FfnModule::Up),
            "down" => Ok(FfnModule::Down),
            other => Err(Error::Invalid(format!("unknown FFN module {other:?}"))),
        }
    }
}

/// Coordinate of a single FFN neuron: an output column of one projection.
///
/// Ordering is `(layer, module, index)`, which is the order every report and
/// every tie-break uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NeuronId {
    pub layer: usize,
    pub module: FfnModule,
    pub index: usize,
}

impl NeuronId {
    pub fn new(layer: usize, module: FfnModule, index: usize) -> Self {
        Self {
            layer,
            module,
            index,
        }
    }
}

impl fmt::Display for NeuronId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{}.{}[{}]", self.layer, self.module, self.index)
    }
}

/// Dense indexing of every FFN neuron of a model.
///
/// Flat index order matches [`NeuronId`] ordering: layer-major, then gate,
/// up, down.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NeuronSpace {
    pub n_layers: usize,
    pub d_ffn: usize,
    pub d_model: usize,
}

impl NeuronSpace {
    pub fn from_config(c: &ModelConfig) -> Self {
        Self {
            n_layers: c.n_layers,
            d_ffn: c.d_ffn,
            d_model: c.d_model,
        }
    }

    pub fn per_layer(&self) -> usize {
        2 * self.d_ffn + self.d_model
    }

    pub fn len(&self) -> usize {
        self.n_layers * self.per_layer()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Output width of a module, i.e. its neuron count per layer.
    pub fn width(&self, module: FfnModule) -> usize {
        match module {
            FfnModule::Gate | FfnModule::Up => self.d_ffn,
            FfnModule::Down => self.d_model,
        }
    }

    fn module_offset(&self, module: FfnModule) -> usize {
        match module {
            FfnModule::Gate => 0,
            FfnModule::Up => self.d_ffn,
            FfnModule::Down => 2 * self.d_ffn,
        }
    }

    pub fn contains(&self, id: NeuronId) -> bool {
        id.layer < self.n_layers && id.index < self.width(id.module)
    }

    pub fn check(&self, id: NeuronId) -> Result<()> {
        if self.contains(id) {
            Ok(())
        } else {
            Err(Error::Invalid(format!(
                "neuron {id} is outside a model with {} layers, d_ffn {}, d_model {}",
                self.n_layers, self.d_ffn, self.d_model
            )))
        }
    }

    pub fn flat(&self, id: NeuronId) -> usize {
        id.layer * self.per_layer() + self.module_offset(id.module) + id.index
    }

    pub fn id(&self, flat: usize) -> NeuronId {
        let layer = flat / self.per_layer();
        let r = flat % self.per_layer();
        let (module, index) = if r < self.d_ffn {
            (FfnModule::Gate, r)
        } else if r < 2 * self.d_ffn {
            (FfnModule::Up, r - self.d_ffn)
        } else {
            (FfnModule::Down, r - 2 * self.d_ffn)
        };
        NeuronId::new(layer, module, index)
    }

    pub fn iter(&self) -> impl Iterator<Item = NeuronId> + '_ {
        (0..self.len()).map(move |i| self.id(i))
    }

    /// Flat range covered by one module of one layer.
    pub fn range(&self, layer: usize, module: FfnModule) -> std::ops::Range<usize> {
        let start = layer * self.per_layer() + self.module_offset(module);
        start..start + self.width(module)
    }
}
