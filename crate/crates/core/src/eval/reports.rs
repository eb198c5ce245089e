use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::write_csv_with_header;
use crate::model::{FfnModule, Model, NeuronId, NeuronSpace};
use crate::trainer::{LayerGroups, GROUP_NAMES};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupChange {
    pub group: String,
    pub module: FfnModule,
    pub first_layer: usize,
    /// Exclusive.
    pub end_layer: usize,
    pub selected_columns: usize,
    /// Mean |W1 - W0| over the weight entries of the given neurons' columns.
    pub selected_mean_abs_change: f64,
    /// The same over every other column of the group.
    pub outside_mean_abs_change: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerGroupReport {
    pub groups: LayerGroups,
    pub rows: Vec<GroupChange>,
}

impl LayerGroupReport {
    pub fn get(&self, group: usize, module: FfnModule) -> &GroupChange {
        let m = FfnModule::ALL.iter().position(|&x| x == module).expect("module");
        &self.rows[group * 3 + m]
    }

    pub fn save(&self, path: &Path, comments: &[(String, String)]) -> Result<()> {
        write_csv_with_header(path, comments, &self.rows)
    }
}

/// Mean absolute weight change per (layer group, module), split between the
/// columns of `neurons` and all remaining columns.
pub fn gradient_change_report(
    initial: &Model,
    final_model: &Model,
    neurons: &[NeuronId],
    groups: LayerGroups,
) -> Result<LayerGroupReport> {
    if initial.config() != final_model.config() {
        return Err(Error::shape("gradient_change_report", "checkpoints differ in shape"));
    }
    let space = initial.space();
    if groups.n_layers != space.n_layers {
        return Err(Error::shape(
            "gradient_change_report",
            format!("grouping covers {} layers, model has {}", groups.n_layers, space.n_layers),
        ));
    }
    for id in neurons {
        space.check(*id)?;
    }
    let chosen: BTreeSet<NeuronId> = neurons.iter().copied().collect();
    // [group][module] -> (sum, entries, columns) inside and outside
    let mut inside = [[(0.0f64, 0usize, 0usize); 3]; 3];
    let mut outside = [[(0.0f64, 0usize); 3]; 3];
    for l in 0..space.n_layers {
        let g = groups.group(l);
        for (mi, m) in FfnModule::ALL.into_iter().enumerate() {
            let a = initial.ffn_weight(l, m);
            let b = final_model.ffn_weight(l, m);
            let cols = a.cols();
            let rows = a.len() / cols;
            for j in 0..cols {
                let s: f64 = (0..rows)
                    .map(|r| (b.data()[r * cols + j] - a.data()[r * cols + j]).abs())
                    .sum();
                if chosen.contains(&NeuronId::new(l, m, j)) {
                    let e = &mut inside[g][mi];
                    e.0 += s;
                    e.1 += rows;
                    e.2 += 1;
                } else {
                    let e = &mut outside[g][mi];
                    e.0 += s;
                    e.1 += rows;
                }
            }
        }
    }
    let bounds = [
        (0, groups.lower_end),
        (groups.lower_end, groups.middle_end),
        (groups.middle_end, groups.n_layers),
    ];
    let mean = |s: f64, n: usize| if n == 0 { 0.0 } else { s / n as f64 };
    let mut rows = Vec::with_capacity(9);
    for g in 0..3 {
        for (mi, m) in FfnModule::ALL.into_iter().enumerate() {
            rows.push(GroupChange {
                group: GROUP_NAMES[g].into(),
                module: m,
                first_layer: bounds[g].0,
                end_layer: bounds[g].1,
                selected_columns: inside[g][mi].2,
                selected_mean_abs_change: mean(inside[g][mi].0, inside[g][mi].1),
                outside_mean_abs_change: mean(outside[g][mi].0, outside[g][mi].1),
            });
        }
    }
    Ok(LayerGroupReport { groups, rows })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionRow {
    pub module: FfnModule,
    pub layer: usize,
    pub index_bin: usize,
    pub index_lo: usize,
    /// Exclusive.
    pub index_hi: usize,
    pub count: usize,
}

/// Selected-neuron counts per (module, layer, index bin): heatmap data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionTable {
    pub index_bins: usize,
    pub rows: Vec<DistributionRow>,
}

impl DistributionTable {
    pub fn module_total(&self, module: FfnModule) -> usize {
        self.rows.iter().filter(|r| r.module == module).map(|r| r.count).sum()
    }

    pub fn save(&self, path: &Path, comments: &[(String, String)]) -> Result<()> {
        write_csv_with_header(path, comments, &self.rows)
    }
}

/// Splits each module's index range `[0, width)` into `index_bins` nearly
/// equal bins; neuron `j` lands in bin `j * index_bins / width`.
pub fn neuron_distribution_report(
    space: NeuronSpace,
    neurons: &[NeuronId],
    index_bins: usize,
) -> Result<DistributionTable> {
    if neurons.is_empty() {
        return Err(Error::Invalid("selection is empty".into()));
    }
    if index_bins == 0 {
        return Err(Error::Config("index_bins must be positive".into()));
    }
    let mut rows = Vec::new();
    for m in FfnModule::ALL {
        let w = space.width(m);
        let bins = index_bins.min(w);
        for l in 0..space.n_layers {
            for b in 0..bins {
                rows.push(DistributionRow {
                    module: m,
                    layer: l,
                    index_bin: b,
                    index_lo: (b * w).div_ceil(bins),
                    index_hi: ((b + 1) * w).div_ceil(bins),
                    count: 0,
                });
            }
        }
    }
    for id in neurons {
        space.check(*id)?;
        let w = space.width(id.module);
        let bins = index_bins.min(w);
        let b = id.index * bins / w;
        let row = rows
            .iter_mut()
            .find(|r| r.module == id.module && r.layer == id.layer && r.index_bin == b)
            .expect("every bin has a row");
        row.count += 1;
    }
    Ok(DistributionTable { index_bins, rows })
}
