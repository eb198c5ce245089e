#![allow(dead_code)]

use caneft::corpus::GenConfig;
use caneft::model::ModelConfig;
use caneft::pipeline::PipelineConfig;

/// A pipeline config small enough for every stage to finish in well under a
/// second.
pub fn tiny_config() -> PipelineConfig {
    let benchmark = GenConfig {
        core_vocab: 12,
        domain_vocab: 3,
        selection_per_domain: 12,
        finetune_per_domain: 6,
        test_per_domain: 4,
        pretrain_examples: 20,
        ..GenConfig::default()
    };
    let mut c = PipelineConfig {
        model: ModelConfig {
            n_layers: 2,
            d_model: 8,
            d_ffn: 12,
            n_heads: 2,
            vocab_size: benchmark.vocab_size(),
            max_seq_len: 3 * benchmark.max_source_len,
            rms_eps: 1e-6,
            seed: 1,
        },
        benchmark,
        importance_samples: 12,
        ..PipelineConfig::default()
    };
    c.pretrain.steps = 5;
    c.pretrain.batch_size = 4;
    c.finetune.steps = 5;
    c.finetune.batch_size = 4;
    c.selection.budget_ratio = 0.05;
    c.selection.pool_ratio = 0.5;
    c.selection.bins = 4;
    c.index_bins = 3;
    c
}
