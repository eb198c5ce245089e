//! Toy decoder-only transformer with traceable gated FFN neurons.
//!
//! Architecture per layer: pre-norm causal attention, then a pre-norm gated FFN
//! `down(silu(gate(x)) * up(x))`. Learned absolute position embeddings, untied
//! LM head. Weight matrices are stored `[in, out]`, so column `i` of an FFN
//! weight is the fan-in of neuron `i`.
//!
//! The neuron taxonomy: a gate neuron's output is the post-SiLU value, an up
//! neuron's output is its projection (bias included), and a down neuron's
//! output is one coordinate of the FFN block's contribution to the residual
//! stream.

mod batch;
mod checkpoint;
mod config;
mod neuron;
mod trace;

pub use batch::{LossWeighting, PackedBatch, Sequence};
pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::ModelConfig;
pub use neuron::{FfnModule, NeuronId, NeuronSpace};
pub use trace::ActivationTrace;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{hex, update_hash, NodeId, Tape, Tensor};

pub const INIT_STD: f64 = 0.02;

/// What a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    TokenEmbedding,
    PositionEmbedding,
    Norm,
    Attention,
    FfnWeight { layer: usize, module: FfnModule },
    FfnBias { layer: usize, module: FfnModule },
    Head,
}

impl ParamKind {
    pub fn is_ffn(self) -> bool {
        matches!(self, ParamKind::FfnWeight { .. } | ParamKind::FfnBias { .. })
    }
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub kind: ParamKind,
    pub tensor: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct LayerParams {
    pub attn_norm: usize,
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
    pub ffn_norm: usize,
    pub gate_w: usize,
    pub gate_b: usize,
    pub up_w: usize,
    pub up_b: usize,
    pub down_w: usize,
    pub down_b: usize,
}

impl LayerParams {
    pub fn ffn_weight(&self, m: FfnModule) -> usize {
        match m {
            FfnModule::Gate => self.gate_w,
            FfnModule::Up => self.up_w,
            FfnModule::Down => self.down_w,
        }
    }

    pub fn ffn_bias(&self, m: FfnModule) -> usize {
        match m {
            FfnModule::Gate => self.gate_b,
            FfnModule::Up => self.up_b,
            FfnModule::Down => self.down_b,
        }
    }
}

/// Parameter indices by role.
#[derive(Debug, Clone)]
pub struct Layout {
    pub tok_emb: usize,
    pub pos_emb: usize,
    pub layers: Vec<LayerParams>,
    pub final_norm: usize,
    pub head: usize,
}

/// Scales one neuron's output by a constant during the forward pass.
/// A factor of 0 ablates the neuron.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intervention {
    pub neuron: NeuronId,
    pub factor: f64,
}

/// Knobs for [`Model::build`].
#[derive(Debug, Default, Clone, Copy)]
pub struct ForwardOptions<'o> {
    /// Per-parameter differentiability; `None` means nothing is trainable.
    pub trainable: Option<&'o [bool]>,
    /// Make the residual input differentiable so activation gradients are
    /// available without computing any parameter gradients.
    pub watch_input: bool,
    pub interventions: &'o [Intervention],
    /// Start at this layer from the given residual stream instead of the
    /// embeddings.
    pub start: Option<(usize, &'o Tensor)>,
}

/// Node handles for one transformer layer.
#[derive(Debug, Clone, Copy)]
pub struct LayerNodes {
    pub resid_in: NodeId,
    pub ffn_in: NodeId,
    /// Post-SiLU gate activations, before any intervention.
    pub gate: NodeId,
    pub up: NodeId,
    pub product: NodeId,
    pub down: NodeId,
    pub resid_out: NodeId,
}

#[derive(Debug, Clone)]
pub struct Graph {
    pub input: NodeId,
    pub params: Vec<NodeId>,
    /// `None` for layers skipped by [`ForwardOptions::start`].
    pub layers: Vec<Option<LayerNodes>>,
    pub logits: NodeId,
}

impl Graph {
    pub fn layer(&self, l: usize) -> Result<&LayerNodes> {
        self.layers
            .get(l)
            .and_then(Option::as_ref)
            .ok_or_else(|| Error::Invalid(format!("layer {l} was not built")))
    }

    pub fn neuron_node(&self, l: usize, m: FfnModule) -> Result<NodeId> {
        let n = self.layer(l)?;
        Ok(match m {
            FfnModule::Gate => n.gate,
            FfnModule::Up => n.up,
            FfnModule::Down => n.down,
        })
    }
}

/// The toy decoder.
#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    params: Vec<Param>,
    layout: Layout,
    step: u64,
    rng: ChaCha8Rng,
}

impl Model {
    /// Seeded initialization: N(0, 0.02) for matrices and embeddings, ones
    /// for norm weights, zeros for biases.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let (params, layout) = allocate(&config);
        let mut model = Self {
            rng: ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_cafe),
            config,
            params,
            layout,
            step: 0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(model.config.seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        for p in &mut model.params {
            match p.kind {
                ParamKind::Norm => p.tensor.data_mut().fill(1.0),
                ParamKind::FfnBias { .. } => p.tensor.data_mut().fill(0.0),
                _ => {
                    for v in p.tensor.data_mut() {
                        *v = normal.sample(&mut rng);
                    }
                }
            }
        }
        Ok(model)
    }

    pub(crate) fn from_parts(
        config: ModelConfig,
        tensors: Vec<Tensor>,
        step: u64,
        rng: ChaCha8Rng,
    ) -> Result<Self> {
        config.validate()?;
        let (mut params, layout) = allocate(&config);
        if tensors.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                params.len(),
                tensors.len()
            )));
        }
        for (p, t) in params.iter_mut().zip(tensors) {
            if p.tensor.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    p.name,
                    t.shape(),
                    p.tensor.shape()
                )));
            }
            p.tensor = t;
        }
        Ok(Self {
            config,
            params,
            layout,
            step,
            rng,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn space(&self) -> NeuronSpace {
        NeuronSpace::from_config(&self.config)
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    pub fn rng(&self) -> &ChaCha8Rng {
        &self.rng
    }

    pub fn rng_mut(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn set_rng(&mut self, rng: ChaCha8Rng) {
        self.rng = rng;
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    /// SHA-256 over every parameter (names, shapes, exact bits).
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.params {
            h.update(p.name.as_bytes());
            update_hash(&mut h, &p.tensor);
        }
        hex(&h.finalize())
    }

    pub fn ffn_weight(&self, layer: usize, m: FfnModule) -> &Tensor {
        &self.params[self.layout.layers[layer].ffn_weight(m)].tensor
    }

    pub fn ffn_bias(&self, layer: usize, m: FfnModule) -> &Tensor {
        &self.params[self.layout.layers[layer].ffn_bias(m)].tensor
    }

    fn check_batch(&self, batch: &PackedBatch) -> Result<()> {
        for s in &batch.segments {
            if s.len > self.config.max_seq_len {
                return Err(Error::Invalid(format!(
                    "sequence of {} tokens exceeds max_seq_len {}",
                    s.len, self.config.max_seq_len
                )));
            }
        }
        if let Some(&t) = batch.tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::Invalid(format!(
                "token id {t} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    /// Records the forward pass of `batch` on `tape`.
    pub fn build<'t>(
        &'t self,
        tape: &mut Tape<'t>,
        batch: &PackedBatch,
        opts: &ForwardOptions<'_>,
    ) -> Result<Graph> {
        self.check_batch(batch)?;
        let c = &self.config;
        let params: Vec<NodeId> = self
            .params
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let rg = opts.trainable.is_some_and(|t| t[i]);
                tape.param(&p.tensor, rg)
            })
            .collect();
        let lay = &self.layout;
        let (first, mut x) = match opts.start {
            Some((layer, resid)) => {
                if layer > c.n_layers {
                    return Err(Error::Invalid(format!("start layer {layer} out of range")));
                }
                if resid.shape() != [batch.rows(), c.d_model] {
                    return Err(Error::shape(
                        "forward",
                        format!("start residual has shape {:?}", resid.shape()),
                    ));
                }
                (layer, tape.leaf(resid.clone())?)
            }
            None => {
                let tok = tape.embedding(params[lay.tok_emb], &batch.tokens)?;
                let pos = tape.embedding(params[lay.pos_emb], &batch.positions)?;
                (0, tape.add(tok, pos)?)
            }
        };
        if opts.watch_input {
            tape.watch(x);
        }
        let input = x;
        let mut layers = vec![None; c.n_layers];
        for (l, lp) in lay.layers.iter().enumerate().skip(first) {
            let resid_in = x;
            let h = tape.rmsnorm(x, params[lp.attn_norm], c.rms_eps)?;
            let q = tape.matmul(h, params[lp.wq])?;
            let k = tape.matmul(h, params[lp.wk])?;
            let v = tape.matmul(h, params[lp.wv])?;
            let a = tape.causal_attention(q, k, v, c.n_heads, &batch.segments)?;
            let o = tape.matmul(a, params[lp.wo])?;
            x = tape.add(x, o)?;
            let ffn_in = x;
            let h = tape.rmsnorm(x, params[lp.ffn_norm], c.rms_eps)?;
            let gp = tape.matmul(h, params[lp.gate_w])?;
            let gp = tape.add_row(gp, params[lp.gate_b])?;
            let gate = tape.silu(gp)?;
            let up = tape.matmul(h, params[lp.up_w])?;
            let up = tape.add_row(up, params[lp.up_b])?;
            let gate_used = intervene(tape, gate, l, FfnModule::Gate, opts.interventions)?;
            let up_used = intervene(tape, up, l, FfnModule::Up, opts.interventions)?;
            let product = tape.mul(gate_used, up_used)?;
            let dn = tape.matmul(product, params[lp.down_w])?;
            let down = tape.add_row(dn, params[lp.down_b])?;
            let down_used = intervene(tape, down, l, FfnModule::Down, opts.interventions)?;
            x = tape.add(x, down_used)?;
            layers[l] = Some(LayerNodes {
                resid_in,
                ffn_in,
                gate,
                up,
                product,
                down,
                resid_out: x,
            });
        }
        let h = tape.rmsnorm(x, params[lay.final_norm], c.rms_eps)?;
        let logits = tape.matmul(h, params[lay.head])?;
        Ok(Graph {
            input,
            params,
            layers,
            logits,
        })
    }

    /// Logits for a packed batch, `[rows, vocab]`.
    pub fn logits(&self, batch: &PackedBatch) -> Result<Tensor> {
        let mut tape = Tape::new();
        let g = self.build(&mut tape, batch, &ForwardOptions::default())?;
        Ok(tape.value(g.logits).clone())
    }

    /// Mean target-token negative log-likelihood of one sequence.
    pub fn sequence_loss(&self, seq: &Sequence) -> Result<f64> {
        self.sequence_loss_with(seq, &[])
    }

    pub fn sequence_loss_with(&self, seq: &Sequence, interventions: &[Intervention]) -> Result<f64> {
        if seq.target_len() == 0 {
            return Err(Error::Invalid("sequence has an empty target".into()));
        }
        let batch = PackedBatch::new(&[seq], LossWeighting::SumOfSequences)?;
        let mut tape = Tape::new();
        let opts = ForwardOptions {
            interventions,
            ..Default::default()
        };
        let g = self.build(&mut tape, &batch, &opts)?;
        let loss = tape.weighted_cross_entropy(g.logits, &batch.targets, &batch.weights)?;
        Ok(tape.value(loss).data()[0])
    }

    /// Logits and, optionally, every FFN neuron's output at every position.
    /// The trace's mean is taken over all positions.
    pub fn forward_with_trace(
        &self,
        tokens: &[usize],
        trace_on: bool,
    ) -> Result<(Tensor, Option<ActivationTrace>)> {
        if tokens.is_empty() {
            return Err(Error::Invalid("empty token sequence".into()));
        }
        let seq = Sequence::prompt_only(tokens.to_vec());
        let batch = PackedBatch::new(&[&seq], LossWeighting::SumOfSequences)?;
        let mut tape = Tape::new();
        let g = self.build(&mut tape, &batch, &ForwardOptions::default())?;
        let trace = if trace_on {
            Some(ActivationTrace::from_graph(
                self.space(),
                &tape,
                &g,
                0..tokens.len(),
                0..tokens.len(),
            )?)
        } else {
            None
        };
        Ok((tape.value(g.logits).clone(), trace))
    }

    /// Trace of a supervised sequence, averaged over its target positions.
    pub fn trace_sequence(&self, seq: &Sequence) -> Result<ActivationTrace> {
        let batch = PackedBatch::new(&[seq], LossWeighting::SumOfSequences)?;
        let mut tape = Tape::new();
        let g = self.build(&mut tape, &batch, &ForwardOptions::default())?;
        ActivationTrace::from_graph(self.space(), &tape, &g, 0..seq.len(), seq.supervised_positions())
    }
}

fn intervene<'t>(
    tape: &mut Tape<'t>,
    node: NodeId,
    layer: usize,
    module: FfnModule,
    interventions: &[Intervention],
) -> Result<NodeId> {
    let hits: Vec<&Intervention> = interventions
        .iter()
        .filter(|iv| iv.neuron.layer == layer && iv.neuron.module == module)
        .collect();
    if hits.is_empty() {
        return Ok(node);
    }
    let mut factors = vec![1.0; tape.value(node).cols()];
    for iv in hits {
        let f = factors.get_mut(iv.neuron.index).ok_or_else(|| {
            Error::Invalid(format!("intervention on {} is out of range", iv.neuron))
        })?;
        *f *= iv.factor;
    }
    tape.scale_columns(node, factors)
}

fn allocate(c: &ModelConfig) -> (Vec<Param>, Layout) {
    let mut params = Vec::new();
    let mut add = |name: String, kind: ParamKind, shape: Vec<usize>| {
        params.push(Param {
            name,
            kind,
            tensor: Tensor::zeros(shape),
        });
        params.len() - 1
    };
    let (d, f) = (c.d_model, c.d_ffn);
    let tok_emb = add("tok_emb".into(), ParamKind::TokenEmbedding, vec![c.vocab_size, d]);
    let pos_emb = add("pos_emb".into(), ParamKind::PositionEmbedding, vec![c.max_seq_len, d]);
    let mut layers = Vec::with_capacity(c.n_layers);
    for l in 0..c.n_layers {
        let p = |s: &str| format!("layers.{l}.{s}");
        let attn_norm = add(p("attn_norm"), ParamKind::Norm, vec![d]);
        let wq = add(p("attn.wq"), ParamKind::Attention, vec![d, d]);
        let wk = add(p("attn.wk"), ParamKind::Attention, vec![d, d]);
        let wv = add(p("attn.wv"), ParamKind::Attention, vec![d, d]);
        let wo = add(p("attn.wo"), ParamKind::Attention, vec![d, d]);
        let ffn_norm = add(p("ffn_norm"), ParamKind::Norm, vec![d]);
        let mut ffn = |m: FfnModule, rows: usize, cols: usize| {
            let w = add(
                p(&format!("ffn.{m}.weight")),
                ParamKind::FfnWeight { layer: l, module: m },
                vec![rows, cols],
            );
            let b = add(
                p(&format!("ffn.{m}.bias")),
                ParamKind::FfnBias { layer: l, module: m },
                vec![cols],
            );
            (w, b)
        };
        let (gate_w, gate_b) = ffn(FfnModule::Gate, d, f);
        let (up_w, up_b) = ffn(FfnModule::Up, d, f);
        let (down_w, down_b) = ffn(FfnModule::Down, f, d);
        layers.push(LayerParams {
            attn_norm,
            wq,
            wk,
            wv,
            wo,
            ffn_norm,
            gate_w,
            gate_b,
            up_w,
            up_b,
            down_w,
            down_b,
        });
    }
    let final_norm = add("final_norm".into(), ParamKind::Norm, vec![d]);
    let head = add("lm_head".into(), ParamKind::Head, vec![d, c.vocab_size]);
    (
        params,
        Layout {
            tok_emb,
            pos_emb,
            layers,
            final_norm,
            head,
        },
    )
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            d_model: 8,
            d_ffn: 12,
            n_heads: 2,
            vocab_size: 11,
            max_seq_len: 16,
            rms_eps: 1e-6,
            seed: 3,
        }
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let a = Model::new(tiny_config()).unwrap();
        let b = Model::new(tiny_config()).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        let c = Model::new(ModelConfig {
            seed: 4,
            ..tiny_config()
        })
        .unwrap();
        assert_ne!(a.checksum(), c.checksum());
        assert_eq!(a.step(), 0);
    }

    #[test]
    fn single_token_logits_shape() {
        let m = Model::new(tiny_config()).unwrap();
        let (logits, trace) = m.forward_with_trace(&[4], false).unwrap();
        assert_eq!(logits.shape(), &[1, 11]);
        assert!(trace.is_none());
    }

    #[test]
    fn tracing_does_not_change_logits() {
        let m = Model::new(tiny_config()).unwrap();
        let toks = [1, 5, 7, 2, 9, 3];
        let (a, _) = m.forward_with_trace(&toks, false).unwrap();
        let (b, t) = m.forward_with_trace(&toks, true).unwrap();
        assert_eq!(a.data(), b.data());
        let t = t.unwrap();
        assert_eq!(t.len(), 2 * (2 * 12 + 8));
    }

    #[test]
    fn overlong_sequence_is_rejected() {
        let m = Model::new(tiny_config()).unwrap();
        let toks = vec![1; 17];
        assert!(m.forward_with_trace(&toks, false).is_err());
    }

    #[test]
    fn causal_prefix_invariance() {
        let m = Model::new(tiny_config()).unwrap();
        let (a, _) = m.forward_with_trace(&[1, 4, 6, 8, 2], false).unwrap();
        let (b, _) = m.forward_with_trace(&[1, 4, 6, 3, 10], false).unwrap();
        let v = 11;
        assert_eq!(a.data()[..3 * v], b.data()[..3 * v]);
        assert_ne!(a.data()[3 * v..], b.data()[3 * v..]);
    }

    #[test]
    fn untrained_loss_is_near_uniform() {
        let m = Model::new(tiny_config()).unwrap();
        let s = Sequence::new(vec![1, 4, 6, 2, 7, 8, 3], 4).unwrap();
        let loss = m.sequence_loss(&s).unwrap();
        let lnv = 11f64.ln();
        assert!((loss - lnv).abs() / lnv < 0.15, "{loss}");
    }

    #[test]
    fn gate_trace_matches_recomputed_silu() {
        let m = Model::new(tiny_config()).unwrap();
        let toks = [1, 5, 7, 2, 9];
        let (_, trace) = m.forward_with_trace(&toks, true).unwrap();
        let trace = trace.unwrap();
        // recompute layer-0 gate activations from the intermediate FFN input
        let seq = Sequence::prompt_only(toks.to_vec());
        let batch = PackedBatch::new(&[&seq], LossWeighting::SumOfSequences).unwrap();
        let mut tape = Tape::new();
        let g = m.build(&mut tape, &batch, &ForwardOptions::default()).unwrap();
        let ffn_in = tape.value(g.layer(0).unwrap().ffn_in).clone();
        let c = m.config();
        let lp = m.layout().layers[0];
        let norm_w = m.params()[lp.ffn_norm].tensor.data();
        let w = m.ffn_weight(0, FfnModule::Gate);
        let b = m.ffn_bias(0, FfnModule::Gate);
        for pos in 0..toks.len() {
            let row = ffn_in.row(pos);
            let ms = row.iter().map(|v| v * v).sum::<f64>() / c.d_model as f64;
            let inv = 1.0 / (ms + c.rms_eps).sqrt();
            for j in [0, 5, 11] {
                let mut pre = b.data()[j];
                for i in 0..c.d_model {
                    pre += row[i] * inv * norm_w[i] * w.data()[i * c.d_ffn + j];
                }
                let want = crate::tensor::silu(pre);
                let got = trace.raw(pos, NeuronId::new(0, FfnModule::Gate, j));
                assert!((got - want).abs() < 1e-14, "{got} vs {want}");
            }
        }
    }
}
