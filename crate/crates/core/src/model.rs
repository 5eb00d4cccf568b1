//! Attention-based LSTM encoder-decoder and pointer-generator network.
//!
//! Both architectures share every parameter name except the copy gate, so
//! weights transfer between them by name. The forward pass is written against
//! a [`Graph`] and is batched: sources are `[B, M]`, decoder inputs `[B, L]`.
//!
//! Output distribution per decoder step:
//!
//! ```text
//! G      = softmax(W2 · tanh(W1 · [d; v] + b1) + b2)
//! P_gen  = sigmoid(U2 · tanh(U1 · [d; v] + c1) + c2)
//! P(t)   = P_gen · G(t) + (1 − P_gen) · Σ_{m : x_m = t} α_m      (pointer-generator)
//! P(t)   = G(t)                                                  (encoder-decoder)
//! ```
//!
//! where `α` is additive attention over the top encoder layer and `d` the
//! attention-weighted sum of encoder states.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Float, Graph, Tensor, Var};
use crate::vocab::{TokenId, NUM_SPECIALS, PAD};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Arch {
    EncoderDecoder,
    PointerGenerator,
}

impl Arch {
    pub fn name(self) -> &'static str {
        match self {
            Arch::EncoderDecoder => "encoder-decoder",
            Arch::PointerGenerator => "pointer-generator",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub arch: Arch,
    pub emb_dim: usize,
    pub enc_layers: usize,
    /// Hidden units per direction.
    pub enc_hidden: usize,
    pub dec_layers: usize,
    pub dec_hidden: usize,
    pub vocab_size: usize,
    pub dropout: f64,
    pub max_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            arch: Arch::PointerGenerator,
            emb_dim: 64,
            enc_layers: 1,
            enc_hidden: 64,
            dec_layers: 1,
            dec_hidden: 64,
            vocab_size: NUM_SPECIALS,
            dropout: 0.1,
            max_len: 200,
        }
    }
}

impl ModelConfig {
    /// Published configuration: 512-d embeddings, 4-layer biLSTM encoder
    /// and 2-layer LSTM decoder with 256 units, dropout 0.1, 200-token cap.
    pub fn published(arch: Arch, vocab_size: usize) -> Self {
        Self {
            arch,
            emb_dim: 512,
            enc_layers: 4,
            enc_hidden: 256,
            dec_layers: 2,
            dec_hidden: 256,
            vocab_size,
            dropout: 0.1,
            max_len: 200,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("emb_dim", self.emb_dim),
            ("enc_layers", self.enc_layers),
            ("enc_hidden", self.enc_hidden),
            ("dec_layers", self.dec_layers),
            ("dec_hidden", self.dec_hidden),
            ("max_len", self.max_len),
        ];
        let mut problems: Vec<String> = dims
            .iter()
            .filter(|(_, v)| *v == 0)
            .map(|(k, _)| format!("{k} must be positive"))
            .collect();
        if self.vocab_size < NUM_SPECIALS {
            problems.push(format!(
                "vocab_size {} is smaller than the {NUM_SPECIALS} special tokens",
                self.vocab_size
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            problems.push(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Invalid(problems.join("; ")))
        }
    }

    fn enc_out(&self) -> usize {
        2 * self.enc_hidden
    }

    fn attn_dim(&self) -> usize {
        self.dec_hidden
    }

    /// Every parameter name with its shape, in a stable order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (e, he, hd, v) = (self.emb_dim, self.enc_hidden, self.dec_hidden, self.vocab_size);
        let mut out = vec![("embedding".to_string(), vec![v, e])];
        for l in 0..self.enc_layers {
            let input = if l == 0 { e } else { 2 * he };
            for dir in ["fwd", "bwd"] {
                out.push((format!("encoder.{l}.{dir}.weight"), vec![input + he, 4 * he]));
                out.push((format!("encoder.{l}.{dir}.bias"), vec![4 * he]));
            }
        }
        for l in 0..self.dec_layers {
            out.push((format!("bridge.{l}.weight"), vec![4 * he, 2 * hd]));
            out.push((format!("bridge.{l}.bias"), vec![2 * hd]));
        }
        for l in 0..self.dec_layers {
            let input = if l == 0 { e } else { hd };
            out.push((format!("decoder.{l}.weight"), vec![input + hd, 4 * hd]));
            out.push((format!("decoder.{l}.bias"), vec![4 * hd]));
        }
        let a = self.attn_dim();
        out.push(("attention.w_h".into(), vec![self.enc_out(), a]));
        out.push(("attention.w_v".into(), vec![hd, a]));
        out.push(("attention.bias".into(), vec![a]));
        out.push(("attention.w".into(), vec![a, 1]));
        let ctx = self.enc_out() + hd;
        out.push(("generator.hidden.weight".into(), vec![ctx, hd]));
        out.push(("generator.hidden.bias".into(), vec![hd]));
        out.push(("generator.out.weight".into(), vec![hd, v]));
        out.push(("generator.out.bias".into(), vec![v]));
        if self.arch == Arch::PointerGenerator {
            out.push(("copy_gate.hidden.weight".into(), vec![ctx, hd]));
            out.push(("copy_gate.hidden.bias".into(), vec![hd]));
            out.push(("copy_gate.out.weight".into(), vec![hd, 1]));
            out.push(("copy_gate.out.bias".into(), vec![1]));
        }
        out
    }
}

/// Named parameter collection.
#[derive(Clone, Debug, PartialEq)]
pub struct Params<F> {
    tensors: BTreeMap<String, Tensor<F>>,
}

impl<F: Float> Default for Params<F> {
    fn default() -> Self {
        Self {
            tensors: BTreeMap::new(),
        }
    }
}

impl<F: Float> Params<F> {
    /// Weights uniform in (−0.1, 0.1), biases zero, LSTM forget-gate bias 1.
    pub fn init(cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let mut tensors = BTreeMap::new();
        for (name, shape) in cfg.param_shapes() {
            tensors.insert(name.clone(), init_tensor(&name, &shape, rng));
        }
        Self { tensors }
    }

    pub fn from_map(tensors: BTreeMap<String, Tensor<F>>) -> Self {
        Self { tensors }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<F>> {
        self.tensors.get_mut(name)
    }

    pub fn insert(&mut self, name: String, t: Tensor<F>) {
        self.tensors.insert(name, t);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<F>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<F>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn cast<G: Float>(&self) -> Params<G> {
        Params {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// Checks that exactly the names and shapes `cfg` requires are present.
    pub fn check(&self, cfg: &ModelConfig) -> Result<()> {
        let expected = cfg.param_shapes();
        for (name, shape) in &expected {
            match self.tensors.get(name) {
                None => {
                    return Err(Error::Invalid(format!("missing parameter {name}")));
                }
                Some(t) if t.shape() != &shape[..] => {
                    return Err(Error::ParamShape {
                        name: name.clone(),
                        expected: shape.clone(),
                        found: t.shape().to_vec(),
                    });
                }
                _ => {}
            }
        }
        if self.tensors.len() != expected.len() {
            let known: Vec<&String> = expected.iter().map(|(n, _)| n).collect();
            let extra: Vec<&String> = self.names().filter(|n| !known.contains(n)).collect();
            return Err(Error::Invalid(format!("unexpected parameters {extra:?}")));
        }
        Ok(())
    }
}

pub(crate) fn init_tensor<F: Float>(name: &str, shape: &[usize], rng: &mut impl Rng) -> Tensor<F> {
    if !name.ends_with("bias") {
        return Tensor::uniform(shape, 0.1, rng);
    }
    let mut t = Tensor::zeros(shape);
    if name.starts_with("encoder.") || name.starts_with("decoder.") {
        // Gate order is i, f, g, o.
        let h = shape[0] / 4;
        for v in &mut t.data_mut()[h..2 * h] {
            *v = F::one();
        }
    }
    t
}

/// Dropout context: training draws masks from the rng, eval is identity.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut ChaCha8Rng),
}

impl Mode<'_> {
    fn dropout<F: Float>(&mut self, g: &mut Graph<F>, x: Var, rate: f64) -> Var {
        match self {
            Mode::Eval => x,
            Mode::Train(rng) => g.dropout(x, rate, true, &mut **rng),
        }
    }
}

/// Parameters placed on a graph as trainable leaves.
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn new<F: Float>(g: &mut Graph<F>, params: &Params<F>) -> Self {
        Self {
            vars: params
                .iter()
                .map(|(name, t)| (name.clone(), g.param(t)))
                .collect(),
        }
    }

    /// Binds already-created graph leaves by name.
    pub fn from_vars(vars: impl IntoIterator<Item = (String, Var)>) -> Self {
        Self {
            vars: vars.into_iter().collect(),
        }
    }

    pub fn var(&self, name: &str) -> Var {
        match self.vars.get(name) {
            Some(&v) => v,
            None => panic!("parameter {name} is not bound; call Params::check first"),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

/// Right-padded token matrix `[B, T]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Padded {
    pub ids: Vec<TokenId>,
    pub lens: Vec<usize>,
    pub width: usize,
}

impl Padded {
    pub fn new(seqs: &[&[TokenId]]) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::Invalid("empty batch".into()));
        }
        if seqs.iter().any(|s| s.is_empty()) {
            return Err(Error::Invalid("empty sequence in batch".into()));
        }
        let width = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
        let mut ids = vec![PAD; seqs.len() * width];
        for (r, s) in seqs.iter().enumerate() {
            ids[r * width..r * width + s.len()].copy_from_slice(s);
        }
        Ok(Self {
            ids,
            lens: seqs.iter().map(|s| s.len()).collect(),
            width,
        })
    }

    pub fn rows(&self) -> usize {
        self.lens.len()
    }

    pub fn column(&self, t: usize) -> Vec<TokenId> {
        (0..self.rows()).map(|r| self.ids[r * self.width + t]).collect()
    }

    pub fn row(&self, r: usize) -> &[TokenId] {
        &self.ids[r * self.width..r * self.width + self.lens[r]]
    }

    fn live(&self, t: usize) -> Vec<bool> {
        self.lens.iter().map(|&l| t < l).collect()
    }
}

pub struct EncoderStates {
    /// `[B, M, 2·enc_hidden]`, top layer.
    pub h: Var,
    /// `h · W_h + bias`, cached for attention: `[B, M, A]`.
    pub h_proj: Var,
    /// Final forward/backward `(h, c)` of the top layer, concatenated:
    /// `[B, 4·enc_hidden]`.
    pub summary: Var,
    /// Source ids, needed for copying and attention masking.
    pub source: Padded,
}

fn check_ids(cfg: &ModelConfig, p: &Padded, what: &str) -> Result<()> {
    if let Some(&bad) = p.ids.iter().find(|&&i| i >= cfg.vocab_size) {
        return Err(Error::Invalid(format!(
            "{what} id {bad} out of range for vocabulary of size {}",
            cfg.vocab_size
        )));
    }
    if p.width > cfg.max_len {
        return Err(Error::Invalid(format!(
            "{what} length {} exceeds max_len {}",
            p.width, cfg.max_len
        )));
    }
    Ok(())
}

fn linear<F: Float>(g: &mut Graph<F>, p: &Bound, x: Var, prefix: &str) -> Result<Var> {
    let y = g.matmul(x, p.var(&format!("{prefix}.weight")))?;
    g.add_bias(y, p.var(&format!("{prefix}.bias")))
}

/// One LSTM cell update; returns `(h, c)`.
fn lstm_cell<F: Float>(
    g: &mut Graph<F>,
    p: &Bound,
    prefix: &str,
    x: Var,
    h: Var,
    c: Var,
    hidden: usize,
) -> Result<(Var, Var)> {
    let xh = g.concat(&[x, h])?;
    let gates = linear(g, p, xh, prefix)?;
    let i = g.slice_last(gates, 0, hidden)?;
    let f = g.slice_last(gates, hidden, hidden)?;
    let cand = g.slice_last(gates, 2 * hidden, hidden)?;
    let o = g.slice_last(gates, 3 * hidden, hidden)?;
    let (i, f, cand, o) = (g.sigmoid(i), g.sigmoid(f), g.tanh(cand), g.sigmoid(o));
    let keep = g.mul(f, c)?;
    let write = g.mul(i, cand)?;
    let c_new = g.add(keep, write)?;
    let tc = g.tanh(c_new);
    let h_new = g.mul(o, tc)?;
    Ok((h_new, c_new))
}

fn zeros<F: Float>(g: &mut Graph<F>, rows: usize, cols: usize) -> Var {
    g.constant(Tensor::zeros(&[rows, cols]))
}

/// Stacked bidirectional LSTM over the padded source.
pub fn encode<F: Float>(
    g: &mut Graph<F>,
    p: &Bound,
    cfg: &ModelConfig,
    source: &Padded,
    mode: &mut Mode,
) -> Result<EncoderStates> {
    check_ids(cfg, source, "source")?;
    let (b, m, he) = (source.rows(), source.width, cfg.enc_hidden);
    let emb = p.var("embedding");
    let mut inputs = Vec::with_capacity(m);
    for t in 0..m {
        let x = g.embedding(emb, &source.column(t), &[b])?;
        inputs.push(mode.dropout(g, x, cfg.dropout));
    }
    let live: Vec<Vec<bool>> = (0..m).map(|t| source.live(t)).collect();
    let all_live: Vec<bool> = live.iter().map(|l| l.iter().all(|&x| x)).collect();
    let mut summary = None;
    for l in 0..cfg.enc_layers {
        let mut fwd = Vec::with_capacity(m);
        let (mut h, mut c) = (zeros(g, b, he), zeros(g, b, he));
        let prefix = format!("encoder.{l}.fwd");
        for t in 0..m {
            let (hn, cn) = lstm_cell(g, p, &prefix, inputs[t], h, c, he)?;
            // Rows past their length keep their last state.
            if all_live[t] {
                (h, c) = (hn, cn);
            } else {
                h = g.select_rows(&live[t], hn, h)?;
                c = g.select_rows(&live[t], cn, c)?;
            }
            fwd.push(h);
        }
        let (hf, cf) = (h, c);
        let mut bwd = vec![h; m];
        let (mut h, mut c) = (zeros(g, b, he), zeros(g, b, he));
        let prefix = format!("encoder.{l}.bwd");
        for t in (0..m).rev() {
            let (hn, cn) = lstm_cell(g, p, &prefix, inputs[t], h, c, he)?;
            // Padding stays at the zero initial state.
            if all_live[t] {
                (h, c) = (hn, cn);
            } else {
                h = g.select_rows(&live[t], hn, h)?;
                c = g.select_rows(&live[t], cn, c)?;
            }
            bwd[t] = h;
        }
        let mut outputs = Vec::with_capacity(m);
        for t in 0..m {
            let o = g.concat(&[fwd[t], bwd[t]])?;
            outputs.push(if l + 1 < cfg.enc_layers {
                mode.dropout(g, o, cfg.dropout)
            } else {
                o
            });
        }
        inputs = outputs;
        summary = Some(g.concat(&[hf, h, cf, c])?);
    }
    let h = g.stack_mid(&inputs)?;
    let proj = g.matmul(h, p.var("attention.w_h"))?;
    let h_proj = g.add_bias(proj, p.var("attention.bias"))?;
    Ok(EncoderStates {
        h,
        h_proj,
        summary: summary.expect("at least one encoder layer"),
        source: source.clone(),
    })
}

/// Per-layer decoder `(h, c)`.
#[derive(Clone)]
pub struct DecoderState {
    pub layers: Vec<(Var, Var)>,
}

impl DecoderState {
    /// Reorders rows, e.g. to follow surviving beam hypotheses.
    pub fn select<F: Float>(&self, g: &mut Graph<F>, rows: &[usize]) -> Result<Self> {
        let layers = self
            .layers
            .iter()
            .map(|&(h, c)| Ok((g.index_rows(h, rows)?, g.index_rows(c, rows)?)))
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }
}

/// Learned affine+tanh bridge from the encoder summary to each decoder layer.
pub fn bridge<F: Float>(
    g: &mut Graph<F>,
    p: &Bound,
    cfg: &ModelConfig,
    enc: &EncoderStates,
) -> Result<DecoderState> {
    let hd = cfg.dec_hidden;
    let mut layers = Vec::with_capacity(cfg.dec_layers);
    for l in 0..cfg.dec_layers {
        let s = linear(g, p, enc.summary, &format!("bridge.{l}"))?;
        let s = g.tanh(s);
        layers.push((g.slice_last(s, 0, hd)?, g.slice_last(s, hd, hd)?));
    }
    Ok(DecoderState { layers })
}

/// Advances the decoder stack by one input token per row; returns the top
/// hidden state `[B, dec_hidden]`.
pub fn decoder_step<F: Float>(
    g: &mut Graph<F>,
    p: &Bound,
    cfg: &ModelConfig,
    state: &mut DecoderState,
    tokens: &[TokenId],
    mode: &mut Mode,
) -> Result<Var> {
    if let Some(&bad) = tokens.iter().find(|&&t| t >= cfg.vocab_size) {
        return Err(Error::Invalid(format!(
            "decoder id {bad} out of range for vocabulary of size {}",
            cfg.vocab_size
        )));
    }
    let x = g.embedding(p.var("embedding"), tokens, &[tokens.len()])?;
    let mut x = mode.dropout(g, x, cfg.dropout);
    for l in 0..cfg.dec_layers {
        let (h, c) = state.layers[l];
        let (h, c) = lstm_cell(g, p, &format!("decoder.{l}"), x, h, c, cfg.dec_hidden)?;
        state.layers[l] = (h, c);
        x = if l + 1 < cfg.dec_layers {
            mode.dropout(g, h, cfg.dropout)
        } else {
            h
        };
    }
    Ok(x)
}

/// Attention over `L` decoder states at once.
pub struct Attention {
    /// `[B, L, M]`
    pub alpha: Var,
    /// `[B, L, 2·enc_hidden]`
    pub context: Var,
}

/// Additive attention: `score = w · tanh(W_h h_m + W_v v_n + bias)`,
/// softmax over source positions, `d_n = Σ α_m h_m`.
/// `v` is `[B, L, dec_hidden]`.
pub fn attention<F: Float>(
    g: &mut Graph<F>,
    p: &Bound,
    enc: &EncoderStates,
    v: Var,
) -> Result<Attention> {
    let (b, m) = (enc.source.rows(), enc.source.width);
    let vs = g.shape(v).to_vec();
    if vs.len() != 3 || vs[0] != b {
        return Err(Error::Shape {
            op: "attention",
            detail: format!("decoder states {vs:?} for a batch of {b}"),
        });
    }
    let l = vs[1];
    let pv = g.matmul(v, p.var("attention.w_v"))?;
    let e = g.pair_add(pv, enc.h_proj)?;
    let e = g.tanh(e);
    let scores = g.matmul(e, p.var("attention.w"))?;
    let mut scores = g.reshape(scores, &[b, l, m])?;
    if enc.source.lens.iter().any(|&len| len < m) {
        let mut mask = vec![F::zero(); b * l * m];
        for (r, &len) in enc.source.lens.iter().enumerate() {
            for li in 0..l {
                for mi in len..m {
                    mask[(r * l + li) * m + mi] = F::of(-1e9);
                }
            }
        }
        let mask = g.constant(Tensor::new(vec![b, l, m], mask)?);
        scores = g.add(scores, mask)?;
    }
    let alpha = g.softmax(scores)?;
    let context = g.bmm(alpha, enc.h)?;
    Ok(Attention { alpha, context })
}

fn two_stage<F: Float>(g: &mut Graph<F>, p: &Bound, dv: Var, head: &str) -> Result<Var> {
    let hidden = linear(g, p, dv, &format!("{head}.hidden"))?;
    let hidden = g.tanh(hidden);
    linear(g, p, hidden, &format!("{head}.out"))
}

/// Vocabulary distribution `G` from `[d; v]`: `[B, L, V]`.
pub fn generator_dist<F: Float>(g: &mut Graph<F>, p: &Bound, dv: Var) -> Result<Var> {
    let logits = two_stage(g, p, dv, "generator")?;
    g.softmax(logits)
}

/// Switching probability `P_gen` from `[d; v]`: `[B, L, 1]`.
pub fn copy_gate<F: Float>(g: &mut Graph<F>, p: &Bound, dv: Var) -> Result<Var> {
    let logit = two_stage(g, p, dv, "copy_gate")?;
    Ok(g.sigmoid(logit))
}

/// One-hot source matrix `[B, M, V]` for scattering attention mass onto
/// vocabulary ids. Padding rows are all zero.
fn source_onehot<F: Float>(source: &Padded, vocab: usize) -> Result<Tensor<F>> {
    let (b, m) = (source.rows(), source.width);
    let mut data = vec![F::zero(); b * m * vocab];
    for r in 0..b {
        for t in 0..source.lens[r] {
            data[(r * m + t) * vocab + source.ids[r * m + t]] = F::one();
        }
    }
    Tensor::new(vec![b, m, vocab], data)
}

/// `P_gen·G + (1 − P_gen)·copy` on the graph.
pub fn mix<F: Float>(
    g: &mut Graph<F>,
    gen: Var,
    p_gen: Var,
    alpha: Var,
    source: &Padded,
    vocab: usize,
) -> Result<Var> {
    let onehot = g.constant(source_onehot(source, vocab)?);
    let copy = g.bmm(alpha, onehot)?;
    let generate = g.scale_rows(gen, p_gen)?;
    let p_copy = g.affine(p_gen, -F::one(), F::one());
    let copy = g.scale_rows(copy, p_copy)?;
    g.add(generate, copy)
}

/// Copy/generate mixture for a single step on plain slices.
pub fn mix_distributions<F: Float>(
    gen: &[F],
    p_gen: F,
    alpha: &[F],
    source_ids: &[TokenId],
) -> Result<Vec<F>> {
    if alpha.len() != source_ids.len() {
        return Err(Error::Shape {
            op: "mix_distributions",
            detail: format!("{} attention weights for {} source tokens", alpha.len(), source_ids.len()),
        });
    }
    if let Some(&bad) = source_ids.iter().find(|&&t| t >= gen.len()) {
        return Err(Error::Invalid(format!("source id {bad} outside vocabulary of {}", gen.len())));
    }
    let mut out: Vec<F> = gen.iter().map(|&x| p_gen * x).collect();
    let rest = F::one() - p_gen;
    for (&a, &t) in alpha.iter().zip(source_ids) {
        out[t] += rest * a;
    }
    Ok(out)
}

/// Output of the distribution heads for `L` decoder steps.
pub struct StepOutputs {
    /// Final distribution `[B, L, V]`.
    pub probs: Var,
    /// Vocabulary distribution `[B, L, V]`.
    pub gen: Var,
    /// `[B, L, M]`
    pub alpha: Var,
    /// `[B, L, 1]`, pointer-generator only.
    pub p_gen: Option<Var>,
}

/// Heads on top of decoder states `v: [B, L, dec_hidden]`.
pub fn output_heads<F: Float>(
    g: &mut Graph<F>,
    p: &Bound,
    cfg: &ModelConfig,
    enc: &EncoderStates,
    v: Var,
) -> Result<StepOutputs> {
    let att = attention(g, p, enc, v)?;
    let dv = g.concat(&[att.context, v])?;
    let gen = generator_dist(g, p, dv)?;
    match cfg.arch {
        Arch::EncoderDecoder => Ok(StepOutputs {
            probs: gen,
            gen,
            alpha: att.alpha,
            p_gen: None,
        }),
        Arch::PointerGenerator => {
            let p_gen = copy_gate(g, p, dv)?;
            let probs = mix(g, gen, p_gen, att.alpha, &enc.source, cfg.vocab_size)?;
            Ok(StepOutputs {
                probs,
                gen,
                alpha: att.alpha,
                p_gen: Some(p_gen),
            })
        }
    }
}

/// Teacher-forced forward: encodes `source`, feeds `decoder_input`, and
/// returns per-step distributions `[B, L, V]`.
pub fn forward_teacher_forced<F: Float>(
    g: &mut Graph<F>,
    p: &Bound,
    cfg: &ModelConfig,
    source: &Padded,
    decoder_input: &Padded,
    mode: &mut Mode,
) -> Result<StepOutputs> {
    if source.rows() != decoder_input.rows() {
        return Err(Error::Invalid(format!(
            "{} sources for {} decoder inputs",
            source.rows(),
            decoder_input.rows()
        )));
    }
    check_ids(cfg, decoder_input, "decoder input")?;
    let enc = encode(g, p, cfg, source, mode)?;
    let mut state = bridge(g, p, cfg, &enc)?;
    let mut tops = Vec::with_capacity(decoder_input.width);
    for t in 0..decoder_input.width {
        tops.push(decoder_step(g, p, cfg, &mut state, &decoder_input.column(t), mode)?);
    }
    let v = g.stack_mid(&tops)?;
    output_heads(g, p, cfg, &enc, v)
}
