//! Deterministic training loop.
//!
//! Every random choice is drawn from a stream keyed by `(seed, purpose,
//! index)`: epoch shuffles by epoch number, span masking by example
//! position within the epoch, dropout by step. A run resumed from a
//! checkpoint at step `s` therefore replays exactly what an uninterrupted
//! run would have done from `s` on.

use std::collections::BTreeMap;
use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::{build_pretrain_example, MaskedExample, MaskingSpec};
use crate::model::{Bound, Mode, ModelConfig, Params};
use crate::rng::keyed_rng;
use crate::tensor::{Float, Graph};
use crate::training::adam::{adam_step, AdamConfig, AdamState};
use crate::training::checkpoint::{Checkpoint, CheckpointMeta};
use crate::training::loss::{batch_loss, LossBatch, Pair};
use crate::vocab::TokenId;

const SHUFFLE_SALT: u64 = 0x5348_5546;
const MASK_SALT: u64 = 0x4d41_534b;
const DROPOUT_SALT: u64 = 0x4452_4f50;

/// Bucketing window, in batches: examples inside one window are sorted by
/// length before being cut into batches.
const BUCKET_WINDOW: usize = 8;

fn default_lr() -> f64 {
    1e-3
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}
fn default_smoothing() -> f64 {
    0.1
}
fn default_batch() -> usize {
    64
}
fn default_max_len() -> usize {
    200
}
fn default_steps() -> u64 {
    1000
}
fn default_clip() -> Option<f64> {
    Some(5.0)
}
fn default_log_every() -> u64 {
    10
}
fn default_ckpt_every() -> u64 {
    500
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub eps: f64,
    #[serde(default = "default_smoothing")]
    pub label_smoothing: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Sentences are truncated to this many tokens.
    #[serde(default = "default_max_len")]
    pub max_len: usize,
    #[serde(default = "default_steps")]
    pub steps: u64,
    #[serde(default)]
    pub seed: u64,
    /// Global gradient-norm clip; `null` disables it.
    #[serde(default = "default_clip")]
    pub grad_clip: Option<f64>,
    #[serde(default = "default_log_every")]
    pub log_every: u64,
    /// Checkpoint interval in steps; 0 writes only the final checkpoint.
    #[serde(default = "default_ckpt_every")]
    pub checkpoint_every: u64,
    /// Validation interval in steps for best-checkpoint selection; 0 turns
    /// selection off and keeps the final parameters.
    #[serde(default)]
    pub eval_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(0.0..1.0).contains(&self.label_smoothing) {
            problems.push(format!("label_smoothing must be in [0, 1), got {}", self.label_smoothing));
        }
        if self.batch_size == 0 {
            problems.push("batch_size must be at least 1".to_string());
        }
        if self.max_len < 2 {
            problems.push(format!("max_len must be at least 2, got {}", self.max_len));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            problems.push(format!("lr must be positive, got {}", self.lr));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                problems.push(format!("{name} must be in [0, 1), got {b}"));
            }
        }
        if self.eps <= 0.0 {
            problems.push(format!("eps must be positive, got {}", self.eps));
        }
        if let Some(c) = self.grad_clip {
            if c <= 0.0 {
                problems.push(format!("grad_clip must be positive, got {c}"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Invalid(problems.join("; ")))
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            grad_clip: self.grad_clip,
        }
    }
}

/// What the trainer optimizes.
#[derive(Clone, Debug)]
pub enum TrainData {
    /// Fine-tuning on source/target pairs.
    Paired(Vec<Pair>),
    /// Span-masked pre-training on unpaired sentences.
    Unpaired {
        sentences: Vec<Vec<TokenId>>,
        spec: MaskingSpec,
    },
}

impl TrainData {
    pub fn len(&self) -> usize {
        match self {
            TrainData::Paired(p) => p.len(),
            TrainData::Unpaired { sentences, .. } => sentences.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn source_len(&self, i: usize) -> usize {
        match self {
            TrainData::Paired(p) => p[i].source.len(),
            TrainData::Unpaired { sentences, .. } => sentences[i].len(),
        }
    }

    pub fn masking(&self) -> Option<&MaskingSpec> {
        match self {
            TrainData::Paired(_) => None,
            TrainData::Unpaired { spec, .. } => Some(spec),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    /// 1-based index of the completed step.
    pub step: u64,
    /// Batch mean of per-sentence summed loss.
    pub loss: f64,
    /// Loss per non-PAD target token.
    pub token_loss: f64,
    pub grad_norm: f64,
    pub lr: f64,
    pub seconds: f64,
}

pub const LOSS_LOG_HEADER: &str = "step,loss,lr,seconds";

pub fn write_loss_row(w: &mut impl Write, r: &StepRecord) -> std::io::Result<()> {
    writeln!(w, "{},{},{},{:.3}", r.step, r.loss, r.lr, r.seconds)
}

/// Batches of example indices for one epoch.
fn epoch_plan(data: &TrainData, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    let mut rng = keyed_rng(seed ^ SHUFFLE_SALT, epoch);
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng);
    let mut batches = Vec::new();
    for window in order.chunks_mut(batch_size * BUCKET_WINDOW) {
        window.sort_by_key(|&i| data.source_len(i));
        batches.extend(window.chunks(batch_size).map(|c| c.to_vec()));
    }
    batches.shuffle(&mut rng);
    batches
}

pub struct Trainer<F: Float> {
    pub model: ModelConfig,
    pub config: TrainConfig,
    pub params: Params<F>,
    pub optimizer: AdamState<F>,
    data: TrainData,
    plan: Option<(u64, Vec<Vec<usize>>)>,
    started: Instant,
}

impl<F: Float> Trainer<F> {
    /// Truncates the data to `config.max_len` and validates everything.
    pub fn new(model: ModelConfig, config: TrainConfig, params: Params<F>, data: TrainData) -> Result<Self> {
        model.validate()?;
        config.validate()?;
        params.check(&model)?;
        if data.is_empty() {
            return Err(Error::Invalid("training data is empty".into()));
        }
        let max = config.max_len;
        let data = match data {
            TrainData::Paired(pairs) => {
                TrainData::Paired(pairs.iter().map(|p| Pair::truncated(&p.source, &p.target, max)).collect())
            }
            TrainData::Unpaired { sentences, spec } => {
                spec.validate()?;
                let sentences: Vec<Vec<TokenId>> = sentences
                    .into_iter()
                    .filter(|s| !s.is_empty())
                    .map(|mut s| {
                        s.truncate(max);
                        s
                    })
                    .collect();
                if sentences.is_empty() {
                    return Err(Error::Invalid("training data has only empty sentences".into()));
                }
                TrainData::Unpaired { sentences, spec }
            }
        };
        if let TrainData::Paired(p) = &data {
            if p.iter().any(|p| p.source.is_empty()) {
                return Err(Error::Invalid("paired data contains an empty source".into()));
            }
        }
        let optimizer = AdamState::new(&params);
        Ok(Self {
            model,
            config,
            params,
            optimizer,
            data,
            plan: None,
            started: Instant::now(),
        })
    }

    /// Continues from a checkpoint's parameters and optimizer state.
    pub fn resume(checkpoint: Checkpoint<F>, config: TrainConfig, data: TrainData) -> Result<Self> {
        let mut t = Self::new(checkpoint.meta.model.clone(), config, checkpoint.params, data)?;
        if let Some(opt) = checkpoint.optimizer {
            t.optimizer = opt;
        }
        Ok(t)
    }

    /// Steps completed so far.
    pub fn step_count(&self) -> u64 {
        self.optimizer.step
    }

    pub fn data(&self) -> &TrainData {
        &self.data
    }

    fn batch_indices(&mut self, step: u64) -> Vec<usize> {
        let per_epoch = self.data.len().div_ceil(self.config.batch_size) as u64;
        let epoch = step / per_epoch;
        if self.plan.as_ref().map(|(e, _)| *e) != Some(epoch) {
            let plan = epoch_plan(&self.data, self.config.batch_size, self.config.seed, epoch);
            self.plan = Some((epoch, plan));
        }
        let (_, plan) = self.plan.as_ref().unwrap();
        plan[(step % per_epoch) as usize].clone()
    }

    fn build_batch(&mut self, step: u64) -> Result<LossBatch> {
        let idx = self.batch_indices(step);
        let vocab = self.model.vocab_size;
        let per_epoch = self.data.len().div_ceil(self.config.batch_size) as u64;
        let epoch = step / per_epoch;
        let n = self.data.len() as u64;
        match &self.data {
            TrainData::Paired(pairs) => {
                let refs: Vec<&Pair> = idx.iter().map(|&i| &pairs[i]).collect();
                LossBatch::from_pairs(&refs)
            }
            TrainData::Unpaired { sentences, spec } => {
                let examples = idx
                    .iter()
                    .map(|&i| {
                        let mut rng = keyed_rng(self.config.seed ^ MASK_SALT, epoch * n + i as u64);
                        build_pretrain_example(&sentences[i], spec, vocab, &mut rng)
                    })
                    .collect::<Result<Vec<MaskedExample>>>()?;
                let refs: Vec<&MaskedExample> = examples.iter().collect();
                LossBatch::from_masked(&refs)
            }
        }
    }

    /// Runs one optimization step.
    pub fn step(&mut self) -> Result<StepRecord> {
        let step = self.optimizer.step;
        let batch = self.build_batch(step)?;
        let mut dropout_rng = keyed_rng(self.config.seed ^ DROPOUT_SALT, step);
        let mut g = Graph::new();
        let bound = Bound::new(&mut g, &self.params);
        let out = batch_loss(
            &mut g,
            &bound,
            &self.model,
            &batch,
            self.config.label_smoothing,
            &mut Mode::Train(&mut dropout_rng),
        )?;
        let loss = g.scalar_value(out.loss).as_f64();
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("loss at step {}", step + 1)));
        }
        g.backward(out.loss)?;
        let grads: BTreeMap<String, Vec<F>> = bound
            .iter()
            .filter_map(|(name, &v)| g.grad(v).map(|gr| (name.clone(), gr.to_vec())))
            .collect();
        let grad_norm = adam_step(&mut self.params, &grads, &mut self.optimizer, &self.config.adam())?;
        Ok(StepRecord {
            step: step + 1,
            loss,
            token_loss: loss * batch.rows() as f64 / batch.target_steps() as f64,
            grad_norm,
            lr: self.config.lr,
            seconds: self.started.elapsed().as_secs_f64(),
        })
    }

    /// Steps until `config.steps` total steps are done, calling `on_step`
    /// after each.
    pub fn run(&mut self, mut on_step: impl FnMut(&Self, &StepRecord) -> Result<()>) -> Result<Vec<StepRecord>> {
        let mut records = Vec::new();
        while self.optimizer.step < self.config.steps {
            let r = self.step()?;
            on_step(self, &r)?;
            records.push(r);
        }
        Ok(records)
    }

    pub fn checkpoint_meta(&self, vocab_sha256: &str) -> CheckpointMeta {
        CheckpointMeta {
            model: self.model.clone(),
            arch: self.model.arch.name().to_string(),
            step: self.optimizer.step,
            vocab_sha256: vocab_sha256.to_string(),
            masking: self.data.masking().map(|s| s.name.clone()),
            dtype: F::DTYPE.to_string(),
            optimizer_step: Some(self.optimizer.step),
        }
    }
}

/// Teacher-forced diagnostics over a set of pairs.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct Accuracy {
    pub tokens: usize,
    pub correct: usize,
    pub accuracy: f64,
    /// Summed loss per sentence averaged over sentences, without smoothing.
    pub loss: f64,
    /// Mean `P_gen` over target steps whose token occurs in the source;
    /// `None` for architectures without a copy gate or with no such steps.
    pub mean_p_gen_copy: Option<f64>,
}

pub fn evaluate_pairs<F: Float>(
    params: &Params<F>,
    model: &ModelConfig,
    pairs: &[Pair],
    batch_size: usize,
) -> Result<Accuracy> {
    if pairs.is_empty() {
        return Err(Error::Invalid("no pairs to evaluate".into()));
    }
    let v = model.vocab_size;
    let mut acc = Accuracy::default();
    let (mut gate_sum, mut gate_n) = (0.0, 0usize);
    let mut loss_sum = 0.0;
    for chunk in pairs.chunks(batch_size.max(1)) {
        let refs: Vec<&Pair> = chunk.iter().collect();
        let batch = LossBatch::from_pairs(&refs)?;
        let mut g = Graph::new();
        let bound = Bound::new(&mut g, params);
        let out = batch_loss(&mut g, &bound, model, &batch, 0.0, &mut Mode::Eval)?;
        loss_sum += g.scalar_value(out.loss).as_f64() * chunk.len() as f64;
        let probs = g.value(out.probs);
        let gate = out.p_gen.map(|p| g.value(p));
        let width = batch.targets.width;
        for (r, pair) in chunk.iter().enumerate() {
            for t in 0..batch.targets.lens[r] {
                let target = batch.targets.ids[r * width + t];
                let row = &probs[(r * width + t) * v..(r * width + t + 1) * v];
                let best = argmax(row);
                acc.tokens += 1;
                acc.correct += usize::from(best == target);
                if let Some(gv) = gate {
                    if pair.source.contains(&target) {
                        gate_sum += gv[r * width + t].as_f64();
                        gate_n += 1;
                    }
                }
            }
        }
    }
    acc.accuracy = acc.correct as f64 / acc.tokens as f64;
    acc.loss = loss_sum / pairs.len() as f64;
    acc.mean_p_gen_copy = (gate_n > 0).then(|| gate_sum / gate_n as f64);
    Ok(acc)
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<F: Float>(row: &[F]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// Which parameters a transfer copied, initialized fresh, or dropped.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct TransferReport {
    pub copied: Vec<String>,
    pub fresh: Vec<String>,
    pub dropped: Vec<String>,
}

/// Builds parameters for `target` from `pretrained`: shared names are
/// copied, names only in `target` are freshly initialized, the rest are
/// dropped.
pub fn transfer_params<F: Float>(
    pretrained: &Params<F>,
    target: &ModelConfig,
    rng: &mut impl Rng,
) -> Result<(Params<F>, TransferReport)> {
    target.validate()?;
    let mut out = Params::default();
    let mut report = TransferReport::default();
    let shapes = target.param_shapes();
    for (name, shape) in &shapes {
        match pretrained.get(name) {
            Some(t) if t.shape() == &shape[..] => {
                out.insert(name.clone(), t.clone());
                report.copied.push(name.clone());
            }
            Some(t) => {
                return Err(Error::ParamShape {
                    name: name.clone(),
                    expected: shape.clone(),
                    found: t.shape().to_vec(),
                })
            }
            None => {
                out.insert(name.clone(), crate::model::init_tensor(name, shape, rng));
                report.fresh.push(name.clone());
            }
        }
    }
    report.dropped = pretrained
        .names()
        .filter(|n| !shapes.iter().any(|(s, _)| s == *n))
        .cloned()
        .collect();
    Ok((out, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Arch;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model(arch: Arch, v: usize) -> ModelConfig {
        ModelConfig {
            arch,
            emb_dim: 6,
            enc_layers: 1,
            enc_hidden: 6,
            dec_layers: 1,
            dec_hidden: 6,
            vocab_size: v,
            dropout: 0.1,
            max_len: 30,
        }
    }

    fn pairs(n: usize, v: usize, seed: u64) -> Vec<Pair> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let len = rng.gen_range(2..8);
                let s: Vec<TokenId> = (0..len).map(|_| rng.gen_range(5..v)).collect();
                Pair { source: s.clone(), target: s }
            })
            .collect()
    }

    fn config(steps: u64) -> TrainConfig {
        TrainConfig {
            batch_size: 8,
            steps,
            seed: 3,
            ..Default::default()
        }
    }

    #[test]
    fn config_defaults_and_validation() {
        let c = TrainConfig::default();
        assert_eq!(c.label_smoothing, 0.1);
        assert_eq!(c.batch_size, 64);
        assert_eq!(c.max_len, 200);
        assert_eq!(c.grad_clip, Some(5.0));
        let bad = TrainConfig { label_smoothing: 1.0, batch_size: 0, ..c };
        let msg = bad.validate().unwrap_err().to_string();
        assert!(msg.contains("label_smoothing") && msg.contains("batch_size"), "{msg}");
        assert!(serde_json::from_str::<TrainConfig>(r#"{"bogus": 1}"#).is_err());
    }

    #[test]
    fn empty_data_is_rejected() {
        let m = model(Arch::PointerGenerator, 12);
        let p: Params<f64> = Params::init(&m, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(Trainer::new(m, config(1), p, TrainData::Paired(vec![])).is_err());
    }

    #[test]
    fn plan_covers_every_example_once_per_epoch() {
        let data = TrainData::Paired(pairs(37, 12, 1));
        let plan = epoch_plan(&data, 8, 5, 2);
        let mut seen: Vec<usize> = plan.concat();
        seen.sort();
        assert_eq!(seen, (0..37).collect::<Vec<_>>());
        assert_eq!(plan, epoch_plan(&data, 8, 5, 2));
        assert_ne!(plan, epoch_plan(&data, 8, 5, 3));
    }

    fn losses(data: TrainData, steps: u64) -> Vec<f64> {
        let m = model(Arch::PointerGenerator, 12);
        let p: Params<f64> = Params::init(&m, &mut ChaCha8Rng::seed_from_u64(9));
        let mut t = Trainer::new(m, config(steps), p, data).unwrap();
        t.run(|_, _| Ok(())).unwrap().iter().map(|r| r.loss).collect()
    }

    #[test]
    fn same_seed_same_losses() {
        let a = losses(TrainData::Paired(pairs(20, 12, 2)), 6);
        let b = losses(TrainData::Paired(pairs(20, 12, 2)), 6);
        assert_eq!(a, b);
        let sentences: Vec<Vec<TokenId>> = pairs(20, 12, 4).into_iter().map(|p| p.source).collect();
        let un = || TrainData::Unpaired { sentences: sentences.clone(), spec: MaskingSpec::mapgn() };
        assert_eq!(losses(un(), 6), losses(un(), 6));
    }

    #[test]
    fn first_loss_near_uniform() {
        let v = 12;
        let m = model(Arch::EncoderDecoder, v);
        let p: Params<f64> = Params::init(&m, &mut ChaCha8Rng::seed_from_u64(1));
        let cfg = TrainConfig { label_smoothing: 0.0, ..config(1) };
        let mut t = Trainer::new(m, cfg, p, TrainData::Paired(pairs(8, v, 3))).unwrap();
        let r = t.step().unwrap();
        let expect = (v as f64).ln();
        assert!((r.token_loss - expect).abs() < 0.2 * expect, "{} vs {expect}", r.token_loss);
    }

    #[test]
    fn resume_matches_uninterrupted() {
        let m = model(Arch::PointerGenerator, 12);
        let p: Params<f64> = Params::init(&m, &mut ChaCha8Rng::seed_from_u64(9));
        let data = TrainData::Paired(pairs(20, 12, 2));
        let mut full = Trainer::new(m.clone(), config(8), p.clone(), data.clone()).unwrap();
        let all = full.run(|_, _| Ok(())).unwrap();

        let mut first = Trainer::new(m, config(3), p, data.clone()).unwrap();
        first.run(|_, _| Ok(())).unwrap();
        let meta = first.checkpoint_meta("x");
        let bytes =
            crate::training::checkpoint::encode_checkpoint(&meta, &first.params, Some(&first.optimizer)).unwrap();
        let ck = crate::training::checkpoint::decode_checkpoint::<f64>(&bytes).unwrap();
        let mut second = Trainer::resume(ck, config(8), data).unwrap();
        let rest = second.run(|_, _| Ok(())).unwrap();
        assert_eq!(rest.len(), 5);
        for (a, b) in all[3..].iter().zip(&rest) {
            assert_eq!(a.step, b.step);
            assert!((a.loss - b.loss).abs() <= 1e-10, "{} vs {}", a.loss, b.loss);
        }
    }

    #[test]
    fn training_reduces_loss() {
        let v = 10;
        let m = model(Arch::PointerGenerator, v);
        let p: Params<f32> = Params::init(&m, &mut ChaCha8Rng::seed_from_u64(2));
        let data = pairs(16, v, 5);
        let before = evaluate_pairs(&p, &m, &data, 8).unwrap();
        let cfg = TrainConfig { lr: 1e-2, ..config(60) };
        let mut t = Trainer::new(m.clone(), cfg, p, TrainData::Paired(data.clone())).unwrap();
        t.run(|_, _| Ok(())).unwrap();
        let after = evaluate_pairs(&t.params, &m, &data, 8).unwrap();
        assert!(after.loss < before.loss * 0.7, "{} -> {}", before.loss, after.loss);
        assert!(after.mean_p_gen_copy.is_some());
    }

    #[test]
    fn transfer_rules() {
        let pg = model(Arch::PointerGenerator, 12);
        let ed = model(Arch::EncoderDecoder, 12);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p: Params<f64> = Params::init(&pg, &mut rng);

        let (same, rep) = transfer_params(&p, &pg, &mut rng).unwrap();
        assert_eq!(same, p);
        assert!(rep.fresh.is_empty() && rep.dropped.is_empty());

        let (down, rep) = transfer_params(&p, &ed, &mut rng).unwrap();
        down.check(&ed).unwrap();
        assert_eq!(rep.dropped.len(), 4);
        assert!(rep.dropped.iter().all(|n| n.starts_with("copy_gate.")));
        assert_eq!(rep.copied.len(), down.len());

        let q: Params<f64> = Params::init(&ed, &mut rng);
        let (up, rep) = transfer_params(&q, &pg, &mut rng).unwrap();
        up.check(&pg).unwrap();
        assert_eq!(rep.fresh.len(), 4);

        let bigger = model(Arch::PointerGenerator, 13);
        match transfer_params(&p, &bigger, &mut rng) {
            Err(Error::ParamShape { name, .. }) => assert_eq!(name, "embedding"),
            other => panic!("{other:?}"),
        }
    }
}
