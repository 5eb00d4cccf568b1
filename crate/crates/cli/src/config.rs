use std::path::Path;

use mapgn_core::corpus::{SplitSizes, SynthRuleSet};
use mapgn_core::decoding::BeamConfig;
use mapgn_core::experiment::DecodeLimits;
use mapgn_core::masking::MaskingSpec;
use mapgn_core::model::ModelConfig;
use mapgn_core::training::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    #[default]
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MaskingChoice {
    Preset(String),
    Custom(MaskingSpec),
}

impl MaskingChoice {
    pub fn resolve(&self) -> mapgn_core::Result<MaskingSpec> {
        match self {
            MaskingChoice::Preset(name) => MaskingSpec::preset(name),
            MaskingChoice::Custom(spec) => {
                spec.validate()?;
                Ok(spec.clone())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VocabConfig {
    pub min_count: usize,
    pub max_size: Option<usize>,
}

impl Default for VocabConfig {
    fn default() -> Self {
        Self {
            min_count: 1,
            max_size: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    pub beam: usize,
    pub max_len: usize,
    pub max_len_ratio: f64,
    pub max_len_slack: usize,
    pub length_norm: bool,
    pub threads: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            beam: 1,
            max_len: 200,
            max_len_ratio: 2.0,
            max_len_slack: 10,
            length_norm: false,
            threads: 1,
        }
    }
}

impl DecodeConfig {
    pub fn limits(&self) -> DecodeLimits {
        DecodeLimits {
            beam: BeamConfig {
                beam: self.beam,
                max_len: self.max_len,
                length_norm: self.length_norm,
            },
            max_len_ratio: self.max_len_ratio,
            max_len_slack: self.max_len_slack,
            threads: self.threads,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub max_chars: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            max_chars: mapgn_core::corpus::DEFAULT_MAX_CHARS,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub rules: SynthRuleSet,
    pub unpaired: usize,
    pub train: usize,
    pub valid: usize,
    pub test: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            rules: SynthRuleSet::default(),
            unpaired: 10_000,
            train: 500,
            valid: 100,
            test: 200,
        }
    }
}

impl SynthConfig {
    pub fn sizes(&self) -> SplitSizes {
        SplitSizes {
            train: self.train,
            valid: self.valid,
            test: self.test,
        }
    }
}

fn pretrain_default() -> TrainConfig {
    TrainConfig {
        lr: 1e-3,
        batch_size: 32,
        steps: 1500,
        ..TrainConfig::default()
    }
}

fn finetune_default() -> TrainConfig {
    TrainConfig {
        lr: 5e-3,
        batch_size: 20,
        steps: 1000,
        eval_every: 100,
        ..TrainConfig::default()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub dtype: Dtype,
    pub model: ModelConfig,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub masking: MaskingChoice,
    pub vocab: VocabConfig,
    pub decode: DecodeConfig,
    pub data: DataConfig,
    pub synth: SynthConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            dtype: Dtype::F32,
            model: ModelConfig {
                emb_dim: 32,
                enc_hidden: 32,
                dec_hidden: 32,
                ..ModelConfig::default()
            },
            pretrain: pretrain_default(),
            finetune: finetune_default(),
            masking: MaskingChoice::Preset("mapgn".into()),
            vocab: VocabConfig::default(),
            decode: DecodeConfig::default(),
            data: DataConfig::default(),
            synth: SynthConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        let err = |e: serde_json::Error| CliError::config(format!("{}: {e}", path.display()));
        let user: serde_json::Value = serde_json::from_str(&text).map_err(err)?;
        let mut merged = serde_json::to_value(Self::default()).expect("serializable");
        merge(&mut merged, user);
        serde_json::from_value(merged).map_err(err)
    }

    /// Every violation, joined; the vocabulary size is checked separately
    /// once the vocabulary is known.
    pub fn validate(&self) -> Result<(), CliError> {
        let mut problems = Vec::new();
        let mut model = self.model.clone();
        model.vocab_size = model.vocab_size.max(mapgn_core::vocab::NUM_SPECIALS);
        if let Err(e) = model.validate() {
            problems.push(format!("model: {}", strip(e)));
        }
        for (name, t) in [("pretrain", &self.pretrain), ("finetune", &self.finetune)] {
            if let Err(e) = t.validate() {
                problems.push(format!("{name}: {}", strip(e)));
            }
            if t.seed != 0 {
                problems.push(format!("{name}.seed: set the top-level seed instead"));
            }
        }
        if let Err(e) = self.masking.resolve() {
            problems.push(format!("masking: {}", strip(e)));
        }
        if self.vocab.min_count == 0 {
            problems.push("vocab.min_count must be at least 1".into());
        }
        if self.decode.beam == 0 {
            problems.push("decode.beam must be at least 1".into());
        }
        if self.decode.max_len == 0 {
            problems.push("decode.max_len must be at least 1".into());
        }
        if !(self.decode.max_len_ratio > 0.0) {
            problems.push("decode.max_len_ratio must be positive".into());
        }
        if self.data.max_chars == 0 {
            problems.push("data.max_chars must be at least 1".into());
        }
        if let Err(e) = self.synth.rules.validate() {
            problems.push(format!("synth.rules: {}", strip(e)));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(CliError::config(problems.join("; ")))
        }
    }

    pub fn train_config(&self, base: &TrainConfig) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..base.clone()
        }
    }
}

fn strip(e: mapgn_core::Error) -> String {
    match e {
        mapgn_core::Error::Invalid(m) => m,
        other => other.to_string(),
    }
}

/// `(key, meaning)` for every configuration key, rendered into `--help`.
pub const CONFIG_KEYS: &[(&str, &str)] = &[
    ("seed", "master seed for initialization, shuffling, masking, dropout and synthesis (0)"),
    ("dtype", "\"f32\" or \"f64\"; f64 is the bit-exact verification mode (f32)"),
    ("model.arch", "\"pointer-generator\" or \"encoder-decoder\" (pointer-generator)"),
    ("model.emb_dim", "embedding width (32)"),
    ("model.enc_layers", "bidirectional LSTM encoder layers (1)"),
    ("model.enc_hidden", "encoder units per direction (32)"),
    ("model.dec_layers", "LSTM decoder layers (1)"),
    ("model.dec_hidden", "decoder units; also attention and head width (32)"),
    ("model.vocab_size", "ignored on input; taken from the vocabulary file"),
    ("model.dropout", "dropout rate during training (0.1)"),
    ("model.max_len", "longest source the model accepts, in tokens (200)"),
    ("pretrain.lr", "Adam learning rate (0.001)"),
    ("pretrain.beta1", "Adam first-moment decay (0.9)"),
    ("pretrain.beta2", "Adam second-moment decay (0.999)"),
    ("pretrain.eps", "Adam denominator epsilon (1e-8)"),
    ("pretrain.label_smoothing", "label smoothing epsilon in [0, 1) (0.1)"),
    ("pretrain.batch_size", "sentences per step (32)"),
    ("pretrain.max_len", "sentences are truncated to this many tokens (200)"),
    ("pretrain.steps", "total optimizer steps (1500)"),
    ("pretrain.seed", "must stay 0; use the top-level seed"),
    ("pretrain.grad_clip", "global gradient-norm clip, null to disable (5.0)"),
    ("pretrain.log_every", "loss-log interval in steps (10)"),
    ("pretrain.checkpoint_every", "checkpoint interval in steps, 0 for final only (500)"),
    ("pretrain.eval_every", "unused for pre-training (0)"),
    ("finetune.lr", "Adam learning rate (0.005)"),
    ("finetune.beta1", "Adam first-moment decay (0.9)"),
    ("finetune.beta2", "Adam second-moment decay (0.999)"),
    ("finetune.eps", "Adam denominator epsilon (1e-8)"),
    ("finetune.label_smoothing", "label smoothing epsilon in [0, 1) (0.1)"),
    ("finetune.batch_size", "pairs per step (20)"),
    ("finetune.max_len", "pairs are truncated to this many tokens (200)"),
    ("finetune.steps", "total optimizer steps (1000)"),
    ("finetune.seed", "must stay 0; use the top-level seed"),
    ("finetune.grad_clip", "global gradient-norm clip, null to disable (5.0)"),
    ("finetune.log_every", "loss-log interval in steps (10)"),
    ("finetune.checkpoint_every", "checkpoint interval in steps, 0 for final only (500)"),
    ("finetune.eval_every", "validation BLEU-3 interval for best-checkpoint selection, 0 to keep the final model (100)"),
    ("masking", "preset name \"mass1\", \"mass2\", \"mass3\", \"mapgn\", or a custom object (mapgn)"),
    ("masking.name", "custom spec: label stored in checkpoints"),
    ("masking.p_mask", "custom spec: probability of MASK per span token"),
    ("masking.p_random", "custom spec: probability of a random token"),
    ("masking.p_unchanged", "custom spec: probability of keeping the token; the three must sum to 1"),
    ("masking.random_source", "custom spec: \"all-vocab\" or \"masking-span\""),
    ("masking.span_ratio", "custom spec: span length as a fraction of the sentence (0.5)"),
    ("vocab.min_count", "minimum character frequency to enter the vocabulary (1)"),
    ("vocab.max_size", "cap on regular characters, null for none (null)"),
    ("decode.beam", "beam width; 1 is greedy (1)"),
    ("decode.max_len", "absolute output cap in tokens (200)"),
    ("decode.max_len_ratio", "output cap relative to source length (2.0)"),
    ("decode.max_len_slack", "tokens added to the relative cap (10)"),
    ("decode.length_norm", "rank finished beams by per-token log-probability (false)"),
    ("decode.threads", "decoding worker threads (1)"),
    ("data.max_chars", "longest accepted input line, in characters (1000)"),
    ("synth.rules.substitutions", "list of {spoken, normalized}; spoken forms are single words"),
    ("synth.rules.fillers", "single-word fillers inserted into spoken text"),
    ("synth.rules.insertion_prob", "chance of a filler before each spoken word (0.08)"),
    ("synth.rules.substitution_prob", "chance a substitutable fragment is spoken in substituted form (0.85)"),
    ("synth.rules.fragment_prob", "chance a sentence slot holds a substitutable fragment (0.3)"),
    ("synth.rules.lexicon", "plain words of the normalized language"),
    ("synth.rules.min_words", "fewest slots per sentence (3)"),
    ("synth.rules.max_words", "most slots per sentence (7)"),
    ("synth.rules.min_overlap", "pairs below this character overlap are redrawn (0.7)"),
    ("synth.rules.seed", "recorded in rules.json; generation uses the top-level seed"),
    ("synth.unpaired", "unpaired normalized sentences (10000)"),
    ("synth.train", "training pairs (500)"),
    ("synth.valid", "validation pairs (100)"),
    ("synth.test", "test pairs (200)"),
];

pub fn config_help() -> String {
    let width = CONFIG_KEYS.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    let mut s = String::from(
        "CONFIG KEYS (JSON file given with --config; unknown keys are rejected):\n",
    );
    for (k, v) in CONFIG_KEYS {
        s.push_str(&format!("  {k:<width$}  {v}\n"));
    }
    s.push_str(
        "\nEXIT CODES: 0 ok, 2 configuration error, 3 data error, 4 numeric failure, 1 internal error.\n\
         Errors are printed to stderr as one JSON line: {\"error\": <kind>, \"message\": <text>}.\n\
         Path arguments marked [env: ...] may be given through that environment variable.",
    );
    s
}

/// Overlays `over` onto `base`, recursing into objects so that a partial
/// section keeps the run defaults for the keys it omits.
fn merge(base: &mut serde_json::Value, over: serde_json::Value) {
    use serde_json::Value;
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}
