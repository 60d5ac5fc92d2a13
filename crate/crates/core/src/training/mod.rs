//! Teacher-forced training for both model families: Adam with global-norm
//! clipping, early stopping on evaluation loss, divergence detection, and
//! a single-file checkpoint format.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError};

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{FeatureKind, FeatureSet};
use crate::gru::{GruBatch, GruConfig, GruError, GruModel};
use crate::params::{BoundParams, ParamSet};
use crate::tensor::{Graph, NodeId, TensorError};
use crate::text::{encode, TextError, TokenSequence, TripleExample, Vocab, BOS, EOS};
use crate::transformer::{TransformerConfig, TransformerError, TransformerModel};
use crate::DecodeMode;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "baseline")]
    Baseline,
    #[serde(rename = "baseline+vis")]
    BaselineVis,
    #[serde(rename = "transformer")]
    Transformer,
    #[serde(rename = "transformer+vis")]
    TransformerVis,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Baseline => "baseline",
            ModelKind::BaselineVis => "baseline+vis",
            ModelKind::Transformer => "transformer",
            ModelKind::TransformerVis => "transformer+vis",
        }
    }

    pub fn uses_features(self) -> bool {
        matches!(self, ModelKind::BaselineVis | ModelKind::TransformerVis)
    }

    pub fn is_transformer(self) -> bool {
        matches!(self, ModelKind::Transformer | ModelKind::TransformerVis)
    }

    /// Feature table kind the variant consumes.
    pub fn feature_kind(self) -> Option<FeatureKind> {
        match self {
            ModelKind::BaselineVis => Some(FeatureKind::Grid),
            ModelKind::TransformerVis => Some(FeatureKind::Pooled),
            _ => None,
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "baseline" => Ok(ModelKind::Baseline),
            "baseline+vis" => Ok(ModelKind::BaselineVis),
            "transformer" => Ok(ModelKind::Transformer),
            "transformer+vis" => Ok(ModelKind::TransformerVis),
            other => Err(format!(
                "unknown model kind {other:?} (expected baseline, baseline+vis, transformer, transformer+vis)"
            )),
        }
    }
}

fn default_epochs() -> usize { 50 }
fn default_batch() -> usize { 32 }
fn default_lr() -> f32 { 1e-3 }
fn default_beta1() -> f32 { 0.9 }
fn default_beta2() -> f32 { 0.999 }
fn default_adam_eps() -> f32 { 1e-8 }
fn default_clip() -> f32 { 1.0 }
fn default_patience() -> usize { 10 }
fn default_vocab_cap() -> usize { 5000 }
fn default_embed() -> usize { 256 }
fn default_hidden() -> usize { 768 }
fn default_d_model() -> usize { 64 }
fn default_layers() -> usize { 2 }
fn default_heads() -> usize { 4 }
fn default_ffn() -> usize { 256 }
fn default_feature_dim() -> usize { crate::features::DEFAULT_POOLED_DIM }

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelKind,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_beta1")]
    pub adam_beta1: f32,
    #[serde(default = "default_beta2")]
    pub adam_beta2: f32,
    #[serde(default = "default_adam_eps")]
    pub adam_eps: f32,
    #[serde(default = "default_clip")]
    pub clip_norm: f32,
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default = "default_vocab_cap")]
    pub vocab_cap: usize,
    /// GRU widths.
    #[serde(default = "default_embed")]
    pub embed_dim: usize,
    #[serde(default = "default_hidden")]
    pub hidden_dim: usize,
    #[serde(default = "default_hidden")]
    pub attn_dim: usize,
    /// Transformer widths.
    #[serde(default = "default_d_model")]
    pub d_model: usize,
    #[serde(default = "default_layers")]
    pub layers: usize,
    #[serde(default = "default_heads")]
    pub heads: usize,
    #[serde(default = "default_ffn")]
    pub ffn_dim: usize,
    /// Pooled feature width consumed by transformer+vis.
    #[serde(default = "default_feature_dim")]
    pub feature_dim: usize,
}

impl TrainConfig {
    pub fn new(model: ModelKind) -> TrainConfig {
        TrainConfig {
            model,
            epochs: default_epochs(),
            batch_size: default_batch(),
            learning_rate: default_lr(),
            seed: 0,
            adam_beta1: default_beta1(),
            adam_beta2: default_beta2(),
            adam_eps: default_adam_eps(),
            clip_norm: default_clip(),
            patience: default_patience(),
            vocab_cap: default_vocab_cap(),
            embed_dim: default_embed(),
            hidden_dim: default_hidden(),
            attn_dim: default_hidden(),
            d_model: default_d_model(),
            layers: default_layers(),
            heads: default_heads(),
            ffn_dim: default_ffn(),
            feature_dim: default_feature_dim(),
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let positive = [
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("vocab_cap", self.vocab_cap),
            ("embed_dim", self.embed_dim),
            ("hidden_dim", self.hidden_dim),
            ("attn_dim", self.attn_dim),
            ("d_model", self.d_model),
            ("layers", self.layers),
            ("heads", self.heads),
            ("ffn_dim", self.ffn_dim),
            ("feature_dim", self.feature_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(TrainError::InvalidConfig(format!("{name} must be positive")));
            }
        }
        for (name, v) in [
            ("learning_rate", self.learning_rate),
            ("adam_beta1", self.adam_beta1),
            ("adam_beta2", self.adam_beta2),
            ("adam_eps", self.adam_eps),
            ("clip_norm", self.clip_norm),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(TrainError::InvalidConfig(format!(
                    "{name} must be positive and finite"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training set is empty")]
    EmptyTrainSet,
    #[error("evaluation set is empty")]
    EmptyEvalSet,
    #[error("model kind {0} requires a feature set")]
    FeaturesRequired(&'static str),
    #[error("model kind {model} needs {want:?} features, got {got:?}")]
    FeatureKindMismatch { model: &'static str, want: FeatureKind, got: FeatureKind },
    #[error("example {0} has no feature vector")]
    MissingFeature(String),
    #[error("example {id}: feature width {got} does not match configured {want}")]
    FeatureWidth { id: String, want: usize, got: usize },
    #[error("training diverged at epoch {epoch}: {source}")]
    Diverged {
        epoch: usize,
        #[source]
        source: TensorError,
    },
    #[error("every target position is padding")]
    AllPadded,
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Text(#[from] TextError),
    #[error(transparent)]
    Gru(#[from] GruError),
    #[error(transparent)]
    Transformer(#[from] TransformerError),
}

/// Mean negative log-likelihood of `targets` under `logits`, restricted to
/// positions where `pad_mask` is true.
pub fn masked_cross_entropy(
    g: &mut Graph,
    logits: NodeId,
    targets: &[u32],
    pad_mask: &[bool],
) -> Result<NodeId, TrainError> {
    let rows = g.shape(logits)[0];
    assert_eq!(rows, targets.len(), "one target per logit row");
    assert_eq!(rows, pad_mask.len(), "one mask flag per logit row");
    let n_valid = pad_mask.iter().filter(|&&m| m).count();
    if n_valid == 0 {
        return Err(TrainError::AllPadded);
    }
    let logp = g.log_softmax(logits, 1)?;
    let ix: Vec<usize> = targets.iter().map(|&t| t as usize).collect();
    let picked = g.pick_per_row(logp, &ix)?;
    let total = if pad_mask.iter().all(|&m| m) {
        g.sum_all(picked)?
    } else {
        let mask_vals: Vec<f32> = pad_mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
        let mask_node = g.constant(mask_vals, vec![rows])?;
        let kept = g.mul(picked, mask_node)?;
        g.sum_all(kept)?
    };
    Ok(g.mul_scalar(total, -1.0 / n_valid as f32)?)
}

/// Adam with optional global-norm clipping applied to the incoming
/// gradients.
pub struct Adam {
    lr: f32,
    beta1: f32,
    beta2: f32,
    eps: f32,
    clip_norm: f32,
    t: i32,
    m: IndexMap<String, Vec<f32>>,
    v: IndexMap<String, Vec<f32>>,
}

impl Adam {
    pub fn new(cfg: &TrainConfig) -> Adam {
        Adam {
            lr: cfg.learning_rate,
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
            clip_norm: cfg.clip_norm,
            t: 0,
            m: IndexMap::new(),
            v: IndexMap::new(),
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &[(String, Vec<f32>)]) {
        let mut sq = 0.0f64;
        for (_, g) in grads {
            for &x in g {
                sq += f64::from(x) * f64::from(x);
            }
        }
        let norm = sq.sqrt() as f32;
        let scale = if norm > self.clip_norm { self.clip_norm / norm } else { 1.0 };

        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for (name, g) in grads {
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let p = &mut params.get_mut(name).values;
            for i in 0..g.len() {
                let gi = g[i] * scale;
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p[i] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub eval_loss: f64,
}

/// Trained model state: parameters, the exact config and vocabulary they
/// were trained with, and the per-epoch loss history.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub params: ParamSet,
    pub vocab: Vocab,
    pub history: Vec<EpochStats>,
}

/// One example pre-encoded for teacher forcing.
#[derive(Clone)]
struct Encoded {
    feature_ref: String,
    input: TokenSequence,
    /// Output tokens without BOS/EOS.
    body: Vec<u32>,
}

fn encode_examples(examples: &[TripleExample], vocab: &Vocab) -> Vec<Encoded> {
    examples
        .iter()
        .map(|ex| {
            let input = encode(&ex.bland, crate::text::Role::Input, vocab);
            let out = encode(&ex.attractive, crate::text::Role::Output, vocab);
            let body = out.tokens()[1..out.true_length - 1].to_vec();
            Encoded {
                feature_ref: ex.feature_ref.clone(),
                input,
                body,
            }
        })
        .collect()
}

enum ModelImpl {
    Gru(GruModel),
    Transformer(TransformerModel),
}

fn model_for(cfg: &TrainConfig, vocab_size: usize) -> Result<ModelImpl, TrainError> {
    Ok(match cfg.model {
        ModelKind::Baseline | ModelKind::BaselineVis => ModelImpl::Gru(GruModel::new(GruConfig {
            vocab_size,
            embed_dim: cfg.embed_dim,
            hidden_dim: cfg.hidden_dim,
            layers: cfg.layers,
            attn_dim: cfg.attn_dim,
            grid_attn: cfg.model == ModelKind::BaselineVis,
        })),
        ModelKind::Transformer | ModelKind::TransformerVis => {
            ModelImpl::Transformer(TransformerModel::new(TransformerConfig {
                vocab_size,
                d_model: cfg.d_model,
                layers: cfg.layers,
                heads: cfg.heads,
                ffn_dim: cfg.ffn_dim,
                cond_dim: (cfg.model == ModelKind::TransformerVis).then_some(cfg.feature_dim),
                ln_eps: 1e-5,
            })?)
        }
    })
}

fn check_features(
    cfg: &TrainConfig,
    examples: &[&[TripleExample]],
    features: Option<&FeatureSet>,
) -> Result<(), TrainError> {
    let Some(want) = cfg.model.feature_kind() else {
        return Ok(());
    };
    let set = features.ok_or(TrainError::FeaturesRequired(cfg.model.as_str()))?;
    if set.kind() != want {
        return Err(TrainError::FeatureKindMismatch {
            model: cfg.model.as_str(),
            want,
            got: set.kind(),
        });
    }
    for group in examples {
        for ex in *group {
            let Some(v) = set.get(&ex.feature_ref) else {
                return Err(TrainError::MissingFeature(ex.id.clone()));
            };
            if cfg.model == ModelKind::TransformerVis && v.len() != cfg.feature_dim {
                return Err(TrainError::FeatureWidth {
                    id: ex.id.clone(),
                    want: cfg.feature_dim,
                    got: v.len(),
                });
            }
        }
    }
    Ok(())
}

/// Forward one batch to (logits, targets); all mask flags are true because
/// batches never контain padding (GRU batches are length-bucketed and the
/// transformer path is per-example).
fn batch_forward(
    model: &ModelImpl,
    g: &mut Graph,
    bound: &BoundParams,
    batch: &[&Encoded],
    features: Option<&FeatureSet>,
) -> Result<(NodeId, Vec<u32>), TrainError> {
    match model {
        ModelImpl::Gru(gru) => {
            let s = batch[0].input.true_length;
            let t = batch[0].body.len() + 1;
            let b = batch.len();
            let mut enc = vec![vec![0u32; b]; s];
            let mut dec_in = vec![vec![0u32; b]; t];
            let mut dec_tgt = vec![vec![0u32; b]; t];
            for (bi, ex) in batch.iter().enumerate() {
                debug_assert_eq!(ex.input.true_length, s);
                debug_assert_eq!(ex.body.len() + 1, t);
                for (si, &tok) in ex.input.tokens().iter().enumerate() {
                    enc[si][bi] = tok;
                }
                dec_in[0][bi] = BOS;
                for (ti, &tok) in ex.body.iter().enumerate() {
                    dec_in[ti + 1][bi] = tok;
                    dec_tgt[ti][bi] = tok;
                }
                dec_tgt[t - 1][bi] = EOS;
            }
            let grid = if gru.cfg.grid_attn {
                let set = features.expect("checked by check_features");
                Some(
                    batch
                        .iter()
                        .map(|ex| set.get(&ex.feature_ref).expect("checked").to_vec())
                        .collect(),
                )
            } else {
                None
            };
            let out = gru.teacher_logits(
                g,
                bound,
                &GruBatch {
                    enc_tokens: enc,
                    dec_inputs: dec_in,
                    dec_targets: dec_tgt,
                    grid_features: grid,
                },
            )?;
            Ok((out.logits, out.targets))
        }
        ModelImpl::Transformer(tf) => {
            let mut parts = Vec::with_capacity(batch.len());
            let mut targets = Vec::new();
            for ex in batch {
                let cond = if tf.cfg.cond_dim.is_some() {
                    let set = features.expect("checked by check_features");
                    let feat = set.get(&ex.feature_ref).expect("checked");
                    Some(tf.condition_node(g, bound, feat)?)
                } else {
                    None
                };
                let out = tf.teacher_logits(g, bound, ex.input.tokens(), &ex.body, cond)?;
                parts.push(out.logits);
                targets.extend(out.targets);
            }
            let logits = g.concat(0, &parts)?;
            Ok((logits, targets))
        }
    }
}

/// Deterministic batching: GRU batches bucket by (input length, output
/// length) in shuffled order; transformer batches are plain chunks.
fn make_batches(
    model: &ModelImpl,
    order: &[usize],
    examples: &[Encoded],
    cap: usize,
) -> Vec<Vec<usize>> {
    match model {
        ModelImpl::Gru(_) => {
            let mut buckets: IndexMap<(usize, usize), Vec<usize>> = IndexMap::new();
            for &i in order {
                let key = (examples[i].input.true_length, examples[i].body.len());
                buckets.entry(key).or_default().push(i);
            }
            buckets
                .into_iter()
                .flat_map(|(_, ids)| {
                    ids.chunks(cap).map(<[usize]>::to_vec).collect::<Vec<_>>()
                })
                .collect()
        }
        ModelImpl::Transformer(_) => order.chunks(cap).map(<[usize]>::to_vec).collect(),
    }
}

fn dataset_loss(
    model: &ModelImpl,
    params: &ParamSet,
    examples: &[Encoded],
    features: Option<&FeatureSet>,
    cap: usize,
) -> Result<f64, TrainError> {
    let order: Vec<usize> = (0..examples.len()).collect();
    let mut total = 0.0f64;
    let mut tokens = 0usize;
    for batch_ids in make_batches(model, &order, examples, cap) {
        let batch: Vec<&Encoded> = batch_ids.iter().map(|&i| &examples[i]).collect();
        let mut g = Graph::new();
        let bound = params.bind(&mut g, false)?;
        let (logits, targets) = batch_forward(model, &mut g, &bound, &batch, features)?;
        let mask = vec![true; targets.len()];
        let loss = masked_cross_entropy(&mut g, logits, &targets, &mask)?;
        total += f64::from(g.values(loss)[0]) * targets.len() as f64;
        tokens += targets.len();
    }
    Ok(total / tokens.max(1) as f64)
}

/// Train a model from scratch. Deterministic for a fixed config and seed;
/// returns the checkpoint with the best evaluation loss. A non-finite
/// value anywhere in a training step aborts with [`TrainError::Diverged`].
pub fn train(
    cfg: &TrainConfig,
    train_set: &[TripleExample],
    features: Option<&FeatureSet>,
    eval_set: &[TripleExample],
) -> Result<Checkpoint, TrainError> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::EmptyTrainSet);
    }
    if eval_set.is_empty() {
        return Err(TrainError::EmptyEvalSet);
    }
    check_features(cfg, &[train_set, eval_set], features)?;

    let corpus: Vec<&str> = train_set
        .iter()
        .flat_map(|ex| [ex.bland.as_str(), ex.attractive.as_str()])
        .collect();
    let vocab = Vocab::build(&corpus, cfg.vocab_cap)?;
    let train_enc = encode_examples(train_set, &vocab);
    let eval_enc = encode_examples(eval_set, &vocab);

    let model = model_for(cfg, vocab.size())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = match &model {
        ModelImpl::Gru(m) => m.init_params(&mut rng),
        ModelImpl::Transformer(m) => m.init_params(&mut rng),
    };
    let mut adam = Adam::new(cfg);

    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, ParamSet)> = None;
    let mut stale = 0usize;

    let diverged = |epoch: usize, e: TrainError| -> TrainError {
        let tensor = match e {
            TrainError::Tensor(t) => Some(t),
            TrainError::Gru(GruError::Tensor(t)) => Some(t),
            TrainError::Transformer(TransformerError::Tensor(t)) => Some(t),
            other => return other,
        };
        match tensor {
            Some(t @ TensorError::NonFinite { .. }) => TrainError::Diverged { epoch, source: t },
            Some(t) => TrainError::Tensor(t),
            None => unreachable!(),
        }
    };

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train_enc.len()).collect();
        order.shuffle(&mut rng);
        let mut total = 0.0f64;
        let mut tokens = 0usize;
        for batch_ids in make_batches(&model, &order, &train_enc, cfg.batch_size) {
            let batch: Vec<&Encoded> = batch_ids.iter().map(|&i| &train_enc[i]).collect();
            let mut g = Graph::new();
            let bound = params.bind(&mut g, true)?;
            let step = (|| -> Result<(f64, usize), TrainError> {
                let (logits, targets) = batch_forward(&model, &mut g, &bound, &batch, features)?;
                let mask = vec![true; targets.len()];
                let loss = masked_cross_entropy(&mut g, logits, &targets, &mask)?;
                let loss_val = f64::from(g.values(loss)[0]);
                let grads = g.backward(loss)?;
                let named: Vec<(String, Vec<f32>)> = bound
                    .iter()
                    .filter_map(|(name, id)| {
                        grads.get(id).map(|gr| (name.clone(), gr.to_vec()))
                    })
                    .collect();
                adam.step(&mut params, &named);
                Ok((loss_val, targets.len()))
            })();
            match step {
                Ok((loss_val, ntok)) => {
                    total += loss_val * ntok as f64;
                    tokens += ntok;
                }
                Err(e) => return Err(diverged(epoch, e)),
            }
        }
        let train_loss = total / tokens.max(1) as f64;
        let eval_loss = dataset_loss(&model, &params, &eval_enc, features, cfg.batch_size)
            .map_err(|e| diverged(epoch, e))?;
        history.push(EpochStats { epoch, train_loss, eval_loss });

        let improved = best.as_ref().map_or(true, |(b, _)| eval_loss < *b);
        if improved {
            best = Some((eval_loss, params.clone()));
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }

    let (_, best_params) = best.expect("at least one epoch ran");
    Ok(Checkpoint { config: cfg.clone(), params: best_params, vocab, history })
}

/// Inference-side view of a checkpoint.
pub struct Predictor<'a> {
    ckpt: &'a Checkpoint,
    model: ModelImpl,
}

impl<'a> Predictor<'a> {
    pub fn new(ckpt: &'a Checkpoint) -> Result<Predictor<'a>, TrainError> {
        let model = model_for(&ckpt.config, ckpt.vocab.size())?;
        Ok(Predictor { ckpt, model })
    }

    pub fn vocab(&self) -> &Vocab {
        &self.ckpt.vocab
    }

    pub fn uses_features(&self) -> bool {
        self.ckpt.config.model.uses_features()
    }

    /// Generate the rewrite for one bland question.
    pub fn generate(
        &self,
        bland: &str,
        feature: Option<&[f32]>,
        mode: DecodeMode,
    ) -> Result<TokenSequence, TrainError> {
        let input = encode(bland, crate::text::Role::Input, &self.ckpt.vocab);
        Ok(match &self.model {
            ModelImpl::Gru(m) => m.generate(&self.ckpt.params, &input, feature, mode)?,
            ModelImpl::Transformer(m) => m.generate(&self.ckpt.params, &input, feature, mode)?,
        })
    }

    /// Teacher-forced argmax predictions and targets for one example's
    /// output segment.
    pub fn teacher_predictions(
        &self,
        ex: &TripleExample,
        feature: Option<&[f32]>,
    ) -> Result<(Vec<u32>, Vec<u32>), TrainError> {
        let enc = encode_examples(std::slice::from_ref(ex), &self.ckpt.vocab);
        let mut g = Graph::new();
        let bound = self.ckpt.params.bind(&mut g, false)?;
        let features_set;
        let features = match feature {
            Some(f) => {
                let mut vectors = std::collections::HashMap::new();
                vectors.insert(ex.feature_ref.clone(), f.to_vec());
                features_set = match self.ckpt.config.model.feature_kind() {
                    Some(FeatureKind::Grid) => FeatureSet::Grid { vectors },
                    _ => FeatureSet::from_pooled(vectors),
                };
                Some(&features_set)
            }
            None => None,
        };
        let (logits, targets) =
            batch_forward(&self.model, &mut g, &bound, &[&enc[0]], features)?;
        let vals = g.values(logits);
        let vocab = self.ckpt.vocab.size();
        let predicted: Vec<u32> = (0..targets.len())
            .map(|r| {
                let row = &vals[r * vocab..(r + 1) * vocab];
                argmax(row) as u32
            })
            .collect();
        Ok((predicted, targets))
    }

    /// Fraction of teacher-forced output positions predicted exactly.
    pub fn token_accuracy(
        &self,
        examples: &[TripleExample],
        features: Option<&FeatureSet>,
    ) -> Result<f64, TrainError> {
        check_features(&self.ckpt.config, &[examples], features)?;
        let mut hit = 0usize;
        let mut total = 0usize;
        for ex in examples {
            let feature = features.and_then(|f| f.get(&ex.feature_ref));
            let (predicted, targets) = self.teacher_predictions(ex, feature)?;
            hit += predicted.iter().zip(&targets).filter(|(p, t)| p == t).count();
            total += targets.len();
        }
        Ok(hit as f64 / total.max(1) as f64)
    }
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0usize;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}
