//! Single-stack transformer that rewrites by completing the input: the
//! input segment attends bidirectionally, the output segment attends to
//! the input plus earlier output positions. Every layer-norm site is a
//! conditional layer normalization whose scale and shift are affine in a
//! side conditioning vector; with zero-initialized projections it reduces
//! exactly to plain layer norm.

use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::gru::finish_sequence;
use crate::params::{BoundParams, Param, ParamSet};
use crate::tensor::{Graph, NodeId, TensorError};
use crate::text::{TokenSequence, EOS, INPUT_LEN, OUTPUT_LEN, SEP};
use crate::DecodeMode;

/// Learned position slots: the input segment owns the first 30, the
/// output segment the remaining 50.
pub const MAX_POSITIONS: usize = INPUT_LEN + OUTPUT_LEN;

#[derive(Debug, Error)]
pub enum TransformerError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("mask is {mask} positions but the token stream has {tokens}")]
    MaskMismatch { mask: usize, tokens: usize },
    #[error("segment lengths {n_in}+{n_out} exceed the {INPUT_LEN}+{OUTPUT_LEN} position table")]
    TooLong { n_in: usize, n_out: usize },
    #[error("pooled feature of width {got} does not match the configured {want}")]
    BadFeatureWidth { want: usize, got: usize },
    #[error("conditioning feature required for the +vis variant")]
    MissingFeature,
    #[error("model width {d_model} is not divisible by {heads} heads")]
    BadHeadCount { d_model: usize, heads: usize },
    #[error("beam width must be at least 1")]
    ZeroBeamWidth,
}

#[derive(Clone, Debug)]
pub struct TransformerConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    /// Width of the pooled side feature; None builds the unconditioned
    /// model.
    pub cond_dim: Option<usize>,
    pub ln_eps: f32,
}

impl TransformerConfig {
    /// Desk-scale defaults, trained from scratch.
    pub fn new(vocab_size: usize) -> TransformerConfig {
        TransformerConfig {
            vocab_size,
            d_model: 64,
            layers: 2,
            heads: 4,
            ffn_dim: 256,
            cond_dim: None,
            ln_eps: 1e-5,
        }
    }
}

/// Attention-permission matrix over `n_in + n_out` positions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SeqMask {
    pub n_in: usize,
    pub n_out: usize,
    allow: Vec<bool>,
}

/// Input rows see exactly the input columns; output row j additionally
/// sees output columns up to and including j.
pub fn build_seq2seq_mask(n_in: usize, n_out: usize) -> SeqMask {
    assert!(n_in >= 1, "need at least one input position");
    let t = n_in + n_out;
    let mut allow = vec![false; t * t];
    for i in 0..t {
        for j in 0..t {
            allow[i * t + j] = if j < n_in {
                true
            } else {
                i >= n_in && j <= i
            };
        }
    }
    SeqMask { n_in, n_out, allow }
}

impl SeqMask {
    pub fn size(&self) -> usize {
        self.n_in + self.n_out
    }

    pub fn allows(&self, from: usize, to: usize) -> bool {
        self.allow[from * self.size() + to]
    }

    pub fn allow_flags(&self) -> &[bool] {
        &self.allow
    }
}

/// Node ids for one conditional layer-norm site.
pub struct ClnIds {
    pub gamma0: NodeId,
    pub beta0: NodeId,
    /// (W_gamma, W_beta) conditional projections, absent on the plain
    /// model.
    pub cond: Option<(NodeId, NodeId)>,
}

/// Normalize each row of `x` to (x - mean) / (std + eps), then scale and
/// shift with gamma(c) = gamma0 + c W_gamma and beta(c) = beta0 + c W_beta.
/// Without a conditioning vector this is plain layer norm.
pub fn cond_layer_norm(
    g: &mut Graph,
    x: NodeId,
    cond: Option<NodeId>,
    ids: &ClnIds,
    eps: f32,
) -> Result<NodeId, TensorError> {
    let xhat = g.normalize_rows(x, eps)?;
    let (gamma, beta) = match (cond, &ids.cond) {
        (Some(c), Some((wg, wb))) => {
            let d = g.shape(ids.gamma0)[0];
            let cg = g.matmul(c, *wg)?;
            let cg = g.reshape(cg, vec![d])?;
            let gamma = g.add(ids.gamma0, cg)?;
            let cb = g.matmul(c, *wb)?;
            let cb = g.reshape(cb, vec![d])?;
            let beta = g.add(ids.beta0, cb)?;
            (gamma, beta)
        }
        _ => (ids.gamma0, ids.beta0),
    };
    let scaled = g.mul(xhat, gamma)?;
    g.add(scaled, beta)
}

/// Teacher-forced output-segment logits and their targets.
pub struct TeacherOutput {
    /// [n_out, vocab]: row j holds the prediction for output token j.
    pub logits: NodeId,
    pub targets: Vec<u32>,
}

pub struct TransformerModel {
    pub cfg: TransformerConfig,
}

impl TransformerModel {
    pub fn new(cfg: TransformerConfig) -> Result<TransformerModel, TransformerError> {
        if cfg.d_model % cfg.heads != 0 {
            return Err(TransformerError::BadHeadCount {
                d_model: cfg.d_model,
                heads: cfg.heads,
            });
        }
        assert!(cfg.vocab_size > 0 && cfg.d_model > 0 && cfg.layers > 0 && cfg.ffn_dim > 0);
        Ok(TransformerModel { cfg })
    }

    pub fn init_params(&self, rng: &mut ChaCha8Rng) -> ParamSet {
        let c = &self.cfg;
        let d = c.d_model;
        let mut p = ParamSet::new();
        p.insert("embedding", Param::randn(vec![c.vocab_size, d], d, rng));
        p.insert("pos", Param::randn(vec![MAX_POSITIONS, d], d, rng));
        let cln = |p: &mut ParamSet, name: String| {
            p.insert(format!("{name}.gamma0"), Param::ones(vec![d]));
            p.insert(format!("{name}.beta0"), Param::zeros(vec![d]));
            if c.cond_dim.is_some() {
                // Zero init: the conditioned model starts exactly equal to
                // the plain one.
                p.insert(format!("{name}.wgamma"), Param::zeros(vec![d, d]));
                p.insert(format!("{name}.wbeta"), Param::zeros(vec![d, d]));
            }
        };
        for l in 0..c.layers {
            for side in ["wq", "wk", "wv", "wo"] {
                p.insert(format!("l{l}.attn.{side}"), Param::randn(vec![d, d], d, rng));
                p.insert(format!("l{l}.attn.{side}_b"), Param::zeros(vec![d]));
            }
            p.insert(format!("l{l}.ffn.w1"), Param::randn(vec![d, c.ffn_dim], d, rng));
            p.insert(format!("l{l}.ffn.b1"), Param::zeros(vec![c.ffn_dim]));
            p.insert(format!("l{l}.ffn.w2"), Param::randn(vec![c.ffn_dim, d], c.ffn_dim, rng));
            p.insert(format!("l{l}.ffn.b2"), Param::zeros(vec![d]));
            cln(&mut p, format!("l{l}.ln1"));
            cln(&mut p, format!("l{l}.ln2"));
        }
        cln(&mut p, "final_ln".to_string());
        p.insert("out.w", Param::randn(vec![d, c.vocab_size], d, rng));
        p.insert("out.b", Param::zeros(vec![c.vocab_size]));
        if let Some(cd) = c.cond_dim {
            p.insert("cond.proj.w", Param::randn(vec![cd, d], cd, rng));
            p.insert("cond.proj.b", Param::zeros(vec![d]));
        }
        p
    }

    fn cln_ids(&self, bound: &BoundParams, name: &str) -> ClnIds {
        ClnIds {
            gamma0: bound.id(&format!("{name}.gamma0")),
            beta0: bound.id(&format!("{name}.beta0")),
            cond: self.cfg.cond_dim.map(|_| {
                (
                    bound.id(&format!("{name}.wgamma")),
                    bound.id(&format!("{name}.wbeta")),
                )
            }),
        }
    }

    /// Project a pooled feature into the conditioning vector [1, d_model].
    pub fn condition_node(
        &self,
        g: &mut Graph,
        bound: &BoundParams,
        feature: &[f32],
    ) -> Result<NodeId, TransformerError> {
        let want = self.cfg.cond_dim.ok_or(TransformerError::MissingFeature)?;
        if feature.len() != want {
            return Err(TransformerError::BadFeatureWidth { want, got: feature.len() });
        }
        let v = g.constant(feature.to_vec(), vec![1, want])?;
        Ok(crate::features::project_feature(
            g,
            v,
            bound.id("cond.proj.w"),
            bound.id("cond.proj.b"),
        )?)
    }

    /// Full forward pass to per-position vocabulary logits. `tokens` is the
    /// concatenated input+output stream; position slots are assigned
    /// 0..n_in for the input segment and 30.. for the output segment.
    pub fn forward(
        &self,
        g: &mut Graph,
        bound: &BoundParams,
        tokens: &[u32],
        mask: &SeqMask,
        cond: Option<NodeId>,
    ) -> Result<NodeId, TransformerError> {
        let (n_in, n_out) = (mask.n_in, mask.n_out);
        if tokens.len() != mask.size() {
            return Err(TransformerError::MaskMismatch {
                mask: mask.size(),
                tokens: tokens.len(),
            });
        }
        if n_in > INPUT_LEN || n_out > OUTPUT_LEN {
            return Err(TransformerError::TooLong { n_in, n_out });
        }
        let c = &self.cfg;
        let t = tokens.len();
        let dk = c.d_model / c.heads;

        let token_ix: Vec<usize> = tokens.iter().map(|&x| x as usize).collect();
        let pos_ix: Vec<usize> = (0..t)
            .map(|i| if i < n_in { i } else { INPUT_LEN + (i - n_in) })
            .collect();
        let tok_e = g.gather(bound.id("embedding"), &token_ix)?;
        let pos_e = g.gather(bound.id("pos"), &pos_ix)?;
        let mut x = g.add(tok_e, pos_e)?;

        let scale = 1.0 / (dk as f32).sqrt();
        for l in 0..c.layers {
            let name = |s: &str| format!("l{l}.attn.{s}");
            let proj = |g: &mut Graph, x: NodeId, s: &str| -> Result<NodeId, TensorError> {
                let m = g.matmul(x, bound.id(&name(s)))?;
                g.add(m, bound.id(&name(&format!("{s}_b"))))
            };
            let q = proj(g, x, "wq")?;
            let k = proj(g, x, "wk")?;
            let v = proj(g, x, "wv")?;
            let mut heads = Vec::with_capacity(c.heads);
            for h in 0..c.heads {
                let qh = g.slice(q, 1, h * dk, dk)?;
                let kh = g.slice(k, 1, h * dk, dk)?;
                let vh = g.slice(v, 1, h * dk, dk)?;
                let kt = g.transpose(kh)?;
                let scores = g.matmul(qh, kt)?;
                let scores = g.mul_scalar(scores, scale)?;
                let attn = g.masked_softmax(scores, 1, mask.allow_flags())?;
                heads.push(g.matmul(attn, vh)?);
            }
            let ctx = g.concat(1, &heads)?;
            let attn_out = proj(g, ctx, "wo")?;
            let res = g.add(x, attn_out)?;
            let ln1 = self.cln_ids(bound, &format!("l{l}.ln1"));
            x = cond_layer_norm(g, res, cond, &ln1, c.ln_eps)?;

            let h1 = g.matmul(x, bound.id(&format!("l{l}.ffn.w1")))?;
            let h1 = g.add(h1, bound.id(&format!("l{l}.ffn.b1")))?;
            let h1 = g.tanh(h1)?;
            let h2 = g.matmul(h1, bound.id(&format!("l{l}.ffn.w2")))?;
            let h2 = g.add(h2, bound.id(&format!("l{l}.ffn.b2")))?;
            let res = g.add(x, h2)?;
            let ln2 = self.cln_ids(bound, &format!("l{l}.ln2"));
            x = cond_layer_norm(g, res, cond, &ln2, c.ln_eps)?;
        }

        let final_ln = self.cln_ids(bound, "final_ln");
        let x = cond_layer_norm(g, x, cond, &final_ln, c.ln_eps)?;
        let logits = g.matmul(x, bound.id("out.w"))?;
        Ok(g.add(logits, bound.id("out.b"))?)
    }

    /// Build the completion stream `input .. SEP output_body ..` and return
    /// logits for the output segment: position j predicts output token j,
    /// ending with EOS.
    pub fn teacher_logits(
        &self,
        g: &mut Graph,
        bound: &BoundParams,
        input_tokens: &[u32],
        output_body: &[u32],
        cond: Option<NodeId>,
    ) -> Result<TeacherOutput, TransformerError> {
        let n_in = input_tokens.len();
        let n_out = output_body.len() + 1; // SEP + body
        let mut tokens = Vec::with_capacity(n_in + n_out);
        tokens.extend_from_slice(input_tokens);
        tokens.push(SEP);
        tokens.extend_from_slice(output_body);
        let mask = build_seq2seq_mask(n_in, n_out);
        let logits = self.forward(g, bound, &tokens, &mask, cond)?;
        let out_logits = g.slice(logits, 0, n_in, n_out)?;
        let mut targets = Vec::with_capacity(n_out);
        targets.extend_from_slice(output_body);
        targets.push(EOS);
        Ok(TeacherOutput { logits: out_logits, targets })
    }

    /// Complete the input greedily or with beam search, recomputing the
    /// forward pass with a grown mask each step.
    pub fn generate(
        &self,
        params: &ParamSet,
        input: &TokenSequence,
        cond_feature: Option<&[f32]>,
        mode: DecodeMode,
    ) -> Result<TokenSequence, TransformerError> {
        let mut g = Graph::new();
        let bound = params.bind(&mut g, false)?;
        let cond = match (cond_feature, self.cfg.cond_dim) {
            (Some(f), Some(_)) => Some(self.condition_node(&mut g, &bound, f)?),
            (None, Some(_)) => return Err(TransformerError::MissingFeature),
            _ => None,
        };
        let input_tokens: Vec<u32> = input.tokens().to_vec();

        let width = match mode {
            DecodeMode::Greedy => 1,
            DecodeMode::Beam(0) => return Err(TransformerError::ZeroBeamWidth),
            DecodeMode::Beam(w) => w,
        };

        struct Beam {
            content: Vec<u32>,
            logp: f64,
            finished: bool,
        }
        let mut beams = vec![Beam { content: Vec::new(), logp: 0.0, finished: false }];

        for _ in 0..OUTPUT_LEN {
            if beams.iter().all(|b| b.finished) {
                break;
            }
            let mut candidates: Vec<Beam> = Vec::new();
            for beam in beams {
                if beam.finished || beam.content.len() >= OUTPUT_LEN {
                    candidates.push(beam);
                    continue;
                }
                let mut tokens = input_tokens.clone();
                tokens.push(SEP);
                tokens.extend_from_slice(&beam.content);
                let mask = build_seq2seq_mask(input_tokens.len(), beam.content.len() + 1);
                let logits = self.forward(&mut g, &bound, &tokens, &mask, cond)?;
                let t = tokens.len();
                let last = g.slice(logits, 0, t - 1, 1)?;
                let logprobs = g.log_softmax(last, 1)?;
                let row = g.values(logprobs).to_vec();
                let mut ranked: Vec<(usize, f32)> = row.iter().copied().enumerate().collect();
                ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
                for &(token, lp) in ranked.iter().take(width) {
                    let mut content = beam.content.clone();
                    let finished = token as u32 == EOS;
                    if !finished {
                        content.push(token as u32);
                    }
                    candidates.push(Beam {
                        finished: finished || content.len() >= OUTPUT_LEN,
                        content,
                        logp: beam.logp + f64::from(lp),
                    });
                }
            }
            candidates.sort_by(|a, b| {
                b.logp.partial_cmp(&a.logp).unwrap().then_with(|| a.content.cmp(&b.content))
            });
            candidates.truncate(width);
            beams = candidates;
        }

        let mut best: Option<Beam> = None;
        for beam in beams {
            best = match best {
                None => Some(beam),
                Some(cur) => {
                    if beam.logp > cur.logp
                        || (beam.logp == cur.logp && beam.content < cur.content)
                    {
                        Some(beam)
                    } else {
                        Some(cur)
                    }
                }
            };
        }
        Ok(finish_sequence(best.expect("at least one beam").content))
    }
}
