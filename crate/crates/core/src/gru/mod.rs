//! GRU encoder/decoder with additive attention over the encoder states,
//! and an optional second attention over a 49x2048 image feature grid.
//!
//! The decoder feeds each step with the previous token embedding
//! concatenated with the attention context(s); scores use the previous
//! top-layer decoder state. Only the top layer attends.

use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::features::{GRID_COLS, GRID_ROWS};
use crate::params::{BoundParams, Param, ParamSet};
use crate::tensor::{Graph, NodeId, TensorError};
use crate::text::{TokenSequence, BOS, EOS, OUTPUT_LEN};
use crate::DecodeMode;

#[derive(Debug, Error)]
pub enum GruError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("grid features required for the +vis variant")]
    MissingFeatures,
    #[error("grid feature must hold 49x2048 values, got {0}")]
    BadFeatureShape(usize),
    #[error("beam width must be at least 1")]
    ZeroBeamWidth,
}

#[derive(Clone, Debug)]
pub struct GruConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub layers: usize,
    /// Attention key width k.
    pub attn_dim: usize,
    /// Add the second attention over grid image features.
    pub grid_attn: bool,
}

impl GruConfig {
    pub fn new(vocab_size: usize) -> GruConfig {
        GruConfig {
            vocab_size,
            embed_dim: 256,
            hidden_dim: 768,
            layers: 2,
            attn_dim: 768,
            grid_attn: false,
        }
    }
}

/// Node ids for one GRU cell's weights.
#[derive(Clone, Copy)]
pub struct CellIds {
    pub wz: NodeId,
    pub uz: NodeId,
    pub bz: NodeId,
    pub wr: NodeId,
    pub ur: NodeId,
    pub br: NodeId,
    pub wh: NodeId,
    pub uh: NodeId,
    pub bh: NodeId,
}

/// One GRU step over a batch of states:
/// z = sig(x Wz + h Uz + bz), r = sig(x Wr + h Ur + br),
/// cand = tanh(x Wh + (r*h) Uh + bh), h' = (1-z)*h + z*cand.
pub fn gru_cell(g: &mut Graph, x: NodeId, h: NodeId, c: &CellIds) -> Result<NodeId, TensorError> {
    let gate = |g: &mut Graph, w, u, b| -> Result<NodeId, TensorError> {
        let xw = g.matmul(x, w)?;
        let hu = g.matmul(h, u)?;
        let s = g.add(xw, hu)?;
        g.add(s, b)
    };
    let z = gate(g, c.wz, c.uz, c.bz)?;
    let z = g.sigmoid(z)?;
    let r = gate(g, c.wr, c.ur, c.br)?;
    let r = g.sigmoid(r)?;
    let rh = g.mul(r, h)?;
    let xw = g.matmul(x, c.wh)?;
    let rhu = g.matmul(rh, c.uh)?;
    let pre = g.add(xw, rhu)?;
    let pre = g.add(pre, c.bh)?;
    let cand = g.tanh(pre)?;
    let zh = g.mul(z, h)?;
    let keep = g.sub(h, zh)?;
    let zc = g.mul(z, cand)?;
    g.add(keep, zc)
}

/// Attention weights and blended context for one query step.
#[derive(Debug)]
pub struct AttentionOutput {
    /// [S, B]: weight of source position s for batch row b.
    pub alpha: NodeId,
    /// [B, D_src]: alpha-weighted sum of the source rows.
    pub context: NodeId,
}

/// Additive attention with the source-side projection precomputed once;
/// `step` is then cheap per decoder position.
///
/// Source rows are laid out time-major: row `s*B + b`.
pub struct PreparedAttention {
    key_flat: NodeId, // [S*B, k] = src W_s
    src_flat: NodeId, // [S*B, D_src]
    w_query: NodeId,  // [H, k]
    v_col: NodeId,    // [k, 1]
    allow: Vec<bool>, // per (s, b)
    s: usize,
    b: usize,
}

impl PreparedAttention {
    /// `w` is the stacked [H + D_src, k] score matrix, `v` the k-vector.
    pub fn prepare(
        g: &mut Graph,
        w: NodeId,
        v: NodeId,
        src_flat: NodeId,
        hidden: usize,
        batch: usize,
        mask: &[bool],
    ) -> Result<PreparedAttention, TensorError> {
        let src_shape = g.shape(src_flat).to_vec();
        let d_src = src_shape[1];
        let s = src_shape[0] / batch;
        let w_query = g.slice(w, 0, 0, hidden)?;
        let w_src = g.slice(w, 0, hidden, d_src)?;
        let key_flat = g.matmul(src_flat, w_src)?;
        let k = g.shape(key_flat)[1];
        let v_col = g.reshape(v, vec![k, 1])?;
        Ok(PreparedAttention {
            key_flat,
            src_flat,
            w_query,
            v_col,
            allow: mask.to_vec(),
            s,
            b: batch,
        })
    }

    /// Score every source row against the query state and blend.
    pub fn step(&self, g: &mut Graph, query: NodeId) -> Result<AttentionOutput, TensorError> {
        let q = g.matmul(query, self.w_query)?; // [B, k]
        let reps = vec![q; self.s];
        let q_rep = g.concat(0, &reps)?; // [S*B, k]
        let summed = g.add(self.key_flat, q_rep)?;
        let act = g.tanh(summed)?;
        let scores = g.matmul(act, self.v_col)?; // [S*B, 1]
        let scores = g.reshape(scores, vec![self.s, self.b])?;
        let alpha = g.masked_softmax(scores, 0, &self.allow)?;
        let alpha_flat = g.reshape(alpha, vec![self.s * self.b])?;
        let scaled = g.row_scale(self.src_flat, alpha_flat)?;
        let d_src = g.shape(self.src_flat)[1];
        let grouped = g.reshape(scaled, vec![self.s, self.b * d_src])?;
        let ctx = g.sum_axis(grouped, 0)?;
        let context = g.reshape(ctx, vec![self.b, d_src])?;
        Ok(AttentionOutput { alpha, context })
    }
}

/// One-off additive attention; `h_s` rows are time-major over a batch of
/// `h_t` rows.
pub fn luong_attention(
    g: &mut Graph,
    h_t: NodeId,
    h_s: NodeId,
    mask: &[bool],
    w: NodeId,
    v: NodeId,
) -> Result<AttentionOutput, TensorError> {
    let batch = g.shape(h_t)[0];
    let hidden = g.shape(h_t)[1];
    let att = PreparedAttention::prepare(g, w, v, h_s, hidden, batch, mask)?;
    att.step(g, h_t)
}

/// Teacher-forcing batch, time-major: `enc_tokens[t][b]`. All sequences in
/// a batch share one encoder length and one decoder length (the training
/// loop buckets by length).
pub struct GruBatch {
    pub enc_tokens: Vec<Vec<u32>>,
    pub dec_inputs: Vec<Vec<u32>>,
    pub dec_targets: Vec<Vec<u32>>,
    /// Per-example 49x2048 grids, required when the config enables
    /// grid attention.
    pub grid_features: Option<Vec<Vec<f32>>>,
}

impl GruBatch {
    pub fn batch_size(&self) -> usize {
        self.enc_tokens.first().map_or(0, Vec::len)
    }
}

/// Teacher-forced logits plus flattened targets, time-major `[T*B]`.
pub struct TeacherOutput {
    pub logits: NodeId,
    pub targets: Vec<u32>,
}

pub struct GruModel {
    pub cfg: GruConfig,
}

struct EncoderOutput {
    /// Top-layer state per source position, each [B, H].
    top: Vec<NodeId>,
    /// Final state per layer, each [B, H].
    finals: Vec<NodeId>,
}

impl GruModel {
    pub fn new(cfg: GruConfig) -> GruModel {
        assert!(cfg.vocab_size > 0 && cfg.embed_dim > 0 && cfg.hidden_dim > 0);
        assert!(cfg.layers > 0 && cfg.attn_dim > 0);
        GruModel { cfg }
    }

    fn dec_input_dim(&self) -> usize {
        let mut d = self.cfg.embed_dim + self.cfg.hidden_dim;
        if self.cfg.grid_attn {
            d += GRID_COLS;
        }
        d
    }

    pub fn init_params(&self, rng: &mut ChaCha8Rng) -> ParamSet {
        let c = &self.cfg;
        let mut p = ParamSet::new();
        p.insert("embedding", Param::randn(vec![c.vocab_size, c.embed_dim], c.embed_dim, rng));
        let cell = |p: &mut ParamSet, prefix: String, input: usize, rng: &mut ChaCha8Rng| {
            for gate in ["z", "r", "h"] {
                p.insert(
                    format!("{prefix}.w{gate}"),
                    Param::randn(vec![input, c.hidden_dim], input, rng),
                );
                p.insert(
                    format!("{prefix}.u{gate}"),
                    Param::randn(vec![c.hidden_dim, c.hidden_dim], c.hidden_dim, rng),
                );
                p.insert(format!("{prefix}.b{gate}"), Param::zeros(vec![c.hidden_dim]));
            }
        };
        for l in 0..c.layers {
            let input = if l == 0 { c.embed_dim } else { c.hidden_dim };
            cell(&mut p, format!("enc{l}"), input, rng);
        }
        for l in 0..c.layers {
            let input = if l == 0 { self.dec_input_dim() } else { c.hidden_dim };
            cell(&mut p, format!("dec{l}"), input, rng);
        }
        p.insert(
            "attn.w",
            Param::randn(vec![2 * c.hidden_dim, c.attn_dim], 2 * c.hidden_dim, rng),
        );
        p.insert("attn.v", Param::randn(vec![c.attn_dim], c.attn_dim, rng));
        if c.grid_attn {
            p.insert(
                "attn_vis.w",
                Param::randn(
                    vec![c.hidden_dim + GRID_COLS, c.attn_dim],
                    c.hidden_dim + GRID_COLS,
                    rng,
                ),
            );
            p.insert("attn_vis.v", Param::randn(vec![c.attn_dim], c.attn_dim, rng));
        }
        p.insert("out.w", Param::randn(vec![c.hidden_dim, c.vocab_size], c.hidden_dim, rng));
        p.insert("out.b", Param::zeros(vec![c.vocab_size]));
        p
    }

    fn cell_ids(bound: &BoundParams, prefix: &str) -> CellIds {
        CellIds {
            wz: bound.id(&format!("{prefix}.wz")),
            uz: bound.id(&format!("{prefix}.uz")),
            bz: bound.id(&format!("{prefix}.bz")),
            wr: bound.id(&format!("{prefix}.wr")),
            ur: bound.id(&format!("{prefix}.ur")),
            br: bound.id(&format!("{prefix}.br")),
            wh: bound.id(&format!("{prefix}.wh")),
            uh: bound.id(&format!("{prefix}.uh")),
            bh: bound.id(&format!("{prefix}.bh")),
        }
    }

    fn embed(
        &self,
        g: &mut Graph,
        bound: &BoundParams,
        tokens: &[u32],
    ) -> Result<NodeId, TensorError> {
        let indices: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        g.gather(bound.id("embedding"), &indices)
    }

    fn encode(
        &self,
        g: &mut Graph,
        bound: &BoundParams,
        enc_tokens: &[Vec<u32>],
    ) -> Result<EncoderOutput, TensorError> {
        let batch = enc_tokens[0].len();
        let h = self.cfg.hidden_dim;
        let zero = vec![0.0f32; batch * h];
        let mut states: Vec<NodeId> = (0..self.cfg.layers)
            .map(|_| g.constant(zero.clone(), vec![batch, h]))
            .collect::<Result<_, _>>()?;
        let cells: Vec<CellIds> =
            (0..self.cfg.layers).map(|l| Self::cell_ids(bound, &format!("enc{l}"))).collect();
        let mut top = Vec::with_capacity(enc_tokens.len());
        for step_tokens in enc_tokens {
            let mut x = self.embed(g, bound, step_tokens)?;
            for (l, cell) in cells.iter().enumerate() {
                states[l] = gru_cell(g, x, states[l], cell)?;
                x = states[l];
            }
            top.push(x);
        }
        Ok(EncoderOutput { top, finals: states })
    }

    fn prepare_text_attention(
        &self,
        g: &mut Graph,
        bound: &BoundParams,
        enc: &EncoderOutput,
        batch: usize,
    ) -> Result<PreparedAttention, TensorError> {
        let hs_flat = g.concat(0, &enc.top)?;
        let mask = vec![true; enc.top.len() * batch];
        PreparedAttention::prepare(
            g,
            bound.id("attn.w"),
            bound.id("attn.v"),
            hs_flat,
            self.cfg.hidden_dim,
            batch,
            &mask,
        )
    }

    fn prepare_grid_attention(
        &self,
        g: &mut Graph,
        bound: &BoundParams,
        grids: &[Vec<f32>],
        batch: usize,
    ) -> Result<PreparedAttention, GruError> {
        for grid in grids {
            if grid.len() != GRID_ROWS * GRID_COLS {
                return Err(GruError::BadFeatureShape(grid.len()));
            }
        }
        // Time-major rows: grid cell s of example b at row s*B + b.
        let mut flat = vec![0.0f32; GRID_ROWS * batch * GRID_COLS];
        for (b, grid) in grids.iter().enumerate() {
            for s in 0..GRID_ROWS {
                let dst = (s * batch + b) * GRID_COLS;
                let src = s * GRID_COLS;
                flat[dst..dst + GRID_COLS].copy_from_slice(&grid[src..src + GRID_COLS]);
            }
        }
        let src_flat = g.constant(flat, vec![GRID_ROWS * batch, GRID_COLS])?;
        let mask = vec![true; GRID_ROWS * batch];
        Ok(PreparedAttention::prepare(
            g,
            bound.id("attn_vis.w"),
            bound.id("attn_vis.v"),
            src_flat,
            self.cfg.hidden_dim,
            batch,
            &mask,
        )?)
    }

    /// One decoder step: embed the previous tokens, attend, run the cell
    /// stack, and project to vocabulary logits.
    #[allow(clippy::too_many_arguments)]
    fn decoder_step(
        &self,
        g: &mut Graph,
        bound: &BoundParams,
        cells: &[CellIds],
        text_attn: &PreparedAttention,
        grid_attn: Option<&PreparedAttention>,
        states: &mut [NodeId],
        prev_tokens: &[u32],
    ) -> Result<NodeId, TensorError> {
        let emb = self.embed(g, bound, prev_tokens)?;
        let query = states[states.len() - 1];
        let text = text_attn.step(g, query)?;
        let mut parts = vec![emb, text.context];
        if let Some(vis) = grid_attn {
            parts.push(vis.step(g, query)?.context);
        }
        let mut x = g.concat(1, &parts)?;
        for (l, cell) in cells.iter().enumerate() {
            states[l] = gru_cell(g, x, states[l], cell)?;
            x = states[l];
        }
        let proj = g.matmul(x, bound.id("out.w"))?;
        g.add(proj, bound.id("out.b"))
    }

    /// Teacher-forced logits for one equal-length batch, concatenated
    /// time-major to [T*B, vocab].
    pub fn teacher_logits(
        &self,
        g: &mut Graph,
        bound: &BoundParams,
        batch: &GruBatch,
    ) -> Result<TeacherOutput, GruError> {
        let b = batch.batch_size();
        let enc = self.encode(g, bound, &batch.enc_tokens)?;
        let text_attn = self.prepare_text_attention(g, bound, &enc, b)?;
        let grid_attn = match (&batch.grid_features, self.cfg.grid_attn) {
            (Some(grids), true) => Some(self.prepare_grid_attention(g, bound, grids, b)?),
            (None, true) => return Err(GruError::MissingFeatures),
            _ => None,
        };
        let cells: Vec<CellIds> =
            (0..self.cfg.layers).map(|l| Self::cell_ids(bound, &format!("dec{l}"))).collect();
        let mut states = enc.finals.clone();
        let mut step_logits = Vec::with_capacity(batch.dec_inputs.len());
        for prev in &batch.dec_inputs {
            step_logits.push(self.decoder_step(
                g,
                bound,
                &cells,
                &text_attn,
                grid_attn.as_ref(),
                &mut states,
                prev,
            )?);
        }
        let logits = g.concat(0, &step_logits)?;
        let targets: Vec<u32> = batch.dec_targets.iter().flatten().copied().collect();
        Ok(TeacherOutput { logits, targets })
    }

    /// Decode a rewrite for one input. Greedy takes the argmax each step
    /// (lowest id on ties); beam keeps `width` running hypotheses ranked
    /// by total log-probability.
    pub fn generate(
        &self,
        params: &ParamSet,
        input: &TokenSequence,
        grid_feature: Option<&[f32]>,
        mode: DecodeMode,
    ) -> Result<TokenSequence, GruError> {
        let mut g = Graph::new();
        let bound = params.bind(&mut g, false)?;
        let enc_tokens: Vec<Vec<u32>> = input.tokens().iter().map(|&t| vec![t]).collect();
        let enc = self.encode(&mut g, &bound, &enc_tokens)?;
        let text_attn = self.prepare_text_attention(&mut g, &bound, &enc, 1)?;
        let grid_attn = match (grid_feature, self.cfg.grid_attn) {
            (Some(feat), true) => {
                Some(self.prepare_grid_attention(&mut g, &bound, &[feat.to_vec()], 1)?)
            }
            (None, true) => return Err(GruError::MissingFeatures),
            _ => None,
        };
        let cells: Vec<CellIds> =
            (0..self.cfg.layers).map(|l| Self::cell_ids(&bound, &format!("dec{l}"))).collect();

        let width = match mode {
            DecodeMode::Greedy => 1,
            DecodeMode::Beam(0) => return Err(GruError::ZeroBeamWidth),
            DecodeMode::Beam(w) => w,
        };

        struct Beam {
            tokens: Vec<u32>,
            logp: f64,
            states: Vec<NodeId>,
            finished: bool,
        }
        let mut beams = vec![Beam {
            tokens: Vec::new(),
            logp: 0.0,
            states: enc.finals.clone(),
            finished: false,
        }];

        for _ in 0..OUTPUT_LEN {
            if beams.iter().all(|b| b.finished) {
                break;
            }
            let mut candidates: Vec<Beam> = Vec::new();
            for beam in beams {
                if beam.finished {
                    candidates.push(beam);
                    continue;
                }
                let prev = *beam.tokens.last().unwrap_or(&BOS);
                let mut states = beam.states.clone();
                let logits = self.decoder_step(
                    &mut g,
                    &bound,
                    &cells,
                    &text_attn,
                    grid_attn.as_ref(),
                    &mut states,
                    &[prev],
                )?;
                let logprobs = g.log_softmax(logits, 1)?;
                let row = g.values(logprobs).to_vec();
                let mut ranked: Vec<(usize, f32)> = row.iter().copied().enumerate().collect();
                ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
                for &(token, lp) in ranked.iter().take(width) {
                    let mut tokens = beam.tokens.clone();
                    let finished = token as u32 == EOS;
                    if !finished {
                        tokens.push(token as u32);
                    }
                    candidates.push(Beam {
                        tokens,
                        logp: beam.logp + f64::from(lp),
                        states: states.clone(),
                        finished,
                    });
                }
            }
            candidates.sort_by(|a, b| {
                b.logp.partial_cmp(&a.logp).unwrap().then_with(|| a.tokens.cmp(&b.tokens))
            });
            candidates.truncate(width);
            beams = candidates;
        }

        let mut best = None;
        for beam in beams {
            best = match best {
                None => Some(beam),
                Some(cur) => {
                    if beam.logp > cur.logp
                        || (beam.logp == cur.logp && beam.tokens < cur.tokens)
                    {
                        Some(beam)
                    } else {
                        Some(cur)
                    }
                }
            };
        }
        let best = best.expect("at least one beam");
        Ok(finish_sequence(best.tokens))
    }
}

/// Pack generated content tokens into a fixed-length output sequence,
/// appending EOS where it fits.
pub(crate) fn finish_sequence(mut tokens: Vec<u32>) -> TokenSequence {
    use crate::text::{Role, PAD};
    if tokens.len() < OUTPUT_LEN {
        tokens.push(EOS);
    }
    let true_length = tokens.len();
    tokens.resize(OUTPUT_LEN, PAD);
    TokenSequence { ids: tokens, true_length, role: Role::Output }
}

#[cfg(test)]
mod tests;
