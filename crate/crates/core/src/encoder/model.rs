use super::{EncoderState, PromptType, LN_EPS};
use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::{Graph, NodeId, Tensor};
use crate::text::{pad_batch, TokenizedSentence};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Eval,
    /// Dropout active; masks keyed by `(seed, tag, sequence, layer, site)`.
    Train {
        seed: u64,
        tag: u64,
    },
}

const SITE_EMB: u64 = 0;
const SITE_ATTN: u64 = 1;
const SITE_FFN: u64 = 2;

/// Encoder tensors registered on one [`Graph`].
#[derive(Clone, Debug)]
pub struct Bound {
    tok: NodeId,
    pos: NodeId,
    emb_gain: NodeId,
    emb_bias: NodeId,
    layers: Vec<[NodeId; 16]>,
    pub prompts: Vec<NodeId>,
    pub head_w: NodeId,
    pub head_b: NodeId,
}

/// Hidden states of one sequence: the `L` layer inputs (after prompt
/// writes) and the final block output, each `(k + T) × d`.
#[derive(Clone, Debug)]
pub struct Hidden {
    pub layer_inputs: Vec<NodeId>,
    pub output: NodeId,
}

impl Bound {
    /// Backbone as constants, prompts and head as requires-grad leaves.
    pub fn new(g: &mut Graph, state: &EncoderState) -> Self {
        let prompts = state.prompts.iter().map(|p| g.param(p.clone())).collect();
        let head_w = g.param(state.head_w.clone());
        let head_b = g.param(state.head_b.clone());
        Self::with_backbone(g, state, prompts, head_w, head_b)
    }

    /// Everything constant; nothing on the graph requires gradients.
    pub fn frozen(g: &mut Graph, state: &EncoderState) -> Self {
        let prompts = state
            .prompts
            .iter()
            .map(|p| g.constant(p.clone()))
            .collect();
        let head_w = g.constant(state.head_w.clone());
        let head_b = g.constant(state.head_b.clone());
        Self::with_backbone(g, state, prompts, head_w, head_b)
    }

    /// Uses caller-supplied nodes for the trainable tensors.
    pub fn with_trainable(
        g: &mut Graph,
        state: &EncoderState,
        prompts: Vec<NodeId>,
        head_w: NodeId,
        head_b: NodeId,
    ) -> Result<Self> {
        if prompts.len() != state.prompts.len()
            || prompts
                .iter()
                .zip(&state.prompts)
                .any(|(&n, t)| g.shape(n) != t.shape())
            || g.shape(head_w) != state.head_w.shape()
            || g.shape(head_b) != state.head_b.shape()
        {
            return Err(Error::Validation(
                "trainable node shapes do not match the encoder".into(),
            ));
        }
        Ok(Self::with_backbone(g, state, prompts, head_w, head_b))
    }

    fn with_backbone(
        g: &mut Graph,
        state: &EncoderState,
        prompts: Vec<NodeId>,
        head_w: NodeId,
        head_b: NodeId,
    ) -> Self {
        let bb = &state.backbone;
        let mut c = |t: &Tensor| g.constant(t.clone());
        let tok = c(&bb.tok_emb);
        let pos = c(&bb.pos_emb);
        let emb_gain = c(&bb.emb_ln_gain);
        let emb_bias = c(&bb.emb_ln_bias);
        let layers = bb.layers.iter().map(|l| l.tensors().map(&mut c)).collect();
        Self {
            tok,
            pos,
            emb_gain,
            emb_bias,
            layers,
            prompts,
            head_w,
            head_b,
        }
    }
}

fn drop(
    g: &mut Graph,
    x: NodeId,
    p: f64,
    mode: Mode,
    seq: usize,
    layer: usize,
    site: u64,
) -> Result<NodeId> {
    match mode {
        Mode::Eval => Ok(x),
        Mode::Train { seed: s, tag } => g.dropout(
            x,
            p,
            s,
            seed::mix_all(tag, &[seq as u64, layer as u64, site]),
        ),
    }
}

impl EncoderState {
    /// Runs one sequence through the encoder. `seq` indexes the sequence in
    /// its batch and keys its dropout masks.
    pub fn forward_hidden(
        &self,
        g: &mut Graph,
        b: &Bound,
        sent: &TokenizedSentence,
        seq: usize,
        mode: Mode,
    ) -> Result<Hidden> {
        let cfg = &self.config;
        let (k, t) = (cfg.prompt_len, sent.len());
        if t == 0 {
            return Err(Error::Validation("empty token sequence".into()));
        }
        if k + t > cfg.max_positions {
            return Err(Error::Length {
                tokens: t,
                prompts: k,
                max: cfg.max_positions,
            });
        }
        if let Some(&bad) = sent.ids.iter().find(|&&i| i as usize >= cfg.vocab_size) {
            return Err(Error::Validation(format!(
                "token id {bad} outside vocabulary of {}",
                cfg.vocab_size
            )));
        }
        let ids: Vec<usize> = sent.ids.iter().map(|&i| i as usize).collect();
        let positions: Vec<usize> = (0..t).collect();
        let tok = g.rows(b.tok, &ids)?;
        let pos = g.rows(b.pos, &positions)?;
        let sum = g.add(tok, pos)?;
        let emb = g.layer_norm(sum, b.emb_gain, b.emb_bias, LN_EPS)?;
        let emb = drop(g, emb, cfg.dropout, mode, seq, 0, SITE_EMB)?;

        let n = k + t;
        let mut mask = vec![0.0; n * n];
        for (j, &live) in sent.mask.iter().enumerate() {
            if !live {
                for r in 0..n {
                    mask[r * n + k + j] = -1e9;
                }
            }
        }
        let mask = g.constant(Tensor::new(vec![n, n], mask)?);

        let token_rows: Vec<usize> = (k..n).collect();
        let mut layer_inputs = Vec::with_capacity(cfg.layers);
        let mut prev: Option<NodeId> = None;
        for j in 0..cfg.layers {
            let prompt = match cfg.prompt_type {
                _ if k == 0 => None,
                PromptType::Multilayer => Some(b.prompts[j]),
                PromptType::Shared => Some(b.prompts[0]),
                PromptType::InputOnly => (j == 0).then(|| b.prompts[0]),
            };
            let input = match (prev, prompt) {
                (None, None) => emb,
                (None, Some(p)) => g.concat_rows(&[p, emb])?,
                (Some(h), None) => h,
                (Some(h), Some(p)) => {
                    let tokens = g.rows(h, &token_rows)?;
                    g.concat_rows(&[p, tokens])?
                }
            };
            layer_inputs.push(input);
            prev = Some(self.block(g, &b.layers[j], input, mask, mode, seq, j)?);
        }
        Ok(Hidden {
            layer_inputs,
            output: prev.expect("at least one layer"),
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn block(
        &self,
        g: &mut Graph,
        w: &[NodeId; 16],
        h: NodeId,
        mask: NodeId,
        mode: Mode,
        seq: usize,
        layer: usize,
    ) -> Result<NodeId> {
        let [wq, bq, wk, bk, wv, bv, wo, bo, ln1_g, ln1_b, w1, b1, w2, b2, ln2_g, ln2_b] = *w;
        let cfg = &self.config;
        let dh = cfg.head_dim();
        let proj = |g: &mut Graph, wm, bias| -> Result<NodeId> {
            let x = g.matmul(h, wm)?;
            g.add_row(x, bias)
        };
        let q = proj(g, wq, bq)?;
        let kk = proj(g, wk, bk)?;
        let v = proj(g, wv, bv)?;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(cfg.heads);
        for hi in 0..cfg.heads {
            let qh = g.slice_cols(q, hi * dh, dh)?;
            let kh = g.slice_cols(kk, hi * dh, dh)?;
            let vh = g.slice_cols(v, hi * dh, dh)?;
            let kt = g.transpose(kh)?;
            let s = g.matmul(qh, kt)?;
            let s = g.scale(s, scale);
            let s = g.add(s, mask)?;
            let a = g.softmax_rows(s)?;
            heads.push(g.matmul(a, vh)?);
        }
        let ctx = if heads.len() == 1 {
            heads[0]
        } else {
            g.concat_cols(&heads)?
        };
        let attn = g.matmul(ctx, wo)?;
        let attn = g.add_row(attn, bo)?;
        let attn = drop(g, attn, cfg.dropout, mode, seq, layer, SITE_ATTN)?;
        let res = g.add(h, attn)?;
        let x = g.layer_norm(res, ln1_g, ln1_b, LN_EPS)?;

        let f = g.matmul(x, w1)?;
        let f = g.add_row(f, b1)?;
        let f = g.gelu(f);
        let f = g.matmul(f, w2)?;
        let f = g.add_row(f, b2)?;
        let f = drop(g, f, cfg.dropout, mode, seq, layer, SITE_FFN)?;
        let res = g.add(x, f)?;
        g.layer_norm(res, ln2_g, ln2_b, LN_EPS)
    }

    /// Sentence embeddings `[B × d]`: the final hidden state at the [CLS]
    /// position, optionally passed through `tanh(h · W + b)`.
    pub fn embed(
        &self,
        g: &mut Graph,
        b: &Bound,
        batch: &[TokenizedSentence],
        mode: Mode,
        use_head: bool,
    ) -> Result<NodeId> {
        if batch.is_empty() {
            return Err(Error::Validation("empty batch".into()));
        }
        let padded = pad_batch(batch);
        let cls = self.config.prompt_len;
        let mut rows = Vec::with_capacity(padded.len());
        for (i, s) in padded.iter().enumerate() {
            let h = self.forward_hidden(g, b, s, i, mode)?;
            rows.push(g.rows(h.output, &[cls])?);
        }
        let pooled = g.concat_rows(&rows)?;
        if !use_head {
            return Ok(pooled);
        }
        let z = g.matmul(pooled, b.head_w)?;
        let z = g.add_row(z, b.head_b)?;
        Ok(g.tanh(z))
    }

    /// Two training-mode encodings of the same batch under dropout tags 0
    /// and 1, both through the head.
    pub fn dual_encode(
        &self,
        g: &mut Graph,
        b: &Bound,
        batch: &[TokenizedSentence],
        seed: u64,
    ) -> Result<(NodeId, NodeId)> {
        if self.config.dropout == 0.0 {
            log::warn!("dropout is 0: both views are identical and positives are trivial");
        }
        let first = self.embed(g, b, batch, Mode::Train { seed, tag: 0 }, true)?;
        let second = self.embed(g, b, batch, Mode::Train { seed, tag: 1 }, true)?;
        Ok((first, second))
    }

    /// Evaluation-mode embeddings as plain rows.
    pub fn embed_values(
        &self,
        batch: &[TokenizedSentence],
        use_head: bool,
    ) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(batch.len());
        for chunk in batch.chunks(16) {
            let mut g = Graph::new();
            let b = Bound::frozen(&mut g, self);
            let e = self.embed(&mut g, &b, chunk, Mode::Eval, use_head)?;
            out.extend(g.value(e).to_rows());
        }
        Ok(out)
    }

    /// Layer inputs followed by the final output for one sequence.
    pub fn hidden_values(&self, sent: &TokenizedSentence, mode: Mode) -> Result<Vec<Tensor>> {
        let mut g = Graph::new();
        let b = Bound::frozen(&mut g, self);
        let h = self.forward_hidden(&mut g, &b, sent, 0, mode)?;
        Ok(h.layer_inputs
            .iter()
            .chain(std::iter::once(&h.output))
            .map(|&n| g.value(n).clone())
            .collect())
    }
}
