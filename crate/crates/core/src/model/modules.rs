//! The three modules of a toy VLM and their batched tape forwards.

use rand::Rng;

use super::config::ModelConfig;
use super::param::{param_struct, Param};
use crate::autodiff::{Segment, Tape, Var};
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;

fn bound(fan_in: usize) -> f64 {
    1.0 / (fan_in as f64).sqrt()
}

param_struct! {
    /// Patch embedding with learned patch positions, followed by a residual GELU MLP.
    VisionEncoder, VisionVars {
        patch_w, patch_b, pos, mlp_w1, mlp_b1, mlp_w2, mlp_b2,
    }
}

param_struct! {
    /// Two-layer MLP with GELU, `vision_dim -> lm_dim -> lm_dim`.
    Projector, ProjectorVars { w1, b1, w2, b2 }
}

param_struct! {
    /// Pre-norm causal self-attention block with a GELU MLP.
    Block, BlockVars {
        ln1_g, ln1_b, wq, wk, wv, wo, bo, ln2_g, ln2_b, mlp_w1, mlp_b1, mlp_w2, mlp_b2,
    }
}

param_struct! {
    /// Token/position embeddings and the output head; blocks live in [`LanguageModel`].
    LmShell, LmShellVars { tok_emb, pos_emb, lnf_g, lnf_b, head_w, head_b }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LanguageModel {
    pub shell: LmShell,
    pub blocks: Vec<Block>,
}

#[derive(Debug, Clone)]
pub struct LanguageVars {
    pub shell: LmShellVars,
    pub blocks: Vec<BlockVars>,
}

impl LanguageVars {
    pub fn list(&self) -> Vec<Var> {
        let mut out = self.shell.list();
        for b in &self.blocks {
            out.extend(b.list());
        }
        out
    }
}

impl VisionEncoder {
    pub fn init<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let (pd, vd, nv) = (cfg.patch_dim(), cfg.vision_dim, cfg.n_visual_tokens);
        Self {
            patch_w: Param::uniform("V.patch_w", vec![pd, vd], bound(pd), rng),
            patch_b: Param::zeros("V.patch_b", vec![vd]),
            pos: Param::uniform("V.pos", vec![nv, vd], bound(vd), rng),
            mlp_w1: Param::uniform("V.mlp_w1", vec![vd, vd], bound(vd), rng),
            mlp_b1: Param::zeros("V.mlp_b1", vec![vd]),
            mlp_w2: Param::uniform("V.mlp_w2", vec![vd, vd], bound(vd), rng),
            mlp_b2: Param::zeros("V.mlp_b2", vec![vd]),
        }
    }
}

impl VisionVars {
    /// `patches [B·n_v × patch_dim]` to features `[B·n_v × vision_dim]`.
    pub fn forward(&self, tape: &mut Tape, cfg: &ModelConfig, patches: Var) -> Result<Var> {
        let rows = tape.shape(patches)[0];
        let nv = cfg.n_visual_tokens;
        if rows % nv != 0 {
            return Err(Error::Dimension(format!("{rows} patch rows for {nv} tokens per image")));
        }
        let pos_rows: Vec<usize> = (0..rows).map(|r| r % nv).collect();
        let e = tape.matmul(patches, self.patch_w)?;
        let e = tape.add_row_bias(e, self.patch_b)?;
        let pos = tape.gather_rows(self.pos, &pos_rows)?;
        let e = tape.add(e, pos)?;
        let h = tape.matmul(e, self.mlp_w1)?;
        let h = tape.add_row_bias(h, self.mlp_b1)?;
        let h = tape.gelu(h)?;
        let h = tape.matmul(h, self.mlp_w2)?;
        let h = tape.add_row_bias(h, self.mlp_b2)?;
        tape.add(e, h)
    }
}

impl Projector {
    pub fn init<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let (vd, ld) = (cfg.vision_dim, cfg.lm_dim);
        Self {
            w1: Param::uniform("P.w1", vec![vd, ld], bound(vd), rng),
            b1: Param::zeros("P.b1", vec![ld]),
            w2: Param::uniform("P.w2", vec![ld, ld], bound(ld), rng),
            b2: Param::zeros("P.b2", vec![ld]),
        }
    }
}

impl ProjectorVars {
    pub fn forward(&self, tape: &mut Tape, h: Var) -> Result<Var> {
        let x = tape.matmul(h, self.w1)?;
        let x = tape.add_row_bias(x, self.b1)?;
        let x = tape.gelu(x)?;
        let x = tape.matmul(x, self.w2)?;
        tape.add_row_bias(x, self.b2)
    }
}

impl Block {
    fn init<R: Rng>(layer: usize, d: usize, rng: &mut R) -> Self {
        let n = |s: &str| format!("L.blocks.{layer}.{s}");
        Self {
            ln1_g: Param::filled(n("ln1_g"), vec![d], 1.0),
            ln1_b: Param::zeros(n("ln1_b"), vec![d]),
            wq: Param::uniform(n("wq"), vec![d, d], bound(d), rng),
            wk: Param::uniform(n("wk"), vec![d, d], bound(d), rng),
            wv: Param::uniform(n("wv"), vec![d, d], bound(d), rng),
            wo: Param::uniform(n("wo"), vec![d, d], bound(d), rng),
            bo: Param::zeros(n("bo"), vec![d]),
            ln2_g: Param::filled(n("ln2_g"), vec![d], 1.0),
            ln2_b: Param::zeros(n("ln2_b"), vec![d]),
            mlp_w1: Param::uniform(n("mlp_w1"), vec![d, 4 * d], bound(d), rng),
            mlp_b1: Param::zeros(n("mlp_b1"), vec![4 * d]),
            mlp_w2: Param::uniform(n("mlp_w2"), vec![4 * d, d], bound(4 * d), rng),
            mlp_b2: Param::zeros(n("mlp_b2"), vec![d]),
        }
    }
}

impl BlockVars {
    fn forward(&self, tape: &mut Tape, x: Var, segments: &[Segment], heads: usize) -> Result<Var> {
        let a = tape.layer_norm(x, self.ln1_g, self.ln1_b, LN_EPS)?;
        let q = tape.matmul(a, self.wq)?;
        let k = tape.matmul(a, self.wk)?;
        let v = tape.matmul(a, self.wv)?;
        let att = tape.causal_attention(q, k, v, segments, heads)?;
        let att = tape.matmul(att, self.wo)?;
        let att = tape.add_row_bias(att, self.bo)?;
        let x = tape.add(x, att)?;
        let m = tape.layer_norm(x, self.ln2_g, self.ln2_b, LN_EPS)?;
        let m = tape.matmul(m, self.mlp_w1)?;
        let m = tape.add_row_bias(m, self.mlp_b1)?;
        let m = tape.gelu(m)?;
        let m = tape.matmul(m, self.mlp_w2)?;
        let m = tape.add_row_bias(m, self.mlp_b2)?;
        tape.add(x, m)
    }
}

impl LanguageModel {
    pub fn init<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let (d, n) = (cfg.lm_dim, cfg.vocab_size);
        let shell = LmShell {
            tok_emb: Param::uniform("L.tok_emb", vec![n, d], bound(d), rng),
            pos_emb: Param::uniform("L.pos_emb", vec![cfg.max_seq_len, d], bound(d), rng),
            lnf_g: Param::filled("L.lnf_g", vec![d], 1.0),
            lnf_b: Param::zeros("L.lnf_b", vec![d]),
            head_w: Param::uniform("L.head_w", vec![d, n], bound(d), rng),
            head_b: Param::zeros("L.head_b", vec![n]),
        };
        let blocks = (0..cfg.lm_layers).map(|l| Block::init(l, d, rng)).collect();
        Self { shell, blocks }
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut out = self.shell.params();
        for b in &self.blocks {
            out.extend(b.params());
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = self.shell.params_mut();
        for b in &mut self.blocks {
            out.extend(b.params_mut());
        }
        out
    }

    pub fn bind(&self, tape: &mut Tape, track: bool) -> LanguageVars {
        LanguageVars {
            shell: self.shell.bind(tape, track),
            blocks: self.blocks.iter().map(|b| b.bind(tape, track)).collect(),
        }
    }
}

impl LanguageVars {
    /// Runs the decoder over `[visual tokens ; text tokens]` for each sample.
    ///
    /// `visual` is `[B·n_v × lm_dim]` with sample `b` at rows `b·n_v..(b+1)·n_v`;
    /// `texts[b]` holds that sample's token ids. Returns logits for every text
    /// position, samples concatenated: `[Σ T_b × vocab]`.
    pub fn forward(&self, tape: &mut Tape, cfg: &ModelConfig, visual: Var, texts: &[Vec<usize>]) -> Result<Var> {
        let nv = cfg.n_visual_tokens;
        let batch = texts.len();
        if batch == 0 || tape.shape(visual) != [batch * nv, cfg.lm_dim] {
            return Err(Error::Dimension(format!(
                "visual tokens {:?} for {batch} samples of {nv} tokens at width {}",
                tape.shape(visual),
                cfg.lm_dim
            )));
        }
        let mut token_ids = Vec::new();
        for (b, text) in texts.iter().enumerate() {
            if text.is_empty() {
                return Err(Error::Contract(format!("sample {b} has no text tokens")));
            }
            if nv + text.len() > cfg.max_seq_len {
                return Err(Error::Contract(format!(
                    "sequence of {} visual + {} text tokens exceeds max_seq_len {}",
                    nv,
                    text.len(),
                    cfg.max_seq_len
                )));
            }
            if let Some(&t) = text.iter().find(|&&t| t >= cfg.vocab_size) {
                return Err(Error::Bounds {
                    index: t,
                    len: cfg.vocab_size,
                });
            }
            token_ids.extend_from_slice(text);
        }
        let text_emb = tape.gather_rows(self.shell.tok_emb, &token_ids)?;
        let joined = tape.concat_rows(&[visual, text_emb])?;

        let mut order = Vec::new();
        let mut positions = Vec::new();
        let mut segments = Vec::new();
        let mut text_rows = Vec::new();
        let mut text_offset = batch * nv;
        for (b, text) in texts.iter().enumerate() {
            let start = order.len();
            order.extend(b * nv..(b + 1) * nv);
            order.extend(text_offset..text_offset + text.len());
            text_offset += text.len();
            let len = nv + text.len();
            positions.extend(0..len);
            text_rows.extend(start + nv..start + len);
            segments.push(Segment { start, len });
        }
        let x = tape.gather_rows(joined, &order)?;
        let pos = tape.gather_rows(self.shell.pos_emb, &positions)?;
        let mut x = tape.add(x, pos)?;
        for block in &self.blocks {
            x = block.forward(tape, x, &segments, cfg.lm_heads)?;
        }
        let x = tape.gather_rows(x, &text_rows)?;
        let x = tape.layer_norm(x, self.shell.lnf_g, self.shell.lnf_b, LN_EPS)?;
        let logits = tape.matmul(x, self.shell.head_w)?;
        tape.add_row_bias(logits, self.shell.head_b)
    }
}
