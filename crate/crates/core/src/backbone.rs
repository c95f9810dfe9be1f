//! Hybrid encoder: simplified gated selective-state-space (M) blocks and
//! Transformer (T) blocks stacked per a pattern string, with a configurable
//! token scan order for the M blocks.

use serde::{Deserialize, Serialize};

use crate::error::{MapError, Result};
use crate::masking::MaskPlan;
use crate::rng::MapRng;
use crate::tensor::{Real, Tensor};

pub const LN_EPS: Real = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockKind {
    Mamba,
    Transformer,
}

/// Ordered block kinds parsed from strings like "MMMTMMMT".
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BackbonePattern {
    pub blocks: Vec<BlockKind>,
}

pub fn parse_pattern(s: &str) -> Result<BackbonePattern> {
    if s.is_empty() {
        return Err(MapError::Usage("empty backbone pattern".into()));
    }
    let blocks = s
        .chars()
        .map(|c| match c {
            'M' => Ok(BlockKind::Mamba),
            'T' => Ok(BlockKind::Transformer),
            other => Err(MapError::Usage(format!(
                "invalid block `{}` in pattern `{}` (expected M or T)",
                other, s
            ))),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BackbonePattern { blocks })
}

impl std::fmt::Display for BackbonePattern {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for b in &self.blocks {
            write!(
                f,
                "{}",
                match b {
                    BlockKind::Mamba => 'M',
                    BlockKind::Transformer => 'T',
                }
            )?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScanKind {
    RowFirst,
    ColumnFirst,
}

impl std::str::FromStr for ScanKind {
    type Err = MapError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "row_first" => Ok(ScanKind::RowFirst),
            "column_first" => Ok(ScanKind::ColumnFirst),
            _ => Err(MapError::Usage(format!(
                "unknown scan order `{}` (row_first|column_first)",
                s
            ))),
        }
    }
}

impl std::fmt::Display for ScanKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}",
            match self {
                ScanKind::RowFirst => "row_first",
                ScanKind::ColumnFirst => "column_first",
            }
        )
    }
}

/// Permutation from row-major token order to scan order, and its inverse.
#[derive(Clone, Debug)]
pub struct ScanOrder {
    pub kind: ScanKind,
    /// scan position t reads row-major token perm[t]
    pub perm: Vec<usize>,
    pub inv: Vec<usize>,
}

impl ScanOrder {
    pub fn new(kind: ScanKind, rows: usize, cols: usize) -> ScanOrder {
        let l = rows * cols;
        let perm: Vec<usize> = match kind {
            ScanKind::RowFirst => (0..l).collect(),
            ScanKind::ColumnFirst => {
                let mut p = Vec::with_capacity(l);
                for j in 0..cols {
                    for i in 0..rows {
                        p.push(i * cols + j);
                    }
                }
                p
            }
        };
        let mut inv = vec![0; l];
        for (t, &src) in perm.iter().enumerate() {
            inv[src] = t;
        }
        ScanOrder { kind, perm, inv }
    }

    /// Permutation indices over a [batch*L] row block.
    pub fn batch_perm(&self, batch: usize) -> Vec<usize> {
        let l = self.perm.len();
        let mut out = Vec::with_capacity(batch * l);
        for b in 0..batch {
            out.extend(self.perm.iter().map(|&p| b * l + p));
        }
        out
    }

    pub fn batch_inv(&self, batch: usize) -> Vec<usize> {
        let l = self.inv.len();
        let mut out = Vec::with_capacity(batch * l);
        for b in 0..batch {
            out.extend(self.inv.iter().map(|&p| b * l + p));
        }
        out
    }
}

/// Permute token rows into scan order; `inverse` restores the original order.
pub fn apply_scan_order(tokens: &Tensor, order: &ScanOrder) -> Result<Tensor> {
    tokens.gather_rows(&order.perm)
}

pub fn invert_scan_order(tokens: &Tensor, order: &ScanOrder) -> Result<Tensor> {
    tokens.gather_rows(&order.inv)
}

// ── Model configuration ─────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct ModelConfig {
    pub pattern: BackbonePattern,
    pub scan: ScanKind,
    pub dim: usize,
    pub d_state: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub dec_dim: usize,
    pub dec_depth: usize,
    pub image_h: usize,
    pub image_w: usize,
    pub patch_h: usize,
    pub patch_w: usize,
    pub channels: usize,
    pub map_self_visible: bool,
}

impl ModelConfig {
    pub fn grid_rows(&self) -> usize {
        self.image_h / self.patch_h
    }

    pub fn grid_cols(&self) -> usize {
        self.image_w / self.patch_w
    }

    pub fn seq_len(&self) -> usize {
        self.grid_rows() * self.grid_cols()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_h * self.patch_w * self.channels
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim % self.heads != 0 {
            return Err(MapError::Contract(format!(
                "model dim {} not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if self.dec_dim % self.heads != 0 {
            return Err(MapError::Contract(format!(
                "decoder dim {} not divisible by {} heads",
                self.dec_dim, self.heads
            )));
        }
        if self.image_h % self.patch_h != 0 || self.image_w % self.patch_w != 0 {
            return Err(MapError::Tiling(format!(
                "image {}x{} not divisible by patch {}x{}",
                self.image_h, self.image_w, self.patch_h, self.patch_w
            )));
        }
        if self.dec_depth == 0 {
            return Err(MapError::Contract("decoder depth must be >= 1".into()));
        }
        Ok(())
    }
}

// ── Parameters ──────────────────────────────────────────────────────────

const INIT_STD: Real = 0.02;
// softplus(b) ~ 0.05: keeps initial step sizes small and positive
const DT_BIAS_INIT: Real = -2.95;

fn linear_init(rng: &mut MapRng, d_in: usize, d_out: usize) -> (Tensor, Tensor) {
    (
        Tensor::randn(rng, &[d_in, d_out], INIT_STD, true),
        Tensor::zeros(&[d_out], true),
    )
}

fn norm_init(d: usize) -> (Tensor, Tensor) {
    (
        Tensor::from_vec(vec![1.0; d], &[d], true).unwrap(),
        Tensor::zeros(&[d], true),
    )
}

/// Simplified Vim-style gated SSM block: norm, input/gate projections,
/// selective scan with diagonal A in the configured scan order, SiLU gate,
/// output projection, learnable residual scale.
pub struct SsmBlock {
    pub norm_g: Tensor,
    pub norm_b: Tensor,
    pub w_in: Tensor,
    pub b_in: Tensor,
    pub w_gate: Tensor,
    pub b_gate: Tensor,
    pub w_delta: Tensor,
    pub b_delta: Tensor,
    pub w_b: Tensor,
    pub w_c: Tensor,
    pub a_log: Tensor,
    pub d_skip: Tensor,
    pub w_out: Tensor,
    pub b_out: Tensor,
    pub res_scale: Tensor,
    pub d_state: usize,
}

impl SsmBlock {
    pub fn new(rng: &mut MapRng, dim: usize, d_state: usize) -> SsmBlock {
        let (norm_g, norm_b) = norm_init(dim);
        let (w_in, b_in) = linear_init(rng, dim, dim);
        let (w_gate, b_gate) = linear_init(rng, dim, dim);
        let (w_delta, _) = linear_init(rng, dim, dim);
        let b_delta = Tensor::from_vec(vec![DT_BIAS_INIT; dim], &[dim], true).unwrap();
        let w_b = Tensor::randn(rng, &[dim, d_state], INIT_STD, true);
        let w_c = Tensor::randn(rng, &[dim, d_state], INIT_STD, true);
        // A_d,s = -(s+1) at init, the usual S4/Mamba real-valued ramp
        let a_log_data: Vec<Real> = (0..dim * d_state)
            .map(|i| (((i % d_state) + 1) as Real).ln())
            .collect();
        let a_log = Tensor::from_vec(a_log_data, &[dim, d_state], true).unwrap();
        let d_skip = Tensor::from_vec(vec![1.0; dim], &[dim], true).unwrap();
        let (w_out, b_out) = linear_init(rng, dim, dim);
        let res_scale = Tensor::from_vec(vec![1.0], &[1], true).unwrap();
        SsmBlock {
            norm_g,
            norm_b,
            w_in,
            b_in,
            w_gate,
            b_gate,
            w_delta,
            b_delta,
            w_b,
            w_c,
            a_log,
            d_skip,
            w_out,
            b_out,
            res_scale,
            d_state,
        }
    }

    /// x is [batch*L, dim]; returns the same shape in original token order.
    pub fn forward(&self, x: &Tensor, batch: usize, order: &ScanOrder) -> Result<Tensor> {
        let l = order.perm.len();
        let dim = self.w_in.shape()[0];
        let h = x.layer_norm(&self.norm_g, &self.norm_b, LN_EPS)?;
        let u = h.matmul(&self.w_in)?.add_bias(&self.b_in)?.silu();
        let z = h.matmul(&self.w_gate)?.add_bias(&self.b_gate)?;
        // scan runs in scan order: permute, recur, unpermute
        let up = u.gather_rows(&order.batch_perm(batch))?;
        let delta = up
            .matmul(&self.w_delta)?
            .add_bias(&self.b_delta)?
            .softplus();
        let bmat = up.matmul(&self.w_b)?;
        let cmat = up.matmul(&self.w_c)?;
        let y = Tensor::selective_scan(
            &up.reshape(&[batch, l, dim])?,
            &delta.reshape(&[batch, l, dim])?,
            &self.a_log,
            &bmat.reshape(&[batch, l, self.d_state])?,
            &cmat.reshape(&[batch, l, self.d_state])?,
        )?;
        let y = y
            .reshape(&[batch * l, dim])?
            .add(&up.scale_cols(&self.d_skip)?)?;
        let y = y.gather_rows(&order.batch_inv(batch))?;
        let gated = y.mul(&z.silu())?;
        let out = gated
            .matmul(&self.w_out)?
            .add_bias(&self.b_out)?
            .mul_scalar_t(&self.res_scale)?;
        x.add(&out)
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        let push = |out: &mut Vec<(String, Tensor)>, name: &str, t: &Tensor| {
            out.push((format!("{}.{}", prefix, name), t.clone()));
        };
        push(out, "norm_g", &self.norm_g);
        push(out, "norm_b", &self.norm_b);
        push(out, "w_in", &self.w_in);
        push(out, "b_in", &self.b_in);
        push(out, "w_gate", &self.w_gate);
        push(out, "b_gate", &self.b_gate);
        push(out, "w_delta", &self.w_delta);
        push(out, "b_delta", &self.b_delta);
        push(out, "w_b", &self.w_b);
        push(out, "w_c", &self.w_c);
        push(out, "a_log", &self.a_log);
        push(out, "d_skip", &self.d_skip);
        push(out, "w_out", &self.w_out);
        push(out, "b_out", &self.b_out);
        push(out, "res_scale", &self.res_scale);
    }
}

/// Pre-norm multi-head self-attention + MLP block, both residual.
pub struct AttnBlock {
    pub norm1_g: Tensor,
    pub norm1_b: Tensor,
    pub w_q: Tensor,
    pub b_q: Tensor,
    // no key bias: softmax is invariant to per-query constant logit
    // shifts, so a key bias is a dead parameter
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub b_v: Tensor,
    pub w_o: Tensor,
    pub b_o: Tensor,
    pub norm2_g: Tensor,
    pub norm2_b: Tensor,
    pub w_mlp1: Tensor,
    pub b_mlp1: Tensor,
    pub w_mlp2: Tensor,
    pub b_mlp2: Tensor,
    pub heads: usize,
}

impl AttnBlock {
    pub fn new(rng: &mut MapRng, dim: usize, heads: usize, mlp_ratio: usize) -> AttnBlock {
        let hidden = dim * mlp_ratio;
        let (norm1_g, norm1_b) = norm_init(dim);
        let (w_q, b_q) = linear_init(rng, dim, dim);
        let (w_k, _) = linear_init(rng, dim, dim);
        let (w_v, b_v) = linear_init(rng, dim, dim);
        let (w_o, b_o) = linear_init(rng, dim, dim);
        let (norm2_g, norm2_b) = norm_init(dim);
        let (w_mlp1, b_mlp1) = linear_init(rng, dim, hidden);
        let (w_mlp2, b_mlp2) = linear_init(rng, hidden, dim);
        AttnBlock {
            norm1_g,
            norm1_b,
            w_q,
            b_q,
            w_k,
            w_v,
            b_v,
            w_o,
            b_o,
            norm2_g,
            norm2_b,
            w_mlp1,
            b_mlp1,
            w_mlp2,
            b_mlp2,
            heads,
        }
    }

    /// x is [batch*L, dim]. `vis` is an optional L x L visibility pattern
    /// shared across batch and heads; None means full attention.
    pub fn forward(&self, x: &Tensor, batch: usize, vis: Option<&[bool]>) -> Result<Tensor> {
        let dim = self.w_q.shape()[0];
        let dh = dim / self.heads;
        let h = x.layer_norm(&self.norm1_g, &self.norm1_b, LN_EPS)?;
        let q = h
            .matmul(&self.w_q)?
            .add_bias(&self.b_q)?
            .split_heads(batch, self.heads)?;
        let k = h.matmul(&self.w_k)?.split_heads(batch, self.heads)?;
        let v = h
            .matmul(&self.w_v)?
            .add_bias(&self.b_v)?
            .split_heads(batch, self.heads)?;
        let scores = q.bmm(&k, true)?.scale(1.0 / (dh as Real).sqrt());
        let probs = scores.softmax_masked(vis)?;
        let ctx = probs.bmm(&v, false)?.merge_heads(self.heads)?;
        let att = ctx.matmul(&self.w_o)?.add_bias(&self.b_o)?;
        let x = x.add(&att)?;
        let m = x.layer_norm(&self.norm2_g, &self.norm2_b, LN_EPS)?;
        let mlp = m
            .matmul(&self.w_mlp1)?
            .add_bias(&self.b_mlp1)?
            .gelu()
            .matmul(&self.w_mlp2)?
            .add_bias(&self.b_mlp2)?;
        x.add(&mlp)
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        let push = |out: &mut Vec<(String, Tensor)>, name: &str, t: &Tensor| {
            out.push((format!("{}.{}", prefix, name), t.clone()));
        };
        push(out, "norm1_g", &self.norm1_g);
        push(out, "norm1_b", &self.norm1_b);
        push(out, "w_q", &self.w_q);
        push(out, "b_q", &self.b_q);
        push(out, "w_k", &self.w_k);
        push(out, "w_v", &self.w_v);
        push(out, "b_v", &self.b_v);
        push(out, "w_o", &self.w_o);
        push(out, "b_o", &self.b_o);
        push(out, "norm2_g", &self.norm2_g);
        push(out, "norm2_b", &self.norm2_b);
        push(out, "w_mlp1", &self.w_mlp1);
        push(out, "b_mlp1", &self.b_mlp1);
        push(out, "w_mlp2", &self.w_mlp2);
        push(out, "b_mlp2", &self.b_mlp2);
    }
}

pub enum Block {
    Mamba(SsmBlock),
    Transformer(AttnBlock),
}

/// The hybrid encoder: patch embedding, learned mask token and positional
/// embeddings, blocks in pattern order, final norm. Mask tokens stay in the
/// sequence (non-asymmetric), so the SSM recurrence keeps positional
/// continuity.
pub struct Encoder {
    pub patch_w: Tensor,
    pub patch_b: Tensor,
    pub mask_token: Tensor,
    pub pos_emb: Tensor,
    pub blocks: Vec<Block>,
    pub final_g: Tensor,
    pub final_b: Tensor,
    pub order: ScanOrder,
    pub seq_len: usize,
}

impl Encoder {
    pub fn new(rng: &mut MapRng, cfg: &ModelConfig) -> Encoder {
        let l = cfg.seq_len();
        let (patch_w, patch_b) = linear_init(rng, cfg.patch_dim(), cfg.dim);
        let mask_token = Tensor::randn(rng, &[cfg.dim], INIT_STD, true);
        let pos_emb = Tensor::randn(rng, &[l, cfg.dim], INIT_STD, true);
        let blocks = cfg
            .pattern
            .blocks
            .iter()
            .map(|kind| match kind {
                BlockKind::Mamba => Block::Mamba(SsmBlock::new(rng, cfg.dim, cfg.d_state)),
                BlockKind::Transformer => {
                    Block::Transformer(AttnBlock::new(rng, cfg.dim, cfg.heads, cfg.mlp_ratio))
                }
            })
            .collect();
        let (final_g, final_b) = norm_init(cfg.dim);
        Encoder {
            patch_w,
            patch_b,
            mask_token,
            pos_emb,
            blocks,
            final_g,
            final_b,
            order: ScanOrder::new(cfg.scan, cfg.grid_rows(), cfg.grid_cols()),
            seq_len: l,
        }
    }

    /// tokens: [batch*L, patch_dim] raw pixel tokens; masked positions are
    /// overwritten by the mask token after embedding, so their pixel contents
    /// never reach any block.
    pub fn forward(&self, tokens: &Tensor, batch: usize, plan: &MaskPlan) -> Result<Tensor> {
        if plan.len() != self.seq_len {
            return Err(MapError::Contract(format!(
                "plan is {}x{} but encoder expects {} tokens",
                plan.rows,
                plan.cols,
                self.seq_len
            )));
        }
        if tokens.shape()[0] != batch * self.seq_len {
            return Err(MapError::Contract(format!(
                "token rows {} != batch {} * seq {}",
                tokens.shape()[0],
                batch,
                self.seq_len
            )));
        }
        let flags = plan.flags();
        let mut tiled = Vec::with_capacity(batch * self.seq_len);
        for _ in 0..batch {
            tiled.extend_from_slice(&flags);
        }
        let mut x = tokens
            .matmul(&self.patch_w)?
            .add_bias(&self.patch_b)?
            .blend_rows(&self.mask_token, &tiled)?
            .add_tiled(&self.pos_emb)?;
        for block in &self.blocks {
            x = match block {
                Block::Mamba(b) => b.forward(&x, batch, &self.order)?,
                Block::Transformer(b) => b.forward(&x, batch, None)?,
            };
        }
        x.layer_norm(&self.final_g, &self.final_b, LN_EPS)
    }

    pub fn collect_params(&self, out: &mut Vec<(String, Tensor)>) {
        out.push(("enc.patch_w".into(), self.patch_w.clone()));
        out.push(("enc.patch_b".into(), self.patch_b.clone()));
        out.push(("enc.mask_token".into(), self.mask_token.clone()));
        out.push(("enc.pos_emb".into(), self.pos_emb.clone()));
        for (i, block) in self.blocks.iter().enumerate() {
            match block {
                Block::Mamba(b) => b.collect_params(&format!("enc.block{}.ssm", i), out),
                Block::Transformer(b) => b.collect_params(&format!("enc.block{}.attn", i), out),
            }
        }
        out.push(("enc.final_g".into(), self.final_g.clone()));
        out.push(("enc.final_b".into(), self.final_b.clone()));
    }
}
