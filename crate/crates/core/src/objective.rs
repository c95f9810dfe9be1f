//! Pretraining head: a Transformer decoder whose self-attention is restricted
//! by a pluggable visibility matrix, the masked-token MSE loss, and a
//! teacher-forcing checker that certifies the row-wise factorization of the
//! parallel decode.

use crate::backbone::{AttnBlock, Encoder, ModelConfig, LN_EPS};
use crate::error::{MapError, Result};
use crate::masking::{build_visibility, DecoderStrategy, MaskPlan, VisibilityMatrix};
use crate::rng::MapRng;
use crate::tensor::{no_grad, Real, Tensor};

/// Decoder over encoder outputs: projection into decoder width, fresh
/// positional embeddings, masked attention blocks, pixel head. The decoder
/// sees all L positions; autoregression comes from the visibility matrix
/// alone.
pub struct Decoder {
    pub w_proj: Tensor,
    pub b_proj: Tensor,
    pub pos_emb: Tensor,
    pub blocks: Vec<AttnBlock>,
    pub final_g: Tensor,
    pub final_b: Tensor,
    pub w_head: Tensor,
    pub b_head: Tensor,
    pub seq_len: usize,
}

impl Decoder {
    pub fn new(rng: &mut MapRng, cfg: &ModelConfig) -> Decoder {
        let l = cfg.seq_len();
        let d = cfg.dec_dim;
        let ones = |n: usize| Tensor::from_vec(vec![1.0; n], &[n], true).unwrap();
        let w_proj = Tensor::randn(rng, &[cfg.dim, d], 0.02, true);
        let b_proj = Tensor::zeros(&[d], true);
        let pos_emb = Tensor::randn(rng, &[l, d], 0.02, true);
        let blocks = (0..cfg.dec_depth)
            .map(|_| AttnBlock::new(rng, d, cfg.heads, cfg.mlp_ratio))
            .collect();
        let final_g = ones(d);
        let final_b = Tensor::zeros(&[d], true);
        let w_head = Tensor::randn(rng, &[d, cfg.patch_dim()], 0.02, true);
        let b_head = Tensor::zeros(&[cfg.patch_dim()], true);
        Decoder {
            w_proj,
            b_proj,
            pos_emb,
            blocks,
            final_g,
            final_b,
            w_head,
            b_head,
            seq_len: l,
        }
    }

    /// Decode a (possibly prefix) sequence of `p` tokens per image under an
    /// explicit p*p attention pattern. Positional embeddings for positions
    /// 0..p are used, so a prefix decode conditions exactly like the prefix
    /// of a full decode.
    fn decode_prefix(
        &self,
        enc: &Tensor,
        batch: usize,
        p: usize,
        vis: &[bool],
    ) -> Result<Tensor> {
        if vis.len() != p * p {
            return Err(MapError::Contract(format!(
                "visibility has {} entries for {} tokens",
                vis.len(),
                p
            )));
        }
        if enc.shape()[0] != batch * p {
            return Err(MapError::Contract(format!(
                "decoder input rows {} != batch {} * seq {}",
                enc.shape()[0],
                batch,
                p
            )));
        }
        let pos = if p == self.seq_len {
            self.pos_emb.clone()
        } else {
            self.pos_emb.gather_rows(&(0..p).collect::<Vec<_>>())?
        };
        let mut x = enc
            .matmul(&self.w_proj)?
            .add_bias(&self.b_proj)?
            .add_tiled(&pos)?;
        for block in &self.blocks {
            x = block.forward(&x, batch, Some(vis))?;
        }
        x.layer_norm(&self.final_g, &self.final_b, LN_EPS)?
            .matmul(&self.w_head)?
            .add_bias(&self.b_head)
    }

    /// Full decode: enc is [batch*L, D_enc], output is [batch*L, patch_dim].
    /// Every attention layer applies `softmax` under `vis`.
    pub fn decode(
        &self,
        enc: &Tensor,
        batch: usize,
        plan: &MaskPlan,
        vis: &VisibilityMatrix,
    ) -> Result<Tensor> {
        if vis.seq_len() != plan.len() || plan.len() != self.seq_len {
            return Err(MapError::Contract(format!(
                "decode: plan {} tokens, visibility {} tokens, decoder {} tokens",
                plan.len(),
                vis.seq_len(),
                self.seq_len
            )));
        }
        self.decode_prefix(enc, batch, self.seq_len, vis.as_bools())
    }

    pub fn collect_params(&self, out: &mut Vec<(String, Tensor)>) {
        out.push(("dec.w_proj".into(), self.w_proj.clone()));
        out.push(("dec.b_proj".into(), self.b_proj.clone()));
        out.push(("dec.pos_emb".into(), self.pos_emb.clone()));
        for (i, b) in self.blocks.iter().enumerate() {
            b.collect_params(&format!("dec.block{}.attn", i), out);
        }
        out.push(("dec.final_g".into(), self.final_g.clone()));
        out.push(("dec.final_b".into(), self.final_b.clone()));
        out.push(("dec.w_head".into(), self.w_head.clone()));
        out.push(("dec.b_head".into(), self.b_head.clone()));
    }
}

/// Loss summary for one step. `total` is the mean squared error over masked
/// tokens and dims; `per_row` breaks it down by grid row (rows with no
/// masked tokens report 0).
#[derive(Clone, Debug)]
pub struct LossReport {
    pub total: Real,
    pub per_row: Vec<Real>,
    pub tokens_used: usize,
    pub empty_plan: bool,
}

impl LossReport {
    pub fn csv_header(rows: usize) -> String {
        let mut s = String::from("step,total_mse");
        for i in 0..rows {
            s.push_str(&format!(",per_row_mse_{}", i));
        }
        s
    }

    pub fn csv_line(&self, step: usize) -> String {
        let mut s = format!("{},{}", step, self.total);
        for v in &self.per_row {
            s.push_str(&format!(",{}", v));
        }
        s
    }
}

/// Masked-token MSE: mean over masked positions and pixel dims only.
/// `target` holds batch*L rows of patch_dim normalized pixel values in the
/// same layout as `pred`. Gradients at unmasked rows are exactly zero.
pub fn map_loss(
    pred: &Tensor,
    target: &[Real],
    plan: &MaskPlan,
    batch: usize,
) -> Result<(Tensor, LossReport)> {
    let l = plan.len();
    let d = pred.shape().get(1).copied().unwrap_or(0);
    if pred.shape()[0] != batch * l {
        return Err(MapError::Shape(format!(
            "map_loss: pred rows {} vs batch {} * {} tokens",
            pred.shape()[0],
            batch,
            l
        )));
    }
    let flags = plan.flags();
    let mut tiled = Vec::with_capacity(batch * l);
    for _ in 0..batch {
        tiled.extend_from_slice(&flags);
    }
    let loss = pred.masked_mse(target, &tiled)?;
    // per-row breakdown computed outside the graph
    let mut row_acc = vec![0.0f64; plan.rows];
    let mut row_cnt = vec![0usize; plan.rows];
    {
        let p = pred.data();
        for b in 0..batch {
            for (t, &m) in flags.iter().enumerate() {
                if m {
                    let r = b * l + t;
                    let mut acc = 0.0f64;
                    for j in 0..d {
                        let e = (p[r * d + j] - target[r * d + j]) as f64;
                        acc += e * e;
                    }
                    row_acc[t / plan.cols] += acc;
                    row_cnt[t / plan.cols] += 1;
                }
            }
        }
    }
    let per_row: Vec<Real> = row_acc
        .iter()
        .zip(&row_cnt)
        .map(|(&a, &n)| {
            if n == 0 {
                0.0
            } else {
                (a / (n * d) as f64) as Real
            }
        })
        .collect();
    let tokens_used = row_cnt.iter().sum::<usize>();
    let report = LossReport {
        total: loss.item(),
        per_row,
        tokens_used,
        empty_plan: tokens_used == 0,
    };
    Ok((loss, report))
}

/// Max absolute deviation between (a) one parallel decode under `vis` and
/// (b) sequential per-row prefix decodes, over masked predictions. A correct
/// row-causal visibility makes the two identical up to float noise; a
/// corrupted one (future-row key allowed) does not, which is how the tests
/// use this as a mutation probe.
pub fn teacher_forcing_deviation(
    decoder: &Decoder,
    enc: &Tensor,
    plan: &MaskPlan,
    vis: &VisibilityMatrix,
) -> Result<Real> {
    let n = plan.cols;
    let parallel = no_grad(|| decoder.decode(enc, 1, plan, vis))?.to_vec();
    let d = decoder.w_head.shape()[1];
    let mut max_dev: Real = 0.0;
    for i in 0..plan.rows {
        let p = (i + 1) * n;
        let mut sub = Vec::with_capacity(p * p);
        for q in 0..p {
            for k in 0..p {
                sub.push(vis.allowed(q, k));
            }
        }
        let enc_prefix = enc.gather_rows(&(0..p).collect::<Vec<_>>())?;
        let seq = no_grad(|| decoder.decode_prefix(&enc_prefix, 1, p, &sub))?.to_vec();
        for &j in &plan.masked[i] {
            let t = i * n + j;
            for c in 0..d {
                let dev = (parallel[t * d + c] - seq[t * d + c]).abs();
                if dev > max_dev {
                    max_dev = dev;
                }
            }
        }
    }
    Ok(max_dev)
}

/// Factorization check with the canonical visibility for the plan.
pub fn teacher_forcing_equivalence(
    decoder: &Decoder,
    enc: &Tensor,
    plan: &MaskPlan,
    map_self_visible: bool,
) -> Result<Real> {
    let vis = build_visibility(plan, DecoderStrategy::Map, map_self_visible);
    teacher_forcing_deviation(decoder, enc, plan, &vis)
}

/// Encoder + decoder bundled for a pretraining step.
pub struct MapModel {
    pub cfg: ModelConfig,
    pub encoder: Encoder,
    pub decoder: Decoder,
}

impl MapModel {
    pub fn new(rng: &mut MapRng, cfg: &ModelConfig) -> Result<MapModel> {
        cfg.validate()?;
        let encoder = Encoder::new(rng, cfg);
        let decoder = Decoder::new(rng, cfg);
        Ok(MapModel {
            cfg: cfg.clone(),
            encoder,
            decoder,
        })
    }

    pub fn params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.encoder.collect_params(&mut out);
        self.decoder.collect_params(&mut out);
        out
    }

    /// One objective evaluation: encode under the plan, decode under the
    /// strategy's visibility, score masked tokens. Works for all four
    /// decoder strategies; they share this path and differ only in `vis`.
    pub fn forward_loss(
        &self,
        tokens: &Tensor,
        target: &[Real],
        batch: usize,
        plan: &MaskPlan,
        strategy: DecoderStrategy,
    ) -> Result<(Tensor, LossReport)> {
        let enc = self.encoder.forward(tokens, batch, plan)?;
        let vis = build_visibility(plan, strategy, self.cfg.map_self_visible);
        let pred = self.decoder.decode(&enc, batch, plan, &vis)?;
        map_loss(&pred, target, plan, batch)
    }
}

/// Token-causal pretraining as a special case of the same pipeline: the AR
/// visibility plus whatever mask plan the caller configured (a raster-suffix
/// plan reproduces next-token prediction of the suffix).
pub fn pilot_ar_objective(
    model: &MapModel,
    tokens: &Tensor,
    target: &[Real],
    batch: usize,
    plan: &MaskPlan,
) -> Result<(Tensor, LossReport)> {
    model.forward_loss(tokens, target, batch, plan, DecoderStrategy::Ar)
}
