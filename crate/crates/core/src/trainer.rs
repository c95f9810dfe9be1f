//! Training: AdamW with decoupled weight decay, cosine schedule with linear
//! warmup, global-norm gradient clipping, pretrain/finetune loops, binary
//! checkpoints, and the desk-scale ablation grid runner.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::RngCore;

use crate::config::{parse_config, Mode, TrainConfig};
use crate::data::{
    patchify, random_crop, read_archive, synth_dataset, DatasetRecord, Image,
};
use crate::error::{MapError, Result};
use crate::masking::{build_mask_plan, MaskPlan, MaskStrategy};
use crate::objective::{LossReport, MapModel};
use crate::rng::MapRng;
use crate::tensor::{no_grad, Real, Tensor};

// ── Schedule ────────────────────────────────────────────────────────────

/// Linear warmup to `base` over `warmup` steps, then half-cosine decay to 0
/// at `total`. Monotone non-increasing after warmup.
pub fn cosine_lr(step: u64, warmup: u64, total: u64, base: f64) -> f64 {
    assert!(step <= total, "step {} past total {}", step, total);
    if warmup > 0 && step < warmup {
        return base * step as f64 / warmup as f64;
    }
    if total == warmup {
        return base;
    }
    let progress = (step - warmup) as f64 / (total - warmup) as f64;
    0.5 * base * (1.0 + (std::f64::consts::PI * progress).cos())
}

// ── Optimizer ───────────────────────────────────────────────────────────

/// AdamW with bias-corrected moments and decoupled weight decay. A step in
/// which any gradient is non-finite is skipped entirely and counted.
pub struct AdamW {
    pub beta1: Real,
    pub beta2: Real,
    pub eps: Real,
    pub weight_decay: Real,
    pub m: Vec<Vec<Real>>,
    pub v: Vec<Vec<Real>>,
    /// applied (non-skipped) steps, used for bias correction
    pub t: u64,
    pub skipped: u64,
}

impl AdamW {
    pub fn new(params: &[(String, Tensor)], cfg: &TrainConfig) -> AdamW {
        AdamW {
            beta1: cfg.beta1 as Real,
            beta2: cfg.beta2 as Real,
            eps: cfg.eps as Real,
            weight_decay: cfg.weight_decay as Real,
            m: params.iter().map(|(_, p)| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|(_, p)| vec![0.0; p.numel()]).collect(),
            t: 0,
            skipped: 0,
        }
    }

    /// Apply one update; returns false if the step was skipped because a
    /// gradient was non-finite.
    pub fn step(&mut self, params: &[(String, Tensor)], lr: f64) -> bool {
        let grads: Vec<Vec<Real>> = params
            .iter()
            .map(|(_, p)| p.grad().unwrap_or_else(|| vec![0.0; p.numel()]))
            .collect();
        if grads.iter().flatten().any(|g| !g.is_finite()) {
            self.skipped += 1;
            return false;
        }
        self.t += 1;
        let lr = lr as Real;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (idx, (_, p)) in params.iter().enumerate() {
            let g = &grads[idx];
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            let mut data = p.to_vec();
            for i in 0..data.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                data[i] -= lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * data[i]);
            }
            p.set_data(&data);
        }
        true
    }
}

/// Scale all gradients so the global L2 norm is at most `clip`; returns the
/// pre-clip norm. `clip <= 0` disables clipping.
pub fn clip_gradients(params: &[(String, Tensor)], clip: f64) -> f64 {
    let mut sq = 0.0f64;
    for (_, p) in params {
        if let Some(g) = p.grad() {
            for v in g {
                sq += v as f64 * v as f64;
            }
        }
    }
    let norm = sq.sqrt();
    if clip > 0.0 && norm > clip && norm.is_finite() {
        let factor = (clip / norm) as Real;
        for (_, p) in params {
            p.scale_grad(factor);
        }
    }
    norm
}

// ── Checkpoints ─────────────────────────────────────────────────────────

pub const CKPT_MAGIC: &[u8; 8] = b"MAPCKPT1";
pub const CKPT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

/// On-disk training snapshot: config echo, model tensors, optimizer moments,
/// step counter, RNG state. Little-endian throughout, f32 tensor data.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub tensors: Vec<NamedTensor>,
    pub opt_tensors: Vec<NamedTensor>,
    pub step: u64,
    pub rng_state: [u8; 32],
}

fn write_tensor(out: &mut impl Write, t: &NamedTensor) -> Result<()> {
    let name = t.name.as_bytes();
    out.write_all(&(name.len() as u16).to_le_bytes())?;
    out.write_all(name)?;
    out.write_all(&[t.dims.len() as u8])?;
    for &d in &t.dims {
        out.write_all(&(d as u64).to_le_bytes())?;
    }
    out.write_all(&[0u8])?; // dtype 0 = f32
    for &v in &t.data {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &'static str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| MapError::Truncated { what })
}

fn read_u16(r: &mut impl Read, what: &'static str) -> Result<u16> {
    let mut b = [0u8; 2];
    read_exact(r, &mut b, what)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32(r: &mut impl Read, what: &'static str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read, what: &'static str) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b, what)?;
    Ok(u64::from_le_bytes(b))
}

fn read_tensor(r: &mut impl Read) -> Result<NamedTensor> {
    const WHAT: &str = "checkpoint tensor";
    let name_len = read_u16(r, WHAT)? as usize;
    let mut name = vec![0u8; name_len];
    read_exact(r, &mut name, WHAT)?;
    let name = String::from_utf8(name)
        .map_err(|_| MapError::Contract("checkpoint tensor name is not UTF-8".into()))?;
    let mut ndim = [0u8; 1];
    read_exact(r, &mut ndim, WHAT)?;
    let mut dims = Vec::with_capacity(ndim[0] as usize);
    for _ in 0..ndim[0] {
        dims.push(read_u64(r, WHAT)? as usize);
    }
    let mut dtype = [0u8; 1];
    read_exact(r, &mut dtype, WHAT)?;
    if dtype[0] != 0 {
        return Err(MapError::VersionMismatch {
            what: "checkpoint tensor dtype",
            found: dtype[0] as u32,
        });
    }
    let numel: usize = dims.iter().product();
    let mut data = Vec::with_capacity(numel);
    let mut b = [0u8; 4];
    for _ in 0..numel {
        read_exact(r, &mut b, WHAT)?;
        data.push(f32::from_le_bytes(b));
    }
    Ok(NamedTensor { name, dims, data })
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        out.write_all(CKPT_MAGIC)?;
        out.write_all(&CKPT_VERSION.to_le_bytes())?;
        let cfg_json = serde_json::to_vec(&self.config)
            .map_err(|e| MapError::Contract(format!("config serialization failed: {}", e)))?;
        out.write_all(&(cfg_json.len() as u32).to_le_bytes())?;
        out.write_all(&cfg_json)?;
        out.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for t in &self.tensors {
            write_tensor(&mut out, t)?;
        }
        out.write_all(&(self.opt_tensors.len() as u32).to_le_bytes())?;
        for t in &self.opt_tensors {
            write_tensor(&mut out, t)?;
        }
        out.write_all(&self.step.to_le_bytes())?;
        out.write_all(&self.rng_state)?;
        out.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic, "checkpoint header")?;
        if &magic != CKPT_MAGIC {
            return Err(MapError::BadMagic { what: "checkpoint" });
        }
        let version = read_u32(&mut r, "checkpoint header")?;
        if version != CKPT_VERSION {
            return Err(MapError::VersionMismatch {
                what: "checkpoint",
                found: version,
            });
        }
        let cfg_len = read_u32(&mut r, "checkpoint config")? as usize;
        let mut cfg_json = vec![0u8; cfg_len];
        read_exact(&mut r, &mut cfg_json, "checkpoint config")?;
        let config: TrainConfig = serde_json::from_slice(&cfg_json)
            .map_err(|e| MapError::Contract(format!("checkpoint config invalid: {}", e)))?;
        let n = read_u32(&mut r, "checkpoint tensors")? as usize;
        let tensors = (0..n).map(|_| read_tensor(&mut r)).collect::<Result<_>>()?;
        let n = read_u32(&mut r, "checkpoint optimizer")? as usize;
        let opt_tensors = (0..n).map(|_| read_tensor(&mut r)).collect::<Result<_>>()?;
        let step = read_u64(&mut r, "checkpoint trailer")?;
        let mut rng_state = [0u8; 32];
        read_exact(&mut r, &mut rng_state, "checkpoint trailer")?;
        Ok(Checkpoint {
            config,
            tensors,
            opt_tensors,
            step,
            rng_state,
        })
    }
}

// ── Trainer ─────────────────────────────────────────────────────────────

/// Per-step outcome.
pub struct StepReport {
    pub loss: Real,
    pub lr: f64,
    pub skipped: bool,
    pub report: Option<LossReport>,
    /// masked-token count contributed per grid row this step
    pub row_tokens: Vec<usize>,
}

/// Per-epoch aggregate; `per_row` is weighted by each row's masked-token
/// count across the epoch's steps.
#[derive(Clone, Debug)]
pub struct EpochStats {
    pub mean_loss: Real,
    pub per_row: Vec<Real>,
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: MapModel,
    /// classifier (weights, bias); present in finetune mode
    pub head: Option<(Tensor, Tensor)>,
    pub params: Vec<(String, Tensor)>,
    pub opt: AdamW,
    pub rng: MapRng,
    pub step: u64,
    pub total_steps: u64,
    pub data: Vec<DatasetRecord>,
    pub train_idx: Vec<usize>,
    pub val_idx: Vec<usize>,
    epoch_order: Vec<usize>,
    cursor: usize,
    empty_plan: MaskPlan,
}

fn transpose_image(img: &Image) -> Image {
    let (c, h, w) = (img.channels, img.height, img.width);
    let mut pixels = vec![0.0f32; c * h * w];
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                pixels[(ci * w + x) * h + y] = img.pixels[(ci * h + y) * w + x];
            }
        }
    }
    Image::new(c, w, h, pixels)
}

impl Trainer {
    pub fn new(cfg: &TrainConfig) -> Result<Trainer> {
        cfg.validate()?;
        let mcfg = cfg.model_config()?;
        let data = if cfg.dataset == "synthetic" {
            synth_dataset(
                cfg.seed,
                cfg.dataset_size,
                cfg.num_classes,
                cfg.image_size,
                cfg.image_size,
            )
        } else {
            read_archive(Path::new(&cfg.dataset))?
        };
        if data.is_empty() {
            return Err(MapError::Contract("dataset is empty".into()));
        }
        let mut rng = MapRng::seed_from_u64(cfg.seed);
        let model = MapModel::new(&mut rng, &mcfg)?;
        let head = if cfg.mode == Mode::Finetune {
            Some((
                Tensor::randn(&mut rng, &[cfg.dim, cfg.num_classes], 0.02, true),
                Tensor::zeros(&[cfg.num_classes], true),
            ))
        } else {
            None
        };
        let mut params = Vec::new();
        match cfg.mode {
            Mode::Pretrain => {
                params = model.params();
            }
            Mode::Finetune => {
                model.encoder.collect_params(&mut params);
                let (w, b) = head.as_ref().unwrap();
                params.push(("head.w".into(), w.clone()));
                params.push(("head.b".into(), b.clone()));
            }
        }
        // split derives from the config alone so resume reproduces it
        let (train_idx, val_idx) = if cfg.mode == Mode::Finetune {
            let mut idx: Vec<usize> = (0..data.len()).collect();
            let mut split_rng = MapRng::seed_from_u64(cfg.seed.wrapping_add(0x5eed));
            idx.shuffle(&mut split_rng);
            let n_val = ((data.len() as f64 * cfg.val_frac) as usize).max(1);
            let val = idx.split_off(data.len() - n_val);
            (idx, val)
        } else {
            ((0..data.len()).collect(), Vec::new())
        };
        if train_idx.is_empty() {
            return Err(MapError::Contract("no training samples after split".into()));
        }
        let spe = Self::steps_for(train_idx.len(), cfg.batch_size);
        let opt = AdamW::new(&params, cfg);
        Ok(Trainer {
            cfg: cfg.clone(),
            model,
            head,
            params,
            opt,
            rng,
            step: 0,
            total_steps: spe * cfg.epochs as u64,
            data,
            train_idx,
            val_idx,
            epoch_order: Vec::new(),
            cursor: 0,
            empty_plan: build_mask_plan(
                mcfg.grid_rows(),
                mcfg.grid_cols(),
                0.0,
                MaskStrategy::Random,
                0,
            )?,
        })
    }

    fn steps_for(n: usize, batch: usize) -> u64 {
        ((n + batch - 1) / batch) as u64
    }

    pub fn steps_per_epoch(&self) -> u64 {
        Self::steps_for(self.train_idx.len(), self.cfg.batch_size)
    }

    fn grid_dims(&self) -> (usize, usize) {
        (self.empty_plan.rows, self.empty_plan.cols)
    }

    /// Tokens (and, when `with_targets`, normalized reconstruction targets)
    /// for a batch of dataset indices, with train-time augmentation.
    fn make_batch(
        &mut self,
        indices: &[usize],
        augment: bool,
        with_targets: bool,
    ) -> Result<(Tensor, Vec<Real>, Vec<usize>)> {
        let p = self.cfg.patch_size;
        let mut tokens = Vec::new();
        let mut targets = Vec::new();
        let mut labels = Vec::new();
        for &i in indices {
            let mut img = if augment {
                random_crop(&self.data[i].image, 2, &mut self.rng)
            } else {
                self.data[i].image.clone()
            };
            if self.cfg.transpose_images {
                img = transpose_image(&img);
            }
            let grid = patchify(&img, p, p)?;
            tokens.extend_from_slice(&grid.tokens);
            if with_targets {
                targets.extend_from_slice(&crate::data::make_targets(&grid).values);
            }
            labels.push(self.data[i].label as usize);
        }
        let (rows, cols) = self.grid_dims();
        let d = p * p * self.cfg.channels;
        let t = Tensor::from_vec(tokens, &[indices.len() * rows * cols, d], false)?;
        Ok((t, targets, labels))
    }

    /// Run one optimizer step on the next batch; draws a fresh epoch order
    /// from the trainer RNG whenever the previous epoch is exhausted.
    pub fn step_once(&mut self) -> Result<StepReport> {
        if self.cursor >= self.epoch_order.len() {
            self.epoch_order = self.train_idx.clone();
            let mut order = std::mem::take(&mut self.epoch_order);
            order.shuffle(&mut self.rng);
            self.epoch_order = order;
            self.cursor = 0;
        }
        let end = (self.cursor + self.cfg.batch_size).min(self.epoch_order.len());
        let indices: Vec<usize> = self.epoch_order[self.cursor..end].to_vec();
        self.cursor = end;
        let batch = indices.len();
        let lr = cosine_lr(
            self.step,
            (self.total_steps as f64 * self.cfg.warmup_frac).round() as u64,
            self.total_steps,
            self.cfg.lr,
        );
        let (rows, cols) = self.grid_dims();
        for (_, p) in &self.params {
            p.zero_grad();
        }
        let (loss_val, report, row_tokens) = match self.cfg.mode {
            Mode::Pretrain => {
                let (tokens, targets, _) = self.make_batch(&indices, true, true)?;
                let plan = build_mask_plan(
                    rows,
                    cols,
                    self.cfg.mask_ratio,
                    self.cfg.mask_strategy,
                    self.rng.next_u64(),
                )?;
                let (loss, report) = self.model.forward_loss(
                    &tokens,
                    &targets,
                    batch,
                    &plan,
                    self.cfg.decoder_strategy,
                )?;
                loss.backward()?;
                let row_tokens: Vec<usize> =
                    plan.masked.iter().map(|r| r.len() * batch).collect();
                (loss.item(), Some(report), row_tokens)
            }
            Mode::Finetune => {
                let (tokens, _, labels) = self.make_batch(&indices, true, false)?;
                let loss = self.classify_loss(&tokens, batch, &labels)?;
                loss.backward()?;
                (loss.item(), None, Vec::new())
            }
        };
        if !loss_val.is_finite() {
            self.opt.skipped += 1;
            self.step += 1;
            return Ok(StepReport {
                loss: loss_val,
                lr,
                skipped: true,
                report,
                row_tokens,
            });
        }
        clip_gradients(&self.params, self.cfg.grad_clip);
        let applied = self.opt.step(&self.params, lr);
        self.step += 1;
        Ok(StepReport {
            loss: loss_val,
            lr,
            skipped: !applied,
            report,
            row_tokens,
        })
    }

    fn classify_loss(&self, tokens: &Tensor, batch: usize, labels: &[usize]) -> Result<Tensor> {
        let (w, b) = self.head.as_ref().ok_or_else(|| {
            MapError::Contract("classification requested without a head".into())
        })?;
        let feats = self.model.encoder.forward(tokens, batch, &self.empty_plan)?;
        let pooled = feats.mean_rows_group(self.model.encoder.seq_len)?;
        pooled.matmul(w)?.add_bias(b)?.cross_entropy(labels)
    }

    /// One full pass over the training split.
    pub fn run_epoch(&mut self) -> Result<EpochStats> {
        let spe = self.steps_per_epoch();
        let (rows, _) = self.grid_dims();
        let mut loss_acc = 0.0f64;
        let mut loss_w = 0.0f64;
        let mut row_acc = vec![0.0f64; rows];
        let mut row_w = vec![0.0f64; rows];
        for _ in 0..spe {
            let rep = self.step_once()?;
            let weight = match &rep.report {
                Some(r) => r.tokens_used as f64,
                None => 1.0,
            };
            if rep.loss.is_finite() {
                loss_acc += rep.loss as f64 * weight;
                loss_w += weight;
            }
            if let Some(r) = &rep.report {
                for (i, &v) in r.per_row.iter().enumerate() {
                    row_acc[i] += v as f64 * rep.row_tokens[i] as f64;
                    row_w[i] += rep.row_tokens[i] as f64;
                }
            }
        }
        Ok(EpochStats {
            mean_loss: if loss_w > 0.0 {
                (loss_acc / loss_w) as Real
            } else {
                Real::NAN
            },
            per_row: row_acc
                .iter()
                .zip(&row_w)
                .map(|(&a, &w)| if w > 0.0 { (a / w) as Real } else { 0.0 })
                .collect(),
        })
    }

    /// Top-1 accuracy on the held-out split.
    pub fn evaluate(&mut self) -> Result<f64> {
        if self.val_idx.is_empty() {
            return Err(MapError::Contract("no held-out split to evaluate".into()));
        }
        let (w, b) = self
            .head
            .as_ref()
            .ok_or_else(|| MapError::Contract("evaluate requires a classifier head".into()))?
            .clone();
        let mut correct = 0usize;
        let val = self.val_idx.clone();
        for chunk in val.chunks(self.cfg.batch_size) {
            let (tokens, _, labels) = self.make_batch(chunk, false, false)?;
            let logits = no_grad(|| -> Result<Tensor> {
                let feats = self
                    .model
                    .encoder
                    .forward(&tokens, chunk.len(), &self.empty_plan)?;
                let pooled = feats.mean_rows_group(self.model.encoder.seq_len)?;
                pooled.matmul(&w)?.add_bias(&b)
            })?;
            let d = logits.data();
            let k = self.cfg.num_classes;
            for (bi, &label) in labels.iter().enumerate() {
                let row = &d[bi * k..(bi + 1) * k];
                let pred = row
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .unwrap()
                    .0;
                if pred == label {
                    correct += 1;
                }
            }
        }
        Ok(correct as f64 / val.len() as f64)
    }

    // ── Checkpointing ───────────────────────────────────────────────────

    pub fn to_checkpoint(&self) -> Checkpoint {
        let tensors = self
            .params
            .iter()
            .map(|(name, p)| NamedTensor {
                name: name.clone(),
                dims: p.shape().to_vec(),
                data: p.data().iter().map(|&v| v as f32).collect(),
            })
            .collect();
        let mut opt_tensors = Vec::new();
        for (idx, (name, p)) in self.params.iter().enumerate() {
            opt_tensors.push(NamedTensor {
                name: format!("m.{}", name),
                dims: p.shape().to_vec(),
                data: self.opt.m[idx].iter().map(|&v| v as f32).collect(),
            });
            opt_tensors.push(NamedTensor {
                name: format!("v.{}", name),
                dims: p.shape().to_vec(),
                data: self.opt.v[idx].iter().map(|&v| v as f32).collect(),
            });
        }
        opt_tensors.push(NamedTensor {
            name: "adam_t".into(),
            dims: vec![1],
            data: vec![self.opt.t as f32],
        });
        opt_tensors.push(NamedTensor {
            name: "skipped".into(),
            dims: vec![1],
            data: vec![self.opt.skipped as f32],
        });
        Checkpoint {
            config: self.cfg.clone(),
            tensors,
            opt_tensors,
            step: self.step,
            rng_state: self.rng.state(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    /// Rebuild a trainer in the exact state the checkpoint was taken in.
    pub fn resume(ckpt: &Checkpoint) -> Result<Trainer> {
        let mut t = Trainer::new(&ckpt.config)?;
        for nt in &ckpt.tensors {
            let (_, p) = t
                .params
                .iter()
                .find(|(name, _)| name == &nt.name)
                .ok_or_else(|| MapError::Incompatible {
                    field: "tensor name",
                    ckpt: nt.name.clone(),
                    cfg: "absent in rebuilt model".into(),
                })?;
            if p.shape() != nt.dims.as_slice() {
                return Err(MapError::Incompatible {
                    field: "tensor shape",
                    ckpt: format!("{} {:?}", nt.name, nt.dims),
                    cfg: format!("{:?}", p.shape()),
                });
            }
            let data: Vec<Real> = nt.data.iter().map(|&v| v as Real).collect();
            p.set_data(&data);
        }
        for nt in &ckpt.opt_tensors {
            match nt.name.as_str() {
                "adam_t" => t.opt.t = nt.data[0] as u64,
                "skipped" => t.opt.skipped = nt.data[0] as u64,
                name => {
                    let (kind, pname) = name
                        .split_once('.')
                        .ok_or_else(|| MapError::Incompatible {
                            field: "optimizer tensor",
                            ckpt: name.into(),
                            cfg: "expected m.<param> or v.<param>".into(),
                        })?;
                    let idx = t
                        .params
                        .iter()
                        .position(|(n, _)| n == pname)
                        .ok_or_else(|| MapError::Incompatible {
                            field: "optimizer tensor",
                            ckpt: name.into(),
                            cfg: "no matching parameter".into(),
                        })?;
                    let buf: Vec<Real> = nt.data.iter().map(|&v| v as Real).collect();
                    match kind {
                        "m" => t.opt.m[idx] = buf,
                        "v" => t.opt.v[idx] = buf,
                        _ => {
                            return Err(MapError::Incompatible {
                                field: "optimizer tensor",
                                ckpt: name.into(),
                                cfg: "expected m.<param> or v.<param>".into(),
                            })
                        }
                    }
                }
            }
        }
        t.step = ckpt.step;
        t.rng = MapRng::from_state(ckpt.rng_state);
        Ok(t)
    }

    /// Initialize the encoder from a pretraining checkpoint, after checking
    /// that every architecture-defining field matches.
    pub fn load_pretrained(&mut self, ckpt: &Checkpoint) -> Result<()> {
        macro_rules! check_field {
            ($field:ident) => {
                if ckpt.config.$field != self.cfg.$field {
                    return Err(MapError::Incompatible {
                        field: stringify!($field),
                        ckpt: format!("{:?}", ckpt.config.$field),
                        cfg: format!("{:?}", self.cfg.$field),
                    });
                }
            };
        }
        check_field!(pattern);
        check_field!(scan_order);
        check_field!(dim);
        check_field!(d_state);
        check_field!(heads);
        check_field!(mlp_ratio);
        check_field!(image_size);
        check_field!(patch_size);
        check_field!(channels);
        let mut loaded = 0usize;
        for nt in &ckpt.tensors {
            if !nt.name.starts_with("enc.") {
                continue;
            }
            let (_, p) = self
                .params
                .iter()
                .find(|(name, _)| name == &nt.name)
                .ok_or_else(|| MapError::Incompatible {
                    field: "tensor name",
                    ckpt: nt.name.clone(),
                    cfg: "absent in fine-tune model".into(),
                })?;
            if p.shape() != nt.dims.as_slice() {
                return Err(MapError::Incompatible {
                    field: "tensor shape",
                    ckpt: format!("{} {:?}", nt.name, nt.dims),
                    cfg: format!("{:?}", p.shape()),
                });
            }
            let data: Vec<Real> = nt.data.iter().map(|&v| v as Real).collect();
            p.set_data(&data);
            loaded += 1;
        }
        if loaded == 0 {
            return Err(MapError::Incompatible {
                field: "tensors",
                ckpt: "no enc.* tensors".into(),
                cfg: "encoder initialization requested".into(),
            });
        }
        Ok(())
    }
}

// ── Run drivers ─────────────────────────────────────────────────────────

pub struct PretrainOutcome {
    pub epoch_stats: Vec<EpochStats>,
    pub metrics_csv: String,
    pub skipped: u64,
}

/// Full pretraining run; fails loudly if more than 1% of steps were skipped
/// on non-finite gradients.
pub fn pretrain(cfg: &TrainConfig) -> Result<(Trainer, PretrainOutcome)> {
    if cfg.mode != Mode::Pretrain {
        return Err(MapError::Usage("pretrain requires mode=pretrain".into()));
    }
    let mut t = Trainer::new(cfg)?;
    let rows = t.grid_dims().0;
    let mut csv = LossReport::csv_header(rows);
    csv.push('\n');
    let mut epoch_stats = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let stats = t.run_epoch()?;
        csv.push_str(&format!("{},{}", epoch, stats.mean_loss));
        for v in &stats.per_row {
            csv.push_str(&format!(",{}", v));
        }
        csv.push('\n');
        epoch_stats.push(stats);
    }
    let skipped = t.opt.skipped;
    if skipped * 100 > t.total_steps {
        return Err(MapError::Numeric(format!(
            "{} of {} steps skipped on non-finite gradients",
            skipped, t.total_steps
        )));
    }
    Ok((
        t,
        PretrainOutcome {
            epoch_stats,
            metrics_csv: csv,
            skipped,
        },
    ))
}

pub struct FinetuneOutcome {
    pub epoch_loss: Vec<Real>,
    pub accuracy: f64,
}

/// Supervised run, optionally initialized from a pretraining checkpoint
/// (`init=None` is the from-scratch baseline).
pub fn finetune(cfg: &TrainConfig, init: Option<&Checkpoint>) -> Result<(Trainer, FinetuneOutcome)> {
    if cfg.mode != Mode::Finetune {
        return Err(MapError::Usage("finetune requires mode=finetune".into()));
    }
    let mut t = Trainer::new(cfg)?;
    if let Some(ckpt) = init {
        t.load_pretrained(ckpt)?;
    }
    let mut epoch_loss = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        epoch_loss.push(t.run_epoch()?.mean_loss);
    }
    let accuracy = t.evaluate()?;
    Ok((t, FinetuneOutcome { epoch_loss, accuracy }))
}

// ── Ablation grids ──────────────────────────────────────────────────────

pub struct GridCell {
    pub label: String,
    /// config overrides in key=value form, applied over the base config
    pub overrides: Vec<(String, String)>,
}

fn cell(label: &str, overrides: &[(&str, &str)]) -> GridCell {
    GridCell {
        label: label.to_string(),
        overrides: overrides
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect(),
    }
}

/// Named sweeps shaped like the usual ablations: decoder visibility,
/// masking strategy, masking ratio, and the scan-vs-prediction-order square
/// (the column prediction order is realized by transposing the images, which
/// swaps the row/column roles of the whole pipeline).
pub fn builtin_grid(name: &str) -> Result<Vec<GridCell>> {
    match name {
        "decoder_mask" => Ok(vec![
            cell("ar", &[("decoder_strategy", "ar")]),
            cell("mae", &[("decoder_strategy", "mae")]),
            cell("local_mae", &[("decoder_strategy", "local_mae")]),
            cell("map", &[("decoder_strategy", "map")]),
        ]),
        "mask_strategy" => Ok(vec![
            cell("random", &[("mask_strategy", "random")]),
            cell("sequential", &[("mask_strategy", "sequential")]),
            cell("diagonal", &[("mask_strategy", "diagonal")]),
        ]),
        "mask_ratio" => Ok(vec![
            cell("0.1", &[("mask_ratio", "0.1")]),
            cell("0.25", &[("mask_ratio", "0.25")]),
            cell("0.5", &[("mask_ratio", "0.5")]),
            cell("0.75", &[("mask_ratio", "0.75")]),
            cell("0.9", &[("mask_ratio", "0.9")]),
        ]),
        "scan_order" => Ok(vec![
            cell(
                "pred=row,scan=row",
                &[("scan_order", "row_first"), ("transpose_images", "false")],
            ),
            cell(
                "pred=row,scan=col",
                &[("scan_order", "column_first"), ("transpose_images", "false")],
            ),
            cell(
                "pred=col,scan=row",
                &[("scan_order", "column_first"), ("transpose_images", "true")],
            ),
            cell(
                "pred=col,scan=col",
                &[("scan_order", "row_first"), ("transpose_images", "true")],
            ),
        ]),
        _ => Err(MapError::Usage(format!(
            "unknown grid `{}` (decoder_mask|mask_strategy|mask_ratio|scan_order)",
            name
        ))),
    }
}

/// Run every cell with the shared base config; failures are recorded in the
/// table and do not stop the sweep. Returns CSV with a header row.
pub fn run_ablation_grid(base: &TrainConfig, cells: &[GridCell]) -> String {
    let mut csv = String::from("cell,status,final_mse\n");
    for c in cells {
        let text: String = c
            .overrides
            .iter()
            .map(|(k, v)| format!("{}={}\n", k, v))
            .collect();
        let result = parse_config(&text, base.clone()).and_then(|cfg| pretrain(&cfg));
        match result {
            Ok((_, outcome)) => {
                let last = outcome
                    .epoch_stats
                    .last()
                    .map(|s| s.mean_loss.to_string())
                    .unwrap_or_default();
                csv.push_str(&format!("{},ok,{}\n", c.label, last));
            }
            Err(e) => {
                csv.push_str(&format!(
                    "{},error: {},\n",
                    c.label,
                    e.to_string().replace(',', ";")
                ));
            }
        }
    }
    csv
}
