//! Dense tensors with reverse-mode automatic differentiation.
//!
//! Row-major storage, shapes up to three dimensions, no broadcasting beyond
//! the specific fused ops the model needs. Each op records its parents and a
//! backward closure; `backward` walks the graph once in reverse topological
//! order. Single-threaded by construction: one compute graph per training
//! step, parameters mutated only by the optimizer between steps.

use std::cell::{Cell, Ref, RefCell};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{MapError, Result};

#[cfg(not(feature = "f64"))]
pub type Real = f32;
#[cfg(feature = "f64")]
pub type Real = f64;

/// Finite-difference step for gradient checks, matched to the precision.
#[cfg(not(feature = "f64"))]
pub const FD_STEP: Real = 1e-3;
#[cfg(feature = "f64")]
pub const FD_STEP: Real = 1e-5;

/// Gradient-check tolerance (relative error) for the active precision.
#[cfg(not(feature = "f64"))]
pub const GRAD_TOL: Real = 1e-3;
#[cfg(feature = "f64")]
pub const GRAD_TOL: Real = 1e-5;

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` without recording the compute graph (inference / finite differences).
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    let out = f();
    GRAD_ENABLED.with(|g| g.set(prev));
    out
}

fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

type BackwardFn = Box<dyn Fn(&[Real], &[Tensor])>;

struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<Real>>,
    grad: RefCell<Option<Vec<Real>>>,
    requires_grad: bool,
    needs_grad: bool,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
}

#[derive(Clone)]
pub struct Tensor(Rc<Inner>);

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

impl Tensor {
    pub fn from_vec(data: Vec<Real>, shape: &[usize], requires_grad: bool) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(MapError::Shape(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor(Rc::new(Inner {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape: shape.to_vec(),
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad,
            needs_grad: requires_grad,
            parents: Vec::new(),
            backward: None,
        })))
    }

    pub fn zeros(shape: &[usize], requires_grad: bool) -> Tensor {
        let numel = shape.iter().product();
        Tensor::from_vec(vec![0.0; numel], shape, requires_grad).unwrap()
    }

    pub fn scalar(v: Real) -> Tensor {
        Tensor::from_vec(vec![v], &[1], false).unwrap()
    }

    /// Leaf with N(0, std^2) entries drawn from `rng`.
    pub fn randn<R: rand::Rng>(rng: &mut R, shape: &[usize], std: Real, requires_grad: bool) -> Tensor {
        use rand_distr::{Distribution, StandardNormal};
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|_| {
                let z: Real = StandardNormal.sample(rng);
                z * std
            })
            .collect();
        Tensor::from_vec(data, shape, requires_grad).unwrap()
    }

    fn from_op(shape: Vec<usize>, data: Vec<Real>, parents: Vec<Tensor>, backward: BackwardFn) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let needs = grad_enabled() && parents.iter().any(|p| p.0.needs_grad);
        Tensor(Rc::new(Inner {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad: false,
            needs_grad: needs,
            parents: if needs { parents } else { Vec::new() },
            backward: if needs { Some(backward) } else { None },
        }))
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn numel(&self) -> usize {
        self.0.shape.iter().product()
    }

    pub fn data(&self) -> Ref<'_, Vec<Real>> {
        self.0.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<Real> {
        self.0.data.borrow().clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Scalar value; panics if not a one-element tensor.
    pub fn item(&self) -> Real {
        assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.0.data.borrow()[0]
    }

    pub fn grad(&self) -> Option<Vec<Real>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Scale the stored gradient in place (global-norm clipping).
    pub fn scale_grad(&self, factor: Real) {
        if let Some(g) = self.0.grad.borrow_mut().as_mut() {
            for v in g.iter_mut() {
                *v *= factor;
            }
        }
    }

    /// In-place data overwrite (optimizer updates, finite-difference probes).
    pub fn set_data(&self, data: &[Real]) {
        let mut d = self.0.data.borrow_mut();
        assert_eq!(d.len(), data.len());
        d.copy_from_slice(data);
    }

    fn accum_grad(&self, f: impl FnOnce(&mut [Real])) {
        if !self.0.needs_grad {
            return;
        }
        let mut g = self.0.grad.borrow_mut();
        let buf = g.get_or_insert_with(|| vec![0.0; self.numel()]);
        f(buf);
    }

    /// Reverse-mode backprop from a scalar loss to every `requires_grad` leaf.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(MapError::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        // Iterative post-order DFS; each node visited exactly once.
        let mut order: Vec<Tensor> = Vec::new();
        let mut visited = std::collections::HashSet::new();
        let mut stack: Vec<(Tensor, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.0.id);
        while let Some((node, child_idx)) = stack.pop() {
            if child_idx < node.0.parents.len() {
                let parent = node.0.parents[child_idx].clone();
                stack.push((node, child_idx + 1));
                if parent.0.needs_grad && visited.insert(parent.0.id) {
                    stack.push((parent, 0));
                }
            } else {
                order.push(node);
            }
        }
        self.accum_grad(|g| g[0] = 1.0);
        for node in order.iter().rev() {
            if let Some(back) = &node.0.backward {
                let grad = node.0.grad.borrow().clone();
                if let Some(grad) = grad {
                    back(&grad, &node.0.parents);
                }
            }
        }
        Ok(())
    }

    // ── Elementwise and broadcast ops ───────────────────────────────────

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape() != other.shape() {
            return Err(MapError::Shape(format!(
                "add: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let a = self.data();
        let b = other.data();
        let out = a.iter().zip(b.iter()).map(|(x, y)| x + y).collect();
        drop(a);
        drop(b);
        Ok(Tensor::from_op(
            self.0.shape.clone(),
            out,
            vec![self.clone(), other.clone()],
            Box::new(|g, parents| {
                parents[0].accum_grad(|d| {
                    for (di, gi) in d.iter_mut().zip(g) {
                        *di += gi;
                    }
                });
                parents[1].accum_grad(|d| {
                    for (di, gi) in d.iter_mut().zip(g) {
                        *di += gi;
                    }
                });
            }),
        ))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape() != other.shape() {
            return Err(MapError::Shape(format!(
                "mul: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let out = {
            let a = self.data();
            let b = other.data();
            a.iter().zip(b.iter()).map(|(x, y)| x * y).collect()
        };
        Ok(Tensor::from_op(
            self.0.shape.clone(),
            out,
            vec![self.clone(), other.clone()],
            Box::new(|g, parents| {
                {
                    let b = parents[1].data();
                    parents[0].accum_grad(|d| {
                        for i in 0..d.len() {
                            d[i] += g[i] * b[i];
                        }
                    });
                }
                let a = parents[0].data();
                parents[1].accum_grad(|d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * a[i];
                    }
                });
            }),
        ))
    }

    pub fn scale(&self, c: Real) -> Tensor {
        let out = self.data().iter().map(|x| x * c).collect();
        Tensor::from_op(
            self.0.shape.clone(),
            out,
            vec![self.clone()],
            Box::new(move |g, parents| {
                parents[0].accum_grad(|d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * c;
                    }
                });
            }),
        )
    }

    /// x + s where s is a learnable one-element tensor is not needed; this is
    /// x * s for a learnable scalar (residual branch scale).
    pub fn mul_scalar_t(&self, s: &Tensor) -> Result<Tensor> {
        if s.numel() != 1 {
            return Err(MapError::Shape("mul_scalar_t: scale must be scalar".into()));
        }
        let sv = s.item();
        let out = self.data().iter().map(|x| x * sv).collect();
        Ok(Tensor::from_op(
            self.0.shape.clone(),
            out,
            vec![self.clone(), s.clone()],
            Box::new(move |g, parents| {
                parents[0].accum_grad(|d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * sv;
                    }
                });
                let x = parents[0].data();
                parents[1].accum_grad(|d| {
                    let mut acc = 0.0f64;
                    for i in 0..x.len() {
                        acc += (g[i] * x[i]) as f64;
                    }
                    d[0] += acc as Real;
                });
            }),
        ))
    }

    /// Row-broadcast add: x[r,c] + b[c].
    pub fn add_bias(&self, bias: &Tensor) -> Result<Tensor> {
        let (r, c) = self.dims2("add_bias")?;
        if bias.shape() != [c] {
            return Err(MapError::Shape(format!(
                "add_bias: bias {:?} vs cols {}",
                bias.shape(),
                c
            )));
        }
        let mut out = self.to_vec();
        {
            let b = bias.data();
            for row in out.chunks_exact_mut(c) {
                for (o, bv) in row.iter_mut().zip(b.iter()) {
                    *o += bv;
                }
            }
        }
        Ok(Tensor::from_op(
            self.0.shape.clone(),
            out,
            vec![self.clone(), bias.clone()],
            Box::new(move |g, parents| {
                parents[0].accum_grad(|d| {
                    for i in 0..d.len() {
                        d[i] += g[i];
                    }
                });
                parents[1].accum_grad(|d| {
                    for row in g.chunks_exact(c) {
                        for (di, gv) in d.iter_mut().zip(row) {
                            *di += gv;
                        }
                    }
                });
                let _ = r;
            }),
        ))
    }

    /// Tiled add: x[t*rt, c] + p[rt, c], the positional-embedding pattern.
    pub fn add_tiled(&self, tile: &Tensor) -> Result<Tensor> {
        let (r, c) = self.dims2("add_tiled")?;
        let (rt, ct) = tile.dims2("add_tiled tile")?;
        if c != ct || r % rt != 0 {
            return Err(MapError::Shape(format!(
                "add_tiled: x {:?} vs tile {:?}",
                self.shape(),
                tile.shape()
            )));
        }
        let mut out = self.to_vec();
        {
            let t = tile.data();
            for (i, row) in out.chunks_exact_mut(c).enumerate() {
                let trow = &t[(i % rt) * c..(i % rt + 1) * c];
                for (o, tv) in row.iter_mut().zip(trow) {
                    *o += tv;
                }
            }
        }
        Ok(Tensor::from_op(
            self.0.shape.clone(),
            out,
            vec![self.clone(), tile.clone()],
            Box::new(move |g, parents| {
                parents[0].accum_grad(|d| {
                    for i in 0..d.len() {
                        d[i] += g[i];
                    }
                });
                parents[1].accum_grad(|d| {
                    for (i, row) in g.chunks_exact(c).enumerate() {
                        let drow = &mut d[(i % rt) * c..(i % rt + 1) * c];
                        for (di, gv) in drow.iter_mut().zip(row) {
                            *di += gv;
                        }
                    }
                });
            }),
        ))
    }

    /// Column-broadcast multiply: x[r,c] * w[c] (per-channel skip weights).
    pub fn scale_cols(&self, w: &Tensor) -> Result<Tensor> {
        let (_r, c) = self.dims2("scale_cols")?;
        if w.shape() != [c] {
            return Err(MapError::Shape(format!(
                "scale_cols: w {:?} vs cols {}",
                w.shape(),
                c
            )));
        }
        let mut out = self.to_vec();
        {
            let wv = w.data();
            for row in out.chunks_exact_mut(c) {
                for (o, ww) in row.iter_mut().zip(wv.iter()) {
                    *o *= ww;
                }
            }
        }
        Ok(Tensor::from_op(
            self.0.shape.clone(),
            out,
            vec![self.clone(), w.clone()],
            Box::new(move |g, parents| {
                {
                    let wv = parents[1].data();
                    parents[0].accum_grad(|d| {
                        for (drow, grow) in d.chunks_exact_mut(c).zip(g.chunks_exact(c)) {
                            for j in 0..c {
                                drow[j] += grow[j] * wv[j];
                            }
                        }
                    });
                }
                let x = parents[0].data();
                parents[1].accum_grad(|d| {
                    for (xrow, grow) in x.chunks_exact(c).zip(g.chunks_exact(c)) {
                        for j in 0..c {
                            d[j] += grow[j] * xrow[j];
                        }
                    }
                });
            }),
        ))
    }

    pub fn silu(&self) -> Tensor {
        let x = self.to_vec();
        let out: Vec<Real> = x.iter().map(|&v| v * sigmoid(v)).collect();
        Tensor::from_op(
            self.0.shape.clone(),
            out,
            vec![self.clone()],
            Box::new(move |g, parents| {
                parents[0].accum_grad(|d| {
                    for i in 0..d.len() {
                        let s = sigmoid(x[i]);
                        d[i] += g[i] * (s + x[i] * s * (1.0 - s));
                    }
                });
            }),
        )
    }

    /// tanh-approximated GELU.
    pub fn gelu(&self) -> Tensor {
        let x = self.to_vec();
        let out: Vec<Real> = x.iter().map(|&v| gelu_fwd(v)).collect();
        Tensor::from_op(
            self.0.shape.clone(),
            out,
            vec![self.clone()],
            Box::new(move |g, parents| {
                parents[0].accum_grad(|d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * gelu_grad(x[i]);
                    }
                });
            }),
        )
    }

    /// Numerically stable softplus; output is strictly positive.
    pub fn softplus(&self) -> Tensor {
        let x = self.to_vec();
        let out: Vec<Real> = x
            .iter()
            .map(|&v| if v > 20.0 { v } else { (v.exp() + 1.0).ln() })
            .collect();
        Tensor::from_op(
            self.0.shape.clone(),
            out,
            vec![self.clone()],
            Box::new(move |g, parents| {
                parents[0].accum_grad(|d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * sigmoid(x[i]);
                    }
                });
            }),
        )
    }

    // ── Matrix products ─────────────────────────────────────────────────

    /// Standard 2-D matrix product: [m,k] x [k,n] -> [m,n].
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2("matmul lhs")?;
        let (k2, n) = other.dims2("matmul rhs")?;
        if k != k2 {
            return Err(MapError::Shape(format!(
                "matmul: inner dims {} vs {}",
                k, k2
            )));
        }
        let mut out = vec![0.0; m * n];
        mm_nn_acc(&self.data(), &other.data(), m, k, n, &mut out);
        Ok(Tensor::from_op(
            vec![m, n],
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |g, parents| {
                {
                    let b = parents[1].data();
                    parents[0].accum_grad(|d| mm_nt_acc(g, &b, m, n, k, d));
                }
                let a = parents[0].data();
                parents[1].accum_grad(|d| mm_tn_acc(&a, g, m, k, n, d));
            }),
        ))
    }

    /// Batched matmul over a leading group dim: [g,m,k] x [g,k,n] -> [g,m,n].
    /// With `transpose_b`, rhs is [g,n,k] (attention scores Q·K^T).
    pub fn bmm(&self, other: &Tensor, transpose_b: bool) -> Result<Tensor> {
        let (gc, m, k) = self.dims3("bmm lhs")?;
        let (gc2, bd1, bd2) = other.dims3("bmm rhs")?;
        let (kb, n) = if transpose_b { (bd2, bd1) } else { (bd1, bd2) };
        if gc != gc2 || k != kb {
            return Err(MapError::Shape(format!(
                "bmm: {:?} x {:?} (transpose_b={})",
                self.shape(),
                other.shape(),
                transpose_b
            )));
        }
        let mut out = vec![0.0; gc * m * n];
        {
            let a = self.data();
            let b = other.data();
            for gi in 0..gc {
                let av = &a[gi * m * k..(gi + 1) * m * k];
                let ov = &mut out[gi * m * n..(gi + 1) * m * n];
                if transpose_b {
                    let bv = &b[gi * n * k..(gi + 1) * n * k];
                    mm_nt_acc(av, bv, m, k, n, ov);
                } else {
                    let bv = &b[gi * k * n..(gi + 1) * k * n];
                    mm_nn_acc(av, bv, m, k, n, ov);
                }
            }
        }
        Ok(Tensor::from_op(
            vec![gc, m, n],
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |g, parents| {
                let a = parents[0].data();
                let b = parents[1].data();
                parents[0].accum_grad(|d| {
                    for gi in 0..gc {
                        let gv = &g[gi * m * n..(gi + 1) * m * n];
                        let dv = &mut d[gi * m * k..(gi + 1) * m * k];
                        if transpose_b {
                            // dA = dC · B, B is [n,k]
                            let bv = &b[gi * n * k..(gi + 1) * n * k];
                            mm_nn_acc(gv, bv, m, n, k, dv);
                        } else {
                            let bv = &b[gi * k * n..(gi + 1) * k * n];
                            mm_nt_acc(gv, bv, m, n, k, dv);
                        }
                    }
                });
                parents[1].accum_grad(|d| {
                    for gi in 0..gc {
                        let gv = &g[gi * m * n..(gi + 1) * m * n];
                        let av = &a[gi * m * k..(gi + 1) * m * k];
                        if transpose_b {
                            // dB = dC^T · A, dB is [n,k]
                            let dv = &mut d[gi * n * k..(gi + 1) * n * k];
                            mm_tn_acc(gv, av, m, n, k, dv);
                        } else {
                            let dv = &mut d[gi * k * n..(gi + 1) * k * n];
                            mm_tn_acc(av, gv, m, k, n, dv);
                        }
                    }
                });
            }),
        ))
    }

    // ── Structural ops ──────────────────────────────────────────────────

    /// Row gather: out[i] = x[idx[i]]. Used for scan-order permutations.
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Tensor> {
        let (r, c) = self.dims2("gather_rows")?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(MapError::Contract(format!(
                "gather_rows: index {} out of {} rows",
                bad, r
            )));
        }
        let x = self.data();
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(&x[i * c..(i + 1) * c]);
        }
        drop(x);
        let idx_own: Vec<usize> = idx.to_vec();
        Ok(Tensor::from_op(
            vec![idx.len(), c],
            out,
            vec![self.clone()],
            Box::new(move |g, parents| {
                parents[0].accum_grad(|d| {
                    for (o, &i) in idx_own.iter().enumerate() {
                        let grow = &g[o * c..(o + 1) * c];
                        let drow = &mut d[i * c..(i + 1) * c];
                        for j in 0..c {
                            drow[j] += grow[j];
                        }
                    }
                });
            }),
        ))
    }

    /// Replace masked rows by a shared fill vector (learned mask token).
    pub fn blend_rows(&self, fill: &Tensor, mask: &[bool]) -> Result<Tensor> {
        let (r, c) = self.dims2("blend_rows")?;
        if fill.shape() != [c] || mask.len() != r {
            return Err(MapError::Shape(format!(
                "blend_rows: x {:?}, fill {:?}, mask {}",
                self.shape(),
                fill.shape(),
                mask.len()
            )));
        }
        let mut out = self.to_vec();
        {
            let f = fill.data();
            for (i, row) in out.chunks_exact_mut(c).enumerate() {
                if mask[i] {
                    row.copy_from_slice(&f);
                }
            }
        }
        let mask_own = mask.to_vec();
        Ok(Tensor::from_op(
            self.0.shape.clone(),
            out,
            vec![self.clone(), fill.clone()],
            Box::new(move |g, parents| {
                parents[0].accum_grad(|d| {
                    for (i, (drow, grow)) in
                        d.chunks_exact_mut(c).zip(g.chunks_exact(c)).enumerate()
                    {
                        if !mask_own[i] {
                            for j in 0..c {
                                drow[j] += grow[j];
                            }
                        }
                    }
                });
                parents[1].accum_grad(|d| {
                    for (i, grow) in g.chunks_exact(c).enumerate() {
                        if mask_own[i] {
                            for j in 0..c {
                                d[j] += grow[j];
                            }
                        }
                    }
                });
            }),
        ))
    }

    /// [b*l, heads*dh] -> [b*heads, l, dh].
    pub fn split_heads(&self, batch: usize, heads: usize) -> Result<Tensor> {
        let (r, d) = self.dims2("split_heads")?;
        if r % batch != 0 || d % heads != 0 {
            return Err(MapError::Shape(format!(
                "split_heads: rows {} batch {} dim {} heads {}",
                r, batch, d, heads
            )));
        }
        let l = r / batch;
        let dh = d / heads;
        let x = self.data();
        let mut out = vec![0.0; r * d];
        for b in 0..batch {
            for t in 0..l {
                for h in 0..heads {
                    let src = &x[(b * l + t) * d + h * dh..(b * l + t) * d + (h + 1) * dh];
                    let dst_base = ((b * heads + h) * l + t) * dh;
                    out[dst_base..dst_base + dh].copy_from_slice(src);
                }
            }
        }
        drop(x);
        Ok(Tensor::from_op(
            vec![batch * heads, l, dh],
            out,
            vec![self.clone()],
            Box::new(move |g, parents| {
                parents[0].accum_grad(|dd| {
                    for b in 0..batch {
                        for t in 0..l {
                            for h in 0..heads {
                                let src_base = ((b * heads + h) * l + t) * dh;
                                let dst_base = (b * l + t) * d + h * dh;
                                for j in 0..dh {
                                    dd[dst_base + j] += g[src_base + j];
                                }
                            }
                        }
                    }
                });
            }),
        ))
    }

    /// Inverse of `split_heads`: [b*heads, l, dh] -> [b*l, heads*dh].
    pub fn merge_heads(&self, heads: usize) -> Result<Tensor> {
        let (gh, l, dh) = self.dims3("merge_heads")?;
        if gh % heads != 0 {
            return Err(MapError::Shape(format!(
                "merge_heads: groups {} heads {}",
                gh, heads
            )));
        }
        let batch = gh / heads;
        let d = heads * dh;
        let x = self.data();
        let mut out = vec![0.0; batch * l * d];
        for b in 0..batch {
            for h in 0..heads {
                for t in 0..l {
                    let src_base = ((b * heads + h) * l + t) * dh;
                    let dst_base = (b * l + t) * d + h * dh;
                    out[dst_base..dst_base + dh].copy_from_slice(&x[src_base..src_base + dh]);
                }
            }
        }
        drop(x);
        Ok(Tensor::from_op(
            vec![batch * l, d],
            out,
            vec![self.clone()],
            Box::new(move |g, parents| {
                parents[0].accum_grad(|dd| {
                    for b in 0..batch {
                        for h in 0..heads {
                            for t in 0..l {
                                let dst_base = ((b * heads + h) * l + t) * dh;
                                let src_base = (b * l + t) * d + h * dh;
                                for j in 0..dh {
                                    dd[dst_base + j] += g[src_base + j];
                                }
                            }
                        }
                    }
                });
            }),
        ))
    }

    // ── Normalization and attention ─────────────────────────────────────

    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: Real) -> Result<Tensor> {
        let (r, c) = self.dims2("layer_norm")?;
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(MapError::Shape(format!(
                "layer_norm: x {:?}, gamma {:?}, beta {:?}",
                self.shape(),
                gamma.shape(),
                beta.shape()
            )));
        }
        let x = self.to_vec();
        let mut out = vec![0.0; r * c];
        let mut xhat = vec![0.0; r * c];
        let mut rstd = vec![0.0; r];
        {
            let gm = gamma.data();
            let bt = beta.data();
            for i in 0..r {
                let row = &x[i * c..(i + 1) * c];
                let mean = row.iter().sum::<Real>() / c as Real;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<Real>() / c as Real;
                let rs = 1.0 / (var + eps).sqrt();
                rstd[i] = rs;
                for j in 0..c {
                    let xh = (row[j] - mean) * rs;
                    xhat[i * c + j] = xh;
                    out[i * c + j] = xh * gm[j] + bt[j];
                }
            }
        }
        Ok(Tensor::from_op(
            self.0.shape.clone(),
            out,
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(move |g, parents| {
                let gm = parents[1].data();
                parents[0].accum_grad(|d| {
                    for i in 0..r {
                        let grow = &g[i * c..(i + 1) * c];
                        let xh = &xhat[i * c..(i + 1) * c];
                        let mut sum_dxhat = 0.0;
                        let mut sum_dxhat_xhat = 0.0;
                        for j in 0..c {
                            let dxh = grow[j] * gm[j];
                            sum_dxhat += dxh;
                            sum_dxhat_xhat += dxh * xh[j];
                        }
                        let inv_c = 1.0 / c as Real;
                        for j in 0..c {
                            let dxh = grow[j] * gm[j];
                            d[i * c + j] += rstd[i]
                                * (dxh - inv_c * sum_dxhat - xh[j] * inv_c * sum_dxhat_xhat);
                        }
                    }
                });
                drop(gm);
                parents[1].accum_grad(|d| {
                    for i in 0..r {
                        for j in 0..c {
                            d[j] += g[i * c + j] * xhat[i * c + j];
                        }
                    }
                });
                parents[2].accum_grad(|d| {
                    for i in 0..r {
                        for j in 0..c {
                            d[j] += g[i * c + j];
                        }
                    }
                });
            }),
        ))
    }

    /// Row-wise softmax restricted to `mask` (true = allowed), disallowed
    /// entries get probability exactly zero. Accepts [l,l] logits or a
    /// batched [g,l,l]; the mask, when present, is one [l,l] pattern shared
    /// across the group dim. Stabilized by the row max over allowed entries.
    pub fn softmax_masked(&self, mask: Option<&[bool]>) -> Result<Tensor> {
        let (groups, rows, cols) = match self.shape() {
            [r, c] => (1usize, *r, *c),
            [g, r, c] => (*g, *r, *c),
            s => {
                return Err(MapError::Shape(format!(
                    "softmax_masked: expected 2-D or 3-D, got {:?}",
                    s
                )))
            }
        };
        if let Some(m) = mask {
            if m.len() != rows * cols {
                return Err(MapError::Shape(format!(
                    "softmax_masked: mask len {} vs {}x{}",
                    m.len(),
                    rows,
                    cols
                )));
            }
            for q in 0..rows {
                if !m[q * cols..(q + 1) * cols].iter().any(|&a| a) {
                    return Err(MapError::DegenerateMask(format!(
                        "query row {} has no allowed keys",
                        q
                    )));
                }
            }
        }
        let x = self.data();
        let mut out = vec![0.0; groups * rows * cols];
        for gi in 0..groups {
            for q in 0..rows {
                let base = (gi * rows + q) * cols;
                let row = &x[base..base + cols];
                let allowed =
                    |k: usize| -> bool { mask.map_or(true, |m| m[q * cols + k]) };
                let mut mx = Real::NEG_INFINITY;
                for k in 0..cols {
                    if allowed(k) && row[k] > mx {
                        mx = row[k];
                    }
                }
                let mut denom = 0.0;
                for k in 0..cols {
                    if allowed(k) {
                        let e = (row[k] - mx).exp();
                        out[base + k] = e;
                        denom += e;
                    }
                }
                for k in 0..cols {
                    out[base + k] /= denom;
                }
            }
        }
        drop(x);
        let probs = out.clone();
        Ok(Tensor::from_op(
            self.0.shape.clone(),
            out,
            vec![self.clone()],
            Box::new(move |g, parents| {
                parents[0].accum_grad(|d| {
                    for (base, _) in g.chunks_exact(cols).enumerate().map(|(i, _)| (i * cols, ())) {
                        let p = &probs[base..base + cols];
                        let gr = &g[base..base + cols];
                        let dot: Real = p.iter().zip(gr).map(|(pv, gv)| pv * gv).sum();
                        for k in 0..cols {
                            d[base + k] += p[k] * (gr[k] - dot);
                        }
                    }
                });
            }),
        ))
    }

    // ── Selective scan ──────────────────────────────────────────────────

    /// Gated selective-scan recurrence with diagonal state matrices:
    /// per channel d and state s, h_t = exp(Δ_t·A)·h_{t-1} + Δ_t·B_t·u_t and
    /// y_t = Σ_s C_t·h_t, with A = -exp(a_log) so exp(Δ·A) ∈ (0,1).
    ///
    /// Shapes: u, delta [b,l,d]; a_log [d,s]; bmat, cmat [b,l,s]. `delta`
    /// must already be positive (softplus applied by the caller).
    pub fn selective_scan(
        u: &Tensor,
        delta: &Tensor,
        a_log: &Tensor,
        bmat: &Tensor,
        cmat: &Tensor,
    ) -> Result<Tensor> {
        let (nb, l, d) = u.dims3("selective_scan u")?;
        if delta.shape() != u.shape() {
            return Err(MapError::Shape("selective_scan: delta shape".into()));
        }
        let (da, s) = a_log.dims2("selective_scan a_log")?;
        if da != d {
            return Err(MapError::Shape("selective_scan: a_log channels".into()));
        }
        if bmat.shape() != [nb, l, s] || cmat.shape() != [nb, l, s] {
            return Err(MapError::Shape("selective_scan: B/C shape".into()));
        }
        let a: Vec<Real> = a_log.data().iter().map(|v| -v.exp()).collect();
        let uv = u.to_vec();
        let dv = delta.to_vec();
        let bv = bmat.to_vec();
        let cv = cmat.to_vec();
        let mut y = vec![0.0; nb * l * d];
        // Saved for backward: per (b,t,d,s) decay factors and states.
        let mut abar = vec![0.0; nb * l * d * s];
        let mut hist = vec![0.0; nb * l * d * s];
        for b in 0..nb {
            let mut h = vec![0.0 as Real; d * s];
            for t in 0..l {
                let idx_td = (b * l + t) * d;
                let idx_ts = (b * l + t) * s;
                let brow = &bv[idx_ts..idx_ts + s];
                let crow = &cv[idx_ts..idx_ts + s];
                let save = (b * l + t) * d * s;
                let mut row_finite = true;
                for di in 0..d {
                    let dt = dv[idx_td + di];
                    let du = dt * uv[idx_td + di];
                    let hrow = &mut h[di * s..(di + 1) * s];
                    let arow = &a[di * s..(di + 1) * s];
                    let mut yv = 0.0;
                    for si in 0..s {
                        let ab = (dt * arow[si]).exp();
                        let hn = ab * hrow[si] + du * brow[si];
                        hrow[si] = hn;
                        abar[save + di * s + si] = ab;
                        hist[save + di * s + si] = hn;
                        yv += crow[si] * hn;
                    }
                    y[idx_td + di] = yv;
                    row_finite &= yv.is_finite();
                }
                if !row_finite {
                    return Err(MapError::Numeric(format!(
                        "selective_scan: non-finite state at step {}",
                        t
                    )));
                }
            }
        }
        Ok(Tensor::from_op(
            vec![nb, l, d],
            y,
            vec![
                u.clone(),
                delta.clone(),
                a_log.clone(),
                bmat.clone(),
                cmat.clone(),
            ],
            Box::new(move |g, parents| {
                let mut du_acc = vec![0.0 as Real; nb * l * d];
                let mut ddelta = vec![0.0 as Real; nb * l * d];
                let mut da = vec![0.0 as Real; d * s];
                let mut db = vec![0.0 as Real; nb * l * s];
                let mut dc = vec![0.0 as Real; nb * l * s];
                for b in 0..nb {
                    // dh carried backwards through the recurrence
                    let mut dh = vec![0.0 as Real; d * s];
                    for t in (0..l).rev() {
                        let idx_td = (b * l + t) * d;
                        let idx_ts = (b * l + t) * s;
                        let save = (b * l + t) * d * s;
                        let brow = &bv[idx_ts..idx_ts + s];
                        let crow = &cv[idx_ts..idx_ts + s];
                        for di in 0..d {
                            let gy = g[idx_td + di];
                            let dt = dv[idx_td + di];
                            let uu = uv[idx_td + di];
                            let arow = &a[di * s..(di + 1) * s];
                            let dhrow = &mut dh[di * s..(di + 1) * s];
                            let mut ddt = 0.0;
                            let mut du = 0.0;
                            for si in 0..s {
                                let hn = hist[save + di * s + si];
                                let ab = abar[save + di * s + si];
                                // y_t contribution plus carried state grad
                                let dhv = dhrow[si] + gy * crow[si];
                                dc[idx_ts + si] += gy * hn;
                                let hprev = if t == 0 {
                                    0.0
                                } else {
                                    hist[save - d * s + di * s + si]
                                };
                                let dab = dhv * hprev;
                                // abar = exp(dt * A): d/ddt = A*abar, d/dA = dt*abar
                                ddt += dab * arow[si] * ab;
                                da[di * s + si] += dab * dt * ab;
                                // input path: h += dt*u*B
                                ddt += dhv * uu * brow[si];
                                du += dhv * dt * brow[si];
                                db[idx_ts + si] += dhv * dt * uu;
                                // carry to h_{t-1}
                                dhrow[si] = dhv * ab;
                            }
                            ddelta[idx_td + di] += ddt;
                            du_acc[idx_td + di] += du;
                        }
                    }
                }
                parents[0].accum_grad(|d0| {
                    for i in 0..d0.len() {
                        d0[i] += du_acc[i];
                    }
                });
                parents[1].accum_grad(|d1| {
                    for i in 0..d1.len() {
                        d1[i] += ddelta[i];
                    }
                });
                parents[2].accum_grad(|d2| {
                    // chain through A = -exp(a_log): dA/da_log = A
                    for i in 0..d2.len() {
                        d2[i] += da[i] * a[i];
                    }
                });
                parents[3].accum_grad(|d3| {
                    for i in 0..d3.len() {
                        d3[i] += db[i];
                    }
                });
                parents[4].accum_grad(|d4| {
                    for i in 0..d4.len() {
                        d4[i] += dc[i];
                    }
                });
            }),
        ))
    }

    // ── Reductions and losses ───────────────────────────────────────────

    pub fn sum(&self) -> Tensor {
        let total: f64 = self.data().iter().map(|&v| v as f64).sum();
        Tensor::from_op(
            vec![1],
            vec![total as Real],
            vec![self.clone()],
            Box::new(|g, parents| {
                let gv = g[0];
                parents[0].accum_grad(|d| {
                    for di in d.iter_mut() {
                        *di += gv;
                    }
                });
            }),
        )
    }

    /// Mean over groups of `group` consecutive rows: [g*n, c] -> [g, c].
    pub fn mean_rows_group(&self, group: usize) -> Result<Tensor> {
        let (r, c) = self.dims2("mean_rows_group")?;
        if group == 0 || r % group != 0 {
            return Err(MapError::Shape(format!(
                "mean_rows_group: {} rows by {}",
                r, group
            )));
        }
        let g_out = r / group;
        let x = self.data();
        let mut out = vec![0.0; g_out * c];
        for gi in 0..g_out {
            for t in 0..group {
                let row = &x[(gi * group + t) * c..(gi * group + t + 1) * c];
                for j in 0..c {
                    out[gi * c + j] += row[j];
                }
            }
            for j in 0..c {
                out[gi * c + j] /= group as Real;
            }
        }
        drop(x);
        Ok(Tensor::from_op(
            vec![g_out, c],
            out,
            vec![self.clone()],
            Box::new(move |g, parents| {
                parents[0].accum_grad(|d| {
                    let inv = 1.0 / group as Real;
                    for gi in 0..g_out {
                        let grow = &g[gi * c..(gi + 1) * c];
                        for t in 0..group {
                            let drow = &mut d[(gi * group + t) * c..(gi * group + t + 1) * c];
                            for j in 0..c {
                                drow[j] += grow[j] * inv;
                            }
                        }
                    }
                });
            }),
        ))
    }

    /// Mean squared error over the rows selected by `row_mask`, averaged over
    /// selected rows and columns. Unselected rows contribute nothing and get
    /// exactly zero gradient. Zero selected rows yields a loss of exactly 0.
    pub fn masked_mse(&self, target: &[Real], row_mask: &[bool]) -> Result<Tensor> {
        let (r, c) = self.dims2("masked_mse")?;
        if target.len() != r * c || row_mask.len() != r {
            return Err(MapError::Shape(format!(
                "masked_mse: pred {:?}, target {}, mask {}",
                self.shape(),
                target.len(),
                row_mask.len()
            )));
        }
        let count = row_mask.iter().filter(|&&m| m).count();
        let mut acc = 0.0f64;
        {
            let p = self.data();
            for (i, &sel) in row_mask.iter().enumerate() {
                if sel {
                    for j in 0..c {
                        let e = (p[i * c + j] - target[i * c + j]) as f64;
                        acc += e * e;
                    }
                }
            }
        }
        let denom = (count * c).max(1) as f64;
        let loss = (acc / denom) as Real;
        let target_own = target.to_vec();
        let mask_own = row_mask.to_vec();
        Ok(Tensor::from_op(
            vec![1],
            vec![loss],
            vec![self.clone()],
            Box::new(move |g, parents| {
                let gv = g[0];
                let p = parents[0].data();
                let scale = 2.0 / denom as Real;
                parents[0].accum_grad(|d| {
                    for (i, &sel) in mask_own.iter().enumerate() {
                        if sel {
                            for j in 0..c {
                                d[i * c + j] +=
                                    gv * scale * (p[i * c + j] - target_own[i * c + j]);
                            }
                        }
                    }
                });
            }),
        ))
    }

    /// Mean cross-entropy from logits [b,k] against integer labels.
    pub fn cross_entropy(&self, labels: &[usize]) -> Result<Tensor> {
        let (b, k) = self.dims2("cross_entropy")?;
        if labels.len() != b {
            return Err(MapError::Shape(format!(
                "cross_entropy: {} logits rows vs {} labels",
                b,
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(MapError::Contract(format!(
                "cross_entropy: label {} out of {} classes",
                bad, k
            )));
        }
        let x = self.data();
        let mut probs = vec![0.0; b * k];
        let mut acc = 0.0f64;
        for i in 0..b {
            let row = &x[i * k..(i + 1) * k];
            let mx = row.iter().cloned().fold(Real::NEG_INFINITY, Real::max);
            let mut denom = 0.0;
            for j in 0..k {
                let e = (row[j] - mx).exp();
                probs[i * k + j] = e;
                denom += e;
            }
            for j in 0..k {
                probs[i * k + j] /= denom;
            }
            acc -= (probs[i * k + labels[i]].max(1e-30) as f64).ln();
        }
        drop(x);
        let loss = (acc / b as f64) as Real;
        let labels_own = labels.to_vec();
        Ok(Tensor::from_op(
            vec![1],
            vec![loss],
            vec![self.clone()],
            Box::new(move |g, parents| {
                let gv = g[0];
                parents[0].accum_grad(|d| {
                    let inv_b = 1.0 / b as Real;
                    for i in 0..b {
                        for j in 0..k {
                            let onehot = if j == labels_own[i] { 1.0 } else { 0.0 };
                            d[i * k + j] += gv * inv_b * (probs[i * k + j] - onehot);
                        }
                    }
                });
            }),
        ))
    }

    // ── Shape helpers ───────────────────────────────────────────────────

    fn dims2(&self, what: &str) -> Result<(usize, usize)> {
        match self.shape() {
            [r, c] => Ok((*r, *c)),
            s => Err(MapError::Shape(format!("{}: expected 2-D, got {:?}", what, s))),
        }
    }

    fn dims3(&self, what: &str) -> Result<(usize, usize, usize)> {
        match self.shape() {
            [a, b, c] => Ok((*a, *b, *c)),
            s => Err(MapError::Shape(format!("{}: expected 3-D, got {:?}", what, s))),
        }
    }

    /// Reinterpret the buffer with a new shape of equal element count.
    /// Pure metadata; gradients pass through unchanged.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(MapError::Shape(format!(
                "reshape: {:?} -> {:?}",
                self.shape(),
                shape
            )));
        }
        Ok(Tensor::from_op(
            shape.to_vec(),
            self.to_vec(),
            vec![self.clone()],
            Box::new(|g, parents| {
                parents[0].accum_grad(|d| {
                    for i in 0..d.len() {
                        d[i] += g[i];
                    }
                });
            }),
        ))
    }
}

fn sigmoid(x: Real) -> Real {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: Real = 0.797_884_56; // sqrt(2/pi)

fn gelu_fwd(x: Real) -> Real {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: Real) -> Real {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let dinner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
}

// ── Matmul kernels (also used by op backward passes) ────────────────────

/// out[m,n] += a[m,k] · b[k,n]
#[cfg(not(feature = "f64"))]
use matrixmultiply::sgemm as gemm;
#[cfg(feature = "f64")]
use matrixmultiply::dgemm as gemm;

/// out[m,n] += a · b with explicit row/column strides for each operand.
#[allow(clippy::too_many_arguments)]
fn gemm_acc(
    a: &[Real],
    rsa: isize,
    csa: isize,
    b: &[Real],
    rsb: isize,
    csb: isize,
    m: usize,
    k: usize,
    n: usize,
    out: &mut [Real],
) {
    debug_assert!(out.len() >= m * n);
    // safety: strides describe in-bounds [m,k] / [k,n] / [m,n] layouts
    unsafe {
        gemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            1.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// out[m,n] += a[m,k] · b[k,n]
pub(crate) fn mm_nn_acc(a: &[Real], b: &[Real], m: usize, k: usize, n: usize, out: &mut [Real]) {
    gemm_acc(a, k as isize, 1, b, n as isize, 1, m, k, n, out);
}

/// out[m,n] += a[m,k] · b[n,k]^T
pub(crate) fn mm_nt_acc(a: &[Real], b: &[Real], m: usize, k: usize, n: usize, out: &mut [Real]) {
    gemm_acc(a, k as isize, 1, b, 1, k as isize, m, k, n, out);
}

/// out[k,n] += a[m,k]^T · b[m,n]
pub(crate) fn mm_tn_acc(a: &[Real], b: &[Real], m: usize, k: usize, n: usize, out: &mut [Real]) {
    gemm_acc(a, 1, k as isize, b, n as isize, 1, k, m, n, out);
}
