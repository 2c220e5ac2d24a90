use super::kernels::{gemm_nn, gemm_nt, gemm_tn};
use super::{gelu, gelu_grad, matmul_dims, Real, Tensor};
use crate::error::{Error, Result};
use std::cell::{Ref, RefCell};
use std::rc::Rc;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<F> {
    Leaf,
    MatMul(usize, usize),
    AddBias(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, F),
    Sum(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        // (mean, rstd) per row
        stats: Vec<F>,
    },
    Gelu(usize),
    SplitHeads {
        x: usize,
        batch: usize,
        seq: usize,
        heads: usize,
    },
    MergeHeads {
        x: usize,
        batch: usize,
        seq: usize,
        heads: usize,
    },
    BatchMatMul {
        a: usize,
        b: usize,
        groups: usize,
        m: usize,
        k: usize,
        n: usize,
        transpose_b: bool,
    },
    MaskedSoftmax(usize),
    Concat {
        parts: Vec<usize>,
        groups: usize,
        width: usize,
    },
    Gather {
        x: usize,
        rows: Rc<[usize]>,
    },
    Reshape(usize),
}

struct Node<F> {
    shape: Vec<usize>,
    value: Vec<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Records primitive applications in topological order.
///
/// Every op appends one node whose inputs are already on the tape, so
/// reverse iteration visits each node exactly once after all of its
/// consumers.
pub struct Tape<F> {
    nodes: RefCell<Vec<Node<F>>>,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, shape: Vec<usize>, value: Vec<F>, op: Op<F>, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    /// A leaf that receives a gradient.
    pub fn param(&self, t: Tensor<F>) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, true)
    }

    /// A leaf excluded from differentiation.
    pub fn constant(&self, t: Tensor<F>) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, false)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].shape.clone()
    }

    pub fn value(&self, v: Var) -> Ref<'_, [F]> {
        Ref::map(self.nodes.borrow(), |n| n[v.0].value.as_slice())
    }

    pub fn tensor(&self, v: Var) -> Tensor<F> {
        let nodes = self.nodes.borrow();
        Tensor::new(&nodes[v.0].shape, nodes[v.0].value.clone()).expect("node shape")
    }

    fn rg(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (shape, out) = {
            let nodes = self.nodes.borrow();
            let (na, nb) = (&nodes[a.0], &nodes[b.0]);
            let (m, k, n) = matmul_dims(&na.shape, &nb.shape)?;
            let mut out = vec![F::zero(); m * n];
            gemm_nn(&na.value, &nb.value, &mut out, m, k, n);
            (vec![m, n], out)
        };
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(shape, out, Op::MatMul(a.0, b.0), rg))
    }

    /// `a[m×n] + bias[n]` broadcast over rows.
    pub fn add_bias(&self, a: Var, bias: Var) -> Result<Var> {
        let (shape, out) = {
            let nodes = self.nodes.borrow();
            let (na, nb) = (&nodes[a.0], &nodes[bias.0]);
            let n = nb.value.len();
            if na.shape.last() != Some(&n) || nb.shape.len() != 1 {
                return Err(shape_err("add_bias", &na.shape, &nb.shape));
            }
            let mut out = na.value.clone();
            for row in out.chunks_exact_mut(n) {
                for (o, &b) in row.iter_mut().zip(&nb.value) {
                    *o += b;
                }
            }
            (na.shape.clone(), out)
        };
        let rg = self.rg(&[a.0, bias.0]);
        Ok(self.push(shape, out, Op::AddBias(a.0, bias.0), rg))
    }

    fn binary(&self, a: Var, b: Var, name: &'static str, f: impl Fn(F, F) -> F) -> Result<(Vec<usize>, Vec<F>)> {
        let nodes = self.nodes.borrow();
        let (na, nb) = (&nodes[a.0], &nodes[b.0]);
        if na.shape != nb.shape {
            return Err(shape_err(name, &na.shape, &nb.shape));
        }
        let out = na.value.iter().zip(&nb.value).map(|(&x, &y)| f(x, y)).collect();
        Ok((na.shape.clone(), out))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let (shape, out) = self.binary(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(shape, out, Op::Add(a.0, b.0), rg))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let (shape, out) = self.binary(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(shape, out, Op::Sub(a.0, b.0), rg))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let (shape, out) = self.binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(shape, out, Op::Mul(a.0, b.0), rg))
    }

    pub fn scale(&self, a: Var, s: F) -> Var {
        let (shape, out) = {
            let nodes = self.nodes.borrow();
            let na = &nodes[a.0];
            (na.shape.clone(), na.value.iter().map(|&v| v * s).collect())
        };
        let rg = self.rg(&[a.0]);
        self.push(shape, out, Op::Scale(a.0, s), rg)
    }

    pub fn sum(&self, a: Var) -> Var {
        let total = self.nodes.borrow()[a.0].value.iter().copied().sum();
        let rg = self.rg(&[a.0]);
        self.push(vec![1], vec![total], Op::Sum(a.0), rg)
    }

    /// Sum of squared entries.
    pub fn sum_squares(&self, a: Var) -> Result<Var> {
        let sq = self.mul(a, a)?;
        Ok(self.sum(sq))
    }

    /// Layer norm over the last axis with `eps = 1e-5`.
    pub fn layer_norm(&self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let eps = F::of(super::LAYER_NORM_EPS);
        let (shape, out, stats) = {
            let nodes = self.nodes.borrow();
            let (nx, ng, nb) = (&nodes[x.0], &nodes[gain.0], &nodes[bias.0]);
            let d = ng.value.len();
            if nx.shape.last() != Some(&d) || nb.value.len() != d {
                return Err(shape_err("layer_norm", &nx.shape, &ng.shape));
            }
            let rows = nx.value.len() / d;
            let inv_d = F::of(1.0 / d as f64);
            let mut out = vec![F::zero(); nx.value.len()];
            let mut stats = Vec::with_capacity(2 * rows);
            for (src, dst) in nx.value.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
                let mean = src.iter().copied().sum::<F>() * inv_d;
                let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_d;
                let rstd = (var + eps).sqrt().recip();
                for i in 0..d {
                    dst[i] = (src[i] - mean) * rstd * ng.value[i] + nb.value[i];
                }
                stats.push(mean);
                stats.push(rstd);
            }
            (nx.shape.clone(), out, stats)
        };
        let rg = self.rg(&[x.0, gain.0, bias.0]);
        Ok(self.push(
            shape,
            out,
            Op::LayerNorm {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
                stats,
            },
            rg,
        ))
    }

    pub fn gelu(&self, x: Var) -> Var {
        let (shape, out) = {
            let nodes = self.nodes.borrow();
            let nx = &nodes[x.0];
            (nx.shape.clone(), nx.value.iter().map(|&v| gelu(v)).collect())
        };
        let rg = self.rg(&[x.0]);
        self.push(shape, out, Op::Gelu(x.0), rg)
    }

    /// `[batch·seq, heads·dh]` → `[batch·heads, seq, dh]`.
    pub fn split_heads(&self, x: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let (shape, out) = {
            let nodes = self.nodes.borrow();
            let nx = &nodes[x.0];
            let width = *nx.shape.last().unwrap_or(&0);
            if nx.shape.len() != 2 || nx.shape[0] != batch * seq || width % heads != 0 {
                return Err(shape_err("split_heads", &nx.shape, &[batch, seq, heads]));
            }
            let dh = width / heads;
            let mut out = vec![F::zero(); nx.value.len()];
            for b in 0..batch {
                for s in 0..seq {
                    let src = &nx.value[(b * seq + s) * width..][..width];
                    for h in 0..heads {
                        out[((b * heads + h) * seq + s) * dh..][..dh]
                            .copy_from_slice(&src[h * dh..(h + 1) * dh]);
                    }
                }
            }
            (vec![batch * heads, seq, dh], out)
        };
        let rg = self.rg(&[x.0]);
        Ok(self.push(
            shape,
            out,
            Op::SplitHeads {
                x: x.0,
                batch,
                seq,
                heads,
            },
            rg,
        ))
    }

    /// Inverse of [`Tape::split_heads`].
    pub fn merge_heads(&self, x: Var, batch: usize, heads: usize) -> Result<Var> {
        let (shape, out, seq) = {
            let nodes = self.nodes.borrow();
            let nx = &nodes[x.0];
            if nx.shape.len() != 3 || nx.shape[0] != batch * heads {
                return Err(shape_err("merge_heads", &nx.shape, &[batch, heads]));
            }
            let (seq, dh) = (nx.shape[1], nx.shape[2]);
            let width = heads * dh;
            let mut out = vec![F::zero(); nx.value.len()];
            for b in 0..batch {
                for s in 0..seq {
                    let dst = &mut out[(b * seq + s) * width..][..width];
                    for h in 0..heads {
                        dst[h * dh..(h + 1) * dh]
                            .copy_from_slice(&nx.value[((b * heads + h) * seq + s) * dh..][..dh]);
                    }
                }
            }
            (vec![batch * seq, width], out, seq)
        };
        let rg = self.rg(&[x.0]);
        Ok(self.push(
            shape,
            out,
            Op::MergeHeads {
                x: x.0,
                batch,
                seq,
                heads,
            },
            rg,
        ))
    }

    /// Per-group product of `a[G×m×k]` with `b[G×k×n]`, or with
    /// `b[G×n×k]ᵀ` when `transpose_b` is set.
    pub fn batch_matmul(&self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let (shape, out, dims) = {
            let nodes = self.nodes.borrow();
            let (na, nb) = (&nodes[a.0], &nodes[b.0]);
            let bad = || shape_err("batch_matmul", &na.shape, &nb.shape);
            let (&[g, m, k], &[g2, b1, b2]) = (na.shape.as_slice(), nb.shape.as_slice()) else {
                return Err(bad());
            };
            let (kb, n) = if transpose_b { (b2, b1) } else { (b1, b2) };
            if g != g2 || k != kb {
                return Err(bad());
            }
            let mut out = vec![F::zero(); g * m * n];
            for gi in 0..g {
                let av = &na.value[gi * m * k..][..m * k];
                let bv = &nb.value[gi * k * n..][..k * n];
                let cv = &mut out[gi * m * n..][..m * n];
                if transpose_b {
                    gemm_nt(av, bv, cv, m, k, n);
                } else {
                    gemm_nn(av, bv, cv, m, k, n);
                }
            }
            (vec![g, m, n], out, (g, m, k, n))
        };
        let rg = self.rg(&[a.0, b.0]);
        let (groups, m, k, n) = dims;
        Ok(self.push(
            shape,
            out,
            Op::BatchMatMul {
                a: a.0,
                b: b.0,
                groups,
                m,
                k,
                n,
                transpose_b,
            },
            rg,
        ))
    }

    /// Softmax over the last axis of `x[..×m×n]` after adding `mask[m×n]`
    /// (entries `0` or `-inf`), broadcast over leading axes.
    pub fn masked_softmax(&self, x: Var, mask: Var) -> Result<Var> {
        let (shape, out) = {
            let nodes = self.nodes.borrow();
            let (nx, nm) = (&nodes[x.0], &nodes[mask.0]);
            let r = nx.shape.len();
            if r < 2 || nm.shape.len() != 2 || nx.shape[r - 2..] != nm.shape[..] {
                return Err(shape_err("masked_softmax", &nx.shape, &nm.shape));
            }
            let mut out = vec![F::zero(); nx.value.len()];
            super::masked_softmax(&nx.value, &nm.value, nm.shape[1], &mut out)?;
            (nx.shape.clone(), out)
        };
        let rg = self.rg(&[x.0]);
        Ok(self.push(shape, out, Op::MaskedSoftmax(x.0), rg))
    }

    /// Concatenate `[G×nᵢ×c]` parts along the middle axis. Rank-2 inputs
    /// `[nᵢ×c]` are treated as a single group.
    pub fn concat(&self, parts: &[Var]) -> Result<Var> {
        let (shape, out, groups, width) = {
            let nodes = self.nodes.borrow();
            let first = &nodes[parts.first().ok_or_else(|| shape_err("concat", &[], &[]))?.0];
            let rank = first.shape.len();
            let (groups, width) = match first.shape.as_slice() {
                [_, c] => (1, *c),
                [g, _, c] => (*g, *c),
                s => return Err(shape_err("concat", s, &[])),
            };
            let mut total = 0;
            for p in parts {
                let s = &nodes[p.0].shape;
                let ok = s.len() == rank && s[rank - 1] == width && (rank == 2 || s[0] == groups);
                if !ok {
                    return Err(shape_err("concat", &first.shape, s));
                }
                total += s[rank - 2];
            }
            let mut out = Vec::with_capacity(groups * total * width);
            for g in 0..groups {
                for p in parts {
                    let np = &nodes[p.0];
                    let rows = np.shape[rank - 2];
                    out.extend_from_slice(&np.value[g * rows * width..][..rows * width]);
                }
            }
            let shape = if rank == 2 {
                vec![total, width]
            } else {
                vec![groups, total, width]
            };
            (shape, out, groups, width)
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let rg = self.rg(&ids);
        Ok(self.push(
            shape,
            out,
            Op::Concat {
                parts: ids,
                groups,
                width,
            },
            rg,
        ))
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let nx = &nodes[x.0];
            if shape.iter().product::<usize>() != nx.value.len() {
                return Err(shape_err("reshape", &nx.shape, shape));
            }
            nx.value.clone()
        };
        let rg = self.rg(&[x.0]);
        Ok(self.push(shape.to_vec(), out, Op::Reshape(x.0), rg))
    }

    /// Select rows of a rank-2 tensor; rows may repeat.
    pub fn gather_rows(&self, x: Var, rows: &[usize]) -> Result<Var> {
        let (shape, out) = {
            let nodes = self.nodes.borrow();
            let nx = &nodes[x.0];
            let [r, c] = nx.shape[..] else {
                return Err(shape_err("gather_rows", &nx.shape, &[rows.len()]));
            };
            if rows.is_empty() || rows.iter().any(|&i| i >= r) {
                return Err(shape_err("gather_rows", &nx.shape, &[rows.len()]));
            }
            let mut out = Vec::with_capacity(rows.len() * c);
            for &i in rows {
                out.extend_from_slice(&nx.value[i * c..(i + 1) * c]);
            }
            (vec![rows.len(), c], out)
        };
        let rg = self.rg(&[x.0]);
        Ok(self.push(
            shape,
            out,
            Op::Gather {
                x: x.0,
                rows: rows.into(),
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`. Gradients accumulate additively
    /// over every use of a node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        let nodes = self.nodes.borrow();
        if nodes[loss.0].value.len() != 1 {
            return Err(Error::NonScalarLoss(nodes[loss.0].shape.clone()));
        }
        let mut grads: Vec<Option<Vec<F>>> = Vec::new();
        grads.resize_with(nodes.len(), || None);
        grads[loss.0] = Some(vec![F::one()]);

        for id in (0..=loss.0).rev() {
            let node = &nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop(&nodes, node, &g, &mut grads);
        }

        let leaves = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| match nodes[i].op {
                Op::Leaf if nodes[i].requires_grad => g,
                _ => None,
            })
            .collect();
        Ok(Gradients { grads: leaves })
    }
}

fn acc<'a, F: Real>(
    nodes: &[Node<F>],
    grads: &'a mut [Option<Vec<F>>],
    id: usize,
) -> Option<&'a mut Vec<F>> {
    if !nodes[id].requires_grad {
        return None;
    }
    let len = nodes[id].value.len();
    Some(grads[id].get_or_insert_with(|| vec![F::zero(); len]))
}

fn backprop<F: Real>(nodes: &[Node<F>], node: &Node<F>, g: &[F], grads: &mut [Option<Vec<F>>]) {
    let op = &node.op;
    match *op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = (nodes[a].shape[0], nodes[a].shape[1]);
            let n = nodes[b].shape[1];
            if let Some(ga) = acc(nodes, grads, a) {
                gemm_nt(g, &nodes[b].value, ga, m, n, k);
            }
            if let Some(gb) = acc(nodes, grads, b) {
                gemm_tn(&nodes[a].value, g, gb, m, k, n);
            }
        }
        Op::AddBias(a, bias) => {
            if let Some(ga) = acc(nodes, grads, a) {
                for (x, &y) in ga.iter_mut().zip(g) {
                    *x += y;
                }
            }
            if let Some(gb) = acc(nodes, grads, bias) {
                let n = gb.len();
                for row in g.chunks_exact(n) {
                    for (x, &y) in gb.iter_mut().zip(row) {
                        *x += y;
                    }
                }
            }
        }
        Op::Add(a, b) | Op::Sub(a, b) => {
            let sign = if matches!(op, Op::Sub(..)) { -F::one() } else { F::one() };
            if let Some(ga) = acc(nodes, grads, a) {
                for (x, &y) in ga.iter_mut().zip(g) {
                    *x += y;
                }
            }
            if let Some(gb) = acc(nodes, grads, b) {
                for (x, &y) in gb.iter_mut().zip(g) {
                    *x += sign * y;
                }
            }
        }
        Op::Mul(a, b) => {
            if let Some(ga) = acc(nodes, grads, a) {
                for ((x, &y), &bv) in ga.iter_mut().zip(g).zip(&nodes[b].value) {
                    *x += y * bv;
                }
            }
            if let Some(gb) = acc(nodes, grads, b) {
                for ((x, &y), &av) in gb.iter_mut().zip(g).zip(&nodes[a].value) {
                    *x += y * av;
                }
            }
        }
        Op::Scale(a, s) => {
            if let Some(ga) = acc(nodes, grads, a) {
                for (x, &y) in ga.iter_mut().zip(g) {
                    *x += y * s;
                }
            }
        }
        Op::Sum(a) => {
            if let Some(ga) = acc(nodes, grads, a) {
                for x in ga.iter_mut() {
                    *x += g[0];
                }
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            ref stats,
        } => {
            let d = nodes[gain].value.len();
            let xv = &nodes[x].value;
            let gv = &nodes[gain].value;
            let inv_d = F::of(1.0 / d as f64);
            let mut xhat = vec![F::zero(); d];
            let mut dxhat = vec![F::zero(); d];
            let mut dgain = vec![F::zero(); d];
            let mut dbias = vec![F::zero(); d];
            let need_x = nodes[x].requires_grad;
            let mut gx = if need_x { Some(vec![F::zero(); xv.len()]) } else { None };
            for (row, (src, gy)) in xv.chunks_exact(d).zip(g.chunks_exact(d)).enumerate() {
                let (mean, rstd) = (stats[2 * row], stats[2 * row + 1]);
                for i in 0..d {
                    xhat[i] = (src[i] - mean) * rstd;
                    dgain[i] += gy[i] * xhat[i];
                    dbias[i] += gy[i];
                    dxhat[i] = gy[i] * gv[i];
                }
                if let Some(gx) = gx.as_mut() {
                    let m1 = dxhat.iter().copied().sum::<F>() * inv_d;
                    let m2 = dxhat.iter().zip(&xhat).map(|(&a, &b)| a * b).sum::<F>() * inv_d;
                    let dst = &mut gx[row * d..(row + 1) * d];
                    for i in 0..d {
                        dst[i] = rstd * (dxhat[i] - m1 - xhat[i] * m2);
                    }
                }
            }
            if let (Some(src), Some(dst)) = (gx, acc(nodes, grads, x)) {
                for (a, b) in dst.iter_mut().zip(src) {
                    *a += b;
                }
            }
            if let Some(dst) = acc(nodes, grads, gain) {
                for (a, b) in dst.iter_mut().zip(&dgain) {
                    *a += *b;
                }
            }
            if let Some(dst) = acc(nodes, grads, bias) {
                for (a, b) in dst.iter_mut().zip(&dbias) {
                    *a += *b;
                }
            }
        }
        Op::Gelu(a) => {
            if let Some(ga) = acc(nodes, grads, a) {
                for ((x, &y), &v) in ga.iter_mut().zip(g).zip(&nodes[a].value) {
                    *x += y * gelu_grad(v);
                }
            }
        }
        Op::SplitHeads {
            x,
            batch,
            seq,
            heads,
        } => {
            if let Some(gx) = acc(nodes, grads, x) {
                let width = gx.len() / (batch * seq);
                let dh = width / heads;
                for b in 0..batch {
                    for s in 0..seq {
                        let dst = &mut gx[(b * seq + s) * width..][..width];
                        for h in 0..heads {
                            let src = &g[((b * heads + h) * seq + s) * dh..][..dh];
                            for (a, &v) in dst[h * dh..(h + 1) * dh].iter_mut().zip(src) {
                                *a += v;
                            }
                        }
                    }
                }
            }
        }
        Op::MergeHeads {
            x,
            batch,
            seq,
            heads,
        } => {
            if let Some(gx) = acc(nodes, grads, x) {
                let width = gx.len() / (batch * seq);
                let dh = width / heads;
                for b in 0..batch {
                    for s in 0..seq {
                        let src = &g[(b * seq + s) * width..][..width];
                        for h in 0..heads {
                            let dst = &mut gx[((b * heads + h) * seq + s) * dh..][..dh];
                            for (a, &v) in dst.iter_mut().zip(&src[h * dh..(h + 1) * dh]) {
                                *a += v;
                            }
                        }
                    }
                }
            }
        }
        Op::BatchMatMul {
            a,
            b,
            groups,
            m,
            k,
            n,
            transpose_b,
        } => {
            let (av, bv) = (&nodes[a].value, &nodes[b].value);
            if let Some(ga) = acc(nodes, grads, a) {
                for gi in 0..groups {
                    let gg = &g[gi * m * n..][..m * n];
                    let bb = &bv[gi * k * n..][..k * n];
                    let dst = &mut ga[gi * m * k..][..m * k];
                    if transpose_b {
                        gemm_nn(gg, bb, dst, m, n, k);
                    } else {
                        gemm_nt(gg, bb, dst, m, n, k);
                    }
                }
            }
            if let Some(gb) = acc(nodes, grads, b) {
                for gi in 0..groups {
                    let gg = &g[gi * m * n..][..m * n];
                    let aa = &av[gi * m * k..][..m * k];
                    let dst = &mut gb[gi * k * n..][..k * n];
                    if transpose_b {
                        gemm_tn(gg, aa, dst, m, n, k);
                    } else {
                        gemm_tn(aa, gg, dst, m, k, n);
                    }
                }
            }
        }
        Op::MaskedSoftmax(x) => {
            if let Some(gx) = acc(nodes, grads, x) {
                let n = *nodes[x].shape.last().unwrap();
                // dx = y * (g - <g, y>)
                let y = &node.value;
                for ((dst, yr), gr) in gx.chunks_exact_mut(n).zip(y.chunks_exact(n)).zip(g.chunks_exact(n)) {
                    let inner: F = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for i in 0..n {
                        dst[i] += yr[i] * (gr[i] - inner);
                    }
                }
            }
        }
        Op::Concat {
            ref parts,
            groups,
            width,
        } => {
            let total = g.len() / (groups * width);
            let mut offset = 0;
            for &p in parts {
                let rows = nodes[p].value.len() / (groups * width);
                if let Some(gp) = acc(nodes, grads, p) {
                    for gi in 0..groups {
                        let src = &g[(gi * total + offset) * width..][..rows * width];
                        let dst = &mut gp[gi * rows * width..][..rows * width];
                        for (a, &v) in dst.iter_mut().zip(src) {
                            *a += v;
                        }
                    }
                }
                offset += rows;
            }
        }
        Op::Reshape(x) => {
            if let Some(gx) = acc(nodes, grads, x) {
                for (a, &v) in gx.iter_mut().zip(g) {
                    *a += v;
                }
            }
        }
        Op::Gather { x, ref rows } => {
            if let Some(gx) = acc(nodes, grads, x) {
                let c = nodes[x].shape[1];
                for (r, &i) in rows.iter().enumerate() {
                    for (a, &v) in gx[i * c..(i + 1) * c].iter_mut().zip(&g[r * c..(r + 1) * c]) {
                        *a += v;
                    }
                }
            }
        }
    }
}

/// Gradients of the requires-grad leaves of one backward sweep.
pub struct Gradients<F> {
    grads: Vec<Option<Vec<F>>>,
}

impl<F: Real> Gradients<F> {
    /// Gradient of a leaf, or `None` if the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&[F]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<F>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn square_gradient() {
        let tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0f64));
        let loss = tape.mul(x, x).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap(), &[6.0]);
    }

    #[test]
    fn reuse_accumulates() {
        let tape = Tape::new();
        let x = tape.param(Tensor::scalar(1.0f64));
        let loss = tape.add(x, x).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap(), &[2.0]);

        let tape = Tape::new();
        let x = tape.param(Tensor::scalar(0.37f64));
        let mut acc = x;
        for _ in 0..6 {
            acc = tape.add(acc, x).unwrap();
        }
        let g = tape.backward(acc).unwrap();
        assert_eq!(g.get(x).unwrap(), &[7.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn constants_get_no_gradient() {
        let tape = Tape::new();
        let x = tape.param(Tensor::scalar(2.0f64));
        let c = tape.constant(Tensor::scalar(5.0));
        let loss = tape.mul(x, c).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap(), &[5.0]);
        assert!(g.get(c).is_none());
    }

    #[test]
    fn split_merge_roundtrip() {
        let tape = Tape::new();
        let data: Vec<f64> = (0..48).map(f64::from).collect();
        let x = tape.constant(t(&[6, 8], &data));
        let s = tape.split_heads(x, 2, 3, 4).unwrap();
        assert_eq!(tape.shape(s), vec![8, 3, 2]);
        // batch 1, head 2, seq 0 holds columns 4..6 of row 3
        assert_eq!(tape.value(s)[((4 + 2) * 3) * 2], 3.0 * 8.0 + 4.0);
        let m = tape.merge_heads(s, 2, 4).unwrap();
        assert_eq!(&*tape.value(m), data.as_slice());
    }

    #[test]
    fn concat_and_gather_shapes() {
        let tape = Tape::new();
        let a = tape.constant(t(&[2, 1, 2], &[1., 2., 3., 4.]));
        let b = tape.constant(t(&[2, 2, 2], &[5., 6., 7., 8., 9., 10., 11., 12.]));
        let c = tape.concat(&[a, b]).unwrap();
        assert_eq!(tape.shape(c), vec![2, 3, 2]);
        assert_eq!(&*tape.value(c), &[1., 2., 5., 6., 7., 8., 3., 4., 9., 10., 11., 12.]);
        let r = tape.constant(t(&[3, 2], &[1., 2., 3., 4., 5., 6.]));
        let gth = tape.gather_rows(r, &[2, 0, 2]).unwrap();
        assert_eq!(&*tape.value(gth), &[5., 6., 1., 2., 5., 6.]);
        assert!(tape.gather_rows(r, &[3]).is_err());
    }

    #[test]
    fn matmul_shape_mismatch_reports_shapes() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::<f64>::zeros(&[2, 3]));
        let b = tape.constant(Tensor::<f64>::zeros(&[4, 2]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 2]"), "{err}");
    }
}
