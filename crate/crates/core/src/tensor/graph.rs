use super::kernels::{gelu, gelu_grad, gemm_acc, transpose};
use super::{ParamId, ParamStore, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
    },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow {
        x: usize,
        row: usize,
    },
    Scale {
        x: usize,
        c: T,
    },
    Gelu(usize),
    Softmax(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    SumAll(usize),
    MeanAll(usize),
    MeanLast(usize),
    MeanTokens {
        x: usize,
        n: usize,
    },
    Mse(usize, usize),
    CosineScores {
        x: usize,
        n: usize,
        eps: T,
    },
    EuclideanScores {
        x: usize,
        n: usize,
    },
    GatherRows {
        x: usize,
        idx: Vec<usize>,
    },
    ConcatRows(usize, usize),
    Reshape(usize),
    Transpose(usize),
    SplitHeads {
        x: usize,
        n: usize,
        heads: usize,
    },
    MergeHeads {
        x: usize,
        n: usize,
        heads: usize,
    },
    WeightedSum {
        xs: Vec<usize>,
        w: usize,
    },
    CrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Operation tape for one forward/backward pass.
///
/// Gradient accumulation semantics: [`Graph::backward`] returns fresh
/// gradients; [`Gradients::accumulate_into`] adds them to the store, so
/// repeated backward passes sum until [`ParamStore::zero_grads`] is called.
#[derive(Debug, Clone, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Result of a backward pass: one optional gradient per node.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of every parameter leaf into `store`.
    pub fn accumulate_into(&self, graph: &Graph<T>, store: &mut ParamStore<T>) -> Result<()> {
        for (i, node) in graph.nodes.iter().enumerate() {
            if let (Some(pid), Some(g)) = (node.param, &self.grads[i]) {
                store.accumulate_grad(pid, g)?;
            }
        }
        Ok(())
    }
}

fn check_same(op: &str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::shape(format!("{op}: shapes {a:?} and {b:?} differ")));
    }
    Ok(())
}

fn add_into<T: Real>(slot: &mut Option<Vec<T>>, contrib: Vec<T>) {
    match slot {
        Some(g) => {
            for (a, b) in g.iter_mut().zip(contrib) {
                *a += b;
            }
        }
        None => *slot = Some(contrib),
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Leaf holding `value`; differentiable when `requires_grad`.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Loads a parameter; its gradient flows back to the store.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let p = store.get(id);
        let v = self.leaf(p.value.clone(), p.requires_grad);
        self.nodes[v.0].param = Some(id);
        v
    }

    /// Loads a parameter as a constant: no gradient is recorded for it.
    pub fn param_frozen(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.constant(store.value(id).clone())
    }

    /// Copy of `x` that blocks gradient flow.
    pub fn detach(&mut self, x: Var) -> Var {
        let v = self.nodes[x.0].value.clone();
        self.constant(v)
    }

    /// `a · b` for 2-D `[m×k]·[k×n]` or batched 3-D `[B×m×k]·[B×k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` with `b` stored `[n×k]` (or `[B×n×k]`).
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let mismatch = || {
            Error::shape(format!(
                "matmul{}: incompatible shapes {sa:?} and {sb:?}",
                if trans_b { "_nt" } else { "" }
            ))
        };
        let (batch, m, k, kb, n) = match (sa.len(), sb.len()) {
            (2, 2) => {
                let (kb, n) = if trans_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
                (1, sa[0], sa[1], kb, n)
            }
            (3, 3) if sa[0] == sb[0] => {
                let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
                (sa[0], sa[1], sa[2], kb, n)
            }
            _ => return Err(mismatch()),
        };
        if k != kb {
            return Err(mismatch());
        }
        let mut out = vec![T::zero(); batch * m * n];
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            for bi in 0..batch {
                gemm_acc(
                    m,
                    k,
                    n,
                    &av[bi * m * k..(bi + 1) * m * k],
                    false,
                    &bv[bi * k * n..(bi + 1) * k * n],
                    trans_b,
                    &mut out[bi * m * n..(bi + 1) * m * n],
                );
            }
        }
        let shape = if sa.len() == 2 {
            vec![m, n]
        } else {
            vec![batch, m, n]
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::from_vec(&shape, out)?,
            Op::MatMul {
                a: a.0,
                b: b.0,
                batch,
                m,
                k,
                n,
                trans_b,
            },
            rg,
        ))
    }

    fn zip_op(&mut self, name: &str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        check_same(name, self.shape(a), self.shape(b))?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::from_vec(self.shape(a), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_op("add", a, b, |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a.0, b.0), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_op("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Sub(a.0, b.0), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_op("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul(a.0, b.0), rg))
    }

    /// Adds a length-`d` row vector to every row of `x` (last dim `d`).
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.value(row).len() != d {
            return Err(Error::shape(format!(
                "add_row: row of {} elements for last dim {d}",
                self.value(row).len()
            )));
        }
        let r = self.value(row).data().to_vec();
        let mut t = self.value(x).clone();
        for chunk in t.data_mut().chunks_mut(d) {
            for (a, &b) in chunk.iter_mut().zip(&r) {
                *a += b;
            }
        }
        let rg = self.rg(x) || self.rg(row);
        Ok(self.push(t, Op::AddRow { x: x.0, row: row.0 }, rg))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let mut t = self.value(x).clone();
        t.data_mut().iter_mut().for_each(|v| *v *= c);
        let rg = self.rg(x);
        self.push(t, Op::Scale { x: x.0, c }, rg)
    }

    /// Tanh-approximation GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|&z| gelu(z)).collect();
        let t = Tensor::from_vec(v.shape(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(t, Op::Gelu(x.0), rg)
    }

    /// Softmax over the last dimension, stabilized by row-max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.data().iter().any(|z| z.is_nan()) {
            return Err(Error::Numeric("softmax input contains NaN".into()));
        }
        let d = v.last_dim();
        let mut t = v.clone();
        for row in t.data_mut().chunks_mut(d) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for z in row.iter_mut() {
                *z = (*z - mx).exp();
                s += *z;
            }
            for z in row.iter_mut() {
                *z = *z / s;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(t, Op::Softmax(x.0), rg))
    }

    /// Layer normalization over the last dimension with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.value(gamma).len() != d || self.value(beta).len() != d {
            return Err(Error::shape(format!(
                "layer_norm: affine parameters must have {d} elements"
            )));
        }
        let eps = T::of(eps);
        let dn = T::of_usize(d);
        let xv = self.value(x);
        let rows = xv.rows();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut rstd = vec![T::zero(); rows];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&z| (z - mean) * (z - mean)).sum::<T>() / dn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                xhat[r * d + j] = (row[j] - mean) * rs;
            }
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let out = xhat
            .chunks(d)
            .flat_map(|row| row.iter().zip(g).zip(b).map(|((&h, &gg), &bb)| h * gg + bb))
            .collect();
        let t = Tensor::from_vec(xv.shape(), out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::SumAll(x.0), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().copied().sum::<T>() / T::of_usize(v.len().max(1));
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::MeanAll(x.0), rg)
    }

    /// Mean over the last dimension: `[.., d] -> [..]`.
    pub fn mean_last(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let d = v.last_dim();
        let data: Vec<T> = v
            .data()
            .chunks(d)
            .map(|c| c.iter().copied().sum::<T>() / T::of_usize(d))
            .collect();
        let mut shape = v.shape()[..v.shape().len().saturating_sub(1)].to_vec();
        if shape.is_empty() {
            shape.push(1);
        }
        let t = Tensor::from_vec(&shape, data)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::MeanLast(x.0), rg))
    }

    /// Mean over tokens: `[B×N×d] -> [B×d]`.
    pub fn mean_tokens(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(Error::shape(format!("mean_tokens expects [B, N, d], got {s:?}")));
        }
        let (b, n, d) = (s[0], s[1], s[2]);
        let v = self.value(x).data();
        let mut out = vec![T::zero(); b * d];
        for bi in 0..b {
            for t in 0..n {
                let row = &v[(bi * n + t) * d..(bi * n + t + 1) * d];
                for (o, &z) in out[bi * d..(bi + 1) * d].iter_mut().zip(row) {
                    *o += z;
                }
            }
        }
        let nn = T::of_usize(n);
        out.iter_mut().for_each(|z| *z = *z / nn);
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_vec(&[b, d], out)?, Op::MeanTokens { x: x.0, n }, rg))
    }

    /// Mean of squared differences over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same("mse", self.shape(a), self.shape(b))?;
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let s = av
            .iter()
            .zip(bv)
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum::<T>()
            / T::of_usize(av.len().max(1));
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::scalar(s), Op::Mse(a.0, b.0), rg))
    }

    fn tokens_shape(&self, x: Var, op: &str) -> Result<(usize, usize, usize)> {
        let s = self.shape(x);
        if s.len() != 3 {
            return Err(Error::shape(format!("{op} expects [B, N, d], got {s:?}")));
        }
        Ok((s[0], s[1], s[2]))
    }

    /// Token cosine similarities `[B×N×d] -> [B×N×N]` with `eps` added to norms.
    pub fn cosine_scores(&mut self, x: Var, eps: f64) -> Result<Var> {
        let (b, n, d) = self.tokens_shape(x, "cosine_scores")?;
        let eps = T::of(eps);
        let u = unit_rows(self.value(x).data(), d, eps);
        let mut out = vec![T::zero(); b * n * n];
        for bi in 0..b {
            let ub = &u[bi * n * d..(bi + 1) * n * d];
            gemm_acc(n, d, n, ub, false, ub, true, &mut out[bi * n * n..(bi + 1) * n * n]);
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_vec(&[b, n, n], out)?,
            Op::CosineScores { x: x.0, n, eps },
            rg,
        ))
    }

    /// Negative squared Euclidean distances `[B×N×d] -> [B×N×N]`.
    pub fn euclidean_scores(&mut self, x: Var) -> Result<Var> {
        let (b, n, d) = self.tokens_shape(x, "euclidean_scores")?;
        let v = self.value(x).data();
        let mut out = vec![T::zero(); b * n * n];
        for bi in 0..b {
            for i in 0..n {
                let ti = &v[(bi * n + i) * d..(bi * n + i + 1) * d];
                for j in 0..n {
                    let tj = &v[(bi * n + j) * d..(bi * n + j + 1) * d];
                    let s: T = ti.iter().zip(tj).map(|(&p, &q)| (p - q) * (p - q)).sum();
                    out[(bi * n + i) * n + j] = -s;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_vec(&[b, n, n], out)?,
            Op::EuclideanScores { x: x.0, n },
            rg,
        ))
    }

    /// Selects rows (over the last dim) of a 2-D `x` by index.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let v = self.value(x);
        if v.shape().len() != 2 {
            return Err(Error::shape(format!("gather_rows expects 2-D, got {:?}", v.shape())));
        }
        let (rows, d) = (v.shape()[0], v.shape()[1]);
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::shape(format!("gather_rows: index {bad} out of range for {rows} rows")));
        }
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            out.extend_from_slice(&v.data()[i * d..(i + 1) * d]);
        }
        let t = Tensor::from_vec(&[idx.len(), d], out)?;
        let rg = self.rg(x);
        Ok(self.push(
            t,
            Op::GatherRows {
                x: x.0,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    /// Stacks two 2-D tensors with equal column count.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::shape(format!("concat_rows: {sa:?} and {sb:?}")));
        }
        let mut data = self.value(a).data().to_vec();
        data.extend_from_slice(self.value(b).data());
        let t = Tensor::from_vec(&[sa[0] + sb[0], sa[1]], data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::ConcatRows(a.0, b.0), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x.0), rg))
    }

    /// Transpose of a 2-D tensor.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::shape(format!("transpose expects 2-D, got {s:?}")));
        }
        let data = transpose(self.value(x).data(), s[0], s[1]);
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_vec(&[s[1], s[0]], data)?, Op::Transpose(x.0), rg))
    }

    /// `[B·N × H·dh] -> [B·H × N × dh]`.
    pub fn split_heads(&mut self, x: Var, n: usize, heads: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || n == 0 || s[0] % n != 0 || heads == 0 || s[1] % heads != 0 {
            return Err(Error::shape(format!(
                "split_heads: {s:?} with {n} tokens and {heads} heads"
            )));
        }
        let b = s[0] / n;
        let dh = s[1] / heads;
        let v = self.value(x).data();
        let mut out = vec![T::zero(); v.len()];
        for bi in 0..b {
            for t in 0..n {
                for h in 0..heads {
                    let src = (bi * n + t) * s[1] + h * dh;
                    let dst = ((bi * heads + h) * n + t) * dh;
                    out[dst..dst + dh].copy_from_slice(&v[src..src + dh]);
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_vec(&[b * heads, n, dh], out)?,
            Op::SplitHeads { x: x.0, n, heads },
            rg,
        ))
    }

    /// Inverse of [`Graph::split_heads`]: `[B·H × N × dh] -> [B·N × H·dh]`.
    pub fn merge_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || heads == 0 || s[0] % heads != 0 {
            return Err(Error::shape(format!("merge_heads: {s:?} with {heads} heads")));
        }
        let (b, n, dh) = (s[0] / heads, s[1], s[2]);
        let d = heads * dh;
        let v = self.value(x).data();
        let mut out = vec![T::zero(); v.len()];
        for bi in 0..b {
            for t in 0..n {
                for h in 0..heads {
                    let src = ((bi * heads + h) * n + t) * dh;
                    let dst = (bi * n + t) * d + h * dh;
                    out[dst..dst + dh].copy_from_slice(&v[src..src + dh]);
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_vec(&[b * n, d], out)?,
            Op::MergeHeads { x: x.0, n, heads },
            rg,
        ))
    }

    /// `Σ_l w[l] · xs[l]` for equally shaped `xs` and a length-L weight vector.
    pub fn weighted_sum(&mut self, xs: &[Var], w: Var) -> Result<Var> {
        if xs.is_empty() || self.value(w).len() != xs.len() {
            return Err(Error::shape(format!(
                "weighted_sum: {} inputs for {} weights",
                xs.len(),
                self.value(w).len()
            )));
        }
        let shape = self.shape(xs[0]).to_vec();
        for &x in xs {
            check_same("weighted_sum", &shape, self.shape(x))?;
        }
        let wv = self.value(w).data().to_vec();
        let mut out = vec![T::zero(); self.value(xs[0]).len()];
        for (&x, &wl) in xs.iter().zip(&wv) {
            for (o, &z) in out.iter_mut().zip(self.value(x).data()) {
                *o += wl * z;
            }
        }
        let rg = self.rg(w) || xs.iter().any(|&x| self.rg(x));
        Ok(self.push(
            Tensor::from_vec(&shape, out)?,
            Op::WeightedSum {
                xs: xs.iter().map(|v| v.0).collect(),
                w: w.0,
            },
            rg,
        ))
    }

    /// Mean cross-entropy of `[B×k]` logits against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::shape(format!(
                "cross_entropy: logits {s:?} for {} labels",
                labels.len()
            )));
        }
        let k = s[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::shape(format!("cross_entropy: label {bad} >= {k} classes")));
        }
        let v = self.value(logits).data();
        let mut probs = vec![T::zero(); v.len()];
        let mut loss = T::zero();
        for (r, &lab) in labels.iter().enumerate() {
            let row = &v[r * k..(r + 1) * k];
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&z| (z - mx).exp()).sum::<T>().ln() + mx;
            for j in 0..k {
                probs[r * k + j] = (row[j] - lse).exp();
            }
            loss += lse - row[lab];
        }
        let loss = loss / T::of_usize(labels.len().max(1));
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits: logits.0,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Reverse-mode pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Backward pass that also accumulates parameter gradients into `store`.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore<T>) -> Result<Gradients<T>> {
        let grads = self.backward(loss)?;
        grads.accumulate_into(self, store)?;
        Ok(grads)
    }

    fn send(&self, grads: &mut [Option<Vec<T>>], target: usize, contrib: Vec<T>) {
        if self.nodes[target].requires_grad {
            add_into(&mut grads[target], contrib);
        }
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let val = |j: usize| self.nodes[j].value.data();
        let rg = |j: usize| self.nodes[j].requires_grad;
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
            } => {
                let (av, bv) = (val(a), val(b));
                if rg(a) {
                    let mut da = vec![T::zero(); batch * m * k];
                    for bi in 0..batch {
                        let gb = &g[bi * m * n..(bi + 1) * m * n];
                        let bb = &bv[bi * k * n..(bi + 1) * k * n];
                        // dA = G·Bᵀ, or G·B when B was stored transposed.
                        gemm_acc(m, n, k, gb, false, bb, !trans_b, &mut da[bi * m * k..(bi + 1) * m * k]);
                    }
                    self.send(grads, a, da);
                }
                if rg(b) {
                    let mut db = vec![T::zero(); batch * k * n];
                    for bi in 0..batch {
                        let gb = &g[bi * m * n..(bi + 1) * m * n];
                        let ab = &av[bi * m * k..(bi + 1) * m * k];
                        let out = &mut db[bi * k * n..(bi + 1) * k * n];
                        if trans_b {
                            gemm_acc(n, m, k, gb, true, ab, false, out);
                        } else {
                            gemm_acc(k, m, n, ab, true, gb, false, out);
                        }
                    }
                    self.send(grads, b, db);
                }
            }
            &Op::Add(a, b) => {
                self.send(grads, a, g.to_vec());
                self.send(grads, b, g.to_vec());
            }
            &Op::Sub(a, b) => {
                self.send(grads, a, g.to_vec());
                self.send(grads, b, g.iter().map(|&x| -x).collect());
            }
            &Op::Mul(a, b) => {
                if rg(a) {
                    self.send(grads, a, g.iter().zip(val(b)).map(|(&x, &y)| x * y).collect());
                }
                if rg(b) {
                    self.send(grads, b, g.iter().zip(val(a)).map(|(&x, &y)| x * y).collect());
                }
            }
            &Op::AddRow { x, row } => {
                self.send(grads, x, g.to_vec());
                if rg(row) {
                    let d = self.nodes[row].value.len();
                    let mut dr = vec![T::zero(); d];
                    for chunk in g.chunks(d) {
                        for (a, &b) in dr.iter_mut().zip(chunk) {
                            *a += b;
                        }
                    }
                    self.send(grads, row, dr);
                }
            }
            &Op::Scale { x, c } => self.send(grads, x, g.iter().map(|&v| v * c).collect()),
            &Op::Gelu(x) => {
                let dx = g.iter().zip(val(x)).map(|(&gv, &z)| gv * gelu_grad(z)).collect();
                self.send(grads, x, dx);
            }
            &Op::Softmax(x) => {
                let y = node.value.data();
                let d = node.value.last_dim();
                let mut dx = vec![T::zero(); y.len()];
                for ((yr, gr), dr) in y.chunks(d).zip(g.chunks(d)).zip(dx.chunks_mut(d)) {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..d {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.send(grads, x, dx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = node.value.last_dim();
                let gm = val(*gamma);
                if rg(*gamma) || rg(*beta) {
                    let mut dg = vec![T::zero(); d];
                    let mut db = vec![T::zero(); d];
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            dg[j] += gr[j] * hr[j];
                            db[j] += gr[j];
                        }
                    }
                    self.send(grads, *gamma, dg);
                    self.send(grads, *beta, db);
                }
                if rg(*x) {
                    let dn = T::of_usize(d);
                    let mut dx = vec![T::zero(); g.len()];
                    for (r, ((gr, hr), dr)) in
                        g.chunks(d).zip(xhat.chunks(d)).zip(dx.chunks_mut(d)).enumerate()
                    {
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..d {
                            let dh = gr[j] * gm[j];
                            m1 += dh;
                            m2 += dh * hr[j];
                        }
                        m1 = m1 / dn;
                        m2 = m2 / dn;
                        for j in 0..d {
                            dr[j] = rstd[r] * (gr[j] * gm[j] - m1 - hr[j] * m2);
                        }
                    }
                    self.send(grads, *x, dx);
                }
            }
            &Op::SumAll(x) => {
                let n = self.nodes[x].value.len();
                self.send(grads, x, vec![g[0]; n]);
            }
            &Op::MeanAll(x) => {
                let n = self.nodes[x].value.len();
                self.send(grads, x, vec![g[0] / T::of_usize(n.max(1)); n]);
            }
            &Op::MeanLast(x) => {
                let d = self.nodes[x].value.last_dim();
                let dn = T::of_usize(d);
                let dx = g.iter().flat_map(|&v| std::iter::repeat_n(v / dn, d)).collect();
                self.send(grads, x, dx);
            }
            &Op::MeanTokens { x, n } => {
                let d = node.value.last_dim();
                let nn = T::of_usize(n);
                let b = node.value.rows();
                let mut dx = vec![T::zero(); b * n * d];
                for bi in 0..b {
                    for t in 0..n {
                        for j in 0..d {
                            dx[(bi * n + t) * d + j] = g[bi * d + j] / nn;
                        }
                    }
                }
                self.send(grads, x, dx);
            }
            &Op::Mse(a, b) => {
                let (av, bv) = (val(a), val(b));
                let scale = T::of(2.0) * g[0] / T::of_usize(av.len().max(1));
                let da: Vec<T> = av.iter().zip(bv).map(|(&x, &y)| scale * (x - y)).collect();
                if rg(b) {
                    self.send(grads, b, da.iter().map(|&v| -v).collect());
                }
                self.send(grads, a, da);
            }
            &Op::CosineScores { x, n, eps } => {
                let xv = val(x);
                let d = self.nodes[x].value.last_dim();
                let b = xv.len() / (n * d);
                let u = unit_rows(xv, d, eps);
                let mut dx = vec![T::zero(); xv.len()];
                for bi in 0..b {
                    let gb = &g[bi * n * n..(bi + 1) * n * n];
                    let sym: Vec<T> = (0..n * n)
                        .map(|idx| gb[idx] + gb[(idx % n) * n + idx / n])
                        .collect();
                    let ub = &u[bi * n * d..(bi + 1) * n * d];
                    let mut du = vec![T::zero(); n * d];
                    gemm_acc(n, n, d, &sym, false, ub, false, &mut du);
                    for t in 0..n {
                        let row = &xv[(bi * n + t) * d..(bi * n + t + 1) * d];
                        let dur = &du[t * d..(t + 1) * d];
                        let norm = row.iter().map(|&z| z * z).sum::<T>().sqrt();
                        let denom = norm + eps;
                        let out = &mut dx[(bi * n + t) * d..(bi * n + t + 1) * d];
                        let proj = if norm > T::zero() {
                            row.iter().zip(dur).map(|(&a, &c)| a * c).sum::<T>()
                                / (norm * denom * denom)
                        } else {
                            T::zero()
                        };
                        for j in 0..d {
                            out[j] = dur[j] / denom - row[j] * proj;
                        }
                    }
                }
                self.send(grads, x, dx);
            }
            &Op::EuclideanScores { x, n } => {
                let xv = val(x);
                let d = self.nodes[x].value.last_dim();
                let b = xv.len() / (n * d);
                let two = T::of(2.0);
                let mut dx = vec![T::zero(); xv.len()];
                for bi in 0..b {
                    for i in 0..n {
                        let ti = &xv[(bi * n + i) * d..(bi * n + i + 1) * d];
                        for j in 0..n {
                            let c = g[(bi * n + i) * n + j] + g[(bi * n + j) * n + i];
                            if c == T::zero() {
                                continue;
                            }
                            let tj = &xv[(bi * n + j) * d..(bi * n + j + 1) * d];
                            let out = &mut dx[(bi * n + i) * d..(bi * n + i + 1) * d];
                            for e in 0..d {
                                out[e] -= two * c * (ti[e] - tj[e]);
                            }
                        }
                    }
                }
                self.send(grads, x, dx);
            }
            Op::GatherRows { x, idx } => {
                let d = node.value.last_dim();
                let mut dx = vec![T::zero(); self.nodes[*x].value.len()];
                for (r, &src) in idx.iter().enumerate() {
                    for j in 0..d {
                        dx[src * d + j] += g[r * d + j];
                    }
                }
                self.send(grads, *x, dx);
            }
            &Op::ConcatRows(a, b) => {
                let na = self.nodes[a].value.len();
                self.send(grads, a, g[..na].to_vec());
                self.send(grads, b, g[na..].to_vec());
            }
            &Op::Reshape(x) => self.send(grads, x, g.to_vec()),
            &Op::Transpose(x) => {
                let s = node.value.shape();
                self.send(grads, x, transpose(g, s[0], s[1]));
            }
            &Op::SplitHeads { x, n, heads } => {
                let s = self.nodes[x].value.shape();
                let (b, d) = (s[0] / n, s[1]);
                let dh = d / heads;
                let mut dx = vec![T::zero(); g.len()];
                for bi in 0..b {
                    for t in 0..n {
                        for h in 0..heads {
                            let dst = (bi * n + t) * d + h * dh;
                            let src = ((bi * heads + h) * n + t) * dh;
                            dx[dst..dst + dh].copy_from_slice(&g[src..src + dh]);
                        }
                    }
                }
                self.send(grads, x, dx);
            }
            &Op::MergeHeads { x, n, heads } => {
                let s = self.nodes[x].value.shape();
                let (b, dh) = (s[0] / heads, s[2]);
                let d = heads * dh;
                let mut dx = vec![T::zero(); g.len()];
                for bi in 0..b {
                    for t in 0..n {
                        for h in 0..heads {
                            let dst = ((bi * heads + h) * n + t) * dh;
                            let src = (bi * n + t) * d + h * dh;
                            dx[dst..dst + dh].copy_from_slice(&g[src..src + dh]);
                        }
                    }
                }
                self.send(grads, x, dx);
            }
            Op::WeightedSum { xs, w } => {
                let wv = val(*w);
                for (l, &x) in xs.iter().enumerate() {
                    if rg(x) {
                        self.send(grads, x, g.iter().map(|&v| v * wv[l]).collect());
                    }
                }
                if rg(*w) {
                    let dw = xs
                        .iter()
                        .map(|&x| val(x).iter().zip(g).map(|(&a, &b)| a * b).sum::<T>())
                        .collect();
                    self.send(grads, *w, dw);
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let k = self.nodes[*logits].value.last_dim();
                let scale = g[0] / T::of_usize(labels.len().max(1));
                let mut dx: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (r, &lab) in labels.iter().enumerate() {
                    dx[r * k + lab] -= scale;
                }
                self.send(grads, *logits, dx);
            }
        }
    }
}

/// Rows scaled to `t / (‖t‖ + eps)`.
fn unit_rows<T: Real>(x: &[T], d: usize, eps: T) -> Vec<T> {
    let mut u = x.to_vec();
    for row in u.chunks_mut(d) {
        let norm = row.iter().map(|&z| z * z).sum::<T>().sqrt();
        let denom = norm + eps;
        row.iter_mut().for_each(|z| *z = *z / denom);
    }
    u
}
