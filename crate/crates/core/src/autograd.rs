//! Tape-based reverse-mode differentiation over row-major matrices.
//!
//! Every value on the tape is a 2-D array. Image activations use a token
//! layout: one row per (sample, pixel) and one column per channel, so dense
//! layers are matrix products and convolutions are a [`GatherMap`] followed
//! by a matrix product.
//!
//! Graph operations assert on shape mismatches: they are called by model code
//! whose shapes are fixed by configuration, and a mismatch is a bug.

use std::rc::Rc;

use ndarray::{s, Array2, ArrayView2, Axis};

use crate::scalar::Scalar;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// Block-level row gather.
///
/// The input is viewed as `rows_in × (blocks_in · block_width)` and the
/// output as `rows_out × (blocks_out · block_width)`. Output block
/// `(r, b)` copies input block `entries[r * blocks_out + b]`, or is zero.
/// im2col, patchify, unpatchify and nearest upsampling are all instances.
#[derive(Debug, Clone)]
pub struct GatherMap {
    pub rows_in: usize,
    pub blocks_in: usize,
    pub rows_out: usize,
    pub blocks_out: usize,
    pub block_width: usize,
    pub entries: Vec<Option<(u32, u32)>>,
}

enum Op<F> {
    Leaf,
    MatMul(Var, Var),
    MatMulBT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    AddRow(Var, Var),
    MulRow(Var, Var),
    AddPerSample(Var, Var),
    Silu(Var),
    SumAll(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize, usize),
    Gather(Var, Rc<GatherMap>),
    GroupNorm {
        x: Var,
        samples: usize,
        groups: usize,
        xhat: Array2<F>,
        rstd: Vec<F>,
    },
    LayerNorm {
        x: Var,
        xhat: Array2<F>,
        rstd: Vec<F>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        samples: usize,
        heads: usize,
        probs: Vec<Array2<F>>,
    },
}

struct Node<F> {
    value: Array2<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// A differentiation tape. Build it by calling operations, then call
/// [`Graph::backward`] on a scalar output.
pub struct Graph<F: Scalar> {
    nodes: Vec<Node<F>>,
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a backward pass, addressable by the leaf [`Var`]s.
pub struct Gradients<F> {
    grads: Vec<Option<Array2<F>>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&Array2<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Array2<F>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn sigmoid<F: Scalar>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

fn norm_eps<F: Scalar>() -> F {
    F::lit(1e-5)
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Array2<F>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Array2<F>) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Array2<F>) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Array2<F> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Array2<F>, op: Op<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    /// `a · b`
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (_, k) = self.shape(a);
        let (k2, _) = self.shape(b);
        assert_eq!(k, k2, "matmul inner dimension");
        let value = self.value(a).dot(self.value(b));
        let rg = self.rg(&[a, b]);
        self.push(value, Op::MatMul(a, b), rg)
    }

    /// `a · bᵀ`; with `b` stored as `(out, in)` this is a dense layer.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let (_, k) = self.shape(a);
        let (_, k2) = self.shape(b);
        assert_eq!(k, k2, "matmul_bt inner dimension");
        let value = self.value(a).dot(&self.value(b).t());
        let rg = self.rg(&[a, b]);
        self.push(value, Op::MatMulBT(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shapes");
        let value = self.value(a) + self.value(b);
        let rg = self.rg(&[a, b]);
        self.push(value, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub shapes");
        let value = self.value(a) - self.value(b);
        let rg = self.rg(&[a, b]);
        self.push(value, Op::Sub(a, b), rg)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul shapes");
        let value = self.value(a) * self.value(b);
        let rg = self.rg(&[a, b]);
        self.push(value, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, c: F) -> Var {
        let value = self.value(a) * c;
        let rg = self.rg(&[a]);
        self.push(value, Op::Scale(a, c), rg)
    }

    /// Adds a `1 × C` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (_, c) = self.shape(a);
        assert_eq!(self.shape(row), (1, c), "add_row shape");
        let value = self.value(a) + self.value(row);
        let rg = self.rg(&[a, row]);
        self.push(value, Op::AddRow(a, row), rg)
    }

    /// Multiplies every row of `a` elementwise by a `1 × C` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (_, c) = self.shape(a);
        assert_eq!(self.shape(row), (1, c), "mul_row shape");
        let value = self.value(a) * self.value(row);
        let rg = self.rg(&[a, row]);
        self.push(value, Op::MulRow(a, row), rg)
    }

    /// Adds row `n` of `e` (`N × C`) to every token row of sample `n` in `x`.
    pub fn add_per_sample(&mut self, x: Var, e: Var) -> Var {
        let (rows, c) = self.shape(x);
        let (n, c2) = self.shape(e);
        assert_eq!(c, c2, "add_per_sample channels");
        assert!(n > 0 && rows % n == 0, "add_per_sample rows");
        let per = rows / n;
        let mut value = self.value(x).clone();
        let ev = self.value(e);
        for (i, mut chunk) in value.axis_chunks_iter_mut(Axis(0), per).enumerate() {
            chunk += &ev.row(i);
        }
        let rg = self.rg(&[x, e]);
        self.push(value, Op::AddPerSample(x, e), rg)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x * sigmoid(x));
        let rg = self.rg(&[a]);
        self.push(value, Op::Silu(a), rg)
    }

    /// Sum of all entries as a `1 × 1` value.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let total = self.value(a).sum();
        let rg = self.rg(&[a]);
        self.push(Array2::from_elem((1, 1), total), Op::SumAll(a), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<ArrayView2<F>> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("concat_cols rows");
        let rg = self.rg(parts);
        self.push(value, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let value = self.value(a).slice(s![.., start..end]).to_owned();
        let rg = self.rg(&[a]);
        self.push(value, Op::SliceCols(a, start, end), rg)
    }

    pub fn gather(&mut self, a: Var, map: Rc<GatherMap>) -> Var {
        let cb = map.block_width;
        assert_eq!(
            self.shape(a),
            (map.rows_in, map.blocks_in * cb),
            "gather input shape"
        );
        let mut out = Array2::<F>::zeros((map.rows_out, map.blocks_out * cb));
        {
            let src = self.value(a);
            let src = src.as_slice().expect("standard layout");
            let dst = out.as_slice_mut().expect("standard layout");
            let in_stride = map.blocks_in * cb;
            for (i, e) in map.entries.iter().enumerate() {
                if let Some((sr, sb)) = *e {
                    let from = sr as usize * in_stride + sb as usize * cb;
                    dst[i * cb..(i + 1) * cb].copy_from_slice(&src[from..from + cb]);
                }
            }
        }
        let rg = self.rg(&[a]);
        self.push(out, Op::Gather(a, map), rg)
    }

    /// Normalizes each (sample, channel group) block to zero mean and unit
    /// variance. No affine part; compose with [`Graph::mul_row`] and
    /// [`Graph::add_row`].
    pub fn group_norm(&mut self, x: Var, samples: usize, groups: usize) -> Var {
        let (rows, c) = self.shape(x);
        assert!(samples > 0 && rows % samples == 0, "group_norm rows");
        assert!(groups > 0 && c % groups == 0, "group_norm groups");
        let per = rows / samples;
        let cg = c / groups;
        let count = F::from_usize(per * cg).unwrap();
        let eps = norm_eps::<F>();
        let xv = self.value(x);
        let mut xhat = Array2::<F>::zeros((rows, c));
        let mut rstd = Vec::with_capacity(samples * groups);
        for n in 0..samples {
            for g in 0..groups {
                let block = xv.slice(s![n * per..(n + 1) * per, g * cg..(g + 1) * cg]);
                let mean = block.sum() / count;
                let var = block.fold(F::zero(), |acc, &v| acc + (v - mean) * (v - mean)) / count;
                let r = F::one() / (var + eps).sqrt();
                rstd.push(r);
                xhat.slice_mut(s![n * per..(n + 1) * per, g * cg..(g + 1) * cg])
                    .zip_mut_with(&block, |o, &v| *o = (v - mean) * r);
            }
        }
        let value = xhat.clone();
        let rg = self.rg(&[x]);
        self.push(
            value,
            Op::GroupNorm {
                x,
                samples,
                groups,
                xhat,
                rstd,
            },
            rg,
        )
    }

    /// Per-row normalization without affine part.
    pub fn layer_norm(&mut self, x: Var) -> Var {
        let (rows, c) = self.shape(x);
        let count = F::from_usize(c).unwrap();
        let eps = norm_eps::<F>();
        let xv = self.value(x);
        let mut xhat = Array2::<F>::zeros((rows, c));
        let mut rstd = Vec::with_capacity(rows);
        for (i, row) in xv.outer_iter().enumerate() {
            let mean = row.sum() / count;
            let var = row.fold(F::zero(), |acc, &v| acc + (v - mean) * (v - mean)) / count;
            let r = F::one() / (var + eps).sqrt();
            rstd.push(r);
            xhat.row_mut(i)
                .zip_mut_with(&row, |o, &v| *o = (v - mean) * r);
        }
        let value = xhat.clone();
        let rg = self.rg(&[x]);
        self.push(value, Op::LayerNorm { x, xhat, rstd }, rg)
    }

    /// Multi-head scaled dot-product attention, independently per sample.
    ///
    /// `q` is `(N·Lq) × (H·d)`, `k` is `(N·Lk) × (H·d)` and `v` is
    /// `(N·Lk) × (H·dv)`. Returns `(N·Lq) × (H·dv)`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, samples: usize, heads: usize) -> Var {
        let (qr, qc) = self.shape(q);
        let (kr, kc) = self.shape(k);
        let (vr, vc) = self.shape(v);
        assert_eq!(qc, kc, "attention q/k width");
        assert_eq!(kr, vr, "attention k/v rows");
        assert!(qr % samples == 0 && kr % samples == 0, "attention rows");
        assert!(qc % heads == 0 && vc % heads == 0, "attention heads");
        let (lq, lk) = (qr / samples, kr / samples);
        let (d, dv) = (qc / heads, vc / heads);
        let scale = F::one() / F::from_usize(d).unwrap().sqrt();
        let rg = self.rg(&[q, k, v]);
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut out = Array2::<F>::zeros((qr, vc));
        let mut probs = Vec::new();
        for n in 0..samples {
            for h in 0..heads {
                let qs = qv.slice(s![n * lq..(n + 1) * lq, h * d..(h + 1) * d]);
                let ks = kv.slice(s![n * lk..(n + 1) * lk, h * d..(h + 1) * d]);
                let vs = vv.slice(s![n * lk..(n + 1) * lk, h * dv..(h + 1) * dv]);
                let mut p = qs.dot(&ks.t());
                softmax_rows(&mut p, scale);
                out.slice_mut(s![n * lq..(n + 1) * lq, h * dv..(h + 1) * dv])
                    .assign(&p.dot(&vs));
                if rg {
                    probs.push(p);
                }
            }
        }
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                samples,
                heads,
                probs,
            },
            rg,
        )
    }

    /// Backpropagates from `output` (seeded with ones) and returns gradients
    /// of every leaf that requires them.
    pub fn backward(&self, output: Var) -> Gradients<F> {
        let seed = Array2::from_elem(self.value(output).dim(), F::one());
        self.backward_with(output, seed)
    }

    pub fn backward_with(&self, output: Var, seed: Array2<F>) -> Gradients<F> {
        let mut grads: Vec<Option<Array2<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[output.0].requires_grad {
            return Gradients { grads };
        }
        assert_eq!(seed.dim(), self.value(output).dim(), "backward seed shape");
        grads[output.0] = Some(seed);
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, g, &mut grads);
        }
        Gradients { grads }
    }

    fn propagate(&self, node: &Node<F>, g: Array2<F>, grads: &mut [Option<Array2<F>>]) {
        let want = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if want(*b) {
                    accumulate(grads, *b, self.value(*a).t().dot(&g));
                }
                if want(*a) {
                    accumulate(grads, *a, g.dot(&self.value(*b).t()));
                }
            }
            Op::MatMulBT(a, b) => {
                if want(*b) {
                    accumulate(grads, *b, g.t().dot(self.value(*a)));
                }
                if want(*a) {
                    accumulate(grads, *a, g.dot(self.value(*b)));
                }
            }
            Op::Add(a, b) => {
                if want(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if want(*b) {
                    accumulate(grads, *b, g);
                }
            }
            Op::Sub(a, b) => {
                if want(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if want(*b) {
                    accumulate(grads, *b, -g);
                }
            }
            Op::Mul(a, b) => {
                if want(*a) {
                    accumulate(grads, *a, &g * self.value(*b));
                }
                if want(*b) {
                    accumulate(grads, *b, &g * self.value(*a));
                }
            }
            Op::Scale(a, c) => accumulate(grads, *a, g * *c),
            Op::AddRow(a, row) => {
                if want(*row) {
                    accumulate(grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if want(*a) {
                    accumulate(grads, *a, g);
                }
            }
            Op::MulRow(a, row) => {
                if want(*row) {
                    let gr = (&g * self.value(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(grads, *row, gr);
                }
                if want(*a) {
                    accumulate(grads, *a, g * self.value(*row));
                }
            }
            Op::AddPerSample(x, e) => {
                if want(*e) {
                    let n = self.shape(*e).0;
                    let per = g.nrows() / n;
                    let mut ge = Array2::<F>::zeros(self.shape(*e));
                    for (i, chunk) in g.axis_chunks_iter(Axis(0), per).enumerate() {
                        ge.row_mut(i).assign(&chunk.sum_axis(Axis(0)));
                    }
                    accumulate(grads, *e, ge);
                }
                if want(*x) {
                    accumulate(grads, *x, g);
                }
            }
            Op::Silu(a) => {
                let mut ga = g;
                ga.zip_mut_with(self.value(*a), |gv, &x| {
                    let sg = sigmoid(x);
                    *gv *= sg * (F::one() + x * (F::one() - sg));
                });
                accumulate(grads, *a, ga);
            }
            Op::SumAll(a) => {
                let gv = g[[0, 0]];
                accumulate(grads, *a, Array2::from_elem(self.shape(*a), gv));
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for p in parts {
                    let w = self.shape(*p).1;
                    if want(*p) {
                        accumulate(grads, *p, g.slice(s![.., start..start + w]).to_owned());
                    }
                    start += w;
                }
            }
            Op::SliceCols(a, start, end) => {
                let mut ga = Array2::<F>::zeros(self.shape(*a));
                ga.slice_mut(s![.., *start..*end]).assign(&g);
                accumulate(grads, *a, ga);
            }
            Op::Gather(a, map) => {
                let cb = map.block_width;
                let mut ga = Array2::<F>::zeros(self.shape(*a));
                {
                    let gs = g.as_standard_layout();
                    let gs = gs.as_slice().expect("standard layout");
                    let dst = ga.as_slice_mut().expect("standard layout");
                    let in_stride = map.blocks_in * cb;
                    for (i, e) in map.entries.iter().enumerate() {
                        if let Some((sr, sb)) = *e {
                            let to = sr as usize * in_stride + sb as usize * cb;
                            for (d, &v) in dst[to..to + cb].iter_mut().zip(&gs[i * cb..(i + 1) * cb]) {
                                *d += v;
                            }
                        }
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::GroupNorm {
                x,
                samples,
                groups,
                xhat,
                rstd,
            } => {
                let (rows, c) = xhat.dim();
                let per = rows / samples;
                let cg = c / groups;
                let count = F::from_usize(per * cg).unwrap();
                let mut gx = Array2::<F>::zeros((rows, c));
                for n in 0..*samples {
                    for gi in 0..*groups {
                        let sl = s![n * per..(n + 1) * per, gi * cg..(gi + 1) * cg];
                        let gb = g.slice(sl);
                        let xb = xhat.slice(sl);
                        let m1 = gb.sum() / count;
                        let m2 = (&gb * &xb).sum() / count;
                        let r = rstd[n * groups + gi];
                        let mut out = gx.slice_mut(sl);
                        ndarray::Zip::from(&mut out)
                            .and(&gb)
                            .and(&xb)
                            .for_each(|o, &gv, &xh| *o = r * (gv - m1 - xh * m2));
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::LayerNorm { x, xhat, rstd } => {
                let c = F::from_usize(xhat.ncols()).unwrap();
                let mut gx = Array2::<F>::zeros(xhat.dim());
                for (i, (gr, xr)) in g.outer_iter().zip(xhat.outer_iter()).enumerate() {
                    let m1 = gr.sum() / c;
                    let m2 = (&gr * &xr).sum() / c;
                    let r = rstd[i];
                    ndarray::Zip::from(gx.row_mut(i))
                        .and(&gr)
                        .and(&xr)
                        .for_each(|o, &gv, &xh| *o = r * (gv - m1 - xh * m2));
                }
                accumulate(grads, *x, gx);
            }
            Op::Attention {
                q,
                k,
                v,
                samples,
                heads,
                probs,
            } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let (qr, qc) = qv.dim();
                let (kr, vc) = (kv.nrows(), vv.ncols());
                let (lq, lk) = (qr / samples, kr / samples);
                let (d, dv) = (qc / heads, vc / heads);
                let scale = F::one() / F::from_usize(d).unwrap().sqrt();
                let mut gq = Array2::<F>::zeros(qv.dim());
                let mut gk = Array2::<F>::zeros(kv.dim());
                let mut gvv = Array2::<F>::zeros(vv.dim());
                for n in 0..*samples {
                    for h in 0..*heads {
                        let p = &probs[n * heads + h];
                        let qsl = s![n * lq..(n + 1) * lq, h * d..(h + 1) * d];
                        let ksl = s![n * lk..(n + 1) * lk, h * d..(h + 1) * d];
                        let vsl = s![n * lk..(n + 1) * lk, h * dv..(h + 1) * dv];
                        let osl = s![n * lq..(n + 1) * lq, h * dv..(h + 1) * dv];
                        let go = g.slice(osl);
                        gvv.slice_mut(vsl).assign(&p.t().dot(&go));
                        let mut dp = go.dot(&vv.slice(vsl).t());
                        for (mut drow, prow) in dp.outer_iter_mut().zip(p.outer_iter()) {
                            let dot = drow.iter().zip(prow.iter()).fold(F::zero(), |a, (&x, &y)| a + x * y);
                            drow.zip_mut_with(&prow, |dv, &pv| *dv = pv * (*dv - dot) * scale);
                        }
                        gq.slice_mut(qsl).assign(&dp.dot(&kv.slice(ksl)));
                        gk.slice_mut(ksl).assign(&dp.t().dot(&qv.slice(qsl)));
                    }
                }
                if want(*q) {
                    accumulate(grads, *q, gq);
                }
                if want(*k) {
                    accumulate(grads, *k, gk);
                }
                if want(*v) {
                    accumulate(grads, *v, gvv);
                }
            }
        }
    }
}

/// In-place scaled, numerically stable row softmax.
pub(crate) fn softmax_rows<F: Scalar>(m: &mut Array2<F>, scale: F) {
    for mut row in m.outer_iter_mut() {
        let max = row.fold(F::neg_infinity(), |a, &b| a.max(b * scale));
        let mut total = F::zero();
        row.mapv_inplace(|x| {
            let e = (x * scale - max).exp();
            total += e;
            e
        });
        row.mapv_inplace(|e| e / total);
    }
}

fn accumulate<F: Scalar>(grads: &mut [Option<Array2<F>>], v: Var, g: Array2<F>) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}
