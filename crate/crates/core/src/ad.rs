//! Reverse-mode differentiation over matrix-valued primitives.
//!
//! A [`Tape`] records every primitive in evaluation order, so parents always
//! precede children. [`Tape::backward`] walks the record in reverse from a
//! scalar root and leaves `∂root/∂leaf` on every parameter leaf. Nodes that
//! do not depend on any parameter are skipped during the reverse sweep.
//!
//! Besides the usual algebra the primitive set carries the pieces needed to
//! differentiate exact log-determinants of residual-block Jacobians: the ELU
//! derivative `elu_prime` as a differentiable primitive, `logabsdet` (single
//! and batched), and structured node/channel operators that are equivalent to
//! Kronecker products on row-major vec rows.

use crate::error::{Error, Result};
use crate::linalg::{gemm, DenseMatrix, LuFactor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Hadamard(Var, Var),
    Transpose(Var),
    Kron(Var, Var),
    DiagEmbed(Var),
    Reshape(Var),
    Slice { src: Var, r0: usize, c0: usize },
    SumSq(Var),
    ReduceSum(Var),
    RowSum(Var),
    Elu(Var),
    EluPrime(Var),
    LogSoftmax(Var),
    Exp(Var),
    Log(Var),
    LogAbsDet { src: Var, inv_t: DenseMatrix },
    BlockLogAbsDet { src: Var, inv_t: DenseMatrix },
    TileRows(Var),
    RepeatRows(Var, usize),
    NodeMix { s: Var, z: Var, nodes: usize },
    NodewiseMatmul(Var, Var),
    AddNodeBias(Var, Var),
    GroupHadamard(Var, Var, usize),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: DenseMatrix,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<DenseMatrix>>,
}

#[inline]
pub fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

#[inline]
pub fn elu_prime(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        x.exp()
    }
}

/// Second derivative of ELU with the left-limit value 1 at the origin.
#[inline]
pub fn elu_second(x: f64) -> f64 {
    if x > 0.0 {
        0.0
    } else {
        x.exp()
    }
}

fn shape_str(m: &DenseMatrix) -> String {
    format!("{}x{}", m.rows(), m.cols())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: DenseMatrix, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn constant(&mut self, value: DenseMatrix) -> Var {
        self.push(Op::Leaf, value, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(DenseMatrix::scalar(value))
    }

    /// Leaf whose gradient is retained after [`Tape::backward`].
    pub fn param(&mut self, value: DenseMatrix) -> Var {
        self.push(Op::Leaf, value, true)
    }

    pub fn value(&self, v: Var) -> &DenseMatrix {
        &self.nodes[v.0].value
    }

    /// Gradient of the last backward root with respect to `v`, if `v`
    /// participated in it.
    pub fn grad(&self, v: Var) -> Option<&DenseMatrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    fn binary_same(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::shape(
                op,
                format!("{} vs {}", shape_str(x), shape_str(y)),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same(a, b, "add")?;
        let v = self.value(a).add(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Add(a, b), v, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same(a, b, "sub")?;
        let v = self.value(a).sub(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Sub(a, b), v, rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).scale(s);
        let rg = self.rg(a);
        self.push(Op::Scale(a, s), v, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::MatMul(a, b), v, rg))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same(a, b, "hadamard")?;
        let v = self.value(a).hadamard(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Hadamard(a, b), v, rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        let rg = self.rg(a);
        self.push(Op::Transpose(a), v, rg)
    }

    pub fn kron(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).kron(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::Kron(a, b), v, rg)
    }

    pub fn diag_embed(&mut self, a: Var) -> Result<Var> {
        let v = DenseMatrix::diag_embed(self.value(a))?;
        let rg = self.rg(a);
        Ok(self.push(Op::DiagEmbed(a), v, rg))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let v = self.value(a).reshape(rows, cols)?;
        let rg = self.rg(a);
        Ok(self.push(Op::Reshape(a), v, rg))
    }

    pub fn slice(&mut self, a: Var, r0: usize, r1: usize, c0: usize, c1: usize) -> Result<Var> {
        let v = self.value(a).slice(r0, r1, c0, c1)?;
        let rg = self.rg(a);
        Ok(self.push(Op::Slice { src: a, r0, c0 }, v, rg))
    }

    /// Sum of squared entries, as a 1x1 node.
    pub fn sum_sq(&mut self, a: Var) -> Var {
        let v = DenseMatrix::scalar(self.value(a).sum_sq());
        let rg = self.rg(a);
        self.push(Op::SumSq(a), v, rg)
    }

    pub fn reduce_sum(&mut self, a: Var) -> Var {
        let v = DenseMatrix::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(Op::ReduceSum(a), v, rg)
    }

    /// `N x m -> N x 1` row sums.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let v = DenseMatrix::column_vector(&self.value(a).row_sums());
        let rg = self.rg(a);
        self.push(Op::RowSum(a), v, rg)
    }

    pub fn elu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(elu);
        let rg = self.rg(a);
        self.push(Op::Elu(a), v, rg)
    }

    pub fn elu_prime(&mut self, a: Var) -> Var {
        let v = self.value(a).map(elu_prime);
        let rg = self.rg(a);
        self.push(Op::EluPrime(a), v, rg)
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = x.clone();
        for i in 0..x.rows() {
            let row = out.row_mut(i);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let rg = self.rg(a);
        self.push(Op::LogSoftmax(a), out, rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        let rg = self.rg(a);
        self.push(Op::Exp(a), v, rg)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::ln);
        let rg = self.rg(a);
        self.push(Op::Log(a), v, rg)
    }

    /// `log|det A|` of a square node; the adjoint is `A^{-T}`.
    pub fn logabsdet(&mut self, a: Var) -> Result<Var> {
        let m = self.value(a);
        let lu = LuFactor::new(m)?;
        let (log, _) = lu.logabsdet();
        if log < 1e-300f64.ln() {
            return Err(Error::Singular);
        }
        let inv_t = lu.inverse().transpose();
        let rg = self.rg(a);
        Ok(self.push(
            Op::LogAbsDet { src: a, inv_t },
            DenseMatrix::scalar(log),
            rg,
        ))
    }

    /// Batched `log|det|` over a vertical stack of `d x d` blocks, giving an
    /// `N x 1` column. Fails with the index of the first singular block.
    pub fn block_logabsdet(
        &mut self,
        a: Var,
        d: usize,
    ) -> std::result::Result<Var, (usize, Error)> {
        self.block_logabsdet_signed(a, d).map(|(v, _)| v)
    }

    /// [`Tape::block_logabsdet`] that also counts blocks with negative determinant.
    pub fn block_logabsdet_signed(
        &mut self,
        a: Var,
        d: usize,
    ) -> std::result::Result<(Var, usize), (usize, Error)> {
        let m = self.value(a);
        if d == 0 || m.cols() != d || !m.rows().is_multiple_of(d) {
            return Err((
                0,
                Error::shape(
                    "block_logabsdet",
                    format!("{} with block {d}", shape_str(m)),
                ),
            ));
        }
        let n = m.rows() / d;
        let mut logs = Vec::with_capacity(n);
        let mut negative = 0;
        let mut inv_t = DenseMatrix::zeros(n * d, d);
        for k in 0..n {
            let blk = DenseMatrix::new(d, d, m.data()[k * d * d..(k + 1) * d * d].to_vec())
                .expect("block extents");
            let lu = LuFactor::new(&blk).map_err(|e| (k, e))?;
            let (log, sign) = lu.logabsdet();
            if !(log >= 1e-300f64.ln()) {
                return Err((k, Error::Singular));
            }
            if sign < 0.0 {
                negative += 1;
            }
            logs.push(log);
            let it = lu.inverse().transpose();
            inv_t.data_mut()[k * d * d..(k + 1) * d * d].copy_from_slice(it.data());
        }
        let rg = self.rg(a);
        let v = self.push(
            Op::BlockLogAbsDet { src: a, inv_t },
            DenseMatrix::column_vector(&logs),
            rg,
        );
        Ok((v, negative))
    }

    pub fn tile_rows(&mut self, a: Var, n: usize) -> Var {
        let v = self.value(a).tile_rows(n);
        let rg = self.rg(a);
        self.push(Op::TileRows(a), v, rg)
    }

    pub fn repeat_rows(&mut self, a: Var, g: usize) -> Var {
        let v = self.value(a).repeat_rows(g);
        let rg = self.rg(a);
        self.push(Op::RepeatRows(a, g), v, rg)
    }

    /// Spatial operator `s` applied along the node axis of each row of `z`;
    /// see [`DenseMatrix::node_mix`].
    pub fn node_mix(&mut self, s: Var, z: Var, nodes: usize) -> Result<Var> {
        let v = DenseMatrix::node_mix(self.value(s), self.value(z), nodes)?;
        let rg = self.rg(s) || self.rg(z);
        Ok(self.push(Op::NodeMix { s, z, nodes }, v, rg))
    }

    /// Per-node channel map: each row of `x` holds consecutive channel
    /// vectors of width `w.rows()`, each multiplied by `w`.
    pub fn nodewise_matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        let v = self.value(x).nodewise_matmul(self.value(w))?;
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(Op::NodewiseMatmul(x, w), v, rg))
    }

    /// Adds the `1 x C` row `b` to every node slot of every row of `x`.
    pub fn add_node_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        let c = bv.cols();
        if bv.rows() != 1 || c == 0 || xv.cols() % c != 0 {
            return Err(Error::shape(
                "add_node_bias",
                format!("input {}, bias {}", shape_str(xv), shape_str(bv)),
            ));
        }
        let mut out = xv.clone();
        for (k, v) in out.data_mut().iter_mut().enumerate() {
            *v += bv.data()[k % c];
        }
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(Op::AddNodeBias(x, b), out, rg))
    }

    /// Scales row `n * group + i` of `q` entrywise by row `n` of `d`.
    pub fn group_hadamard(&mut self, q: Var, d: Var, group: usize) -> Result<Var> {
        let (qv, dv) = (self.value(q), self.value(d));
        if qv.cols() != dv.cols() || qv.rows() != dv.rows() * group {
            return Err(Error::shape(
                "group_hadamard",
                format!("{} vs {} with group {group}", shape_str(qv), shape_str(dv)),
            ));
        }
        let out = group_scale(qv, dv, group);
        let rg = self.rg(q) || self.rg(d);
        Ok(self.push(Op::GroupHadamard(q, d, group), out, rg))
    }

    /// Reverse sweep from a 1x1 root.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let (r, c) = self.value(root).shape();
        if (r, c) != (1, 1) {
            return Err(Error::NonScalarRoot { rows: r, cols: c });
        }
        let n = root.0 + 1;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[root.0] = Some(DenseMatrix::scalar(1.0));
        for i in (0..n).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &g)?;
        }
        Ok(())
    }

    fn accum(&mut self, v: Var, contrib: DenseMatrix) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(g) => g.add_assign(&contrib).expect("adjoint shape"),
            slot @ None => *slot = Some(contrib),
        }
    }

    fn propagate(&mut self, i: usize, g: &DenseMatrix) -> Result<()> {
        // The op is inspected through an immutable borrow; contributions are
        // computed first and accumulated afterwards.
        let mut out: Vec<(Var, DenseMatrix)> = Vec::with_capacity(2);
        {
            let node = &self.nodes[i];
            let val = |v: Var| &self.nodes[v.0].value;
            let rg = |v: Var| self.nodes[v.0].requires_grad;
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    if rg(*a) {
                        out.push((*a, g.clone()));
                    }
                    if rg(*b) {
                        out.push((*b, g.clone()));
                    }
                }
                Op::Sub(a, b) => {
                    if rg(*a) {
                        out.push((*a, g.clone()));
                    }
                    if rg(*b) {
                        out.push((*b, g.scale(-1.0)));
                    }
                }
                Op::Scale(a, s) => out.push((*a, g.scale(*s))),
                Op::MatMul(a, b) => {
                    if rg(*a) {
                        out.push((*a, g.matmul_t(val(*b))?));
                    }
                    if rg(*b) {
                        out.push((*b, val(*a).t_matmul(g)?));
                    }
                }
                Op::Hadamard(a, b) => {
                    if rg(*a) {
                        out.push((*a, g.hadamard(val(*b))?));
                    }
                    if rg(*b) {
                        out.push((*b, g.hadamard(val(*a))?));
                    }
                }
                Op::Transpose(a) => out.push((*a, g.transpose())),
                Op::Kron(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    let (m, nn) = av.shape();
                    let (p, q) = bv.shape();
                    if rg(*a) {
                        let ga = DenseMatrix::from_fn(m, nn, |ii, jj| {
                            let mut s = 0.0;
                            for k in 0..p {
                                for l in 0..q {
                                    s += g.get(ii * p + k, jj * q + l) * bv.get(k, l);
                                }
                            }
                            s
                        });
                        out.push((*a, ga));
                    }
                    if rg(*b) {
                        let gb = DenseMatrix::from_fn(p, q, |k, l| {
                            let mut s = 0.0;
                            for ii in 0..m {
                                for jj in 0..nn {
                                    s += g.get(ii * p + k, jj * q + l) * av.get(ii, jj);
                                }
                            }
                            s
                        });
                        out.push((*b, gb));
                    }
                }
                Op::DiagEmbed(a) => {
                    let (r, c) = val(*a).shape();
                    out.push((*a, DenseMatrix::new(r, c, g.diagonal())?));
                }
                Op::Reshape(a) => {
                    let (r, c) = val(*a).shape();
                    out.push((*a, g.reshape(r, c)?));
                }
                Op::Slice { src, r0, c0 } => {
                    let (r, c) = val(*src).shape();
                    let mut full = DenseMatrix::zeros(r, c);
                    for ii in 0..g.rows() {
                        for jj in 0..g.cols() {
                            full.set(r0 + ii, c0 + jj, g.get(ii, jj));
                        }
                    }
                    out.push((*src, full));
                }
                Op::SumSq(a) => out.push((*a, val(*a).scale(2.0 * g.item()))),
                Op::ReduceSum(a) => {
                    let (r, c) = val(*a).shape();
                    out.push((*a, DenseMatrix::filled(r, c, g.item())));
                }
                Op::RowSum(a) => {
                    let (r, c) = val(*a).shape();
                    out.push((*a, DenseMatrix::from_fn(r, c, |ii, _| g.get(ii, 0))));
                }
                Op::Elu(a) => out.push((*a, g.hadamard(&val(*a).map(elu_prime))?)),
                Op::EluPrime(a) => out.push((*a, g.hadamard(&val(*a).map(elu_second))?)),
                Op::LogSoftmax(a) => {
                    let y = &node.value;
                    let mut ga = g.clone();
                    for ii in 0..y.rows() {
                        let gs: f64 = g.row(ii).iter().sum();
                        for (gv, yv) in ga.row_mut(ii).iter_mut().zip(y.row(ii)) {
                            *gv -= yv.exp() * gs;
                        }
                    }
                    out.push((*a, ga));
                }
                Op::Exp(a) => out.push((*a, g.hadamard(&node.value)?)),
                Op::Log(a) => out.push((*a, g.hadamard(&val(*a).map(|x| 1.0 / x))?)),
                Op::LogAbsDet { src, inv_t } => out.push((*src, inv_t.scale(g.item()))),
                Op::BlockLogAbsDet { src, inv_t } => {
                    let d = inv_t.cols();
                    let mut ga = inv_t.clone();
                    for k in 0..g.rows() {
                        let w = g.get(k, 0);
                        for v in ga.data_mut()[k * d * d..(k + 1) * d * d].iter_mut() {
                            *v *= w;
                        }
                    }
                    out.push((*src, ga));
                }
                Op::TileRows(a) => {
                    let (r, c) = val(*a).shape();
                    let mut ga = DenseMatrix::zeros(r, c);
                    for (k, v) in g.data().iter().enumerate() {
                        ga.data_mut()[k % (r * c)] += v;
                    }
                    out.push((*a, ga));
                }
                Op::RepeatRows(a, rep) => {
                    let (r, c) = val(*a).shape();
                    let mut ga = DenseMatrix::zeros(r, c);
                    for ii in 0..r {
                        for k in 0..*rep {
                            let src = g.row(ii * rep + k);
                            for (d, s) in ga.row_mut(ii).iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                    out.push((*a, ga));
                }
                Op::NodeMix { s, z, nodes } => {
                    let (sv, zv) = (val(*s), val(*z));
                    if rg(*z) {
                        out.push((*z, DenseMatrix::node_mix(&sv.transpose(), g, *nodes)?));
                    }
                    if rg(*s) {
                        out.push((*s, node_mix_operator_grad(g, zv, *nodes)));
                    }
                }
                Op::NodewiseMatmul(x, w) => {
                    let (xv, wv) = (val(*x), val(*w));
                    if rg(*x) {
                        out.push((*x, g.nodewise_matmul(&wv.transpose())?));
                    }
                    if rg(*w) {
                        let n = xv.cols() / wv.rows();
                        let xf = xv.reshape(xv.rows() * n, wv.rows())?;
                        let gf = g.reshape(g.rows() * n, wv.cols())?;
                        out.push((*w, xf.t_matmul(&gf)?));
                    }
                }
                Op::AddNodeBias(x, b) => {
                    if rg(*x) {
                        out.push((*x, g.clone()));
                    }
                    if rg(*b) {
                        let c = val(*b).cols();
                        let mut gb = DenseMatrix::zeros(1, c);
                        for (k, v) in g.data().iter().enumerate() {
                            gb.data_mut()[k % c] += v;
                        }
                        out.push((*b, gb));
                    }
                }
                Op::GroupHadamard(q, d, group) => {
                    let (qv, dv) = (val(*q), val(*d));
                    if rg(*q) {
                        out.push((*q, group_scale(g, dv, *group)));
                    }
                    if rg(*d) {
                        let mut gd = DenseMatrix::zeros(dv.rows(), dv.cols());
                        for n in 0..dv.rows() {
                            for i in 0..*group {
                                let r = n * group + i;
                                for ((o, a), b) in
                                    gd.row_mut(n).iter_mut().zip(g.row(r)).zip(qv.row(r))
                                {
                                    *o += a * b;
                                }
                            }
                        }
                        out.push((*d, gd));
                    }
                }
            }
        }
        for (v, c) in out {
            self.accum(v, c);
        }
        Ok(())
    }
}

fn group_scale(q: &DenseMatrix, d: &DenseMatrix, group: usize) -> DenseMatrix {
    let mut out = q.clone();
    let c = q.cols();
    if c == 0 {
        return out;
    }
    for (r, row) in out.data_mut().chunks_mut(c).enumerate() {
        for (v, s) in row.iter_mut().zip(d.row(r / group)) {
            *v *= s;
        }
    }
    out
}

/// `Σ_r G_r Z_r^T` where each row is read as a `nodes x C` matrix.
fn node_mix_operator_grad(g: &DenseMatrix, z: &DenseMatrix, nodes: usize) -> DenseMatrix {
    let rows = g.rows();
    let c = g.cols() / nodes;
    let gather = |m: &DenseMatrix| {
        let mut t = DenseMatrix::zeros(nodes, rows * c);
        for r in 0..rows {
            let src = m.row(r);
            for v in 0..nodes {
                t.data_mut()[v * rows * c + r * c..v * rows * c + (r + 1) * c]
                    .copy_from_slice(&src[v * c..(v + 1) * c]);
            }
        }
        t
    };
    let gt = gather(g);
    let zt = gather(z);
    let mut out = DenseMatrix::zeros(nodes, nodes);
    gemm(false, true, &gt, &zt, 1.0, 0.0, &mut out);
    out
}
