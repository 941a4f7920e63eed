//! Invertible residual flow on graph signals.
//!
//! A signal `X ∈ R^{V×C}` is carried as a row-major row of length `V·C`
//! (node-major), and a batch as an `N × V·C` matrix. Every layer is linear on
//! such rows, `row ↦ row · Σ_k (S_kᵀ ⊗ Θ_k) + bias`, which lets the same code
//! push both samples and per-sample Jacobian stacks through a block.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::ad::{elu, elu_prime, Tape, Var};
use crate::error::{Error, Result};
use crate::graph::{cheb_basis, hop_masks, GraphFile, GraphSpec};
use crate::linalg::{DenseMatrix, LuFactor};

pub const MODEL_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    NodeFc,
    Cheb,
    L3,
}

/// Layer shape without parameters. `orders` lists Chebyshev degrees for
/// `Cheb`, hop orders for `L3`, and is empty for `NodeFc`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerTemplate {
    pub kind: LayerKind,
    #[serde(default)]
    pub orders: Vec<usize>,
}

impl LayerTemplate {
    pub fn node_fc() -> Self {
        Self {
            kind: LayerKind::NodeFc,
            orders: vec![],
        }
    }

    pub fn cheb(k: usize) -> Self {
        Self {
            kind: LayerKind::Cheb,
            orders: (0..=k).collect(),
        }
    }

    pub fn l3(orders: &[usize]) -> Self {
        Self {
            kind: LayerKind::L3,
            orders: orders.to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub blocks: usize,
    pub hidden: usize,
    pub layers: Vec<LayerTemplate>,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            blocks: 40,
            hidden: 64,
            layers: vec![LayerTemplate::node_fc(); 4],
        }
    }
}

#[derive(Clone, Debug)]
pub struct Layer {
    kind: LayerKind,
    orders: Vec<usize>,
    weights: Vec<DenseMatrix>,
    spatial: Vec<DenseMatrix>,
    bias: DenseMatrix,
    // Cheb: T_k(L̃) per order. L3: hop masks per order. NodeFc: empty.
    ops: Vec<DenseMatrix>,
}

impl Layer {
    fn new(
        template: &LayerTemplate,
        c_in: usize,
        c_out: usize,
        graph: &GraphSpec,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let terms = match template.kind {
            LayerKind::NodeFc => 1,
            _ => template.orders.len(),
        };
        if terms == 0 {
            return Err(Error::Config(format!(
                "{:?} layer needs at least one order",
                template.kind
            )));
        }
        let normal = Normal::new(0.0, (0.01 / c_in as f64).sqrt()).expect("positive std");
        let weights = (0..terms)
            .map(|_| DenseMatrix::from_fn(c_in, c_out, |_, _| normal.sample(rng)))
            .collect();
        let mut layer = Layer {
            kind: template.kind,
            orders: if template.kind == LayerKind::NodeFc {
                vec![]
            } else {
                template.orders.clone()
            },
            weights,
            spatial: vec![],
            bias: DenseMatrix::zeros(1, c_out),
            ops: vec![],
        };
        layer.bind(graph)?;
        if layer.kind == LayerKind::L3 {
            // Start from the row-normalized hop mask, a local average.
            layer.spatial = layer
                .ops
                .iter()
                .map(|m| {
                    let rs = m.row_sums();
                    DenseMatrix::from_fn(m.rows(), m.cols(), |i, j| m.get(i, j) / rs[i])
                })
                .collect();
        }
        Ok(layer)
    }

    fn bind(&mut self, graph: &GraphSpec) -> Result<()> {
        self.ops = match self.kind {
            LayerKind::NodeFc => vec![],
            LayerKind::Cheb => {
                let max = *self.orders.iter().max().expect("nonempty orders");
                let basis = cheb_basis(graph, max);
                self.orders.iter().map(|&k| basis[k].clone()).collect()
            }
            LayerKind::L3 => hop_masks(graph, &self.orders)?
                .into_iter()
                .map(|m| m.mask)
                .collect(),
        };
        Ok(())
    }

    pub fn kind(&self) -> LayerKind {
        self.kind
    }

    pub fn orders(&self) -> &[usize] {
        &self.orders
    }

    pub fn in_channels(&self) -> usize {
        self.weights[0].rows()
    }

    pub fn out_channels(&self) -> usize {
        self.weights[0].cols()
    }

    pub fn weights(&self) -> &[DenseMatrix] {
        &self.weights
    }

    pub fn spatial(&self) -> &[DenseMatrix] {
        &self.spatial
    }

    pub fn bias(&self) -> &DenseMatrix {
        &self.bias
    }

    /// Effective spatial operators `S_k`; empty means identity (NodeFc).
    pub fn spatial_operators(&self) -> Vec<DenseMatrix> {
        match self.kind {
            LayerKind::NodeFc => vec![],
            LayerKind::Cheb => self.ops.clone(),
            LayerKind::L3 => self
                .spatial
                .iter()
                .zip(&self.ops)
                .map(|(b, m)| b.hadamard(m).expect("V x V"))
                .collect(),
        }
    }

    fn apply_mask(&mut self) {
        if self.kind == LayerKind::L3 {
            for (b, m) in self.spatial.iter_mut().zip(&self.ops) {
                for (x, &keep) in b.data_mut().iter_mut().zip(m.data()) {
                    if keep == 0.0 {
                        *x = 0.0;
                    }
                }
            }
        }
    }

    /// Linear part on a batch of rows, without bias.
    fn linear(&self, x: &DenseMatrix, nodes: usize) -> Result<DenseMatrix> {
        if self.kind == LayerKind::NodeFc {
            return x.nodewise_matmul(&self.weights[0]);
        }
        let mut acc: Option<DenseMatrix> = None;
        for (s, w) in self.spatial_operators().iter().zip(&self.weights) {
            let y = DenseMatrix::node_mix(s, &x.nodewise_matmul(w)?, nodes)?;
            match &mut acc {
                Some(a) => a.add_assign(&y)?,
                None => acc = Some(y),
            }
        }
        Ok(acc.expect("at least one term"))
    }

    /// `X ↦ layer(X)` for a single `V x C_in` signal.
    pub fn apply(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        let nodes = x.rows();
        let row = x.reshape(1, x.rows() * x.cols())?;
        let out = add_bias(&self.linear(&row, nodes)?, &self.bias);
        out.reshape(nodes, self.out_channels())
    }

    /// Column-convention Jacobian of the linear part, `Σ_k S_k ⊗ Θ_kᵀ`.
    pub fn jacobian(&self, nodes: usize) -> DenseMatrix {
        if self.kind == LayerKind::NodeFc {
            return DenseMatrix::identity(nodes).kron(&self.weights[0].transpose());
        }
        let mut acc = DenseMatrix::zeros(nodes * self.out_channels(), nodes * self.in_channels());
        for (s, w) in self.spatial_operators().iter().zip(&self.weights) {
            acc.add_assign(&s.kron(&w.transpose())).expect("shapes");
        }
        acc
    }
}

fn add_bias(x: &DenseMatrix, b: &DenseMatrix) -> DenseMatrix {
    let c = b.cols();
    let mut out = x.clone();
    for (k, v) in out.data_mut().iter_mut().enumerate() {
        *v += b.data()[k % c];
    }
    out
}

#[derive(Clone, Debug)]
pub struct Block {
    layers: Vec<Layer>,
}

impl Block {
    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }
}

/// Per-layer tape handles. `ops` are the effective spatial operators.
#[derive(Clone, Debug)]
pub struct LayerVars {
    pub weights: Vec<Var>,
    pub spatial: Vec<Var>,
    pub bias: Var,
    ops: Vec<Var>,
}

/// Tape handles for every model parameter, in canonical order.
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub blocks: Vec<Vec<LayerVars>>,
    pub w_g: Var,
    pub b_g: Var,
    pub w_c: Var,
    pub b_c: Var,
}

impl ModelVars {
    /// Parameter leaves in the same order as [`FlowModel::params`].
    pub fn all(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for block in &self.blocks {
            for l in block {
                out.extend(&l.spatial);
                out.extend(&l.weights);
                out.push(l.bias);
            }
        }
        out.extend([self.w_g, self.b_g, self.w_c, self.b_c]);
        out
    }
}

/// Batched forward result: transported rows, per-row log-determinant and
/// per-row movement `½ Σ_b ‖g_b‖²`.
#[derive(Clone, Debug)]
pub struct BatchForward {
    pub z: DenseMatrix,
    pub logdet: Vec<f64>,
    pub movement: Vec<f64>,
    /// (row, block) pairs with a negative Jacobian determinant.
    pub negative_dets: usize,
}

/// Outputs of [`FlowModel::forward_tape`].
#[derive(Clone, Copy, Debug)]
pub struct TapeForward {
    pub z: Var,
    /// `N x 1` per-row log-determinant.
    pub logdet: Var,
    /// Scalar `Σ_rows Σ_b ‖g_b‖²` (not yet halved).
    pub movement_sq: Var,
    /// Number of (row, block) pairs whose Jacobian determinant is negative,
    /// i.e. where the block has folded over.
    pub negative_dets: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InverseOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for InverseOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 200,
        }
    }
}

#[derive(Clone, Debug)]
pub struct FlowModel {
    graph: GraphSpec,
    channels: usize,
    classes: usize,
    sigma2: f64,
    blocks: Vec<Block>,
    w_g: DenseMatrix,
    b_g: DenseMatrix,
    w_c: DenseMatrix,
    b_c: DenseMatrix,
}

impl FlowModel {
    pub fn new(
        graph: GraphSpec,
        channels: usize,
        classes: usize,
        arch: &ArchConfig,
        sigma2: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if !(sigma2 > 0.0 && sigma2.is_finite()) {
            return Err(Error::Config(format!(
                "sigma2 must be positive, got {sigma2}"
            )));
        }
        if arch.blocks == 0 || arch.layers.is_empty() || arch.hidden == 0 {
            return Err(Error::Config(
                "need at least one block, one layer and hidden >= 1".into(),
            ));
        }
        if channels == 0 || classes == 0 {
            return Err(Error::Config(
                "channels and classes must be positive".into(),
            ));
        }
        let depth = arch.layers.len();
        let mut blocks = Vec::with_capacity(arch.blocks);
        for _ in 0..arch.blocks {
            let mut layers = Vec::with_capacity(depth);
            for (i, t) in arch.layers.iter().enumerate() {
                let c_in = if i == 0 { channels } else { arch.hidden };
                let c_out = if i + 1 == depth {
                    channels
                } else {
                    arch.hidden
                };
                layers.push(Layer::new(t, c_in, c_out, &graph, rng)?);
            }
            blocks.push(Block { layers });
        }
        let sigma = sigma2.sqrt();
        let w_g = DenseMatrix::from_fn(channels, classes, |i, k| {
            if i == 0 {
                3.0 * sigma * (k + 1) as f64
            } else {
                0.0
            }
        });
        let normal = Normal::new(0.0, (0.01 / channels as f64).sqrt()).expect("positive std");
        let w_c = DenseMatrix::from_fn(classes, channels, |_, _| normal.sample(rng));
        Ok(Self {
            graph,
            channels,
            classes,
            sigma2,
            blocks,
            w_g,
            b_g: DenseMatrix::zeros(1, channels),
            w_c,
            b_c: DenseMatrix::zeros(1, classes),
        })
    }

    pub fn graph(&self) -> &GraphSpec {
        &self.graph
    }

    pub fn nodes(&self) -> usize {
        self.graph.num_nodes()
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Width of a flattened sample row, `V·C`.
    pub fn dim(&self) -> usize {
        self.nodes() * self.channels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn head(&self) -> (&DenseMatrix, &DenseMatrix) {
        (&self.w_g, &self.b_g)
    }

    pub fn classifier(&self) -> (&DenseMatrix, &DenseMatrix) {
        (&self.w_c, &self.b_c)
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.data().len()).sum()
    }

    /// All parameters in canonical order: per block, per layer the spatial
    /// matrices (L3), channel weights and bias; then `W_g, b_g, W_c, b_c`.
    pub fn params(&self) -> Vec<&DenseMatrix> {
        let mut out = Vec::new();
        for b in &self.blocks {
            for l in &b.layers {
                out.extend(&l.spatial);
                out.extend(&l.weights);
                out.push(&l.bias);
            }
        }
        out.extend([&self.w_g, &self.b_g, &self.w_c, &self.b_c]);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut DenseMatrix> {
        let mut out = Vec::new();
        for b in &mut self.blocks {
            for l in &mut b.layers {
                out.extend(l.spatial.iter_mut());
                out.extend(l.weights.iter_mut());
                out.push(&mut l.bias);
            }
        }
        out.push(&mut self.w_g);
        out.push(&mut self.b_g);
        out.push(&mut self.w_c);
        out.push(&mut self.b_c);
        out
    }

    /// Zeroes every off-mask entry of the L3 spatial matrices.
    pub fn apply_masks(&mut self) {
        for b in &mut self.blocks {
            for l in &mut b.layers {
                l.apply_mask();
            }
        }
    }

    /// Head mean `W_g e_y + b_g` for class `y` (0-based).
    pub fn class_mean(&self, y: usize) -> Vec<f64> {
        (0..self.channels)
            .map(|i| self.w_g.get(i, y) + self.b_g.get(0, i))
            .collect()
    }

    /// Rows of head means for a batch of label vectors (`N x V` labels).
    pub fn mean_rows(&self, labels: &[Vec<usize>]) -> DenseMatrix {
        let c = self.channels;
        let mut out = DenseMatrix::zeros(labels.len(), self.dim());
        for (n, y) in labels.iter().enumerate() {
            for (v, &k) in y.iter().enumerate() {
                out.row_mut(n)[v * c..(v + 1) * c].copy_from_slice(&self.class_mean(k));
            }
        }
        out
    }

    /// Smallest pairwise head-mean distance divided by σ.
    pub fn mean_separation(&self) -> f64 {
        let mut best = f64::INFINITY;
        for a in 0..self.classes {
            for b in a + 1..self.classes {
                let (ma, mb) = (self.class_mean(a), self.class_mean(b));
                let d: f64 = ma.iter().zip(&mb).map(|(x, y)| (x - y).powi(2)).sum();
                best = best.min(d.sqrt());
            }
        }
        best / self.sigma2.sqrt()
    }

    fn check_rows(&self, x: &DenseMatrix, op: &'static str) -> Result<()> {
        if x.cols() != self.dim() {
            return Err(Error::Shape {
                op,
                detail: format!("rows of width {} for V*C = {}", x.cols(), self.dim()),
            });
        }
        Ok(())
    }

    /// `g_b` on a batch of rows.
    pub fn residual(&self, b: usize, x: &DenseMatrix) -> Result<DenseMatrix> {
        let nodes = self.nodes();
        let layers = &self.blocks[b].layers;
        let mut h = x.clone();
        for (i, l) in layers.iter().enumerate() {
            let pre = add_bias(&l.linear(&h, nodes)?, &l.bias);
            h = if i + 1 < layers.len() {
                pre.map(elu)
            } else {
                pre
            };
        }
        Ok(h)
    }

    /// `g_b` together with the stacked per-row transposed Jacobians
    /// (`N·VC x VC`; block `n` is `J_{g_b}(x_n)ᵀ`).
    pub fn residual_with_jacobian(
        &self,
        b: usize,
        x: &DenseMatrix,
    ) -> Result<(DenseMatrix, DenseMatrix)> {
        let nodes = self.nodes();
        let d = self.dim();
        let layers = &self.blocks[b].layers;
        let mut h = x.clone();
        let mut q = DenseMatrix::identity(d).tile_rows(x.rows());
        for (i, l) in layers.iter().enumerate() {
            let pre = add_bias(&l.linear(&h, nodes)?, &l.bias);
            q = l.linear(&q, nodes)?;
            if i + 1 < layers.len() {
                let dphi = pre.map(elu_prime);
                let c = q.cols();
                for (r, row) in q.data_mut().chunks_mut(c).enumerate() {
                    for (v, s) in row.iter_mut().zip(dphi.row(r / d)) {
                        *v *= s;
                    }
                }
                h = pre.map(elu);
            } else {
                h = pre;
            }
        }
        Ok((h, q))
    }

    /// Transports a batch of rows without Jacobians.
    pub fn transform(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        self.check_rows(x, "transform")?;
        let mut h = x.clone();
        for b in 0..self.blocks.len() {
            let g = self.residual(b, &h)?;
            h.add_assign(&g)?;
        }
        Ok(h)
    }

    pub fn forward_batch(&self, x: &DenseMatrix) -> Result<BatchForward> {
        self.check_rows(x, "forward")?;
        let n = x.rows();
        let d = self.dim();
        let mut h = x.clone();
        let mut logdet = vec![0.0; n];
        let mut movement = vec![0.0; n];
        let mut negative_dets = 0;
        for b in 0..self.blocks.len() {
            let (g, q) = self.residual_with_jacobian(b, &h)?;
            for r in 0..n {
                let mut jac =
                    DenseMatrix::new(d, d, q.data()[r * d * d..(r + 1) * d * d].to_vec())?;
                for i in 0..d {
                    jac.set(i, i, jac.get(i, i) + 1.0);
                }
                let lu = LuFactor::new(&jac).map_err(|_| Error::SingularJacobian { block: b })?;
                let (ld, sign) = lu.logabsdet();
                if !(ld >= 1e-300f64.ln()) {
                    return Err(Error::SingularJacobian { block: b });
                }
                negative_dets += usize::from(sign < 0.0);
                logdet[r] += ld;
                movement[r] += 0.5 * g.row(r).iter().map(|v| v * v).sum::<f64>();
            }
            h.add_assign(&g)?;
        }
        Ok(BatchForward {
            z: h,
            logdet,
            movement,
            negative_dets,
        })
    }

    /// Single signal `X ∈ R^{V×C}` to `(Z, logdet, movement)`.
    pub fn forward(&self, x: &DenseMatrix) -> Result<(DenseMatrix, f64, f64)> {
        if x.shape() != (self.nodes(), self.channels) {
            return Err(Error::shape(
                "forward",
                format!(
                    "{}x{} signal for V={}, C={}",
                    x.rows(),
                    x.cols(),
                    self.nodes(),
                    self.channels
                ),
            ));
        }
        let out = self.forward_batch(&x.reshape(1, self.dim())?)?;
        Ok((
            out.z.reshape(self.nodes(), self.channels)?,
            out.logdet[0],
            out.movement[0],
        ))
    }

    /// Block map and its column-convention Jacobian `J_b`, assembled from
    /// Kronecker factors on a tape.
    pub fn block_forward(&self, b: usize, x: &DenseMatrix) -> Result<(DenseMatrix, DenseMatrix)> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, false);
        let row = tape.constant(x.reshape(1, self.dim())?);
        let (y, j) = self.block_forward_tape(&mut tape, &vars, b, row)?;
        Ok((
            tape.value(y).reshape(self.nodes(), self.channels)?,
            tape.value(j).clone(),
        ))
    }

    /// Kronecker-assembled `J_b = I + J_L D_{L-1} ⋯ D_1 J_1` for a single
    /// `1 x VC` row.
    pub fn block_forward_tape(
        &self,
        tape: &mut Tape,
        vars: &ModelVars,
        b: usize,
        row: Var,
    ) -> Result<(Var, Var)> {
        let nodes = self.nodes();
        let d = self.dim();
        let layers = &self.blocks[b].layers;
        let eye_v = tape.constant(DenseMatrix::identity(nodes));
        let mut h = row;
        let mut prod: Option<Var> = None;
        for (i, (l, lv)) in layers.iter().zip(&vars.blocks[b]).enumerate() {
            let lin = layer_linear_tape(tape, l, lv, h, nodes)?;
            let pre = tape.add_node_bias(lin, lv.bias)?;
            let mut jl: Option<Var> = None;
            let ops: Vec<Var> = if l.kind == LayerKind::NodeFc {
                vec![eye_v]
            } else {
                lv.ops.clone()
            };
            for (s, w) in ops.iter().zip(&lv.weights) {
                let wt = tape.transpose(*w);
                let k = tape.kron(*s, wt);
                jl = Some(match jl {
                    Some(a) => tape.add(a, k)?,
                    None => k,
                });
            }
            let jl = jl.expect("one term");
            prod = Some(match prod {
                Some(p) => tape.matmul(jl, p)?,
                None => jl,
            });
            if i + 1 < layers.len() {
                let dphi = tape.elu_prime(pre);
                let col = tape.transpose(dphi);
                let diag = tape.diag_embed(col)?;
                let p = prod.expect("set above");
                prod = Some(tape.matmul(diag, p)?);
                h = tape.elu(pre);
            } else {
                h = pre;
            }
        }
        let y = tape.add(row, h)?;
        let eye = tape.constant(DenseMatrix::identity(d));
        let j = tape.add(eye, prod.expect("nonempty block"))?;
        Ok((y, j))
    }

    /// Registers parameters on `tape`, as trainable leaves when `trainable`.
    pub fn register(&self, tape: &mut Tape, trainable: bool) -> ModelVars {
        let leaf = |t: &mut Tape, m: &DenseMatrix| {
            if trainable {
                t.param(m.clone())
            } else {
                t.constant(m.clone())
            }
        };
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let mut lvs = Vec::with_capacity(b.layers.len());
            for l in &b.layers {
                let spatial: Vec<Var> = l.spatial.iter().map(|m| leaf(tape, m)).collect();
                let weights: Vec<Var> = l.weights.iter().map(|m| leaf(tape, m)).collect();
                let bias = leaf(tape, &l.bias);
                lvs.push(LayerVars {
                    weights,
                    spatial,
                    bias,
                    ops: vec![],
                });
            }
            blocks.push(lvs);
        }
        let w_g = leaf(tape, &self.w_g);
        let b_g = leaf(tape, &self.b_g);
        let w_c = leaf(tape, &self.w_c);
        let b_c = leaf(tape, &self.b_c);
        // Spatial operators are derived after all leaves so that leaves stay
        // contiguous in canonical order.
        for (b, lvs) in self.blocks.iter().zip(blocks.iter_mut()) {
            for (l, lv) in b.layers.iter().zip(lvs.iter_mut()) {
                lv.ops = match l.kind {
                    LayerKind::NodeFc => vec![],
                    LayerKind::Cheb => l.ops.iter().map(|t| tape.constant(t.clone())).collect(),
                    LayerKind::L3 => l
                        .ops
                        .iter()
                        .zip(&lv.spatial)
                        .map(|(m, &s)| {
                            let mask = tape.constant(m.clone());
                            tape.hadamard(s, mask).expect("V x V")
                        })
                        .collect(),
                };
            }
        }
        ModelVars {
            blocks,
            w_g,
            b_g,
            w_c,
            b_c,
        }
    }

    /// Batched forward on a tape with per-row log-determinants. Errors carry
    /// the offending block.
    pub fn forward_tape(&self, tape: &mut Tape, vars: &ModelVars, x: Var) -> Result<TapeForward> {
        let nodes = self.nodes();
        let d = self.dim();
        let n = tape.value(x).rows();
        self.check_rows(tape.value(x), "forward")?;
        let eye_stack = tape.constant(DenseMatrix::identity(d).tile_rows(n));
        let mut h = x;
        let mut logdet: Option<Var> = None;
        let mut movement: Option<Var> = None;
        let mut negative_dets = 0;
        for (b, block) in self.blocks.iter().enumerate() {
            let mut a = h;
            let mut q = eye_stack;
            let layers = &block.layers;
            for (i, (l, lv)) in layers.iter().zip(&vars.blocks[b]).enumerate() {
                let lin = layer_linear_tape(tape, l, lv, a, nodes)?;
                let pre = tape.add_node_bias(lin, lv.bias)?;
                q = layer_linear_tape(tape, l, lv, q, nodes)?;
                if i + 1 < layers.len() {
                    let dphi = tape.elu_prime(pre);
                    q = tape.group_hadamard(q, dphi, d)?;
                    a = tape.elu(pre);
                } else {
                    a = pre;
                }
            }
            let jac = tape.add(q, eye_stack)?;
            let (ld, neg) = tape
                .block_logabsdet_signed(jac, d)
                .map_err(|_| Error::SingularJacobian { block: b })?;
            negative_dets += neg;
            let mv = tape.sum_sq(a);
            logdet = Some(match logdet {
                Some(s) => tape.add(s, ld)?,
                None => ld,
            });
            movement = Some(match movement {
                Some(s) => tape.add(s, mv)?,
                None => mv,
            });
            h = tape.add(h, a)?;
        }
        Ok(TapeForward {
            z: h,
            logdet: logdet.expect("at least one block"),
            movement_sq: movement.expect("at least one block"),
            negative_dets,
        })
    }

    /// Fixed-point inverse `x ← y − g_b(x)` per block in reverse order,
    /// starting at `x = y`.
    pub fn inverse(&self, z: &DenseMatrix, opts: InverseOptions) -> Result<DenseMatrix> {
        self.check_rows(z, "inverse")?;
        let mut y = z.clone();
        for b in (0..self.blocks.len()).rev() {
            let (x, failed) = self.fixed_point(b, &y, opts, 1.0)?;
            if let Some(&(row, residual)) = failed.first() {
                return Err(Error::NonConvergent {
                    block: b,
                    row,
                    residual,
                });
            }
            y = x;
        }
        Ok(y)
    }

    /// Inverse with fallbacks for rows where plain iteration stalls: damped
    /// iteration `x ← x + ½(y − g(x) − x)`, then Newton steps with the exact
    /// block Jacobian.
    pub fn inverse_robust(&self, z: &DenseMatrix, opts: InverseOptions) -> Result<DenseMatrix> {
        self.check_rows(z, "inverse")?;
        let mut y = z.clone();
        for b in (0..self.blocks.len()).rev() {
            let (mut x, failed) = self.fixed_point(b, &y, opts, 1.0)?;
            if !failed.is_empty() {
                let rows: Vec<usize> = failed.iter().map(|f| f.0).collect();
                let ys = y.select_rows(&rows);
                let (xd, failed_d) = self.fixed_point(b, &ys, opts, 0.5)?;
                let mut still = Vec::new();
                for (k, &r) in rows.iter().enumerate() {
                    x.row_mut(r).copy_from_slice(xd.row(k));
                }
                for &(k, res) in &failed_d {
                    still.push((rows[k], res));
                }
                for (r, _) in still {
                    let xr = self.newton_row(b, r, y.row(r), opts)?;
                    x.row_mut(r).copy_from_slice(&xr);
                }
            }
            y = x;
        }
        Ok(y)
    }

    /// Returns the iterate and `(row, last step)` for rows that did not
    /// converge.
    fn fixed_point(
        &self,
        b: usize,
        y: &DenseMatrix,
        opts: InverseOptions,
        damping: f64,
    ) -> Result<(DenseMatrix, Vec<(usize, f64)>)> {
        let mut x = y.clone();
        let mut active: Vec<usize> = (0..y.rows()).collect();
        let mut last = vec![f64::INFINITY; y.rows()];
        for _ in 0..opts.max_iter {
            if active.is_empty() {
                break;
            }
            let xa = x.select_rows(&active);
            let g = self.residual(b, &xa)?;
            let mut next_active = Vec::with_capacity(active.len());
            for (k, &r) in active.iter().enumerate() {
                let yr = y.row(r);
                let xr = xa.row(k);
                let gr = g.row(k);
                let mut step = 0.0f64;
                let dst = x.row_mut(r);
                for i in 0..yr.len() {
                    let target = yr[i] - gr[i];
                    let new = xr[i] + damping * (target - xr[i]);
                    step = step.max((new - xr[i]).abs());
                    dst[i] = new;
                }
                if step.is_nan() {
                    step = f64::INFINITY;
                }
                last[r] = step;
                if !(step < opts.tol) {
                    next_active.push(r);
                }
            }
            active = next_active;
        }
        Ok((x, active.into_iter().map(|r| (r, last[r])).collect()))
    }

    fn newton_row(
        &self,
        b: usize,
        row: usize,
        y: &[f64],
        opts: InverseOptions,
    ) -> Result<Vec<f64>> {
        let d = self.dim();
        let yrow = DenseMatrix::row_vector(y);
        let mut x = yrow.clone();
        let mut residual = f64::INFINITY;
        for _ in 0..opts.max_iter {
            let (g, q) = self.residual_with_jacobian(b, &x)?;
            let f = x.add(&g)?.sub(&yrow)?;
            residual = f.max_abs();
            // (I + J_g) δ = f, with q holding J_gᵀ.
            let mut jac = q.transpose();
            for i in 0..d {
                jac.set(i, i, jac.get(i, i) + 1.0);
            }
            let delta = match LuFactor::new(&jac).and_then(|lu| lu.solve(&f.transpose())) {
                Ok(dl) => dl,
                Err(_) => break,
            };
            let step = delta.max_abs();
            for i in 0..d {
                x.data_mut()[i] -= delta.data()[i];
            }
            if !step.is_finite() {
                break;
            }
            if step < opts.tol {
                let g = self.residual(b, &x)?;
                residual = x.add(&g)?.sub(&yrow)?.max_abs();
                if residual <= 10.0 * opts.tol {
                    return Ok(x.into_data());
                }
            }
        }
        Err(Error::NonConvergent {
            block: b,
            row,
            residual,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&ModelFile::from(self))?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(text)?;
        file.try_into()
    }
}

/// Linear part of a layer on tape rows.
fn layer_linear_tape(
    tape: &mut Tape,
    layer: &Layer,
    lv: &LayerVars,
    x: Var,
    nodes: usize,
) -> Result<Var> {
    if layer.kind == LayerKind::NodeFc {
        return tape.nodewise_matmul(x, lv.weights[0]);
    }
    let mut acc: Option<Var> = None;
    for (s, w) in lv.ops.iter().zip(&lv.weights) {
        let z = tape.nodewise_matmul(x, *w)?;
        let y = tape.node_mix(*s, z, nodes)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, y)?,
            None => y,
        });
    }
    Ok(acc.expect("at least one term"))
}

#[derive(Serialize, Deserialize)]
struct LayerFile {
    kind: LayerKind,
    orders: Vec<usize>,
    weights: Vec<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    spatial: Vec<Vec<Vec<f64>>>,
    bias: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct BlockFile {
    layers: Vec<LayerFile>,
}

#[derive(Serialize, Deserialize)]
struct HeadFile {
    #[serde(rename = "W_g")]
    w_g: Vec<Vec<f64>>,
    b_g: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ClassifierFile {
    #[serde(rename = "W_c")]
    w_c: Vec<Vec<f64>>,
    b_c: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    version: u32,
    graph: GraphFile,
    channels: usize,
    classes: usize,
    sigma2: f64,
    blocks: Vec<BlockFile>,
    head: HeadFile,
    classifier: ClassifierFile,
}

impl From<&FlowModel> for ModelFile {
    fn from(m: &FlowModel) -> Self {
        ModelFile {
            version: MODEL_VERSION,
            graph: m.graph.clone().into(),
            channels: m.channels,
            classes: m.classes,
            sigma2: m.sigma2,
            blocks: m
                .blocks
                .iter()
                .map(|b| BlockFile {
                    layers: b
                        .layers
                        .iter()
                        .map(|l| LayerFile {
                            kind: l.kind,
                            orders: l.orders.clone(),
                            weights: l.weights.iter().map(DenseMatrix::to_rows).collect(),
                            spatial: l.spatial.iter().map(DenseMatrix::to_rows).collect(),
                            bias: l.bias.data().to_vec(),
                        })
                        .collect(),
                })
                .collect(),
            head: HeadFile {
                w_g: m.w_g.to_rows(),
                b_g: m.b_g.data().to_vec(),
            },
            classifier: ClassifierFile {
                w_c: m.w_c.to_rows(),
                b_c: m.b_c.data().to_vec(),
            },
        }
    }
}

fn expect_shape(m: &DenseMatrix, shape: (usize, usize), what: &str) -> Result<()> {
    if m.shape() != shape {
        return Err(Error::Config(format!(
            "{what}: expected {}x{}, found {}x{}",
            shape.0,
            shape.1,
            m.rows(),
            m.cols()
        )));
    }
    Ok(())
}

impl TryFrom<ModelFile> for FlowModel {
    type Error = Error;

    fn try_from(f: ModelFile) -> Result<Self> {
        if f.version != MODEL_VERSION {
            return Err(Error::Config(format!(
                "unsupported model version {}",
                f.version
            )));
        }
        let graph = GraphSpec::try_from(f.graph)?;
        let nodes = graph.num_nodes();
        if f.blocks.is_empty() || !(f.sigma2 > 0.0) || f.channels == 0 || f.classes == 0 {
            return Err(Error::Config(
                "model needs blocks, sigma2 > 0, channels and classes".into(),
            ));
        }
        let mut blocks = Vec::with_capacity(f.blocks.len());
        for (bi, bf) in f.blocks.into_iter().enumerate() {
            let mut layers = Vec::with_capacity(bf.layers.len());
            let mut c_prev = f.channels;
            for (li, lf) in bf.layers.into_iter().enumerate() {
                let what = format!("block {bi} layer {li}");
                let weights = lf
                    .weights
                    .iter()
                    .map(|w| DenseMatrix::from_rows(w))
                    .collect::<Result<Vec<_>>>()?;
                let spatial = lf
                    .spatial
                    .iter()
                    .map(|w| DenseMatrix::from_rows(w))
                    .collect::<Result<Vec<_>>>()?;
                let terms = match lf.kind {
                    LayerKind::NodeFc => 1,
                    _ => lf.orders.len(),
                };
                if weights.len() != terms || terms == 0 {
                    return Err(Error::Config(format!(
                        "{what}: expected {terms} weight matrices"
                    )));
                }
                let c_out = weights[0].cols();
                for w in &weights {
                    expect_shape(w, (c_prev, c_out), &what)?;
                }
                let want_spatial = if lf.kind == LayerKind::L3 { terms } else { 0 };
                if spatial.len() != want_spatial {
                    return Err(Error::Config(format!(
                        "{what}: expected {want_spatial} spatial matrices"
                    )));
                }
                for s in &spatial {
                    expect_shape(s, (nodes, nodes), &what)?;
                }
                if lf.bias.len() != c_out {
                    return Err(Error::Config(format!(
                        "{what}: bias length {}",
                        lf.bias.len()
                    )));
                }
                let mut layer = Layer {
                    kind: lf.kind,
                    orders: lf.orders,
                    weights,
                    spatial,
                    bias: DenseMatrix::row_vector(&lf.bias),
                    ops: vec![],
                };
                layer.bind(&graph)?;
                c_prev = c_out;
                layers.push(layer);
            }
            if layers.is_empty() || c_prev != f.channels {
                return Err(Error::Config(format!("block {bi} does not map C to C")));
            }
            blocks.push(Block { layers });
        }
        let w_g = DenseMatrix::from_rows(&f.head.w_g)?;
        expect_shape(&w_g, (f.channels, f.classes), "W_g")?;
        let w_c = DenseMatrix::from_rows(&f.classifier.w_c)?;
        expect_shape(&w_c, (f.classes, f.channels), "W_c")?;
        if f.head.b_g.len() != f.channels || f.classifier.b_c.len() != f.classes {
            return Err(Error::Config(
                "bias lengths do not match channels/classes".into(),
            ));
        }
        Ok(FlowModel {
            graph,
            channels: f.channels,
            classes: f.classes,
            sigma2: f.sigma2,
            blocks,
            w_g,
            b_g: DenseMatrix::row_vector(&f.head.b_g),
            w_c,
            b_c: DenseMatrix::row_vector(&f.classifier.b_c),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::logabsdet;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn mixed_arch(blocks: usize) -> ArchConfig {
        ArchConfig {
            blocks,
            hidden: 4,
            layers: vec![
                LayerTemplate::node_fc(),
                LayerTemplate::cheb(2),
                LayerTemplate::l3(&[0, 1]),
            ],
        }
    }

    /// Scales block parameters up so the maps are visibly nonlinear.
    fn perturb(model: &mut FlowModel, rng: &mut ChaCha8Rng, scale: f64) {
        let n = model.params().len() - 4;
        for p in model.params_mut().into_iter().take(n) {
            for v in p.data_mut() {
                *v += scale * rng.random_range(-1.0..1.0);
            }
        }
        model.apply_masks();
    }

    fn fd_jacobian(f: &dyn Fn(&[f64]) -> Vec<f64>, x: &[f64]) -> DenseMatrix {
        let d = x.len();
        let m = f(x).len();
        let mut j = DenseMatrix::zeros(m, d);
        for k in 0..d {
            let h = 1e-6 * x[k].abs().max(1.0);
            let mut xp = x.to_vec();
            xp[k] += h;
            let mut xm = x.to_vec();
            xm[k] -= h;
            let (fp, fm) = (f(&xp), f(&xm));
            for i in 0..m {
                j.set(i, k, (fp[i] - fm[i]) / (2.0 * h));
            }
        }
        j
    }

    #[test]
    fn zero_weights_give_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let g = GraphSpec::path(3).unwrap();
        let mut m = FlowModel::new(g, 2, 2, &mixed_arch(2), 0.1, &mut rng).unwrap();
        let n = m.params().len() - 4;
        for p in m.params_mut().into_iter().take(n) {
            p.data_mut().fill(0.0);
        }
        let x = DenseMatrix::from_fn(3, 2, |i, j| (i * 2 + j) as f64 - 2.5);
        let (z, ld, mv) = m.forward(&x).unwrap();
        assert_eq!(z, x);
        assert_eq!((ld, mv), (0.0, 0.0));
        let (y, j) = m.block_forward(0, &x).unwrap();
        assert_eq!(y, x);
        assert_eq!(j, DenseMatrix::identity(6));
        let back = m
            .inverse(&x.reshape(1, 6).unwrap(), InverseOptions::default())
            .unwrap();
        assert_eq!(back, x.reshape(1, 6).unwrap());
    }

    #[test]
    fn layer_reductions() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = GraphSpec::path(3).unwrap();
        let fc = Layer::new(&LayerTemplate::node_fc(), 2, 3, &g, &mut rng).unwrap();
        let mut cheb = Layer::new(&LayerTemplate::cheb(0), 2, 3, &g, &mut rng).unwrap();
        cheb.weights[0] = fc.weights[0].clone();
        let mut l3 = Layer::new(&LayerTemplate::l3(&[0]), 2, 3, &g, &mut rng).unwrap();
        l3.weights[0] = fc.weights[0].clone();
        assert_eq!(l3.spatial[0], DenseMatrix::identity(3));
        let x = DenseMatrix::from_fn(3, 2, |i, j| (i as f64 - 1.0) * (j as f64 + 0.5));
        let a = fc.apply(&x).unwrap();
        assert_eq!(cheb.apply(&x).unwrap(), a);
        assert_eq!(l3.apply(&x).unwrap(), a);
        let mut id = Layer::new(&LayerTemplate::node_fc(), 2, 2, &g, &mut rng).unwrap();
        id.weights[0] = DenseMatrix::identity(2);
        assert_eq!(id.apply(&x).unwrap(), x);
    }

    #[test]
    fn block_jacobian_matches_finite_differences_single_node() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let arch = ArchConfig {
            blocks: 1,
            hidden: 5,
            layers: vec![LayerTemplate::node_fc(); 2],
        };
        let mut m = FlowModel::new(GraphSpec::single(), 2, 2, &arch, 0.1, &mut rng).unwrap();
        perturb(&mut m, &mut rng, 0.5);
        let x = DenseMatrix::row_vector(&[0.3, -0.7]);
        let (_, j) = m.block_forward(0, &x).unwrap();
        let f = |v: &[f64]| {
            let r = DenseMatrix::row_vector(v);
            r.add(&m.residual(0, &r).unwrap()).unwrap().into_data()
        };
        let fd = fd_jacobian(&f, x.data());
        assert!(j.max_abs_diff(&fd).unwrap() <= 1e-5);
    }

    #[test]
    fn cheb_block_jacobian_on_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let arch = ArchConfig {
            blocks: 1,
            hidden: 3,
            layers: vec![LayerTemplate::cheb(2); 2],
        };
        let mut m =
            FlowModel::new(GraphSpec::path(3).unwrap(), 2, 2, &arch, 0.1, &mut rng).unwrap();
        perturb(&mut m, &mut rng, 0.4);
        let x = DenseMatrix::from_fn(3, 2, |_, _| rng.random_range(-1.0..1.0));
        let (_, j) = m.block_forward(0, &x).unwrap();
        let f = |v: &[f64]| {
            let r = DenseMatrix::row_vector(v);
            r.add(&m.residual(0, &r).unwrap()).unwrap().into_data()
        };
        let fd = fd_jacobian(&f, &x.clone().into_data());
        assert!(j.max_abs_diff(&fd).unwrap() <= 1e-5);
        // Batched stack agrees with the Kronecker assembly.
        let (_, q) = m
            .residual_with_jacobian(0, &x.reshape(1, 6).unwrap())
            .unwrap();
        let jb = q.transpose().add(&DenseMatrix::identity(6)).unwrap();
        assert!(jb.max_abs_diff(&j).unwrap() <= 1e-12);
    }

    #[test]
    fn composite_logdet_matches_fd_jacobian() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut m = FlowModel::new(
            GraphSpec::path(3).unwrap(),
            2,
            2,
            &mixed_arch(2),
            0.1,
            &mut rng,
        )
        .unwrap();
        perturb(&mut m, &mut rng, 0.3);
        let x = DenseMatrix::from_fn(3, 2, |_, _| rng.random_range(-1.0..1.0));
        let (_, ld, mv) = m.forward(&x).unwrap();
        assert!(mv >= 0.0);
        let f = |v: &[f64]| {
            m.transform(&DenseMatrix::row_vector(v))
                .unwrap()
                .into_data()
        };
        let fd = fd_jacobian(&f, &x.clone().into_data());
        let (ld_fd, _) = logabsdet(&fd).unwrap();
        assert!((ld - ld_fd).abs() <= 1e-4, "{ld} vs {ld_fd}");
    }

    #[test]
    fn tape_forward_matches_value_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut m = FlowModel::new(
            GraphSpec::path(3).unwrap(),
            2,
            2,
            &mixed_arch(3),
            0.1,
            &mut rng,
        )
        .unwrap();
        perturb(&mut m, &mut rng, 0.3);
        let x = DenseMatrix::from_fn(7, 6, |_, _| rng.random_range(-2.0..2.0));
        let v = m.forward_batch(&x).unwrap();
        let mut tape = Tape::new();
        let vars = m.register(&mut tape, true);
        let xv = tape.constant(x.clone());
        let out = m.forward_tape(&mut tape, &vars, xv).unwrap();
        assert!(tape.value(out.z).max_abs_diff(&v.z).unwrap() <= 1e-12);
        for r in 0..7 {
            assert!((tape.value(out.logdet).get(r, 0) - v.logdet[r]).abs() <= 1e-10);
        }
        let mv: f64 = v.movement.iter().sum();
        assert!((0.5 * tape.value(out.movement_sq).item() - mv).abs() <= 1e-10);
    }

    #[test]
    fn contractive_model_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let arch = ArchConfig {
            blocks: 4,
            hidden: 8,
            layers: vec![LayerTemplate::node_fc(); 3],
        };
        let mut m = FlowModel::new(GraphSpec::single(), 2, 2, &arch, 0.1, &mut rng).unwrap();
        perturb(&mut m, &mut rng, 0.1);
        let x = DenseMatrix::from_fn(200, 2, |_, _| rng.random_range(-3.0..3.0));
        let z = m.transform(&x).unwrap();
        let back = m.inverse(&z, InverseOptions::default()).unwrap();
        assert!(back.max_abs_diff(&x).unwrap() <= 1e-6);
        let fwd = m
            .transform(&m.inverse(&x, InverseOptions::default()).unwrap())
            .unwrap();
        assert!(fwd.max_abs_diff(&x).unwrap() <= 1e-7);
    }

    #[test]
    fn newton_fallback_recovers_expansive_block() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let arch = ArchConfig {
            blocks: 1,
            hidden: 1,
            layers: vec![LayerTemplate::node_fc()],
        };
        let mut m = FlowModel::new(GraphSpec::single(), 1, 1, &arch, 0.1, &mut rng).unwrap();
        // g(x) = 3.5x: plain and damped iterations diverge, the map
        // x ↦ 4.5x is still invertible.
        m.params_mut()[0].data_mut()[0] = 3.5;
        let z = DenseMatrix::column_vector(&[1.0, -2.0]);
        let err = m.inverse(&z, InverseOptions::default()).unwrap_err();
        assert!(matches!(err, Error::NonConvergent { block: 0, .. }));
        let x = m.inverse_robust(&z, InverseOptions::default()).unwrap();
        assert!((x.get(0, 0) - 1.0 / 4.5).abs() < 1e-12);
        assert!((x.get(1, 0) + 2.0 / 4.5).abs() < 1e-12);
    }

    #[test]
    fn json_roundtrip_is_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut m = FlowModel::new(
            GraphSpec::path(3).unwrap(),
            2,
            2,
            &mixed_arch(2),
            0.1,
            &mut rng,
        )
        .unwrap();
        perturb(&mut m, &mut rng, 0.3);
        let text = m.to_json().unwrap();
        let back = FlowModel::from_json(&text).unwrap();
        let x = DenseMatrix::from_fn(5, 6, |_, _| rng.random_range(-2.0..2.0));
        let (a, b) = (
            m.forward_batch(&x).unwrap(),
            back.forward_batch(&x).unwrap(),
        );
        assert_eq!(a.z, b.z);
        assert_eq!(a.logdet, b.logdet);
        assert!(FlowModel::from_json(&text.replace("\"version\":1", "\"version\":9")).is_err());
    }

    #[test]
    fn l3_masks_zero_off_support() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let arch = ArchConfig {
            blocks: 1,
            hidden: 2,
            layers: vec![LayerTemplate::l3(&[0, 1])],
        };
        let mut m =
            FlowModel::new(GraphSpec::path(3).unwrap(), 1, 2, &arch, 0.1, &mut rng).unwrap();
        for p in m.params_mut() {
            p.data_mut().fill(1.0);
        }
        m.apply_masks();
        let b1 = &m.blocks()[0].layers()[0].spatial()[1];
        assert_eq!(b1.get(0, 2), 0.0);
        assert_eq!(b1.get(2, 0), 0.0);
        assert_eq!(
            m.blocks()[0].layers()[0].spatial()[0],
            DenseMatrix::identity(3)
        );
    }
}
