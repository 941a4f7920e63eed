//! Conditional generation: Gaussian head losses, the end-to-end objective,
//! Adam training, sampling through the inverse flow, and classification.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::ad::{Tape, Var};
use crate::datasets::LabeledDataset;
use crate::error::{Error, Result};
use crate::flow::{FlowModel, InverseOptions, ModelVars};
use crate::linalg::DenseMatrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub mu: f64,
    pub lambda_w2: f64,
    pub max_epochs: usize,
    pub termination_rel_decrease: f64,
    /// Consecutive epochs below the relative-decrease threshold before
    /// stopping; 1 stops at the first such epoch.
    pub patience: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Halve any update that turns a block's Jacobian determinant negative
    /// on more rows of the current batch; after six halvings the batch is
    /// skipped.
    pub fold_guard: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-4,
            batch_size: 1000,
            mu: 0.01,
            lambda_w2: 1.0,
            max_epochs: 200,
            termination_rel_decrease: 1e-4,
            patience: 1,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            fold_guard: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.mu >= 0.0) || !(self.lambda_w2 >= 0.0) {
            return bad("mu and lambda_w2 must be nonnegative");
        }
        if !(self.termination_rel_decrease > 0.0 && self.termination_rel_decrease < 1.0) {
            return bad("termination_rel_decrease must lie in (0, 1)");
        }
        if self.patience == 0 {
            return bad("patience must be at least 1");
        }
        if !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || !(self.eps > 0.0)
        {
            return bad("adam betas must lie in [0, 1) and eps must be positive");
        }
        Ok(())
    }
}

/// Batch means of the objective terms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub l_g: f64,
    pub w2: f64,
    pub l_c: f64,
    pub total: f64,
    /// (row, block) pairs with a negative Jacobian determinant.
    pub negative_dets: usize,
}

fn onehot(labels: &[Vec<usize>], classes: usize) -> DenseMatrix {
    let v = labels.first().map_or(0, Vec::len);
    let mut e = DenseMatrix::zeros(labels.len() * v, classes);
    for (n, y) in labels.iter().enumerate() {
        for (j, &k) in y.iter().enumerate() {
            e.set(n * v + j, k, 1.0);
        }
    }
    e
}

fn check_labels(model: &FlowModel, x: &DenseMatrix, labels: &[Vec<usize>]) -> Result<()> {
    if x.rows() != labels.len() {
        return Err(Error::shape(
            "labels",
            format!("{} rows, {} label vectors", x.rows(), labels.len()),
        ));
    }
    for y in labels {
        if y.len() != model.nodes() {
            return Err(Error::shape(
                "labels",
                format!("label vector of length {} for V={}", y.len(), model.nodes()),
            ));
        }
        if y.iter().any(|&k| k >= model.classes()) {
            return Err(Error::Precondition(format!(
                "label outside 0..{}",
                model.classes()
            )));
        }
    }
    Ok(())
}

/// Per-sample `−log p(X|Y)`: Gaussian log-density of `F(X)` around the
/// head means, per node, plus the log-determinant.
pub fn generative_losses(
    model: &FlowModel,
    x: &DenseMatrix,
    labels: &[Vec<usize>],
) -> Result<Vec<f64>> {
    check_labels(model, x, labels)?;
    let out = model.forward_batch(x)?;
    Ok(nll_from_forward(model, &out.z, &out.logdet, labels))
}

fn nll_from_forward(
    model: &FlowModel,
    z: &DenseMatrix,
    logdet: &[f64],
    labels: &[Vec<usize>],
) -> Vec<f64> {
    let s2 = model.sigma2();
    let d = model.dim() as f64;
    let means = model.mean_rows(labels);
    (0..z.rows())
        .map(|n| {
            let sq: f64 = z
                .row(n)
                .iter()
                .zip(means.row(n))
                .map(|(a, b)| (a - b).powi(2))
                .sum();
            0.5 * d * (2.0 * std::f64::consts::PI * s2).ln() + sq / (2.0 * s2) - logdet[n]
        })
        .collect()
}

/// `−log p(X|Y)` for one signal `X ∈ R^{V×C}`.
pub fn generative_loss(model: &FlowModel, x: &DenseMatrix, y: &[usize]) -> Result<f64> {
    let row = x.reshape(1, x.rows() * x.cols())?;
    Ok(generative_losses(model, &row, &[y.to_vec()])?[0])
}

/// Row-wise logits `W_c z^{(v)} + b_c` for every node of every row of `z`,
/// shape `N·V x K`.
pub fn logits(model: &FlowModel, z: &DenseMatrix) -> Result<DenseMatrix> {
    let c = model.channels();
    let zn = z.reshape(z.rows() * z.cols() / c, c)?;
    let (w_c, b_c) = model.classifier();
    let mut out = zn.matmul_t(w_c)?;
    for r in 0..out.rows() {
        for (o, b) in out.row_mut(r).iter_mut().zip(b_c.data()) {
            *o += b;
        }
    }
    Ok(out)
}

fn log_softmax_rows(m: &DenseMatrix) -> DenseMatrix {
    let mut out = m.clone();
    for r in 0..m.rows() {
        let row = out.row_mut(r);
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    out
}

/// Per-sample mean over nodes of `−log softmax(W_c z^{(v)} + b_c)_{y_v}`,
/// given transported rows `z`.
pub fn classifier_losses(
    model: &FlowModel,
    z: &DenseMatrix,
    labels: &[Vec<usize>],
) -> Result<Vec<f64>> {
    check_labels(model, z, labels)?;
    let ls = log_softmax_rows(&logits(model, z)?);
    let v = model.nodes();
    Ok(labels
        .iter()
        .enumerate()
        .map(|(n, y)| {
            -y.iter()
                .enumerate()
                .map(|(j, &k)| ls.get(n * v + j, k))
                .sum::<f64>()
                / v as f64
        })
        .collect())
}

/// Per-node class probabilities, `N·V x K`; row `n·V + v` is node `v` of
/// sample `n`.
pub fn predict(model: &FlowModel, x: &DenseMatrix) -> Result<DenseMatrix> {
    let z = model.transform(x)?;
    Ok(log_softmax_rows(&logits(model, &z)?).map(f64::exp))
}

/// Fraction of nodes whose arg-max prediction equals the label.
pub fn accuracy(model: &FlowModel, ds: &LabeledDataset) -> Result<f64> {
    let p = predict(model, &ds.features)?;
    let correct = count_correct(&p, &ds.labels);
    Ok(correct as f64 / (ds.len() * ds.nodes()).max(1) as f64)
}

fn count_correct(scores: &DenseMatrix, labels: &[Vec<usize>]) -> usize {
    let mut correct = 0;
    let mut r = 0;
    for y in labels {
        for &k in y {
            let row = scores.row(r);
            let arg = (0..row.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            correct += usize::from(arg == k);
            r += 1;
        }
    }
    correct
}

/// Batch means of `L_g`, `W2 = ½ Σ_b ‖g_b‖²`, `L_c` and the objective
/// `L_g + λ·W2 + μ·L_c`, evaluated without a tape.
pub fn total_objective(
    model: &FlowModel,
    x: &DenseMatrix,
    labels: &[Vec<usize>],
    mu: f64,
    lambda_w2: f64,
) -> Result<LossParts> {
    check_labels(model, x, labels)?;
    let n = x.rows() as f64;
    let out = model.forward_batch(x)?;
    let lg = nll_from_forward(model, &out.z, &out.logdet, labels);
    let lc = classifier_losses(model, &out.z, labels)?;
    let l_g = lg.iter().sum::<f64>() / n;
    let w2 = out.movement.iter().sum::<f64>() / n;
    let l_c = lc.iter().sum::<f64>() / n;
    Ok(LossParts {
        l_g,
        w2,
        l_c,
        total: l_g + lambda_w2 * w2 + mu * l_c,
        negative_dets: out.negative_dets,
    })
}

/// The objective on a tape, returning the scalar root, its parts and the
/// `N·V x K` logits node.
pub fn objective_tape(
    model: &FlowModel,
    tape: &mut Tape,
    vars: &ModelVars,
    x: &DenseMatrix,
    labels: &[Vec<usize>],
    mu: f64,
    lambda_w2: f64,
) -> Result<(Var, LossParts, Var)> {
    check_labels(model, x, labels)?;
    let n = x.rows();
    let v = model.nodes();
    let c = model.channels();
    let s2 = model.sigma2();
    let xv = tape.constant(x.clone());
    let fwd = model.forward_tape(tape, vars, xv)?;
    let e = tape.constant(onehot(labels, model.classes()));
    let zn = tape.reshape(fwd.z, n * v, c)?;

    let wgt = tape.transpose(vars.w_g);
    let means = tape.matmul(e, wgt)?;
    let means = tape.add_node_bias(means, vars.b_g)?;
    let diff = tape.sub(zn, means)?;
    let sq = tape.sum_sq(diff);
    let quad = tape.scale(sq, 1.0 / (2.0 * s2));
    let ld = tape.reduce_sum(fwd.logdet);
    let lg = tape.sub(quad, ld)?;
    let norm = 0.5 * (n * v * c) as f64 * (2.0 * std::f64::consts::PI * s2).ln();
    let norm = tape.scalar(norm);
    let lg = tape.add(lg, norm)?;

    let wct = tape.transpose(vars.w_c);
    let lo = tape.matmul(zn, wct)?;
    let lo = tape.add_node_bias(lo, vars.b_c)?;
    let ls = tape.log_softmax(lo);
    let picked = tape.hadamard(e, ls)?;
    let ce = tape.reduce_sum(picked);

    let w2 = tape.scale(fwd.movement_sq, 0.5);
    let a = tape.scale(lg, 1.0 / n as f64);
    let b = tape.scale(w2, lambda_w2 / n as f64);
    let cterm = tape.scale(ce, -mu / (n * v) as f64);
    let ab = tape.add(a, b)?;
    let obj = tape.add(ab, cterm)?;

    let parts = LossParts {
        l_g: tape.value(lg).item() / n as f64,
        w2: tape.value(w2).item() / n as f64,
        l_c: -tape.value(ce).item() / (n * v) as f64,
        total: tape.value(obj).item(),
        negative_dets: fwd.negative_dets,
    };
    Ok((obj, parts, lo))
}

/// Objective value and gradient for every parameter in canonical order.
pub fn objective_and_gradient(
    model: &FlowModel,
    x: &DenseMatrix,
    labels: &[Vec<usize>],
    mu: f64,
    lambda_w2: f64,
) -> Result<(LossParts, Vec<DenseMatrix>)> {
    let mut tape = Tape::new();
    let vars = model.register(&mut tape, true);
    let (obj, parts, _) = objective_tape(model, &mut tape, &vars, x, labels, mu, lambda_w2)?;
    tape.backward(obj)?;
    let grads = vars
        .all()
        .into_iter()
        .zip(model.params())
        .map(|(v, p)| {
            tape.grad(v)
                .cloned()
                .unwrap_or_else(|| DenseMatrix::zeros(p.rows(), p.cols()))
        })
        .collect();
    Ok((parts, grads))
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(sizes: &[usize], lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            m: sizes.iter().map(|&s| vec![0.0; s]).collect(),
            v: sizes.iter().map(|&s| vec![0.0; s]).collect(),
        }
    }

    pub fn step(&mut self, params: Vec<&mut DenseMatrix>, grads: &[DenseMatrix]) {
        self.step_scaled(params, grads, 1.0);
    }

    /// A step with the learning rate multiplied by `scale`.
    pub fn step_scaled(
        &mut self,
        params: Vec<&mut DenseMatrix>,
        grads: &[DenseMatrix],
        scale: f64,
    ) {
        let lr = self.lr * scale;
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (k, (x, &gk)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                *x -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + self.eps);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_g: f64,
    pub w2: f64,
    pub l_c: f64,
    pub total: f64,
    pub train_err: f64,
    pub test_err: Option<f64>,
    /// Updates undone because they folded a block over a training row.
    pub rejected_steps: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Converged,
    MaxEpochs,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub trace: Vec<EpochRecord>,
    pub stop: StopReason,
}

impl TrainReport {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(
            f,
            "epoch,L_g,W2,L_c,total,train_err,test_err,rejected_steps"
        )?;
        for r in &self.trace {
            let te = r.test_err.map(|e| e.to_string()).unwrap_or_default();
            writeln!(
                f,
                "{},{},{},{},{},{},{},{}",
                r.epoch, r.l_g, r.w2, r.l_c, r.total, r.train_err, te, r.rejected_steps
            )?;
        }
        f.flush()?;
        Ok(())
    }
}

/// Trains `model` in place. Each epoch visits the training set once in a
/// seeded shuffled order; training stops when the relative decrease of the
/// epoch loss stays below the threshold for `patience` epochs, or at
/// `max_epochs`. `on_epoch` sees each record as it is produced.
pub fn train(
    model: &mut FlowModel,
    train_set: &LabeledDataset,
    test_set: Option<&LabeledDataset>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainReport> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Precondition("training set is empty".into()));
    }
    if train_set.dim() != model.dim() || train_set.classes > model.classes() {
        return Err(Error::Precondition(
            "dataset does not match the model shape".into(),
        ));
    }
    let sizes: Vec<usize> = model.params().iter().map(|p| p.data().len()).collect();
    let mut adam = Adam::new(&sizes, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut trace = Vec::new();
    let mut below = 0;
    let v = model.nodes();
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut sums = LossParts::default();
        let mut correct = 0usize;
        let mut seen = 0usize;
        let mut rejected = 0usize;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let x = train_set.features.select_rows(chunk);
            let labels: Vec<Vec<usize>> =
                chunk.iter().map(|&i| train_set.labels[i].clone()).collect();
            let mut tape = Tape::new();
            let vars = model.register(&mut tape, true);
            let (obj, parts, lo) =
                objective_tape(model, &mut tape, &vars, &x, &labels, cfg.mu, cfg.lambda_w2)
                    .map_err(|e| match e {
                        Error::SingularJacobian { .. } => Error::NonFinite {
                            what: "log-determinant",
                            epoch,
                            batch: bi,
                        },
                        other => other,
                    })?;
            if !parts.total.is_finite() {
                return Err(Error::NonFinite {
                    what: "loss",
                    epoch,
                    batch: bi,
                });
            }
            tape.backward(obj)?;
            let grads: Vec<DenseMatrix> = vars
                .all()
                .into_iter()
                .zip(model.params())
                .map(|(var, p)| {
                    tape.grad(var)
                        .cloned()
                        .unwrap_or_else(|| DenseMatrix::zeros(p.rows(), p.cols()))
                })
                .collect();
            if grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFinite {
                    what: "gradient",
                    epoch,
                    batch: bi,
                });
            }
            correct += count_correct(tape.value(lo), &labels);
            if cfg.fold_guard {
                let before = parts.negative_dets;
                let saved: Vec<DenseMatrix> = model.params().into_iter().cloned().collect();
                let state = adam.clone();
                let mut scale = 1.0;
                loop {
                    adam.step_scaled(model.params_mut(), &grads, scale);
                    model.apply_masks();
                    let after = count_flips(model, &x);
                    if after <= before {
                        break;
                    }
                    for (p, q) in model.params_mut().into_iter().zip(&saved) {
                        p.clone_from(q);
                    }
                    adam = state.clone();
                    scale *= 0.5;
                    rejected += 1;
                    if scale < 1.0 / 64.0 {
                        // Leave parameters and optimizer state untouched.
                        break;
                    }
                }
            } else {
                adam.step(model.params_mut(), &grads);
                model.apply_masks();
            }
            let w = chunk.len() as f64;
            seen += chunk.len();
            sums.l_g += parts.l_g * w;
            sums.w2 += parts.w2 * w;
            sums.l_c += parts.l_c * w;
            sums.total += parts.total * w;
        }
        let n = seen.max(1) as f64;
        let rec = EpochRecord {
            epoch,
            l_g: sums.l_g / n,
            w2: sums.w2 / n,
            l_c: sums.l_c / n,
            total: sums.total / n,
            train_err: 1.0 - correct as f64 / (n * v as f64),
            test_err: match test_set {
                Some(t) if !t.is_empty() => Some(1.0 - accuracy(model, t)?),
                _ => None,
            },
            rejected_steps: rejected,
        };
        on_epoch(&rec);
        let prev = trace.last().map(|r: &EpochRecord| r.total);
        trace.push(rec);
        if let Some(prev) = prev {
            let cur = trace.last().expect("just pushed").total;
            let rel = (prev - cur) / prev.abs().max(f64::MIN_POSITIVE);
            if rel < cfg.termination_rel_decrease {
                below += 1;
                if below >= cfg.patience {
                    return Ok(TrainReport {
                        trace,
                        stop: StopReason::Converged,
                    });
                }
            } else {
                below = 0;
            }
        }
    }
    Ok(TrainReport {
        trace,
        stop: StopReason::MaxEpochs,
    })
}

/// Draws `H^{(v)} ~ N(mean(y_v), σ² I)` per node for each requested label
/// vector and maps it back through the inverse flow.
pub fn generate_for(
    model: &FlowModel,
    labels: &[Vec<usize>],
    rng: &mut impl Rng,
    opts: InverseOptions,
) -> Result<DenseMatrix> {
    let h = sample_latent(model, labels, rng)?;
    model.inverse_robust(&h, opts)
}

fn count_flips(model: &FlowModel, x: &DenseMatrix) -> usize {
    model
        .forward_batch(x)
        .map(|f| f.negative_dets)
        .unwrap_or(usize::MAX)
}

/// `n` samples for a single label vector `y`.
pub fn generate(
    model: &FlowModel,
    y: &[usize],
    n: usize,
    rng: &mut impl Rng,
    opts: InverseOptions,
) -> Result<DenseMatrix> {
    generate_for(model, &vec![y.to_vec(); n], rng, opts)
}

pub fn sample_latent(
    model: &FlowModel,
    labels: &[Vec<usize>],
    rng: &mut impl Rng,
) -> Result<DenseMatrix> {
    let dummy = DenseMatrix::zeros(labels.len(), model.dim());
    check_labels(model, &dummy, labels)?;
    let s = model.sigma2().sqrt();
    let mut h = model.mean_rows(labels);
    for v in h.data_mut() {
        let e: f64 = StandardNormal.sample(rng);
        *v += s * e;
    }
    Ok(h)
}
