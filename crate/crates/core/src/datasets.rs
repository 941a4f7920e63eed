//! Seeded synthetic generators and CSV ingestion for labeled graph signals.
//!
//! Labels are 0-based everywhere, in memory and on disk.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{cheb_basis, graph_average, GraphSpec};
use crate::linalg::{cholesky, eig_sym, DenseMatrix};

/// `N` graph signals with per-node labels. Row `n` of `features` is the
/// node-major flattening of `X_n ∈ R^{V×C}`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub graph: GraphSpec,
    pub channels: usize,
    pub classes: usize,
    pub features: DenseMatrix,
    pub labels: Vec<Vec<usize>>,
}

impl LabeledDataset {
    pub fn new(
        graph: GraphSpec,
        channels: usize,
        classes: usize,
        features: DenseMatrix,
        labels: Vec<Vec<usize>>,
    ) -> Result<Self> {
        let v = graph.num_nodes();
        if features.cols() != v * channels || features.rows() != labels.len() {
            return Err(Error::shape(
                "dataset",
                format!(
                    "features {}x{}, {} label vectors, V={v}, C={channels}",
                    features.rows(),
                    features.cols(),
                    labels.len()
                ),
            ));
        }
        for y in &labels {
            if y.len() != v {
                return Err(Error::shape(
                    "dataset",
                    format!("label vector of length {} for V={v}", y.len()),
                ));
            }
            if let Some(&bad) = y.iter().find(|&&k| k >= classes) {
                return Err(Error::Precondition(format!(
                    "label {bad} outside 0..{classes}"
                )));
            }
        }
        Ok(Self {
            graph,
            channels,
            classes,
            features,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn nodes(&self) -> usize {
        self.graph.num_nodes()
    }

    pub fn dim(&self) -> usize {
        self.nodes() * self.channels
    }

    /// Sample `n` as a `V x C` matrix.
    pub fn sample(&self, n: usize) -> DenseMatrix {
        DenseMatrix::new(self.nodes(), self.channels, self.features.row(n).to_vec())
            .expect("row width is V*C")
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            graph: self.graph.clone(),
            channels: self.channels,
            classes: self.classes,
            features: self.features.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i].clone()).collect(),
        }
    }

    /// Leading `floor(fraction·N)` samples for training, the rest for test.
    pub fn split(&self, fraction: f64) -> Result<(Self, Self)> {
        if !(0.0..=1.0).contains(&fraction) {
            return Err(Error::Config(format!(
                "train fraction {fraction} outside [0, 1]"
            )));
        }
        let k = (fraction * self.len() as f64).floor() as usize;
        let head: Vec<usize> = (0..k).collect();
        let tail: Vec<usize> = (k..self.len()).collect();
        Ok((self.select(&head), self.select(&tail)))
    }

    /// Frequency of each distinct label vector.
    pub fn label_vector_counts(&self) -> BTreeMap<Vec<usize>, usize> {
        let mut out = BTreeMap::new();
        for y in &self.labels {
            *out.entry(y.clone()).or_insert(0) += 1;
        }
        out
    }

    /// Feature rows whose label vector equals `y`.
    pub fn rows_with_labels(&self, y: &[usize]) -> DenseMatrix {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| self.labels[i] == y).collect();
        self.features.select_rows(&idx)
    }

    /// Features of one node across samples, `N x C`.
    pub fn node_features(&self, v: usize) -> DenseMatrix {
        let c = self.channels;
        DenseMatrix::from_fn(self.len(), c, |n, j| self.features.get(n, v * c + j))
    }

    pub fn write_csv(&self, features: &Path, labels: &Path) -> Result<()> {
        let mut fw = csv::Writer::from_path(features).map_err(csv_io)?;
        let header: Vec<String> = (0..self.channels).map(|j| format!("c{j}")).collect();
        fw.write_record(&header).map_err(csv_io)?;
        let mut lw = csv::Writer::from_path(labels).map_err(csv_io)?;
        lw.write_record(["label"]).map_err(csv_io)?;
        for n in 0..self.len() {
            for v in 0..self.nodes() {
                let row = &self.features.row(n)[v * self.channels..(v + 1) * self.channels];
                fw.write_record(row.iter().map(|x| x.to_string()))
                    .map_err(csv_io)?;
                lw.write_record([self.labels[n][v].to_string()])
                    .map_err(csv_io)?;
            }
        }
        fw.flush()?;
        lw.flush()?;
        Ok(())
    }
}

fn csv_io(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Io(std::io::Error::other(format!("{other:?}"))),
    }
}

fn parse_error(file: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        file: file.display().to_string(),
        line,
        msg: msg.into(),
    }
}

/// Reads records with their 1-based file line numbers (header is line 1).
fn read_records(path: &Path) -> Result<(Vec<String>, Vec<(usize, Vec<String>)>)> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(csv_io)?;
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| parse_error(path, 1, e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    if header.is_empty() || header.iter().all(String::is_empty) {
        return Err(parse_error(path, 1, "missing header row"));
    }
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
            parse_error(path, line, e.to_string())
        })?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        rows.push((line, rec.iter().map(str::to_string).collect()));
    }
    Ok((header, rows))
}

/// Loads `features.csv` (`N·V` node-major rows, `C` columns) and
/// `labels.csv` (column `label`, one row per node). With `classes = None`
/// the class count is inferred as `max label + 1`.
pub fn load_csv(
    graph: &Path,
    features: &Path,
    labels: &Path,
    classes: Option<usize>,
) -> Result<LabeledDataset> {
    let graph = GraphSpec::load(graph)?;
    let v = graph.num_nodes();
    let (fh, frows) = read_records(features)?;
    let c = fh.len();
    let (lh, lrows) = read_records(labels)?;
    let col = lh
        .iter()
        .position(|h| h == "label")
        .ok_or_else(|| parse_error(labels, 1, "no 'label' column"))?;
    if frows.len() % v != 0 {
        return Err(parse_error(
            features,
            frows.last().map(|r| r.0).unwrap_or(1),
            format!("{} rows is not a multiple of V = {v}", frows.len()),
        ));
    }
    if lrows.len() != frows.len() {
        let line = lrows.len().min(frows.len()) + 2;
        return Err(parse_error(
            labels,
            line,
            format!(
                "{} label rows for {} feature rows",
                lrows.len(),
                frows.len()
            ),
        ));
    }
    let n = frows.len() / v;
    let mut data = Vec::with_capacity(n * v * c);
    for (line, rec) in &frows {
        if rec.len() != c {
            return Err(parse_error(
                features,
                *line,
                format!("expected {c} cells, found {}", rec.len()),
            ));
        }
        for cell in rec {
            let x: f64 = cell
                .parse()
                .map_err(|_| parse_error(features, *line, format!("non-numeric cell '{cell}'")))?;
            data.push(x);
        }
    }
    let mut flat = Vec::with_capacity(n * v);
    for (line, rec) in &lrows {
        let cell = rec
            .get(col)
            .ok_or_else(|| parse_error(labels, *line, "missing label cell"))?;
        let k: usize = cell.parse().map_err(|_| {
            parse_error(
                labels,
                *line,
                format!("label '{cell}' is not a nonnegative integer"),
            )
        })?;
        if let Some(kmax) = classes {
            if k >= kmax {
                return Err(parse_error(
                    labels,
                    *line,
                    format!("label {k} outside 0..{kmax}"),
                ));
            }
        }
        flat.push(k);
    }
    let classes = classes.unwrap_or_else(|| flat.iter().max().map_or(1, |m| m + 1));
    let labels = flat.chunks(v).map(<[usize]>::to_vec).collect();
    LabeledDataset::new(graph, c, classes, DenseMatrix::new(n, v * c, data)?, labels)
}

/// Generator selection for the synthetic experiments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SyntheticSpec {
    EightGaussians {
        n_per_label: usize,
    },
    TwoMoons {
        n: usize,
        #[serde(default = "default_noise")]
        noise: f64,
    },
    ThreeNodeConvex {
        n_per_label: usize,
    },
    ThreeNodeNonconvex {
        n_per_label: usize,
    },
    GpSpectral {
        n: usize,
    },
    GpLocal {
        n: usize,
    },
}

fn default_noise() -> f64 {
    0.08
}

impl SyntheticSpec {
    pub fn generate(&self, seed: u64) -> Result<LabeledDataset> {
        let count = match *self {
            SyntheticSpec::EightGaussians { n_per_label }
            | SyntheticSpec::ThreeNodeConvex { n_per_label }
            | SyntheticSpec::ThreeNodeNonconvex { n_per_label } => n_per_label,
            SyntheticSpec::TwoMoons { n, .. }
            | SyntheticSpec::GpSpectral { n }
            | SyntheticSpec::GpLocal { n } => n,
        };
        if count == 0 {
            return Err(Error::Config("sample count must be at least 1".into()));
        }
        match *self {
            SyntheticSpec::EightGaussians { n_per_label } => {
                Ok(eight_gaussians(n_per_label, seed).0)
            }
            SyntheticSpec::TwoMoons { n, noise } => Ok(two_moons(n, noise, seed)),
            SyntheticSpec::ThreeNodeConvex { n_per_label } => {
                Ok(three_node_convex(n_per_label, seed))
            }
            SyntheticSpec::ThreeNodeNonconvex { n_per_label } => {
                Ok(three_node_nonconvex(n_per_label, 0.08, seed))
            }
            SyntheticSpec::GpSpectral { n } => gp_spectral(n, seed),
            SyntheticSpec::GpLocal { n } => gp_local(n, seed),
        }
    }
}

pub const EIGHT_GAUSSIANS_RADIUS: f64 = 4.0;
pub const EIGHT_GAUSSIANS_STD: f64 = 0.25;

/// Centre of component `j ∈ 0..8`, at angle `j·45°` on the radius-4 circle.
/// Label `k` owns components `k` and `k + 4`.
pub fn eight_gaussians_center(j: usize) -> [f64; 2] {
    let a = (j as f64) * std::f64::consts::FRAC_PI_4;
    [
        EIGHT_GAUSSIANS_RADIUS * a.cos(),
        EIGHT_GAUSSIANS_RADIUS * a.sin(),
    ]
}

/// Four labels, each a uniform mixture of two opposite components. Returns
/// the dataset and each sample's component index.
pub fn eight_gaussians(n_per_label: usize, seed: u64) -> (LabeledDataset, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 4 * n_per_label;
    let mut data = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    let mut comps = Vec::with_capacity(n);
    for k in 0..4 {
        for _ in 0..n_per_label {
            let j = if rng.random::<bool>() { k } else { k + 4 };
            let c = eight_gaussians_center(j);
            for m in c {
                let e: f64 = StandardNormal.sample(&mut rng);
                data.push(m + EIGHT_GAUSSIANS_STD * e);
            }
            labels.push(vec![k]);
            comps.push(j);
        }
    }
    let ds = LabeledDataset::new(
        GraphSpec::single(),
        2,
        4,
        DenseMatrix::new(n, 2, data).expect("2n entries"),
        labels,
    )
    .expect("consistent shapes");
    (ds, comps)
}

/// Upper arc `(cos θ, sin θ)` is label 0, lower arc `(1 − cos θ, ½ − sin θ)`
/// label 1, `θ ~ U[0, π]`. The first `⌈n/2⌉` samples are label 0.
pub fn two_moons(n: usize, noise: f64, seed: u64) -> LabeledDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let upper = n.div_ceil(2);
    let mut data = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = usize::from(i >= upper);
        let p = moon_point(label, &mut rng);
        for m in p {
            let e: f64 = StandardNormal.sample(&mut rng);
            data.push(m + noise * e);
        }
        labels.push(vec![label]);
    }
    LabeledDataset::new(
        GraphSpec::single(),
        2,
        2,
        DenseMatrix::new(n, 2, data).expect("2n entries"),
        labels,
    )
    .expect("consistent shapes")
}

fn moon_point(label: usize, rng: &mut impl Rng) -> [f64; 2] {
    let t = rng.random_range(0.0..=std::f64::consts::PI);
    if label == 0 {
        [t.cos(), t.sin()]
    } else {
        [1.0 - t.cos(), 0.5 - t.sin()]
    }
}

/// All eight binary label vectors on three nodes, node 0 most significant.
pub fn binary_label_vectors() -> Vec<Vec<usize>> {
    (0..8)
        .map(|i| (0..3).map(|v| (i >> (2 - v)) & 1).collect())
        .collect()
}

pub const THREE_NODE_OFFSETS: [[f64; 2]; 3] = [[-4.0, 0.0], [0.0, 0.0], [4.0, 0.0]];

fn three_node(
    n_per_label: usize,
    seed: u64,
    mut node_draw: impl FnMut(usize, &mut ChaCha8Rng) -> [f64; 2],
) -> LabeledDataset {
    let graph = GraphSpec::path(3).expect("three nodes");
    let pa = graph_average(&graph);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ys = binary_label_vectors();
    let n = ys.len() * n_per_label;
    let mut feats = DenseMatrix::zeros(n, 6);
    let mut labels = Vec::with_capacity(n);
    let mut row = 0;
    for y in &ys {
        for _ in 0..n_per_label {
            let mut h = DenseMatrix::zeros(3, 2);
            for v in 0..3 {
                let p = node_draw(y[v], &mut rng);
                h.set(v, 0, p[0] + THREE_NODE_OFFSETS[v][0]);
                h.set(v, 1, p[1] + THREE_NODE_OFFSETS[v][1]);
            }
            let x = pa.matmul(&h).expect("3x3 by 3x2");
            feats.row_mut(row).copy_from_slice(x.data());
            labels.push(y.clone());
            row += 1;
        }
    }
    LabeledDataset::new(graph, 2, 2, feats, labels).expect("consistent shapes")
}

/// `X = P_A (H + offsets)` on the 3-node path with
/// `H^{(v)} ~ N((±1.5, 0), 0.1 I)`; `+` for label 0.
pub fn three_node_convex(n_per_label: usize, seed: u64) -> LabeledDataset {
    let s = 0.1f64.sqrt();
    three_node(n_per_label, seed, |y, rng| {
        let m = if y == 0 { 1.5 } else { -1.5 };
        let (a, b): (f64, f64) = (StandardNormal.sample(rng), StandardNormal.sample(rng));
        [m + s * a, s * b]
    })
}

/// Centroid of the noiseless two-moon data.
pub const MOONS_CENTER: [f64; 2] = [0.5, 0.25];
pub const NONCONVEX_SCALE: f64 = 1.5;

/// Same mixing as [`three_node_convex`] with node draws from the centred,
/// 1.5-scaled moon arcs (upper for label 0) plus noise.
pub fn three_node_nonconvex(n_per_label: usize, noise: f64, seed: u64) -> LabeledDataset {
    three_node(n_per_label, seed, |y, rng| {
        let p = moon_point(y, rng);
        let (a, b): (f64, f64) = (StandardNormal.sample(rng), StandardNormal.sample(rng));
        [
            NONCONVEX_SCALE * (p[0] - MOONS_CENTER[0]) + noise * a,
            NONCONVEX_SCALE * (p[1] - MOONS_CENTER[1]) + noise * b,
        ]
    })
}

/// `Σ = 0.5 T_0 + 0.1 T_1 + 0.5 T_2` on the 7-node chordal cycle.
pub fn gp_spectral_covariance() -> (GraphSpec, DenseMatrix) {
    let g = GraphSpec::chordal_cycle(7).expect("seven nodes");
    let t = cheb_basis(&g, 2);
    let sigma = t[0]
        .scale(0.5)
        .add(&t[1].scale(0.1))
        .and_then(|s| s.add(&t[2].scale(0.5)))
        .expect("7x7");
    (g, sigma)
}

pub fn gp_local_covariance() -> (GraphSpec, DenseMatrix) {
    let g = GraphSpec::path(3).expect("three nodes");
    let sigma = DenseMatrix::from_rows(&[
        vec![1.0, 0.6, 0.0],
        vec![0.6, 1.0, -0.4],
        vec![0.0, -0.4, 1.0],
    ])
    .expect("3x3");
    (g, sigma)
}

/// Draws `n` samples of `N(0, Σ)` via Cholesky, one channel per node, all
/// labeled class 0.
pub fn gaussian_signals(
    graph: GraphSpec,
    sigma: &DenseMatrix,
    n: usize,
    seed: u64,
) -> Result<LabeledDataset> {
    let (eigs, _) = eig_sym(sigma)?;
    if eigs[0] <= 1e-8 {
        return Err(Error::NotPositiveDefinite);
    }
    let l = cholesky(sigma)?;
    let v = sigma.rows();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps = DenseMatrix::from_fn(n, v, |_, _| StandardNormal.sample(&mut rng));
    let x = eps.matmul_t(&l)?;
    LabeledDataset::new(graph, 1, 1, x, vec![vec![0; v]; n])
}

pub fn gp_spectral(n: usize, seed: u64) -> Result<LabeledDataset> {
    let (g, s) = gp_spectral_covariance();
    gaussian_signals(g, &s, n, seed)
}

pub fn gp_local(n: usize, seed: u64) -> Result<LabeledDataset> {
    let (g, s) = gp_local_covariance();
    gaussian_signals(g, &s, n, seed)
}

/// Contents of `meta.json` in a dataset bundle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BundleMeta {
    pub seed: Option<u64>,
    pub spec: Option<SyntheticSpec>,
    pub classes: usize,
    pub channels: usize,
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
}

pub fn default_train_fraction() -> f64 {
    0.75
}

/// Writes `graph.json`, `features.csv`, `labels.csv` and `meta.json`.
pub fn write_bundle(dir: &Path, ds: &LabeledDataset, meta: &BundleMeta) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    ds.graph.save(&dir.join("graph.json"))?;
    ds.write_csv(&dir.join("features.csv"), &dir.join("labels.csv"))?;
    std::fs::write(dir.join("meta.json"), serde_json::to_string_pretty(meta)?)?;
    Ok(())
}

pub fn load_bundle(dir: &Path) -> Result<(LabeledDataset, BundleMeta)> {
    let meta: BundleMeta = serde_json::from_str(&std::fs::read_to_string(dir.join("meta.json"))?)?;
    let ds = load_csv(
        &dir.join("graph.json"),
        &dir.join("features.csv"),
        &dir.join("labels.csv"),
        Some(meta.classes),
    )?;
    if ds.channels != meta.channels {
        return Err(Error::Config(format!(
            "meta.json declares {} channels, features.csv has {}",
            meta.channels, ds.channels
        )));
    }
    Ok((ds, meta))
}
