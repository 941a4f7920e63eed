//! Undirected graphs with inserted self-loops and their derived operators.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{eig_sym, DenseMatrix};

/// On-disk form: `{"num_nodes": V, "edges": [[i, j], ...]}`, 0-based.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct GraphFile {
    pub num_nodes: usize,
    pub edges: Vec<[usize; 2]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GraphFile", into = "GraphFile")]
pub struct GraphSpec {
    num_nodes: usize,
    edges: Vec<(usize, usize)>,
    adjacency: DenseMatrix,
    degree: DenseMatrix,
    laplacian: DenseMatrix,
    scaled_laplacian: DenseMatrix,
    lambda_max: f64,
}

impl TryFrom<GraphFile> for GraphSpec {
    type Error = Error;
    fn try_from(f: GraphFile) -> Result<Self> {
        let edges: Vec<(usize, usize)> = f.edges.iter().map(|e| (e[0], e[1])).collect();
        build_graph(f.num_nodes, &edges)
    }
}

impl From<GraphSpec> for GraphFile {
    fn from(g: GraphSpec) -> Self {
        GraphFile {
            num_nodes: g.num_nodes,
            edges: g.edges.iter().map(|&(i, j)| [i, j]).collect(),
        }
    }
}

/// Builds a graph from an undirected edge list. Duplicate and reversed edges
/// are merged; explicit self-loops are redundant since every node gets one.
pub fn build_graph(num_nodes: usize, edges: &[(usize, usize)]) -> Result<GraphSpec> {
    if num_nodes == 0 {
        return Err(Error::EmptyGraph);
    }
    let mut set = BTreeSet::new();
    for &(i, j) in edges {
        if i >= num_nodes || j >= num_nodes {
            return Err(Error::InvalidEdge(i, j));
        }
        if i != j {
            set.insert((i.min(j), i.max(j)));
        }
    }
    let edges: Vec<(usize, usize)> = set.into_iter().collect();
    let mut adjacency = DenseMatrix::identity(num_nodes);
    for &(i, j) in &edges {
        adjacency.set(i, j, 1.0);
        adjacency.set(j, i, 1.0);
    }
    let deg = adjacency.row_sums();
    let degree = DenseMatrix::diag_embed(&DenseMatrix::row_vector(&deg))?;
    let laplacian = degree.sub(&adjacency)?;
    let (eigs, _) = eig_sym(&laplacian)?;
    let lambda_max = eigs.last().copied().unwrap_or(0.0);
    // An edgeless graph has L = 0; its scaled Laplacian is taken as -I,
    // i.e. 0/0 is read as 0.
    let scaled_laplacian = if lambda_max > 1e-12 {
        laplacian
            .scale(2.0 / lambda_max)
            .sub(&DenseMatrix::identity(num_nodes))?
    } else {
        DenseMatrix::identity(num_nodes).scale(-1.0)
    };
    Ok(GraphSpec {
        num_nodes,
        edges,
        adjacency,
        degree,
        laplacian,
        scaled_laplacian,
        lambda_max,
    })
}

impl GraphSpec {
    pub fn single() -> Self {
        build_graph(1, &[]).expect("one node")
    }

    pub fn path(n: usize) -> Result<Self> {
        let edges: Vec<_> = (1..n).map(|i| (i - 1, i)).collect();
        build_graph(n, &edges)
    }

    pub fn cycle(n: usize) -> Result<Self> {
        let edges: Vec<_> = (0..n).map(|i| (i, (i + 1) % n)).collect();
        build_graph(n, &edges)
    }

    /// Cycle on `n` nodes plus chords `i -> 2i mod n`.
    pub fn chordal_cycle(n: usize) -> Result<Self> {
        let mut edges: Vec<_> = (0..n).map(|i| (i, (i + 1) % n)).collect();
        edges.extend((0..n).map(|i| (i, (2 * i) % n)));
        build_graph(n, &edges)
    }

    pub fn complete(n: usize) -> Result<Self> {
        let mut edges = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                edges.push((i, j));
            }
        }
        build_graph(n, &edges)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    /// Canonical edge list, `i < j`, sorted, no self-loops.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    /// Adjacency with self-loops.
    pub fn adjacency(&self) -> &DenseMatrix {
        &self.adjacency
    }

    pub fn degree(&self) -> &DenseMatrix {
        &self.degree
    }

    pub fn laplacian(&self) -> &DenseMatrix {
        &self.laplacian
    }

    pub fn scaled_laplacian(&self) -> &DenseMatrix {
        &self.scaled_laplacian
    }

    pub fn lambda_max(&self) -> f64 {
        self.lambda_max
    }

    /// Relabels nodes so that node `i` becomes `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.num_nodes {
            return Err(Error::Precondition(format!(
                "permutation of length {} for {} nodes",
                perm.len(),
                self.num_nodes
            )));
        }
        let edges: Vec<_> = self
            .edges
            .iter()
            .map(|&(i, j)| (perm[i], perm[j]))
            .collect();
        build_graph(self.num_nodes, &edges)
    }
}

/// `P_A = D_A^{-1} A`, row-stochastic.
pub fn graph_average(g: &GraphSpec) -> DenseMatrix {
    let a = g.adjacency();
    let deg = a.row_sums();
    DenseMatrix::from_fn(g.num_nodes, g.num_nodes, |i, j| a.get(i, j) / deg[i])
}

/// Chebyshev polynomials `T_0(L̃) ..= T_K(L̃)`.
pub fn cheb_basis(g: &GraphSpec, k: usize) -> Vec<DenseMatrix> {
    let n = g.num_nodes;
    let lt = g.scaled_laplacian();
    let mut out = vec![DenseMatrix::identity(n)];
    if k >= 1 {
        out.push(lt.clone());
    }
    for i in 2..=k {
        let next = lt
            .matmul(&out[i - 1])
            .expect("square")
            .scale(2.0)
            .sub(&out[i - 2])
            .expect("square");
        out.push(next);
    }
    out
}

/// Neighbourhood mask of a given hop order: `mask[i][j] = 1` iff `j` is
/// reachable from `i` in at most `order` steps.
#[derive(Clone, Debug, PartialEq)]
pub struct HopMask {
    pub order: usize,
    pub mask: DenseMatrix,
}

pub fn hop_masks(g: &GraphSpec, orders: &[usize]) -> Result<Vec<HopMask>> {
    if orders.is_empty() {
        return Err(Error::Precondition(
            "hop_masks needs at least one order".into(),
        ));
    }
    let n = g.num_nodes;
    let max = *orders.iter().max().expect("nonempty");
    let support = |m: &DenseMatrix| m.map(|x| if x != 0.0 { 1.0 } else { 0.0 });
    let mut powers = vec![DenseMatrix::identity(n)];
    for v in 1..=max {
        let next = support(&powers[v - 1].matmul(g.adjacency())?);
        powers.push(next);
    }
    Ok(orders
        .iter()
        .map(|&v| HopMask {
            order: v,
            mask: powers[v].clone(),
        })
        .collect())
}

pub fn permutation_matrix(perm: &[usize]) -> DenseMatrix {
    let n = perm.len();
    let mut p = DenseMatrix::zeros(n, n);
    for (i, &j) in perm.iter().enumerate() {
        p.set(j, i, 1.0);
    }
    p
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &DenseMatrix, b: &DenseMatrix, tol: f64) -> bool {
        a.max_abs_diff(b).unwrap() <= tol
    }

    #[test]
    fn path_graph_adjacency() {
        let g = GraphSpec::path(3).unwrap();
        let expect = DenseMatrix::from_rows(&[
            vec![1.0, 1.0, 0.0],
            vec![1.0, 1.0, 1.0],
            vec![0.0, 1.0, 1.0],
        ])
        .unwrap();
        assert_eq!(g.adjacency(), &expect);
        assert_eq!(g.degree().diagonal(), vec![2.0, 3.0, 2.0]);
    }

    #[test]
    fn single_node() {
        let g = GraphSpec::single();
        assert_eq!(g.adjacency().data(), &[1.0]);
        assert_eq!(g.laplacian().data(), &[0.0]);
        assert_eq!(graph_average(&g).data(), &[1.0]);
    }

    #[test]
    fn empty_graph_rejected() {
        assert!(matches!(build_graph(0, &[]), Err(Error::EmptyGraph)));
        assert!(matches!(
            build_graph(2, &[(0, 2)]),
            Err(Error::InvalidEdge(0, 2))
        ));
    }

    #[test]
    fn duplicates_ignored() {
        let g = build_graph(3, &[(0, 1), (1, 0), (0, 1), (1, 2), (2, 2)]).unwrap();
        assert_eq!(g.edges(), &[(0, 1), (1, 2)]);
    }

    #[test]
    fn chordal_cycle_degrees_match_enumeration() {
        let g = GraphSpec::chordal_cycle(7).unwrap();
        // Brute force: j is adjacent to i if they are cycle neighbours or
        // one is twice the other mod 7.
        for i in 0..7 {
            let mut deg = 0;
            for j in 0..7 {
                let cyc = (i + 1) % 7 == j || (j + 1) % 7 == i;
                let chord = (2 * i) % 7 == j || (2 * j) % 7 == i;
                let adj = i == j || cyc || chord;
                assert_eq!(g.adjacency().get(i, j), if adj { 1.0 } else { 0.0 });
                deg += adj as usize;
            }
            assert_eq!(g.degree().get(i, i), deg as f64);
        }
        assert_eq!(g.edges().len(), 11);
    }

    #[test]
    fn graph_average_path() {
        let g = GraphSpec::path(3).unwrap();
        let p = graph_average(&g);
        let expect = DenseMatrix::from_rows(&[
            vec![0.5, 0.5, 0.0],
            vec![1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0],
            vec![0.0, 0.5, 0.5],
        ])
        .unwrap();
        assert!(close(&p, &expect, 1e-15));
    }

    #[test]
    fn cheb_t2_matches_direct_polynomial() {
        let g = GraphSpec::chordal_cycle(7).unwrap();
        let t = cheb_basis(&g, 3);
        assert_eq!(t[0], DenseMatrix::identity(7));
        let lt = g.scaled_laplacian();
        let l2 = lt.matmul(lt).unwrap();
        let t2 = l2.scale(2.0).sub(&DenseMatrix::identity(7)).unwrap();
        assert!(close(&t[2], &t2, 1e-12));
        // T_3 = 4x^3 - 3x
        let t3 = l2
            .matmul(lt)
            .unwrap()
            .scale(4.0)
            .sub(&lt.scale(3.0))
            .unwrap();
        assert!(close(&t[3], &t3, 1e-12));
    }

    #[test]
    fn scaled_laplacian_spectrum_in_unit_interval() {
        for g in [
            GraphSpec::path(3).unwrap(),
            GraphSpec::chordal_cycle(7).unwrap(),
            GraphSpec::complete(5).unwrap(),
            GraphSpec::single(),
        ] {
            let (e, _) = eig_sym(g.scaled_laplacian()).unwrap();
            assert!(
                e.iter().all(|&x| (-1.0 - 1e-8..=1.0 + 1e-8).contains(&x)),
                "{e:?}"
            );
            let (l, _) = eig_sym(g.laplacian()).unwrap();
            assert!(l[0] >= -1e-10);
        }
    }

    #[test]
    fn cheb_basis_is_equivariant_under_path_reversal() {
        let g = GraphSpec::path(3).unwrap();
        // Automorphisms of the 3-node path: identity and reversal.
        for perm in [[0, 1, 2], [2, 1, 0]] {
            let p = permutation_matrix(&perm);
            for t in cheb_basis(&g, 4) {
                assert!(t.is_symmetric(1e-12));
                let pt = p.matmul(&t).unwrap().matmul_t(&p).unwrap();
                assert!(close(&pt, &t, 1e-12));
            }
        }
    }

    #[test]
    fn hop_masks_path() {
        let g = GraphSpec::path(3).unwrap();
        let m = hop_masks(&g, &[0, 1, 2]).unwrap();
        assert_eq!(m[0].mask, DenseMatrix::identity(3));
        assert_eq!(&m[1].mask, g.adjacency());
        assert_eq!(m[2].mask, DenseMatrix::filled(3, 3, 1.0));
    }

    #[test]
    fn hop_masks_match_bfs() {
        let g = GraphSpec::chordal_cycle(7).unwrap();
        let masks = hop_masks(&g, &[0, 1, 2, 3]).unwrap();
        for src in 0..7 {
            let mut dist = [usize::MAX; 7];
            dist[src] = 0;
            let mut queue = std::collections::VecDeque::from([src]);
            while let Some(u) = queue.pop_front() {
                for &(i, j) in g.edges() {
                    let w = if i == u {
                        j
                    } else if j == u {
                        i
                    } else {
                        continue;
                    };
                    if dist[w] == usize::MAX {
                        dist[w] = dist[u] + 1;
                        queue.push_back(w);
                    }
                }
            }
            for m in &masks {
                for j in 0..7 {
                    let expect = if dist[j] <= m.order { 1.0 } else { 0.0 };
                    assert_eq!(m.mask.get(src, j), expect);
                }
            }
        }
    }

    #[test]
    fn json_roundtrip() {
        let g = GraphSpec::chordal_cycle(7).unwrap();
        let text = serde_json::to_string(&g).unwrap();
        assert!(text.contains("\"num_nodes\":7"));
        let back: GraphSpec = serde_json::from_str(&text).unwrap();
        assert_eq!(back.adjacency(), g.adjacency());
        let bad: std::result::Result<GraphSpec, _> =
            serde_json::from_str(r#"{"num_nodes":2,"edges":[[0,5]]}"#);
        assert!(bad.is_err());
    }
}
