//! The discrete cell search space.
//!
//! A cell is a DAG over two input nodes (the outputs of the two previous
//! layers), `N` intermediate nodes and one output node that concatenates all
//! intermediates. Every candidate edge (i, j) with i < j into an intermediate
//! node carries one operation drawn from an 8-way vocabulary; the whole cell
//! is therefore a categorical vector with one entry per candidate edge, in
//! destination-major / source-minor order.
//!
//! Stable operation codes (used in encodings and serialization):
//!
//! | code | operation      |
//! |------|----------------|
//! | 0    | zero (no edge) |
//! | 1    | sep_conv_3x3   |
//! | 2    | sep_conv_5x5   |
//! | 3    | dil_conv_3x3   |
//! | 4    | dil_conv_5x5   |
//! | 5    | max_pool_3x3   |
//! | 6    | avg_pool_3x3   |
//! | 7    | identity       |

use crate::error::{Error, Result};
use crate::rng::{stream_rng, STREAM_INIT};
use num_bigint::BigUint;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::fmt;

/// Size of the operation vocabulary, including `zero`.
pub const VOCAB_SIZE: usize = 8;

/// One edge operation. `Zero` means "no connection".
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OperationKind {
    Zero,
    SepConv3x3,
    SepConv5x5,
    DilConv3x3,
    DilConv5x5,
    MaxPool3x3,
    AvgPool3x3,
    Identity,
}

impl OperationKind {
    pub const ALL: [OperationKind; VOCAB_SIZE] = [
        OperationKind::Zero,
        OperationKind::SepConv3x3,
        OperationKind::SepConv5x5,
        OperationKind::DilConv3x3,
        OperationKind::DilConv5x5,
        OperationKind::MaxPool3x3,
        OperationKind::AvgPool3x3,
        OperationKind::Identity,
    ];

    pub fn code(self) -> u8 {
        match self {
            OperationKind::Zero => 0,
            OperationKind::SepConv3x3 => 1,
            OperationKind::SepConv5x5 => 2,
            OperationKind::DilConv3x3 => 3,
            OperationKind::DilConv5x5 => 4,
            OperationKind::MaxPool3x3 => 5,
            OperationKind::AvgPool3x3 => 6,
            OperationKind::Identity => 7,
        }
    }

    pub fn from_code(code: u8) -> Option<OperationKind> {
        OperationKind::ALL.get(code as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            OperationKind::Zero => "zero",
            OperationKind::SepConv3x3 => "sep_conv_3x3",
            OperationKind::SepConv5x5 => "sep_conv_5x5",
            OperationKind::DilConv3x3 => "dil_conv_3x3",
            OperationKind::DilConv5x5 => "dil_conv_5x5",
            OperationKind::MaxPool3x3 => "max_pool_3x3",
            OperationKind::AvgPool3x3 => "avg_pool_3x3",
            OperationKind::Identity => "identity",
        }
    }
}

impl fmt::Display for OperationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Number of candidate edges in a cell with `n_intermediate` nodes:
/// node j (graph index j+2) has j+2 incoming candidates, summed over all
/// intermediates.
pub fn encoding_length(n_intermediate: usize) -> Result<usize> {
    if n_intermediate == 0 {
        return Err(Error::InvalidSpace(
            "a cell needs at least one intermediate node".into(),
        ));
    }
    Ok((2..=n_intermediate + 1).sum())
}

/// Exact number of genotypes: (vocab ^ per-cell length) squared, since the
/// normal and reduction cells are searched simultaneously.
pub fn space_cardinality(n_intermediate: usize, vocab_size: usize) -> Result<BigUint> {
    if vocab_size == 0 {
        return Err(Error::InvalidSpace("vocabulary must be non-empty".into()));
    }
    let len = encoding_length(n_intermediate)?;
    let per_cell = BigUint::from(vocab_size).pow(len as u32);
    Ok(&per_cell * &per_cell)
}

/// Exact per-cell count: vocab ^ per-cell length.
pub fn cell_cardinality(n_intermediate: usize, vocab_size: usize) -> Result<BigUint> {
    if vocab_size == 0 {
        return Err(Error::InvalidSpace("vocabulary must be non-empty".into()));
    }
    Ok(BigUint::from(vocab_size).pow(encoding_length(n_intermediate)? as u32))
}

/// Candidate edges in canonical order: destinations ascending, sources
/// ascending within a destination. Node indices 0 and 1 are the cell inputs.
pub fn edge_order(n_intermediate: usize) -> Vec<(usize, usize)> {
    let mut edges = Vec::new();
    for dst in 2..n_intermediate + 2 {
        for src in 0..dst {
            edges.push((src, dst));
        }
    }
    edges
}

fn edge_position(src: usize, dst: usize) -> usize {
    // Offset of destination block: sum_{j=2}^{dst-1} j = dst(dst-1)/2 - 1.
    dst * (dst - 1) / 2 - 1 + src
}

/// The categorical vector for one cell.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellEncoding {
    n_intermediate: usize,
    theta: Vec<u8>,
}

impl CellEncoding {
    pub fn new(n_intermediate: usize, theta: Vec<u8>) -> Result<Self> {
        let expected = encoding_length(n_intermediate)?;
        if theta.len() != expected {
            return Err(Error::Encoding {
                index: None,
                reason: format!(
                    "expected {expected} entries for {n_intermediate} intermediate nodes, got {}",
                    theta.len()
                ),
            });
        }
        for (i, &code) in theta.iter().enumerate() {
            if code as usize >= VOCAB_SIZE {
                return Err(Error::Encoding {
                    index: Some(i),
                    reason: format!("operation code {code} out of range 0..{VOCAB_SIZE}"),
                });
            }
        }
        Ok(CellEncoding {
            n_intermediate,
            theta,
        })
    }

    /// All-`zero` encoding: a cell with no operation edges.
    pub fn empty(n_intermediate: usize) -> Result<Self> {
        let len = encoding_length(n_intermediate)?;
        Ok(CellEncoding {
            n_intermediate,
            theta: vec![0; len],
        })
    }

    /// Uniform i.i.d. entries; deterministic given the seed.
    pub fn random(n_intermediate: usize, seed: u64) -> Result<Self> {
        let mut rng = stream_rng(seed, STREAM_INIT);
        Self::random_with(n_intermediate, &mut rng)
    }

    pub fn random_with<R: Rng>(n_intermediate: usize, rng: &mut R) -> Result<Self> {
        let len = encoding_length(n_intermediate)?;
        let theta = (0..len)
            .map(|_| rng.gen_range(0..VOCAB_SIZE as u8))
            .collect();
        Ok(CellEncoding {
            n_intermediate,
            theta,
        })
    }

    pub fn n_intermediate(&self) -> usize {
        self.n_intermediate
    }

    pub fn codes(&self) -> &[u8] {
        &self.theta
    }

    pub fn operations(&self) -> impl Iterator<Item = OperationKind> + '_ {
        self.theta
            .iter()
            .map(|&c| OperationKind::from_code(c).expect("validated at construction"))
    }

    /// Decode into the explicit DAG. `zero` entries produce no edge.
    pub fn decode(&self) -> CellGraph {
        let order = edge_order(self.n_intermediate);
        let mut edges = Vec::new();
        for (&code, &(src, dst)) in self.theta.iter().zip(&order) {
            let op = OperationKind::from_code(code).expect("validated at construction");
            if op != OperationKind::Zero {
                edges.push(CellEdge { src, dst, op });
            }
        }
        CellGraph {
            n_intermediate: self.n_intermediate,
            edges,
        }
    }
}

/// One operation edge of a decoded cell; `src < dst` always holds and `dst`
/// is an intermediate node (index >= 2).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CellEdge {
    pub src: usize,
    pub dst: usize,
    pub op: OperationKind,
}

/// A decoded cell DAG. Nodes 0 and 1 are the inputs, nodes 2..N+2 the
/// intermediates; the output node implicitly concatenates every intermediate.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CellGraph {
    n_intermediate: usize,
    edges: Vec<CellEdge>,
}

impl CellGraph {
    pub fn new(n_intermediate: usize, mut edges: Vec<CellEdge>) -> Result<Self> {
        encoding_length(n_intermediate)?;
        edges.sort_by_key(|e| (e.dst, e.src));
        let mut seen = std::collections::HashSet::new();
        for e in &edges {
            if e.op == OperationKind::Zero {
                return Err(Error::Encoding {
                    index: None,
                    reason: format!("edge ({}, {}) carries the zero operation", e.src, e.dst),
                });
            }
            if e.src >= e.dst || e.dst < 2 || e.dst >= n_intermediate + 2 {
                return Err(Error::Encoding {
                    index: None,
                    reason: format!("edge ({}, {}) violates the DAG shape", e.src, e.dst),
                });
            }
            if !seen.insert((e.src, e.dst)) {
                return Err(Error::Encoding {
                    index: None,
                    reason: format!("duplicate edge ({}, {})", e.src, e.dst),
                });
            }
        }
        Ok(CellGraph {
            n_intermediate,
            edges,
        })
    }

    pub fn n_intermediate(&self) -> usize {
        self.n_intermediate
    }

    /// Total node count: 2 inputs + N intermediates + 1 output.
    pub fn node_count(&self) -> usize {
        self.n_intermediate + 3
    }

    pub fn edges(&self) -> &[CellEdge] {
        &self.edges
    }

    pub fn incoming(&self, node: usize) -> impl Iterator<Item = &CellEdge> {
        self.edges.iter().filter(move |e| e.dst == node)
    }

    /// Re-encode into the canonical vector; inverse of [`CellEncoding::decode`].
    pub fn encode(&self) -> CellEncoding {
        let len = encoding_length(self.n_intermediate).expect("validated at construction");
        let mut theta = vec![0u8; len];
        for e in &self.edges {
            theta[edge_position(e.src, e.dst)] = e.op.code();
        }
        CellEncoding {
            n_intermediate: self.n_intermediate,
            theta,
        }
    }
}

/// The paired (normal, reduction) architecture descriptor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Genotype {
    normal: CellEncoding,
    reduction: CellEncoding,
}

impl Genotype {
    pub fn new(normal: CellEncoding, reduction: CellEncoding) -> Result<Self> {
        if normal.n_intermediate != reduction.n_intermediate {
            return Err(Error::Encoding {
                index: None,
                reason: format!(
                    "normal and reduction cells disagree on intermediate nodes ({} vs {})",
                    normal.n_intermediate, reduction.n_intermediate
                ),
            });
        }
        Ok(Genotype { normal, reduction })
    }

    pub fn random(n_intermediate: usize, seed: u64) -> Result<Self> {
        let mut rng = stream_rng(seed, STREAM_INIT);
        Ok(Genotype {
            normal: CellEncoding::random_with(n_intermediate, &mut rng)?,
            reduction: CellEncoding::random_with(n_intermediate, &mut rng)?,
        })
    }

    /// Parse the flat `normal ++ reduction` code vector used by the optimizer.
    pub fn from_flat(n_intermediate: usize, codes: &[u8]) -> Result<Self> {
        let len = encoding_length(n_intermediate)?;
        if codes.len() != 2 * len {
            return Err(Error::Encoding {
                index: None,
                reason: format!("expected {} codes, got {}", 2 * len, codes.len()),
            });
        }
        Ok(Genotype {
            normal: CellEncoding::new(n_intermediate, codes[..len].to_vec())?,
            reduction: CellEncoding::new(n_intermediate, codes[len..].to_vec())?,
        })
    }

    /// Flat `normal ++ reduction` code vector.
    pub fn to_flat(&self) -> Vec<u8> {
        let mut v = self.normal.codes().to_vec();
        v.extend_from_slice(self.reduction.codes());
        v
    }

    pub fn n_intermediate(&self) -> usize {
        self.normal.n_intermediate
    }

    pub fn normal(&self) -> &CellEncoding {
        &self.normal
    }

    pub fn reduction(&self) -> &CellEncoding {
        &self.reduction
    }
}

/// Serialization formats for [`export_genotype`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportFormat {
    Json,
    Dot,
}

impl std::str::FromStr for ExportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(ExportFormat::Json),
            "dot" => Ok(ExportFormat::Dot),
            other => Err(Error::config(
                "format",
                format!("unsupported format {other:?} (expected \"json\" or \"dot\")"),
            )),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct GenotypeFile {
    version: u32,
    n_intermediate: usize,
    normal: Vec<u8>,
    reduction: Vec<u8>,
}

const GENOTYPE_SCHEMA_VERSION: u32 = 1;

/// Render a genotype as JSON or Graphviz DOT text.
pub fn export_genotype(genotype: &Genotype, format: ExportFormat) -> String {
    match format {
        ExportFormat::Json => {
            let file = GenotypeFile {
                version: GENOTYPE_SCHEMA_VERSION,
                n_intermediate: genotype.n_intermediate(),
                normal: genotype.normal.codes().to_vec(),
                reduction: genotype.reduction.codes().to_vec(),
            };
            let mut text = serde_json::to_string_pretty(&file).expect("genotype is serializable");
            text.push('\n');
            text
        }
        ExportFormat::Dot => {
            let mut out = String::new();
            out.push_str(&cell_to_dot("normal", &genotype.normal.decode()));
            out.push('\n');
            out.push_str(&cell_to_dot("reduction", &genotype.reduction.decode()));
            out
        }
    }
}

/// Parse a genotype from the JSON schema written by [`export_genotype`].
pub fn import_genotype(json: &str) -> Result<Genotype> {
    let file: GenotypeFile = serde_json::from_str(json)?;
    if file.version != GENOTYPE_SCHEMA_VERSION {
        return Err(Error::format(
            "genotype json",
            format!("unsupported schema version {}", file.version),
        ));
    }
    Genotype::new(
        CellEncoding::new(file.n_intermediate, file.normal)?,
        CellEncoding::new(file.n_intermediate, file.reduction)?,
    )
}

fn dot_node_name(node: usize) -> String {
    match node {
        0 => "c_{k-2}".into(),
        1 => "c_{k-1}".into(),
        n => format!("n{}", n - 2),
    }
}

fn cell_to_dot(name: &str, graph: &CellGraph) -> String {
    let mut out = format!("digraph {name} {{\n  rankdir=LR;\n");
    out.push_str("  \"c_{k-2}\" [shape=box];\n  \"c_{k-1}\" [shape=box];\n");
    for i in 0..graph.n_intermediate() {
        out.push_str(&format!("  \"n{i}\" [shape=ellipse];\n"));
    }
    out.push_str("  \"out\" [shape=box];\n");
    for e in graph.edges() {
        out.push_str(&format!(
            "  \"{}\" -> \"{}\" [label=\"{}\" style=dashed];\n",
            dot_node_name(e.src),
            dot_node_name(e.dst),
            e.op
        ));
    }
    for i in 0..graph.n_intermediate() {
        out.push_str(&format!("  \"n{i}\" -> \"out\";\n"));
    }
    out.push_str("}\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encoding_lengths_match_known_values() {
        assert_eq!(encoding_length(1).unwrap(), 2);
        assert_eq!(encoding_length(4).unwrap(), 14);
        assert_eq!(encoding_length(5).unwrap(), 20);
        assert!(matches!(encoding_length(0), Err(Error::InvalidSpace(_))));
    }

    #[test]
    fn length_grows_by_n_plus_two() {
        for n in 1..10 {
            let diff = encoding_length(n + 1).unwrap() - encoding_length(n).unwrap();
            assert_eq!(diff, n + 2);
        }
    }

    #[test]
    fn cardinality_is_exact() {
        let c = space_cardinality(4, 8).unwrap();
        assert_eq!(c, BigUint::from(8u32).pow(28));
        assert_eq!(c.to_string().len(), 26);
        assert_eq!(space_cardinality(5, 8).unwrap(), BigUint::from(8u32).pow(40));
        assert_eq!(space_cardinality(1, 1).unwrap(), BigUint::from(1u32));
    }

    #[test]
    fn per_cell_growth_factor_is_vocab_pow_n_plus_two() {
        for n in 1..8usize {
            let a = cell_cardinality(n, 8).unwrap();
            let b = cell_cardinality(n + 1, 8).unwrap();
            assert_eq!(b / a, BigUint::from(8u32).pow(n as u32 + 2));
        }
    }

    #[test]
    fn all_zero_theta_decodes_to_edgeless_graph() {
        let enc = CellEncoding::empty(2).unwrap();
        let graph = enc.decode();
        assert!(graph.edges().is_empty());
        assert_eq!(graph.node_count(), 5);
    }

    #[test]
    fn all_identity_theta_decodes_to_dense_graph() {
        let len = encoding_length(2).unwrap();
        let enc = CellEncoding::new(2, vec![OperationKind::Identity.code(); len]).unwrap();
        let graph = enc.decode();
        assert_eq!(graph.edges().len(), len);
        assert!(graph.edges().iter().all(|e| e.op == OperationKind::Identity));
        assert!(graph.edges().iter().all(|e| e.src < e.dst));
    }

    #[test]
    fn decode_then_encode_round_trips() {
        for seed in 0..50 {
            for n in 1..=5 {
                let enc = CellEncoding::random(n, seed).unwrap();
                assert_eq!(enc.decode().encode(), enc);
            }
        }
    }

    #[test]
    fn nonzero_edge_count_matches_nonzero_codes() {
        for seed in 0..20 {
            let enc = CellEncoding::random(4, seed).unwrap();
            let nonzero = enc.codes().iter().filter(|&&c| c != 0).count();
            assert_eq!(enc.decode().edges().len(), nonzero);
        }
    }

    #[test]
    fn bad_code_reports_offending_index() {
        let mut theta = vec![0u8; encoding_length(2).unwrap()];
        theta[3] = 9;
        match CellEncoding::new(2, theta) {
            Err(Error::Encoding { index: Some(3), .. }) => {}
            other => panic!("expected encoding error at index 3, got {other:?}"),
        }
    }

    #[test]
    fn wrong_length_is_rejected() {
        assert!(matches!(
            CellEncoding::new(4, vec![0; 13]),
            Err(Error::Encoding { index: None, .. })
        ));
    }

    #[test]
    fn same_seed_same_encoding_different_seed_differs() {
        let a = CellEncoding::random(4, 7).unwrap();
        let b = CellEncoding::random(4, 7).unwrap();
        assert_eq!(a, b);
        let mut distinct = std::collections::HashSet::new();
        for seed in 0..1000 {
            distinct.insert(CellEncoding::random(4, seed).unwrap().codes().to_vec());
        }
        assert_eq!(distinct.len(), 1000);
    }

    #[test]
    fn random_encoding_is_uniform_per_position() {
        // Chi-square against uniform at each of the 14 positions, fixed seed.
        // Critical value for df = 7 at alpha = 0.001.
        const CRITICAL: f64 = 24.322;
        let samples = 80_000usize;
        let mut counts = vec![[0usize; VOCAB_SIZE]; encoding_length(4).unwrap()];
        let mut rng = stream_rng(20_240_410, STREAM_INIT);
        for _ in 0..samples {
            let enc = CellEncoding::random_with(4, &mut rng).unwrap();
            for (pos, &code) in enc.codes().iter().enumerate() {
                counts[pos][code as usize] += 1;
            }
        }
        let expected = samples as f64 / VOCAB_SIZE as f64;
        for (pos, row) in counts.iter().enumerate() {
            let stat: f64 = row
                .iter()
                .map(|&c| {
                    let d = c as f64 - expected;
                    d * d / expected
                })
                .sum();
            assert!(stat < CRITICAL, "position {pos} not uniform: chi2 = {stat}");
        }
    }

    #[test]
    fn genotype_flat_round_trip() {
        let g = Genotype::random(4, 3).unwrap();
        assert_eq!(g.to_flat().len(), 28);
        let back = Genotype::from_flat(4, &g.to_flat()).unwrap();
        assert_eq!(back, g);
    }

    #[test]
    fn json_export_import_round_trip() {
        for seed in 0..20 {
            let g = Genotype::random(4, seed).unwrap();
            let text = export_genotype(&g, ExportFormat::Json);
            assert_eq!(import_genotype(&text).unwrap(), g);
        }
    }

    #[test]
    fn all_zero_genotype_dot_has_no_operation_edges() {
        let n = 3;
        let empty = CellEncoding::empty(n).unwrap();
        let g = Genotype::new(empty.clone(), empty).unwrap();
        let dot = export_genotype(&g, ExportFormat::Dot);
        assert!(!dot.contains("style=dashed"));
        // N + 3 declared nodes per cell.
        assert_eq!(dot.matches("[shape=").count(), 2 * (n + 3));
    }

    #[test]
    fn unsupported_format_string_is_rejected() {
        assert!("yaml".parse::<ExportFormat>().is_err());
        assert_eq!("dot".parse::<ExportFormat>().unwrap(), ExportFormat::Dot);
    }
}
