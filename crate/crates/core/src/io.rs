//! Graph files.
//!
//! * Edge list: optional `# n=<n>` header, then one `u v` pair per line
//!   (`#` starts a comment). Without a header `n` is one past the largest index.
//! * Sidecar JSON (`<path>.json`): planted truth and generator parameters.
//! * Packed binary: magic `DPGB`, little-endian `u64` vertex count, then the
//!   strict upper triangle row by row, one bit per pair, least significant first.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph_models::{BlockMatrix, EdgeProbs, LabeledGraph, Latent};

const MAGIC: &[u8; 4] = b"DPGB";

fn parse_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Parse(msg.into()))
}

pub fn write_edge_list(g: &LabeledGraph, mut w: impl Write) -> Result<()> {
    writeln!(w, "# n={}", g.n())?;
    for (u, v) in g.edges() {
        writeln!(w, "{u} {v}")?;
    }
    Ok(())
}

pub fn read_edge_list(r: impl Read) -> Result<LabeledGraph> {
    let mut n: Option<usize> = None;
    let mut edges = Vec::new();
    for (lineno, line) in BufReader::new(r).lines().enumerate() {
        let line = line?;
        let t = line.trim();
        if let Some(c) = t.strip_prefix('#') {
            if let Some(v) = c.trim().strip_prefix("n=") {
                n = Some(v.trim().parse().map_err(|_| Error::Parse(format!("line {}: bad vertex count", lineno + 1)))?);
            }
            continue;
        }
        if t.is_empty() {
            continue;
        }
        if let Some(v) = t.strip_prefix("n=") {
            n = Some(v.trim().parse().map_err(|_| Error::Parse(format!("line {}: bad vertex count", lineno + 1)))?);
            continue;
        }
        let mut it = t.split_whitespace();
        let (Some(a), Some(b), None) = (it.next(), it.next(), it.next()) else {
            return parse_err(format!("line {}: expected two vertex indices", lineno + 1));
        };
        let a: usize = a.parse().map_err(|_| Error::Parse(format!("line {}: bad index '{a}'", lineno + 1)))?;
        let b: usize = b.parse().map_err(|_| Error::Parse(format!("line {}: bad index '{b}'", lineno + 1)))?;
        edges.push((a, b));
    }
    let n = n.unwrap_or_else(|| edges.iter().map(|&(a, b)| a.max(b) + 1).max().unwrap_or(0));
    LabeledGraph::from_edges(n, edges)
}

pub fn write_packed(g: &LabeledGraph, mut w: impl Write) -> Result<()> {
    let n = g.n();
    w.write_all(MAGIC)?;
    w.write_all(&(n as u64).to_le_bytes())?;
    let pairs = n * n.saturating_sub(1) / 2;
    let mut bits = vec![0u8; pairs.div_ceil(8)];
    for (u, v) in g.edges() {
        let p = pair_index(n, u, v);
        bits[p / 8] |= 1 << (p % 8);
    }
    w.write_all(&bits)?;
    Ok(())
}

pub fn read_packed(mut r: impl Read) -> Result<LabeledGraph> {
    let mut head = [0u8; 12];
    r.read_exact(&mut head)?;
    if &head[..4] != MAGIC {
        return parse_err("not a packed graph file");
    }
    let n = u64::from_le_bytes(head[4..].try_into().expect("8 bytes")) as usize;
    let pairs = n * n.saturating_sub(1) / 2;
    let mut bits = vec![0u8; pairs.div_ceil(8)];
    r.read_exact(&mut bits)?;
    let mut edges = Vec::new();
    let mut p = 0;
    for u in 0..n {
        for v in u + 1..n {
            if bits[p / 8] >> (p % 8) & 1 == 1 {
                edges.push((u, v));
            }
            p += 1;
        }
    }
    LabeledGraph::from_edges(n, edges)
}

/// Position of `(u, v)`, `u < v`, in the row-major strict upper triangle.
fn pair_index(n: usize, u: usize, v: usize) -> usize {
    u * (2 * n - u - 1) / 2 + (v - u - 1)
}

/// Planted truth and generator parameters stored next to a graph file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub n: usize,
    pub model: String,
    #[serde(default)]
    pub b0: Option<BlockMatrix>,
    /// Average-degree parameter of an SBM.
    #[serde(default)]
    pub d: Option<f64>,
    /// Sparsity of a graphon graph.
    #[serde(default)]
    pub rho: Option<f64>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub latent: Option<Latent>,
    #[serde(default)]
    pub edge_probs: Option<EdgeProbs>,
}

pub fn sidecar_path(graph_path: &Path) -> PathBuf {
    let mut s = graph_path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn is_packed(path: &Path) -> bool {
    path.extension().map_or(false, |e| e == "bin")
}

/// Writes the graph (packed when the extension is `.bin`) and, when given, its sidecar.
pub fn save_graph(path: &Path, g: &LabeledGraph, sidecar: Option<&Sidecar>) -> Result<()> {
    let f = fs::File::create(path)?;
    let w = std::io::BufWriter::new(f);
    if is_packed(path) {
        write_packed(g, w)?;
    } else {
        write_edge_list(g, w)?;
    }
    if let Some(sc) = sidecar {
        fs::write(sidecar_path(path), serde_json::to_string_pretty(sc)?)?;
    }
    Ok(())
}

/// Reads a graph and attaches the planted truth from its sidecar if one exists.
pub fn load_graph(path: &Path) -> Result<(LabeledGraph, Option<Sidecar>)> {
    let f = fs::File::open(path)?;
    let mut g = if is_packed(path) { read_packed(f)? } else { read_edge_list(f)? };
    let sc_path = sidecar_path(path);
    let sidecar = if sc_path.exists() {
        let sc: Sidecar = serde_json::from_str(&fs::read_to_string(&sc_path)?)?;
        if sc.n != g.n() {
            return parse_err(format!("sidecar says n={}, graph has n={}", sc.n, g.n()));
        }
        g.latent = sc.latent.clone();
        g.edge_probs = sc.edge_probs.clone();
        Some(sc)
    } else {
        None
    };
    Ok((g, sidecar))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph_models::sample_sbm;

    fn sample() -> LabeledGraph {
        let b0 = BlockMatrix::from_rows(vec![vec![1.5, 0.5], vec![0.5, 1.5]], 2.0).unwrap();
        sample_sbm(&b0, 5.0, 30, 9).unwrap()
    }

    #[test]
    fn edge_list_round_trip() {
        let g = sample();
        let mut buf = Vec::new();
        write_edge_list(&g, &mut buf).unwrap();
        let h = read_edge_list(&buf[..]).unwrap();
        assert_eq!(h.n(), g.n());
        assert_eq!(h.edges().collect::<Vec<_>>(), g.edges().collect::<Vec<_>>());
    }

    #[test]
    fn header_keeps_isolated_vertices() {
        let h = read_edge_list("n=5\n0 1\n".as_bytes()).unwrap();
        assert_eq!(h.n(), 5);
        let h = read_edge_list("0 1\n# trailing comment\n\n".as_bytes()).unwrap();
        assert_eq!(h.n(), 2);
        assert!(read_edge_list("0 1 2\n".as_bytes()).is_err());
        assert!(read_edge_list("1 1\n".as_bytes()).is_err());
    }

    #[test]
    fn packed_round_trip() {
        let g = sample();
        let mut buf = Vec::new();
        write_packed(&g, &mut buf).unwrap();
        assert_eq!(buf.len(), 12 + (30 * 29 / 2usize).div_ceil(8));
        let h = read_packed(&buf[..]).unwrap();
        assert_eq!(h.edges().collect::<Vec<_>>(), g.edges().collect::<Vec<_>>());
    }

    #[test]
    fn pair_index_is_dense() {
        let n = 7;
        let mut k = 0;
        for u in 0..n {
            for v in u + 1..n {
                assert_eq!(pair_index(n, u, v), k);
                k += 1;
            }
        }
    }
}
