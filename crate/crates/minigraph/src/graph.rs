//! Immutable full-graph container: in-neighbor CSR adjacency plus per-vertex
//! features, labels and train/test masks. Includes edge-list / binary file
//! ingestion and a stochastic-block-model generator used as the desk-scale
//! dataset source.

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;
use rand::Rng;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const CSR_MAGIC: &[u8; 6] = b"MGCSR1";

/// Compressed sparse row graph. Edge u→v is stored under destination v, so
/// `in_neighbors(v)` is the contiguous row of v. Storage is symmetric:
/// (u,v) is present iff (v,u) is.
#[derive(Clone, Debug, PartialEq)]
pub struct CsrGraph {
    pub num_vertices: usize,
    /// len = num_vertices + 1, non-decreasing.
    pub row_offsets: Vec<usize>,
    /// In-neighbor ids (sources), ascending within each row.
    pub col_indices: Vec<u32>,
    /// [V × F]; F may be 0 for structure-only graphs.
    pub features: Tensor,
    pub labels: Vec<u32>,
    pub train_mask: Vec<bool>,
    pub test_mask: Vec<bool>,
    pub num_classes: usize,
}

impl CsrGraph {
    /// Builds a graph from directed edges: symmetrizes, deduplicates, keeps
    /// self-loops as given.
    pub fn from_edges(
        num_vertices: usize,
        edges: &[(u32, u32)],
        features: Tensor,
        labels: Vec<u32>,
        train_mask: Vec<bool>,
        test_mask: Vec<bool>,
    ) -> Result<CsrGraph> {
        for &(u, v) in edges {
            if u as usize >= num_vertices || v as usize >= num_vertices {
                return Err(Error::Format(format!(
                    "edge ({u},{v}) out of range for {num_vertices} vertices"
                )));
            }
        }
        if features.rows() != num_vertices && !(num_vertices == 0 && features.is_empty()) {
            return Err(Error::shape(format!(
                "features have {} rows for {} vertices",
                features.rows(),
                num_vertices
            )));
        }
        let mut arcs: Vec<(u32, u32)> = Vec::with_capacity(edges.len() * 2);
        for &(u, v) in edges {
            arcs.push((u, v));
            arcs.push((v, u));
        }
        arcs.sort_unstable();
        arcs.dedup();

        // Row per destination, sources ascending: sort by (dst, src).
        let mut row_offsets = vec![0usize; num_vertices + 1];
        for &(_, v) in &arcs {
            row_offsets[v as usize + 1] += 1;
        }
        for i in 1..=num_vertices {
            row_offsets[i] += row_offsets[i - 1];
        }
        let mut col_indices = vec![0u32; arcs.len()];
        let mut cursor = row_offsets.clone();
        for &(u, v) in &arcs {
            col_indices[cursor[v as usize]] = u;
            cursor[v as usize] += 1;
        }
        let num_classes = labels.iter().copied().max().map_or(0, |m| m as usize + 1);
        Ok(CsrGraph {
            num_vertices,
            row_offsets,
            col_indices,
            features,
            labels,
            train_mask,
            test_mask,
            num_classes,
        })
    }

    pub fn num_edges(&self) -> usize {
        self.col_indices.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    #[inline]
    pub fn in_neighbors(&self, v: u32) -> &[u32] {
        &self.col_indices[self.row_offsets[v as usize]..self.row_offsets[v as usize + 1]]
    }

    /// In-neighbor count of `v`.
    pub fn degree(&self, v: u32) -> Result<usize> {
        if v as usize >= self.num_vertices {
            return Err(Error::config(format!(
                "vertex {v} out of range (V = {})",
                self.num_vertices
            )));
        }
        Ok(self.row_offsets[v as usize + 1] - self.row_offsets[v as usize])
    }

    /// All directed arcs (src, dst), useful for oracles and partitioning.
    pub fn arcs(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        (0..self.num_vertices as u32)
            .flat_map(move |v| self.in_neighbors(v).iter().map(move |&u| (u, v)))
    }

    pub fn train_vertices(&self) -> Vec<u32> {
        (0..self.num_vertices as u32)
            .filter(|&v| self.train_mask[v as usize])
            .collect()
    }

    /// Loads a graph file, deciding the format from the magic bytes.
    pub fn load(path: &Path) -> Result<CsrGraph> {
        let mut f = std::fs::File::open(path)?;
        let mut magic = [0u8; 6];
        let n = f.read(&mut magic)?;
        drop(f);
        if n == 6 && &magic == CSR_MAGIC {
            Self::load_binary(path)
        } else {
            Self::load_text(path)
        }
    }

    /// Edge-list text: optional header line `V <n>`, then one `u v` pair per
    /// line (0-based). Vertices get empty features, label 0, and all-false
    /// masks; this path exists for structure import.
    pub fn load_text(path: &Path) -> Result<CsrGraph> {
        let file = std::fs::File::open(path)?;
        let reader = BufReader::new(file);
        let path_s = path.display().to_string();
        let mut declared: Option<usize> = None;
        let mut edges: Vec<(u32, u32)> = Vec::new();
        let mut max_id: i64 = -1;
        for (lineno, line) in reader.lines().enumerate() {
            let lineno = lineno + 1;
            let line = line?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let parse_err = |msg: String| Error::Parse {
                path: path_s.clone(),
                line: lineno,
                msg,
            };
            let parts: Vec<&str> = line.split_whitespace().collect();
            if lineno == 1 && parts.first() == Some(&"V") {
                if parts.len() != 2 {
                    return Err(parse_err("header must be 'V <count>'".into()));
                }
                declared = Some(
                    parts[1]
                        .parse::<usize>()
                        .map_err(|e| parse_err(format!("bad vertex count: {e}")))?,
                );
                continue;
            }
            if parts.len() != 2 {
                return Err(parse_err(format!("expected 'u v', got '{line}'")));
            }
            let u: u32 = parts[0]
                .parse()
                .map_err(|e| parse_err(format!("bad vertex id '{}': {e}", parts[0])))?;
            let v: u32 = parts[1]
                .parse()
                .map_err(|e| parse_err(format!("bad vertex id '{}': {e}", parts[1])))?;
            if let Some(dv) = declared {
                if u as usize >= dv || v as usize >= dv {
                    return Err(parse_err(format!(
                        "edge ({u},{v}) references vertex beyond declared V={dv}"
                    )));
                }
            }
            max_id = max_id.max(u as i64).max(v as i64);
            edges.push((u, v));
        }
        let num_vertices = match declared {
            Some(v) => v,
            None => {
                if max_id < 0 {
                    return Err(Error::Parse {
                        path: path_s,
                        line: 0,
                        msg: "empty edge list without a 'V <n>' header".into(),
                    });
                }
                (max_id + 1) as usize
            }
        };
        CsrGraph::from_edges(
            num_vertices,
            &edges,
            Tensor::zeros(&[num_vertices, 0]),
            vec![0; num_vertices],
            vec![false; num_vertices],
            vec![false; num_vertices],
        )
    }

    /// Binary CSR: magic `MGCSR1`, LE u64 V, E, F, then row_offsets (u64),
    /// col_indices (u64), features (f32), labels (u32), train and test masks
    /// (u8). Features quantize through f32 on disk.
    pub fn save_binary(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        w.write_all(CSR_MAGIC)?;
        let v = self.num_vertices as u64;
        let e = self.num_edges() as u64;
        let f = self.feature_dim() as u64;
        for x in [v, e, f] {
            w.write_all(&x.to_le_bytes())?;
        }
        for &o in &self.row_offsets {
            w.write_all(&(o as u64).to_le_bytes())?;
        }
        for &c in &self.col_indices {
            w.write_all(&(c as u64).to_le_bytes())?;
        }
        for &x in self.features.data() {
            w.write_all(&(x as f32).to_le_bytes())?;
        }
        for &l in &self.labels {
            w.write_all(&l.to_le_bytes())?;
        }
        for &m in &self.train_mask {
            w.write_all(&[m as u8])?;
        }
        for &m in &self.test_mask {
            w.write_all(&[m as u8])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load_binary(path: &Path) -> Result<CsrGraph> {
        let mut r = BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 6];
        r.read_exact(&mut magic)?;
        if &magic != CSR_MAGIC {
            return Err(Error::Format(format!(
                "{}: bad magic, expected MGCSR1",
                path.display()
            )));
        }
        let v = read_u64(&mut r)? as usize;
        let e = read_u64(&mut r)? as usize;
        let f = read_u64(&mut r)? as usize;
        let mut row_offsets = Vec::with_capacity(v + 1);
        for _ in 0..=v {
            row_offsets.push(read_u64(&mut r)? as usize);
        }
        if row_offsets[v] != e || row_offsets.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::Format(format!(
                "{}: corrupt row offsets",
                path.display()
            )));
        }
        let mut col_indices = Vec::with_capacity(e);
        for _ in 0..e {
            let c = read_u64(&mut r)?;
            if c >= v as u64 {
                return Err(Error::Format(format!(
                    "{}: column index {c} out of range",
                    path.display()
                )));
            }
            col_indices.push(c as u32);
        }
        let mut feat = Vec::with_capacity(v * f);
        let mut buf4 = [0u8; 4];
        for _ in 0..v * f {
            r.read_exact(&mut buf4)?;
            feat.push(f32::from_le_bytes(buf4) as f64);
        }
        let mut labels = Vec::with_capacity(v);
        for _ in 0..v {
            r.read_exact(&mut buf4)?;
            labels.push(u32::from_le_bytes(buf4));
        }
        let mut train_mask = Vec::with_capacity(v);
        let mut test_mask = Vec::with_capacity(v);
        let mut b = [0u8; 1];
        for _ in 0..v {
            r.read_exact(&mut b)?;
            train_mask.push(b[0] != 0);
        }
        for _ in 0..v {
            r.read_exact(&mut b)?;
            test_mask.push(b[0] != 0);
        }
        let num_classes = labels.iter().copied().max().map_or(0, |m| m as usize + 1);
        Ok(CsrGraph {
            num_vertices: v,
            row_offsets,
            col_indices,
            features: Tensor::from_vec(&[v, f], feat)?,
            labels,
            train_mask,
            test_mask,
            num_classes,
        })
    }
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

/// Stochastic block model parameters.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct SbmParams {
    pub blocks: usize,
    pub per_block: usize,
    pub p_in: f64,
    pub p_out: f64,
    pub feature_dim: usize,
    pub seed: u64,
}

/// Standard normal via Box–Muller from two counter-derived uniforms.
fn normal(rng: &mut impl Rng) -> f64 {
    let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.random_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Generates a stochastic block model graph: labels are block ids, features
/// are a per-block Gaussian mean plus noise (quantized through f32 so binary
/// round-trips are exact), masks split 80/20 deterministically in the seed.
pub fn generate_sbm(p: &SbmParams) -> Result<CsrGraph> {
    if !(0.0..=1.0).contains(&p.p_in) || !(0.0..=1.0).contains(&p.p_out) {
        return Err(Error::config("SBM probabilities must be in [0,1]"));
    }
    let v = p.blocks * p.per_block;
    let block_of = |x: usize| (x / p.per_block) as u32;

    let mut edge_rng = rng::stream(&[p.seed, 0x5b8e]);
    let mut edges: Vec<(u32, u32)> = Vec::new();
    for u in 0..v {
        for w in (u + 1)..v {
            let prob = if block_of(u) == block_of(w) {
                p.p_in
            } else {
                p.p_out
            };
            if prob > 0.0 && edge_rng.random_range(0.0..1.0) < prob {
                edges.push((u as u32, w as u32));
            }
        }
    }

    let mut mean_rng = rng::stream(&[p.seed, 0x6c9f]);
    let mut means = vec![0.0; p.blocks * p.feature_dim];
    for m in means.iter_mut() {
        *m = 2.0 * normal(&mut mean_rng);
    }
    let mut feat_rng = rng::stream(&[p.seed, 0x7daa]);
    let mut feats = Vec::with_capacity(v * p.feature_dim);
    for x in 0..v {
        let b = block_of(x) as usize;
        for f in 0..p.feature_dim {
            let val = means[b * p.feature_dim + f] + 0.5 * normal(&mut feat_rng);
            feats.push(val as f32 as f64);
        }
    }

    let labels: Vec<u32> = (0..v).map(|x| block_of(x)).collect();
    let mut order: Vec<usize> = (0..v).collect();
    let mut mask_rng = rng::stream(&[p.seed, 0x8ebb]);
    for i in (1..order.len()).rev() {
        let j = mask_rng.random_range(0..=i);
        order.swap(i, j);
    }
    let train_count = v * 8 / 10;
    let mut train_mask = vec![false; v];
    let mut test_mask = vec![false; v];
    for (k, &x) in order.iter().enumerate() {
        if k < train_count {
            train_mask[x] = true;
        } else {
            test_mask[x] = true;
        }
    }

    CsrGraph::from_edges(
        v,
        &edges,
        Tensor::from_vec(&[v, p.feature_dim], feats)?,
        labels,
        train_mask,
        test_mask,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn write_temp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn triangle_symmetrizes_to_six_arcs() {
        let f = write_temp("0 1\n1 2\n2 0\n");
        let g = CsrGraph::load_text(f.path()).unwrap();
        assert_eq!(g.num_vertices, 3);
        assert_eq!(g.num_edges(), 6);
        assert_eq!(g.in_neighbors(0), &[1, 2]);
        assert_eq!(g.degree(0).unwrap(), 2);
    }

    #[test]
    fn empty_file_with_header_gives_isolated_vertices() {
        let f = write_temp("V 5\n");
        let g = CsrGraph::load_text(f.path()).unwrap();
        assert_eq!(g.num_vertices, 5);
        assert_eq!(g.num_edges(), 0);
        assert_eq!(g.degree(3).unwrap(), 0);
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let f = write_temp("0 1\n1 x\n");
        match CsrGraph::load_text(f.path()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn dangling_vertex_id_reports_line_number() {
        let f = write_temp("V 3\n0 1\n1 7\n");
        match CsrGraph::load_text(f.path()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn adjacency_matches_hash_set_oracle() {
        let mut rng = crate::rng::stream(&[41]);
        let v = 30u32;
        let edges: Vec<(u32, u32)> = (0..100)
            .map(|_| {
                use rand::Rng;
                (rng.random_range(0..v), rng.random_range(0..v))
            })
            .collect();
        let mut text = format!("V {v}\n");
        for (u, w) in &edges {
            text.push_str(&format!("{u} {w}\n"));
        }
        let f = write_temp(&text);
        let g = CsrGraph::load_text(f.path()).unwrap();

        // Independent oracle: symmetric in-neighbor sets.
        let mut oracle: Vec<HashSet<u32>> = vec![HashSet::new(); v as usize];
        for &(u, w) in &edges {
            oracle[w as usize].insert(u);
            oracle[u as usize].insert(w);
        }
        for x in 0..v {
            let got: HashSet<u32> = g.in_neighbors(x).iter().copied().collect();
            assert_eq!(got, oracle[x as usize], "vertex {x}");
            // Rows are sorted and deduplicated.
            let row = g.in_neighbors(x);
            assert!(row.windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn duplicate_and_self_loop_handling() {
        let f = write_temp("0 1\n1 0\n0 1\n2 2\n");
        let g = CsrGraph::load_text(f.path()).unwrap();
        // (0,1)+(1,0) collapse to one undirected edge (2 arcs); self-loop kept once.
        assert_eq!(g.num_edges(), 3);
        assert_eq!(g.in_neighbors(2), &[2]);
    }

    #[test]
    fn symmetrization_is_idempotent() {
        let f = write_temp("0 1\n2 1\n3 0\n");
        let g = CsrGraph::load_text(f.path()).unwrap();
        let arcs: Vec<(u32, u32)> = g.arcs().collect();
        let g2 = CsrGraph::from_edges(
            g.num_vertices,
            &arcs,
            g.features.clone(),
            g.labels.clone(),
            g.train_mask.clone(),
            g.test_mask.clone(),
        )
        .unwrap();
        assert_eq!(g, g2);
    }

    #[test]
    fn binary_roundtrip_is_bit_exact() {
        let g = generate_sbm(&SbmParams {
            blocks: 2,
            per_block: 20,
            p_in: 0.3,
            p_out: 0.05,
            feature_dim: 4,
            seed: 7,
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.mgcsr");
        g.save_binary(&path).unwrap();
        let g2 = CsrGraph::load_binary(&path).unwrap();
        assert_eq!(g, g2);
        // And auto-detection picks the binary path.
        let g3 = CsrGraph::load(&path).unwrap();
        assert_eq!(g, g3);
    }

    #[test]
    fn sbm_extreme_probabilities_give_disjoint_cliques() {
        let g = generate_sbm(&SbmParams {
            blocks: 2,
            per_block: 3,
            p_in: 1.0,
            p_out: 0.0,
            feature_dim: 2,
            seed: 1,
        })
        .unwrap();
        assert_eq!(g.num_vertices, 6);
        // Each block is a 3-clique: every vertex has exactly 2 in-neighbors
        // inside its own block.
        for v in 0..6u32 {
            let nbrs = g.in_neighbors(v);
            assert_eq!(nbrs.len(), 2);
            for &u in nbrs {
                assert_eq!(u / 3, v / 3);
            }
        }
    }

    #[test]
    fn sbm_is_deterministic_in_seed() {
        let p = SbmParams {
            blocks: 3,
            per_block: 15,
            p_in: 0.4,
            p_out: 0.02,
            feature_dim: 5,
            seed: 99,
        };
        assert_eq!(generate_sbm(&p).unwrap(), generate_sbm(&p).unwrap());
    }

    #[test]
    fn sbm_densities_within_binomial_bounds() {
        let p = SbmParams {
            blocks: 2,
            per_block: 200,
            p_in: 0.05,
            p_out: 0.002,
            feature_dim: 1,
            seed: 5,
        };
        let g = generate_sbm(&p).unwrap();
        let mut intra = 0usize;
        let mut inter = 0usize;
        for (u, v) in g.arcs() {
            if u < v {
                if u / 200 == v / 200 {
                    intra += 1;
                } else {
                    inter += 1;
                }
            }
        }
        let n_in = 2.0 * (200.0 * 199.0 / 2.0);
        let n_out = 200.0 * 200.0;
        let (mu_in, sd_in) = (n_in * p.p_in, (n_in * p.p_in * (1.0 - p.p_in)).sqrt());
        let (mu_out, sd_out) = (n_out * p.p_out, (n_out * p.p_out * (1.0 - p.p_out)).sqrt());
        assert!(
            (intra as f64 - mu_in).abs() < 3.0 * sd_in,
            "intra {intra} vs mean {mu_in}"
        );
        assert!(
            (inter as f64 - mu_out).abs() < 3.0 * sd_out,
            "inter {inter} vs mean {mu_out}"
        );
    }

    #[test]
    fn sbm_mask_split_is_80_20() {
        let g = generate_sbm(&SbmParams {
            blocks: 2,
            per_block: 50,
            p_in: 0.2,
            p_out: 0.01,
            feature_dim: 2,
            seed: 3,
        })
        .unwrap();
        let train = g.train_mask.iter().filter(|&&m| m).count();
        let test = g.test_mask.iter().filter(|&&m| m).count();
        assert_eq!(train, 80);
        assert_eq!(test, 20);
        for v in 0..g.num_vertices {
            assert!(g.train_mask[v] ^ g.test_mask[v]);
        }
    }

    #[test]
    fn degree_out_of_range_is_error() {
        let f = write_temp("V 2\n0 1\n");
        let g = CsrGraph::load_text(f.path()).unwrap();
        assert!(g.degree(5).is_err());
    }
}
