//! Splits a [`CsrGraph`] into rank-local partitions: solid vertices owned by
//! the rank (with features), halo placeholders for cut-edge sources owned
//! elsewhere (no features), and the VID_p ↔ VID_o lookup tables. The built-in
//! partitioner is a greedy BFS growth balanced on training vertices; an
//! externally computed assignment (e.g. real METIS output) can be imported
//! through the same halo/LUT construction.

use crate::error::{Error, Result};
use crate::graph::CsrGraph;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeSet, HashMap, VecDeque};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const PART_MAGIC: &[u8; 7] = b"MGPART1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VertexType {
    Solid,
    Halo,
}

/// One row of the graph LUT: partition-local id → original id, vertex type,
/// and owning rank.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LutEntry {
    pub vid_o: u32,
    pub vtype: VertexType,
    pub owner: u32,
}

/// One rank's subgraph. Solid vertices occupy VID_p `[0, num_solid)` in
/// ascending VID_o order; halo vertices follow in `[num_solid, num_solid +
/// num_halo)`, also ascending by VID_o. Only solid vertices have adjacency
/// rows and feature/label/mask entries.
#[derive(Clone, Debug, PartialEq)]
pub struct Partition {
    pub rank: u32,
    pub num_ranks: u32,
    pub num_solid: usize,
    pub num_halo: usize,
    pub lut: Vec<LutEntry>,
    rev: HashMap<u32, u32>,
    /// len = num_solid + 1; halo vertices have no rows (they appear only as
    /// sources).
    pub row_offsets: Vec<usize>,
    /// Local VID_p source ids, preserving the global ascending-VID_o order
    /// within each row.
    pub col_indices: Vec<u32>,
    /// [num_solid × F]
    pub features: Tensor,
    pub labels: Vec<u32>,
    pub train_mask: Vec<bool>,
    pub test_mask: Vec<bool>,
    /// Solid VID_p of training vertices, ascending.
    pub train_vertices: Vec<u32>,
    pub num_classes: usize,
}

impl Partition {
    pub fn num_local(&self) -> usize {
        self.num_solid + self.num_halo
    }

    #[inline]
    pub fn vid_o(&self, vid_p: u32) -> u32 {
        self.lut[vid_p as usize].vid_o
    }

    #[inline]
    pub fn is_halo(&self, vid_p: u32) -> bool {
        (vid_p as usize) >= self.num_solid
    }

    /// Partition-local id of an original id, if the vertex is present here
    /// (solid or halo).
    pub fn vid_p_of(&self, vid_o: u32) -> Option<u32> {
        self.rev.get(&vid_o).copied()
    }

    /// Local in-neighbors of a solid vertex.
    #[inline]
    pub fn in_neighbors(&self, vid_p: u32) -> &[u32] {
        debug_assert!(!self.is_halo(vid_p));
        &self.col_indices[self.row_offsets[vid_p as usize]..self.row_offsets[vid_p as usize + 1]]
    }

    /// Local in-degree; halo vertices have no local in-edges. For solid
    /// vertices this equals the global in-degree, since every arc into a
    /// solid destination is materialized locally.
    pub fn local_degree(&self, vid_p: u32) -> usize {
        if self.is_halo(vid_p) {
            0
        } else {
            self.row_offsets[vid_p as usize + 1] - self.row_offsets[vid_p as usize]
        }
    }

    /// VID_o of all halo vertices, ascending (the list broadcast at init).
    pub fn halo_vid_o(&self) -> Vec<u32> {
        self.lut[self.num_solid..].iter().map(|e| e.vid_o).collect()
    }
}

/// Greedy multi-constraint partitioning: BFS-grown parts, scheduled so the
/// part with the fewest training vertices extends next, candidates scored by
/// internal connectivity. Per-part training count is capped at
/// `ceil(1.05 · total_train / R)`.
pub fn partition(g: &CsrGraph, num_ranks: u32, seed: u64) -> Result<Vec<Partition>> {
    validate_rank_count(g, num_ranks)?;
    let assignment = greedy_assign(g, num_ranks, seed);
    build_partitions(g, &assignment, num_ranks)
}

/// Builds partitions from an externally computed VID_o → rank assignment,
/// with identical halo/LUT construction to [`partition`].
pub fn import_partition_assignment(
    g: &CsrGraph,
    assignment: &[u32],
    num_ranks: u32,
) -> Result<Vec<Partition>> {
    validate_rank_count(g, num_ranks)?;
    if assignment.len() != g.num_vertices {
        return Err(Error::config(format!(
            "assignment has {} entries for {} vertices",
            assignment.len(),
            g.num_vertices
        )));
    }
    if let Some(&bad) = assignment.iter().find(|&&r| r >= num_ranks) {
        return Err(Error::config(format!(
            "assignment rank {bad} out of range (R = {num_ranks})"
        )));
    }
    build_partitions(g, assignment, num_ranks)
}

/// Text assignment file: one rank id per line, line number = VID_o.
pub fn load_assignment_file(path: &Path) -> Result<Vec<u32>> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        out.push(t.parse::<u32>().map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: lineno + 1,
            msg: format!("bad rank id '{t}': {e}"),
        })?);
    }
    Ok(out)
}

/// Undirected cut size of an assignment (cut arcs / 2).
pub fn cut_edges(g: &CsrGraph, assignment: &[u32]) -> usize {
    g.arcs()
        .filter(|&(u, v)| assignment[u as usize] != assignment[v as usize])
        .count()
        / 2
}

fn validate_rank_count(g: &CsrGraph, num_ranks: u32) -> Result<()> {
    if num_ranks == 0 {
        return Err(Error::config("rank count must be at least 1"));
    }
    if num_ranks as usize > g.num_vertices {
        return Err(Error::config(format!(
            "cannot split {} vertices across {num_ranks} ranks",
            g.num_vertices
        )));
    }
    Ok(())
}

fn bfs_distances(g: &CsrGraph, start: u32, dist: &mut [usize]) {
    let mut q = VecDeque::new();
    dist[start as usize] = 0;
    q.push_back(start);
    while let Some(v) = q.pop_front() {
        let d = dist[v as usize];
        for &u in g.in_neighbors(v) {
            if dist[u as usize] > d + 1 {
                dist[u as usize] = d + 1;
                q.push_back(u);
            }
        }
    }
}

/// Farthest-first seed selection: start from the max-degree vertex, then
/// repeatedly take the vertex farthest from all chosen seeds (unreachable
/// components are picked first), ties to the lower id.
fn pick_seeds(g: &CsrGraph, num_ranks: u32) -> Vec<u32> {
    let v = g.num_vertices;
    let first = (0..v as u32)
        .max_by_key(|&x| (g.in_neighbors(x).len(), std::cmp::Reverse(x)))
        .unwrap();
    let mut seeds = vec![first];
    let mut dist = vec![usize::MAX; v];
    bfs_distances(g, first, &mut dist);
    while seeds.len() < num_ranks as usize {
        let next = (0..v as u32)
            .filter(|x| !seeds.contains(x))
            .max_by_key(|&x| (dist[x as usize], std::cmp::Reverse(x)))
            .unwrap();
        seeds.push(next);
        bfs_distances(g, next, &mut dist);
    }
    seeds
}

fn greedy_assign(g: &CsrGraph, num_ranks: u32, _seed: u64) -> Vec<u32> {
    let v = g.num_vertices;
    let r = num_ranks as usize;
    let mut assign = vec![u32::MAX; v];
    if r == 1 {
        return vec![0; v];
    }
    let total_train = g.train_mask.iter().filter(|&&m| m).count();
    let cap = ((1.05 * total_train as f64) / r as f64).ceil() as usize;

    let seeds = pick_seeds(g, num_ranks);
    let mut frontier: Vec<BTreeSet<u32>> = vec![BTreeSet::new(); r];
    let mut train_cnt = vec![0usize; r];
    let mut total_cnt = vec![0usize; r];
    let mut assigned = 0usize;

    let place = |x: u32,
                     p: usize,
                     assign: &mut Vec<u32>,
                     frontier: &mut Vec<BTreeSet<u32>>,
                     train_cnt: &mut Vec<usize>,
                     total_cnt: &mut Vec<usize>,
                     assigned: &mut usize| {
        assign[x as usize] = p as u32;
        total_cnt[p] += 1;
        if g.train_mask[x as usize] {
            train_cnt[p] += 1;
        }
        *assigned += 1;
        for &u in g.in_neighbors(x) {
            if assign[u as usize] == u32::MAX {
                frontier[p].insert(u);
            }
        }
    };

    for (p, &s) in seeds.iter().enumerate() {
        place(
            s,
            p,
            &mut assign,
            &mut frontier,
            &mut train_cnt,
            &mut total_cnt,
            &mut assigned,
        );
    }

    let mut order: Vec<usize> = (0..r).collect();
    while assigned < v {
        order.sort_by_key(|&p| (train_cnt[p], total_cnt[p], p));
        let mut progressed = false;
        for &p in &order {
            let at_cap = train_cnt[p] >= cap;
            // Best frontier candidate: most neighbors already in p, ties to
            // the lower original id.
            let mut best: Option<(usize, u32)> = None;
            let mut stale: Vec<u32> = Vec::new();
            for &cand in &frontier[p] {
                if assign[cand as usize] != u32::MAX {
                    stale.push(cand);
                    continue;
                }
                if at_cap && g.train_mask[cand as usize] {
                    continue;
                }
                let gain = g
                    .in_neighbors(cand)
                    .iter()
                    .filter(|&&u| assign[u as usize] == p as u32)
                    .count();
                let better = match best {
                    None => true,
                    Some((bg, bv)) => gain > bg || (gain == bg && cand < bv),
                };
                if better {
                    best = Some((gain, cand));
                }
            }
            for s in stale {
                frontier[p].remove(&s);
            }
            let choice = best.map(|(_, x)| x).or_else(|| {
                // Frontier exhausted: seed a new BFS island with the best
                // unassigned vertex this part may take.
                (0..v as u32)
                    .filter(|&x| {
                        assign[x as usize] == u32::MAX
                            && !(at_cap && g.train_mask[x as usize])
                    })
                    .max_by_key(|&x| (g.in_neighbors(x).len(), std::cmp::Reverse(x)))
            });
            if let Some(x) = choice {
                frontier[p].remove(&x);
                place(
                    x,
                    p,
                    &mut assign,
                    &mut frontier,
                    &mut train_cnt,
                    &mut total_cnt,
                    &mut assigned,
                );
                progressed = true;
                break;
            }
        }
        // Only training-vertex caps can block a part, and capacity exceeds
        // the training total, so some part always makes progress.
        assert!(progressed, "partitioner stalled");
    }
    assign
}

fn build_partitions(g: &CsrGraph, assignment: &[u32], num_ranks: u32) -> Result<Vec<Partition>> {
    let r = num_ranks as usize;
    let mut solids: Vec<Vec<u32>> = vec![Vec::new(); r];
    for v in 0..g.num_vertices as u32 {
        solids[assignment[v as usize] as usize].push(v);
    }
    let mut halos: Vec<BTreeSet<u32>> = vec![BTreeSet::new(); r];
    for (u, v) in g.arcs() {
        if assignment[u as usize] != assignment[v as usize] {
            halos[assignment[v as usize] as usize].insert(u);
        }
    }

    let mut parts = Vec::with_capacity(r);
    for rank in 0..r {
        let solid = &solids[rank];
        let halo: Vec<u32> = halos[rank].iter().copied().collect();
        let num_solid = solid.len();
        let num_halo = halo.len();

        let mut lut = Vec::with_capacity(num_solid + num_halo);
        let mut rev = HashMap::with_capacity(num_solid + num_halo);
        for (p, &o) in solid.iter().enumerate() {
            lut.push(LutEntry {
                vid_o: o,
                vtype: VertexType::Solid,
                owner: rank as u32,
            });
            rev.insert(o, p as u32);
        }
        for (i, &o) in halo.iter().enumerate() {
            lut.push(LutEntry {
                vid_o: o,
                vtype: VertexType::Halo,
                owner: assignment[o as usize],
            });
            rev.insert(o, (num_solid + i) as u32);
        }

        let mut row_offsets = Vec::with_capacity(num_solid + 1);
        let mut col_indices = Vec::new();
        row_offsets.push(0);
        for &o in solid {
            for &u in g.in_neighbors(o) {
                col_indices.push(rev[&u]);
            }
            row_offsets.push(col_indices.len());
        }

        let features = g.features.gather_rows(solid);
        let labels: Vec<u32> = solid.iter().map(|&o| g.labels[o as usize]).collect();
        let train_mask: Vec<bool> = solid.iter().map(|&o| g.train_mask[o as usize]).collect();
        let test_mask: Vec<bool> = solid.iter().map(|&o| g.test_mask[o as usize]).collect();
        let train_vertices: Vec<u32> = (0..num_solid as u32)
            .filter(|&p| train_mask[p as usize])
            .collect();

        parts.push(Partition {
            rank: rank as u32,
            num_ranks,
            num_solid,
            num_halo,
            lut,
            rev,
            row_offsets,
            col_indices,
            features,
            labels,
            train_mask,
            test_mask,
            train_vertices,
            num_classes: g.num_classes,
        });
    }
    Ok(parts)
}

/// JSON manifest describing a partition set.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct PartitionManifest {
    pub num_ranks: u32,
    pub seed: Option<u64>,
    pub cut_edges: usize,
    pub per_rank: Vec<RankCounts>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct RankCounts {
    pub rank: u32,
    pub solid: usize,
    pub halo: usize,
    pub train: usize,
}

pub fn manifest_for(parts: &[Partition], g: &CsrGraph, seed: Option<u64>) -> PartitionManifest {
    let mut assignment = vec![0u32; g.num_vertices];
    for p in parts {
        for e in &p.lut[..p.num_solid] {
            assignment[e.vid_o as usize] = p.rank;
        }
    }
    PartitionManifest {
        num_ranks: parts.len() as u32,
        seed,
        cut_edges: cut_edges(g, &assignment),
        per_rank: parts
            .iter()
            .map(|p| RankCounts {
                rank: p.rank,
                solid: p.num_solid,
                halo: p.num_halo,
                train: p.train_vertices.len(),
            })
            .collect(),
    }
}

/// Writes `part<r>.mgp` per rank plus `manifest.json` into `dir`.
pub fn save_partitions(
    dir: &Path,
    parts: &[Partition],
    manifest: &PartitionManifest,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for p in parts {
        save_partition(&dir.join(format!("part{}.mgp", p.rank)), p)?;
    }
    let mf = std::fs::File::create(dir.join("manifest.json"))?;
    serde_json::to_writer_pretty(BufWriter::new(mf), manifest)?;
    Ok(())
}

pub fn load_manifest(dir: &Path) -> Result<PartitionManifest> {
    let f = std::fs::File::open(dir.join("manifest.json"))?;
    Ok(serde_json::from_reader(BufReader::new(f))?)
}

pub fn save_partition(path: &Path, p: &Partition) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(PART_MAGIC)?;
    for x in [
        p.rank as u64,
        p.num_ranks as u64,
        p.num_solid as u64,
        p.num_halo as u64,
        p.features.cols() as u64,
        p.num_classes as u64,
    ] {
        w.write_all(&x.to_le_bytes())?;
    }
    for e in &p.lut {
        w.write_all(&(e.vid_o as u64).to_le_bytes())?;
        w.write_all(&[matches!(e.vtype, VertexType::Halo) as u8])?;
        w.write_all(&e.owner.to_le_bytes())?;
    }
    for &o in &p.row_offsets {
        w.write_all(&(o as u64).to_le_bytes())?;
    }
    for &c in &p.col_indices {
        w.write_all(&(c as u64).to_le_bytes())?;
    }
    for &x in p.features.data() {
        w.write_all(&(x as f32).to_le_bytes())?;
    }
    for &l in &p.labels {
        w.write_all(&l.to_le_bytes())?;
    }
    for &m in &p.train_mask {
        w.write_all(&[m as u8])?;
    }
    for &m in &p.test_mask {
        w.write_all(&[m as u8])?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_partition(path: &Path) -> Result<Partition> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 7];
    r.read_exact(&mut magic)?;
    if &magic != PART_MAGIC {
        return Err(Error::Format(format!(
            "{}: bad magic, expected MGPART1",
            path.display()
        )));
    }
    let rank = read_u64(&mut r)? as u32;
    let num_ranks = read_u64(&mut r)? as u32;
    let num_solid = read_u64(&mut r)? as usize;
    let num_halo = read_u64(&mut r)? as usize;
    let fdim = read_u64(&mut r)? as usize;
    let num_classes = read_u64(&mut r)? as usize;

    let mut lut = Vec::with_capacity(num_solid + num_halo);
    let mut rev = HashMap::with_capacity(num_solid + num_halo);
    let mut b1 = [0u8; 1];
    let mut b4 = [0u8; 4];
    for p in 0..num_solid + num_halo {
        let vid_o = read_u64(&mut r)? as u32;
        r.read_exact(&mut b1)?;
        r.read_exact(&mut b4)?;
        lut.push(LutEntry {
            vid_o,
            vtype: if b1[0] != 0 {
                VertexType::Halo
            } else {
                VertexType::Solid
            },
            owner: u32::from_le_bytes(b4),
        });
        rev.insert(vid_o, p as u32);
    }
    let mut row_offsets = Vec::with_capacity(num_solid + 1);
    for _ in 0..=num_solid {
        row_offsets.push(read_u64(&mut r)? as usize);
    }
    let e = row_offsets[num_solid];
    let mut col_indices = Vec::with_capacity(e);
    for _ in 0..e {
        col_indices.push(read_u64(&mut r)? as u32);
    }
    let mut feat = Vec::with_capacity(num_solid * fdim);
    for _ in 0..num_solid * fdim {
        r.read_exact(&mut b4)?;
        feat.push(f32::from_le_bytes(b4) as f64);
    }
    let mut labels = Vec::with_capacity(num_solid);
    for _ in 0..num_solid {
        r.read_exact(&mut b4)?;
        labels.push(u32::from_le_bytes(b4));
    }
    let mut train_mask = Vec::with_capacity(num_solid);
    let mut test_mask = Vec::with_capacity(num_solid);
    for _ in 0..num_solid {
        r.read_exact(&mut b1)?;
        train_mask.push(b1[0] != 0);
    }
    for _ in 0..num_solid {
        r.read_exact(&mut b1)?;
        test_mask.push(b1[0] != 0);
    }
    let train_vertices: Vec<u32> = (0..num_solid as u32)
        .filter(|&p| train_mask[p as usize])
        .collect();
    Ok(Partition {
        rank,
        num_ranks,
        num_solid,
        num_halo,
        lut,
        rev,
        row_offsets,
        col_indices,
        features: Tensor::from_vec(&[num_solid, fdim], feat)?,
        labels,
        train_mask,
        test_mask,
        train_vertices,
        num_classes,
    })
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

#[cfg(test)]
pub(crate) mod test_support {
    use super::*;
    use std::collections::BTreeSet;

    /// Brute-force halo enumeration: for each rank, the set of sources of cut
    /// edges into that rank.
    pub fn brute_force_halos(g: &CsrGraph, assignment: &[u32], r: u32) -> Vec<BTreeSet<u32>> {
        let mut halos = vec![BTreeSet::new(); r as usize];
        for (u, v) in g.arcs() {
            if assignment[u as usize] != assignment[v as usize] {
                halos[assignment[v as usize] as usize].insert(u);
            }
        }
        halos
    }

    /// Maps every partition edge back to VID_o space and collects the union.
    pub fn reconstruct_arcs(parts: &[Partition]) -> BTreeSet<(u32, u32)> {
        let mut arcs = BTreeSet::new();
        for p in parts {
            for d in 0..p.num_solid as u32 {
                for &s in p.in_neighbors(d) {
                    let arc = (p.vid_o(s), p.vid_o(d));
                    assert!(arcs.insert(arc), "duplicate arc {arc:?}");
                }
            }
        }
        arcs
    }

    pub fn assignment_of(parts: &[Partition], num_vertices: usize) -> Vec<u32> {
        let mut assignment = vec![u32::MAX; num_vertices];
        for p in parts {
            for e in &p.lut[..p.num_solid] {
                assert_eq!(
                    assignment[e.vid_o as usize],
                    u32::MAX,
                    "vertex {} solid in two partitions",
                    e.vid_o
                );
                assignment[e.vid_o as usize] = p.rank;
            }
        }
        assert!(assignment.iter().all(|&a| a != u32::MAX));
        assignment
    }
}

#[cfg(test)]
mod tests {
    use super::test_support::*;
    use super::*;
    use crate::graph::{generate_sbm, SbmParams};
    use rand::Rng;

    fn random_graph(v: usize, e: usize, seed: u64, train_frac: f64) -> CsrGraph {
        let mut rng = crate::rng::stream(&[seed, 0xabc]);
        let edges: Vec<(u32, u32)> = (0..e)
            .map(|_| {
                (
                    rng.random_range(0..v as u32),
                    rng.random_range(0..v as u32),
                )
            })
            .collect();
        let train: Vec<bool> = (0..v).map(|_| rng.random_range(0.0..1.0) < train_frac).collect();
        let test: Vec<bool> = train.iter().map(|&t| !t).collect();
        CsrGraph::from_edges(
            v,
            &edges,
            Tensor::zeros(&[v, 0]),
            vec![0; v],
            train,
            test,
        )
        .unwrap()
    }

    #[test]
    fn single_rank_is_identity() {
        let g = random_graph(20, 40, 1, 0.5);
        let parts = partition(&g, 1, 0).unwrap();
        assert_eq!(parts.len(), 1);
        let p = &parts[0];
        assert_eq!(p.num_solid, 20);
        assert_eq!(p.num_halo, 0);
        for (i, e) in p.lut.iter().enumerate() {
            assert_eq!(e.vid_o, i as u32);
            assert_eq!(e.vtype, VertexType::Solid);
        }
        assert!(p.halo_vid_o().is_empty());
        // Local CSR equals the global CSR.
        assert_eq!(p.row_offsets, g.row_offsets);
        assert_eq!(p.col_indices, g.col_indices);
    }

    #[test]
    fn disjoint_cliques_have_zero_cut() {
        let g = generate_sbm(&SbmParams {
            blocks: 2,
            per_block: 6,
            p_in: 1.0,
            p_out: 0.0,
            feature_dim: 2,
            seed: 3,
        })
        .unwrap();
        let parts = partition(&g, 2, 0).unwrap();
        for p in &parts {
            assert_eq!(p.num_halo, 0, "rank {} has halos", p.rank);
            assert!(p.halo_vid_o().is_empty());
        }
        let assignment = assignment_of(&parts, g.num_vertices);
        assert_eq!(cut_edges(&g, &assignment), 0);
    }

    #[test]
    fn random_graph_partitions_reconstruct_exactly() {
        let g = random_graph(60, 150, 7, 0.4);
        let parts = partition(&g, 4, 11).unwrap();

        // Every VID_o solid exactly once.
        let assignment = assignment_of(&parts, g.num_vertices);

        // Halo sets equal brute-force cut enumeration.
        let halos = brute_force_halos(&g, &assignment, 4);
        for p in &parts {
            let got: std::collections::BTreeSet<u32> = p.halo_vid_o().into_iter().collect();
            assert_eq!(got, halos[p.rank as usize], "rank {}", p.rank);
        }

        // Reconstructing the edge set through the LUTs yields the original.
        let rebuilt = reconstruct_arcs(&parts);
        let original: std::collections::BTreeSet<(u32, u32)> = g.arcs().collect();
        assert_eq!(rebuilt, original);

        // Halo owners are consistent and halos carry no feature rows.
        for p in &parts {
            for e in &p.lut[p.num_solid..] {
                assert_eq!(e.owner, assignment[e.vid_o as usize]);
                assert_ne!(e.owner, p.rank);
            }
            assert_eq!(p.features.rows(), p.num_solid);
        }
    }

    #[test]
    fn training_balance_respects_slack() {
        let g = random_graph(120, 300, 9, 0.5);
        let total_train = g.train_vertices().len();
        for r in [2u32, 3, 4] {
            let parts = partition(&g, r, 5).unwrap();
            let cap = ((1.05 * total_train as f64) / r as f64).ceil() as usize;
            for p in &parts {
                assert!(
                    p.train_vertices.len() <= cap,
                    "rank {} has {} train vertices, cap {cap}",
                    p.rank,
                    p.train_vertices.len()
                );
            }
            let sum: usize = parts.iter().map(|p| p.train_vertices.len()).sum();
            assert_eq!(sum, total_train);
        }
    }

    #[test]
    fn partitioning_is_deterministic() {
        let g = random_graph(80, 200, 13, 0.3);
        let a = partition(&g, 3, 21).unwrap();
        let b = partition(&g, 3, 21).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn import_all_zeros_matches_single_rank() {
        let g = random_graph(25, 60, 2, 0.5);
        let imported = import_partition_assignment(&g, &vec![0; 25], 1).unwrap();
        let native = partition(&g, 1, 0).unwrap();
        assert_eq!(imported, native);
    }

    #[test]
    fn import_alternating_path() {
        // Path 0-1-2-3, assignment [0,1,0,1]: every edge is cut.
        let g = CsrGraph::from_edges(
            4,
            &[(0, 1), (1, 2), (2, 3)],
            Tensor::zeros(&[4, 0]),
            vec![0; 4],
            vec![true; 4],
            vec![false; 4],
        )
        .unwrap();
        let assignment = vec![0u32, 1, 0, 1];
        let parts = import_partition_assignment(&g, &assignment, 2).unwrap();
        assert_eq!(cut_edges(&g, &assignment), 3);
        assert_eq!(parts[0].num_solid, 2);
        assert_eq!(parts[1].num_solid, 2);
        assert_eq!(parts[0].halo_vid_o(), vec![1, 3]);
        assert_eq!(parts[1].halo_vid_o(), vec![0, 2]);
    }

    #[test]
    fn import_counts_match_assignment_histogram() {
        let g = random_graph(40, 100, 17, 0.5);
        let mut rng = crate::rng::stream(&[18]);
        let assignment: Vec<u32> = (0..40).map(|_| rng.random_range(0..3u32)).collect();
        let parts = import_partition_assignment(&g, &assignment, 3).unwrap();
        for p in &parts {
            let expect = assignment.iter().filter(|&&a| a == p.rank).count();
            assert_eq!(p.num_solid, expect);
        }
    }

    #[test]
    fn import_rejects_out_of_range_rank() {
        let g = random_graph(10, 20, 3, 0.5);
        let mut assignment = vec![0u32; 10];
        assignment[4] = 7;
        assert!(import_partition_assignment(&g, &assignment, 2).is_err());
    }

    #[test]
    fn rank_count_validation() {
        let g = random_graph(5, 8, 4, 0.5);
        assert!(partition(&g, 6, 0).is_err());
        assert!(partition(&g, 0, 0).is_err());
    }

    #[test]
    fn partition_file_roundtrip() {
        let g = generate_sbm(&SbmParams {
            blocks: 2,
            per_block: 15,
            p_in: 0.3,
            p_out: 0.05,
            feature_dim: 3,
            seed: 23,
        })
        .unwrap();
        let parts = partition(&g, 2, 1).unwrap();
        let manifest = manifest_for(&parts, &g, Some(1));
        let dir = tempfile::tempdir().unwrap();
        save_partitions(dir.path(), &parts, &manifest).unwrap();
        for p in &parts {
            let loaded = load_partition(&dir.path().join(format!("part{}.mgp", p.rank))).unwrap();
            assert_eq!(&loaded, p);
        }
        assert_eq!(load_manifest(dir.path()).unwrap(), manifest);
    }
}
