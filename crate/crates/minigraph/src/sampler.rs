//! Thread-parallel, synchronous minibatch sampling over a partition's local
//! adjacency. A minibatch is a stack of layered blocks L0…L_{n−1}; L_{n−1}
//! holds the training seed vertices and each outer layer adds uniformly
//! sampled in-neighbors. Halo vertices are sampled like any local neighbor
//! but have no local in-edges, so they stay frontier leaves.

use crate::partition::Partition;
use crate::rng;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

/// Identifies one sampling round; every destination derives its own stream
/// from this key and its VID_p, so results do not depend on the worker pool.
#[derive(Clone, Copy, Debug)]
pub struct SampleKey {
    pub seed: u64,
    pub epoch: u64,
    pub batch: u64,
}

/// One sampled block. `vid_to_pid` maps batch-local ids to partition ids;
/// the first `num_dst` entries are the destinations of this layer and equal
/// the full vertex list of the next inner layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub num_dst: usize,
    pub vid_to_pid: Vec<u32>,
    pub edges_src: Vec<u32>,
    pub edges_dst: Vec<u32>,
    /// VID_b of solid input vertices, ascending.
    pub solid_idx: Vec<u32>,
    /// VID_b of halo input vertices, ascending.
    pub halo_idx: Vec<u32>,
}

impl Layer {
    pub fn num_src(&self) -> usize {
        self.vid_to_pid.len()
    }

    pub fn num_edges(&self) -> usize {
        self.edges_src.len()
    }
}

/// Layered sampled blocks for one iteration, ordered input-side first:
/// `layers[0]` = L0, `layers[n-1]` = L_{n−1} (seed side).
#[derive(Clone, Debug, PartialEq)]
pub struct Minibatch {
    pub layers: Vec<Layer>,
    /// Seed VID_p (all solid training vertices).
    pub seeds: Vec<u32>,
    pub seed_labels: Vec<u32>,
}

/// Deterministic shuffle of the partition's training vertices keyed by
/// (seed, epoch), chunked into `ceil(|tv|/batch_size)` seed sets. The last
/// chunk may be short; an empty training set yields zero minibatches.
pub fn create_minibatches(
    p: &Partition,
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> (Vec<Vec<u32>>, usize) {
    assert!(batch_size >= 1, "batch_size must be at least 1");
    let mut tv = p.train_vertices.clone();
    let mut rng = rng::stream(&[seed, 0x3b5c, epoch, p.rank as u64]);
    for i in (1..tv.len()).rev() {
        let j = rng.random_range(0..=i);
        tv.swap(i, j);
    }
    let chunks: Vec<Vec<u32>> = tv.chunks(batch_size).map(|c| c.to_vec()).collect();
    let m = chunks.len();
    (chunks, m)
}

/// Per-destination sampling stream, keyed by (seed, epoch, batch, VID_p).
pub fn dst_stream(key: &SampleKey, vid_p: u32) -> ChaCha8Rng {
    rng::stream(&[key.seed, 0x51aa, key.epoch, key.batch, vid_p as u64])
}

/// Uniform sample without replacement of `min(len, fanout)` neighbors via a
/// partial Fisher–Yates pass.
fn sample_neighbors(nbrs: &[u32], fanout: usize, rng: &mut ChaCha8Rng) -> Vec<u32> {
    if nbrs.len() <= fanout {
        return nbrs.to_vec();
    }
    let mut pool = nbrs.to_vec();
    for i in 0..fanout {
        let j = rng.random_range(i..pool.len());
        pool.swap(i, j);
    }
    pool.truncate(fanout);
    pool
}

/// Samples the layered blocks rooted at `seeds`. `fanouts[l]` caps layer l's
/// in-edges per destination. Work is distributed across destinations; the
/// result is identical for any worker count.
pub fn sample_blocks(p: &Partition, seeds: &[u32], fanouts: &[usize], key: &SampleKey) -> Minibatch {
    let n = fanouts.len();
    let mut layers: Vec<Layer> = Vec::with_capacity(n);
    let mut cur_dst: Vec<u32> = seeds.to_vec();
    for l in (0..n).rev() {
        let fanout = fanouts[l];
        // Per-destination draws, position-stable regardless of scheduling.
        let sampled: Vec<Vec<u32>> = cur_dst
            .par_iter()
            .map(|&d| {
                if p.is_halo(d) {
                    Vec::new()
                } else {
                    let nbrs = p.in_neighbors(d);
                    if nbrs.is_empty() {
                        Vec::new()
                    } else {
                        sample_neighbors(nbrs, fanout, &mut dst_stream(key, d))
                    }
                }
            })
            .collect();

        // Dense VID_b assignment: destinations first (in order), then new
        // sources by first appearance.
        let mut vid_to_pid: Vec<u32> = cur_dst.clone();
        let mut vid_of = std::collections::HashMap::with_capacity(cur_dst.len() * 2);
        for (b, &d) in cur_dst.iter().enumerate() {
            vid_of.insert(d, b as u32);
        }
        let mut edges_src = Vec::new();
        let mut edges_dst = Vec::new();
        for (dst_b, srcs) in sampled.iter().enumerate() {
            for &s in srcs {
                let sb = *vid_of.entry(s).or_insert_with(|| {
                    vid_to_pid.push(s);
                    (vid_to_pid.len() - 1) as u32
                });
                edges_src.push(sb);
                edges_dst.push(dst_b as u32);
            }
        }
        let solid_idx = find_solid_nodes_of(p, &vid_to_pid);
        let halo_idx = find_halo_nodes_of(p, &vid_to_pid);
        layers.push(Layer {
            num_dst: cur_dst.len(),
            vid_to_pid: vid_to_pid.clone(),
            edges_src,
            edges_dst,
            solid_idx,
            halo_idx,
        });
        cur_dst = vid_to_pid;
    }
    layers.reverse();
    let seed_labels = seeds.iter().map(|&s| p.labels[s as usize]).collect();
    Minibatch {
        layers,
        seeds: seeds.to_vec(),
        seed_labels,
    }
}

fn find_halo_nodes_of(p: &Partition, vid_to_pid: &[u32]) -> Vec<u32> {
    (0..vid_to_pid.len() as u32)
        .filter(|&b| p.is_halo(vid_to_pid[b as usize]))
        .collect()
}

fn find_solid_nodes_of(p: &Partition, vid_to_pid: &[u32]) -> Vec<u32> {
    (0..vid_to_pid.len() as u32)
        .filter(|&b| !p.is_halo(vid_to_pid[b as usize]))
        .collect()
}

/// VID_b whose VID_p maps to a halo LUT entry (layer input vertices).
pub fn find_halo_nodes(p: &Partition, layer: &Layer) -> Vec<u32> {
    find_halo_nodes_of(p, &layer.vid_to_pid)
}

/// VID_b whose VID_p maps to a solid LUT entry.
pub fn find_solid_nodes(p: &Partition, layer: &Layer) -> Vec<u32> {
    find_solid_nodes_of(p, &layer.vid_to_pid)
}
