//! The software-managed Historical Embedding Cache: fixed-capacity lines of
//! remote-vertex embeddings tagged by VID_o, with a maximum life-span `ls`
//! and oldest-cache-line-first (OCF) replacement. Also the `db_halo`
//! database (which locally-solid vertices are halo on which remote rank) and
//! the solid→halo Map used to pick what to push each iteration.

use crate::error::{Error, Result};
use crate::partition::Partition;
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::collections::{BTreeSet, HashMap, HashSet};

const FREE_TAG: u64 = u64::MAX;

/// Reference to a resident cache line, valid until the next store.
#[derive(Clone, Copy, Debug)]
pub struct SlotHandle {
    slot: u32,
    version: u64,
}

/// What a store batch did, line by line.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct StoreReport {
    pub replaced_same_tag: usize,
    pub replaced_expired: usize,
    pub filled_new: usize,
    pub evicted_oldest: usize,
}

/// One layer's historical embedding cache.
///
/// A line's age is the number of `age_tick` calls since it was stored; lines
/// with age > `ls` are invisible to search and are reclaimed preferentially
/// by stores, so lazy purging is unobservable from the outside.
#[derive(Clone, Debug)]
pub struct Hec {
    cs: usize,
    dim: usize,
    ls: u32,
    now: u64,
    version: u64,
    tags: Vec<u64>,
    births: Vec<u64>,
    data: Vec<f64>,
    index: HashMap<u64, u32>,
    /// (birth, !tag, slot): the first element is the eviction victim —
    /// oldest line, ties broken toward the larger tag.
    order: BTreeSet<(u64, u64, u32)>,
    free: BTreeSet<u32>,
}

impl Hec {
    pub fn new(cs: usize, dim: usize, ls: u32) -> Hec {
        Hec {
            cs,
            dim,
            ls,
            now: 0,
            version: 0,
            tags: vec![FREE_TAG; cs],
            births: vec![0; cs],
            data: vec![0.0; cs * dim],
            index: HashMap::new(),
            order: BTreeSet::new(),
            free: (0..cs as u32).collect(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.cs
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn lifespan(&self) -> u32 {
        self.ls
    }

    pub fn occupied(&self) -> usize {
        self.cs - self.free.len()
    }

    #[inline]
    fn age(&self, slot: u32) -> u64 {
        self.now - self.births[slot as usize]
    }

    #[inline]
    fn is_live(&self, slot: u32) -> bool {
        self.age(slot) <= self.ls as u64
    }

    /// Looks up each key; a hit requires a resident tag whose age is within
    /// the life-span. No mutation.
    pub fn search(&self, keys: &[u64]) -> Vec<Option<SlotHandle>> {
        keys.iter()
            .map(|k| {
                self.index.get(k).and_then(|&slot| {
                    if self.is_live(slot) {
                        Some(SlotHandle {
                            slot,
                            version: self.version,
                        })
                    } else {
                        None
                    }
                })
            })
            .collect()
    }

    /// Gathers the rows behind `handles`, in handle order.
    pub fn load(&self, handles: &[SlotHandle]) -> Result<Tensor> {
        let mut out = Vec::with_capacity(handles.len() * self.dim);
        for h in handles {
            if h.version != self.version {
                return Err(Error::StaleHandle);
            }
            let s = h.slot as usize;
            out.extend_from_slice(&self.data[s * self.dim..(s + 1) * self.dim]);
        }
        Tensor::from_vec(&[handles.len(), self.dim], out)
    }

    /// Stores one row per tag. A matching tag is overwritten in place; then
    /// expired lines are reclaimed oldest-first; then free lines fill; at
    /// capacity the oldest line is evicted (ties: larger tag first).
    pub fn store(&mut self, tags: &[u64], rows: &Tensor) -> Result<StoreReport> {
        if rows.rows() != tags.len() || rows.cols() != self.dim {
            return Err(Error::shape(format!(
                "store: {} tags, rows {:?}, line width {}",
                tags.len(),
                rows.shape(),
                self.dim
            )));
        }
        self.version += 1;
        let mut report = StoreReport::default();
        for (i, &tag) in tags.iter().enumerate() {
            debug_assert_ne!(tag, FREE_TAG, "reserved tag");
            let row = rows.row(i);
            if let Some(&slot) = self.index.get(&tag) {
                self.order.remove(&(self.births[slot as usize], !tag, slot));
                self.fill_slot(slot, tag, row);
                report.replaced_same_tag += 1;
                continue;
            }
            // Oldest line overall; all expired lines are older than all live
            // ones, so this is also the oldest expired line when one exists.
            let victim = self.order.first().copied();
            match victim {
                Some((birth, _, slot)) if self.now - birth > self.ls as u64 => {
                    self.replace_slot(slot, tag, row);
                    report.replaced_expired += 1;
                }
                _ => {
                    if let Some(&slot) = self.free.first() {
                        self.free.remove(&slot);
                        self.fill_slot(slot, tag, row);
                        report.filled_new += 1;
                    } else {
                        let (_, _, slot) = victim.expect("full cache has an order entry");
                        self.replace_slot(slot, tag, row);
                        report.evicted_oldest += 1;
                    }
                }
            }
        }
        Ok(report)
    }

    fn replace_slot(&mut self, slot: u32, tag: u64, row: &[f64]) {
        let old_tag = self.tags[slot as usize];
        self.order
            .remove(&(self.births[slot as usize], !old_tag, slot));
        self.index.remove(&old_tag);
        self.fill_slot(slot, tag, row);
    }

    fn fill_slot(&mut self, slot: u32, tag: u64, row: &[f64]) {
        let s = slot as usize;
        self.tags[s] = tag;
        self.births[s] = self.now;
        self.data[s * self.dim..(s + 1) * self.dim].copy_from_slice(row);
        self.index.insert(tag, slot);
        self.order.insert((self.now, !tag, slot));
    }

    /// Advances every line's age by one iteration; lines beyond the
    /// life-span become invisible to search and reclaimable by store.
    pub fn age_tick(&mut self) {
        self.now += 1;
    }

    /// (tag, age) of every resident line, sorted by tag. Debug/testing aid.
    pub fn debug_dump(&self) -> Vec<(u64, u64)> {
        let mut out: Vec<(u64, u64)> = self
            .index
            .iter()
            .map(|(&tag, &slot)| (tag, self.age(slot)))
            .collect();
        out.sort_unstable();
        out
    }
}

/// Per remote rank: the locally-solid original ids that are halo vertices in
/// that rank's partition (i.e. this rank owes them embeddings).
#[derive(Clone, Debug, PartialEq)]
pub struct DbHalo {
    sorted: Vec<Vec<u32>>,
    sets: Vec<HashSet<u32>>,
}

impl DbHalo {
    pub fn num_ranks(&self) -> usize {
        self.sorted.len()
    }

    pub fn entries(&self, rank: u32) -> &[u32] {
        &self.sorted[rank as usize]
    }

    pub fn contains(&self, rank: u32, vid_o: u32) -> bool {
        self.sets[rank as usize].contains(&vid_o)
    }

    pub fn is_empty(&self) -> bool {
        self.sorted.iter().all(|s| s.is_empty())
    }
}

/// Builds `db_halo` from the broadcast result: `db[r]` keeps the vertices of
/// rank r's halo list that are solid here. The local rank's own entry stays
/// empty.
pub fn create_db(halo_lists: &[Vec<u32>], local: &Partition) -> DbHalo {
    let mut sorted = Vec::with_capacity(halo_lists.len());
    let mut sets = Vec::with_capacity(halo_lists.len());
    for (r, list) in halo_lists.iter().enumerate() {
        let mut v: Vec<u32> = if r as u32 == local.rank {
            Vec::new()
        } else {
            list.iter()
                .copied()
                .filter(|&o| {
                    local
                        .vid_p_of(o)
                        .is_some_and(|p| !local.is_halo(p))
                })
                .collect()
        };
        v.sort_unstable();
        sets.push(v.iter().copied().collect());
        sorted.push(v);
    }
    DbHalo { sorted, sets }
}

/// For each remote rank, the subset of the given solid minibatch vertices
/// whose VID_o appears in that rank's db entry, as (VID_b, VID_o) pairs in
/// ascending VID_o order. Membership tests run across the solid list in
/// parallel; output order is canonical.
pub fn map_solids(
    solid_vid_b: &[u32],
    vid_to_pid: &[u32],
    p: &Partition,
    db: &DbHalo,
) -> Vec<Vec<(u32, u32)>> {
    let pairs: Vec<(u32, u32)> = solid_vid_b
        .par_iter()
        .map(|&b| (b, p.vid_o(vid_to_pid[b as usize])))
        .collect();
    let mut out = Vec::with_capacity(db.num_ranks());
    for r in 0..db.num_ranks() as u32 {
        let mut hits: Vec<(u32, u32)> = pairs
            .par_iter()
            .copied()
            .filter(|&(_, o)| db.contains(r, o))
            .collect();
        hits.sort_unstable_by_key(|&(_, o)| o);
        out.push(hits);
    }
    out
}

/// Caps a candidate list at `nc` by weighted sampling without replacement,
/// weight proportional to vertex degree (uniform when all degrees are zero).
/// The surviving subset is returned in ascending VID_o order.
pub fn sample_by_degree(
    candidates: &[(u32, u32)],
    nc: usize,
    degrees: &[u64],
    rng: &mut ChaCha8Rng,
) -> Vec<(u32, u32)> {
    assert_eq!(candidates.len(), degrees.len());
    if candidates.len() <= nc {
        return candidates.to_vec();
    }
    let all_zero = degrees.iter().all(|&d| d == 0);
    let mut weights: Vec<f64> = degrees
        .iter()
        .map(|&d| if all_zero { 1.0 } else { d as f64 })
        .collect();
    let mut remaining: f64 = weights.iter().sum();
    let mut picked = Vec::with_capacity(nc);
    for _ in 0..nc {
        let x = rng.random_range(0.0..remaining);
        let mut acc = 0.0;
        let mut chosen = None;
        for (i, &w) in weights.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            acc += w;
            if x < acc {
                chosen = Some(i);
                break;
            }
        }
        // Float roundoff can walk past the end; take the last positive weight.
        let i = chosen.unwrap_or_else(|| {
            weights
                .iter()
                .rposition(|&w| w > 0.0)
                .expect("candidates remain")
        });
        picked.push(candidates[i]);
        remaining -= weights[i];
        weights[i] = 0.0;
    }
    picked.sort_unstable_by_key(|&(_, o)| o);
    picked
}
