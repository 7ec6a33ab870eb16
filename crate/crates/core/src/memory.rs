//! Key/value feature memory with affinity readout, and the store/evict
//! policy: every `interval`-th frame that still shows the target, a
//! permanent first frame, and usage/age eviction once over capacity.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct MemoryEntry {
    /// `[Ck×h×w]`
    pub key: Tensor,
    /// `[Cv×h×w]`
    pub value: Tensor,
    pub frame_idx: usize,
    /// Accumulated affinity mass received during readouts.
    pub usage: f64,
    pub permanent: bool,
}

impl MemoryEntry {
    fn locations(&self) -> usize {
        self.key.dim(1) * self.key.dim(2)
    }
}

/// One object's memory. `capacity` bounds the working (non-permanent) entries.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryBank {
    entries: Vec<MemoryEntry>,
    capacity: usize,
    interval: usize,
}

/// Store policy: the first frame always, afterwards every `interval`-th
/// frame on which the object is still visible.
pub fn should_store(frame_idx: usize, has_target: bool, interval: usize) -> bool {
    frame_idx == 0 || (interval > 0 && frame_idx.is_multiple_of(interval) && has_target)
}

impl MemoryBank {
    pub fn new(capacity: usize, interval: usize) -> Result<Self> {
        if capacity == 0 || interval == 0 {
            return Err(Error::Config(
                "memory capacity and interval must be at least 1".into(),
            ));
        }
        Ok(MemoryBank {
            entries: Vec::new(),
            capacity,
            interval,
        })
    }

    pub fn entries(&self) -> &[MemoryEntry] {
        &self.entries
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn interval(&self) -> usize {
        self.interval
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn frame_indices(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.frame_idx).collect()
    }

    pub fn should_store(&self, frame_idx: usize, has_target: bool) -> bool {
        should_store(frame_idx, has_target, self.interval)
    }

    /// Appends an entry and evicts down to capacity.
    pub fn store(&mut self, key: Tensor, value: Tensor, frame_idx: usize) -> Result<()> {
        if key.rank() != 3 || value.rank() != 3 || key.shape()[1..] != value.shape()[1..] {
            return Err(Error::dim(format!(
                "key {:?} and value {:?} must be C×h×w with equal spatial dims",
                key.shape(),
                value.shape()
            )));
        }
        if let Some(last) = self.entries.last() {
            if frame_idx <= last.frame_idx {
                return Err(Error::State(format!(
                    "frame {frame_idx} stored after frame {}",
                    last.frame_idx
                )));
            }
            if last.key.dim(0) != key.dim(0) || last.value.dim(0) != value.dim(0) {
                return Err(Error::dim("entry channel counts differ from the bank"));
            }
        }
        self.entries.push(MemoryEntry {
            key,
            value,
            frame_idx,
            usage: 0.0,
            permanent: frame_idx == 0,
        });
        if self.working() > self.capacity {
            self.consolidate(frame_idx)?;
        }
        Ok(())
    }

    fn working(&self) -> usize {
        self.entries.iter().filter(|e| !e.permanent).count()
    }

    /// Removes working entries with the lowest `usage / age` (age counted in
    /// frames up to `now`; ties go to the older entry) until the bank is
    /// within capacity. The entry stored at `now` is never a candidate, so a
    /// fresh memory is not discarded before it could be read.
    pub fn consolidate(&mut self, now: usize) -> Result<()> {
        while self.working() > self.capacity {
            let victim = self
                .entries
                .iter()
                .enumerate()
                .filter(|(_, e)| !e.permanent && e.frame_idx < now)
                .map(|(i, e)| (i, e.usage / (now - e.frame_idx) as f64))
                .fold(None::<(usize, f64)>, |best, (i, r)| match best {
                    Some((_, b)) if b <= r => best,
                    _ => Some((i, r)),
                });
            match victim {
                Some((i, _)) => {
                    self.entries.remove(i);
                }
                None => {
                    return Err(Error::State(
                        "no evictable entry; capacity cannot be met".into(),
                    ))
                }
            }
        }
        Ok(())
    }

    /// Reads the memory at every location of `query_key[Ck×H×W]`; returns
    /// `[Cv×H×W]` and adds each entry's received affinity mass to its usage.
    pub fn readout(&mut self, query_key: &Tensor) -> Result<Tensor> {
        if self.entries.is_empty() {
            return Err(Error::State("readout from an empty memory bank".into()));
        }
        if query_key.rank() != 3 || query_key.dim(0) != self.entries[0].key.dim(0) {
            return Err(Error::dim(format!(
                "query key {:?} does not match memory keys with {} channels",
                query_key.shape(),
                self.entries[0].key.dim(0)
            )));
        }
        let (h, w) = (query_key.dim(1), query_key.dim(2));
        let mut tape = Tape::new();
        let q = map_rows(&mut tape, query_key)?;
        let keys: Vec<Var> = self
            .entries
            .iter()
            .map(|e| map_rows(&mut tape, &e.key))
            .collect::<Result<_>>()?;
        let values: Vec<Var> = self
            .entries
            .iter()
            .map(|e| map_rows(&mut tape, &e.value))
            .collect::<Result<_>>()?;
        let (out, aff) = readout_vars(&mut tape, q, &keys, &values)?;
        let mass = entry_mass(tape.value(aff), &self.entry_sizes());
        self.record_usage(&mass)?;
        let cv = tape.shape(out)[1];
        let rows = tape.value(out).data();
        Ok(Tensor::from_fn(&[cv, h, w], |i| {
            rows[(i % (h * w)) * cv + i / (h * w)]
        }))
    }

    /// Spatial locations per entry, in order.
    pub fn entry_sizes(&self) -> Vec<usize> {
        self.entries.iter().map(MemoryEntry::locations).collect()
    }

    /// Adds affinity mass received by each entry, e.g. from [`entry_mass`].
    pub fn record_usage(&mut self, mass: &[f64]) -> Result<()> {
        if mass.len() != self.entries.len() {
            return Err(Error::dim(format!(
                "{} usage values for {} entries",
                mass.len(),
                self.entries.len()
            )));
        }
        for (e, m) in self.entries.iter_mut().zip(mass) {
            e.usage += m;
        }
        Ok(())
    }

    /// Memory tensors under `{prefix}.{i}.key|value` plus JSON bookkeeping.
    pub fn to_state(
        &self,
        prefix: &str,
        tensors: &mut BTreeMap<String, Tensor>,
    ) -> serde_json::Value {
        let mut meta = Vec::with_capacity(self.entries.len());
        for (i, e) in self.entries.iter().enumerate() {
            tensors.insert(format!("{prefix}.{i}.key"), e.key.clone());
            tensors.insert(format!("{prefix}.{i}.value"), e.value.clone());
            meta.push(EntryMeta {
                frame_idx: e.frame_idx,
                usage: e.usage,
                permanent: e.permanent,
            });
        }
        serde_json::to_value(BankMeta {
            capacity: self.capacity,
            interval: self.interval,
            entries: meta,
        })
        .expect("plain data serializes")
    }

    pub fn from_state(
        prefix: &str,
        tensors: &BTreeMap<String, Tensor>,
        meta: &serde_json::Value,
    ) -> Result<Self> {
        let m: BankMeta = serde_json::from_value(meta.clone())?;
        let mut bank = MemoryBank::new(m.capacity, m.interval)?;
        for (i, em) in m.entries.into_iter().enumerate() {
            let get = |part: &str| {
                tensors
                    .get(&format!("{prefix}.{i}.{part}"))
                    .cloned()
                    .ok_or_else(|| Error::State(format!("state lacks {prefix}.{i}.{part}")))
            };
            bank.entries.push(MemoryEntry {
                key: get("key")?,
                value: get("value")?,
                frame_idx: em.frame_idx,
                usage: em.usage,
                permanent: em.permanent,
            });
        }
        Ok(bank)
    }
}

#[derive(Serialize, Deserialize)]
struct EntryMeta {
    frame_idx: usize,
    usage: f64,
    permanent: bool,
}

#[derive(Serialize, Deserialize)]
struct BankMeta {
    capacity: usize,
    interval: usize,
    entries: Vec<EntryMeta>,
}

fn map_rows(tape: &mut Tape, map: &Tensor) -> Result<Var> {
    let (c, hw) = (map.dim(0), map.dim(1) * map.dim(2));
    let rows = crate::numerics::kernels::transpose(map.data(), c, hw);
    Ok(tape.constant(Tensor::new(&[hw, c], rows)?))
}

/// Affinity readout on the tape. `query[N×Ck]`, `keys[i][n_i×Ck]`,
/// `values[i][n_i×Cv]`. Returns the `[N×Cv]` readout and the `[N×Σn_i]`
/// affinity (rows sum to one).
pub fn readout_vars(
    tape: &mut Tape,
    query: Var,
    keys: &[Var],
    values: &[Var],
) -> Result<(Var, Var)> {
    if keys.is_empty() || keys.len() != values.len() {
        return Err(Error::State(
            "readout needs at least one key/value pair".into(),
        ));
    }
    let k = tape.concat_rows(keys)?;
    let v = tape.concat_rows(values)?;
    let logits = tape.neg_sq_dist(query, k)?;
    let aff = tape.softmax(logits)?;
    let out = tape.matmul(aff, v)?;
    Ok((out, aff))
}

/// Sums an `[N×Σn_i]` affinity into per-entry mass.
pub fn entry_mass(aff: &Tensor, sizes: &[usize]) -> Vec<f64> {
    let total: usize = sizes.iter().sum();
    let mut mass = vec![0.0; sizes.len()];
    for row in aff.data().chunks_exact(total) {
        let mut start = 0;
        for (m, &n) in mass.iter_mut().zip(sizes) {
            *m += row[start..start + n].iter().sum::<f64>();
            start += n;
        }
    }
    mass
}

pub fn init_weights<R: Rng>(cfg: &ModelConfig, store: &mut ParamStore, rng: &mut R) {
    let c = cfg.channels;
    store.init_linear("memory.key", c, cfg.key_dim, 1.0 / (c as f64).sqrt(), rng);
    store.init_linear(
        "memory.value",
        c + 2,
        cfg.value_dim,
        1.0 / ((c + 2) as f64).sqrt(),
        rng,
    );
}

/// Memory key from stride-4 fused rows `[HW×C]`.
pub fn encode_key(g: &mut Graph, fused_rows: Var) -> Result<Var> {
    g.linear(fused_rows, "memory.key")
}

/// Memory value from stride-4 fused rows, the object's mask and the union of
/// the other objects' masks (each `[HW×1]`).
pub fn encode_value(g: &mut Graph, fused_rows: Var, mask: Var, others: Var) -> Result<Var> {
    let x = g.concat_cols(&[fused_rows, mask, others])?;
    g.linear(x, "memory.value")
}
