//! Ring-buffer trajectory storage.
//!
//! Each slot stores one transition `(o, a, r, done, env_id)`. The next
//! observation is not duplicated: consecutive transitions of the same
//! environment stream are linked, and `o'` of a linked transition is the
//! observation of its successor. Only transitions without a stored successor
//! (episode ends, stream ends, the most recent step of each environment)
//! keep their own copy of `o'`. Segments of length `T` follow the links, so a
//! segment can never cross an episode boundary.

use std::collections::BTreeMap;
use std::path::Path;

use cresp_tensor::checkpoint::{load_records, save_records};
use cresp_tensor::Tensor;
use rand::Rng;

use crate::error::{Error, Result};

/// Default capacity.
pub const DEFAULT_CAPACITY: usize = 100_000;

/// One stored transition, materialized.
#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub obs: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_obs: Vec<f64>,
    pub done: bool,
    pub env_id: usize,
}

/// Minibatch of single transitions, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct TransitionBatch {
    pub batch: usize,
    pub obs: Vec<f64>,
    pub actions: Vec<f64>,
    pub rewards: Vec<f64>,
    pub next_obs: Vec<f64>,
    pub dones: Vec<bool>,
    pub env_ids: Vec<usize>,
}

/// Minibatch of length-`horizon` segments, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentBatch {
    pub batch: usize,
    pub horizon: usize,
    /// `o_t`.
    pub obs: Vec<f64>,
    /// `a_t .. a_{t+T-1}`, `batch × horizon × action_dim`.
    pub actions: Vec<f64>,
    /// `r_{t+1} .. r_{t+T}`, `batch × horizon`.
    pub rewards: Vec<f64>,
    /// `o_{t+1}`.
    pub next_obs: Vec<f64>,
    /// `o_{t+T}`.
    pub obs_end: Vec<f64>,
    pub env_ids: Vec<usize>,
    /// Sequence numbers of the segment starts.
    pub starts: Vec<u64>,
}

#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    obs_dim: usize,
    action_dim: usize,
    obs: Vec<f64>,
    actions: Vec<f64>,
    rewards: Vec<f64>,
    dones: Vec<bool>,
    env_ids: Vec<usize>,
    seqs: Vec<u64>,
    next: Vec<Option<u64>>,
    /// `o'` of transitions without a stored successor, by sequence number.
    tails: BTreeMap<u64, Vec<f64>>,
    /// Latest unfinished transition per environment.
    open: BTreeMap<usize, u64>,
    total: u64,
}

/// Attempts per requested sample before falling back to enumeration.
const REJECTION_ATTEMPTS: usize = 32;

impl ReplayBuffer {
    pub fn new(capacity: usize, obs_dim: usize, action_dim: usize) -> Result<Self> {
        if capacity == 0 || obs_dim == 0 || action_dim == 0 {
            return Err(Error::Replay(
                "capacity, obs_dim and action_dim must be positive".into(),
            ));
        }
        Ok(Self {
            capacity,
            obs_dim,
            action_dim,
            obs: Vec::new(),
            actions: Vec::new(),
            rewards: Vec::new(),
            dones: Vec::new(),
            env_ids: Vec::new(),
            seqs: Vec::new(),
            next: Vec::new(),
            tails: BTreeMap::new(),
            open: BTreeMap::new(),
            total: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn len(&self) -> usize {
        self.seqs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seqs.is_empty()
    }

    /// Number of transitions ever pushed.
    pub fn total_pushed(&self) -> u64 {
        self.total
    }

    /// Sequence number of the oldest stored transition.
    pub fn oldest(&self) -> u64 {
        self.total - self.len() as u64
    }

    fn contains(&self, q: u64) -> bool {
        q < self.total && q >= self.oldest()
    }

    fn slot(&self, q: u64) -> usize {
        (q % self.capacity as u64) as usize
    }

    pub fn push(
        &mut self,
        obs: &[f64],
        action: &[f64],
        reward: f64,
        next_obs: &[f64],
        done: bool,
        env_id: usize,
    ) -> Result<()> {
        if obs.len() != self.obs_dim || next_obs.len() != self.obs_dim {
            return Err(Error::Length {
                what: "observation vs buffer obs_dim",
                left: obs.len().max(next_obs.len()),
                right: self.obs_dim,
            });
        }
        if action.len() != self.action_dim {
            return Err(Error::Length {
                what: "action vs buffer action_dim",
                left: action.len(),
                right: self.action_dim,
            });
        }
        let q = self.total;
        let slot = self.slot(q);
        if self.len() == self.capacity {
            let evicted = q - self.capacity as u64;
            self.tails.remove(&evicted);
            self.open.retain(|_, s| *s != evicted);
        }
        if let Some(&p) = self.open.get(&env_id) {
            if self.contains(p) && self.tails.get(&p).is_some_and(|t| t.as_slice() == obs) {
                let ps = self.slot(p);
                self.next[ps] = Some(q);
                self.tails.remove(&p);
            }
        }
        let (od, ad) = (self.obs_dim, self.action_dim);
        if slot == self.seqs.len() {
            self.obs.extend_from_slice(obs);
            self.actions.extend_from_slice(action);
            self.rewards.push(reward);
            self.dones.push(done);
            self.env_ids.push(env_id);
            self.seqs.push(q);
            self.next.push(None);
        } else {
            self.obs[slot * od..(slot + 1) * od].copy_from_slice(obs);
            self.actions[slot * ad..(slot + 1) * ad].copy_from_slice(action);
            self.rewards[slot] = reward;
            self.dones[slot] = done;
            self.env_ids[slot] = env_id;
            self.seqs[slot] = q;
            self.next[slot] = None;
        }
        self.tails.insert(q, next_obs.to_vec());
        if done {
            self.open.remove(&env_id);
        } else {
            self.open.insert(env_id, q);
        }
        self.total += 1;
        Ok(())
    }

    /// Stops linking the next push of `env_id` to its previous transition.
    pub fn end_stream(&mut self, env_id: usize) {
        self.open.remove(&env_id);
    }

    fn obs_at(&self, q: u64) -> &[f64] {
        let s = self.slot(q);
        &self.obs[s * self.obs_dim..(s + 1) * self.obs_dim]
    }

    fn next_obs_at(&self, q: u64) -> &[f64] {
        match self.next[self.slot(q)] {
            Some(n) => self.obs_at(n),
            None => &self.tails[&q],
        }
    }

    /// Stored transition with sequence number `q`, if still present.
    pub fn get(&self, q: u64) -> Option<Transition> {
        if !self.contains(q) {
            return None;
        }
        let s = self.slot(q);
        Some(Transition {
            obs: self.obs_at(q).to_vec(),
            action: self.actions[s * self.action_dim..(s + 1) * self.action_dim].to_vec(),
            reward: self.rewards[s],
            next_obs: self.next_obs_at(q).to_vec(),
            done: self.dones[s],
            env_id: self.env_ids[s],
        })
    }

    /// Sequence numbers of a length-`horizon` segment starting at `q`.
    fn segment(&self, q: u64, horizon: usize) -> Option<Vec<u64>> {
        if !self.contains(q) {
            return None;
        }
        let mut out = Vec::with_capacity(horizon);
        out.push(q);
        let mut cur = q;
        for _ in 1..horizon {
            cur = self.next[self.slot(cur)]?;
            out.push(cur);
        }
        Some(out)
    }

    /// Every start index from which a segment of length `horizon` exists.
    pub fn valid_starts(&self, horizon: usize) -> Vec<u64> {
        (self.oldest()..self.total)
            .filter(|&q| self.segment(q, horizon).is_some())
            .collect()
    }

    /// Draws `batch` segments uniformly over valid start indices.
    pub fn sample_segments(&self, batch: usize, horizon: usize, rng: &mut impl Rng) -> Result<SegmentBatch> {
        if horizon == 0 || batch == 0 {
            return Err(Error::Replay("batch and horizon must be positive".into()));
        }
        if self.is_empty() {
            return Err(Error::Replay("buffer is empty".into()));
        }
        let mut segs: Vec<Vec<u64>> = Vec::with_capacity(batch);
        let mut attempts = 0;
        let mut fallback: Option<Vec<u64>> = None;
        while segs.len() < batch {
            if let Some(starts) = &fallback {
                let q = starts[rng.random_range(0..starts.len())];
                segs.push(self.segment(q, horizon).expect("enumerated start is valid"));
                continue;
            }
            let q = self.oldest() + rng.random_range(0..self.len()) as u64;
            if let Some(s) = self.segment(q, horizon) {
                segs.push(s);
            }
            attempts += 1;
            if attempts >= REJECTION_ATTEMPTS * batch {
                let starts = self.valid_starts(horizon);
                if starts.is_empty() {
                    return Err(Error::Replay(format!("no stored segment of length {horizon}")));
                }
                fallback = Some(starts);
            }
        }
        let (od, ad) = (self.obs_dim, self.action_dim);
        let mut out = SegmentBatch {
            batch,
            horizon,
            obs: Vec::with_capacity(batch * od),
            actions: Vec::with_capacity(batch * horizon * ad),
            rewards: Vec::with_capacity(batch * horizon),
            next_obs: Vec::with_capacity(batch * od),
            obs_end: Vec::with_capacity(batch * od),
            env_ids: Vec::with_capacity(batch),
            starts: Vec::with_capacity(batch),
        };
        for seg in &segs {
            let q0 = seg[0];
            out.obs.extend_from_slice(self.obs_at(q0));
            out.next_obs.extend_from_slice(self.next_obs_at(q0));
            out.obs_end
                .extend_from_slice(self.next_obs_at(*seg.last().expect("nonempty")));
            for &q in seg {
                let s = self.slot(q);
                out.actions.extend_from_slice(&self.actions[s * ad..(s + 1) * ad]);
                out.rewards.push(self.rewards[s]);
            }
            out.env_ids.push(self.env_ids[self.slot(q0)]);
            out.starts.push(q0);
        }
        Ok(out)
    }

    /// Draws `batch` transitions uniformly over stored slots.
    pub fn sample_transitions(&self, batch: usize, rng: &mut impl Rng) -> Result<TransitionBatch> {
        if self.is_empty() {
            return Err(Error::Replay("buffer is empty".into()));
        }
        let (od, ad) = (self.obs_dim, self.action_dim);
        let mut out = TransitionBatch {
            batch,
            obs: Vec::with_capacity(batch * od),
            actions: Vec::with_capacity(batch * ad),
            rewards: Vec::with_capacity(batch),
            next_obs: Vec::with_capacity(batch * od),
            dones: Vec::with_capacity(batch),
            env_ids: Vec::with_capacity(batch),
        };
        for _ in 0..batch {
            let q = self.oldest() + rng.random_range(0..self.len()) as u64;
            let s = self.slot(q);
            out.obs.extend_from_slice(self.obs_at(q));
            out.actions.extend_from_slice(&self.actions[s * ad..(s + 1) * ad]);
            out.rewards.push(self.rewards[s]);
            out.next_obs.extend_from_slice(self.next_obs_at(q));
            out.dones.push(self.dones[s]);
            out.env_ids.push(self.env_ids[s]);
        }
        Ok(out)
    }

    /// Writes the buffer in the checkpoint record format.
    pub fn dump(&self, path: &Path) -> Result<()> {
        let n = self.len();
        let order: Vec<u64> = (self.oldest()..self.total).collect();
        let mut obs = Vec::with_capacity(n * self.obs_dim);
        let mut actions = Vec::with_capacity(n * self.action_dim);
        let mut scalars = Vec::with_capacity(n * 4);
        for &q in &order {
            let s = self.slot(q);
            obs.extend_from_slice(self.obs_at(q));
            actions.extend_from_slice(&self.actions[s * self.action_dim..(s + 1) * self.action_dim]);
            scalars.push(self.rewards[s]);
            scalars.push(if self.dones[s] { 1.0 } else { 0.0 });
            scalars.push(self.env_ids[s] as f64);
            scalars.push(self.next[s].map_or(-1.0, |x| x as f64));
        }
        let mut tail_seq = Vec::with_capacity(self.tails.len());
        let mut tail_obs = Vec::with_capacity(self.tails.len() * self.obs_dim);
        for (q, o) in &self.tails {
            tail_seq.push(*q as f64);
            tail_obs.extend_from_slice(o);
        }
        let open: Vec<f64> = self.open.iter().flat_map(|(e, q)| [*e as f64, *q as f64]).collect();
        let meta = Tensor::row(vec![
            self.capacity as f64,
            self.obs_dim as f64,
            self.action_dim as f64,
            self.total as f64,
        ]);
        let rows = |len: usize, cols: usize, d: Vec<f64>| Tensor::new(vec![len, cols], d);
        let obs = rows(n, self.obs_dim, obs)?;
        let actions = rows(n, self.action_dim, actions)?;
        let scalars = rows(n, 4, scalars)?;
        let tail_seq = Tensor::new(vec![self.tails.len()], tail_seq)?;
        let tail_obs = rows(self.tails.len(), self.obs_dim, tail_obs)?;
        let open = rows(self.open.len(), 2, open)?;
        save_records(
            path,
            &[
                ("meta", &meta),
                ("obs", &obs),
                ("actions", &actions),
                ("scalars", &scalars),
                ("tail_seq", &tail_seq),
                ("tail_obs", &tail_obs),
                ("open", &open),
            ],
        )?;
        Ok(())
    }

    /// Reads a buffer written by [`ReplayBuffer::dump`].
    pub fn load(path: &Path) -> Result<Self> {
        let recs: BTreeMap<String, Tensor> = load_records(path)?.into_iter().collect();
        let get = |k: &str| {
            recs.get(k)
                .ok_or_else(|| Error::Replay(format!("dump is missing record {k}")))
        };
        let meta = get("meta")?.data();
        if meta.len() != 4 {
            return Err(Error::Replay("malformed meta record".into()));
        }
        let (capacity, obs_dim, action_dim, total) =
            (meta[0] as usize, meta[1] as usize, meta[2] as usize, meta[3] as u64);
        let mut buf = Self::new(capacity, obs_dim, action_dim)?;
        let obs = get("obs")?.data();
        let actions = get("actions")?.data();
        let scalars = get("scalars")?.data();
        let n = scalars.len() / 4;
        if n > capacity || (n as u64) > total || obs.len() != n * obs_dim || actions.len() != n * action_dim {
            return Err(Error::Replay("inconsistent record sizes in dump".into()));
        }
        buf.total = total;
        let oldest = total - n as u64;
        // Rebuild slots in ring order.
        let mut slots: Vec<(usize, u64, usize)> = (0..n)
            .map(|i| ((oldest + i as u64) as usize % capacity, oldest + i as u64, i))
            .collect();
        slots.sort_unstable();
        for (slot, q, i) in slots {
            debug_assert_eq!(slot, buf.seqs.len());
            let sc = &scalars[4 * i..4 * i + 4];
            buf.obs.extend_from_slice(&obs[i * obs_dim..(i + 1) * obs_dim]);
            buf.actions
                .extend_from_slice(&actions[i * action_dim..(i + 1) * action_dim]);
            buf.rewards.push(sc[0]);
            buf.dones.push(sc[1] != 0.0);
            buf.env_ids.push(sc[2] as usize);
            buf.seqs.push(q);
            buf.next.push((sc[3] >= 0.0).then_some(sc[3] as u64));
        }
        let tail_seq = get("tail_seq")?.data();
        let tail_obs = get("tail_obs")?.data();
        if tail_obs.len() != tail_seq.len() * obs_dim {
            return Err(Error::Replay("inconsistent tail records in dump".into()));
        }
        for (i, q) in tail_seq.iter().enumerate() {
            buf.tails
                .insert(*q as u64, tail_obs[i * obs_dim..(i + 1) * obs_dim].to_vec());
        }
        for pair in get("open")?.data().chunks(2) {
            buf.open.insert(pair[0] as usize, pair[1] as u64);
        }
        for q in buf.oldest()..buf.total {
            if buf.next[buf.slot(q)].is_none() && !buf.tails.contains_key(&q) {
                return Err(Error::Replay(format!("transition {q} has no next observation")));
            }
        }
        Ok(buf)
    }
}
