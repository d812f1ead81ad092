//! Experience replay with uniform sampling, plus the growth-limited sampling
//! mode used when replaying a pre-collected dataset as if it were gathered
//! online.

use std::io::{Read, Write};
use std::path::Path;

use gradkit::Matrix;
use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::envs::Transition;
use crate::error::{LabError, Result};

/// Ring buffer of transitions; oldest entries are overwritten once full.
pub struct ReplayBuffer {
    capacity: usize,
    obs_dim: usize,
    action_dim: usize,
    storage: Vec<Transition>,
    cursor: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, obs_dim: usize, action_dim: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        ReplayBuffer {
            capacity,
            obs_dim,
            action_dim,
            storage: Vec::with_capacity(capacity.min(1 << 20)),
            cursor: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.storage.len()
    }

    pub fn is_empty(&self) -> bool {
        self.storage.is_empty()
    }

    pub fn push(&mut self, t: Transition) -> Result<()> {
        if t.obs.len() != self.obs_dim
            || t.next_obs.len() != self.obs_dim
            || t.action.len() != self.action_dim
        {
            return Err(LabError::Config(format!(
                "transition dims ({}, {}) do not match buffer dims ({}, {})",
                t.obs.len(),
                t.action.len(),
                self.obs_dim,
                self.action_dim
            )));
        }
        if self.storage.len() < self.capacity {
            self.storage.push(t);
        } else {
            self.storage[self.cursor] = t;
            self.cursor = (self.cursor + 1) % self.capacity;
        }
        Ok(())
    }

    /// `n` independent uniform draws with replacement.
    pub fn sample(&self, n: usize, rng: &mut ChaCha12Rng) -> Result<Batch> {
        if self.storage.is_empty() {
            return Err(LabError::Usage("sample from empty replay buffer".into()));
        }
        let picks: Vec<&Transition> = (0..n)
            .map(|_| &self.storage[rng.gen_range(0..self.storage.len())])
            .collect();
        Ok(Batch::from_transitions(&picks))
    }

    /// All currently stored transitions in storage order.
    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.storage.iter()
    }
}

/// Uniform draws restricted to the first `min(step_index, len)` items of a
/// fixed dataset: at step N the sampler pretends only the first N transitions
/// have been collected.
pub fn sample_growth_limited<'a>(
    dataset: &'a [Transition],
    step_index: usize,
    n: usize,
    rng: &mut ChaCha12Rng,
) -> Result<Vec<&'a Transition>> {
    if dataset.is_empty() {
        return Err(LabError::Usage("growth-limited sample from empty dataset".into()));
    }
    if step_index == 0 {
        return Err(LabError::Usage("growth-limited sampling needs step_index >= 1".into()));
    }
    let limit = step_index.min(dataset.len());
    Ok((0..n).map(|_| &dataset[rng.gen_range(0..limit)]).collect())
}

/// A sampled mini-batch in matrix form, ready for encoding.
pub struct Batch {
    pub obs: Matrix,
    pub actions: Matrix,
    pub next_obs: Matrix,
    /// column vector
    pub rewards: Matrix,
    /// 1.0 at terminal transitions, 0.0 elsewhere (truncation is not terminal)
    pub done: Vec<f64>,
}

impl Batch {
    pub fn from_transitions(picks: &[&Transition]) -> Batch {
        let n = picks.len();
        assert!(n > 0, "empty batch");
        let obs_dim = picks[0].obs.len();
        let act_dim = picks[0].action.len();
        let mut obs = Matrix::zeros(n, obs_dim);
        let mut actions = Matrix::zeros(n, act_dim);
        let mut next_obs = Matrix::zeros(n, obs_dim);
        let mut rewards = Matrix::zeros(n, 1);
        let mut done = vec![0.0; n];
        for (i, t) in picks.iter().enumerate() {
            obs.data_mut()[i * obs_dim..(i + 1) * obs_dim].copy_from_slice(&t.obs);
            actions.data_mut()[i * act_dim..(i + 1) * act_dim].copy_from_slice(&t.action);
            next_obs.data_mut()[i * obs_dim..(i + 1) * obs_dim].copy_from_slice(&t.next_obs);
            rewards.data_mut()[i] = t.reward;
            done[i] = if t.done { 1.0 } else { 0.0 };
        }
        Batch {
            obs,
            actions,
            next_obs,
            rewards,
            done,
        }
    }

    pub fn size(&self) -> usize {
        self.done.len()
    }
}

/// Write transitions as a flat binary file.
///
/// Layout: magic `OFED1`, u32 obs_dim, u32 action_dim, u64 count, then per
/// transition `obs, action, next_obs, reward, done, truncated` as row-major
/// little-endian f64 (flags encoded 0.0/1.0).
pub fn dump_transitions(path: &Path, transitions: &[Transition]) -> Result<()> {
    if transitions.is_empty() {
        return Err(LabError::Usage("refusing to dump an empty dataset".into()));
    }
    let obs_dim = transitions[0].obs.len();
    let action_dim = transitions[0].action.len();
    let mut out = Vec::new();
    out.extend_from_slice(b"OFED1");
    out.extend_from_slice(&(obs_dim as u32).to_le_bytes());
    out.extend_from_slice(&(action_dim as u32).to_le_bytes());
    out.extend_from_slice(&(transitions.len() as u64).to_le_bytes());
    for t in transitions {
        for v in t
            .obs
            .iter()
            .chain(t.action.iter())
            .chain(t.next_obs.iter())
        {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&t.reward.to_le_bytes());
        out.extend_from_slice(&(if t.done { 1.0f64 } else { 0.0 }).to_le_bytes());
        out.extend_from_slice(&(if t.truncated { 1.0f64 } else { 0.0 }).to_le_bytes());
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

pub fn load_transitions(path: &Path) -> Result<Vec<Transition>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 21 || &bytes[..5] != b"OFED1" {
        return Err(LabError::Config(format!("{}: not a transition dump", path.display())));
    }
    let obs_dim = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
    let action_dim = u32::from_le_bytes(bytes[9..13].try_into().unwrap()) as usize;
    let count = u64::from_le_bytes(bytes[13..21].try_into().unwrap()) as usize;
    let floats_per_row = 2 * obs_dim + action_dim + 3;
    let expected = 21 + count * floats_per_row * 8;
    if bytes.len() != expected {
        return Err(LabError::Config(format!(
            "{}: expected {} bytes, found {}",
            path.display(),
            expected,
            bytes.len()
        )));
    }
    let mut pos = 21;
    let mut read = || {
        let v = f64::from_le_bytes(bytes[pos..pos + 8].try_into().unwrap());
        pos += 8;
        v
    };
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let obs: Vec<f64> = (0..obs_dim).map(|_| read()).collect();
        let action: Vec<f64> = (0..action_dim).map(|_| read()).collect();
        let next_obs: Vec<f64> = (0..obs_dim).map(|_| read()).collect();
        let reward = read();
        let done = read() != 0.0;
        let truncated = read() != 0.0;
        out.push(Transition {
            obs,
            action,
            next_obs,
            reward,
            done,
            truncated,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{substream, Stream};

    fn t(v: f64) -> Transition {
        Transition {
            obs: vec![v],
            action: vec![0.0],
            next_obs: vec![v + 1.0],
            reward: v,
            done: false,
            truncated: false,
        }
    }

    #[test]
    fn ring_overwrites_oldest_first() {
        let mut buf = ReplayBuffer::new(2, 1, 1);
        buf.push(t(0.0)).unwrap();
        buf.push(t(1.0)).unwrap();
        buf.push(t(2.0)).unwrap();
        assert_eq!(buf.len(), 2);
        let stored: Vec<f64> = buf.iter().map(|x| x.reward).collect();
        assert!(stored.contains(&1.0) && stored.contains(&2.0));
        assert!(!stored.contains(&0.0));
    }

    #[test]
    fn singleton_buffer_always_samples_the_same_transition() {
        let mut buf = ReplayBuffer::new(8, 1, 1);
        buf.push(t(7.0)).unwrap();
        let mut rng = substream(0, Stream::ReplayAgent, 0);
        let batch = buf.sample(5, &mut rng).unwrap();
        for i in 0..5 {
            assert_eq!(batch.rewards.get(i, 0), 7.0);
        }
    }

    #[test]
    fn after_capacity_plus_k_pushes_only_the_latest_remain() {
        let mut buf = ReplayBuffer::new(5, 1, 1);
        for i in 0..12 {
            buf.push(t(i as f64)).unwrap();
        }
        let mut stored: Vec<f64> = buf.iter().map(|x| x.reward).collect();
        stored.sort_by(f64::total_cmp);
        assert_eq!(stored, vec![7.0, 8.0, 9.0, 10.0, 11.0]);
    }

    #[test]
    fn dim_mismatch_is_a_config_error() {
        let mut buf = ReplayBuffer::new(4, 2, 1);
        assert!(matches!(buf.push(t(0.0)), Err(LabError::Config(_))));
    }

    #[test]
    fn empty_buffer_sampling_is_a_usage_error() {
        let buf = ReplayBuffer::new(4, 1, 1);
        let mut rng = substream(0, Stream::ReplayAgent, 0);
        assert!(matches!(buf.sample(1, &mut rng), Err(LabError::Usage(_))));
    }

    #[test]
    fn same_rng_seed_gives_the_same_batch() {
        let mut buf = ReplayBuffer::new(32, 1, 1);
        for i in 0..32 {
            buf.push(t(i as f64)).unwrap();
        }
        let b1 = buf.sample(8, &mut substream(3, Stream::ReplayAux, 0)).unwrap();
        let b2 = buf.sample(8, &mut substream(3, Stream::ReplayAux, 0)).unwrap();
        assert_eq!(b1.rewards.data(), b2.rewards.data());
    }

    #[test]
    fn uniform_sampling_frequencies_within_five_percent() {
        let mut buf = ReplayBuffer::new(10, 1, 1);
        for i in 0..10 {
            buf.push(t(i as f64)).unwrap();
        }
        let mut rng = substream(17, Stream::ReplayAgent, 0);
        let mut counts = [0usize; 10];
        let draws = 100_000;
        let batch = buf.sample(draws, &mut rng).unwrap();
        for i in 0..draws {
            counts[batch.rewards.get(i, 0) as usize] += 1;
        }
        for (i, &c) in counts.iter().enumerate() {
            let freq = c as f64 / draws as f64;
            assert!((freq - 0.1).abs() < 0.005, "index {i} freq {freq}");
        }
    }

    #[test]
    fn growth_limited_sampling_respects_the_step_index() {
        let data: Vec<Transition> = (0..50).map(|i| t(i as f64)).collect();
        let mut rng = substream(5, Stream::ReplayAux, 0);
        // N = 1: always item 0
        for _ in 0..10 {
            let picks = sample_growth_limited(&data, 1, 4, &mut rng).unwrap();
            assert!(picks.iter().all(|p| p.reward == 0.0));
        }
        // N beyond the dataset length behaves like plain uniform sampling
        let picks = sample_growth_limited(&data, 10_000, 64, &mut rng).unwrap();
        assert!(picks.iter().any(|p| p.reward > 40.0));
        // never an index >= N
        for n in [2usize, 7, 23] {
            for _ in 0..20 {
                let picks = sample_growth_limited(&data, n, 16, &mut rng).unwrap();
                assert!(picks.iter().all(|p| (p.reward as usize) < n));
            }
        }
        assert!(sample_growth_limited(&data, 0, 1, &mut rng).is_err());
    }

    #[test]
    fn dump_and_load_round_trip() {
        let dir = std::env::temp_dir().join("ofelab_replay_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("dump.bin");
        let data: Vec<Transition> = (0..7)
            .map(|i| Transition {
                obs: vec![i as f64, -1.0],
                action: vec![0.5],
                next_obs: vec![i as f64 + 1.0, 1.0],
                reward: -(i as f64),
                done: i == 3,
                truncated: i == 6,
            })
            .collect();
        dump_transitions(&path, &data).unwrap();
        let back = load_transitions(&path).unwrap();
        assert_eq!(back, data);
        std::fs::remove_file(&path).unwrap();
    }
}
