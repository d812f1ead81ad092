//! Named parameter storage and the Adam optimizer.
//!
//! A [`ParamStore`] owns every trainable array of one component (an agent, a
//! feature extractor). Parameters keep a value and an accumulated gradient;
//! the tape writes into the gradient via
//! [`Graph::collect_grads`](crate::graph::Graph::collect_grads), and one or
//! more [`Adam`] instances consume it. Stores carry a process-unique id so a
//! graph holding leaves from two different stores routes each gradient to the
//! right owner.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{GradError, Result};
use crate::matrix::Matrix;

static NEXT_STORE_ID: AtomicU64 = AtomicU64::new(1);

/// Index of a parameter within its store.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

struct Slot {
    name: String,
    value: Matrix,
    grad: Matrix,
}

pub struct ParamStore {
    store_id: u64,
    slots: Vec<Slot>,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore {
            store_id: NEXT_STORE_ID.fetch_add(1, Ordering::Relaxed),
            slots: Vec::new(),
        }
    }

    pub fn store_id(&self) -> u64 {
        self.store_id
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        let (r, c) = value.shape();
        self.slots.push(Slot {
            name: name.into(),
            value,
            grad: Matrix::zeros(r, c),
        });
        ParamId(self.slots.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn ids(&self) -> Vec<ParamId> {
        (0..self.slots.len()).map(ParamId).collect()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.slots[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Matrix {
        &self.slots[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.slots[id.0].value
    }

    pub fn set_value(&mut self, id: ParamId, value: Matrix) {
        assert_eq!(
            self.slots[id.0].value.shape(),
            value.shape(),
            "set_value shape mismatch for {}",
            self.slots[id.0].name
        );
        self.slots[id.0].value = value;
    }

    pub fn grad(&self, id: ParamId) -> &Matrix {
        &self.slots[id.0].grad
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.slots[id.0].grad
    }

    pub fn zero_grads(&mut self) {
        for s in &mut self.slots {
            s.grad.fill(0.0);
        }
    }

    /// Total number of scalar entries across the given parameters.
    pub fn count_entries(&self, ids: &[ParamId]) -> usize {
        ids.iter().map(|id| self.slots[id.0].value.len()).sum()
    }

    /// Polyak update: `target = tau * source + (1 - tau) * target`, matched
    /// pairwise over the two id lists. `tau = 1` copies exactly.
    pub fn polyak_from(&mut self, targets: &[ParamId], sources: &[ParamId], tau: f64) {
        assert_eq!(targets.len(), sources.len());
        for (&t, &s) in targets.iter().zip(sources.iter()) {
            let src = self.slots[s.0].value.clone();
            let dst = &mut self.slots[t.0].value;
            assert_eq!(dst.shape(), src.shape());
            if tau == 1.0 {
                *dst = src;
            } else {
                for (d, v) in dst.data_mut().iter_mut().zip(src.data().iter()) {
                    *d = tau * v + (1.0 - tau) * *d;
                }
            }
        }
    }

    /// Serialize all parameters (names and values) to a flat byte buffer.
    ///
    /// Layout: `b"GKP1"`, u32 count, then per entry u16 name length, name
    /// bytes, u32 rows, u32 cols, row-major f64 little-endian data.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(b"GKP1");
        out.extend_from_slice(&(self.slots.len() as u32).to_le_bytes());
        for s in &self.slots {
            let name = s.name.as_bytes();
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name);
            let (r, c) = s.value.shape();
            out.extend_from_slice(&(r as u32).to_le_bytes());
            out.extend_from_slice(&(c as u32).to_le_bytes());
            for v in s.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Restore parameter values from [`ParamStore::to_bytes`] output. Names
    /// and shapes must match the store's current layout exactly.
    pub fn load_bytes(&mut self, bytes: &[u8]) -> Result<()> {
        let mut cur = Cursor { buf: bytes, pos: 0 };
        let magic = cur.take(4)?;
        if magic != b"GKP1" {
            return Err(GradError::Config("bad parameter blob magic".into()));
        }
        let count = cur.u32()? as usize;
        if count != self.slots.len() {
            return Err(GradError::Config(format!(
                "parameter blob has {} entries, store has {}",
                count,
                self.slots.len()
            )));
        }
        for i in 0..count {
            let name_len = cur.u16()? as usize;
            let name = std::str::from_utf8(cur.take(name_len)?)
                .map_err(|_| GradError::Config("bad name encoding in parameter blob".into()))?
                .to_string();
            if name != self.slots[i].name {
                return Err(GradError::Config(format!(
                    "parameter blob name {:?} does not match slot {:?}",
                    name, self.slots[i].name
                )));
            }
            let r = cur.u32()? as usize;
            let c = cur.u32()? as usize;
            if (r, c) != self.slots[i].value.shape() {
                return Err(GradError::Config(format!(
                    "parameter blob shape {}x{} does not match {:?} for {}",
                    r,
                    c,
                    self.slots[i].value.shape(),
                    name
                )));
            }
            let mut data = Vec::with_capacity(r * c);
            for _ in 0..r * c {
                data.push(cur.f64()?);
            }
            self.slots[i].value = Matrix::from_vec(r, c, data);
        }
        Ok(())
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(GradError::Config("truncated parameter blob".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Adam over a fixed subset of a store's parameters.
///
/// Moment buffers match the parameter shapes one-to-one. The update validates
/// every gradient before mutating anything, so a non-finite gradient leaves
/// the parameters untouched.
pub struct Adam {
    ids: Vec<ParamId>,
    lr: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    step_count: u64,
    first_moment: Vec<Matrix>,
    second_moment: Vec<Matrix>,
}

impl Adam {
    pub fn new(store: &ParamStore, ids: Vec<ParamId>, lr: f64) -> Self {
        let first_moment = ids
            .iter()
            .map(|&id| {
                let (r, c) = store.value(id).shape();
                Matrix::zeros(r, c)
            })
            .collect::<Vec<_>>();
        let second_moment = first_moment.clone();
        Adam {
            ids,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step_count: 0,
            first_moment,
            second_moment,
        }
    }

    pub fn learning_rate(&self) -> f64 {
        self.lr
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// One Adam update with bias correction, consuming the store's
    /// accumulated gradients for the owned parameters (they are zeroed).
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        for &id in &self.ids {
            if !store.grad(id).all_finite() {
                return Err(GradError::Numeric(format!(
                    "non-finite gradient for parameter {:?}",
                    store.name(id)
                )));
            }
        }
        self.step_count += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step_count as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step_count as i32);
        for (k, &id) in self.ids.iter().enumerate() {
            let m = &mut self.first_moment[k];
            let v = &mut self.second_moment[k];
            // split borrows: read grad, then write value
            let grad = store.grad(id).clone();
            for ((mi, vi), gi) in m
                .data_mut()
                .iter_mut()
                .zip(v.data_mut().iter_mut())
                .zip(grad.data().iter())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
            }
            let value = store.value_mut(id);
            for ((pi, mi), vi) in value
                .data_mut()
                .iter_mut()
                .zip(m.data().iter())
                .zip(v.data().iter())
            {
                let m_hat = mi / bc1;
                let v_hat = vi / bc2;
                *pi -= self.lr * m_hat / (v_hat.sqrt() + self.epsilon);
            }
            store.grad_mut(id).fill(0.0);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut store = ParamStore::new();
        let p = store.insert("p", Matrix::from_vec(1, 3, vec![0.5, -1.0, 2.0]));
        let mut adam = Adam::new(&store, vec![p], 1e-3);
        let before = store.value(p).clone();
        for _ in 0..10 {
            adam.step(&mut store).unwrap();
        }
        assert_eq!(store.value(p), &before);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut store = ParamStore::new();
        let p = store.insert("p", Matrix::from_vec(1, 1, vec![0.0]));
        let mut adam = Adam::new(&store, vec![p], 1e-3);
        store.grad_mut(p).data_mut()[0] = 1.0;
        adam.step(&mut store).unwrap();
        // bias-corrected first step is -lr * 1/(1 + eps)
        let got = store.value(p).get(0, 0);
        assert!((got + 1e-3).abs() < 1e-9, "got {got}");
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn identical_params_with_identical_grads_stay_identical() {
        let mut store = ParamStore::new();
        let a = store.insert("a", Matrix::from_vec(1, 1, vec![0.7]));
        let b = store.insert("b", Matrix::from_vec(1, 1, vec![0.7]));
        let mut adam = Adam::new(&store, vec![a, b], 3e-4);
        let mut rng_state = 12345u64;
        for _ in 0..50 {
            rng_state = rng_state.wrapping_mul(6364136223846793005).wrapping_add(1);
            let g = (rng_state >> 11) as f64 / (1u64 << 53) as f64 - 0.5;
            store.grad_mut(a).data_mut()[0] = g;
            store.grad_mut(b).data_mut()[0] = g;
            adam.step(&mut store).unwrap();
            assert_eq!(store.value(a).get(0, 0), store.value(b).get(0, 0));
        }
    }

    #[test]
    fn non_finite_gradient_names_the_parameter() {
        let mut store = ParamStore::new();
        let p = store.insert("actor/w1", Matrix::zeros(1, 1));
        let mut adam = Adam::new(&store, vec![p], 1e-3);
        store.grad_mut(p).data_mut()[0] = f64::NAN;
        let err = adam.step(&mut store).unwrap_err();
        assert!(err.to_string().contains("actor/w1"));
        // parameter untouched
        assert_eq!(store.value(p).get(0, 0), 0.0);
    }

    #[test]
    fn polyak_with_tau_one_copies_exactly() {
        let mut store = ParamStore::new();
        let src = store.insert("src", Matrix::from_vec(1, 2, vec![0.123, -4.56]));
        let dst = store.insert("dst", Matrix::zeros(1, 2));
        store.polyak_from(&[dst], &[src], 1.0);
        assert_eq!(store.value(dst), store.value(src));
    }

    #[test]
    fn byte_roundtrip_restores_values() {
        let mut store = ParamStore::new();
        let a = store.insert("a", Matrix::from_vec(2, 2, vec![1.0, 2.5, -3.0, 1e-12]));
        let bytes = store.to_bytes();
        store.value_mut(a).fill(0.0);
        store.load_bytes(&bytes).unwrap();
        assert_eq!(store.value(a).data(), &[1.0, 2.5, -3.0, 1e-12]);
    }
}
