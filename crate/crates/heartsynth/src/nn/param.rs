//! Flat parameter and gradient storage.
//!
//! Every model keeps its weights in one contiguous `Vec<f32>` laid out in
//! registration order, which makes checkpointing a memcpy, makes the
//! per-sample gradient a single flat vector (what DP clipping needs), and
//! keeps reruns bit-identical because nothing about the layout depends on
//! map iteration order.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Handle to one registered tensor inside a `ParamStore`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId {
    pub(crate) index: usize,
}

#[derive(Debug, Clone)]
struct Segment {
    name: String,
    offset: usize,
    len: usize,
}

/// Registration-ordered flat parameter vector.
#[derive(Debug, Clone)]
pub struct ParamStore {
    data: Vec<f32>,
    segs: Vec<Segment>,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self { data: Vec::new(), segs: Vec::new(), rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// Registers `len` parameters drawn i.i.d. N(0, std²).
    pub fn register_normal(&mut self, name: &str, len: usize, std: f64) -> ParamId {
        let dist = Normal::new(0.0, std.max(0.0)).expect("std finite");
        let offset = self.data.len();
        for _ in 0..len {
            let v: f64 = if std > 0.0 { dist.sample(&mut self.rng) } else { 0.0 };
            self.data.push(v as f32);
        }
        self.segs.push(Segment { name: name.to_string(), offset, len });
        ParamId { index: self.segs.len() - 1 }
    }

    /// Registers `len` parameters at a constant value (biases, norms).
    pub fn register_const(&mut self, name: &str, len: usize, value: f32) -> ParamId {
        let offset = self.data.len();
        self.data.extend(std::iter::repeat(value).take(len));
        self.segs.push(Segment { name: name.to_string(), offset, len });
        ParamId { index: self.segs.len() - 1 }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &[f32] {
        let s = &self.segs[id.index];
        &self.data[s.offset..s.offset + s.len]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [f32] {
        let s = &self.segs[id.index];
        let (o, l) = (s.offset, s.len);
        &mut self.data[o..o + l]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.segs[id.index].name
    }

    pub fn offset(&self, id: ParamId) -> usize {
        self.segs[id.index].offset
    }

    /// Whole flat vector, for optimizers and checkpoints.
    pub fn flat(&self) -> &[f32] {
        &self.data
    }

    pub fn flat_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    /// Replaces all weights from a checkpoint blob.
    pub fn load_flat(&mut self, weights: &[f32]) -> Result<(), String> {
        if weights.len() != self.data.len() {
            return Err(format!(
                "weight blob has {} values, model expects {}",
                weights.len(),
                self.data.len()
            ));
        }
        self.data.copy_from_slice(weights);
        Ok(())
    }

    /// A gradient buffer with the same layout, zero-filled.
    pub fn grads(&self) -> GradBuf {
        GradBuf { data: vec![0.0; self.data.len()], segs: self.segs.clone() }
    }
}

/// Flat gradient buffer matching a `ParamStore` layout.
#[derive(Debug, Clone)]
pub struct GradBuf {
    data: Vec<f32>,
    segs: Vec<Segment>,
}

impl GradBuf {
    pub fn zero(&mut self) {
        self.data.iter_mut().for_each(|v| *v = 0.0);
    }

    pub fn get(&self, id: ParamId) -> &[f32] {
        let s = &self.segs[id.index];
        &self.data[s.offset..s.offset + s.len]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [f32] {
        let s = &self.segs[id.index];
        let (o, l) = (s.offset, s.len);
        &mut self.data[o..o + l]
    }

    pub fn flat(&self) -> &[f32] {
        &self.data
    }

    pub fn flat_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn l2_norm(&self) -> f64 {
        let mut s = 0.0f64;
        for &g in &self.data {
            s += (g as f64) * (g as f64);
        }
        s.sqrt()
    }

    /// self += other, in index order.
    pub fn add_assign(&mut self, other: &GradBuf) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f32) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }
}

/// Initialization helper: He/Kaiming std for fan_in.
pub fn he_std(fan_in: usize) -> f64 {
    (2.0 / fan_in.max(1) as f64).sqrt()
}

/// Xavier/Glorot std.
pub fn xavier_std(fan_in: usize, fan_out: usize) -> f64 {
    (2.0 / (fan_in + fan_out).max(1) as f64).sqrt()
}

/// Uniform helper for tests and simple inits.
pub fn uniform_init(rng: &mut ChaCha8Rng, len: usize, lo: f32, hi: f32) -> Vec<f32> {
    (0..len).map(|_| rng.random_range(lo..hi)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registration_order_fixes_layout() {
        let mut a = ParamStore::new(7);
        let w1 = a.register_normal("w1", 6, 0.1);
        let b1 = a.register_const("b1", 2, 0.0);
        let mut b = ParamStore::new(7);
        let w2 = b.register_normal("w1", 6, 0.1);
        let b2 = b.register_const("b1", 2, 0.0);
        assert_eq!(a.flat(), b.flat());
        assert_eq!(a.offset(w1), b.offset(w2));
        assert_eq!(a.offset(b1), b.offset(b2));
    }

    #[test]
    fn grad_layout_matches() {
        let mut s = ParamStore::new(1);
        let w = s.register_normal("w", 4, 0.1);
        let b = s.register_const("b", 3, 0.5);
        let mut g = s.grads();
        g.get_mut(b)[1] = 2.0;
        assert_eq!(g.flat()[s.offset(b) + 1], 2.0);
        g.get_mut(w)[0] = -1.0;
        assert_eq!(g.l2_norm(), (4.0f64 + 1.0).sqrt());
    }

    #[test]
    fn load_flat_checks_length() {
        let mut s = ParamStore::new(1);
        s.register_const("w", 4, 1.0);
        assert!(s.load_flat(&[0.0; 3]).is_err());
        assert!(s.load_flat(&[0.5; 4]).is_ok());
        assert_eq!(s.flat(), &[0.5; 4]);
    }
}
