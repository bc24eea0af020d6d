//! Named parameter storage with deterministic per-parameter seeding.
//!
//! Every parameter draws its values from a ChaCha stream keyed by its own
//! name (mixed with the run seed), so the same parameter is initialized
//! identically no matter how many cascade steps exist or in which order the
//! model was assembled. Bottleneck stack parameters use a fixed key instead
//! of the run seed: they stand in for pretrained weights and stay the same
//! across runs.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Freeze/thaw granularity for training phases.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Encoder,
    Adapter0,
    InnerAdapter,
    PosEmbed,
    /// Transformer stack weights (the frozen stand-in).
    Bottleneck,
    /// Per-stage token adapters of cascade step `k` (0-based).
    StepAdapters(usize),
    /// Decoder-stage convolutions of cascade step `k` (0-based).
    StepDecoder(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    FanIn(usize),
    /// Uniform in `[-sqrt(6/fan_in), sqrt(6/fan_in)]`; preserves activation
    /// scale through leaky-relu conv stacks.
    HeUniform(usize),
}

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
    pub group: ParamGroup,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    by_name: HashMap<String, usize>,
}

const BOTTLENECK_KEY: u64 = 0x5eed_11a3_a2b1_0c0e;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100_0000_01b3);
    }
    h
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        group: ParamGroup,
        init: Init,
        run_seed: u64,
    ) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter {name}"
        );
        let n: usize = shape.iter().product();
        let key = if matches!(group, ParamGroup::Bottleneck) {
            BOTTLENECK_KEY
        } else {
            run_seed
        };
        let data = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::FanIn(fan_in) | Init::HeUniform(fan_in) => {
                let fan_in = fan_in.max(1) as f32;
                let bound = match init {
                    Init::HeUniform(_) => (6.0 / fan_in).sqrt(),
                    _ => 1.0 / fan_in.sqrt(),
                };
                let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(name.as_bytes()) ^ key);
                (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
            }
        };
        let id = self.entries.len();
        self.by_name.insert(name.clone(), id);
        self.entries.push(ParamEntry {
            name,
            shape,
            data,
            group,
        });
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn data_mut(&mut self, id: ParamId) -> &mut Vec<f32> {
        &mut self.entries[id.0].data
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    /// Total f32 element count matching `filter`.
    pub fn count_values(&self, filter: impl Fn(&ParamGroup) -> bool) -> usize {
        self.entries
            .iter()
            .filter(|e| filter(&e.group))
            .map(|e| e.data.len())
            .sum()
    }

    /// Bitwise FNV hash over the raw bytes of every parameter matching
    /// `filter`, in id order.
    pub fn hash_params(&self, filter: impl Fn(&ParamGroup) -> bool) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for e in self.entries.iter().filter(|e| filter(&e.group)) {
            for v in &e.data {
                for b in v.to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x100_0000_01b3);
                }
            }
        }
        h
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_depends_on_name_not_insertion_order() {
        let mut a = ParamStore::new();
        a.add("x.w", vec![4], ParamGroup::Encoder, Init::FanIn(4), 9);
        a.add("y.w", vec![4], ParamGroup::Encoder, Init::FanIn(4), 9);
        let mut b = ParamStore::new();
        b.add("y.w", vec![4], ParamGroup::Encoder, Init::FanIn(4), 9);
        b.add("x.w", vec![4], ParamGroup::Encoder, Init::FanIn(4), 9);
        assert_eq!(
            a.entry(a.by_name("x.w").unwrap()).data,
            b.entry(b.by_name("x.w").unwrap()).data
        );
        assert_ne!(
            a.entry(a.by_name("x.w").unwrap()).data,
            a.entry(a.by_name("y.w").unwrap()).data
        );
    }

    #[test]
    fn bottleneck_params_ignore_the_run_seed() {
        let mut a = ParamStore::new();
        a.add("s.w", vec![8], ParamGroup::Bottleneck, Init::FanIn(8), 1);
        let mut b = ParamStore::new();
        b.add("s.w", vec![8], ParamGroup::Bottleneck, Init::FanIn(8), 2);
        assert_eq!(a.entry(ParamId(0)).data, b.entry(ParamId(0)).data);

        let mut c = ParamStore::new();
        c.add("e.w", vec![8], ParamGroup::Encoder, Init::FanIn(8), 1);
        let mut d = ParamStore::new();
        d.add("e.w", vec![8], ParamGroup::Encoder, Init::FanIn(8), 2);
        assert_ne!(c.entry(ParamId(0)).data, d.entry(ParamId(0)).data);
    }

    #[test]
    fn hash_is_bit_sensitive() {
        let mut s = ParamStore::new();
        let id = s.add("p", vec![3], ParamGroup::Encoder, Init::FanIn(3), 0);
        let h0 = s.hash_params(|_| true);
        s.data_mut(id)[0] += 1e-7;
        assert_ne!(h0, s.hash_params(|_| true));
    }
}
