//! Partitioned bloom filter (data plane) and its counting shadow
//! (control plane).
//!
//! The data-plane filter suppresses duplicate new-flow notifications
//! for UDP traffic. The control plane keeps a counting copy so that
//! removing a flow can clear exactly the bits no live flow still
//! hashes to, re-enabling notifications for recycled tuples.

use crate::types::FiveTuple;

/// Shared shape of the two filters; both must hash identically.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BloomParams {
    /// Number of partitions, one hash function each.
    pub partitions: u32,
    /// log2 of bits per partition.
    pub bits_log2: u32,
}

impl Default for BloomParams {
    fn default() -> Self {
        Self { partitions: 4, bits_log2: 16 }
    }
}

impl BloomParams {
    pub fn bits_per_partition(&self) -> usize {
        1usize << self.bits_log2
    }

    /// Bit index of `ft` in partition `p`: FNV-1a over the partition
    /// index and the tuple's wire bytes, reduced to the partition
    /// width.
    pub fn index(&self, p: u32, ft: &FiveTuple) -> usize {
        let mut h = fnv1a(&[p as u8], 0xcbf2_9ce4_8422_2325);
        h = fnv1a(&ft.encode(), h);
        (h as usize) & (self.bits_per_partition() - 1)
    }
}

pub fn fnv1a(bytes: &[u8], mut hash: u64) -> u64 {
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01B3);
    }
    hash
}

/// Data-plane membership filter: one bit array per partition.
#[derive(Clone, Debug)]
pub struct PartitionedBloom {
    params: BloomParams,
    bits: Vec<u64>,
}

impl PartitionedBloom {
    pub fn new(params: BloomParams) -> Self {
        let words = params.partitions as usize * params.bits_per_partition() / 64;
        Self { params, bits: vec![0; words] }
    }

    fn word_bit(&self, p: u32, idx: usize) -> (usize, u64) {
        let global = p as usize * self.params.bits_per_partition() + idx;
        (global / 64, 1u64 << (global % 64))
    }

    pub fn insert(&mut self, ft: &FiveTuple) {
        for p in 0..self.params.partitions {
            let (w, m) = self.word_bit(p, self.params.index(p, ft));
            self.bits[w] |= m;
        }
    }

    /// True iff every partition has the tuple's bit set. Never falsely
    /// negative for inserted tuples until their bits are cleared.
    pub fn query(&self, ft: &FiveTuple) -> bool {
        (0..self.params.partitions).all(|p| {
            let (w, m) = self.word_bit(p, self.params.index(p, ft));
            self.bits[w] & m != 0
        })
    }

    /// Clears one bit; driven by the control plane when its counting
    /// copy drops to zero for that bit.
    pub fn clear_bit(&mut self, partition: u32, index: usize) {
        let (w, m) = self.word_bit(partition, index);
        self.bits[w] &= !m;
    }

    pub fn reset(&mut self) {
        self.bits.fill(0);
    }
}

/// Control-plane counting filter mirroring the data-plane bits.
#[derive(Clone, Debug)]
pub struct CountingBloom {
    params: BloomParams,
    counts: Vec<u16>,
}

impl CountingBloom {
    pub fn new(params: BloomParams) -> Self {
        let n = params.partitions as usize * params.bits_per_partition();
        Self { params, counts: vec![0; n] }
    }

    fn slot(&self, p: u32, idx: usize) -> usize {
        p as usize * self.params.bits_per_partition() + idx
    }

    pub fn increment(&mut self, ft: &FiveTuple) {
        for p in 0..self.params.partitions {
            let s = self.slot(p, self.params.index(p, ft));
            self.counts[s] = self.counts[s].saturating_add(1);
        }
    }

    /// Decrements the tuple's counters and returns the (partition,
    /// index) pairs that reached zero, i.e. whose data-plane bits are
    /// now safe to clear.
    pub fn decrement(&mut self, ft: &FiveTuple) -> Vec<(u32, usize)> {
        let mut zeroed = Vec::new();
        for p in 0..self.params.partitions {
            let idx = self.params.index(p, ft);
            let s = self.slot(p, idx);
            if self.counts[s] > 0 {
                self.counts[s] -= 1;
                if self.counts[s] == 0 {
                    zeroed.push((p, idx));
                }
            }
        }
        zeroed
    }
}
