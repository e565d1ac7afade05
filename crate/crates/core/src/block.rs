//! The 576-bit physical memory unit and bit-field helpers.
//!
//! Bit `i` of a block lives in word `i / 64` at position `i % 64`
//! (LSB-first). Bits `0..512` form the data area carried by the eight data
//! chips, bits `512..576` the 64-bit area carried by the ninth (ECC) chip.

use std::fmt;

pub const BLOCK_BITS: usize = 576;
pub const DATA_BITS: usize = 512;
pub const ECC_BITS: usize = 64;
pub const WORDS: usize = BLOCK_BITS / 64;

/// 512-bit payload, as carried in the data area of a block.
pub type Payload = [u64; 8];

#[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct PhysicalBlock {
    pub words: [u64; WORDS],
}

impl PhysicalBlock {
    pub const ZERO: PhysicalBlock = PhysicalBlock { words: [0; WORDS] };

    pub fn new(data: Payload, ecc: u64) -> Self {
        let mut words = [0u64; WORDS];
        words[..8].copy_from_slice(&data);
        words[8] = ecc;
        PhysicalBlock { words }
    }

    pub fn data(&self) -> Payload {
        let mut d = [0u64; 8];
        d.copy_from_slice(&self.words[..8]);
        d
    }

    pub fn set_data(&mut self, data: &Payload) {
        self.words[..8].copy_from_slice(data);
    }

    pub fn ecc(&self) -> u64 {
        self.words[8]
    }

    pub fn set_ecc(&mut self, ecc: u64) {
        self.words[8] = ecc;
    }

    pub fn is_zero(&self) -> bool {
        self.words.iter().all(|&w| w == 0)
    }

    #[inline]
    pub fn bit(&self, i: usize) -> bool {
        debug_assert!(i < BLOCK_BITS);
        (self.words[i / 64] >> (i % 64)) & 1 == 1
    }

    #[inline]
    pub fn set_bit(&mut self, i: usize, v: bool) {
        debug_assert!(i < BLOCK_BITS);
        let m = 1u64 << (i % 64);
        if v {
            self.words[i / 64] |= m;
        } else {
            self.words[i / 64] &= !m;
        }
    }

    #[inline]
    pub fn flip_bit(&mut self, i: usize) {
        self.words[i / 64] ^= 1u64 << (i % 64);
    }

    /// Reads `width` (≤ 64) bits starting at `offset`.
    pub fn field(&self, offset: usize, width: usize) -> u64 {
        debug_assert!(width <= 64 && offset + width <= BLOCK_BITS);
        if width == 0 {
            return 0;
        }
        let w = offset / 64;
        let s = offset % 64;
        let mut v = self.words[w] >> s;
        if s + width > 64 {
            v |= self.words[w + 1] << (64 - s);
        }
        v & mask(width)
    }

    /// Writes the low `width` bits of `value` starting at `offset`.
    pub fn set_field(&mut self, offset: usize, width: usize, value: u64) {
        debug_assert!(width <= 64 && offset + width <= BLOCK_BITS);
        if width == 0 {
            return;
        }
        let value = value & mask(width);
        let w = offset / 64;
        let s = offset % 64;
        let m = mask(width);
        self.words[w] = (self.words[w] & !(m << s)) | (value << s);
        if s + width > 64 {
            let spill = s + width - 64;
            let hi = mask(spill);
            self.words[w + 1] = (self.words[w + 1] & !hi) | (value >> (64 - s));
        }
    }

    pub fn xor(&self, other: &PhysicalBlock) -> PhysicalBlock {
        let mut out = *self;
        for (a, b) in out.words.iter_mut().zip(other.words.iter()) {
            *a ^= b;
        }
        out
    }

    /// Indices of set bits.
    pub fn ones(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for (w, &word) in self.words.iter().enumerate() {
            let mut x = word;
            while x != 0 {
                let t = x.trailing_zeros() as usize;
                out.push(w * 64 + t);
                x &= x - 1;
            }
        }
        out
    }

    pub fn count_ones(&self) -> u32 {
        self.words.iter().map(|w| w.count_ones()).sum()
    }
}

impl fmt::Debug for PhysicalBlock {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PhysicalBlock(")?;
        for w in self.words.iter().rev() {
            write!(f, "{:016x}", w)?;
        }
        write!(f, ")")
    }
}

#[inline]
pub fn mask(width: usize) -> u64 {
    if width >= 64 {
        u64::MAX
    } else {
        (1u64 << width) - 1
    }
}
