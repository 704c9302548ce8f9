//! Linear congruential generator `x_{n+1} = (a x_n + c) mod m` with a
//! power-of-two modulus.
//!
//! With `m = 2^k` the low bits are weak: bit 0 of the output has period at
//! most 2 (it alternates when `a` and `c` are odd), bit `j` has period at most
//! `2^(j+1)`. Consumers should read the high bits, which is what
//! [`crate::RngState::uniform`] does.

use crate::NoiseError;

/// Constants `a`, `c` and modulus `m = 2^modulus_bits`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct LcParams {
    pub a: u64,
    pub c: u64,
    modulus_bits: u32,
}

impl LcParams {
    /// Classic `rand()` constants: `a = 1103515245`, `c = 12345`, `m = 2^31`.
    pub const DEFAULT: LcParams = LcParams {
        a: 1_103_515_245,
        c: 12_345,
        modulus_bits: 31,
    };

    /// RANDU: `a = 65539`, `c = 0`, `m = 2^31`. Its consecutive triples fall on 15 planes.
    pub const RANDU: LcParams = LcParams {
        a: 65_539,
        c: 0,
        modulus_bits: 31,
    };

    /// Parameters for modulus `2^modulus_bits`; requires `1 <= modulus_bits <= 64`
    /// and `a, c < m`.
    pub fn new(a: u64, c: u64, modulus_bits: u32) -> Result<Self, NoiseError> {
        let p = LcParams { a, c, modulus_bits };
        if !(1..=64).contains(&modulus_bits) || a > p.mask() || c > p.mask() {
            return Err(NoiseError::InvalidLcParams { a, c, modulus_bits });
        }
        Ok(p)
    }

    pub fn modulus_bits(&self) -> u32 {
        self.modulus_bits
    }

    /// `m` as a wide integer (it may be `2^64`).
    pub fn modulus(&self) -> u128 {
        1u128 << self.modulus_bits
    }

    pub(crate) fn mask(&self) -> u64 {
        if self.modulus_bits == 64 {
            u64::MAX
        } else {
            (1u64 << self.modulus_bits) - 1
        }
    }
}

/// Generator state: the current `x_n` plus its parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Lcg {
    params: LcParams,
    state: u64,
}

impl Lcg {
    /// Start from `x_0 = seed mod m`.
    pub fn new(params: LcParams, seed: u64) -> Self {
        Self {
            params,
            state: seed & params.mask(),
        }
    }

    pub fn params(&self) -> LcParams {
        self.params
    }

    pub fn state(&self) -> u64 {
        self.state
    }

    /// Advance one step and return the new `x_{n+1}`.
    ///
    /// Arithmetic wraps modulo `2^64` first; since `m` divides `2^64` the
    /// final mask yields the exact residue.
    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        let p = self.params;
        self.state = p.a.wrapping_mul(self.state).wrapping_add(p.c) & p.mask();
        self.state
    }
}

/// Functional form: `(x_{n+1}, state')`.
pub fn lc_next(state: Lcg) -> (u64, Lcg) {
    let mut next = state;
    let v = next.next_u64();
    (v, next)
}
