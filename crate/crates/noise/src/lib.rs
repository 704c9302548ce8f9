//! Pseudorandom streams and fixed noise masks.
//!
//! Masks are never stored. A [`MaskKey`] names a mask completely, and
//! [`make_mask`] rebuilds it whenever a layer needs it.

mod lcg;
mod mt;

pub use lcg::{lc_next, LcParams, Lcg};
pub use mt::Mt19937;

use pgan_tensor::Tensor;
use std::fmt;
use std::str::FromStr;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum NoiseError {
    #[error("invalid LC parameters a={a}, c={c}, m=2^{modulus_bits}: need 1 <= bits <= 64 and a, c < m")]
    InvalidLcParams { a: u64, c: u64, modulus_bits: u32 },
    #[error("u1 must lie in (0, 1], got {0}")]
    U1OutOfRange(f64),
    #[error("u2 must lie in [0, 1), got {0}")]
    U2OutOfRange(f64),
    #[error("mask shape {0}x{1} has a zero extent")]
    EmptyMask(usize, usize),
    #[error("lattice diagnostic needs at least {min} draws, got {got}")]
    TooFewDraws { got: usize, min: usize },
    #[error("cannot parse {what} from {text:?}")]
    Parse { what: &'static str, text: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum RngKind {
    Lc,
    Mt19937,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DistKind {
    /// Standard normal via Box-Muller.
    Snd,
    /// Uniform on [-1, 1].
    Ud,
}

impl fmt::Display for RngKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RngKind::Lc => "lc",
            RngKind::Mt19937 => "mt",
        })
    }
}

impl FromStr for RngKind {
    type Err = NoiseError;
    fn from_str(s: &str) -> Result<Self, NoiseError> {
        match s.to_ascii_lowercase().as_str() {
            "lc" | "lcg" => Ok(RngKind::Lc),
            "mt" | "mt19937" => Ok(RngKind::Mt19937),
            _ => Err(NoiseError::Parse {
                what: "rng kind",
                text: s.to_string(),
            }),
        }
    }
}

impl fmt::Display for DistKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DistKind::Snd => "snd",
            DistKind::Ud => "ud",
        })
    }
}

impl FromStr for DistKind {
    type Err = NoiseError;
    fn from_str(s: &str) -> Result<Self, NoiseError> {
        match s.to_ascii_lowercase().as_str() {
            "snd" | "normal" => Ok(DistKind::Snd),
            "ud" | "uniform" => Ok(DistKind::Ud),
            _ => Err(NoiseError::Parse {
                what: "distribution kind",
                text: s.to_string(),
            }),
        }
    }
}

/// A generator of either kind. Callers own their state; nothing is shared.
#[derive(Clone, Debug, PartialEq)]
pub enum RngState {
    Lc(Lcg),
    Mt(Box<Mt19937>),
}

impl RngState {
    /// Seed a stream of `kind` from a 64-bit seed. LC streams use the default
    /// constants and start at `seed mod m`; MT streams use `init_by_array`
    /// on the two 32-bit halves.
    pub fn seeded(kind: RngKind, seed: u64) -> Self {
        match kind {
            RngKind::Lc => RngState::Lc(Lcg::new(LcParams::DEFAULT, seed)),
            RngKind::Mt19937 => RngState::Mt(Box::new(Mt19937::from_u64(seed))),
        }
    }

    pub fn kind(&self) -> RngKind {
        match self {
            RngState::Lc(_) => RngKind::Lc,
            RngState::Mt(_) => RngKind::Mt19937,
        }
    }

    /// Raw next output word.
    #[inline]
    pub fn next_word(&mut self) -> u64 {
        match self {
            RngState::Lc(g) => g.next_u64(),
            RngState::Mt(g) => g.next_u32() as u64,
        }
    }

    /// Number of bits in an output word (the modulus exponent).
    pub fn word_bits(&self) -> u32 {
        match self {
            RngState::Lc(g) => g.params().modulus_bits(),
            RngState::Mt(_) => 32,
        }
    }

    /// Uniform in [0, 1) from the top 24 bits of the next word.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        let bits = self.word_bits();
        let w = self.next_word();
        if bits >= 24 {
            (w >> (bits - 24)) as f64 / (1u64 << 24) as f64
        } else {
            w as f64 / (1u64 << bits) as f64
        }
    }

    /// Uniform in [lo, hi).
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform index in `0..n` (multiply-shift on 24 bits; bias is below 2^-24 · n).
    pub fn below(&mut self, n: usize) -> usize {
        ((self.uniform() * n as f64) as usize).min(n.saturating_sub(1))
    }

    /// One pair of standard normals.
    pub fn normal_pair(&mut self) -> (f64, f64) {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        uniform_to_normal(u1, u2).expect("u1 in (0, 1] by construction")
    }

    /// `n` standard normals, pairs consumed in order; an odd tail drops the second of its pair.
    pub fn normals(&mut self, n: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(n + 1);
        while out.len() < n {
            let (a, b) = self.normal_pair();
            out.push(a);
            out.push(b);
        }
        out.truncate(n);
        out
    }

    /// Fisher-Yates shuffle of `0..n`.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.below(i + 1);
            p.swap(i, j);
        }
        p
    }
}

/// Box-Muller: `z1 = r cos(2 pi u2)`, `z2 = r sin(2 pi u2)` with `r = sqrt(-2 ln u1)`.
pub fn uniform_to_normal(u1: f64, u2: f64) -> Result<(f64, f64), NoiseError> {
    if !(u1 > 0.0 && u1 <= 1.0) {
        return Err(NoiseError::U1OutOfRange(u1));
    }
    if !(0.0..1.0).contains(&u2) {
        return Err(NoiseError::U2OutOfRange(u2));
    }
    let r = (-2.0 * u1.ln()).sqrt();
    let t = 2.0 * std::f64::consts::PI * u2;
    Ok((r * t.cos(), r * t.sin()))
}

/// SplitMix64 finalizer. Frozen: changing it changes every mask.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for the stream of `(global_seed, layer_id, channel)`:
/// `splitmix64(s ^ l * 0x9E3779B97F4A7C15 ^ c * 0xBF58476D1CE4E5B9)`, products wrapping.
pub fn seed_mix(global_seed: u64, layer_id: u32, channel: u32) -> u64 {
    splitmix64(
        global_seed
            ^ (layer_id as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
            ^ (channel as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9),
    )
}

/// Full identity of one fixed noise mask.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct MaskKey {
    pub global_seed: u64,
    pub layer_id: u32,
    pub channel: u32,
    pub height: usize,
    pub width: usize,
    pub rng: RngKind,
    pub dist: DistKind,
}

impl fmt::Display for MaskKey {
    /// `seed,layer,channel,HxW,rng,dist`, the form `FromStr` accepts.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{},{},{},{}x{},{},{}",
            self.global_seed, self.layer_id, self.channel, self.height, self.width, self.rng, self.dist
        )
    }
}

impl FromStr for MaskKey {
    type Err = NoiseError;
    fn from_str(s: &str) -> Result<Self, NoiseError> {
        let bad = || NoiseError::Parse {
            what: "mask key (seed,layer,channel,HxW,rng,dist)",
            text: s.to_string(),
        };
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        if parts.len() != 6 {
            return Err(bad());
        }
        let (h, w) = parts[3].split_once(['x', 'X']).ok_or_else(bad)?;
        Ok(MaskKey {
            global_seed: parts[0].parse().map_err(|_| bad())?,
            layer_id: parts[1].parse().map_err(|_| bad())?,
            channel: parts[2].parse().map_err(|_| bad())?,
            height: h.parse().map_err(|_| bad())?,
            width: w.parse().map_err(|_| bad())?,
            rng: parts[4].parse()?,
            dist: parts[5].parse()?,
        })
    }
}

/// Derive the `(H, W)` mask named by `key`.
pub fn make_mask(key: &MaskKey) -> Result<Tensor, NoiseError> {
    let n = key.height * key.width;
    if n == 0 {
        return Err(NoiseError::EmptyMask(key.height, key.width));
    }
    let mut rng = RngState::seeded(key.rng, seed_mix(key.global_seed, key.layer_id, key.channel));
    let data = match key.dist {
        DistKind::Snd => rng.normals(n),
        DistKind::Ud => (0..n).map(|_| 2.0 * rng.uniform() - 1.0).collect(),
    };
    Ok(Tensor::new(vec![key.height, key.width], data).expect("extent product matches"))
}

pub const LATTICE_BINS: usize = 64;
pub const LATTICE_MIN_DRAWS: usize = 1000;

/// Two-sided 0.999 acceptance interval for chi-square with 63 degrees of freedom.
pub const CHI2_63_LOWER: f64 = 32.455_275_478_685_09;
pub const CHI2_63_UPPER: f64 = 106.583_222_186_916_84;

#[derive(Clone, Debug)]
pub struct LatticeReport {
    /// Consecutive triples scaled into [0, 1)^3.
    pub triples: Vec<[f64; 3]>,
    /// Triples with `(x2 - 6 x1 + 9 x0) mod m == 0`.
    pub residue_zero: usize,
    pub chi2: f64,
}

impl LatticeReport {
    pub fn residue_zero_fraction(&self) -> f64 {
        self.residue_zero as f64 / self.triples.len() as f64
    }

    pub fn chi2_accepts(&self) -> bool {
        (CHI2_63_LOWER..=CHI2_63_UPPER).contains(&self.chi2)
    }
}

/// Draw `n + 2` words from `stream` and summarize their structure.
///
/// The residue `x2 - 6 x1 + 9 x0` vanishes identically for RANDU because
/// `65539^2 = 6 * 65539 - 9 (mod 2^31)`; for other generators it is a plain
/// census. The modulus is the word range of the stream (2^32 for MT). The
/// chi-square statistic bins the first `n` words into 64 equal cells.
pub fn lattice_diagnostic(stream: &RngState, n: usize) -> Result<LatticeReport, NoiseError> {
    if n < LATTICE_MIN_DRAWS {
        return Err(NoiseError::TooFewDraws {
            got: n,
            min: LATTICE_MIN_DRAWS,
        });
    }
    let mut s = stream.clone();
    let bits = s.word_bits();
    let m = 1i128 << bits;
    let xs: Vec<u64> = (0..n + 2).map(|_| s.next_word()).collect();
    let scale = 1.0 / m as f64;
    let mut triples = Vec::with_capacity(n);
    let mut residue_zero = 0;
    let mut counts = [0usize; LATTICE_BINS];
    for i in 0..n {
        let (a, b, c) = (xs[i] as i128, xs[i + 1] as i128, xs[i + 2] as i128);
        if (c - 6 * b + 9 * a).rem_euclid(m) == 0 {
            residue_zero += 1;
        }
        triples.push([a as f64 * scale, b as f64 * scale, c as f64 * scale]);
        counts[((a * LATTICE_BINS as i128) >> bits) as usize] += 1;
    }
    let expected = n as f64 / LATTICE_BINS as f64;
    let chi2 = counts
        .iter()
        .map(|&k| (k as f64 - expected).powi(2) / expected)
        .sum();
    Ok(LatticeReport {
        triples,
        residue_zero,
        chi2,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn box_muller_closed_forms() {
        assert_eq!(uniform_to_normal(1.0, 0.3).unwrap(), (0.0, 0.0));
        let (z1, z2) = uniform_to_normal(0.5, 0.0).unwrap();
        assert!((z1 - (2.0 * 2f64.ln()).sqrt()).abs() < 1e-15);
        assert!((z1 - 1.177410).abs() < 1e-6);
        assert_eq!(z2, 0.0);
        assert!(uniform_to_normal(0.0, 0.5).is_err());
        assert!(uniform_to_normal(0.5, 1.0).is_err());
    }

    #[test]
    fn seed_mix_golden() {
        assert_eq!(seed_mix(0, 0, 0), 0xe220_a839_7b1d_cdaf);
        assert_eq!(seed_mix(42, 3, 7), 0xe400_3c9b_1082_141c);
    }

    #[test]
    fn uniform_uses_high_bits() {
        let mut s = RngState::seeded(RngKind::Lc, 1);
        // x1 = 1103527590; top 24 of 31 bits = x1 >> 7.
        assert_eq!(s.uniform(), (1_103_527_590u64 >> 7) as f64 / 16_777_216.0);
    }

    #[test]
    fn mask_key_round_trips_text() {
        let k: MaskKey = "7,2,5,4x3,mt,ud".parse().unwrap();
        assert_eq!(k.height, 4);
        assert_eq!(k.width, 3);
        assert_eq!(k.to_string().parse::<MaskKey>().unwrap(), k);
        assert!("7,2,5,4,mt,ud".parse::<MaskKey>().is_err());
        assert!("7,2,5,4x3,xx,ud".parse::<MaskKey>().is_err());
    }

    #[test]
    fn empty_mask_rejected() {
        let k: MaskKey = "1,0,0,0x4,lc,snd".parse().unwrap();
        assert!(matches!(make_mask(&k), Err(NoiseError::EmptyMask(0, 4))));
    }

    #[test]
    fn lattice_needs_enough_draws() {
        let s = RngState::seeded(RngKind::Mt19937, 1);
        assert!(lattice_diagnostic(&s, 999).is_err());
    }

    #[test]
    fn permutation_is_a_permutation() {
        let mut s = RngState::seeded(RngKind::Mt19937, 3);
        let mut p = s.permutation(100);
        p.sort_unstable();
        assert_eq!(p, (0..100).collect::<Vec<_>>());
    }

    proptest! {
        #[test]
        fn ud_masks_in_range(seed in any::<u64>(), layer in 0u32..64, ch in 0u32..64, lc in any::<bool>()) {
            let key = MaskKey {
                global_seed: seed, layer_id: layer, channel: ch, height: 5, width: 7,
                rng: if lc { RngKind::Lc } else { RngKind::Mt19937 }, dist: DistKind::Ud,
            };
            let m = make_mask(&key).unwrap();
            prop_assert!(m.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        }

        #[test]
        fn batching_does_not_change_stream(seed in any::<u64>(), k in 1usize..200, split in 0usize..200) {
            let split = split.min(k);
            let mut a = RngState::seeded(RngKind::Mt19937, seed);
            let whole: Vec<u64> = (0..k).map(|_| a.next_word()).collect();
            let mut b = RngState::seeded(RngKind::Mt19937, seed);
            let mut parts: Vec<u64> = (0..split).map(|_| b.next_word()).collect();
            parts.extend((split..k).map(|_| b.next_word()));
            prop_assert_eq!(whole, parts);
        }

        #[test]
        fn lc_uniform_in_unit_interval(seed in any::<u64>()) {
            let mut s = RngState::seeded(RngKind::Lc, seed);
            for _ in 0..50 {
                let u = s.uniform();
                prop_assert!((0.0..1.0).contains(&u));
            }
        }
    }
}
