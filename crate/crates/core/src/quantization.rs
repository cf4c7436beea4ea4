//! Uniform fake-quantizers for activations and weights.
//!
//! Activations are clamped to `[0, p]` and snapped to the grid `k * p / 2^m`.
//! Weights keep their own range: the scale is `max|w| / 2^(n-1)` and codes are
//! symmetric around zero. Both quantizers are paired with straight-through
//! backward rules: the activation gradient is masked to the clamp window, the
//! weight gradient passes unchanged.

use std::fmt;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{ParamRole, ParamSet};
use crate::tensor::Tensor;

/// Tie-breaking rule applied by `round`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rounding {
    /// `round(2.5) = 3`, `round(-2.5) = -3`. Keeps `q_w` odd-symmetric.
    #[default]
    HalfAwayFromZero,
    HalfEven,
}

impl Rounding {
    #[inline]
    pub fn round(self, x: f64) -> f64 {
        match self {
            Rounding::HalfAwayFromZero => x.round(),
            Rounding::HalfEven => x.round_ties_even(),
        }
    }
}

impl fmt::Display for Rounding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Rounding::HalfAwayFromZero => "half_away_from_zero",
            Rounding::HalfEven => "half_even",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuantConfig {
    /// Activation bit-width `m`.
    pub activation_bits: u32,
    /// Weight bit-width `n`.
    pub weight_bits: u32,
    /// Activation clamp threshold `p`.
    pub clamp: f64,
    pub rounding: Rounding,
}

impl Default for QuantConfig {
    fn default() -> Self {
        QuantConfig {
            activation_bits: 8,
            weight_bits: 8,
            clamp: 4.0,
            rounding: Rounding::HalfAwayFromZero,
        }
    }
}

impl QuantConfig {
    pub fn new(activation_bits: u32, weight_bits: u32, clamp: f64) -> Result<Self> {
        let cfg = QuantConfig {
            activation_bits,
            weight_bits,
            clamp,
            rounding: Rounding::default(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.activation_bits == 0 || self.activation_bits > 30 {
            return Err(Error::config(format!(
                "activation bit-width must be in 1..=30, got {}",
                self.activation_bits
            )));
        }
        if self.weight_bits == 0 || self.weight_bits > 30 {
            return Err(Error::config(format!(
                "weight bit-width must be in 1..=30, got {}",
                self.weight_bits
            )));
        }
        if !(self.clamp.is_finite() && self.clamp > 0.0) {
            return Err(Error::config(format!(
                "activation clamp must be positive, got {}",
                self.clamp
            )));
        }
        Ok(())
    }

    /// `s_a = p / 2^m`.
    pub fn activation_step(&self) -> f64 {
        self.clamp / (1u64 << self.activation_bits) as f64
    }

    #[inline]
    pub fn quantize_activation_scalar(&self, a: f64) -> f64 {
        let s = self.activation_step();
        self.rounding.round(a.clamp(0.0, self.clamp) / s) * s
    }

    #[inline]
    pub fn ste_activation_scalar(&self, a: f64) -> f64 {
        if (0.0..=self.clamp).contains(&a) {
            1.0
        } else {
            0.0
        }
    }
}

/// Elementwise `q_a`.
pub fn quantize_activation(a: &Tensor, cfg: &QuantConfig) -> Result<Tensor> {
    cfg.validate()?;
    a.check_finite("activation")?;
    Ok(a.map(|v| cfg.quantize_activation_scalar(v)))
}

/// Backward mask of `q_a`: 1 inside `[0, p]`, 0 outside.
pub fn ste_activation_grad(a: &Tensor, cfg: &QuantConfig) -> Tensor {
    a.map(|v| cfg.ste_activation_scalar(v))
}

/// Backward of `q_w`: identity.
pub fn ste_weight_grad(w: &Tensor) -> Tensor {
    Tensor::full(w.shape(), 1.0)
}

/// `s_w = max|w| / 2^(n-1)`; zero for an all-zero tensor.
pub fn weight_scale(w: &[f64], bits: u32) -> f64 {
    let max = w.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    max / (1u64 << (bits - 1)) as f64
}

/// Quantizes a slice in place. An all-zero slice is left untouched.
pub(crate) fn quantize_weight_slice(w: &mut [f64], cfg: &QuantConfig) -> f64 {
    let s = weight_scale(w, cfg.weight_bits);
    if s > 0.0 {
        for v in w.iter_mut() {
            *v = cfg.rounding.round(*v / s) * s;
        }
    }
    s
}

/// Elementwise `q_w` with one scale for the whole tensor.
pub fn quantize_weight(w: &Tensor, cfg: &QuantConfig) -> Result<Tensor> {
    cfg.validate()?;
    w.check_finite("weight")?;
    let mut out = w.clone();
    quantize_weight_slice(out.data_mut(), cfg);
    Ok(out)
}

/// Replaces every kernel in `params` by its quantized value. Scales, shifts,
/// biases and normalization statistics are left at full precision.
pub fn finalize_weights(params: &ParamSet, cfg: &QuantConfig) -> Result<ParamSet> {
    cfg.validate()?;
    let mut out = params.clone();
    for entry in out.entries_mut() {
        if entry.role == ParamRole::Kernel {
            entry.tensor.check_finite("weight")?;
            quantize_weight_slice(entry.tensor.data_mut(), cfg);
        }
    }
    Ok(out)
}

/// A quantized kernel stored as `n`-bit two's-complement codes.
///
/// Symmetric coding produces codes in `[-2^(n-1), 2^(n-1)]`, one level more
/// than `n` bits hold. The positive extreme (only reached by the largest
/// elements) is stored in the payload as `2^(n-1) - 1` and listed by index in
/// the header.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedBlob {
    pub bits: u8,
    pub scale: f64,
    pub shape: Vec<usize>,
    pub count: usize,
    pub payload: Vec<u8>,
    pub saturated: Vec<u64>,
}

const BLOB_MAGIC: &[u8; 4] = b"QWB1";

impl QuantizedBlob {
    pub fn header_len(&self) -> usize {
        // magic, count, bits, scale, rank, dims, saturated count, indices
        4 + 8 + 1 + 8 + 8 + 8 * self.shape.len() + 8 + 8 * self.saturated.len()
    }

    pub fn payload_len(count: usize, bits: u32) -> usize {
        (count * bits as usize).div_ceil(8)
    }

    pub fn byte_len(&self) -> usize {
        self.header_len() + self.payload.len()
    }

    pub fn unpack(&self) -> Tensor {
        let bits = self.bits as u32;
        let half = 1i64 << (bits - 1);
        let mut codes: Vec<i64> = BitReader::new(&self.payload)
            .take(self.count, bits)
            .into_iter()
            .map(|raw| {
                // sign-extend
                if raw as i64 >= half {
                    raw as i64 - (1i64 << bits)
                } else {
                    raw as i64
                }
            })
            .collect();
        for &i in &self.saturated {
            codes[i as usize] = half;
        }
        let data = codes.into_iter().map(|c| c as f64 * self.scale).collect();
        Tensor::from_vec(&self.shape, data).expect("blob shape matches count")
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(BLOB_MAGIC)?;
        w.write_all(&(self.count as u64).to_le_bytes())?;
        w.write_all(&[self.bits])?;
        w.write_all(&self.scale.to_le_bytes())?;
        w.write_all(&(self.shape.len() as u64).to_le_bytes())?;
        for &d in &self.shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        w.write_all(&(self.saturated.len() as u64).to_le_bytes())?;
        for &i in &self.saturated {
            w.write_all(&i.to_le_bytes())?;
        }
        w.write_all(&self.payload)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(self.byte_len());
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let bad = |reason: &str| Error::Format {
            what: "quantized blob",
            reason: reason.to_string(),
        };
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic)?;
        if &magic != BLOB_MAGIC {
            return Err(bad("bad magic"));
        }
        let count = read_u64(r)? as usize;
        let mut b = [0u8; 1];
        read_exact(r, &mut b)?;
        let bits = b[0];
        if bits == 0 || bits > 30 {
            return Err(bad("bit-width out of range"));
        }
        let scale = f64::from_le_bytes(read_array(r)?);
        let rank = read_u64(r)? as usize;
        if rank > 8 {
            return Err(bad("rank too large"));
        }
        let shape = (0..rank)
            .map(|_| read_u64(r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        if shape.iter().product::<usize>() != count {
            return Err(bad("shape does not match element count"));
        }
        let n_sat = read_u64(r)? as usize;
        if n_sat > count {
            return Err(bad("too many saturated entries"));
        }
        let saturated = (0..n_sat).map(|_| read_u64(r)).collect::<Result<Vec<_>>>()?;
        if saturated.iter().any(|&i| i as usize >= count) {
            return Err(bad("saturated index out of range"));
        }
        let mut payload = vec![0u8; Self::payload_len(count, bits as u32)];
        read_exact(r, &mut payload)?;
        Ok(QuantizedBlob {
            bits,
            scale,
            shape,
            count,
            payload,
            saturated,
        })
    }
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| Error::Format {
        what: "quantized blob",
        reason: e.to_string(),
    })
}

fn read_array<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    read_exact(r, &mut buf)?;
    Ok(buf)
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    Ok(u64::from_le_bytes(read_array(r)?))
}

/// Packs a tensor that already lies on its `q_w` grid.
pub fn pack_weights(w: &Tensor, cfg: &QuantConfig) -> Result<QuantizedBlob> {
    cfg.validate()?;
    w.check_finite("weight")?;
    let bits = cfg.weight_bits;
    let scale = weight_scale(w.data(), bits);
    let half = 1i64 << (bits - 1);
    let mut writer = BitWriter::with_capacity(QuantizedBlob::payload_len(w.len(), bits));
    let mut saturated = Vec::new();
    for (i, &v) in w.data().iter().enumerate() {
        let code = if scale > 0.0 {
            let k = cfg.rounding.round(v / scale);
            if k * scale != v {
                return Err(Error::OffGrid { index: i, value: v });
            }
            k as i64
        } else {
            if v != 0.0 {
                return Err(Error::OffGrid { index: i, value: v });
            }
            0
        };
        let stored = if code == half {
            saturated.push(i as u64);
            half - 1
        } else {
            code
        };
        writer.push((stored as u64) & ((1u64 << bits) - 1), bits);
    }
    Ok(QuantizedBlob {
        bits: bits as u8,
        scale,
        shape: w.shape().to_vec(),
        count: w.len(),
        payload: writer.finish(),
        saturated,
    })
}

/// MSB-first bit stream.
struct BitWriter {
    bytes: Vec<u8>,
    acc: u64,
    filled: u32,
}

impl BitWriter {
    fn with_capacity(n: usize) -> Self {
        BitWriter {
            bytes: Vec::with_capacity(n),
            acc: 0,
            filled: 0,
        }
    }

    fn push(&mut self, value: u64, bits: u32) {
        self.acc = (self.acc << bits) | value;
        self.filled += bits;
        while self.filled >= 8 {
            self.filled -= 8;
            self.bytes.push((self.acc >> self.filled) as u8);
        }
        self.acc &= (1u64 << self.filled) - 1;
    }

    fn finish(mut self) -> Vec<u8> {
        if self.filled > 0 {
            self.bytes.push((self.acc << (8 - self.filled)) as u8);
        }
        self.bytes
    }
}

struct BitReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> BitReader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        BitReader { bytes, pos: 0 }
    }

    fn take(&mut self, count: usize, bits: u32) -> Vec<u64> {
        (0..count)
            .map(|_| {
                let mut v = 0u64;
                for _ in 0..bits {
                    let byte = self.bytes[self.pos / 8];
                    let bit = (byte >> (7 - self.pos % 8)) & 1;
                    v = (v << 1) | bit as u64;
                    self.pos += 1;
                }
                v
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(v: &[f64]) -> Tensor {
        Tensor::from_vec(&[v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn defaults_are_eight_bit_clamp_four() {
        let cfg = QuantConfig::default();
        assert_eq!((cfg.activation_bits, cfg.weight_bits, cfg.clamp), (8, 8, 4.0));
        assert_eq!(cfg.rounding, Rounding::HalfAwayFromZero);
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(QuantConfig::new(0, 8, 4.0).is_err());
        assert!(QuantConfig::new(8, 0, 4.0).is_err());
        assert!(QuantConfig::new(8, 8, 0.0).is_err());
        assert!(QuantConfig::new(8, 8, f64::NAN).is_err());
    }

    #[test]
    fn activation_examples() {
        let cfg = QuantConfig::default();
        let q = quantize_activation(&t(&[0.0, 5.0, 0.02]), &cfg).unwrap();
        assert_eq!(q.data(), &[0.0, 4.0, 0.015625]);
    }

    #[test]
    fn activation_rejects_nan_and_inf() {
        let cfg = QuantConfig::default();
        assert!(quantize_activation(&t(&[f64::NAN]), &cfg).is_err());
        assert!(quantize_activation(&t(&[f64::INFINITY]), &cfg).is_err());
        assert!(quantize_weight(&t(&[f64::NEG_INFINITY]), &cfg).is_err());
    }

    #[test]
    fn weight_examples() {
        let cfg8 = QuantConfig::default();
        assert_eq!(quantize_weight(&t(&[0.0]), &cfg8).unwrap().data(), &[0.0]);
        assert_eq!(quantize_weight(&t(&[0.5, 1.0]), &cfg8).unwrap().data(), &[0.5, 1.0]);
        let cfg2 = QuantConfig::new(8, 2, 4.0).unwrap();
        assert_eq!(quantize_weight(&t(&[0.3]), &cfg2).unwrap().data(), &[0.3]);
    }

    #[test]
    fn ste_masks() {
        let cfg = QuantConfig::default();
        let g = ste_activation_grad(&t(&[2.0, -0.1, 4.0, 4.0000001]), &cfg);
        assert_eq!(g.data(), &[1.0, 0.0, 1.0, 0.0]);
        assert_eq!(ste_weight_grad(&t(&[0.3])).data(), &[1.0]);
        assert!(ste_weight_grad(&t(&[])).is_empty());
        assert_eq!(ste_weight_grad(&t(&[-7.0, 0.0, 7.0])).data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn rounding_bound_on_thousand_elements() {
        let cfg = QuantConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let w = Tensor::randn(&[10, 10, 10], 0.3, &mut rng);
        let s = weight_scale(w.data(), 8);
        let q = quantize_weight(&w, &cfg).unwrap();
        for (a, b) in w.data().iter().zip(q.data()) {
            assert!((a - b).abs() <= s / 2.0 + 1e-15, "{a} -> {b}");
        }
    }

    #[test]
    fn pack_sizes() {
        let cfg8 = QuantConfig::default();
        let w = Tensor::from_vec(&[128], (0..128).map(|i| i as f64 - 64.0).collect()).unwrap();
        let blob = pack_weights(&quantize_weight(&w, &cfg8).unwrap(), &cfg8).unwrap();
        assert_eq!(blob.payload.len(), 128);
        assert_eq!(blob.byte_len(), 128 + blob.header_len());
        assert_eq!(blob.to_bytes().len(), blob.byte_len());

        let cfg2 = QuantConfig::new(8, 2, 4.0).unwrap();
        let w = quantize_weight(&t(&[0.1, -0.2, 0.05]), &cfg2).unwrap();
        let blob = pack_weights(&w, &cfg2).unwrap();
        assert_eq!(blob.payload.len(), 1);
    }

    #[test]
    fn pack_rejects_off_grid() {
        let cfg = QuantConfig::default();
        let w = t(&[1.0, 0.3333]);
        assert!(matches!(pack_weights(&w, &cfg), Err(Error::OffGrid { index: 1, .. })));
    }

    #[test]
    fn payload_is_msb_first() {
        let cfg = QuantConfig::new(8, 2, 4.0).unwrap();
        // s = 0.5: codes -2, -1, 0, 1 -> 10 11 00 01
        let w = t(&[-1.0, -0.5, 0.0, 0.5]);
        let blob = pack_weights(&w, &cfg).unwrap();
        assert_eq!(blob.payload, vec![0b1011_0001]);
        assert!(blob.saturated.is_empty());
    }

    #[test]
    fn saturated_code_round_trips() {
        let cfg = QuantConfig::default();
        let w = t(&[1.0, -1.0, 0.25]);
        let blob = pack_weights(&w, &cfg).unwrap();
        assert_eq!(blob.saturated, vec![0]);
        assert_eq!(blob.unpack().data(), w.data());
    }

    #[test]
    fn blob_bytes_round_trip() {
        let cfg = QuantConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = quantize_weight(&Tensor::randn(&[4, 3, 3, 3], 1.0, &mut rng), &cfg).unwrap();
        let blob = pack_weights(&w, &cfg).unwrap();
        let bytes = blob.to_bytes();
        let back = QuantizedBlob::read_from(&mut bytes.as_slice()).unwrap();
        assert_eq!(back, blob);
        assert_eq!(back.unpack().data(), w.data());
        assert!(QuantizedBlob::read_from(&mut &bytes[..bytes.len() - 1]).is_err());
    }

    proptest! {
        #[test]
        fn quantizers_idempotent(v in proptest::collection::vec(-10.0f64..10.0, 1..64), m in 1u32..9, n in 1u32..9) {
            let cfg = QuantConfig::new(m, n, 4.0).unwrap();
            let w = t(&v);
            let qa = quantize_activation(&w, &cfg).unwrap();
            prop_assert_eq!(quantize_activation(&qa, &cfg).unwrap(), qa);
            let qw = quantize_weight(&w, &cfg).unwrap();
            prop_assert_eq!(quantize_weight(&qw, &cfg).unwrap(), qw);
        }

        #[test]
        fn pack_unpack_is_exact(v in proptest::collection::vec(-3.0f64..3.0, 1..100), n in 1u32..12) {
            let cfg = QuantConfig::new(8, n, 4.0).unwrap();
            let qw = quantize_weight(&t(&v), &cfg).unwrap();
            let blob = pack_weights(&qw, &cfg).unwrap();
            prop_assert_eq!(blob.payload.len(), (v.len() * n as usize).div_ceil(8));
            prop_assert_eq!(blob.unpack(), qw);
        }
    }
}
