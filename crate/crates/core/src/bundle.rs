//! Deployment bundles: a directory holding the student's architecture, its
//! weights at storage precision and a manifest of file digests.
//!
//! ```text
//! arch.txt        ArchSpec text
//! weights.bin     magic "SGBD" | version u32 | quant flag u8
//!                 [activation bits u32 | weight bits u32 | clamp f64 | rounding u8]
//!                 tensor count u64, then per tensor
//!                     name (len-prefixed) | role u8 | encoding u8 | body
//!                 body: a packed kernel blob (encoding 0) or
//!                       rank u64 | dims u64... | data f32... (encoding 1)
//! manifest.json   format version, input shape, quantization, per-file sizes
//!                 and SHA-256 digests, per-tensor encodings
//! ```
//!
//! Kernels of a quantized student are packed at the weight bit-width; every
//! other tensor is stored as `f32`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::models::{hex, ArchSpec, Network, ParamRole, ParamSet};
use crate::quantization::{pack_weights, QuantConfig, QuantizedBlob, Rounding};
use crate::tensor::Tensor;

pub const BUNDLE_VERSION: u32 = 1;
pub const ARCH_FILE: &str = "arch.txt";
pub const WEIGHTS_FILE: &str = "weights.bin";
pub const MANIFEST_FILE: &str = "manifest.json";
const MAGIC: &[u8; 4] = b"SGBD";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Encoding {
    Packed,
    F32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileEntry {
    pub file: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub role: u8,
    pub encoding: Encoding,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BundleManifest {
    pub version: u32,
    pub arch_name: String,
    pub input_shape: String,
    pub quant: Option<QuantConfig>,
    pub files: Vec<FileEntry>,
    pub tensors: Vec<TensorEntry>,
}

impl BundleManifest {
    /// Bytes of architecture and weights together.
    pub fn payload_bytes(&self) -> u64 {
        self.files.iter().map(|f| f.bytes).sum()
    }
}

/// A student ready for deployment.
#[derive(Debug, Clone, PartialEq)]
pub struct Bundle {
    pub spec: ArchSpec,
    pub params: ParamSet,
    pub quant: Option<QuantConfig>,
}

/// Rounds every tensor that a bundle stores as `f32` to `f32` precision, so
/// that exporting the result is lossless.
pub fn snap_to_storage(params: &ParamSet, quant: Option<&QuantConfig>) -> ParamSet {
    let mut out = params.clone();
    for p in out.entries_mut() {
        if quant.is_some() && p.role == ParamRole::Kernel {
            continue;
        }
        for v in p.tensor.data_mut() {
            *v = *v as f32 as f64;
        }
    }
    out
}

/// Checkpoint metadata describing `quant`, read back by [`quant_from_metadata`].
pub fn quant_metadata(quant: &QuantConfig) -> Vec<(&'static str, String)> {
    vec![
        ("activation_bits", quant.activation_bits.to_string()),
        ("weight_bits", quant.weight_bits.to_string()),
        ("clamp", format!("{:?}", quant.clamp)),
        ("rounding", quant.rounding.to_string()),
    ]
}

/// The quantization a checkpoint was finalized with, if any.
pub fn quant_from_metadata(meta: &BTreeMap<String, String>) -> Result<Option<QuantConfig>> {
    let Some(weight_bits) = meta.get("weight_bits") else {
        return Ok(None);
    };
    let bad = |k: &str| format_err(format!("checkpoint metadata `{k}` is malformed"));
    let get = |k: &str| meta.get(k).ok_or_else(|| bad(k));
    let rounding = match get("rounding")?.as_str() {
        "half_away_from_zero" => Rounding::HalfAwayFromZero,
        "half_even" => Rounding::HalfEven,
        _ => return Err(bad("rounding")),
    };
    let q = QuantConfig {
        activation_bits: get("activation_bits")?.parse().map_err(|_| bad("activation_bits"))?,
        weight_bits: weight_bits.parse().map_err(|_| bad("weight_bits"))?,
        clamp: get("clamp")?.parse().map_err(|_| bad("clamp"))?,
        rounding,
    };
    q.validate()?;
    Ok(Some(q))
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u64).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn rounding_tag(r: Rounding) -> u8 {
    match r {
        Rounding::HalfAwayFromZero => 0,
        Rounding::HalfEven => 1,
    }
}

fn sha(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

impl Bundle {
    pub fn new(spec: ArchSpec, params: ParamSet, quant: Option<QuantConfig>) -> Result<Self> {
        Network::new(spec.clone())?.check_params(&params)?;
        if let Some(q) = &quant {
            q.validate()?;
        }
        Ok(Bundle { spec, params, quant })
    }

    fn weights_bytes(&self) -> Result<(Vec<u8>, Vec<TensorEntry>)> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&BUNDLE_VERSION.to_le_bytes());
        match &self.quant {
            None => out.push(0),
            Some(q) => {
                out.push(1);
                out.extend_from_slice(&q.activation_bits.to_le_bytes());
                out.extend_from_slice(&q.weight_bits.to_le_bytes());
                out.extend_from_slice(&q.clamp.to_le_bytes());
                out.push(rounding_tag(q.rounding));
            }
        }
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        let mut entries = Vec::with_capacity(self.params.len());
        for p in self.params.entries() {
            put_str(&mut out, &p.name);
            out.push(p.role.tag());
            let encoding = match (&self.quant, p.role) {
                (Some(q), ParamRole::Kernel) => {
                    out.push(0);
                    pack_weights(&p.tensor, q)?
                        .write_to(&mut out)
                        .expect("writing to a Vec cannot fail");
                    Encoding::Packed
                }
                _ => {
                    out.push(1);
                    out.extend_from_slice(&(p.tensor.shape().len() as u64).to_le_bytes());
                    for &d in p.tensor.shape() {
                        out.extend_from_slice(&(d as u64).to_le_bytes());
                    }
                    for &v in p.tensor.data() {
                        out.extend_from_slice(&(v as f32).to_le_bytes());
                    }
                    Encoding::F32
                }
            };
            entries.push(TensorEntry {
                name: p.name.clone(),
                role: p.role.tag(),
                encoding,
                count: p.tensor.len(),
            });
        }
        Ok((out, entries))
    }

    /// Writes the bundle into `dir`, creating it if needed.
    pub fn save(&self, dir: &Path) -> Result<BundleManifest> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let arch = self.spec.to_string().into_bytes();
        let (weights, tensors) = self.weights_bytes()?;
        let mut files = Vec::new();
        for (name, bytes) in [(ARCH_FILE, &arch), (WEIGHTS_FILE, &weights)] {
            let path = dir.join(name);
            fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
            files.push(FileEntry {
                file: name.to_string(),
                bytes: bytes.len() as u64,
                sha256: sha(bytes),
            });
        }
        let manifest = BundleManifest {
            version: BUNDLE_VERSION,
            arch_name: self.spec.name.clone(),
            input_shape: self.spec.input.shape().to_string(),
            quant: self.quant,
            files,
            tensors,
        };
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
        Ok(manifest)
    }

    /// Reads a bundle, verifying every digest in its manifest.
    pub fn load(dir: &Path) -> Result<(Self, BundleManifest)> {
        let read = |name: &str| {
            let path = dir.join(name);
            fs::read(&path).map_err(|e| Error::io(&path, e))
        };
        let manifest: BundleManifest =
            serde_json::from_slice(&read(MANIFEST_FILE)?).map_err(|e| format_err(format!("manifest: {e}")))?;
        if manifest.version != BUNDLE_VERSION {
            return Err(format_err(format!("unsupported bundle version {}", manifest.version)));
        }
        let mut contents = Vec::new();
        for name in [ARCH_FILE, WEIGHTS_FILE] {
            let entry = manifest
                .files
                .iter()
                .find(|f| f.file == name)
                .ok_or_else(|| format_err(format!("manifest does not list {name}")))?;
            let bytes = read(name)?;
            let found = sha(&bytes);
            if found != entry.sha256 {
                return Err(Error::Checksum {
                    what: name.to_string(),
                    expected: entry.sha256.clone(),
                    found,
                });
            }
            contents.push(bytes);
        }
        let spec: ArchSpec = String::from_utf8(contents.remove(0))
            .map_err(|_| format_err("architecture is not utf-8"))?
            .parse()?;
        let (params, quant) = parse_weights(&contents[0])?;
        if quant != manifest.quant {
            return Err(format_err("manifest and weights disagree on quantization"));
        }
        Ok((Bundle::new(spec, params, quant)?, manifest))
    }
}

fn format_err(reason: impl Into<String>) -> Error {
    Error::Format {
        what: "bundle",
        reason: reason.into(),
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| format_err("truncated weights"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u64()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| format_err("tensor name is not utf-8"))
    }
}

fn parse_weights(bytes: &[u8]) -> Result<(ParamSet, Option<QuantConfig>)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(format_err("bad magic"));
    }
    let version = u32::from_le_bytes(r.array()?);
    if version != BUNDLE_VERSION {
        return Err(format_err(format!("unsupported weights version {version}")));
    }
    let quant = match r.u8()? {
        0 => None,
        1 => {
            let activation_bits = u32::from_le_bytes(r.array()?);
            let weight_bits = u32::from_le_bytes(r.array()?);
            let clamp = f64::from_le_bytes(r.array()?);
            let rounding = match r.u8()? {
                0 => Rounding::HalfAwayFromZero,
                1 => Rounding::HalfEven,
                t => return Err(format_err(format!("unknown rounding tag {t}"))),
            };
            let q = QuantConfig {
                activation_bits,
                weight_bits,
                clamp,
                rounding,
            };
            q.validate()?;
            Some(q)
        }
        f => return Err(format_err(format!("bad quantization flag {f}"))),
    };
    let mut params = ParamSet::new();
    for _ in 0..r.u64()? {
        let name = r.string()?;
        let role = ParamRole::from_tag(r.u8()?).ok_or_else(|| format_err("unknown tensor role"))?;
        let tensor = match r.u8()? {
            0 => {
                let mut rest = &r.buf[r.pos..];
                let before = rest.len();
                let blob = QuantizedBlob::read_from(&mut rest)?;
                r.pos += before - rest.len();
                blob.unpack()
            }
            1 => {
                let rank = r.u64()? as usize;
                if rank > 8 {
                    return Err(format_err("rank too large"));
                }
                let shape = (0..rank)
                    .map(|_| r.u64().map(|d| d as usize))
                    .collect::<Result<Vec<_>>>()?;
                let count: usize = shape.iter().product();
                let raw = r.take(count.checked_mul(4).ok_or_else(|| format_err("tensor too large"))?)?;
                let data = raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                    .collect();
                Tensor::from_vec(&shape, data)?
            }
            e => return Err(format_err(format!("unknown encoding {e}"))),
        };
        if params.id(&name).is_some() {
            return Err(format_err(format!("duplicate tensor `{name}`")));
        }
        params.push(name, role, tensor);
    }
    if r.pos != bytes.len() {
        return Err(format_err("trailing bytes"));
    }
    Ok((params, quant))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{catalog, ForwardOptions, InitConfig, QuantMode};
    use crate::quantization::finalize_weights;
    use rand::SeedableRng;

    fn student(quant: Option<QuantConfig>) -> Bundle {
        let spec = catalog::desk_student();
        let net = Network::new(spec.clone()).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mut p = net.init_params(&InitConfig::default(), &mut rng);
        if let Some(q) = &quant {
            p = finalize_weights(&p, q).unwrap();
        }
        Bundle::new(spec, snap_to_storage(&p, quant.as_ref()), quant).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        for quant in [
            None,
            Some(QuantConfig::default()),
            Some(QuantConfig::new(8, 4, 4.0).unwrap()),
        ] {
            let b = student(quant);
            let dir = tempfile::tempdir().unwrap();
            let m = b.save(dir.path()).unwrap();
            let (back, m2) = Bundle::load(dir.path()).unwrap();
            assert_eq!(back, b);
            assert_eq!(m, m2);
            let x = Tensor::full(&[1, 3, 32, 32], 0.25);
            let opts = ForwardOptions {
                quant: QuantMode::from_config(quant),
                train: false,
            };
            let net = Network::new(b.spec.clone()).unwrap();
            assert_eq!(
                net.infer(&b.params, &x, &opts).unwrap(),
                net.infer(&back.params, &x, &opts).unwrap()
            );
        }
    }

    #[test]
    fn packed_bundle_is_small() {
        let dir = tempfile::tempdir().unwrap();
        let full = student(None).save(&dir.path().join("a")).unwrap().payload_bytes();
        let packed = student(Some(QuantConfig::default()))
            .save(&dir.path().join("b"))
            .unwrap()
            .payload_bytes();
        assert!((packed as f64) < 0.35 * full as f64, "{packed} vs {full}");
    }

    #[test]
    fn quant_metadata_round_trips() {
        let q = QuantConfig::new(6, 4, 2.5).unwrap();
        let meta: BTreeMap<String, String> = quant_metadata(&q)
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect();
        assert_eq!(quant_from_metadata(&meta).unwrap(), Some(q));
        assert_eq!(quant_from_metadata(&BTreeMap::new()).unwrap(), None);
        let mut broken = meta.clone();
        broken.insert("clamp".into(), "x".into());
        assert!(quant_from_metadata(&broken).is_err());
    }

    #[test]
    fn tampering_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        student(None).save(dir.path()).unwrap();
        let w = dir.path().join(WEIGHTS_FILE);
        let mut bytes = fs::read(&w).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 1;
        fs::write(&w, bytes).unwrap();
        assert!(matches!(Bundle::load(dir.path()), Err(Error::Checksum { .. })));
        assert!(matches!(
            Bundle::load(&dir.path().join("missing")),
            Err(Error::Io { .. })
        ));
    }
}
