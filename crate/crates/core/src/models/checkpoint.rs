//! Parameter checkpoints: an architecture, named tensors and free-form
//! metadata, sealed by a trailing SHA-256 digest.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic "SGCK" | version u32
//! spec text: len u64, utf-8 bytes
//! metadata: count u64, then (key, value) pairs of len-prefixed strings
//! tensors: count u64, then per tensor
//!     name (len-prefixed) | role u8 | rank u64 | dims u64... | data f64...
//! sha256 of everything above: 32 bytes
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::params::{ParamRole, ParamSet};
use super::spec::ArchSpec;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"SGCK";
const VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub spec: ArchSpec,
    pub params: ParamSet,
    pub metadata: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new(spec: ArchSpec, params: ParamSet) -> Self {
        Checkpoint {
            spec,
            params,
            metadata: BTreeMap::new(),
        }
    }

    pub fn with_meta(mut self, key: impl Into<String>, value: impl ToString) -> Self {
        self.metadata.insert(key.into(), value.to_string());
        self
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut out, &self.spec.to_string());
        out.extend_from_slice(&(self.metadata.len() as u64).to_le_bytes());
        for (k, v) in &self.metadata {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for p in self.params.entries() {
            put_str(&mut out, &p.name);
            out.push(p.role.tag());
            out.extend_from_slice(&(p.tensor.shape().len() as u64).to_le_bytes());
            for &d in p.tensor.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in p.tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    /// Hex SHA-256 digest that seals the serialized checkpoint.
    pub fn checksum(&self) -> String {
        let bytes = self.to_bytes();
        hex(&bytes[bytes.len() - DIGEST_LEN..])
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 + DIGEST_LEN {
            return Err(format_err("file too short"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        let actual = Sha256::digest(body);
        if actual.as_slice() != digest {
            return Err(Error::Checksum {
                what: "checkpoint".into(),
                expected: hex(digest),
                found: hex(&actual),
            });
        }
        let mut r = Reader { buf: body, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(format_err("bad magic"));
        }
        let version = u32::from_le_bytes(r.array()?);
        if version != VERSION {
            return Err(format_err(&format!("unsupported version {version}")));
        }
        let spec: ArchSpec = r.string()?.parse()?;
        let mut metadata = BTreeMap::new();
        for _ in 0..r.u64()? {
            let k = r.string()?;
            let v = r.string()?;
            metadata.insert(k, v);
        }
        let mut params = ParamSet::new();
        for _ in 0..r.u64()? {
            let name = r.string()?;
            let role = ParamRole::from_tag(r.take(1)?[0]).ok_or_else(|| format_err("unknown tensor role"))?;
            let rank = r.u64()? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let count: usize = shape.iter().product();
            let raw = r.take(count.checked_mul(8).ok_or_else(|| format_err("tensor too large"))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if params.id(&name).is_some() {
                return Err(format_err(&format!("duplicate tensor `{name}`")));
            }
            params.push(name, role, Tensor::from_vec(&shape, data)?);
        }
        if r.pos != body.len() {
            return Err(format_err("trailing bytes"));
        }
        Ok(Checkpoint { spec, params, metadata })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Loads a frozen teacher and checks that its tensors match its
/// architecture.
pub fn load_teacher(path: &Path) -> Result<(ArchSpec, ParamSet)> {
    let ck = Checkpoint::load(path)?;
    let net = super::Network::new(ck.spec.clone())?;
    net.check_params(&ck.params)?;
    Ok((ck.spec, ck.params))
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn format_err(reason: &str) -> Error {
    Error::Format {
        what: "checkpoint",
        reason: reason.to_string(),
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u64).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
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
            .ok_or_else(|| format_err("truncated"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().unwrap())
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u64()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| format_err("invalid utf-8"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{catalog, ForwardOptions, InitConfig, Network};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> Checkpoint {
        let spec = catalog::desk_generator();
        let net = Network::new(spec.clone()).unwrap();
        let params = net.init_params(&InitConfig::default(), &mut ChaCha8Rng::seed_from_u64(3));
        Checkpoint::new(spec, params).with_meta("kind", "teacher")
    }

    #[test]
    fn round_trip_is_exact() {
        let ck = sample();
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back, ck);
        let net = Network::new(back.spec.clone()).unwrap();
        let x = Tensor::randn(&[1, 3, 32, 32], 0.5, &mut ChaCha8Rng::seed_from_u64(4));
        let a = net.infer(&ck.params, &x, &ForwardOptions::eval()).unwrap();
        let b = net.infer(&back.params, &x, &ForwardOptions::eval()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn corruption_and_truncation_are_rejected() {
        let bytes = sample().to_bytes();
        let mut flipped = bytes.clone();
        flipped[100] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&flipped), Err(Error::Checksum { .. })));
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 10]).is_err());
        assert!(Checkpoint::from_bytes(&bytes[..20]).is_err());
    }

    #[test]
    fn missing_file_is_an_io_error() {
        let err = load_teacher(Path::new("/nonexistent/teacher.ckpt")).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }
}
