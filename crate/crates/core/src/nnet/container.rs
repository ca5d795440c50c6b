//! Binary model container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "DIDM" | version u32 = 1 | tensor count u32
//! per tensor: name len u16 | name UTF-8 | rank u8 | dims u32 x rank
//!             | payload f32 x product(dims)
//! ```
//!
//! Values are computed in `f64` but stored as `f32`; loading therefore
//! rounds parameters to single precision. A JSON sidecar next to the
//! container carries the architecture and training metadata.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{DidError, Result};
use crate::nnet::params::ParamSet;
use crate::nnet::tensor::Tensor2;

const MAGIC: &[u8; 4] = b"DIDM";
const VERSION: u32 = 1;

/// One tensor as it appears in a container file.
#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

/// Writes tensors in the given order.
pub fn write_container(path: &Path, tensors: &[NamedTensor]) -> Result<()> {
    let file = File::create(path).map_err(|e| DidError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| DidError::io(path, e);

    w.write_all(MAGIC).map_err(io_err)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(io_err)?;
    let count = u32::try_from(tensors.len()).map_err(|_| {
        DidError::ModelFile {
            path: path.into(),
            reason: "too many tensors for the container format".into(),
        }
    })?;
    w.write_all(&count.to_le_bytes()).map_err(io_err)?;

    for t in tensors {
        let name_len = u16::try_from(t.name.len()).map_err(|_| DidError::ModelFile {
            path: path.into(),
            reason: format!("tensor name '{}' exceeds 65535 bytes", t.name),
        })?;
        let expect: usize = t.dims.iter().product();
        if t.dims.is_empty() || expect != t.data.len() {
            return Err(DidError::ModelFile {
                path: path.into(),
                reason: format!(
                    "tensor '{}': dims {:?} do not describe {} values",
                    t.name,
                    t.dims,
                    t.data.len()
                ),
            });
        }
        w.write_all(&name_len.to_le_bytes()).map_err(io_err)?;
        w.write_all(t.name.as_bytes()).map_err(io_err)?;
        w.write_all(&[t.dims.len() as u8]).map_err(io_err)?;
        for &d in &t.dims {
            let d = u32::try_from(d).map_err(|_| DidError::ModelFile {
                path: path.into(),
                reason: format!("tensor '{}': dimension {d} exceeds u32", t.name),
            })?;
            w.write_all(&d.to_le_bytes()).map_err(io_err)?;
        }
        for &v in &t.data {
            w.write_all(&(v as f32).to_le_bytes()).map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)
}

/// Reads a container, validating structure and finiteness.
pub fn read_container(path: &Path) -> Result<Vec<NamedTensor>> {
    let file = File::open(path).map_err(|e| DidError::io(path, e))?;
    let mut r = BufReader::new(file);
    let bad = |reason: String| DidError::ModelFile {
        path: path.into(),
        reason,
    };

    let mut magic = [0u8; 4];
    read_exact(path, &mut r, &mut magic)?;
    if &magic != MAGIC {
        return Err(bad(format!("bad magic {magic:?}, expected \"DIDM\"")));
    }
    let version = read_u32(path, &mut r)?;
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}, expected {VERSION}")));
    }
    let count = read_u32(path, &mut r)? as usize;

    let mut tensors = Vec::with_capacity(count);
    for i in 0..count {
        let name_len = read_u16(path, &mut r)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        read_exact(path, &mut r, &mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| bad(format!("tensor {i}: name is not UTF-8")))?;
        let mut rank = [0u8; 1];
        read_exact(path, &mut r, &mut rank)?;
        let rank = rank[0] as usize;
        if rank == 0 || rank > 8 {
            return Err(bad(format!("tensor '{name}': unsupported rank {rank}")));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            let d = read_u32(path, &mut r)? as usize;
            if d == 0 {
                return Err(bad(format!("tensor '{name}': zero dimension")));
            }
            dims.push(d);
        }
        let n: usize = dims.iter().product();
        let mut data = Vec::with_capacity(n);
        let mut buf = [0u8; 4];
        for j in 0..n {
            read_exact(path, &mut r, &mut buf)?;
            let v = f32::from_le_bytes(buf) as f64;
            if !v.is_finite() {
                return Err(bad(format!("tensor '{name}': non-finite value at {j}")));
            }
            data.push(v);
        }
        tensors.push(NamedTensor { name, dims, data });
    }

    let mut extra = [0u8; 1];
    match r.read(&mut extra) {
        Ok(0) => Ok(tensors),
        Ok(_) => Err(bad("trailing bytes after the last tensor".into())),
        Err(e) => Err(DidError::io(path, e)),
    }
}

fn read_exact(path: &Path, r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            DidError::ModelFile {
                path: path.into(),
                reason: "unexpected end of file".into(),
            }
        } else {
            DidError::io(path, e)
        }
    })
}

fn read_u32(path: &Path, r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_exact(path, r, &mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u16(path: &Path, r: &mut impl Read) -> Result<u16> {
    let mut buf = [0u8; 2];
    read_exact(path, r, &mut buf)?;
    Ok(u16::from_le_bytes(buf))
}

/// Lowercase hex SHA-256 of a file's bytes.
pub fn sha256_hex_of_file(path: &Path) -> Result<String> {
    let file = File::open(path).map_err(|e| DidError::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 8192];
    loop {
        let n = r.read(&mut buf).map_err(|e| DidError::io(path, e))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    let digest = hasher.finalize();
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

impl ParamSet {
    /// Parameters in insertion order, ready for serialisation.
    pub fn to_named_tensors(&self) -> Vec<NamedTensor> {
        self.iter()
            .map(|p| NamedTensor {
                name: p.name().to_string(),
                dims: p.dims().to_vec(),
                data: p.value().data().to_vec(),
            })
            .collect()
    }

    /// Rebuilds a parameter set. Rank-1 tensors become row vectors; higher
    /// ranks keep the leading dimension as rows and flatten the rest, which
    /// matches how the layer kernels store their weights.
    pub fn from_named_tensors(tensors: Vec<NamedTensor>) -> Result<Self> {
        let mut params = ParamSet::new();
        for t in tensors {
            let (rows, cols) = storage_shape(&t.dims);
            params.add(&t.name, &t.dims, Tensor2::from_vec(rows, cols, t.data)?)?;
        }
        Ok(params)
    }
}

fn storage_shape(dims: &[usize]) -> (usize, usize) {
    match dims {
        [n] => (1, *n),
        [rows, rest @ ..] => (*rows, rest.iter().product()),
        [] => (0, 0),
    }
}

#[cfg(test)]
mod tests {
    use tempfile::tempdir;

    use super::*;

    fn sample_tensors() -> Vec<NamedTensor> {
        vec![
            NamedTensor {
                name: "conv0.w".into(),
                dims: vec![2, 3, 2],
                data: (0..12).map(|i| i as f64 * 0.25 - 1.0).collect(),
            },
            NamedTensor {
                name: "conv0.b".into(),
                dims: vec![2],
                data: vec![0.5, -0.5],
            },
        ]
    }

    #[test]
    fn round_trip_preserves_structure() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.didm");
        write_container(&path, &sample_tensors()).unwrap();
        let got = read_container(&path).unwrap();
        assert_eq!(got, sample_tensors());
    }

    #[test]
    fn float_payload_survives_as_f32() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.didm");
        let t = vec![NamedTensor {
            name: "x".into(),
            dims: vec![1],
            data: vec![0.1234567890123],
        }];
        write_container(&path, &t).unwrap();
        let got = read_container(&path).unwrap();
        // Exactly the f32 rounding of the original, no more, no less.
        assert_eq!(got[0].data[0], 0.1234567890123f64 as f32 as f64);
    }

    #[test]
    fn rewriting_a_loaded_model_is_byte_identical() {
        let dir = tempdir().unwrap();
        let p1 = dir.path().join("a.didm");
        let p2 = dir.path().join("b.didm");
        write_container(&p1, &sample_tensors()).unwrap();
        let loaded = read_container(&p1).unwrap();
        write_container(&p2, &loaded).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn rejects_bad_magic_version_and_truncation() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.didm");
        write_container(&path, &sample_tensors()).unwrap();
        let good = std::fs::read(&path).unwrap();

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        std::fs::write(&path, &bad_magic).unwrap();
        assert!(read_container(&path).unwrap_err().to_string().contains("magic"));

        let mut bad_version = good.clone();
        bad_version[4] = 9;
        std::fs::write(&path, &bad_version).unwrap();
        assert!(read_container(&path).unwrap_err().to_string().contains("version"));

        std::fs::write(&path, &good[..good.len() - 3]).unwrap();
        assert!(read_container(&path)
            .unwrap_err()
            .to_string()
            .contains("unexpected end"));

        let mut trailing = good.clone();
        trailing.push(0);
        std::fs::write(&path, &trailing).unwrap();
        assert!(read_container(&path)
            .unwrap_err()
            .to_string()
            .contains("trailing"));
    }

    #[test]
    fn rejects_non_finite_payloads() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.didm");
        write_container(
            &path,
            &[NamedTensor {
                name: "x".into(),
                dims: vec![2],
                data: vec![1.0, 2.0],
            }],
        )
        .unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let n = bytes.len();
        bytes[n - 4..].copy_from_slice(&f32::NAN.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        assert!(read_container(&path)
            .unwrap_err()
            .to_string()
            .contains("non-finite"));
    }

    #[test]
    fn param_set_round_trip() {
        let mut ps = ParamSet::new();
        ps.add(
            "conv0.w",
            &[2, 1, 3],
            Tensor2::from_vec(2, 3, vec![0.5; 6]).unwrap(),
        )
        .unwrap();
        ps.add("conv0.b", &[2], Tensor2::from_vec(1, 2, vec![0.0; 2]).unwrap())
            .unwrap();
        let back = ParamSet::from_named_tensors(ps.to_named_tensors()).unwrap();
        assert_eq!(back.value("conv0.w").shape(), (2, 3));
        assert_eq!(back.value("conv0.b").shape(), (1, 2));
        assert_eq!(back.value("conv0.w").data(), ps.value("conv0.w").data());
    }

    #[test]
    fn file_hash_is_stable_and_sensitive() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("empty");
        std::fs::write(&path, b"").unwrap();
        // Frozen SHA-256 of the empty string.
        assert_eq!(
            sha256_hex_of_file(&path).unwrap(),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
        std::fs::write(&path, b"abc").unwrap();
        assert_eq!(
            sha256_hex_of_file(&path).unwrap(),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
