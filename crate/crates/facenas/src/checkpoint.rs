//! Flat binary tensor files.
//!
//! Layout, all little-endian: the magic `FNCK`, a `u32` version, a `u64`
//! tensor count, then per tensor a `u32` name length and UTF-8 name, a `u32`
//! rank, `rank` `u64` dimensions and the values as `f64`.

use std::fs;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use facenas_core::tensor::{ParamSet, Tensor};

pub const MAGIC: &[u8; 4] = b"FNCK";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint (bad magic)")]
    Magic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint does not match the model: {0}")]
    Mismatch(String),
}

pub type Tensors = Vec<(String, Tensor)>;

pub fn write_tensors<W: Write>(mut w: W, tensors: &[(String, Tensor)]) -> Result<(), CheckpointError> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(tensors.len() as u64).to_le_bytes())?;
    for (name, t) in tensors {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.dims().len() as u32).to_le_bytes())?;
        for &d in t.dims() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_array<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N], CheckpointError> {
    let mut b = [0u8; N];
    r.read_exact(&mut b).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => CheckpointError::Corrupt("truncated".into()),
        _ => CheckpointError::Io(e),
    })?;
    Ok(b)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, CheckpointError> {
    Ok(u32::from_le_bytes(read_array(r)?))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64, CheckpointError> {
    Ok(u64::from_le_bytes(read_array(r)?))
}

pub fn read_tensors<R: Read>(mut r: R) -> Result<Tensors, CheckpointError> {
    if &read_array::<4, _>(&mut r)? != MAGIC {
        return Err(CheckpointError::Magic);
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let count = read_u64(&mut r)?;
    let mut out = Vec::new();
    for _ in 0..count {
        let len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)
            .map_err(|_| CheckpointError::Corrupt("truncated name".into()))?;
        let name = String::from_utf8(name).map_err(|_| CheckpointError::Corrupt("name is not UTF-8".into()))?;
        let rank = read_u32(&mut r)? as usize;
        let dims = (0..rank)
            .map(|_| read_u64(&mut r).map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let numel = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| CheckpointError::Corrupt(format!("`{name}` has an overflowing shape")))?;
        let mut data = Vec::with_capacity(numel.min(1 << 24));
        for _ in 0..numel {
            data.push(f64::from_le_bytes(read_array(&mut r)?));
        }
        let t = Tensor::new(dims, data).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        out.push((name, t));
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(CheckpointError::Corrupt("trailing bytes".into()));
    }
    Ok(out)
}

pub fn save(path: &Path, tensors: &[(String, Tensor)]) -> Result<(), CheckpointError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    // write then rename, so a crash never leaves a half-written file behind
    let tmp = path.with_extension("ckpt.tmp");
    write_tensors(BufWriter::new(fs::File::create(&tmp)?), tensors)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Tensors, CheckpointError> {
    read_tensors(BufReader::new(fs::File::open(path)?))
}

pub fn params_to_tensors(params: &ParamSet, prefix: &str) -> Tensors {
    params
        .iter()
        .map(|p| (format!("{prefix}{}", p.name), p.value.clone()))
        .collect()
}

/// Copies values into `params`; names (after `prefix`) and shapes must match
/// one to one.
pub fn load_into_params(
    params: &mut ParamSet,
    tensors: &[(String, Tensor)],
    prefix: &str,
) -> Result<(), CheckpointError> {
    let mine: Vec<_> = tensors.iter().filter(|(n, _)| n.starts_with(prefix)).collect();
    if mine.len() != params.len() {
        return Err(CheckpointError::Mismatch(format!(
            "{} tensors under `{prefix}` for {} parameters",
            mine.len(),
            params.len()
        )));
    }
    for (p, (name, t)) in params.iter_mut().zip(mine) {
        if name[prefix.len()..] != p.name || t.dims() != p.value.dims() {
            return Err(CheckpointError::Mismatch(format!(
                "`{name}` {:?} does not fit `{}` {:?}",
                t.dims(),
                p.name,
                p.value.dims()
            )));
        }
        p.value = t.clone();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Tensors {
        vec![
            (
                "w".into(),
                Tensor::new(vec![2, 3], vec![1.0, -2.5, 3.0, f64::MIN_POSITIVE, 0.1, -0.0]).unwrap(),
            ),
            ("s".into(), Tensor::scalar(42.0)),
            ("empty".into(), Tensor::new(vec![0], vec![]).unwrap()),
        ]
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mut buf = Vec::new();
        write_tensors(&mut buf, &sample()).unwrap();
        let back = read_tensors(&buf[..]).unwrap();
        assert_eq!(back.len(), 3);
        for ((n0, t0), (n1, t1)) in sample().iter().zip(&back) {
            assert_eq!(n0, n1);
            assert_eq!(t0.dims(), t1.dims());
            let a: Vec<u64> = t0.data().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u64> = t1.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn header_layout() {
        let mut buf = Vec::new();
        write_tensors(&mut buf, &[("a".into(), Tensor::vector(vec![1.0]))]).unwrap();
        assert_eq!(&buf[..4], b"FNCK");
        assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(buf[8..16].try_into().unwrap()), 1);
        // name len, name, rank, one dim, one value
        assert_eq!(buf.len(), 16 + 4 + 1 + 4 + 8 + 8);
        assert_eq!(f64::from_le_bytes(buf[buf.len() - 8..].try_into().unwrap()), 1.0);
    }

    #[test]
    fn damaged_files_are_rejected() {
        let mut buf = Vec::new();
        write_tensors(&mut buf, &sample()).unwrap();
        assert!(matches!(
            read_tensors(&buf[..buf.len() - 3]),
            Err(CheckpointError::Corrupt(_))
        ));
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_tensors(&bad[..]), Err(CheckpointError::Magic)));
        let mut bad = buf.clone();
        bad[4] = 9;
        assert!(matches!(read_tensors(&bad[..]), Err(CheckpointError::Version(9))));
        let mut long = buf;
        long.push(0);
        assert!(read_tensors(&long[..]).is_err());
    }

    #[test]
    fn params_load_checks_layout() {
        let mut ps = ParamSet::new();
        ps.add("a", Tensor::vector(vec![1.0, 2.0]));
        ps.add("b", Tensor::scalar(3.0));
        let saved = params_to_tensors(&ps, "x.");
        let mut other = ParamSet::new();
        other.add("a", Tensor::vector(vec![0.0, 0.0]));
        other.add("b", Tensor::scalar(0.0));
        load_into_params(&mut other, &saved, "x.").unwrap();
        assert_eq!(other.flat_values(), vec![1.0, 2.0, 3.0]);

        let mut wrong = ParamSet::new();
        wrong.add("a", Tensor::vector(vec![0.0; 3]));
        wrong.add("b", Tensor::scalar(0.0));
        assert!(load_into_params(&mut wrong, &saved, "x.").is_err());
        assert!(load_into_params(&mut other, &saved, "y.").is_err());
    }
}
