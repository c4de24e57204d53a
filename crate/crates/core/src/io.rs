//! On-disk formats: VCUBE tensors, model checkpoints, PGM previews and flat
//! `key = value` configuration files.
//!
//! VCUBE layout (little-endian):
//!
//! ```text
//! "VCB1" | rank: u32 | dims: rank × u32 | payload: product(dims) × f32, row-major
//! ```
//!
//! Checkpoint layout (little-endian):
//!
//! ```text
//! "ELPK" | version: u32 = 1
//! single: u32 | ensemble: u32 | frames: u32 | n_widths: u32 | widths: n_widths × u32
//! convs_per_scale: u32 | kernel: u32 | seed: u64 | steps: u64
//! n_params: u32 | n_params × (name_len: u32 | name: utf-8 | VCUBE record)
//! ```
//!
//! Every write goes to a temporary file in the destination directory and is
//! renamed into place, so a reader never observes a partial file.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::priors::CnnConfig;
use crate::tensor::Tensor;
use crate::unfolding::ElpModel;

const VCUBE_MAGIC: &[u8; 4] = b"VCB1";
const CKPT_MAGIC: &[u8; 4] = b"ELPK";
const CKPT_VERSION: u32 = 1;

/// Writes `bytes` to `path` through a temporary file and an atomic rename.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(path, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Serializes `t` as one VCUBE record.
pub fn encode_vcube(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * t.rank() + 4 * t.len());
    out.extend_from_slice(VCUBE_MAGIC);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.dims() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(format!(
                "truncated: needed {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            )),
        }
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn vcube(&mut self) -> std::result::Result<Tensor, String> {
        if self.take(4)? != VCUBE_MAGIC {
            return Err("bad magic, expected VCB1".into());
        }
        let rank = self.u32()? as usize;
        if rank > 8 {
            return Err(format!("implausible rank {rank}"));
        }
        let dims = (0..rank)
            .map(|_| self.u32().map(|d| d as usize))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let count = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or("dimension product overflows")?;
        let payload = self.take(count.checked_mul(4).ok_or("payload size overflows")?)?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        Tensor::new(dims, data).map_err(|e| e.to_string())
    }
}

/// Parses a complete VCUBE file; trailing bytes are an error.
pub fn decode_vcube(bytes: &[u8]) -> std::result::Result<Tensor, String> {
    let mut c = Cursor { bytes, pos: 0 };
    let t = c.vcube()?;
    if c.pos != bytes.len() {
        return Err(format!("{} trailing bytes after payload", bytes.len() - c.pos));
    }
    Ok(t)
}

pub fn write_vcube(path: &Path, t: &Tensor) -> Result<()> {
    atomic_write(path, &encode_vcube(t))
}

pub fn read_vcube(path: &Path) -> Result<Tensor> {
    decode_vcube(&read_file(path)?).map_err(|msg| Error::Format {
        path: path.to_path_buf(),
        msg,
    })
}

/// Rounds every element through `f32`, the on-disk precision.
pub fn quantize_f32(t: &Tensor) -> Tensor {
    t.map(|v| v as f32 as f64)
}

/// A trained model together with its provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ElpModel,
    pub seed: u64,
    pub steps: u64,
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let m = &ckpt.model;
    let cfg = m.config();
    let mut out = Vec::new();
    let u32 = |out: &mut Vec<u8>, v: usize| out.extend_from_slice(&(v as u32).to_le_bytes());
    out.extend_from_slice(CKPT_MAGIC);
    u32(&mut out, CKPT_VERSION as usize);
    u32(&mut out, m.single());
    u32(&mut out, m.ensemble());
    u32(&mut out, cfg.frames);
    u32(&mut out, cfg.widths.len());
    for &w in &cfg.widths {
        u32(&mut out, w);
    }
    u32(&mut out, cfg.convs_per_scale);
    u32(&mut out, cfg.kernel);
    out.extend_from_slice(&ckpt.seed.to_le_bytes());
    out.extend_from_slice(&ckpt.steps.to_le_bytes());
    let params = m.params();
    u32(&mut out, params.len());
    for p in params {
        u32(&mut out, p.name.len());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&encode_vcube(&p.value));
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> std::result::Result<Checkpoint, String> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4)? != CKPT_MAGIC {
        return Err("bad magic, expected ELPK".into());
    }
    let version = c.u32()?;
    if version != CKPT_VERSION {
        return Err(format!("unsupported checkpoint version {version}"));
    }
    let single = c.u32()? as usize;
    let ensemble = c.u32()? as usize;
    let frames = c.u32()? as usize;
    let n_widths = c.u32()? as usize;
    if n_widths > 16 {
        return Err(format!("implausible scale count {n_widths}"));
    }
    let widths = (0..n_widths)
        .map(|_| c.u32().map(|w| w as usize))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let convs_per_scale = c.u32()? as usize;
    let kernel = c.u32()? as usize;
    let seed = c.u64()?;
    let steps = c.u64()?;
    let config = CnnConfig {
        frames,
        widths,
        convs_per_scale,
        kernel,
    };
    let mut model = ElpModel::zeroed(config, single, ensemble).map_err(|e| e.to_string())?;
    let count = c.u32()? as usize;
    let mut params = model.params_mut();
    if count != params.len() {
        return Err(format!(
            "checkpoint holds {count} parameters, its schedule needs {}",
            params.len()
        ));
    }
    for p in params.iter_mut() {
        let len = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(len)?).map_err(|e| e.to_string())?;
        if name != p.name {
            return Err(format!("expected parameter `{}`, found `{name}`", p.name));
        }
        let value = c.vcube()?;
        if value.dims() != p.value.dims() {
            return Err(format!(
                "parameter `{name}` has dims {:?}, schedule expects {:?}",
                value.dims(),
                p.value.dims()
            ));
        }
        p.value = value;
    }
    if c.pos != bytes.len() {
        return Err(format!("{} trailing bytes", bytes.len() - c.pos));
    }
    Ok(Checkpoint { model, seed, steps })
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    atomic_write(path, &encode_checkpoint(ckpt))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&read_file(path)?).map_err(|msg| Error::Format {
        path: path.to_path_buf(),
        msg,
    })
}

/// Maps `[0, 1]` to `0..=255` with round-half-up, clamping outside values.
pub fn to_gray8(v: f64) -> u8 {
    let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
    (v * 255.0 + 0.5).floor() as u8
}

/// Binary (P5) PGM bytes for a `[H, W]` frame.
pub fn encode_pgm(frame: &Tensor) -> Result<Vec<u8>> {
    if frame.rank() != 2 {
        return Err(Error::shape(format!("PGM needs [H, W], got {:?}", frame.dims())));
    }
    let mut out = format!("P5\n{} {}\n255\n", frame.dims()[1], frame.dims()[0]).into_bytes();
    out.extend(frame.data().iter().map(|&v| to_gray8(v)));
    Ok(out)
}

pub fn write_pgm(path: &Path, frame: &Tensor) -> Result<()> {
    atomic_write(path, &encode_pgm(frame)?)
}

/// Parses `key = value` lines. Blank lines and `#` comments are skipped;
/// duplicate keys and lines without `=` are errors carrying the line number.
pub fn parse_kv(text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut out: Vec<(usize, String, String)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (k, v) = content.split_once('=').ok_or_else(|| Error::Parse {
            line,
            msg: format!("expected `key = value`, got `{content}`"),
        })?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::Parse {
                line,
                msg: "empty key".into(),
            });
        }
        if out.iter().any(|(_, existing, _)| existing == k) {
            return Err(Error::Parse {
                line,
                msg: format!("duplicate key `{k}`"),
            });
        }
        out.push((line, k.to_string(), v.to_string()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    #[test]
    fn vcube_byte_layout() {
        let t = Tensor::new(vec![1, 2], vec![1.0, -2.5]).unwrap();
        let b = encode_vcube(&t);
        let mut expect = b"VCB1".to_vec();
        expect.extend_from_slice(&[2, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0]);
        expect.extend_from_slice(&1.0f32.to_le_bytes());
        expect.extend_from_slice(&(-2.5f32).to_le_bytes());
        assert_eq!(b, expect);
    }

    #[test]
    fn vcube_rejects_damage() {
        let t = Tensor::filled(&[2, 3], 0.5);
        let b = encode_vcube(&t);
        assert!(decode_vcube(&b[..b.len() - 1]).is_err());
        let mut extra = b.clone();
        extra.push(0);
        assert!(decode_vcube(&extra).is_err());
        let mut magic = b;
        magic[0] = b'X';
        assert!(decode_vcube(&magic).is_err());
    }

    #[test]
    fn file_errors_name_the_path() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("nope.vcube");
        let err = read_vcube(&missing).unwrap_err();
        assert!(err.to_string().contains("nope.vcube"));
        let bad = dir.path().join("bad.vcube");
        std::fs::write(&bad, b"VCB1\x01").unwrap();
        assert!(matches!(read_vcube(&bad), Err(Error::Format { .. })));
        let unwritable = dir.path().join("no/such/dir/x.vcube");
        assert!(matches!(write_vcube(&unwritable, &Tensor::scalar(1.0)), Err(Error::Io { .. })));
    }

    #[test]
    fn atomic_write_leaves_no_temporaries() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.vcube");
        write_vcube(&p, &Tensor::filled(&[2, 2], 0.25)).unwrap();
        write_vcube(&p, &Tensor::filled(&[3, 2], 0.5)).unwrap();
        assert_eq!(read_vcube(&p).unwrap().dims(), &[3, 2]);
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact_in_f32() {
        let mut rng = Rng::new(1);
        let cfg = CnnConfig {
            frames: 3,
            widths: vec![2, 4],
            convs_per_scale: 1,
            kernel: 3,
        };
        let model = ElpModel::new(cfg, 2, 1, &mut rng).unwrap();
        let ckpt = Checkpoint {
            model,
            seed: 42,
            steps: 7,
        };
        let back = decode_checkpoint(&encode_checkpoint(&ckpt)).unwrap();
        assert_eq!((back.seed, back.steps), (42, 7));
        for (a, b) in back.model.params().iter().zip(ckpt.model.params()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value, quantize_f32(&b.value));
        }
        assert_eq!(encode_checkpoint(&back), encode_checkpoint(&ckpt));
    }

    #[test]
    fn checkpoint_damage_is_reported() {
        let mut rng = Rng::new(2);
        let cfg = CnnConfig {
            frames: 2,
            widths: vec![2],
            convs_per_scale: 1,
            kernel: 3,
        };
        let model = ElpModel::new(cfg, 1, 0, &mut rng).unwrap();
        let bytes = encode_checkpoint(&Checkpoint {
            model,
            seed: 0,
            steps: 0,
        });
        assert!(decode_checkpoint(&bytes[..bytes.len() - 3]).is_err());
        let mut wrong_frames = bytes.clone();
        wrong_frames[16] = 5;
        assert!(decode_checkpoint(&wrong_frames).unwrap_err().contains("dims"));
    }

    #[test]
    fn pgm_mapping() {
        assert_eq!(to_gray8(0.0), 0);
        assert_eq!(to_gray8(1.0), 255);
        assert_eq!(to_gray8(-0.3), 0);
        assert_eq!(to_gray8(1.7), 255);
        assert_eq!(to_gray8(0.5), 128);
        assert_eq!(to_gray8(1.5 / 255.0), 2);
        let f = Tensor::new(vec![1, 2], vec![0.0, 1.0]).unwrap();
        assert_eq!(encode_pgm(&f).unwrap(), b"P5\n2 1\n255\n\x00\xff".to_vec());
    }

    #[test]
    fn kv_parsing() {
        let kv = parse_kv("# header\n a = 1 \n\nb=x # trailing\n").unwrap();
        assert_eq!(kv, vec![(2, "a".into(), "1".into()), (4, "b".into(), "x".into())]);
        assert!(matches!(parse_kv("a=1\nbroken\n"), Err(Error::Parse { line: 2, .. })));
        assert!(matches!(parse_kv("a=1\na=2"), Err(Error::Parse { line: 2, .. })));
        assert!(matches!(parse_kv(" = 3"), Err(Error::Parse { line: 1, .. })));
    }

    proptest! {
        #[test]
        fn vcube_round_trip(dims in proptest::collection::vec(1usize..5, 1..4), seed in any::<u64>()) {
            let mut rng = Rng::new(seed);
            let t = Tensor::from_fn(&dims, |_| rng.normal());
            let back = decode_vcube(&encode_vcube(&t)).unwrap();
            prop_assert_eq!(back.dims(), t.dims());
            for (a, b) in back.data().iter().zip(t.data()) {
                prop_assert!((a - b).abs() <= b.abs() * 1e-7);
            }
        }
    }
}
