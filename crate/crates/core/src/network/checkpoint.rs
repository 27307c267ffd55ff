//! Binary checkpoint format (all integers and floats little-endian):
//!
//! ```text
//! "HPSS" | version u16
//! growth_rate u32 | layers_per_block u32 | depth u32 | final_block_layers u32
//! leaky_alpha f64 | stats.min f64 | stats.max f64
//! repeated until EOF:
//!   name_len u16 | name utf-8 | dtype u8 | rank u8 | dims u32[rank] | payload
//! ```
//!
//! dtype 0 is f64, dtype 1 is f32. Batch-norm running statistics are stored
//! like any other tensor and recognised by their `running_*` suffix.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::params::{ParamKind, ParamStore};
use super::{NetworkConfig, ThreeWayMDenseNet};
use crate::dsp::GlobalStats;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"HPSS";
pub const CHECKPOINT_VERSION: u16 = 1;
const DTYPE_F64: u8 = 0;
const DTYPE_F32: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: NetworkConfig,
    pub stats: GlobalStats,
    pub params: ParamStore,
}

fn kind_for(name: &str) -> ParamKind {
    if name.ends_with(".running_mean") || name.ends_with(".running_var") {
        ParamKind::RunningStat
    } else {
        ParamKind::Trainable
    }
}

fn u32_field(name: &str, v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Checkpoint(format!("{name} {v} does not fit in u32")))
}

pub fn write_checkpoint(mut w: impl Write, ckpt: &Checkpoint) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    let c = &ckpt.config;
    for (name, v) in [
        ("growth_rate", c.growth_rate),
        ("layers_per_block", c.layers_per_block),
        ("depth", c.depth),
        ("final_block_layers", c.final_block_layers),
    ] {
        w.write_all(&u32_field(name, v)?.to_le_bytes())?;
    }
    for v in [c.leaky_alpha, ckpt.stats.min_val, ckpt.stats.max_val] {
        w.write_all(&v.to_le_bytes())?;
    }
    for (name, p) in ckpt.params.iter() {
        let bytes = name.as_bytes();
        let len = u16::try_from(bytes.len()).map_err(|_| Error::Checkpoint(format!("name too long: {name}")))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&[DTYPE_F64, p.tensor.rank() as u8])?;
        for &d in p.tensor.shape() {
            w.write_all(&u32_field("dim", d)?.to_le_bytes())?;
        }
        for v in p.tensor.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_array<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => Error::Checkpoint("truncated file".into()),
        _ => Error::Io(e),
    })?;
    Ok(buf)
}

fn read_u32(r: &mut impl Read) -> Result<usize> {
    Ok(u32::from_le_bytes(read_array(r)?) as usize)
}

fn read_f64(r: &mut impl Read) -> Result<f64> {
    Ok(f64::from_le_bytes(read_array(r)?))
}

/// Reads the next record-length prefix, or `None` at a clean end of file.
fn read_name_len(r: &mut impl Read) -> Result<Option<u16>> {
    let mut buf = [0u8; 2];
    let mut got = 0;
    while got < 2 {
        match r.read(&mut buf[got..])? {
            0 if got == 0 => return Ok(None),
            0 => return Err(Error::Checkpoint("truncated record header".into())),
            n => got += n,
        }
    }
    Ok(Some(u16::from_le_bytes(buf)))
}

pub fn read_checkpoint(mut r: impl Read) -> Result<Checkpoint> {
    let magic: [u8; 4] = read_array(&mut r)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic bytes".into()));
    }
    let version = u16::from_le_bytes(read_array(&mut r)?);
    if version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersion(version));
    }
    let config = NetworkConfig {
        growth_rate: read_u32(&mut r)?,
        layers_per_block: read_u32(&mut r)?,
        depth: read_u32(&mut r)?,
        final_block_layers: read_u32(&mut r)?,
        leaky_alpha: read_f64(&mut r)?,
        ..NetworkConfig::default()
    };
    let stats = GlobalStats { min_val: read_f64(&mut r)?, max_val: read_f64(&mut r)? };

    let mut params = ParamStore::new();
    while let Some(len) = read_name_len(&mut r)? {
        let mut name = vec![0u8; len as usize];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| Error::Checkpoint("tensor name is not utf-8".into()))?;
        let [dtype, rank] = read_array(&mut r)?;
        let dims = (0..rank).map(|_| read_u32(&mut r)).collect::<Result<Vec<_>>>()?;
        let numel: usize = dims.iter().product();
        let data = match dtype {
            DTYPE_F64 => (0..numel).map(|_| read_f64(&mut r)).collect::<Result<Vec<_>>>()?,
            DTYPE_F32 => {
                (0..numel).map(|_| Ok(f32::from_le_bytes(read_array(&mut r)?) as f64)).collect::<Result<Vec<_>>>()?
            }
            other => return Err(Error::Checkpoint(format!("unknown dtype tag {other} for `{name}`"))),
        };
        let kind = kind_for(&name);
        params.insert(name, Tensor::new(dims, data)?, kind)?;
    }
    let ckpt = Checkpoint { config, stats, params };
    ThreeWayMDenseNet::new(ckpt.config.clone())?.check_params(&ckpt.params)?;
    Ok(ckpt)
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut w, ckpt)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    read_checkpoint(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let config = NetworkConfig::small();
        let net = ThreeWayMDenseNet::new(config.clone()).unwrap();
        Checkpoint { config, stats: GlobalStats { min_val: 0.0, max_val: 4.5 }, params: net.init_params(3) }
    }

    #[test]
    fn round_trip_is_exact() {
        let ckpt = sample();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &ckpt).unwrap();
        assert_eq!(&buf[..4], b"HPSS");
        assert_eq!(u16::from_le_bytes([buf[4], buf[5]]), 1);
        assert_eq!(read_checkpoint(buf.as_slice()).unwrap(), ckpt);
    }

    #[test]
    fn header_layout() {
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &sample()).unwrap();
        let u32_at = |o: usize| u32::from_le_bytes(buf[o..o + 4].try_into().unwrap());
        assert_eq!([u32_at(6), u32_at(10), u32_at(14), u32_at(18)], [2, 2, 2, 2]);
        assert_eq!(f64::from_le_bytes(buf[22..30].try_into().unwrap()), 0.01);
        assert_eq!(f64::from_le_bytes(buf[38..46].try_into().unwrap()), 4.5);
        // first record name length follows the config block
        let name_len = u16::from_le_bytes([buf[46], buf[47]]) as usize;
        assert_eq!(&buf[48..48 + name_len], b"branch_3x3.enc0.layer1.conv.weight");
    }

    #[test]
    fn unknown_version_rejected() {
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &sample()).unwrap();
        buf[4] = 9;
        assert!(matches!(read_checkpoint(buf.as_slice()), Err(Error::CheckpointVersion(9))));
    }

    #[test]
    fn truncation_detected() {
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &sample()).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(read_checkpoint(buf.as_slice()).is_err());
        assert!(read_checkpoint(&b"HPSX\x01\x00"[..]).is_err());
    }
}
