//! `ONHM` model checkpoints.
//!
//! Layout, little-endian: magic `ONHM`, version u32, entry count u32, then
//! per entry a u16 name length, the UTF-8 name, rank u8, rank×u32 dims and
//! the f32 values. A u32 length and a UTF-8 `key = value` block with the
//! model configuration and evaluation settings follow.

use std::fs;
use std::path::Path;

use onh_core::pointnet::{check_params, ModelParams, PointNetConfig};
use onh_core::Tensor;

use crate::bytes::Reader;
use crate::config::{model_to_text, parse_pairs, set_model_key};
use crate::error::{io_err, Error, Result};

pub const MAGIC: &[u8; 4] = b"ONHM";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: PointNetConfig,
    pub params: ModelParams,
    /// Coordinate scale of the feature encoding, µm per unit.
    pub scale_um: f64,
    /// Seed of the fixed evaluation subsets.
    pub sample_seed: u64,
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(ck.params.len() as u32).to_le_bytes());
    for (name, t) in ck.params.iter() {
        let len = u16::try_from(name.len()).map_err(|_| Error::Format {
            offset: out.len() as u64,
            message: format!("parameter name of {} bytes", name.len()),
        })?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.rank() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut text = model_to_text(&ck.config);
    text += &format!("scale_um = {}\nsample_seed = {}\n", ck.scale_um, ck.sample_seed);
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    Ok(out)
}

pub fn decode_checkpoint(buf: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader::new(buf);
    r.header(MAGIC, VERSION)?;
    let count = r.u32("entry count")?;
    let mut params = ModelParams::new();
    for _ in 0..count {
        let len = r.u16("name length")? as usize;
        let at = r.offset();
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::Format {
                offset: at,
                message: "parameter name is not UTF-8".into(),
            })?
            .to_string();
        if params.get(&name).is_ok() {
            return Err(Error::Format {
                offset: at,
                message: format!("duplicate parameter {name}"),
            });
        }
        let rank = r.u8("rank")? as usize;
        let dims_at = r.offset();
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32("dims")? as usize);
        }
        let bytes = dims
            .iter()
            .try_fold(4usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Format {
                offset: dims_at,
                message: format!("dims {dims:?} overflow"),
            })?;
        let raw = r.take(bytes, "values")?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params.insert(name, Tensor::new(&dims, data)?);
    }
    let len = r.u32("config length")? as usize;
    let at = r.offset();
    let text = std::str::from_utf8(r.take(len, "config")?).map_err(|_| Error::Format {
        offset: at,
        message: "config block is not UTF-8".into(),
    })?;
    if r.remaining() != 0 {
        return r.fail(format!("{} trailing bytes", r.remaining()));
    }
    let mut config = PointNetConfig::default();
    let (mut scale_um, mut sample_seed) = (None, None);
    for (line, k, v) in parse_pairs(text)? {
        if set_model_key(&mut config, line, &k, &v)? {
            continue;
        }
        let bad = || Error::Config {
            line,
            message: format!("invalid checkpoint entry {k} = {v}"),
        };
        match k.as_str() {
            "scale_um" => scale_um = Some(v.parse().map_err(|_| bad())?),
            "sample_seed" => sample_seed = Some(v.parse().map_err(|_| bad())?),
            _ => return Err(bad()),
        }
    }
    let missing = |k: &str| Error::Config {
        line: 0,
        message: format!("checkpoint lacks {k}"),
    };
    config.validate()?;
    check_params(&config, &params)?;
    Ok(Checkpoint {
        config,
        params,
        scale_um: scale_um.ok_or_else(|| missing("scale_um"))?,
        sample_seed: sample_seed.ok_or_else(|| missing("sample_seed"))?,
    })
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    fs::write(path, encode_checkpoint(ck)?).map_err(io_err(path))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let buf = fs::read(path).map_err(io_err(path))?;
    decode_checkpoint(&buf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use onh_core::pointnet::init_params;

    fn tiny() -> Checkpoint {
        let config = PointNetConfig::tiny();
        Checkpoint {
            params: init_params(&config, 5).unwrap(),
            config,
            scale_um: 1000.0,
            sample_seed: u64::MAX - 3,
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let ck = tiny();
        let bytes = encode_checkpoint(&ck).unwrap();
        let back = decode_checkpoint(&bytes).unwrap();
        for ((na, a), (nb, b)) in ck.params.iter().zip(back.params.iter()) {
            assert_eq!(na, nb);
            assert_eq!(a.shape(), b.shape());
            assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert_eq!(back, ck);
        assert_eq!(encode_checkpoint(&back).unwrap(), bytes);
    }

    #[test]
    fn version_and_shape_mismatch_are_errors() {
        let mut bytes = encode_checkpoint(&tiny()).unwrap();
        bytes[4] = 7;
        assert!(matches!(
            decode_checkpoint(&bytes),
            Err(Error::Version { found: 7, .. })
        ));
        let mut ck = tiny();
        ck.config.head_widths = vec![8, 5];
        let bytes = encode_checkpoint(&ck).unwrap();
        assert!(matches!(decode_checkpoint(&bytes), Err(Error::Core(_))));
        let bytes = encode_checkpoint(&tiny()).unwrap();
        assert!(matches!(
            decode_checkpoint(&bytes[..bytes.len() / 2]),
            Err(Error::Format { .. })
        ));
    }
}
