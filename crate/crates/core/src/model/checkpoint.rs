//! Binary model checkpoint, all integers and floats little-endian:
//!
//! ```text
//! "GKTM" | version u32 | features u32 | classes u32 | stages u32
//!        | widths u32 × stages | blocks u32 × stages | param_count u32
//!        | per param: name_len u32, name bytes, ndim u32, dims u32 × ndim, values f64 × numel
//! ```

use std::path::Path;

use super::{ModelParams, NetworkConfig};
use crate::codec::{len_u32, read_file, write_atomic, ByteReader};
use crate::error::Result;
use crate::tensor::{ParamSet, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"GKTM";
pub const CHECKPOINT_VERSION: u32 = 1;
const WHAT: &str = "model checkpoint";

pub(crate) fn encode(model: &ModelParams) -> Result<Vec<u8>> {
    let cfg = model.config();
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    let put = |v: usize, out: &mut Vec<u8>| -> Result<()> {
        out.extend_from_slice(&len_u32(v, WHAT)?.to_le_bytes());
        Ok(())
    };
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    put(cfg.features, &mut out)?;
    put(cfg.classes, &mut out)?;
    put(cfg.stages(), &mut out)?;
    for &w in &cfg.stage_widths {
        put(w, &mut out)?;
    }
    for &l in &cfg.stage_blocks {
        put(l, &mut out)?;
    }
    put(model.params().len(), &mut out)?;
    for (_, name, tensor) in model.params().iter() {
        put(name.len(), &mut out)?;
        out.extend_from_slice(name.as_bytes());
        put(tensor.shape().len(), &mut out)?;
        for &d in tensor.shape() {
            put(d, &mut out)?;
        }
        for v in tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub(crate) fn decode(bytes: &[u8]) -> Result<ModelParams> {
    let mut r = ByteReader::new(bytes, WHAT);
    r.expect_magic(CHECKPOINT_MAGIC)?;
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(r.error(format!("unsupported version {version}")));
    }
    let features = r.u32()? as usize;
    let classes = r.u32()? as usize;
    let stages = r.u32()? as usize;
    if stages > bytes.len() / 8 {
        return Err(r.error(format!("stage count {stages} exceeds file size")));
    }
    let stage_widths = (0..stages)
        .map(|_| r.u32().map(|v| v as usize))
        .collect::<Result<_>>()?;
    let stage_blocks = (0..stages)
        .map(|_| r.u32().map(|v| v as usize))
        .collect::<Result<_>>()?;
    let config = NetworkConfig {
        features,
        classes,
        stage_widths,
        stage_blocks,
    };
    let count = r.u32()? as usize;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|e| r.error(format!("parameter name is not UTF-8: {e}")))?
            .to_owned();
        let ndim = r.u32()? as usize;
        let shape = (0..ndim)
            .map(|_| r.u32().map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
        let numel = numel.filter(|&n| n <= bytes.len() / 8).ok_or_else(|| {
            r.error(format!(
                "parameter {name} shape {shape:?} exceeds file size"
            ))
        })?;
        let data = (0..numel).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let tensor =
            Tensor::new(shape, data).map_err(|e| r.error(format!("parameter {name}: {e}")))?;
        params
            .insert(name, tensor)
            .map_err(|e| r.error(e.to_string()))?;
    }
    r.finish()?;
    ModelParams::from_params(config, params)
}

pub fn save_checkpoint(model: &ModelParams, path: &Path) -> Result<()> {
    write_atomic(path, &encode(model)?)
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    decode(&read_file(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use proptest::prelude::*;

    fn model(seed: u64) -> ModelParams {
        let cfg = NetworkConfig {
            features: 3,
            classes: 4,
            stage_widths: vec![5, 6],
            stage_blocks: vec![2, 1],
        };
        ModelParams::build(&cfg, seed).unwrap()
    }

    #[test]
    fn header_layout() {
        let bytes = encode(&model(0)).unwrap();
        assert_eq!(&bytes[..4], b"GKTM");
        assert_eq!(
            u32::from_le_bytes(bytes[4..8].try_into().unwrap()),
            CHECKPOINT_VERSION
        );
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 3);
    }

    #[test]
    fn file_round_trip_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.gktm");
        let m = model(4);
        save_checkpoint(&m, &path).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), m);

        let bytes = std::fs::read(&path).unwrap();
        for cut in [0, 3, 10, bytes.len() / 2, bytes.len() - 1] {
            std::fs::write(&path, &bytes[..cut]).unwrap();
            assert!(
                matches!(load_checkpoint(&path), Err(Error::Format { .. })),
                "cut {cut}"
            );
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode(&extra).is_err());
        let mut bad = bytes;
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(seed in any::<u64>()) {
            let mut m = model(seed);
            // include awkward values: signed zero and subnormals
            m.params_mut().get_mut(crate::tensor::ParamId(0)).data_mut()[0] = -0.0;
            m.params_mut().get_mut(crate::tensor::ParamId(0)).data_mut()[1] = 5e-324;
            let back = decode(&encode(&m).unwrap()).unwrap();
            for ((_, _, a), (_, _, b)) in m.params().iter().zip(back.params().iter()) {
                let ab: Vec<u64> = a.data().iter().map(|v| v.to_bits()).collect();
                let bb: Vec<u64> = b.data().iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(ab, bb);
            }
            prop_assert_eq!(back.config(), m.config());
        }
    }
}
