//! Binary formats for memory banks (`.mrb`), metric weights (`.mrw`) and
//! anomaly maps (`.amap`). All little-endian, f32 payloads.
//!
//! ```text
//! .mrb   "MRADBK01" d u32, N_c u32, N_p u32, tag_len u16, tag bytes,
//!        K_cls N_c·d, V_cls N_c·2, K_pat N_p·d, V_pat N_p·2
//! .mrw   "MRADWT01" d u32, Wq_cls d·d, Wk_cls d·d, Wq_seg d·d, Wk_seg d·d
//! .amap  H u32, W u32, scores H·W
//! ```

use std::path::Path;

use ndarray::Array2;

use crate::codec::{dim_u32, put_f32s, put_u16, put_u32, read_file, write_atomic, ByteReader};
use crate::error::{Error, Result};
use crate::types::{AnomalyMap, HeadWeights, Label, MemoryBank, MetricWeights};

pub const BANK_MAGIC: &[u8; 8] = b"MRADBK01";
pub const WEIGHTS_MAGIC: &[u8; 8] = b"MRADWT01";

pub fn encode_bank(bank: &MemoryBank) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(BANK_MAGIC);
    put_u32(&mut out, dim_u32("d", bank.d())?);
    put_u32(&mut out, dim_u32("N_c", bank.n_cls())?);
    put_u32(&mut out, dim_u32("N_p", bank.n_patch())?);
    let tag = bank.source_tag().as_bytes();
    put_u16(
        &mut out,
        u16::try_from(tag.len()).map_err(|_| Error::IdTooLong(tag.len()))?,
    );
    out.extend_from_slice(tag);
    for (keys, values) in [
        (bank.cls_keys(), bank.cls_values()),
        (bank.patch_keys(), bank.patch_values()),
    ] {
        put_f32s(&mut out, keys.iter());
        for v in values {
            let [n, a] = v.one_hot();
            put_f32s(&mut out, &[n as f32, a as f32]);
        }
    }
    Ok(out)
}

pub fn decode_bank(bytes: &[u8]) -> Result<MemoryBank> {
    let mut rd = ByteReader::new(bytes);
    rd.magic(BANK_MAGIC)?;
    let hdr = || "bank header".to_string();
    let d = rd.u32(&hdr)? as usize;
    let n_cls = rd.u32(&hdr)? as usize;
    let n_patch = rd.u32(&hdr)? as usize;
    let tag_len = rd.u16(&hdr)? as usize;
    let tag = String::from_utf8_lossy(rd.take(tag_len, &hdr)?).into_owned();

    let mut level = |name: &'static str, n: usize| -> Result<(Array2<f32>, Vec<Label>)> {
        let keys = rd.f32s(n * d, &|| format!("{name} keys"))?;
        let raw = rd.f32s(n * 2, &|| format!("{name} values"))?;
        let values = raw
            .chunks_exact(2)
            .enumerate()
            .map(|(row, c)| {
                Label::from_one_hot([c[0], c[1]]).ok_or_else(|| Error::InvalidOneHot {
                    context: name.into(),
                    row,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let keys = Array2::from_shape_vec((n, d), keys).expect("length checked by reader");
        Ok((keys, values))
    };
    let (ck, cv) = level("image-level", n_cls)?;
    let (pk, pv) = level("patch-level", n_patch)?;
    rd.finish()?;
    Ok(MemoryBank::new(ck, cv, pk, pv)?.with_source_tag(tag))
}

pub fn save_bank(bank: &MemoryBank, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &encode_bank(bank)?)
}

pub fn load_bank(path: impl AsRef<Path>) -> Result<MemoryBank> {
    decode_bank(&read_file(path.as_ref())?)
}

pub fn encode_weights(weights: &MetricWeights) -> Result<Vec<u8>> {
    weights.validate()?;
    let mut out = Vec::new();
    out.extend_from_slice(WEIGHTS_MAGIC);
    put_u32(&mut out, dim_u32("d", weights.d())?);
    for m in weights.matrices() {
        let row: Vec<f32> = m.iter().map(|&x| x as f32).collect();
        put_f32s(&mut out, &row);
    }
    Ok(out)
}

pub fn decode_weights(bytes: &[u8]) -> Result<MetricWeights> {
    let mut rd = ByteReader::new(bytes);
    rd.magic(WEIGHTS_MAGIC)?;
    let d = rd.u32(&|| "weights header".to_string())? as usize;
    if d == 0 {
        return Err(Error::OutOfRange("weights declare d = 0".into()));
    }
    let names = ["Wq_cls", "Wk_cls", "Wq_seg", "Wk_seg"];
    let mut mats = Vec::with_capacity(4);
    for name in names {
        let data = rd.f32s(d * d, &|| name.to_string())?;
        let m = Array2::from_shape_vec((d, d), data.into_iter().map(f64::from).collect())
            .expect("length checked by reader");
        mats.push(m);
    }
    rd.finish()?;
    let mut it = mats.into_iter();
    let mut next = || it.next().expect("four matrices");
    let weights = MetricWeights {
        cls: HeadWeights {
            query: next(),
            key: next(),
        },
        seg: HeadWeights {
            query: next(),
            key: next(),
        },
    };
    weights.validate()?;
    Ok(weights)
}

pub fn save_weights(weights: &MetricWeights, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &encode_weights(weights)?)
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<MetricWeights> {
    decode_weights(&read_file(path.as_ref())?)
}

pub fn encode_map(map: &AnomalyMap) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(8 + 4 * map.len());
    put_u32(&mut out, dim_u32("map height", map.height())?);
    put_u32(&mut out, dim_u32("map width", map.width())?);
    put_f32s(&mut out, map.scores());
    Ok(out)
}

pub fn decode_map(bytes: &[u8]) -> Result<AnomalyMap> {
    let mut rd = ByteReader::new(bytes);
    let hdr = || "anomaly map header".to_string();
    let h = rd.u32(&hdr)? as usize;
    let w = rd.u32(&hdr)? as usize;
    let scores = rd.f32s(h * w, &|| "anomaly map scores".to_string())?;
    rd.finish()?;
    AnomalyMap::new(h, w, scores)
}

pub fn save_map(map: &AnomalyMap, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &encode_map(map)?)
}

pub fn load_map(path: impl AsRef<Path>) -> Result<AnomalyMap> {
    decode_map(&read_file(path.as_ref())?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn three_entry_bank() -> MemoryBank {
        let s = std::f32::consts::FRAC_1_SQRT_2;
        let k = Array2::from_shape_vec((3, 2), vec![1.0, 0.0, 0.0, 1.0, s, s]).unwrap();
        MemoryBank::new(
            k.clone(),
            vec![Label::Normal, Label::Anomalous, Label::Normal],
            k,
            vec![Label::Anomalous, Label::Normal, Label::Normal],
        )
        .unwrap()
        .with_source_tag("unit")
    }

    #[test]
    fn bank_round_trip_is_bitwise() {
        let bank = three_entry_bank();
        let bytes = encode_bank(&bank).unwrap();
        let back = decode_bank(&bytes).unwrap();
        assert_eq!(back, bank);
        assert_eq!(encode_bank(&back).unwrap(), bytes);
    }

    #[test]
    fn loading_weights_file_as_bank_fails_on_magic() {
        let bytes = encode_weights(&MetricWeights::identity(3)).unwrap();
        assert!(matches!(decode_bank(&bytes), Err(Error::BadMagic { .. })));
        let bank_bytes = encode_bank(&three_entry_bank()).unwrap();
        assert!(matches!(
            decode_weights(&bank_bytes),
            Err(Error::BadMagic { .. })
        ));
    }

    #[test]
    fn identity_weights_round_trip() {
        let w = MetricWeights::identity(5);
        let back = decode_weights(&encode_weights(&w).unwrap()).unwrap();
        assert_eq!(back, w);
    }

    #[test]
    fn truncated_and_oversized_files_rejected() {
        let bytes = encode_bank(&three_entry_bank()).unwrap();
        assert!(matches!(
            decode_bank(&bytes[..bytes.len() - 1]),
            Err(Error::Truncated { .. })
        ));
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(matches!(
            decode_bank(&longer),
            Err(Error::TrailingBytes { extra: 1 })
        ));
    }

    #[test]
    fn invalid_one_hot_rejected_on_load() {
        let mut bytes = encode_bank(&three_entry_bank()).unwrap();
        // first V_cls row sits right after the 3x2 image-level keys
        let off = 8 + 12 + 2 + 4 + 3 * 2 * 4;
        bytes[off..off + 4].copy_from_slice(&0.5f32.to_le_bytes());
        assert!(matches!(
            decode_bank(&bytes),
            Err(Error::InvalidOneHot { row: 0, .. })
        ));
    }

    #[test]
    fn map_header_is_height_then_width() {
        let m = AnomalyMap::new(2, 3, vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5]).unwrap();
        let bytes = encode_map(&m).unwrap();
        assert_eq!(&bytes[..8], &[2, 0, 0, 0, 3, 0, 0, 0]);
        assert_eq!(bytes.len(), 8 + 24);
        assert_eq!(decode_map(&bytes).unwrap(), m);
    }
}
