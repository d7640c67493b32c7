//! `.fpk` feature-pack container.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic      "MRADFP01"
//! header     version u32, d u32, grid_h u32, grid_w u32, image_h u32, image_w u32, count u32
//! record*    id_len u16, id bytes (UTF-8), label u8, mask_present u8,
//!            class feature d × f32, patch features u·d × f32,
//!            mask (if present): image_h rows of ceil(image_w / 8) bytes, MSB-first
//! ```
//!
//! Features are stored exactly as given; normalization happens downstream.

use std::collections::HashSet;
use std::path::Path;

use crate::codec::{dim_u32, put_f32s, put_u16, put_u32, read_file, write_atomic, ByteReader};
use crate::error::{Error, Result};
use crate::types::{Bitmap, ImageRecord, Label, PatchGrid};

pub const PACK_MAGIC: &[u8; 8] = b"MRADFP01";
pub const PACK_VERSION: u32 = 1;

/// Size in bytes of magic plus fixed header.
pub const PACK_HEADER_BYTES: usize = 8 + 7 * 4;

/// Records sharing one patch grid and feature dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePack {
    pub grid: PatchGrid,
    pub d: usize,
    pub records: Vec<ImageRecord>,
}

impl FeaturePack {
    /// Validates every record and rejects duplicate ids.
    pub fn new(grid: PatchGrid, d: usize, records: Vec<ImageRecord>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(records.len());
        for r in &records {
            r.validate(&grid, d)?;
            if !seen.insert(r.id.as_str()) {
                return Err(Error::InvalidRecord {
                    id: r.id.clone(),
                    reason: "duplicate id".into(),
                });
            }
        }
        Ok(Self { grid, d, records })
    }
}

fn mask_row_bytes(width: usize) -> usize {
    width.div_ceil(8)
}

fn pack_mask(mask: &Bitmap, out: &mut Vec<u8>) {
    let row_bytes = mask_row_bytes(mask.width());
    for r in 0..mask.height() {
        let start = out.len();
        out.resize(start + row_bytes, 0);
        for c in 0..mask.width() {
            if mask.get(r, c) {
                out[start + c / 8] |= 0x80 >> (c % 8);
            }
        }
    }
}

fn unpack_mask(bytes: &[u8], height: usize, width: usize) -> Bitmap {
    let row_bytes = mask_row_bytes(width);
    Bitmap::from_fn(height, width, |r, c| {
        bytes[r * row_bytes + c / 8] & (0x80 >> (c % 8)) != 0
    })
}

/// Serializes records into the `.fpk` byte layout.
pub fn encode_feature_pack(records: &[ImageRecord], grid: &PatchGrid, d: usize) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(PACK_MAGIC);
    put_u32(&mut out, PACK_VERSION);
    put_u32(&mut out, dim_u32("d", d)?);
    put_u32(&mut out, dim_u32("grid_h", grid.grid_h)?);
    put_u32(&mut out, dim_u32("grid_w", grid.grid_w)?);
    put_u32(&mut out, dim_u32("image_h", grid.image_h)?);
    put_u32(&mut out, dim_u32("image_w", grid.image_w)?);
    put_u32(&mut out, dim_u32("record count", records.len())?);
    for r in records {
        r.validate(grid, d)?;
        let id = r.id.as_bytes();
        let id_len = u16::try_from(id.len()).map_err(|_| Error::IdTooLong(id.len()))?;
        put_u16(&mut out, id_len);
        out.extend_from_slice(id);
        out.push(r.label.as_u8());
        out.push(u8::from(r.mask.is_some()));
        put_f32s(&mut out, &r.cls_feature);
        put_f32s(&mut out, &r.patch_features);
        if let Some(mask) = &r.mask {
            pack_mask(mask, &mut out);
        }
    }
    Ok(out)
}

pub fn write_feature_pack(
    records: &[ImageRecord],
    grid: &PatchGrid,
    d: usize,
    path: impl AsRef<Path>,
) -> Result<()> {
    let bytes = encode_feature_pack(records, grid, d)?;
    write_atomic(path.as_ref(), &bytes)
}

pub fn decode_feature_pack(bytes: &[u8]) -> Result<FeaturePack> {
    let mut rd = ByteReader::new(bytes);
    rd.magic(PACK_MAGIC)?;
    let hdr = || "pack header".to_string();
    let version = rd.u32(&hdr)?;
    if version != PACK_VERSION {
        return Err(Error::VersionMismatch {
            expected: PACK_VERSION,
            found: version,
        });
    }
    let d = rd.u32(&hdr)? as usize;
    let grid_h = rd.u32(&hdr)? as usize;
    let grid_w = rd.u32(&hdr)? as usize;
    let image_h = rd.u32(&hdr)? as usize;
    let image_w = rd.u32(&hdr)? as usize;
    let count = rd.u32(&hdr)? as usize;
    let grid = PatchGrid::new(grid_h, grid_w, image_h, image_w)?;
    if d == 0 {
        return Err(Error::OutOfRange("pack declares d = 0".into()));
    }

    let mut records = Vec::with_capacity(count.min(1 << 16));
    for index in 0..count {
        let ctx = |part: &'static str| move || format!("record {index} ({part})");
        let id_len = rd.u16(&ctx("id length"))? as usize;
        let id = String::from_utf8(rd.take(id_len, &ctx("id"))?.to_vec()).map_err(|_| {
            Error::InvalidRecord {
                id: format!("#{index}"),
                reason: "id is not valid UTF-8".into(),
            }
        })?;
        let label = match rd.u8(&ctx("label"))? {
            0 => Label::Normal,
            1 => Label::Anomalous,
            other => {
                return Err(Error::InvalidRecord {
                    id,
                    reason: format!("label byte {other}"),
                })
            }
        };
        let mask_present = match rd.u8(&ctx("mask flag"))? {
            0 => false,
            1 => true,
            other => {
                return Err(Error::InvalidRecord {
                    id,
                    reason: format!("mask flag byte {other}"),
                })
            }
        };
        let cls_feature = rd.f32s(d, &ctx("class feature"))?;
        let patch_features = rd.f32s(grid.patches() * d, &ctx("patch features"))?;
        let mask = if mask_present {
            let bytes = rd.take(mask_row_bytes(image_w) * image_h, &ctx("mask"))?;
            Some(unpack_mask(bytes, image_h, image_w))
        } else {
            None
        };
        records.push(ImageRecord {
            id,
            label,
            cls_feature,
            patch_features,
            mask,
        });
    }
    rd.finish()?;
    FeaturePack::new(grid, d, records)
}

pub fn read_feature_pack(path: impl AsRef<Path>) -> Result<FeaturePack> {
    decode_feature_pack(&read_file(path.as_ref())?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(id: &str, d: usize, grid: &PatchGrid, mask: Option<Bitmap>) -> ImageRecord {
        ImageRecord {
            id: id.into(),
            label: Label::from_anomalous(mask.as_ref().is_some_and(|m| m.any())),
            cls_feature: (0..d).map(|i| i as f32 + 0.5).collect(),
            patch_features: (0..grid.patches() * d)
                .map(|i| -(i as f32) * 0.25)
                .collect(),
            mask,
        }
    }

    #[test]
    fn single_record_byte_count() {
        let grid = PatchGrid::new(2, 2, 4, 4).unwrap();
        let r = record("img", 4, &grid, None);
        let bytes = encode_feature_pack(&[r], &grid, 4).unwrap();
        assert_eq!(bytes.len(), 8 + 28 + 2 + 3 + 1 + 1 + 16 + 64);
    }

    #[test]
    fn empty_pack_is_header_only() {
        let grid = PatchGrid::new(2, 2, 4, 4).unwrap();
        let bytes = encode_feature_pack(&[], &grid, 4).unwrap();
        assert_eq!(bytes.len(), PACK_HEADER_BYTES);
        assert_eq!(&bytes[32..36], &0u32.to_le_bytes());
        let pack = decode_feature_pack(&bytes).unwrap();
        assert!(pack.records.is_empty());
        assert_eq!(pack.grid, grid);
    }

    #[test]
    fn mask_rows_are_padded_msb_first() {
        let grid = PatchGrid::new(1, 1, 2, 10).unwrap();
        let mask = Bitmap::from_fn(2, 10, |r, c| (r == 0 && c == 0) || (r == 1 && c == 9));
        let r = record("m", 1, &grid, Some(mask.clone()));
        let bytes = encode_feature_pack(&[r], &grid, 1).unwrap();
        let tail = &bytes[bytes.len() - 4..];
        assert_eq!(tail, &[0x80, 0x00, 0x00, 0x40]);
        let pack = decode_feature_pack(&bytes).unwrap();
        assert_eq!(pack.records[0].mask.as_ref(), Some(&mask));
    }

    #[test]
    fn corrupted_magic() {
        let grid = PatchGrid::new(2, 2, 4, 4).unwrap();
        let mut bytes = encode_feature_pack(&[record("a", 4, &grid, None)], &grid, 4).unwrap();
        bytes[0] = b'X';
        assert!(matches!(
            decode_feature_pack(&bytes),
            Err(Error::BadMagic { .. })
        ));
    }

    #[test]
    fn version_mismatch() {
        let grid = PatchGrid::new(2, 2, 4, 4).unwrap();
        let mut bytes = encode_feature_pack(&[], &grid, 4).unwrap();
        bytes[8] = 2;
        assert!(matches!(
            decode_feature_pack(&bytes),
            Err(Error::VersionMismatch { found: 2, .. })
        ));
    }

    #[test]
    fn truncation_names_record_index() {
        let grid = PatchGrid::new(2, 2, 4, 4).unwrap();
        let recs = vec![record("a", 4, &grid, None), record("b", 4, &grid, None)];
        let bytes = encode_feature_pack(&recs, &grid, 4).unwrap();
        let err = decode_feature_pack(&bytes[..bytes.len() - 10]).unwrap_err();
        match err {
            Error::Truncated { context } => assert!(context.starts_with("record 1"), "{context}"),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn write_rejects_bad_records() {
        let grid = PatchGrid::new(2, 2, 4, 4).unwrap();
        let long = record(&"x".repeat(70_000), 4, &grid, None);
        assert!(matches!(
            encode_feature_pack(&[long], &grid, 4),
            Err(Error::IdTooLong(70_000))
        ));
        let mut nan = record("n", 4, &grid, None);
        nan.cls_feature[1] = f32::NAN;
        assert!(matches!(
            encode_feature_pack(&[nan], &grid, 4),
            Err(Error::NonFinite(_))
        ));
        let short = record("s", 3, &grid, None);
        assert!(matches!(
            encode_feature_pack(&[short], &grid, 4),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn duplicate_ids_rejected() {
        let grid = PatchGrid::new(2, 2, 4, 4).unwrap();
        let recs = vec![record("a", 3, &grid, None), record("a", 3, &grid, None)];
        let err = FeaturePack::new(grid, 3, recs).unwrap_err();
        assert!(err.to_string().contains("duplicate id"), "{err}");
    }
}
