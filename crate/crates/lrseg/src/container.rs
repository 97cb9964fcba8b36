//! Feature container IO.
//!
//! Layout (bit-exact):
//!
//! ```text
//! "LRSF0001"                       8 ASCII bytes
//! record_count | C | H | W        4 x u32 little-endian
//! record_count * C * f32-LE       feature payload, record order
//! '\n' + record_count JSON lines  metadata, one object per record
//! ```
//!
//! The newline separator and metadata section are present only when the
//! container holds at least one record; an empty container is exactly the
//! magic plus header.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rle::RleMask;
use crate::types::{FeatureVector, SegmentRecord};

pub const MAGIC: &[u8; 8] = b"LRSF0001";

/// Fixed per-container dimensions; the record count is derived at write time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ContainerHeader {
    pub feature_dim: u32,
    pub height: u32,
    pub width: u32,
}

#[derive(Serialize, Deserialize)]
struct RecordMeta {
    image_id: u32,
    segment_id: u32,
    counts: Vec<u32>,
    predicted_iou: f32,
    stability_score: f32,
    prompt_xy: [i32; 2],
}

pub fn write_feature_container<W: Write>(
    out: &mut W,
    header: &ContainerHeader,
    records: &[SegmentRecord],
) -> Result<()> {
    let mut seen = HashSet::new();
    for rec in records {
        if rec.feature.dim() != header.feature_dim as usize {
            return Err(Error::DimMismatch(format!(
                "record ({}, {}) feature has {} entries, header declares {}",
                rec.image_id,
                rec.segment_id,
                rec.feature.dim(),
                header.feature_dim
            )));
        }
        if rec.mask.height != header.height || rec.mask.width != header.width {
            return Err(Error::DimMismatch(format!(
                "record ({}, {}) mask is {}x{}, header declares {}x{}",
                rec.image_id,
                rec.segment_id,
                rec.mask.height,
                rec.mask.width,
                header.height,
                header.width
            )));
        }
        rec.validate()?;
        if !seen.insert((rec.image_id, rec.segment_id)) {
            return Err(Error::MalformedMetadata(format!(
                "duplicate segment id ({}, {})",
                rec.image_id, rec.segment_id
            )));
        }
    }

    out.write_all(MAGIC)?;
    out.write_all(&(records.len() as u32).to_le_bytes())?;
    out.write_all(&header.feature_dim.to_le_bytes())?;
    out.write_all(&header.height.to_le_bytes())?;
    out.write_all(&header.width.to_le_bytes())?;
    if records.is_empty() {
        return Ok(());
    }
    for rec in records {
        for &v in rec.feature.as_f32() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.write_all(b"\n")?;
    for rec in records {
        let meta = RecordMeta {
            image_id: rec.image_id,
            segment_id: rec.segment_id,
            counts: rec.mask.counts.clone(),
            predicted_iou: rec.predicted_iou,
            stability_score: rec.stability_score,
            prompt_xy: [rec.prompt_xy.0, rec.prompt_xy.1],
        };
        let line = serde_json::to_string(&meta)
            .map_err(|e| Error::MalformedMetadata(e.to_string()))?;
        out.write_all(line.as_bytes())?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_feature_container<R: Read>(
    input: &mut R,
) -> Result<(ContainerHeader, Vec<SegmentRecord>)> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    parse_feature_container(&bytes)
}

pub fn parse_feature_container(bytes: &[u8]) -> Result<(ContainerHeader, Vec<SegmentRecord>)> {
    if bytes.len() < 8 || &bytes[..8] != MAGIC {
        return Err(Error::BadMagic);
    }
    if bytes.len() < 24 {
        return Err(Error::TruncatedFile("header".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().unwrap());
    let count = word(0) as usize;
    let header = ContainerHeader {
        feature_dim: word(1),
        height: word(2),
        width: word(3),
    };
    let c = header.feature_dim as usize;
    let mut offset = 24usize;

    let payload_len = count
        .checked_mul(c)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::MalformedMetadata("payload size overflow".into()))?;
    if bytes.len() < offset + payload_len {
        return Err(Error::TruncatedFile("feature payload".into()));
    }
    let mut features = Vec::with_capacity(count);
    for r in 0..count {
        let start = offset + r * c * 4;
        let mut values = Vec::with_capacity(c);
        for d in 0..c {
            let at = start + d * 4;
            values.push(f32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()));
        }
        features.push(FeatureVector::new(values)?);
    }
    offset += payload_len;

    if count == 0 {
        if offset != bytes.len() {
            return Err(Error::MalformedMetadata(
                "trailing bytes after empty container header".into(),
            ));
        }
        return Ok((header, Vec::new()));
    }

    if bytes.len() <= offset || bytes[offset] != b'\n' {
        return Err(Error::TruncatedFile("metadata separator".into()));
    }
    offset += 1;
    let text = std::str::from_utf8(&bytes[offset..])
        .map_err(|e| Error::MalformedMetadata(e.to_string()))?;
    let mut lines = Vec::with_capacity(count);
    let mut rest = text;
    for i in 0..count {
        match rest.split_once('\n') {
            Some((line, tail)) => {
                lines.push(line);
                rest = tail;
            }
            None => {
                return Err(Error::TruncatedFile(format!(
                    "metadata line {i} of {count}"
                )))
            }
        }
    }
    if !rest.is_empty() {
        return Err(Error::MalformedMetadata(
            "trailing bytes after final metadata line".into(),
        ));
    }

    let mut records = Vec::with_capacity(count);
    let mut seen = HashSet::new();
    for (i, (line, feature)) in lines.iter().zip(features).enumerate() {
        let meta: RecordMeta = serde_json::from_str(line)
            .map_err(|e| Error::MalformedMetadata(format!("line {i}: {e}")))?;
        let mask = RleMask::new(header.height, header.width, meta.counts).map_err(|e| {
            Error::DimMismatch(format!("record {i} mask does not match header: {e}"))
        })?;
        if !seen.insert((meta.image_id, meta.segment_id)) {
            return Err(Error::MalformedMetadata(format!(
                "duplicate segment id ({}, {})",
                meta.image_id, meta.segment_id
            )));
        }
        let rec = SegmentRecord {
            image_id: meta.image_id,
            segment_id: meta.segment_id,
            feature,
            mask,
            predicted_iou: meta.predicted_iou,
            stability_score: meta.stability_score,
            prompt_xy: (meta.prompt_xy[0], meta.prompt_xy[1]),
        };
        rec.validate()?;
        records.push(rec);
    }
    Ok((header, records))
}

pub fn write_container_file<P: AsRef<Path>>(
    path: P,
    header: &ContainerHeader,
    records: &[SegmentRecord],
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_feature_container(&mut w, header, records)?;
    w.flush()?;
    Ok(())
}

pub fn read_container_file<P: AsRef<Path>>(
    path: P,
) -> Result<(ContainerHeader, Vec<SegmentRecord>)> {
    let mut r = BufReader::new(File::open(path)?);
    read_feature_container(&mut r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rle::rle_encode;

    fn sample_record(image_id: u32, segment_id: u32, c: usize) -> SegmentRecord {
        let raster: Vec<u8> = (0..4).map(|i| u8::from(i % 2 == 0)).collect();
        SegmentRecord {
            image_id,
            segment_id,
            feature: FeatureVector::new((0..c).map(|i| i as f32 * 0.5).collect()).unwrap(),
            mask: rle_encode(&raster, 2, 2),
            predicted_iou: 0.97,
            stability_score: 0.93,
            prompt_xy: (1, 1),
        }
    }

    fn header(c: u32) -> ContainerHeader {
        ContainerHeader {
            feature_dim: c,
            height: 2,
            width: 2,
        }
    }

    #[test]
    fn empty_container_is_header_only() {
        let mut bytes = Vec::new();
        write_feature_container(&mut bytes, &header(4), &[]).unwrap();
        assert_eq!(bytes.len(), 24);
        let (h, recs) = parse_feature_container(&bytes).unwrap();
        assert_eq!(h, header(4));
        assert!(recs.is_empty());
    }

    #[test]
    fn single_record_payload_length() {
        let mut bytes = Vec::new();
        write_feature_container(&mut bytes, &header(4), &[sample_record(0, 0, 4)]).unwrap();
        // magic+header, 4 floats, separator, then one metadata line.
        assert_eq!(&bytes[24..24 + 16].len(), &16);
        assert_eq!(bytes[40], b'\n');
        let (_, recs) = parse_feature_container(&bytes).unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0], sample_record(0, 0, 4));
    }

    #[test]
    fn three_records_round_trip() {
        let records: Vec<_> = (0..3).map(|i| sample_record(7, i, 5)).collect();
        let mut bytes = Vec::new();
        write_feature_container(&mut bytes, &header(5), &records).unwrap();
        let (h, recs) = parse_feature_container(&bytes).unwrap();
        assert_eq!(h, header(5));
        assert_eq!(recs, records);
    }

    #[test]
    fn truncated_payload_is_detected() {
        let mut bytes = Vec::new();
        write_feature_container(&mut bytes, &header(4), &[sample_record(0, 0, 4)]).unwrap();
        // Drop the last byte of the final float by cutting into the payload.
        let cut = &bytes[..24 + 15];
        assert!(matches!(
            parse_feature_container(cut),
            Err(Error::TruncatedFile(_))
        ));
    }

    #[test]
    fn bad_magic_is_detected() {
        let mut bytes = Vec::new();
        write_feature_container(&mut bytes, &header(4), &[]).unwrap();
        bytes[0] = b'X';
        assert!(matches!(
            parse_feature_container(&bytes),
            Err(Error::BadMagic)
        ));
    }

    #[test]
    fn dim_mismatch_on_write() {
        let mut bytes = Vec::new();
        let err = write_feature_container(&mut bytes, &header(3), &[sample_record(0, 0, 4)]);
        assert!(matches!(err, Err(Error::DimMismatch(_))));
    }

    #[test]
    fn duplicate_ids_rejected() {
        let mut bytes = Vec::new();
        let recs = vec![sample_record(1, 2, 4), sample_record(1, 2, 4)];
        assert!(matches!(
            write_feature_container(&mut bytes, &header(4), &recs),
            Err(Error::MalformedMetadata(_))
        ));
    }

    #[test]
    fn malformed_metadata_line() {
        let mut bytes = Vec::new();
        write_feature_container(&mut bytes, &header(4), &[sample_record(0, 0, 4)]).unwrap();
        // Corrupt the JSON line.
        let pos = bytes.len() - 2;
        bytes[pos] = b'{';
        assert!(matches!(
            parse_feature_container(&bytes),
            Err(Error::MalformedMetadata(_))
        ));
    }
}
