use std::path::Path;

use super::{Dataset, DatasetHeader, EegRecord};
use crate::codec::{read_file, write_file, Reader, Writer};
use crate::error::{Error, Result};

pub const BVD_MAGIC: &[u8; 4] = b"BVD1";
pub const BVD_VERSION: u32 = 1;

fn u32_of(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Malformed(format!("{what} {v} exceeds u32")))
}

pub fn encode_dataset(ds: &Dataset) -> Result<Vec<u8>> {
    let h = &ds.header;
    let mut w = Writer::new(BVD_MAGIC, BVD_VERSION);
    w.u32(u32_of(ds.records.len(), "record count")?);
    w.u32(u32_of(h.channels, "channels")?);
    w.u32(u32_of(h.samples, "samples")?);
    w.u32(u32_of(h.n_classes, "classes")?);
    w.u8(h.normalized as u8);
    for r in &ds.records {
        w.u32(r.class_label);
        w.u32(r.subject_id);
        w.u32(r.image_id);
        w.f32s(&r.data);
    }
    Ok(w.finish())
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    let mut r = Reader::open(bytes, BVD_MAGIC, BVD_VERSION)?;
    let n = r.u32("record count")? as usize;
    let channels = r.u32("channels")? as usize;
    let samples = r.u32("samples")? as usize;
    let n_classes = r.u32("classes")? as usize;
    let normalized = match r.u8("normalized flag")? {
        0 => false,
        1 => true,
        f => return Err(Error::Malformed(format!("normalized flag {f}"))),
    };
    let per = channels
        .checked_mul(samples)
        .ok_or_else(|| Error::Malformed("c·l overflows".into()))?;
    let mut records = Vec::with_capacity(n.min(1 << 16));
    for _ in 0..n {
        let class_label = r.u32("record header")?;
        let subject_id = r.u32("record header")?;
        let image_id = r.u32("record header")?;
        let data = r.f32s(per, "record samples")?;
        records.push(EegRecord::new(channels, samples, data, class_label, subject_id, image_id)?);
    }
    r.finish()?;
    Dataset::new(
        DatasetHeader {
            channels,
            samples,
            n_classes,
            normalized,
        },
        records,
    )
}

pub fn save_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    write_file(path, &encode_dataset(ds)?)
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    decode_dataset(&read_file(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Dataset {
        let recs = (0..3)
            .map(|i| EegRecord::new(2, 3, (0..6).map(|j| (i * 6 + j) as f32 * 0.5 - 1.0).collect(), i % 2, i, i).unwrap())
            .collect();
        Dataset::new(
            DatasetHeader {
                channels: 2,
                samples: 3,
                n_classes: 2,
                normalized: false,
            },
            recs,
        )
        .unwrap()
    }

    #[test]
    fn empty_file_has_valid_header() {
        let ds = Dataset::new(
            DatasetHeader {
                channels: 128,
                samples: 440,
                n_classes: 40,
                normalized: false,
            },
            vec![],
        )
        .unwrap();
        let back = decode_dataset(&encode_dataset(&ds).unwrap()).unwrap();
        assert!(back.records.is_empty());
        assert_eq!(back.header, ds.header);
    }

    #[test]
    fn layout_matches_declared_sizes() {
        let bytes = encode_dataset(&tiny()).unwrap();
        assert_eq!(bytes.len(), 4 + 4 * 5 + 1 + 3 * (12 + 24) + 4);
        assert_eq!(&bytes[..4], b"BVD1");
    }

    #[test]
    fn distinct_errors_for_each_corruption() {
        let bytes = encode_dataset(&tiny()).unwrap();
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(matches!(decode_dataset(&magic), Err(Error::BadMagic { .. })));
        let mut version = bytes.clone();
        version[4] = 2;
        assert!(matches!(decode_dataset(&version), Err(Error::BadVersion { found: 2, .. })));
        let mut crc = bytes.clone();
        let k = crc.len() - 10;
        crc[k] ^= 1;
        assert!(matches!(decode_dataset(&crc), Err(Error::Checksum { .. })));
        assert!(matches!(decode_dataset(&bytes[..bytes.len() - 9]), Err(Error::Truncated(_))));
    }
}
