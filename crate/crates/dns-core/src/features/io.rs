//! On-disk formats, little-endian throughout.
//!
//! Index file (`DNSIDX1\0`): u32 version=1, u32 record count; per record a
//! u16-length video id, u8 fine kind (0 = float32 tensor, 1 = packed binary),
//! u32 frames, u32 regions, u32 dim-or-bits, the fine payload, u32 coarse dim
//! plus float32 coarse vector, and a float32 self-similarity scalar. Binary
//! payloads store ceil(bits/8) bytes per region vector with zero padding bits.
//!
//! Feature file (`DNSFEAT1`): same header style with float32 region tensors.

use std::fs;
use std::path::Path;

use super::{
    BinaryCodeTensor, FeatureError, FineRepresentation, RegionFeatureTensor, VideoIndexRecord,
};

const INDEX_MAGIC: &[u8; 8] = b"DNSIDX1\0";
const FEATURE_MAGIC: &[u8; 8] = b"DNSFEAT1";
const VERSION: u32 = 1;

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], FeatureError> {
        if self.pos + n > self.buf.len() {
            return Err(FeatureError::Truncated(what));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &'static str) -> Result<u8, FeatureError> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &'static str) -> Result<u16, FeatureError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, FeatureError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f32(&mut self, what: &'static str) -> Result<f32, FeatureError> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize, what: &'static str) -> Result<Vec<f64>, FeatureError> {
        let raw = self.take(4 * n, what)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
            .collect())
    }

    fn string(&mut self, what: &'static str) -> Result<String, FeatureError> {
        let len = self.u16(what)? as usize;
        let raw = self.take(len, what)?;
        String::from_utf8(raw.to_vec())
            .map_err(|_| FeatureError::Truncated(what))
    }

    fn at_end(&self) -> bool {
        self.pos == self.buf.len()
    }
}

fn put_u16(out: &mut Vec<u8>, v: u16) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f32s(out: &mut Vec<u8>, values: &[f64]) {
    for &v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

fn put_id(out: &mut Vec<u8>, id: &str) {
    put_u16(out, id.len() as u16);
    out.extend_from_slice(id.as_bytes());
}

fn check_unique_ids<'a>(ids: impl Iterator<Item = &'a str>) -> Result<(), FeatureError> {
    let mut seen = std::collections::BTreeSet::new();
    for id in ids {
        if !seen.insert(id) {
            return Err(FeatureError::DuplicateId(id.to_string()));
        }
    }
    Ok(())
}

fn binary_payload(codes: &BinaryCodeTensor) -> Vec<u8> {
    let bpc = codes.bytes_per_code();
    let mut out = Vec::with_capacity(codes.frames() * codes.regions() * bpc);
    for f in 0..codes.frames() {
        for r in 0..codes.regions() {
            let mut bytes = Vec::with_capacity(codes.words_per_code() * 8);
            for w in codes.code(f, r) {
                bytes.extend_from_slice(&w.to_le_bytes());
            }
            out.extend_from_slice(&bytes[..bpc]);
        }
    }
    out
}

fn binary_from_payload(
    id: String,
    frames: usize,
    regions: usize,
    bits: usize,
    payload: &[u8],
) -> BinaryCodeTensor {
    let bpc = bits.div_ceil(8);
    let wpc = bits.div_ceil(64);
    let mut words = vec![0u64; frames * regions * wpc];
    for code in 0..frames * regions {
        let src = &payload[code * bpc..(code + 1) * bpc];
        for (i, &b) in src.iter().enumerate() {
            words[code * wpc + i / 8] |= u64::from(b) << (8 * (i % 8));
        }
    }
    BinaryCodeTensor::from_raw(id, frames, regions, bits, words)
}

/// Serializes index records to their canonical byte layout.
pub fn index_to_bytes(records: &[VideoIndexRecord]) -> Result<Vec<u8>, FeatureError> {
    if records.is_empty() {
        return Err(FeatureError::EmptyRecords);
    }
    check_unique_ids(records.iter().map(|r| r.video_id.as_str()))?;
    let mut out = Vec::new();
    out.extend_from_slice(INDEX_MAGIC);
    put_u32(&mut out, VERSION);
    put_u32(&mut out, records.len() as u32);
    for rec in records {
        put_id(&mut out, &rec.video_id);
        match &rec.fine {
            FineRepresentation::Float(t) => {
                out.push(0u8);
                put_u32(&mut out, t.frames() as u32);
                put_u32(&mut out, t.regions() as u32);
                put_u32(&mut out, t.dim() as u32);
                put_f32s(&mut out, t.values());
            }
            FineRepresentation::Binary(b) => {
                out.push(1u8);
                put_u32(&mut out, b.frames() as u32);
                put_u32(&mut out, b.regions() as u32);
                put_u32(&mut out, b.bits() as u32);
                out.extend_from_slice(&binary_payload(b));
            }
        }
        put_u32(&mut out, rec.coarse.len() as u32);
        put_f32s(&mut out, &rec.coarse);
        out.extend_from_slice(&(rec.self_sim as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn write_index(records: &[VideoIndexRecord], path: impl AsRef<Path>) -> Result<(), FeatureError> {
    let bytes = index_to_bytes(records)?;
    fs::write(path, bytes)?;
    Ok(())
}

pub fn index_from_bytes(buf: &[u8]) -> Result<Vec<VideoIndexRecord>, FeatureError> {
    let mut cur = Cursor::new(buf);
    if cur.take(8, "magic")? != INDEX_MAGIC {
        return Err(FeatureError::BadMagic { expected: "DNSIDX1" });
    }
    let version = cur.u32("version")?;
    if version != VERSION {
        return Err(FeatureError::UnsupportedVersion(version));
    }
    let count = cur.u32("record count")? as usize;
    let mut records = Vec::with_capacity(count);
    for _ in 0..count {
        let id = cur.string("video id")?;
        let kind = cur.u8("fine kind")?;
        let frames = cur.u32("frames")? as usize;
        let regions = cur.u32("regions")? as usize;
        let width = cur.u32("dim-or-bits")? as usize;
        let fine = match kind {
            0 => {
                let values = cur.f32s(frames * regions * width, "float payload")?;
                FineRepresentation::Float(RegionFeatureTensor::new(
                    id.clone(),
                    frames,
                    regions,
                    width,
                    values,
                )?)
            }
            1 => {
                let bpc = width.div_ceil(8);
                let payload = cur.take(frames * regions * bpc, "binary payload")?;
                FineRepresentation::Binary(binary_from_payload(
                    id.clone(),
                    frames,
                    regions,
                    width,
                    payload,
                ))
            }
            _ => return Err(FeatureError::Truncated("fine kind")),
        };
        let coarse_dim = cur.u32("coarse dim")? as usize;
        let coarse = cur.f32s(coarse_dim, "coarse vector")?;
        let self_sim = f64::from(cur.f32("self similarity")?);
        records.push(VideoIndexRecord { video_id: id, fine, coarse, self_sim });
    }
    if !cur.at_end() {
        return Err(FeatureError::Truncated("trailing bytes after records"));
    }
    check_unique_ids(records.iter().map(|r| r.video_id.as_str()))?;
    Ok(records)
}

pub fn read_index(path: impl AsRef<Path>) -> Result<Vec<VideoIndexRecord>, FeatureError> {
    index_from_bytes(&fs::read(path)?)
}

pub fn features_to_bytes(videos: &[RegionFeatureTensor]) -> Result<Vec<u8>, FeatureError> {
    if videos.is_empty() {
        return Err(FeatureError::EmptyRecords);
    }
    check_unique_ids(videos.iter().map(|v| v.video_id()))?;
    let mut out = Vec::new();
    out.extend_from_slice(FEATURE_MAGIC);
    put_u32(&mut out, VERSION);
    put_u32(&mut out, videos.len() as u32);
    for v in videos {
        put_id(&mut out, v.video_id());
        put_u32(&mut out, v.frames() as u32);
        put_u32(&mut out, v.regions() as u32);
        put_u32(&mut out, v.dim() as u32);
        put_f32s(&mut out, v.values());
    }
    Ok(out)
}

pub fn write_features(videos: &[RegionFeatureTensor], path: impl AsRef<Path>) -> Result<(), FeatureError> {
    let bytes = features_to_bytes(videos)?;
    fs::write(path, bytes)?;
    Ok(())
}

pub fn features_from_bytes(buf: &[u8]) -> Result<Vec<RegionFeatureTensor>, FeatureError> {
    let mut cur = Cursor::new(buf);
    if cur.take(8, "magic")? != FEATURE_MAGIC {
        return Err(FeatureError::BadMagic { expected: "DNSFEAT1" });
    }
    let version = cur.u32("version")?;
    if version != VERSION {
        return Err(FeatureError::UnsupportedVersion(version));
    }
    let count = cur.u32("record count")? as usize;
    let mut videos = Vec::with_capacity(count);
    for _ in 0..count {
        let id = cur.string("video id")?;
        let frames = cur.u32("frames")? as usize;
        let regions = cur.u32("regions")? as usize;
        let dim = cur.u32("dim")? as usize;
        let values = cur.f32s(frames * regions * dim, "float payload")?;
        videos.push(RegionFeatureTensor::new(id, frames, regions, dim, values)?);
    }
    if !cur.at_end() {
        return Err(FeatureError::Truncated("trailing bytes after records"));
    }
    check_unique_ids(videos.iter().map(|v| v.video_id()))?;
    Ok(videos)
}

pub fn read_features(path: impl AsRef<Path>) -> Result<Vec<RegionFeatureTensor>, FeatureError> {
    features_from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::super::pack_codes;
    use super::*;
    use crate::tensor::Tensor;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn float_record(id: &str, rng: &mut ChaCha20Rng, frames: usize) -> VideoIndexRecord {
        let dim = 4;
        // f32-exact values keep the write/read round trip bit-identical.
        let values: Vec<f64> = (0..frames * 2 * dim)
            .map(|_| f64::from(rng.random_range(-8i32..8) as f32 * 0.25))
            .collect();
        let fine = FineRepresentation::Float(
            RegionFeatureTensor::new(id, frames, 2, dim, values).unwrap(),
        );
        let mut coarse = vec![0.0; 6];
        coarse[rng.random_range(0..6)] = 1.0;
        VideoIndexRecord::new(fine, coarse, 0.5).unwrap()
    }

    fn binary_record(id: &str, rng: &mut ChaCha20Rng, bits: usize) -> VideoIndexRecord {
        let codes: Vec<f64> = (0..2 * 3 * bits)
            .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
            .collect();
        let packed = pack_codes(id, &Tensor::new(vec![2, 3, bits], codes).unwrap()).unwrap();
        let mut coarse = vec![0.0; 6];
        coarse[rng.random_range(0..6)] = -1.0;
        VideoIndexRecord::new(FineRepresentation::Binary(packed), coarse, -0.25).unwrap()
    }

    #[test]
    fn single_float_record_round_trips() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let records = vec![float_record("vid-a", &mut rng, 3)];
        let bytes = index_to_bytes(&records).unwrap();
        assert_eq!(index_from_bytes(&bytes).unwrap(), records);
    }

    #[test]
    fn corrupted_magic_is_rejected() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let mut bytes = index_to_bytes(&[float_record("v", &mut rng, 2)]).unwrap();
        bytes[0] ^= 0xFF;
        let err = index_from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("bad magic"), "{err}");
    }

    #[test]
    fn truncated_file_is_rejected() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let bytes = index_to_bytes(&[float_record("v", &mut rng, 2)]).unwrap();
        let err = index_from_bytes(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(matches!(err, FeatureError::Truncated(_)), "{err}");
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let records = vec![float_record("same", &mut rng, 2), float_record("same", &mut rng, 3)];
        assert!(matches!(
            index_to_bytes(&records),
            Err(FeatureError::DuplicateId(_))
        ));
    }

    #[test]
    fn writes_are_byte_stable_on_disk() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let records = vec![float_record("a", &mut rng, 2), binary_record("b", &mut rng, 70)];
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("one.dnsidx");
        let p2 = dir.path().join("two.dnsidx");
        write_index(&records, &p1).unwrap();
        write_index(&records, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        assert_eq!(read_index(&p1).unwrap(), records);
    }

    #[test]
    fn feature_files_round_trip() {
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let videos: Vec<RegionFeatureTensor> = (0..4)
            .map(|i| {
                let values: Vec<f64> = (0..3 * 2 * 5)
                    .map(|_| f64::from(rng.random_range(-8i32..8) as f32 * 0.125))
                    .collect();
                RegionFeatureTensor::new(format!("v{i}"), 3, 2, 5, values).unwrap()
            })
            .collect();
        let bytes = features_to_bytes(&videos).unwrap();
        assert_eq!(features_from_bytes(&bytes).unwrap(), videos);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        /// Mixed float/binary record lists survive the round trip bit-exactly.
        #[test]
        fn mixed_records_round_trip(seed in 0u64..10_000, n in 1usize..12) {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let records: Vec<VideoIndexRecord> = (0..n)
                .map(|i| {
                    if rng.random::<bool>() {
                        float_record(&format!("f{i}"), &mut rng, 1 + i % 3)
                    } else {
                        binary_record(&format!("b{i}"), &mut rng, 1 + (seed as usize + 13 * i) % 130)
                    }
                })
                .collect();
            let bytes = index_to_bytes(&records).unwrap();
            prop_assert_eq!(index_from_bytes(&bytes).unwrap(), records);
        }
    }
}
