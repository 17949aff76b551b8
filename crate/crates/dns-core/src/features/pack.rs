//! Lossless bit packing of sign codes: +1 maps to bit 1, -1 to bit 0.

use super::{BinaryCodeTensor, FeatureError};
use crate::tensor::Tensor;

/// Packs a `[frames, regions, bits]` tensor of exact +/-1 entries.
pub fn pack_codes(video_id: impl Into<String>, codes: &Tensor) -> Result<BinaryCodeTensor, FeatureError> {
    if codes.rank() != 3 || codes.is_empty() {
        return Err(FeatureError::BadCodeShape(codes.shape().to_vec()));
    }
    let (frames, regions, bits) = (codes.shape()[0], codes.shape()[1], codes.shape()[2]);
    let words_per_code = bits.div_ceil(64);
    let mut words = vec![0u64; frames * regions * words_per_code];
    for f in 0..frames {
        for r in 0..regions {
            let base = (f * regions + r) * bits;
            let wbase = (f * regions + r) * words_per_code;
            for b in 0..bits {
                match codes.data()[base + b] {
                    v if v == 1.0 => words[wbase + b / 64] |= 1u64 << (b % 64),
                    v if v == -1.0 => {}
                    v => {
                        return Err(FeatureError::NonBinaryEntry {
                            frame: f,
                            region: r,
                            bit: b,
                            value: v,
                        })
                    }
                }
            }
        }
    }
    Ok(BinaryCodeTensor::from_raw(video_id.into(), frames, regions, bits, words))
}

/// Inverse of [`pack_codes`]: bit 1 becomes +1, bit 0 becomes -1.
pub fn unpack_codes(codes: &BinaryCodeTensor) -> Tensor {
    let (frames, regions, bits) = (codes.frames(), codes.regions(), codes.bits());
    let mut data = Vec::with_capacity(frames * regions * bits);
    for f in 0..frames {
        for r in 0..regions {
            let words = codes.code(f, r);
            for b in 0..bits {
                let bit = (words[b / 64] >> (b % 64)) & 1;
                data.push(if bit == 1 { 1.0 } else { -1.0 });
            }
        }
    }
    Tensor::new(vec![frames, regions, bits], data).expect("shape follows from dims")
}
