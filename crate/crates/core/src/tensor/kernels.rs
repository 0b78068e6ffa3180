//! Hot inner loops for convolution.
//!
//! All accumulation is f64. Products of two f32 values are exact in f64
//! (24-bit x 24-bit mantissas fit in 53), so a fused multiply-add rounds
//! identically to mul-then-add and vectorization never changes results.
//! Dot products use four independent lanes combined in a fixed order, so
//! lane-parallel code agrees with the scalar order bit for bit.
//!
//! These bodies are `#[inline(always)]` and meant to be called from inside
//! the feature-gated slab workers in `ops`, where the surrounding
//! `#[target_feature(enable = "avx2,fma")]` lets LLVM pick wide instructions
//! without per-row dispatch overhead.

#[cfg(target_arch = "x86_64")]
use std::sync::OnceLock;

#[cfg(target_arch = "x86_64")]
pub(crate) fn have_avx2_fma() -> bool {
    static DETECTED: OnceLock<bool> = OnceLock::new();
    *DETECTED.get_or_init(|| {
        is_x86_feature_detected!("avx2") && is_x86_feature_detected!("fma")
    })
}

#[cfg(not(target_arch = "x86_64"))]
pub(crate) fn have_avx2_fma() -> bool {
    false
}

/// acc[j] += w * src[j]
#[inline(always)]
pub(crate) fn saxpy_body(acc: &mut [f64], src: &[f32], w: f64) {
    debug_assert_eq!(acc.len(), src.len());
    for (a, &s) in acc.iter_mut().zip(src.iter()) {
        *a += w * s as f64;
    }
}

/// Four-lane dot product of two f32 rows, accumulated in f64.
#[inline(always)]
pub(crate) fn dot_body(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut lanes = [0.0f64; 4];
    let chunks = a.len() / 4;
    let (a4, at) = a.split_at(chunks * 4);
    let (b4, bt) = b.split_at(chunks * 4);
    for (ca, cb) in a4.chunks_exact(4).zip(b4.chunks_exact(4)) {
        for l in 0..4 {
            lanes[l] += ca[l] as f64 * cb[l] as f64;
        }
    }
    for (l, (&x, &y)) in at.iter().zip(bt.iter()).enumerate() {
        lanes[l] += x as f64 * y as f64;
    }
    (lanes[0] + lanes[1]) + (lanes[2] + lanes[3])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn saxpy_matches_reference() {
        let src: Vec<f32> = (0..37).map(|i| (i as f32) * 0.25 - 3.0).collect();
        let mut acc = vec![1.5f64; 37];
        saxpy_body(&mut acc, &src, 0.75);
        for (i, &a) in acc.iter().enumerate() {
            assert_eq!(a, 1.5 + 0.75 * src[i] as f64);
        }
    }

    #[test]
    fn dot_matches_sequential_lane_order() {
        let a: Vec<f32> = (0..23).map(|i| (i as f32) * 0.5 - 4.0).collect();
        let b: Vec<f32> = (0..23).map(|i| 2.0 - (i as f32) * 0.125).collect();
        let got = dot_body(&a, &b);
        let mut lanes = [0.0f64; 4];
        for (i, (&x, &y)) in a.iter().zip(b.iter()).enumerate() {
            lanes[i % 4] += x as f64 * y as f64;
        }
        let want = (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]);
        assert_eq!(got.to_bits(), want.to_bits());
    }
}
