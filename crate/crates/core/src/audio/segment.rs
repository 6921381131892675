use alloc::vec::Vec;

use rand::Rng;

use super::WaveformSegment;
use crate::rng::seeded;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum ShapeMode {
    /// Truncate, or zero-pad at the tail.
    ClipOrPad,
    /// Uniform start offset drawn from the seed. Inputs shorter than the
    /// target fall back to [`ShapeMode::ClipOrPad`].
    RandomCrop,
}

/// Returns exactly `target_len` samples.
pub fn shape_segment(w: &WaveformSegment, target_len: usize, mode: ShapeMode, seed: u64) -> Result<WaveformSegment> {
    if target_len == 0 {
        return Err(Error::InvalidConfig("target_len must be positive".into()));
    }
    let x = w.samples();
    let start = match mode {
        ShapeMode::RandomCrop if x.len() > target_len => seeded(seed).random_range(0..=x.len() - target_len),
        _ => 0,
    };
    let mut out: Vec<f64> = x.iter().skip(start).take(target_len).copied().collect();
    out.resize(target_len, 0.0);
    Ok(w.with_samples(out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::SAMPLE_RATE;
    use proptest::prelude::*;

    fn ramp(len: usize) -> WaveformSegment {
        WaveformSegment::at_8k((0..len).map(|i| i as f64 / len as f64).collect()).unwrap()
    }

    #[test]
    fn truncates_long_inputs() {
        let w = ramp(36000);
        let s = shape_segment(&w, 32000, ShapeMode::ClipOrPad, 0).unwrap();
        assert_eq!(s.samples(), &w.samples()[..32000]);
    }

    #[test]
    fn pads_short_inputs_with_zeros() {
        let w = ramp(30000);
        for mode in [ShapeMode::ClipOrPad, ShapeMode::RandomCrop] {
            let s = shape_segment(&w, 32000, mode, 3).unwrap();
            assert_eq!(&s.samples()[..30000], w.samples());
            assert!(s.samples()[30000..].iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn random_crop_is_deterministic_per_seed() {
        let w = ramp(40000);
        let a = shape_segment(&w, 32000, ShapeMode::RandomCrop, 11).unwrap();
        let b = shape_segment(&w, 32000, ShapeMode::RandomCrop, 11).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.sample_rate(), SAMPLE_RATE);
    }

    #[test]
    fn zero_target_is_rejected() {
        assert!(shape_segment(&ramp(10), 0, ShapeMode::ClipOrPad, 0).is_err());
    }

    proptest! {
        #[test]
        fn output_length_is_exact(len in 1usize..3000, target in 1usize..3000, seed in any::<u64>(), crop in any::<bool>()) {
            let mode = if crop { ShapeMode::RandomCrop } else { ShapeMode::ClipOrPad };
            let s = shape_segment(&ramp(len), target, mode, seed).unwrap();
            prop_assert_eq!(s.len(), target);
        }
    }
}
