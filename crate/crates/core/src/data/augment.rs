//! Same-class splice augmentation on waveforms.

use rand::Rng;

use crate::error::{Error, Result};

/// Sample offsets chosen for one splice.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpliceOffsets {
    pub first: usize,
    pub second: usize,
    /// Length of each copied segment in samples.
    pub segment: usize,
}

/// Cuts one `segment_s` second segment out of each clip, each starting at an
/// offset drawn uniformly from `[0, segment_s]` seconds (rounded to a whole
/// sample), and concatenates them.
///
/// Both clips must hold at least `2 * segment_s` seconds so that every offset
/// in the range leaves a full segment.
pub fn augment_pair<R: Rng + ?Sized>(
    first: &[f32],
    second: &[f32],
    sample_rate: u32,
    segment_s: f64,
    rng: &mut R,
) -> Result<(Vec<f32>, SpliceOffsets)> {
    if !(segment_s > 0.0) {
        return Err(Error::Parameter(format!("segment length must be positive, got {segment_s}")));
    }
    let segment = (segment_s * sample_rate as f64).round() as usize;
    let need = 2 * segment;
    for (name, clip) in [("first", first), ("second", second)] {
        if clip.len() < need {
            return Err(Error::Input(format!(
                "{name} clip has {} samples; splicing needs at least {need} ({:.3} s)",
                clip.len(),
                2.0 * segment_s
            )));
        }
    }
    let mut draw = || ((rng.random::<f64>() * segment_s * sample_rate as f64).round() as usize).min(segment);
    let offsets = SpliceOffsets {
        first: draw(),
        second: draw(),
        segment,
    };
    Ok((splice(first, second, offsets), offsets))
}

/// Concatenates the two segments selected by `offsets`.
pub fn splice(first: &[f32], second: &[f32], offsets: SpliceOffsets) -> Vec<f32> {
    let mut out = Vec::with_capacity(2 * offsets.segment);
    out.extend_from_slice(&first[offsets.first..offsets.first + offsets.segment]);
    out.extend_from_slice(&second[offsets.second..offsets.second + offsets.segment]);
    out
}
