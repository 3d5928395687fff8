//! Where each attention head looks: argmax frames, exports and scoring
//! against ground-truth event intervals.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use super::inference::infer_many;
use crate::data::{DatasetIndex, EventInterval, FeatureStore};
use crate::error::{Error, Result};
use crate::features::{write_wav, AudioClip};
use crate::model::{PoolingMode, SceneModel};
use crate::numerics::{Scalar, Tensor};

pub const VECTORS_MAGIC: &[u8; 4] = b"AVEC";
pub const ALIGNMENT_HEADER: &str = "clip_id,head,frame,seconds,score";

/// One head's peak on one clip.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadAlignment {
    pub frame: usize,
    /// `frame * duration / T`.
    pub seconds: f64,
    pub score: f64,
    /// The whole score row over time.
    pub scores: Vec<f64>,
    /// Frame feature at the argmax.
    pub attended: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentRecord {
    pub clip_id: String,
    pub duration_s: f64,
    pub heads: Vec<HeadAlignment>,
}

fn require_attention<S: Scalar>(model: &SceneModel<S>) -> Result<()> {
    if model.config.pooling != PoolingMode::Attention {
        return Err(Error::Unsupported(format!(
            "alignments need an attention model; this checkpoint uses {} pooling",
            model.config.pooling.as_str()
        )));
    }
    Ok(())
}

/// Argmax alignments of every clip, computed on the first listed channel.
pub fn align_split<S: Scalar>(
    model: &SceneModel<S>,
    index: &DatasetIndex,
    store: &FeatureStore<S>,
) -> Result<Vec<AlignmentRecord>> {
    require_attention(model)?;
    let clips = index.clips();
    let feats = clips
        .par_iter()
        .map(|(_, ids)| store.features(&index.examples[ids[0]]))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Tensor<S>> = feats.iter().map(|f| f.as_ref()).collect();
    let out = infer_many(model, &refs)?;
    let cfg = store.config();
    clips
        .into_iter()
        .zip(out)
        .zip(&feats)
        .map(|(((clip_id, _), inf), f)| {
            let duration_s = (f.shape()[1] * cfg.hop) as f64 / cfg.sample_rate as f64;
            let att = inf.attention.expect("attention model yields scores");
            let t = att.scores.shape()[1];
            let heads = (0..att.heads())
                .map(|h| {
                    let frame = att.argmax(h);
                    let scores = att.scores.row(h).to_vec();
                    HeadAlignment {
                        frame,
                        seconds: frame as f64 * duration_s / t as f64,
                        score: scores[frame],
                        scores,
                        attended: inf.sequence.row(frame).to_vec(),
                    }
                })
                .collect();
            Ok(AlignmentRecord {
                clip_id,
                duration_s,
                heads,
            })
        })
        .collect()
}

pub fn alignment_csv(records: &[AlignmentRecord]) -> String {
    let mut out = format!("{ALIGNMENT_HEADER}\n");
    for r in records {
        for (h, a) in r.heads.iter().enumerate() {
            let _ = writeln!(out, "{},{h},{},{},{}", r.clip_id, a.frame, a.seconds, a.score);
        }
    }
    out
}

/// Attended vectors as `AVEC`, one row per (clip, head) with id `clip/head`.
pub fn encode_vectors(records: &[AlignmentRecord]) -> Result<Vec<u8>> {
    let rows: Vec<(String, &[f64])> = records
        .iter()
        .flat_map(|r| {
            r.heads
                .iter()
                .enumerate()
                .map(move |(h, a)| (format!("{}/{h}", r.clip_id), a.attended.as_slice()))
        })
        .collect();
    let dim = rows.first().map_or(0, |r| r.1.len());
    if rows.iter().any(|r| r.1.len() != dim) {
        return Err(Error::Consistency("attended vectors differ in length".into()));
    }
    let mut out = Vec::new();
    out.extend_from_slice(VECTORS_MAGIC);
    out.extend_from_slice(&(rows.len() as u32).to_le_bytes());
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    for (id, v) in rows {
        out.extend_from_slice(&(id.len() as u32).to_le_bytes());
        out.extend_from_slice(id.as_bytes());
        for x in v {
            out.extend_from_slice(&(*x as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_vectors(path: &Path, bytes: &[u8]) -> Result<Vec<(String, Vec<f32>)>> {
    let bad = |detail: &str| Error::Format {
        path: path.to_path_buf(),
        detail: detail.to_string(),
    };
    let mut pos = 0;
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = bytes.get(pos..pos + n).ok_or_else(|| bad("truncated vector file"))?;
        pos += n;
        Ok(s)
    };
    if take(4)? != VECTORS_MAGIC {
        return Err(bad("not an attended-vector file"));
    }
    let u32_at = |s: &[u8]| u32::from_le_bytes(s.try_into().expect("4 bytes")) as usize;
    let count = u32_at(take(4)?);
    let dim = u32_at(take(4)?);
    let mut rows = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let len = u32_at(take(4)?);
        let id = String::from_utf8(take(len)?.to_vec()).map_err(|_| bad("row id is not UTF-8"))?;
        let v = take(4 * dim)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        rows.push((id, v));
    }
    if pos != bytes.len() {
        return Err(bad("trailing bytes after the last row"));
    }
    Ok(rows)
}

pub fn read_vectors(path: &Path) -> Result<Vec<(String, Vec<f32>)>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_vectors(path, &bytes)
}

/// Which (clip, head) pairs get a WAV snippet.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SnippetSelection {
    All,
    /// The `k` highest-scoring clips of each head.
    TopK(usize),
}

/// Start and length in samples of a window of `len_s` seconds centred on `t`,
/// shifted to stay inside the clip.
pub fn snippet_window(t: f64, len_s: f64, sample_rate: u32, total: usize) -> (usize, usize) {
    let len = ((len_s * sample_rate as f64).round() as usize).min(total);
    let centre = (t * sample_rate as f64).round() as isize;
    let start = (centre - (len / 2) as isize).clamp(0, (total - len) as isize) as usize;
    (start, len)
}

fn write_snippets<S: Scalar>(
    dir: &Path,
    records: &[AlignmentRecord],
    index: &DatasetIndex,
    store: &FeatureStore<S>,
    selection: SnippetSelection,
) -> Result<usize> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let heads = records.first().map_or(0, |r| r.heads.len());
    let mut chosen: Vec<(usize, usize)> = Vec::new();
    for h in 0..heads {
        let mut order: Vec<usize> = (0..records.len()).collect();
        if let SnippetSelection::TopK(k) = selection {
            order.sort_by(|&a, &b| records[b].heads[h].score.total_cmp(&records[a].heads[h].score));
            order.truncate(k);
            order.sort_unstable();
        }
        chosen.extend(order.into_iter().map(|r| (r, h)));
    }
    chosen.sort_unstable();
    let first_example: BTreeMap<String, usize> = index.clips().into_iter().map(|(c, ids)| (c, ids[0])).collect();
    let sr = store.config().sample_rate;
    chosen
        .par_iter()
        .map(|&(r, h)| {
            let rec = &records[r];
            let wave = store.waveform(&index.examples[first_example[&rec.clip_id]])?;
            let (start, len) = snippet_window(rec.heads[h].seconds, 1.0, sr, wave.len());
            let path = dir.join(format!("{}_h{h}.wav", rec.clip_id));
            write_wav(&path, &AudioClip::mono(sr, wave[start..start + len].to_vec()))
        })
        .collect::<Result<Vec<()>>>()?;
    Ok(chosen.len())
}

#[derive(Debug, Clone)]
pub struct ExportSummary {
    pub records: Vec<AlignmentRecord>,
    pub snippets: usize,
}

/// Writes `alignments.csv`, `attended.avec` and optionally 1 s WAV snippets
/// under `out_dir/snippets`.
pub fn export_alignments<S: Scalar>(
    model: &SceneModel<S>,
    index: &DatasetIndex,
    store: &FeatureStore<S>,
    out_dir: &Path,
    snippets: Option<SnippetSelection>,
) -> Result<ExportSummary> {
    let records = align_split(model, index, store)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let csv = out_dir.join("alignments.csv");
    std::fs::write(&csv, alignment_csv(&records)).map_err(|e| Error::io(&csv, e))?;
    let vec_path = out_dir.join("attended.avec");
    std::fs::write(&vec_path, encode_vectors(&records)?).map_err(|e| Error::io(&vec_path, e))?;
    let snippets = match snippets {
        Some(sel) => write_snippets(&out_dir.join("snippets"), &records, index, store, sel)?,
        None => 0,
    };
    Ok(ExportSummary { records, snippets })
}

/// Ground-truth intervals by clip id; an input error when the split has none.
pub fn ground_truth(index: &DatasetIndex) -> Result<BTreeMap<String, Vec<EventInterval>>> {
    let mut out = BTreeMap::new();
    for ex in &index.examples {
        match &ex.events {
            Some(ev) => {
                out.entry(ex.clip_id.clone()).or_insert_with(|| ev.clone());
            }
            None => {
                return Err(Error::Input(format!(
                    "clip {:?} has no ground-truth events",
                    ex.clip_id
                )))
            }
        }
    }
    if out.is_empty() {
        return Err(Error::Input("no ground-truth events available".into()));
    }
    Ok(out)
}

fn landed_type(events: &[EventInterval], t: f64) -> Option<usize> {
    events.iter().find(|e| e.contains(t)).map(|e| e.event_type)
}

fn events_of<'a>(truth: &'a BTreeMap<String, Vec<EventInterval>>, clip: &str) -> Result<&'a [EventInterval]> {
    truth
        .get(clip)
        .map(Vec::as_slice)
        .ok_or_else(|| Error::Input(format!("no ground-truth events for clip {clip:?}")))
}

/// Fraction of (clip, head) argmax timestamps inside a true event interval.
pub fn landing_rate(records: &[AlignmentRecord], truth: &BTreeMap<String, Vec<EventInterval>>) -> Result<f64> {
    let (mut hit, mut total) = (0usize, 0usize);
    for r in records {
        let ev = events_of(truth, &r.clip_id)?;
        for a in &r.heads {
            total += 1;
            hit += usize::from(landed_type(ev, a.seconds).is_some());
        }
    }
    if total == 0 {
        return Err(Error::Input("no alignments to score".into()));
    }
    Ok(hit as f64 / total as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadPurity {
    /// Landings per event type.
    pub histogram: Vec<usize>,
    /// Share of the head's landings in its most frequent type; `None` if the
    /// head never landed inside an event.
    pub purity: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PurityReport {
    pub heads: Vec<HeadPurity>,
    /// Mean over heads that landed at least once.
    pub mean_purity: f64,
}

pub fn alignment_purity(
    records: &[AlignmentRecord],
    truth: &BTreeMap<String, Vec<EventInterval>>,
    n_event_types: usize,
) -> Result<PurityReport> {
    if truth.is_empty() {
        return Err(Error::Input("no ground-truth events available".into()));
    }
    let n_heads = records.first().map_or(0, |r| r.heads.len());
    let mut hist = vec![vec![0usize; n_event_types]; n_heads];
    for r in records {
        let ev = events_of(truth, &r.clip_id)?;
        for (h, a) in r.heads.iter().enumerate() {
            if let Some(ty) = landed_type(ev, a.seconds) {
                let slot = hist[h].get_mut(ty).ok_or(Error::Index {
                    what: "event type",
                    index: ty,
                    len: n_event_types,
                })?;
                *slot += 1;
            }
        }
    }
    Ok(purity_from_histograms(hist))
}

pub fn purity_from_histograms(hist: Vec<Vec<usize>>) -> PurityReport {
    let heads: Vec<HeadPurity> = hist
        .into_iter()
        .map(|histogram| {
            let total: usize = histogram.iter().sum();
            let top = histogram.iter().copied().max().unwrap_or(0);
            HeadPurity {
                purity: (total > 0).then(|| top as f64 / total as f64),
                histogram,
            }
        })
        .collect();
    let landed: Vec<f64> = heads.iter().filter_map(|h| h.purity).collect();
    let mean_purity = if landed.is_empty() {
        0.0
    } else {
        landed.iter().sum::<f64>() / landed.len() as f64
    };
    PurityReport { heads, mean_purity }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(clip: &str, seconds: &[f64]) -> AlignmentRecord {
        AlignmentRecord {
            clip_id: clip.into(),
            duration_s: 4.0,
            heads: seconds
                .iter()
                .map(|&s| HeadAlignment {
                    frame: 0,
                    seconds: s,
                    score: 1.0,
                    scores: vec![1.0],
                    attended: vec![s, -s],
                })
                .collect(),
        }
    }

    fn ev(ty: usize, on: f64, off: f64) -> EventInterval {
        EventInterval {
            event_type: ty,
            onset_s: on,
            offset_s: off,
        }
    }

    #[test]
    fn purity_extremes() {
        assert_eq!(purity_from_histograms(vec![vec![0, 7, 0]]).mean_purity, 1.0);
        assert_eq!(purity_from_histograms(vec![vec![3, 3, 3, 3]]).mean_purity, 0.25);
        let r = purity_from_histograms(vec![vec![0, 0], vec![2, 2]]);
        assert_eq!(r.heads[0].purity, None);
        assert_eq!(r.mean_purity, 0.5);
    }

    #[test]
    fn landing_and_purity_from_records() {
        let truth: BTreeMap<String, Vec<EventInterval>> = [
            ("a".to_string(), vec![ev(0, 0.5, 1.0), ev(2, 2.0, 3.0)]),
            ("b".to_string(), vec![ev(0, 1.0, 1.5)]),
        ]
        .into();
        let recs = vec![record("a", &[0.7, 2.5]), record("b", &[1.2, 3.9])];
        assert_eq!(landing_rate(&recs, &truth).unwrap(), 0.75);
        let p = alignment_purity(&recs, &truth, 3).unwrap();
        assert_eq!(p.heads[0].histogram, vec![2, 0, 0]);
        assert_eq!(p.heads[1].histogram, vec![0, 0, 1]);
        assert_eq!(p.mean_purity, 1.0);
        assert!(alignment_purity(&recs, &BTreeMap::new(), 3).is_err());
        assert!(landing_rate(&[record("zzz", &[0.0])], &truth).is_err());
    }

    #[test]
    fn csv_and_vectors() {
        let recs = vec![record("a", &[0.5, 1.0]), record("b", &[2.0, 3.0])];
        let csv = alignment_csv(&recs);
        assert_eq!(csv.lines().count(), 1 + 4);
        let bytes = encode_vectors(&recs).unwrap();
        let rows = decode_vectors(Path::new("x"), &bytes).unwrap();
        assert_eq!(rows.len(), 4);
        assert_eq!(rows[3], ("b/1".to_string(), vec![3.0, -3.0]));
        assert!(decode_vectors(Path::new("x"), &bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn snippet_windows_stay_inside() {
        assert_eq!(snippet_window(2.0, 1.0, 100, 1000), (150, 100));
        assert_eq!(snippet_window(0.1, 1.0, 100, 1000), (0, 100));
        assert_eq!(snippet_window(9.9, 1.0, 100, 1000), (900, 100));
        assert_eq!(snippet_window(0.3, 1.0, 100, 50), (0, 50));
    }
}
