use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::Rng;

use super::manifest::{read_events, read_manifest, EventInterval, ManifestRow};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Dev,
    Eval,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Eval];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Eval => "eval",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.as_str() == s)
    }

    /// Manifest file name of this split inside a dataset directory.
    pub fn manifest_name(self) -> String {
        format!("{}.csv", self.as_str())
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One labeled `(clip, channel)` training unit.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneExample {
    pub clip_id: String,
    pub channel: usize,
    pub class_index: usize,
    /// Absolute path of the WAV or cached-feature file.
    pub source: PathBuf,
    /// Ground-truth event intervals, when known (synthetic corpora only).
    pub events: Option<Vec<EventInterval>>,
}

#[derive(Debug, Clone)]
pub struct DatasetIndex {
    pub split: Split,
    pub n_classes: usize,
    pub examples: Vec<SceneExample>,
    /// Example indices grouped by class.
    pub by_class: Vec<Vec<usize>>,
}

impl DatasetIndex {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        self.by_class.iter().map(Vec::len).collect()
    }

    pub fn clip_ids(&self) -> BTreeSet<&str> {
        self.examples.iter().map(|e| e.clip_id.as_str()).collect()
    }

    /// Examples grouped by clip, in first-appearance order.
    pub fn clips(&self) -> Vec<(String, Vec<usize>)> {
        let mut order: Vec<String> = Vec::new();
        let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, e) in self.examples.iter().enumerate() {
            let g = groups.entry(&e.clip_id).or_default();
            if g.is_empty() {
                order.push(e.clip_id.clone());
            }
            g.push(i);
        }
        order
            .into_iter()
            .map(|id| {
                let g = groups.remove(id.as_str()).expect("grouped above");
                (id, g)
            })
            .collect()
    }
}

/// Builds an index from manifest rows. `base_dir` resolves relative paths and
/// `events` attaches ground truth by clip id.
pub fn index_dataset(
    rows: &[ManifestRow],
    n_classes: usize,
    split: Split,
    base_dir: &Path,
    events: Option<&BTreeMap<String, Vec<EventInterval>>>,
) -> Result<DatasetIndex> {
    let mut seen = HashSet::new();
    let mut clip_class: BTreeMap<&str, usize> = BTreeMap::new();
    let mut unknown = BTreeSet::new();
    for r in rows {
        if r.class_index >= n_classes {
            unknown.insert(r.class_index);
        }
        if !seen.insert((r.clip_id.as_str(), r.channel)) {
            return Err(Error::Input(format!(
                "duplicate manifest row for clip {:?} channel {}",
                r.clip_id, r.channel
            )));
        }
        if let Some(&c) = clip_class.get(r.clip_id.as_str()) {
            if c != r.class_index {
                return Err(Error::Input(format!(
                    "clip {:?} is labeled both {c} and {}",
                    r.clip_id, r.class_index
                )));
            }
        }
        clip_class.insert(&r.clip_id, r.class_index);
    }
    if !unknown.is_empty() {
        let labels: Vec<String> = unknown.iter().map(ToString::to_string).collect();
        return Err(Error::Input(format!(
            "unknown class label(s) {} (expected 0..{n_classes})",
            labels.join(", ")
        )));
    }

    let mut by_class = vec![Vec::new(); n_classes];
    let examples: Vec<SceneExample> = rows
        .iter()
        .enumerate()
        .map(|(i, r)| {
            by_class[r.class_index].push(i);
            SceneExample {
                clip_id: r.clip_id.clone(),
                channel: r.channel,
                class_index: r.class_index,
                source: base_dir.join(&r.path),
                events: events.and_then(|e| e.get(&r.clip_id).cloned()),
            }
        })
        .collect();
    Ok(DatasetIndex {
        split,
        n_classes,
        examples,
        by_class,
    })
}

/// Loads `<dir>/<split>.csv` (and `<dir>/events.csv` when present).
pub fn load_split(dir: &Path, split: Split, n_classes: usize) -> Result<DatasetIndex> {
    let manifest = dir.join(split.manifest_name());
    if !manifest.exists() {
        return Err(Error::Data(format!(
            "dataset {} has no {} split (missing {})",
            dir.display(),
            split,
            manifest.display()
        )));
    }
    let rows = read_manifest(&manifest)?;
    let events_path = dir.join("events.csv");
    let events = if events_path.exists() {
        Some(read_events(&events_path)?)
    } else {
        None
    };
    index_dataset(&rows, n_classes, split, dir, events.as_ref())
}

/// Fails unless no clip id appears in more than one index.
pub fn check_disjoint(indices: &[&DatasetIndex]) -> Result<()> {
    let mut owner: BTreeMap<&str, Split> = BTreeMap::new();
    for idx in indices {
        for id in idx.clip_ids() {
            if let Some(prev) = owner.insert(id, idx.split) {
                if prev != idx.split {
                    return Err(Error::Input(format!(
                        "clip {id:?} appears in both {prev} and {} splits",
                        idx.split
                    )));
                }
            }
        }
    }
    Ok(())
}

/// One row per channel for each clip-level row: the channel-independent
/// treatment of multi-channel recordings.
pub fn expand_channels(clips: &[ManifestRow], channels: usize) -> Vec<ManifestRow> {
    clips
        .iter()
        .flat_map(|r| {
            (0..channels).map(move |c| ManifestRow {
                channel: c,
                ..r.clone()
            })
        })
        .collect()
}

/// Classes with fewer than half as many examples as the largest class.
pub fn minority_classes(counts: &[usize]) -> Vec<usize> {
    let max = counts.iter().copied().max().unwrap_or(0);
    counts
        .iter()
        .enumerate()
        .filter(|&(_, &c)| 2 * c < max)
        .map(|(i, _)| i)
        .collect()
}

/// Class-balanced epoch: every class contributes exactly as many examples as
/// the smallest class, drawn without replacement, then shuffled.
pub fn epoch_sampler<R: Rng + ?Sized>(index: &DatasetIndex, rng: &mut R) -> Result<Vec<usize>> {
    if let Some(c) = index.by_class.iter().position(Vec::is_empty) {
        return Err(Error::Config(format!(
            "class {c} has no {} examples; a balanced epoch is impossible",
            index.split
        )));
    }
    let per_class = index.by_class.iter().map(Vec::len).min().unwrap_or(0);
    let mut epoch = Vec::with_capacity(per_class * index.n_classes);
    for members in &index.by_class {
        epoch.extend(sample(rng, members.len(), per_class).into_iter().map(|i| members[i]));
    }
    epoch.shuffle(rng);
    Ok(epoch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rows(counts: &[usize]) -> Vec<ManifestRow> {
        counts
            .iter()
            .enumerate()
            .flat_map(|(c, &n)| {
                (0..n).map(move |i| ManifestRow {
                    clip_id: format!("c{c}_{i}"),
                    channel: 0,
                    class_index: c,
                    path: format!("{c}_{i}.wav"),
                })
            })
            .collect()
    }

    fn index(counts: &[usize]) -> DatasetIndex {
        index_dataset(&rows(counts), counts.len(), Split::Train, Path::new("/d"), None).unwrap()
    }

    #[test]
    fn empty_manifest_gives_empty_index() {
        let idx = index_dataset(&[], 9, Split::Dev, Path::new("."), None).unwrap();
        assert!(idx.is_empty());
        assert_eq!(idx.class_counts(), vec![0; 9]);
    }

    #[test]
    fn duplicate_rows_and_unknown_labels_are_rejected() {
        let mut r = rows(&[2, 1]);
        r.push(r[0].clone());
        assert!(index_dataset(&r, 2, Split::Train, Path::new("."), None).is_err());
        let err = index_dataset(&rows(&[1, 1, 1]), 2, Split::Train, Path::new("."), None)
            .unwrap_err()
            .to_string();
        assert!(err.contains("unknown class label(s) 2"), "{err}");
    }

    #[test]
    fn channel_expansion_counts() {
        let clips = rows(&[3, 2]);
        let expanded = expand_channels(&clips, 4);
        assert_eq!(expanded.len(), 20);
        let idx = index_dataset(&expanded, 2, Split::Train, Path::new("."), None).unwrap();
        assert_eq!(idx.class_counts(), vec![12, 8]);
        assert_eq!(idx.clips().len(), 5);
    }

    #[test]
    fn small_enumeration_epoch() {
        let idx = index(&[3, 5]);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let epoch = epoch_sampler(&idx, &mut rng).unwrap();
        assert_eq!(epoch.len(), 6);
        let a: BTreeSet<usize> = epoch.iter().copied().filter(|&i| i < 3).collect();
        assert_eq!(a, BTreeSet::from([0, 1, 2]));
        let b: BTreeSet<usize> = epoch.iter().copied().filter(|&i| i >= 3).collect();
        assert_eq!(b.len(), 3);
        assert!(b.iter().all(|&i| (3..8).contains(&i)));
    }

    #[test]
    fn equal_classes_visit_everything_once() {
        let idx = index(&[4, 4, 4]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut epoch = epoch_sampler(&idx, &mut rng).unwrap();
        epoch.sort_unstable();
        assert_eq!(epoch, (0..12).collect::<Vec<_>>());
    }

    #[test]
    fn empty_class_is_a_config_error() {
        let idx = index(&[2, 0, 1]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(matches!(epoch_sampler(&idx, &mut rng), Err(Error::Config(_))));
    }

    #[test]
    fn minority_rule_on_household_counts() {
        let counts = [18860, 5124, 1424, 2308, 2060, 4944, 972, 18648, 18644];
        assert_eq!(minority_classes(&counts), vec![1, 2, 3, 4, 5, 6]);
        assert!(minority_classes(&[5, 5, 5]).is_empty());
    }

    #[test]
    fn disjointness_check() {
        let a = index(&[1, 1]);
        let mut b = a.clone();
        b.split = Split::Dev;
        assert!(check_disjoint(&[&a, &b]).is_err());
        assert!(check_disjoint(&[&a]).is_ok());
    }
}
