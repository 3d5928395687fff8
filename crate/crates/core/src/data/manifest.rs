//! Manifest (`clip_id,channel,class_index,path`) and event (`clip_id,event_type,onset_s,offset_s`) CSV files.

use std::collections::BTreeMap;
use std::fs::File;
use std::path::Path;

use crate::error::{Error, Result};

pub const MANIFEST_HEADER: [&str; 4] = ["clip_id", "channel", "class_index", "path"];
pub const EVENTS_HEADER: [&str; 4] = ["clip_id", "event_type", "onset_s", "offset_s"];

/// One `(clip, channel)` entry; `path` is relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRow {
    pub clip_id: String,
    pub channel: usize,
    pub class_index: usize,
    pub path: String,
}

/// A ground-truth event interval inside a clip.
#[derive(Debug, Clone, PartialEq)]
pub struct EventInterval {
    pub event_type: usize,
    pub onset_s: f64,
    pub offset_s: f64,
}

impl EventInterval {
    pub fn contains(&self, t: f64) -> bool {
        t >= self.onset_s && t <= self.offset_s
    }
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(source) => Error::io(path, source),
            _ => unreachable!("checked is_io_error"),
        }
    } else {
        Error::Format {
            path: path.to_path_buf(),
            detail: e.to_string(),
        }
    }
}

fn open_csv(path: &Path, header: &[&str]) -> Result<csv::Reader<File>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let found: Vec<String> = reader
        .headers()
        .map_err(|e| csv_error(path, e))?
        .iter()
        .map(str::to_string)
        .collect();
    if found != header {
        return Err(Error::Format {
            path: path.to_path_buf(),
            detail: format!("expected header {}, found {}", header.join(","), found.join(",")),
        });
    }
    Ok(reader)
}

fn field<T: std::str::FromStr>(path: &Path, line: usize, name: &str, raw: &str) -> Result<T> {
    raw.parse().map_err(|_| Error::Format {
        path: path.to_path_buf(),
        detail: format!("line {line}: cannot parse {name} from {raw:?}"),
    })
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestRow>> {
    let path = path.as_ref();
    let mut reader = open_csv(path, &MANIFEST_HEADER)?;
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let line = i + 2;
        rows.push(ManifestRow {
            clip_id: rec[0].to_string(),
            channel: field(path, line, "channel", &rec[1])?,
            class_index: field(path, line, "class_index", &rec[2])?,
            path: rec[3].to_string(),
        });
    }
    Ok(rows)
}

pub fn write_manifest(path: impl AsRef<Path>, rows: &[ManifestRow]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(MANIFEST_HEADER).map_err(|e| csv_error(path, e))?;
    for r in rows {
        w.write_record([
            r.clip_id.as_str(),
            &r.channel.to_string(),
            &r.class_index.to_string(),
            r.path.as_str(),
        ])
        .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads the events file into per-clip interval lists (file order kept).
pub fn read_events(path: impl AsRef<Path>) -> Result<BTreeMap<String, Vec<EventInterval>>> {
    let path = path.as_ref();
    let mut reader = open_csv(path, &EVENTS_HEADER)?;
    let mut out: BTreeMap<String, Vec<EventInterval>> = BTreeMap::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let line = i + 2;
        let ev = EventInterval {
            event_type: field(path, line, "event_type", &rec[1])?,
            onset_s: field(path, line, "onset_s", &rec[2])?,
            offset_s: field(path, line, "offset_s", &rec[3])?,
        };
        if !(ev.onset_s >= 0.0 && ev.onset_s < ev.offset_s) {
            return Err(Error::Format {
                path: path.to_path_buf(),
                detail: format!("line {line}: need 0 <= onset < offset, got {ev:?}"),
            });
        }
        out.entry(rec[0].to_string()).or_default().push(ev);
    }
    Ok(out)
}

pub fn write_events(path: impl AsRef<Path>, events: &[(String, EventInterval)]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(EVENTS_HEADER).map_err(|e| csv_error(path, e))?;
    for (clip, ev) in events {
        w.write_record([
            clip.as_str(),
            &ev.event_type.to_string(),
            &format!("{:.6}", ev.onset_s),
            &format!("{:.6}", ev.offset_s),
        ])
        .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_roundtrip_and_header_check() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        let rows = vec![
            ManifestRow {
                clip_id: "a".into(),
                channel: 0,
                class_index: 3,
                path: "wav/a.wav".into(),
            },
            ManifestRow {
                clip_id: "a".into(),
                channel: 1,
                class_index: 3,
                path: "wav/a.wav".into(),
            },
        ];
        write_manifest(&p, &rows).unwrap();
        assert_eq!(read_manifest(&p).unwrap(), rows);

        std::fs::write(&p, "id,chan,cls,path\n").unwrap();
        assert!(matches!(read_manifest(&p), Err(Error::Format { .. })));
    }

    #[test]
    fn events_reject_inverted_interval() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.csv");
        std::fs::write(&p, "clip_id,event_type,onset_s,offset_s\nc,1,2.0,1.0\n").unwrap();
        assert!(read_events(&p).is_err());
        std::fs::write(&p, "clip_id,event_type,onset_s,offset_s\nc,1,0.5,1.0\nc,2,3,4\n").unwrap();
        let ev = read_events(&p).unwrap();
        assert_eq!(ev["c"].len(), 2);
        assert!(ev["c"][0].contains(0.75));
    }
}
