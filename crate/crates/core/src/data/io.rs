//! Line-delimited JSON dataset files.
//!
//! Line 1 is a `meta` record, followed by one `item` record per catalog item
//! and one `session` record per session. Sessions refer to catalog items by
//! `item_id`. Floats are written in shortest round-trip form.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{
    Action, BehaviorEvent, Dataset, DatasetMeta, Item, Query, SessionExample, UserProfile,
};
use crate::error::DataError;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum Record {
    Meta(DatasetMeta),
    Item(Item),
    Session(SessionRecord),
}

#[derive(Serialize, Deserialize)]
struct EventRecord {
    item_id: usize,
    action: Action,
    frequency: u32,
    recency: f64,
    category_id: usize,
}

#[derive(Serialize, Deserialize)]
struct SessionRecord {
    query: Query,
    user: UserProfile,
    history: Vec<EventRecord>,
    candidates: Vec<usize>,
    click_labels: Vec<u8>,
    conversion_labels: Vec<u8>,
}

impl SessionRecord {
    fn from_session(s: &SessionExample) -> Self {
        SessionRecord {
            query: s.query.clone(),
            user: s.user,
            history: s
                .history
                .iter()
                .map(|e| EventRecord {
                    item_id: e.item.item_id,
                    action: e.action,
                    frequency: e.frequency,
                    recency: e.recency,
                    category_id: e.category_id,
                })
                .collect(),
            candidates: s.candidates.iter().map(|i| i.item_id).collect(),
            click_labels: s.click_labels.clone(),
            conversion_labels: s.conversion_labels.clone(),
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn to_line(record: &Record) -> String {
    serde_json::to_string(record).expect("records always serialize")
}

/// Writes a dataset; identical datasets produce identical bytes.
pub fn write_dataset<W: Write>(mut w: W, ds: &Dataset) -> std::io::Result<()> {
    writeln!(w, "{}", to_line(&Record::Meta(ds.meta.clone())))?;
    for item in &ds.catalog {
        writeln!(w, "{}", to_line(&Record::Item(item.as_ref().clone())))?;
    }
    for s in &ds.sessions {
        writeln!(w, "{}", to_line(&Record::Session(SessionRecord::from_session(s))))?;
    }
    w.flush()
}

pub fn save_dataset(path: &Path, ds: &Dataset) -> Result<(), DataError> {
    let file = File::create(path).map_err(io_err(path))?;
    write_dataset(BufWriter::new(file), ds).map_err(io_err(path))
}

pub fn load_dataset(path: &Path) -> Result<Dataset, DataError> {
    let file = File::open(path).map_err(io_err(path))?;
    read_dataset(file).map_err(|e| match e {
        DataError::Io { source, .. } => DataError::Io {
            path: path.to_path_buf(),
            source,
        },
        other => other,
    })
}

pub fn read_dataset<R: Read>(r: R) -> Result<Dataset, DataError> {
    let mut meta: Option<DatasetMeta> = None;
    let mut catalog = Vec::new();
    let mut by_id: HashMap<usize, Arc<Item>> = HashMap::new();
    let mut sessions = Vec::new();

    for (i, line) in BufReader::new(r).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|source| DataError::Io {
            path: Default::default(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let record: Record = serde_json::from_str(&line).map_err(|e| DataError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let parse = |message: String| DataError::Parse {
            line: line_no,
            message,
        };
        match record {
            Record::Meta(m) => {
                if meta.is_some() {
                    return Err(parse("duplicate meta record".into()));
                }
                if m.format_version != FORMAT_VERSION {
                    return Err(DataError::Version {
                        found: m.format_version,
                        expected: FORMAT_VERSION,
                    });
                }
                meta = Some(m);
            }
            Record::Item(item) => {
                let m = meta
                    .as_ref()
                    .ok_or_else(|| parse("item before meta record".into()))?;
                item.validate(&m.vocab, m.image_dim).map_err(|message| {
                    DataError::Validation {
                        line: line_no,
                        message,
                    }
                })?;
                let item = Arc::new(item);
                if by_id.insert(item.item_id, item.clone()).is_some() {
                    return Err(parse(format!("duplicate item_id {}", item.item_id)));
                }
                catalog.push(item);
            }
            Record::Session(rec) => {
                let m = meta
                    .as_ref()
                    .ok_or_else(|| parse("session before meta record".into()))?;
                let lookup = |id: usize| {
                    by_id
                        .get(&id)
                        .cloned()
                        .ok_or_else(|| parse(format!("unknown item_id {id}")))
                };
                let history = rec
                    .history
                    .into_iter()
                    .map(|e| {
                        Ok(BehaviorEvent {
                            item: lookup(e.item_id)?,
                            action: e.action,
                            frequency: e.frequency,
                            recency: e.recency,
                            category_id: e.category_id,
                        })
                    })
                    .collect::<Result<Vec<_>, DataError>>()?;
                let candidates = rec
                    .candidates
                    .into_iter()
                    .map(lookup)
                    .collect::<Result<Vec<_>, DataError>>()?;
                let session = SessionExample {
                    query: rec.query,
                    user: rec.user,
                    history,
                    candidates,
                    click_labels: rec.click_labels,
                    conversion_labels: rec.conversion_labels,
                };
                session
                    .validate(m)
                    .map_err(|message| DataError::Validation {
                        line: line_no,
                        message,
                    })?;
                sessions.push(session);
            }
        }
    }
    let meta = meta.ok_or(DataError::Parse {
        line: 1,
        message: "missing meta record".into(),
    })?;
    Ok(Dataset {
        meta,
        catalog,
        sessions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_dataset, GeneratorConfig};

    fn tiny() -> Dataset {
        let cfg = GeneratorConfig {
            sessions: 12,
            catalog_size: 120,
            max_history: 10,
            ..GeneratorConfig::default()
        };
        gen_dataset(&cfg, 7).unwrap()
    }

    fn bytes(ds: &Dataset) -> Vec<u8> {
        let mut out = Vec::new();
        write_dataset(&mut out, ds).unwrap();
        out
    }

    #[test]
    fn roundtrip_is_exact() {
        let ds = tiny();
        let back = read_dataset(&bytes(&ds)[..]).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn truncated_file_fails_on_last_line() {
        let mut b = bytes(&tiny());
        b.truncate(b.len() - 40);
        let lines = b.split(|&c| c == b'\n').count();
        match read_dataset(&b[..]) {
            Err(DataError::Parse { line, .. }) => assert_eq!(line, lines),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn short_candidate_list_rejected() {
        let mut ds = tiny();
        ds.sessions[0].candidates.pop();
        ds.sessions[0].click_labels.pop();
        ds.sessions[0].conversion_labels.pop();
        match read_dataset(&bytes(&ds)[..]) {
            Err(e @ DataError::Validation { .. }) => {
                assert!(e.to_string().contains("candidates != 30"), "{e}")
            }
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn missing_field_is_named() {
        let text = String::from_utf8(bytes(&tiny())).unwrap();
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        let last = lines.len() - 1;
        lines[last] = lines[last].replace("\"click_labels\"", "\"clicks\"");
        let joined = lines.join("\n");
        let err = read_dataset(joined.as_bytes()).unwrap_err();
        assert!(err.to_string().contains("click_labels"), "{err}");
    }

    #[test]
    fn version_checked() {
        let text = String::from_utf8(bytes(&tiny())).unwrap();
        let text = text.replacen("\"format_version\":1", "\"format_version\":9", 1);
        assert!(matches!(
            read_dataset(text.as_bytes()),
            Err(DataError::Version { found: 9, .. })
        ));
    }
}
