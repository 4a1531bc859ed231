//! Line-delimited JSON dataset files.
//!
//! The first line is a header `{"format_version", "spec", "seed", "count"}`;
//! each following line is one [`Situation`].

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::scene::SceneSpec;
use super::types::Situation;
use crate::error::{Error, Result};

pub const DATASET_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: SceneSpec,
    pub seed: u64,
    pub situations: Vec<Situation>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    spec: SceneSpec,
    seed: u64,
    count: usize,
}

impl Dataset {
    pub fn to_jsonl(&self) -> String {
        let header = Header {
            format_version: DATASET_FORMAT_VERSION,
            spec: self.spec.clone(),
            seed: self.seed,
            count: self.situations.len(),
        };
        let mut out = serde_json::to_string(&header).expect("header serializes");
        out.push('\n');
        for s in &self.situations {
            out.push_str(&serde_json::to_string(s).expect("situation serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let (_, first) = lines.next().ok_or(Error::Parse {
            line: 1,
            column: 0,
            message: "empty dataset file".into(),
        })?;
        let raw: serde_json::Value = serde_json::from_str(first).map_err(|e| parse_error(1, e))?;
        let version = raw
            .get("format_version")
            .and_then(|v| v.as_u64())
            .ok_or(Error::Parse {
                line: 1,
                column: 0,
                message: "header has no format_version".into(),
            })?;
        if version != u64::from(DATASET_FORMAT_VERSION) {
            return Err(Error::Version {
                found: version as u32,
                expected: DATASET_FORMAT_VERSION,
            });
        }
        let header: Header = serde_json::from_value(raw).map_err(|e| Error::Parse {
            line: 1,
            column: 0,
            message: e.to_string(),
        })?;
        let mut situations = Vec::with_capacity(header.count);
        let mut last_line = 1;
        for (i, line) in lines {
            last_line = i + 1;
            if line.is_empty() {
                continue;
            }
            situations.push(serde_json::from_str(line).map_err(|e| parse_error(i + 1, e))?);
        }
        if situations.len() != header.count {
            return Err(Error::Parse {
                line: last_line,
                column: 0,
                message: format!(
                    "header announces {} situations, file has {} (truncated?)",
                    header.count,
                    situations.len()
                ),
            });
        }
        Ok(Self {
            spec: header.spec,
            seed: header.seed,
            situations,
        })
    }
}

fn parse_error(line: usize, e: serde_json::Error) -> Error {
    Error::Parse {
        line,
        column: e.column(),
        message: e.to_string(),
    }
}

/// Writes via a temporary file and rename, so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let file_name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = dir.join(format!(".{file_name}.tmp-{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn save_dataset(path: &Path, dataset: &Dataset) -> Result<()> {
    write_atomic(path, dataset.to_jsonl().as_bytes())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Dataset::from_jsonl(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, scene::bundled_scene};

    fn small(name: &str) -> Dataset {
        let mut spec = bundled_scene(name).unwrap();
        spec.n_samples = 20;
        Dataset {
            situations: generate(&spec).unwrap(),
            seed: spec.seed,
            spec,
        }
    }

    #[test]
    fn round_trip_is_exact() {
        for name in ["bimodal_sigma015", "branching_scene3"] {
            let ds = small(name);
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("d.jsonl");
            save_dataset(&path, &ds).unwrap();
            let back = load_dataset(&path).unwrap();
            assert_eq!(back, ds);
            // Bit-exact floats.
            for (a, b) in back.situations.iter().zip(&ds.situations) {
                for (p, q) in a.future.iter().zip(&b.future) {
                    assert_eq!(p[0].to_bits(), q[0].to_bits());
                    assert_eq!(p[1].to_bits(), q[1].to_bits());
                }
            }
        }
    }

    #[test]
    fn truncated_file_is_parse_error() {
        let text = small("bimodal_sigma005").to_jsonl();
        let cut = &text[..text.len() - 40];
        assert!(matches!(Dataset::from_jsonl(cut), Err(Error::Parse { .. })));
        // Truncation on a line boundary is caught by the announced count.
        let lines: Vec<&str> = text.lines().collect();
        let cut = lines[..lines.len() - 3].join("\n");
        assert!(matches!(Dataset::from_jsonl(&cut), Err(Error::Parse { .. })));
    }

    #[test]
    fn malformed_line_reports_position() {
        let text = small("bimodal_sigma005").to_jsonl();
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        lines[3] = "{\"scene_id\": 3,".into();
        match Dataset::from_jsonl(&lines.join("\n")) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn version_mismatch() {
        let text = small("bimodal_sigma005")
            .to_jsonl()
            .replacen("\"format_version\":1", "\"format_version\":7", 1);
        assert!(matches!(
            Dataset::from_jsonl(&text),
            Err(Error::Version { found: 7, expected: 1 })
        ));
    }
}
