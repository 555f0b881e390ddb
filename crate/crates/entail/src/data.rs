//! JSONL datasets, task specs and templates on disk.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use entail_core::corpus::{Dataset, LabeledExample, TaskSpec};
use entail_core::entailment::Template;
use serde::{Deserialize, Serialize};

use crate::error::{format, io, Result};

#[derive(Serialize, Deserialize)]
struct Line {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    id: Option<u64>,
    s1: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    s2: Option<String>,
    label: usize,
}

/// Parse `{s1, s2?, label, id?}` objects, one per line. A missing id
/// becomes the 1-based line number. Blank lines are skipped.
pub fn parse_jsonl(text: &str, spec: &TaskSpec) -> Result<Vec<LabeledExample>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let l: Line = serde_json::from_str(line).map_err(|e| format(format!("line {}: {e}", i + 1)))?;
        out.push(LabeledExample { id: l.id.unwrap_or(i as u64 + 1), s1: l.s1, s2: l.s2, label: l.label });
    }
    spec.check_examples(&out)?;
    Ok(out)
}

pub fn load_jsonl(path: &Path, spec: &TaskSpec) -> Result<Vec<LabeledExample>> {
    let text = fs::read_to_string(path).map_err(io(path))?;
    parse_jsonl(&text, spec).map_err(|e| match e {
        crate::Error::Core(c) => crate::Error::Core(prefix(c, path)),
        other => other,
    })
}

fn prefix(e: entail_core::Error, path: &Path) -> entail_core::Error {
    use entail_core::Error as E;
    let p = path.display();
    match e {
        E::Format(m) => E::Format(format!("{p}: {m}")),
        E::Validation(m) => E::Validation(format!("{p}: {m}")),
        other => other,
    }
}

pub fn write_jsonl(path: &Path, examples: &[LabeledExample]) -> Result<()> {
    let mut buf = Vec::new();
    for ex in examples {
        let l = Line { id: Some(ex.id), s1: ex.s1.clone(), s2: ex.s2.clone(), label: ex.label };
        serde_json::to_writer(&mut buf, &l).expect("serializable line");
        buf.push(b'\n');
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io(dir))?;
    }
    fs::File::create(path).and_then(|mut f| f.write_all(&buf)).map_err(io(path))
}

pub fn dataset_paths(dir: &Path, name: &str) -> (PathBuf, PathBuf) {
    (dir.join(format!("{name}.task.json")), dir.join(format!("{name}.jsonl")))
}

/// Write `<name>.task.json` and `<name>.jsonl` into `dir`.
pub fn save_dataset(dir: &Path, data: &Dataset) -> Result<()> {
    let (spec_path, data_path) = dataset_paths(dir, &data.spec.name);
    crate::write_json(&spec_path, &data.spec)?;
    write_jsonl(&data_path, &data.examples)
}

/// Load a task spec and its examples; the last quarter is the test split.
pub fn load_dataset(spec_path: &Path, data_path: &Path) -> Result<Dataset> {
    let spec: TaskSpec = crate::read_json(spec_path)?;
    spec.validate()?;
    let examples = load_jsonl(data_path, &spec)?;
    Ok(Dataset::with_test_tail(spec, examples))
}

pub fn load_template(path: &Path) -> Result<Template> {
    let t: Template = crate::read_json(path)?;
    t.validate()?;
    Ok(t)
}
