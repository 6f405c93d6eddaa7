use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use anyhow::{Context, Result};
use clueseek_core::jsonl::read_jsonl;
use clueseek_core::manifest::{load_manifests_jsonl, parse_manifest, Sample, VideoManifest};
use clueseek_core::rollout::PolicySpec;
use serde::Serialize;

/// Bad invocation detected after argument parsing; exits with 2.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

#[derive(Debug, Clone, PartialEq)]
pub enum PolicyArg {
    Oracle,
    Random,
    Scripted(std::path::PathBuf),
    Remote(String),
}

pub fn parse_policy(s: &str) -> Result<PolicyArg, String> {
    match s.split_once(':') {
        None if s == "oracle" => Ok(PolicyArg::Oracle),
        None if s == "random" => Ok(PolicyArg::Random),
        Some(("scripted", path)) if !path.is_empty() => Ok(PolicyArg::Scripted(path.into())),
        Some(("remote", url)) if !url.is_empty() => Ok(PolicyArg::Remote(url.into())),
        _ => Err("expected oracle, random, scripted:FILE or remote:URL".into()),
    }
}

impl PolicyArg {
    /// Script files hold one JSON string per line, one assistant message each.
    pub fn into_spec(self) -> Result<PolicySpec> {
        Ok(match self {
            PolicyArg::Oracle => PolicySpec::Oracle,
            PolicyArg::Random => PolicySpec::Random,
            PolicyArg::Scripted(path) => PolicySpec::Scripted { steps: read_lines_of(&path)? },
            PolicyArg::Remote(endpoint) => PolicySpec::Remote { endpoint, timeout_ms: 30_000 },
        })
    }
}

pub fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?))
}

pub fn read_lines_of<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    read_jsonl(open(path)?).with_context(|| path.display().to_string())
}

pub fn read_samples(path: &Path) -> Result<Vec<Sample>> {
    let samples: Vec<Sample> = read_lines_of(path)?;
    for s in &samples {
        s.validate().with_context(|| path.display().to_string())?;
    }
    Ok(samples)
}

/// A single manifest document or one manifest per line.
pub fn read_manifests(path: &Path) -> Result<BTreeMap<String, VideoManifest>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let list = match parse_manifest(&text) {
        Ok(m) => vec![m],
        Err(single) => match load_manifests_jsonl(text.as_bytes()) {
            Ok(list) => list,
            Err((line, e)) if text.lines().filter(|l| !l.trim().is_empty()).count() > 1 => {
                anyhow::bail!("{} line {line}: {e}", path.display())
            }
            Err(_) => anyhow::bail!("{}: {single}", path.display()),
        },
    };
    let mut out = BTreeMap::new();
    for m in list {
        if out.contains_key(&m.id) {
            anyhow::bail!("{}: duplicate manifest {}", path.display(), m.id);
        }
        out.insert(m.id.clone(), m);
    }
    Ok(out)
}

pub fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

pub fn write_lines<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut w = create(path)?;
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn print_line<T: Serialize>(value: &T) -> Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer(&mut out, value)?;
    out.write_all(b"\n")?;
    Ok(())
}

pub fn write_doc<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}
