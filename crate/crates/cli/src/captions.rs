use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use anyhow::{bail, Context, Result};
use audiocap::corpus::ManifestEntry;

/// clip id → captions, ordered by clip id.
pub type CaptionMap = BTreeMap<String, Vec<String>>;

/// Writes pretty, key-sorted JSON. Every clip must carry exactly
/// `per_clip` captions.
pub fn write_captions(results: &CaptionMap, per_clip: usize, path: &Path) -> Result<()> {
    let bad: Vec<String> = results
        .iter()
        .filter(|(_, v)| v.len() != per_clip)
        .map(|(k, v)| format!("{k} ({})", v.len()))
        .collect();
    if !bad.is_empty() {
        bail!("expected {per_clip} captions per clip, got: {}", bad.join(", "));
    }
    let mut text = serde_json::to_string_pretty(results)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn read_captions(path: &Path) -> Result<CaptionMap> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing captions {}", path.display()))
}

/// Reference captions of a manifest without loading the feature files.
pub fn read_references(manifest: &Path) -> Result<CaptionMap> {
    let file = fs::File::open(manifest).with_context(|| format!("opening {}", manifest.display()))?;
    let mut out = CaptionMap::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let e: ManifestEntry = serde_json::from_str(&line)
            .with_context(|| format!("{}, line {}", manifest.display(), i + 1))?;
        if out.insert(e.clip_id.clone(), e.captions).is_some() {
            bail!("{}: duplicate clip id {}", manifest.display(), e.clip_id);
        }
    }
    Ok(out)
}
