//! Binary feature files and the text manifest that lists them.
//!
//! Feature file, little-endian: `b"CTFE"`, `u32` version, `u32` frames,
//! `u32` dims, then `frames * dims` `f32` values row by row.
//!
//! Manifest: one utterance per line, three tab-separated fields: id, path
//! to the feature file (relative paths resolve against the manifest's
//! directory), space-separated integer labels.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::{FeatureMatrix, Utterance};
use crate::error::{Error, Result};

pub const FEATURE_MAGIC: &[u8; 4] = b"CTFE";
pub const FEATURE_VERSION: u32 = 1;

pub fn write_features(path: &Path, features: &FeatureMatrix) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + 4 * features.values().len());
    buf.extend_from_slice(FEATURE_MAGIC);
    buf.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(features.frames() as u32).to_le_bytes());
    buf.extend_from_slice(&(features.dims() as u32).to_le_bytes());
    for v in features.values() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

fn u32_at(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

pub fn read_features(path: &Path) -> Result<FeatureMatrix> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 || &bytes[..4] != FEATURE_MAGIC {
        return Err(Error::format(path, "missing CTFE header"));
    }
    let version = u32_at(&bytes, 4);
    if version != FEATURE_VERSION {
        return Err(Error::format(path, format!("unsupported feature version {version}")));
    }
    let frames = u32_at(&bytes, 8) as usize;
    let dims = u32_at(&bytes, 12) as usize;
    let payload = &bytes[16..];
    if payload.len() != frames * dims * 4 {
        return Err(Error::format(
            path,
            format!("{frames}x{dims} payload needs {} bytes, found {}", frames * dims * 4, payload.len()),
        ));
    }
    let values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    FeatureMatrix::new(frames, dims, values).map_err(|e| Error::format(path, e.to_string()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub path: PathBuf,
    pub labels: Vec<usize>,
}

/// Writes every utterance's features under `dir` plus `dir/manifest.tsv`;
/// returns the manifest path.
pub fn write_dataset(dir: &Path, utterances: &[Utterance]) -> Result<PathBuf> {
    let feat_dir = dir.join("features");
    fs::create_dir_all(&feat_dir).map_err(|e| Error::io(&feat_dir, e))?;
    let manifest = dir.join("manifest.tsv");
    let mut text = String::new();
    for u in utterances {
        if u.id.contains(['\t', '\n']) {
            return Err(Error::Input(format!("utterance id {:?} contains a tab or newline", u.id)));
        }
        let rel = PathBuf::from("features").join(format!("{}.ctfe", u.id));
        write_features(&dir.join(&rel), &u.features)?;
        let labels: Vec<String> = u.labels.iter().map(|l| l.to_string()).collect();
        text.push_str(&format!("{}\t{}\t{}\n", u.id, rel.display(), labels.join(" ")));
    }
    let mut f = fs::File::create(&manifest).map_err(|e| Error::io(&manifest, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(&manifest, e))?;
    Ok(manifest)
}

pub fn parse_manifest(path: &Path, text: &str) -> Result<Vec<ManifestEntry>> {
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::format(path, format!("line {}: expected 3 tab-separated fields", n + 1)));
        }
        let labels = fields[2]
            .split_whitespace()
            .map(|s| s.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::format(path, format!("line {}: bad label: {e}", n + 1)))?;
        let p = PathBuf::from(fields[1]);
        out.push(ManifestEntry {
            id: fields[0].to_string(),
            path: if p.is_absolute() { p } else { base.join(p) },
            labels,
        });
    }
    Ok(out)
}

/// Loads every utterance listed in a manifest.
pub fn read_manifest(path: &Path) -> Result<Vec<Utterance>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(path, &text)?
        .into_iter()
        .map(|e| {
            Ok(Utterance {
                features: read_features(&e.path)?,
                id: e.id,
                labels: e.labels,
            })
        })
        .collect()
}

/// Headerless 16-bit little-endian mono PCM, scaled to `[-1, 1)`.
pub fn read_raw_pcm16(path: &Path) -> Result<Vec<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 2 != 0 {
        return Err(Error::format(path, "odd byte count for 16-bit PCM"));
    }
    Ok(bytes
        .chunks_exact(2)
        .map(|c| i16::from_le_bytes([c[0], c[1]]) as f64 / 32768.0)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontend::{generate_toy_corpus, ToyCorpusSpec};

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = ToyCorpusSpec { num_utterances: 5, ..ToyCorpusSpec::default() };
        let corpus = generate_toy_corpus(&spec).unwrap();
        let manifest = write_dataset(dir.path(), &corpus).unwrap();
        assert_eq!(read_manifest(&manifest).unwrap(), corpus);
    }

    #[test]
    fn feature_header_layout() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.ctfe");
        let f = FeatureMatrix::new(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        write_features(&p, &f).unwrap();
        let bytes = fs::read(&p).unwrap();
        assert_eq!(&bytes[..4], b"CTFE");
        assert_eq!(&bytes[4..16], &[1, 0, 0, 0, 2, 0, 0, 0, 3, 0, 0, 0]);
        assert_eq!(&bytes[16..20], &1.0f32.to_le_bytes());
        assert_eq!(bytes.len(), 16 + 24);
    }

    #[test]
    fn corrupt_feature_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.ctfe");
        fs::write(&p, b"NOPE0000000000000000").unwrap();
        assert!(matches!(read_features(&p), Err(Error::Format { .. })));
        let f = FeatureMatrix::new(2, 2, vec![1.0; 4]).unwrap();
        write_features(&p, &f).unwrap();
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(read_features(&p), Err(Error::Format { .. })));
    }

    #[test]
    fn manifest_rejects_malformed_lines() {
        let p = Path::new("/data/manifest.tsv");
        assert!(parse_manifest(p, "a\tb\n").is_err());
        assert!(parse_manifest(p, "a\tb\t1 x\n").is_err());
        let ok = parse_manifest(p, "u1\tf/u1.ctfe\t3 1 2\n\n").unwrap();
        assert_eq!(ok[0].path, PathBuf::from("/data/f/u1.ctfe"));
        assert_eq!(ok[0].labels, vec![3, 1, 2]);
    }
}
