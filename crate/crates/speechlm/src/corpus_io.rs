//! On-disk corpus: a JSON-lines manifest plus one binary feature file per
//! utterance.
//!
//! Feature file: `SLFB`, u32 version (1), u32 frames, u32 feature dim, then
//! little-endian f32 frames row by row.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use speechlm_core::corpus::CorpusExample;
use speechlm_core::Tensor;

use crate::error::{io_err, Error, Result};

pub const FEATURE_MAGIC: &[u8; 4] = b"SLFB";
pub const FEATURE_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub language_id: usize,
    pub source_tokens: Vec<usize>,
    pub target_tokens: Vec<usize>,
    /// Relative to the corpus directory.
    pub feature_file: String,
    pub num_frames: usize,
    pub feature_dim: usize,
}

pub fn encode_features(features: &Tensor<f32>) -> Vec<u8> {
    let (frames, dim) = features.rows_cols();
    let mut out = Vec::with_capacity(16 + 4 * features.numel());
    out.extend_from_slice(FEATURE_MAGIC);
    for v in [FEATURE_VERSION, frames as u32, dim as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for x in features.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

fn u32_at(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

pub fn decode_features(bytes: &[u8], path: &Path) -> Result<Tensor<f32>> {
    let integrity = |msg: String| Error::Integrity {
        path: path.into(),
        msg,
    };
    if bytes.len() < 16 {
        return Err(integrity(format!("{} bytes is shorter than the header", bytes.len())));
    }
    if &bytes[..4] != FEATURE_MAGIC {
        return Err(Error::Format {
            path: path.into(),
            msg: "bad magic, expected SLFB".into(),
        });
    }
    let version = u32_at(bytes, 4);
    if version != FEATURE_VERSION {
        return Err(Error::Format {
            path: path.into(),
            msg: format!("unsupported version {version}"),
        });
    }
    let (frames, dim) = (u32_at(bytes, 8) as usize, u32_at(bytes, 12) as usize);
    let expect = 16 + 4 * frames * dim;
    if bytes.len() != expect {
        return Err(integrity(format!(
            "{} bytes, header declares {frames}x{dim} frames ({expect} bytes)",
            bytes.len()
        )));
    }
    let data = bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok(Tensor::new(vec![frames, dim], data)?)
}

pub fn write_corpus(examples: &[CorpusExample], dir: &Path) -> Result<()> {
    let feat_dir = dir.join("features");
    fs::create_dir_all(&feat_dir).map_err(io_err(&feat_dir))?;
    let mut manifest = String::new();
    for ex in examples {
        let rel = format!("features/{}.slfb", ex.id);
        let path = dir.join(&rel);
        fs::write(&path, encode_features(&ex.features)).map_err(io_err(&path))?;
        let (num_frames, feature_dim) = ex.features.rows_cols();
        let entry = ManifestEntry {
            id: ex.id.clone(),
            language_id: ex.language_id,
            source_tokens: ex.source_tokens.clone(),
            target_tokens: ex.target_tokens.clone(),
            feature_file: rel,
            num_frames,
            feature_dim,
        };
        manifest.push_str(&serde_json::to_string(&entry)?);
        manifest.push('\n');
    }
    let path = dir.join(MANIFEST);
    let mut f = fs::File::create(&path).map_err(io_err(&path))?;
    f.write_all(manifest.as_bytes()).map_err(io_err(&path))?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestEntry>> {
    let path = dir.join(MANIFEST);
    let f = fs::File::open(&path).map_err(io_err(&path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(io_err(&path))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(&line).map_err(|e| Error::Manifest {
            path: path.clone(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(entry);
    }
    Ok(out)
}

pub fn read_corpus(dir: &Path) -> Result<Vec<CorpusExample>> {
    read_manifest(dir)?
        .into_iter()
        .map(|e| {
            let path = dir.join(&e.feature_file);
            let bytes = fs::read(&path).map_err(io_err(&path))?;
            let features = decode_features(&bytes, &path)?;
            if features.rows_cols() != (e.num_frames, e.feature_dim) {
                return Err(Error::Integrity {
                    path,
                    msg: format!(
                        "file holds {:?} frames, manifest declares {}x{}",
                        features.shape(),
                        e.num_frames,
                        e.feature_dim
                    ),
                });
            }
            Ok(CorpusExample {
                id: e.id,
                language_id: e.language_id,
                source_tokens: e.source_tokens,
                target_tokens: e.target_tokens,
                features,
            })
        })
        .collect()
}
