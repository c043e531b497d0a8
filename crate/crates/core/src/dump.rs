//! On-disk attention dumps: a `manifest.json` plus raw little-endian `f32`
//! query/key blocks, one pair per exported layer.
//!
//! Block layout is `[head][row][dim]` with no header. Query files hold
//! `num_text_tokens` rows, key files `num_vision_tokens` rows, so sizes are
//! exactly `4 * num_heads * rows * head_dim` bytes.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionInput, AttentionProvider};
use crate::error::{invalid, Error, Result};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerEntry {
    pub index: usize,
    pub q_file: String,
    pub k_file: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DumpManifest {
    pub format_version: u32,
    pub model_id: String,
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub head_dim: usize,
    pub num_text_tokens: usize,
    pub num_vision_tokens: usize,
    /// Raster patch index of each vision token.
    pub vision_token_patch_indices: Vec<usize>,
    pub layers: Vec<LayerEntry>,
}

impl DumpManifest {
    fn q_bytes(&self) -> u64 {
        4 * (self.num_heads * self.num_text_tokens * self.head_dim) as u64
    }

    fn k_bytes(&self) -> u64 {
        4 * (self.num_heads * self.num_vision_tokens * self.head_dim) as u64
    }

    fn consistency_violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.format_version != FORMAT_VERSION {
            v.push(format!("unsupported format_version {}", self.format_version));
        }
        if self.num_heads == 0 || self.head_dim == 0 {
            v.push("num_heads and head_dim must be >= 1".into());
        }
        if self.num_text_tokens == 0 || self.num_vision_tokens == 0 {
            v.push("num_text_tokens and num_vision_tokens must be >= 1".into());
        }
        if self.vision_token_patch_indices.len() != self.num_vision_tokens {
            v.push(format!(
                "vision_token_patch_indices has {} entries, expected {}",
                self.vision_token_patch_indices.len(),
                self.num_vision_tokens
            ));
        }
        let mut seen = std::collections::HashSet::new();
        if !self.vision_token_patch_indices.iter().all(|i| seen.insert(*i)) {
            v.push("vision_token_patch_indices contains duplicates".into());
        }
        for layer in &self.layers {
            if layer.index == 0 || layer.index > self.num_layers {
                v.push(format!("layer index {} outside 1..={}", layer.index, self.num_layers));
            }
        }
        v
    }
}

fn read_f32_file(path: &Path, expected_bytes: u64) -> Result<Vec<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() as u64 != expected_bytes {
        return Err(Error::Provider(format!(
            "{}: size {} bytes, expected {expected_bytes}",
            path.display(),
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

/// Checks file sizes, value finiteness and manifest consistency; returns every problem found.
pub fn verify(dir: &Path) -> Result<Vec<String>> {
    let manifest = read_manifest(dir)?;
    let mut v = manifest.consistency_violations();
    for layer in &manifest.layers {
        for (file, expected) in [(&layer.q_file, manifest.q_bytes()), (&layer.k_file, manifest.k_bytes())] {
            let path = dir.join(file);
            match fs::read(&path) {
                Err(e) => v.push(format!("{file}: {e}")),
                Ok(bytes) if bytes.len() as u64 != expected => {
                    v.push(format!("{file}: size {} bytes, expected {expected}", bytes.len()))
                }
                Ok(bytes) => {
                    let bad = bytes
                        .chunks_exact(4)
                        .filter(|c| !f32::from_le_bytes([c[0], c[1], c[2], c[3]]).is_finite())
                        .count();
                    if bad > 0 {
                        v.push(format!("{file}: {bad} non-finite values"));
                    }
                }
            }
        }
    }
    Ok(v)
}

fn read_manifest(dir: &Path) -> Result<DumpManifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))
}

/// File-backed [`AttentionProvider`]. Blocks are read on demand, so a shared
/// instance serves concurrent readers.
#[derive(Debug, Clone)]
pub struct FileAttention {
    dir: PathBuf,
    manifest: DumpManifest,
    patch_to_vision: HashMap<usize, usize>,
}

impl FileAttention {
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        let manifest = read_manifest(&dir)?;
        let problems = manifest.consistency_violations();
        if !problems.is_empty() {
            return Err(Error::Provider(format!("{}: {}", dir.display(), problems.join("; "))));
        }
        for layer in &manifest.layers {
            for (file, expected) in [(&layer.q_file, manifest.q_bytes()), (&layer.k_file, manifest.k_bytes())] {
                let path = dir.join(file);
                let len = fs::metadata(&path).map_err(|e| Error::io(&path, e))?.len();
                if len != expected {
                    return Err(Error::Provider(format!(
                        "{}: size {len} bytes, expected {expected}",
                        path.display()
                    )));
                }
            }
        }
        let patch_to_vision = manifest
            .vision_token_patch_indices
            .iter()
            .enumerate()
            .map(|(v, &p)| (p, v))
            .collect();
        Ok(Self {
            dir,
            manifest,
            patch_to_vision,
        })
    }

    pub fn manifest(&self) -> &DumpManifest {
        &self.manifest
    }

    pub fn layers(&self) -> Vec<usize> {
        self.manifest.layers.iter().map(|l| l.index).collect()
    }

    /// Raw query and key blocks of `layer` as stored on disk.
    pub fn raw_blocks(&self, layer: usize) -> Result<(Vec<f32>, Vec<f32>)> {
        let entry = self.manifest.layers.iter().find(|l| l.index == layer).ok_or_else(|| {
            Error::Provider(format!(
                "dump {} has no layer {layer} (available: {:?})",
                self.dir.display(),
                self.layers()
            ))
        })?;
        let q = read_f32_file(&self.dir.join(&entry.q_file), self.manifest.q_bytes())?;
        let k = read_f32_file(&self.dir.join(&entry.k_file), self.manifest.k_bytes())?;
        Ok((q, k))
    }
}

impl AttentionProvider for FileAttention {
    fn attention_input(&self, layer: usize, tokens: &[usize]) -> Result<AttentionInput> {
        let (q, k) = self.raw_blocks(layer)?;
        let m = &self.manifest;
        let rows: Vec<usize> = tokens
            .iter()
            .map(|t| {
                self.patch_to_vision
                    .get(t)
                    .copied()
                    .ok_or_else(|| Error::Provider(format!("patch {t} has no vision token in the dump")))
            })
            .collect::<Result<_>>()?;
        let d = m.head_dim;
        let mut keys = Vec::with_capacity(m.num_heads * rows.len() * d);
        for h in 0..m.num_heads {
            for &r in &rows {
                let start = (h * m.num_vision_tokens + r) * d;
                keys.extend(k[start..start + d].iter().map(|&v| v as f64));
            }
        }
        let queries = q.iter().map(|&v| v as f64).collect();
        AttentionInput::per_head(layer, m.num_heads, d, queries, keys)
    }
}

/// Writes a dump directory from in-memory `[head][row][dim]` blocks.
pub fn write_dump(dir: &Path, manifest: &DumpManifest, blocks: &[(Vec<f32>, Vec<f32>)]) -> Result<()> {
    if blocks.len() != manifest.layers.len() {
        return Err(invalid("one (query, key) block pair per manifest layer is required"));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (entry, (q, k)) in manifest.layers.iter().zip(blocks) {
        if q.len() as u64 * 4 != manifest.q_bytes() || k.len() as u64 * 4 != manifest.k_bytes() {
            return Err(invalid(format!(
                "layer {} block sizes do not match the manifest",
                entry.index
            )));
        }
        for (file, data) in [(&entry.q_file, q), (&entry.k_file, k)] {
            let bytes: Vec<u8> = data.iter().flat_map(|v| v.to_le_bytes()).collect();
            let path = dir.join(file);
            fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        }
    }
    let json = serde_json::to_string_pretty(manifest).map_err(|e| Error::json("manifest", e))?;
    let path = dir.join(MANIFEST);
    fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{attention_scores, SyntheticAttention};

    fn manifest(layers: &[usize]) -> DumpManifest {
        DumpManifest {
            format_version: 1,
            model_id: "test".into(),
            num_layers: 28,
            hidden_dim: 64,
            num_heads: 2,
            head_dim: 4,
            num_text_tokens: 3,
            num_vision_tokens: 5,
            vision_token_patch_indices: vec![0, 2, 4, 6, 8],
            layers: layers
                .iter()
                .map(|&i| LayerEntry {
                    index: i,
                    q_file: format!("q_{i}.bin"),
                    k_file: format!("k_{i}.bin"),
                })
                .collect(),
        }
    }

    fn blocks(seed: u64, layer: usize) -> (Vec<f32>, Vec<f32>) {
        let input = SyntheticAttention::new(seed)
            .with_dims(3, 2, 4)
            .attention_input(layer, &[0, 1, 2, 3, 4])
            .unwrap();
        (
            input.text_queries.iter().map(|&v| v as f32).collect(),
            input.vision_keys.iter().map(|&v| v as f32).collect(),
        )
    }

    fn write(dir: &Path) -> DumpManifest {
        let m = manifest(&[2, 17]);
        write_dump(dir, &m, &[blocks(1, 2), blocks(1, 17)]).unwrap();
        m
    }

    #[test]
    fn round_trip_selects_rows_by_patch() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path());
        assert!(verify(dir.path()).unwrap().is_empty());
        let provider = FileAttention::open(dir.path()).unwrap();
        assert_eq!(provider.layers(), vec![2, 17]);

        let input = provider.attention_input(17, &[2, 8]).unwrap();
        assert_eq!((input.num_heads, input.num_text, input.num_vision), (2, 3, 2));
        let (_, k) = blocks(1, 17);
        // head 1, patch 8 -> vision token 4
        assert_eq!(input.vision_keys[3 * 4], k[(5 + 4) * 4] as f64);
        let s = attention_scores(&input).unwrap();
        assert!((s.values.iter().sum::<f64>() - 3.0).abs() < 1e-9);
    }

    #[test]
    fn missing_layer_and_unknown_patch() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path());
        let provider = FileAttention::open(dir.path()).unwrap();
        let err = provider.attention_input(5, &[0]).unwrap_err().to_string();
        assert!(err.contains("no layer 5"), "{err}");
        assert!(provider.attention_input(2, &[1]).is_err());
    }

    #[test]
    fn truncated_file_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path());
        let path = dir.path().join("k_17.bin");
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        let v = verify(dir.path()).unwrap();
        assert!(
            v.iter().any(|s| s.starts_with("k_17.bin") && s.contains("size")),
            "{v:?}"
        );
        assert!(FileAttention::open(dir.path()).is_err());
    }

    #[test]
    fn nan_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path());
        let path = dir.path().join("q_2.bin");
        let mut bytes = fs::read(&path).unwrap();
        bytes[..4].copy_from_slice(&f32::NAN.to_le_bytes());
        fs::write(&path, bytes).unwrap();
        let v = verify(dir.path()).unwrap();
        assert!(v.iter().any(|s| s.contains("non-finite")), "{v:?}");
        // Opening only checks sizes; the value check happens when the layer is used.
        let provider = FileAttention::open(dir.path()).unwrap();
        let input = provider.attention_input(2, &[0]).unwrap();
        assert!(attention_scores(&input).is_err());
    }

    #[test]
    fn inconsistent_manifest_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = write(dir.path());
        m.layers[1].index = 99;
        fs::write(dir.path().join(MANIFEST), serde_json::to_string(&m).unwrap()).unwrap();
        assert!(FileAttention::open(dir.path()).is_err());
        assert!(verify(dir.path()).unwrap().iter().any(|s| s.contains("99")));
    }
}
