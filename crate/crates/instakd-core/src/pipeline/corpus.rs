//! Corpus manifests: newline-delimited JSON, one record per scene, storing
//! the per-scene seed and ground truth. Images are regenerated on demand from
//! (seed, spec) — nothing heavy is persisted.

use crate::error::{Error, Result};
use crate::roi::ImageBox;
use crate::toydet::scene::{generate_scene, SceneSpec, SyntheticScene};
use sha2::{Digest, Sha256};
use std::io::Write;
use std::path::Path;

/// Derive a child seed from the root: hash of the root bytes and a tag.
pub fn derive_seed(root: u64, tag: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update(tag.as_bytes());
    let out = h.finalize();
    u64::from_le_bytes(out[..8].try_into().unwrap())
}

/// Hash of the generator spec; manifests carry it so a corpus can't silently
/// be consumed under a different spec.
pub fn spec_hash(spec: &SceneSpec) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(spec).expect("spec serializes"));
    let out = h.finalize();
    out[..8].iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
struct GtRecord {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
    class: usize,
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
struct SceneRecord {
    seed: u64,
    spec_hash: String,
    gt: Vec<GtRecord>,
}

/// An ordered list of scene seeds with the spec that renders them.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub spec: SceneSpec,
    pub seeds: Vec<u64>,
}

impl Corpus {
    /// Seeds derived from the root for a named split.
    pub fn derive(root_seed: u64, split: &str, count: usize, spec: &SceneSpec) -> Corpus {
        let seeds = (0..count)
            .map(|i| derive_seed(root_seed, &format!("scene-{split}-{i}")))
            .collect();
        Corpus { spec: spec.clone(), seeds }
    }

    pub fn len(&self) -> usize {
        self.seeds.len()
    }
    pub fn is_empty(&self) -> bool {
        self.seeds.is_empty()
    }

    /// Render one scene (pure in the seed).
    pub fn scene(&self, idx: usize) -> SyntheticScene {
        generate_scene(self.seeds[idx], &self.spec)
    }

    /// Render a batch of scenes by corpus index, in order.
    pub fn scenes(&self, indices: &[usize]) -> Vec<SyntheticScene> {
        let seeds: Vec<u64> = indices.iter().map(|&i| self.seeds[i]).collect();
        let spec = self.spec.clone();
        crate::kernels::map_indexed(seeds.len(), move |i| generate_scene(seeds[i], &spec))
    }

    /// Write the manifest: one JSON record per line with seed, spec hash,
    /// and ground truth (regenerated here so the manifest is self-describing).
    pub fn save_manifest(&self, path: &Path) -> Result<()> {
        let hash = spec_hash(&self.spec);
        let file = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        // header line: the full spec itself
        let header = serde_json::json!({ "spec": &self.spec, "spec_hash": hash });
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n")?;
        let records = crate::kernels::map_indexed(self.seeds.len(), |i| {
            let scene = generate_scene(self.seeds[i], &self.spec);
            SceneRecord {
                seed: self.seeds[i],
                spec_hash: hash.clone(),
                gt: scene
                    .ground_truth
                    .iter()
                    .map(|(b, c)| GtRecord { x1: b.x1, y1: b.y1, x2: b.x2, y2: b.y2, class: *c })
                    .collect(),
            }
        });
        for rec in records {
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    /// Load a manifest, verifying its spec hash against `expected_spec`.
    pub fn load_manifest(path: &Path, expected_spec: &SceneSpec) -> Result<Corpus> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::invalid(format!("cannot read manifest {}: {e}", path.display())))?;
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: serde_json::Value = serde_json::from_str(
            lines.next().ok_or_else(|| Error::invalid("manifest is empty"))?,
        )?;
        let spec: SceneSpec = serde_json::from_value(
            header
                .get("spec")
                .cloned()
                .ok_or_else(|| Error::invalid("manifest header missing spec"))?,
        )?;
        if &spec != expected_spec {
            return Err(Error::invalid(format!(
                "manifest spec hash {} does not match config spec hash {}",
                spec_hash(&spec),
                spec_hash(expected_spec)
            )));
        }
        let mut seeds = Vec::new();
        for line in lines {
            let rec: SceneRecord = serde_json::from_str(line)?;
            seeds.push(rec.seed);
        }
        if seeds.is_empty() {
            return Err(Error::invalid("manifest holds no scenes"));
        }
        Ok(Corpus { spec, seeds })
    }
}

/// Ground truth for a batch, straight from the generator.
pub fn gt_of(scenes: &[SyntheticScene]) -> Vec<Vec<(ImageBox, usize)>> {
    scenes.iter().map(|s| s.ground_truth.clone()).collect()
}
