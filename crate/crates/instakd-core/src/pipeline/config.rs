//! Run configuration: one TOML file describing every stage, with environment
//! overrides and strict unknown-key rejection.

use crate::error::{Error, Result};
use crate::mask::Rescale;
use crate::selector::ScoreScope;
use crate::toydet::scene::SceneSpec;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Which mask(s) the distillation loss uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    /// Teacher mask on teacher features, student mask on projected student
    /// features.
    Separate,
    /// One mask from the mean of teacher and student scores, applied to the
    /// feature difference.
    SharedMean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub train_scenes: usize,
    pub eval_scenes: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig { train_scenes: 2000, eval_scenes: 500 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherConfig {
    pub channels: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        TeacherConfig { channels: 16, epochs: 8, lr: 0.01, batch_size: 8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StudentConfig {
    pub channels: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for StudentConfig {
    fn default() -> Self {
        StudentConfig { channels: 8, epochs: 3, lr: 0.01, batch_size: 8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelectorConfig {
    /// Ensemble size.
    pub k: usize,
    /// Pooled grid size fed to the selectors.
    pub pool_h: usize,
    pub pool_w: usize,
    /// Bilinear samples per pooled bin edge.
    pub samples_per_bin: usize,
    /// Diversity-loss weight in the stage-1 objective.
    pub mu: f64,
    pub epochs: usize,
    pub lr: f64,
}

impl Default for SelectorConfig {
    fn default() -> Self {
        SelectorConfig { k: 6, pool_h: 3, pool_w: 3, samples_per_bin: 2, mu: 0.1, epochs: 4, lr: 0.01 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillSection {
    /// Weight of the distillation term in the stage-2 objective.
    pub lambda: f64,
    /// Fraction of total steps over which lambda ramps from 0 to its value.
    pub warmup_frac: f64,
    pub mask_mode: MaskMode,
    pub softmax_scope: ScoreScope,
    pub rescale: Rescale,
    /// Treat the student's own scores as constants in the distill loss.
    pub detach_scores: bool,
}

impl Default for DistillSection {
    fn default() -> Self {
        DistillSection {
            lambda: 1.0,
            warmup_frac: 0.1,
            mask_mode: MaskMode::Separate,
            softmax_scope: ScoreScope::Batch,
            rescale: Rescale::None,
            detach_scores: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig { momentum: 0.9, weight_decay: 1e-4 }
    }
}

/// Ablation grid: the cartesian product of every listed axis, run per seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateConfig {
    pub k: Vec<usize>,
    pub mu: Vec<f64>,
    pub mask_mode: Vec<MaskMode>,
    pub softmax_scope: Vec<ScoreScope>,
    pub rescale: Vec<Rescale>,
    pub detach_scores: Vec<bool>,
    pub seeds: Vec<u64>,
}

impl Default for AblateConfig {
    fn default() -> Self {
        AblateConfig {
            k: vec![6],
            mu: vec![0.1],
            mask_mode: vec![MaskMode::Separate],
            softmax_scope: vec![ScoreScope::Batch],
            rescale: vec![Rescale::None],
            detach_scores: vec![true],
            seeds: vec![0],
        }
    }
}

/// The whole run configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub root_seed: u64,
    /// Seed the scene corpora derive from. Defaults to `root_seed`; setting it
    /// separately keeps the data fixed while `root_seed` varies init and
    /// batch order across repeated runs.
    pub data_seed: Option<u64>,
    pub scene: SceneSpec,
    pub corpus: CorpusConfig,
    pub teacher: TeacherConfig,
    pub student: StudentConfig,
    pub selector: SelectorConfig,
    pub distill: DistillSection,
    pub optim: OptimConfig,
    pub ablate: AblateConfig,
}

/// Prefix for environment overrides; `__` separates nesting levels, e.g.
/// `INSTAKD_DISTILL__LAMBDA=0.5`.
pub const ENV_PREFIX: &str = "INSTAKD_";

impl DistillConfig {
    /// The seed the corpora actually use.
    pub fn effective_data_seed(&self) -> u64 {
        self.data_seed.unwrap_or(self.root_seed)
    }

    pub fn from_toml_str(text: &str) -> Result<DistillConfig> {
        let cfg: DistillConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("config parse error: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<DistillConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    /// Load, then apply any `INSTAKD_*` environment overrides on top.
    pub fn load_with_env(path: Option<&std::path::Path>) -> Result<DistillConfig> {
        let cfg = match path {
            Some(p) => Self::load(p)?,
            None => DistillConfig::default(),
        };
        cfg.with_env_overrides(std::env::vars())
    }

    /// Apply overrides from an iterator of (key, value) pairs. Keys look like
    /// `INSTAKD_SELECTOR__MU`; the value is parsed as a TOML literal, falling
    /// back to a string.
    pub fn with_env_overrides(
        &self,
        vars: impl Iterator<Item = (String, String)>,
    ) -> Result<DistillConfig> {
        let mut value = toml::Value::try_from(self)
            .map_err(|e| Error::Config(format!("config serialize error: {e}")))?;
        let mut touched = false;
        for (key, raw) in vars {
            let Some(path) = key.strip_prefix(ENV_PREFIX) else { continue };
            let segments: Vec<String> = path.split("__").map(|s| s.to_ascii_lowercase()).collect();
            if segments.is_empty() || segments.iter().any(|s| s.is_empty()) {
                return Err(Error::Config(format!("malformed override key {key}")));
            }
            set_path(&mut value, &segments, parse_literal(&raw), &key)?;
            touched = true;
        }
        if !touched {
            let cfg = self.clone();
            cfg.validate()?;
            return Ok(cfg);
        }
        let cfg: DistillConfig = value
            .try_into()
            .map_err(|e| Error::Config(format!("override produced invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.selector.k == 0 {
            return Err(Error::Config("selector.k must be >= 1".into()));
        }
        if self.selector.mu < 0.0 || self.distill.lambda < 0.0 {
            return Err(Error::Config("mu and lambda must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.distill.warmup_frac) {
            return Err(Error::Config("distill.warmup_frac must be in [0, 1]".into()));
        }
        if self.selector.pool_h == 0 || self.selector.pool_w == 0 || self.selector.samples_per_bin == 0 {
            return Err(Error::Config("pooled size and samples_per_bin must be >= 1".into()));
        }
        if self.teacher.batch_size == 0 || self.student.batch_size == 0 {
            return Err(Error::Config("batch sizes must be >= 1".into()));
        }
        if self.teacher.channels == 0 || self.student.channels == 0 {
            return Err(Error::Config("channel widths must be >= 1".into()));
        }
        if self.corpus.train_scenes == 0 || self.corpus.eval_scenes == 0 {
            return Err(Error::Config("corpus sizes must be >= 1".into()));
        }
        if !(self.optim.momentum >= 0.0 && self.optim.momentum < 1.0) {
            return Err(Error::Config("optim.momentum must be in [0, 1)".into()));
        }
        if self.optim.weight_decay < 0.0 {
            return Err(Error::Config("optim.weight_decay must be >= 0".into()));
        }
        for (name, lr) in [
            ("teacher.lr", self.teacher.lr),
            ("student.lr", self.student.lr),
            ("selector.lr", self.selector.lr),
        ] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive and finite")));
            }
        }
        let ab = &self.ablate;
        if ab.k.is_empty()
            || ab.mu.is_empty()
            || ab.mask_mode.is_empty()
            || ab.softmax_scope.is_empty()
            || ab.rescale.is_empty()
            || ab.detach_scores.is_empty()
            || ab.seeds.is_empty()
        {
            return Err(Error::Config("every ablate axis needs at least one value".into()));
        }
        Ok(())
    }

    /// Canonical TOML serialization (used for snapshots and hashing).
    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Content hash of the canonical serialization.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.to_toml_string().as_bytes());
        let out = h.finalize();
        out[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Parse an override value as a TOML literal (`3`, `0.5`, `true`,
/// `"separate"`), treating bare words as strings.
fn parse_literal(raw: &str) -> toml::Value {
    let attempt = format!("v = {raw}");
    if let Ok(table) = attempt.parse::<toml::Table>() {
        if let Some(v) = table.get("v") {
            return v.clone();
        }
    }
    toml::Value::String(raw.to_string())
}

fn set_path(root: &mut toml::Value, segments: &[String], new: toml::Value, key: &str) -> Result<()> {
    let mut cursor = root;
    for (i, seg) in segments.iter().enumerate() {
        let table = cursor
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {key}: {seg} is not a table")))?;
        if i + 1 == segments.len() {
            match table.get(seg) {
                Some(_) => {
                    table.insert(seg.clone(), new);
                    return Ok(());
                }
                None => {
                    return Err(Error::Config(format!("override {key}: unknown config key {seg}")));
                }
            }
        }
        cursor = table
            .get_mut(seg)
            .ok_or_else(|| Error::Config(format!("override {key}: unknown config section {seg}")))?;
    }
    unreachable!("segments is non-empty");
}
