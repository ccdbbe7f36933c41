//! Run configuration: one TOML file with a section per component.
//!
//! Values resolve in this order, later winning: built-in defaults, the
//! config file, `section.key=value` overrides. Unknown keys are rejected at
//! every level.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::config_hash;
use crate::encoders::EncoderConfig;
use crate::error::{Error, Result};
use crate::evaluation::{MetricModules, TestSet};
use crate::field_core::RenderConfig;
use crate::generator::{GeneratorConfig, GeneratorParams, Image};
use crate::losses::{train_identity_embedder, EmbedderReport, EmbedderTrainConfig, IdentityEmbedder, PerceptualProxy};
use crate::real::Real;
use crate::training::{build_real_pool, real_generator, LossModules, TrainConfig};

/// Seeds of everything that is not seeded inside its own section.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Seeds {
    pub generator: u64,
    /// Generator of the "real" image distribution.
    pub real: u64,
    pub encoder: u64,
    pub perceptual_train: u64,
    pub perceptual_eval: u64,
    pub embedder_eval: u64,
    pub test: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Seeds { generator: 1, real: 7, encoder: 0, perceptual_train: 5, perceptual_eval: 6, embedder_eval: 200, test: 11 }
    }
}

/// Sizes of the generated data sets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub real_pool_size: usize,
    pub test_synthetic: usize,
    pub test_real: usize,
    pub invariance_identities: usize,
    pub invariance_views: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { real_pool_size: 256, test_synthetic: 32, test_real: 32, invariance_identities: 32, invariance_views: 4 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub out_dir: Option<PathBuf>,
    pub generator: Option<PathBuf>,
    pub encoder: Option<PathBuf>,
    /// Trained identity embedders; trained on demand when absent.
    pub embedder_train: Option<PathBuf>,
    pub embedder_eval: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub render: RenderConfig,
    pub generator: GeneratorConfig,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    /// Training of the loss embedder; the evaluation embedder uses the same
    /// settings with `seeds.embedder_eval`.
    pub embedder: EmbedderTrainConfig,
    pub data: DataConfig,
    pub seeds: Seeds,
    pub paths: Paths,
}

impl Default for RunConfig {
    /// Desk scale: 32x32 images, 16 samples per ray, a width-32 field.
    fn default() -> Self {
        RunConfig {
            render: RenderConfig { samples_per_ray: 16, ..Default::default() },
            generator: GeneratorConfig { width: 32, ..Default::default() },
            encoder: EncoderConfig::default(),
            train: TrainConfig { learning_rate: 3e-4, ..Default::default() },
            embedder: EmbedderTrainConfig { seed: 100, ..Default::default() },
            data: DataConfig::default(),
            seeds: Seeds::default(),
            paths: Paths::default(),
        }
    }
}

/// Sets `dotted.key` in `table` to `value` parsed as a TOML value, or as a
/// bare string when it does not parse.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) =
        assignment.split_once('=').ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key `{key}`")));
    }
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let (last, parents) = parts.split_last().expect("nonempty key");
    let mut cur = table;
    for p in parents {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| Error::Config(format!("override key `{key}`: `{p}` is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Defaults, then `file`, then each `key=value` in `overrides`.
    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                toml::from_str::<toml::Table>(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.render.validate()?;
        self.generator.validate()?;
        self.encoder.validate(&self.render)?;
        self.train.validate()?;
        if self.embedder.heldout_views == 0 || self.embedder.num_identities < 2 {
            return Err(Error::Config("embedder: need at least 2 identities and 1 held-out view".into()));
        }
        if self.data.real_pool_size == 0 && self.train.components.real {
            return Err(Error::Config("data: real_pool_size must be positive when real images are used".into()));
        }
        Ok(())
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serde(e.to_string()))
    }

    /// Writes the resolved configuration to `path`.
    pub fn write_snapshot(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_toml_string()?).map_err(|e| Error::io(path, e))
    }

    /// Hash of everything except `paths`, so relocating a run keeps it.
    pub fn hash(&self) -> String {
        config_hash(&RunConfig { paths: Paths::default(), ..self.clone() })
    }

    pub fn build_generator<F: Real>(&self) -> Result<GeneratorParams<F>> {
        GeneratorParams::new(self.generator.clone(), &self.render, self.seeds.generator)
    }

    pub fn build_real_generator<F: Real>(&self) -> Result<GeneratorParams<F>> {
        real_generator(&self.generator, &self.render, self.seeds.real)
    }

    pub fn build_real_pool<F: Real>(&self) -> Result<Vec<Image<F>>> {
        build_real_pool(&self.generator, &self.render, self.data.real_pool_size, self.train.yaw_range, self.seeds.real)
    }

    pub fn build_test_set<F: Real>(&self, generator: &GeneratorParams<F>) -> Result<TestSet<F>> {
        TestSet::build(
            generator,
            &self.build_real_generator()?,
            &self.render,
            self.data.test_synthetic,
            self.data.test_real,
            self.train.yaw_range,
            self.seeds.test,
        )
    }

    pub fn embedder_train_config(&self) -> EmbedderTrainConfig {
        self.embedder.clone()
    }

    pub fn embedder_eval_config(&self) -> EmbedderTrainConfig {
        EmbedderTrainConfig { seed: self.seeds.embedder_eval, ..self.embedder.clone() }
    }

    pub fn train_embedder<F: Real>(
        &self,
        generator: &GeneratorParams<F>,
        eval: bool,
    ) -> Result<(IdentityEmbedder<F>, EmbedderReport)> {
        let cfg = if eval { self.embedder_eval_config() } else { self.embedder_train_config() };
        train_identity_embedder(generator, &self.render, &cfg)
    }

    pub fn loss_modules<F: Real>(&self, embedder: IdentityEmbedder<F>) -> LossModules<F> {
        LossModules { perceptual: PerceptualProxy::new(self.seeds.perceptual_train), embedder }
    }

    pub fn metric_modules<F: Real>(&self, embedder: IdentityEmbedder<F>) -> MetricModules<F> {
        MetricModules { perceptual: PerceptualProxy::new(self.seeds.perceptual_eval), embedder }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml_string().unwrap();
        assert_eq!(RunConfig::from_toml_str(&text).unwrap(), cfg);
        assert_eq!(RunConfig::from_toml_str("").unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_rejected_at_every_level() {
        assert!(matches!(RunConfig::from_toml_str("bogus = 1"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_toml_str("[train]\nlr = 1"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_toml_str("[train.weights]\nfoo = 1"), Err(Error::Config(_))));
    }

    #[test]
    fn overrides_win_over_file_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "[train]\ntotal_steps = 10\nlearning_rate = 0.01\n").unwrap();
        let cfg = RunConfig::resolve(Some(&path), &["train.total_steps=20".into(), "paths.out_dir=runs/a".into()]).unwrap();
        assert_eq!(cfg.train.total_steps, 20);
        assert_eq!(cfg.train.learning_rate, 0.01);
        assert_eq!(cfg.paths.out_dir, Some(PathBuf::from("runs/a")));
        assert!(RunConfig::resolve(None, &["train.total_steps".into()]).is_err());
        assert!(RunConfig::resolve(None, &["train.learning_rate=0.0".into()]).is_err());
        assert!(RunConfig::resolve(None, &["train.learning_rate.x=1".into()]).is_err());
    }
}
