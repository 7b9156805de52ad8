use std::path::Path;

use fhkd::distill::DistillConfig;
use fhkd::model::{preset, ModelConfig};
use fhkd::{Error, Result};
use serde::Deserialize;

/// A preset name or an inline model table.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum ModelSpec {
    Preset(String),
    Inline(ModelConfig),
}

impl ModelSpec {
    pub fn resolve(&self) -> Result<ModelConfig> {
        match self {
            ModelSpec::Preset(name) => preset(name),
            ModelSpec::Inline(cfg) => {
                cfg.validate()?;
                Ok(cfg.clone())
            }
        }
    }
}

/// The `distill --config` document.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub teacher: ModelSpec,
    pub student: ModelSpec,
    #[serde(default)]
    pub teacher_seed: u64,
    #[serde(default = "one")]
    pub student_seed: u64,
    #[serde(default)]
    pub distill: DistillConfig,
}

fn one() -> u64 {
    1
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        cfg.distill.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        Self::parse(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_and_defaults() {
        let cfg =
            RunConfig::parse("teacher = \"toy-teacher\"\nstudent = \"toy-student\"\n").unwrap();
        assert_eq!(cfg.distill, DistillConfig::default());
        assert_eq!(cfg.student.resolve().unwrap().name, "toy-student");
        assert_eq!((cfg.teacher_seed, cfg.student_seed), (0, 1));
    }

    #[test]
    fn inline_model_table() {
        let table = fhkd::model::presets::toy_student()
            .to_toml()
            .unwrap()
            .replace("[[cnn]]", "[[student.cnn]]");
        let text =
            format!("teacher = \"toy-teacher\"\n[distill]\ntotal_steps = 4\n\n[student]\n{table}");
        let cfg = RunConfig::parse(&text).unwrap();
        assert_eq!(
            cfg.student.resolve().unwrap(),
            fhkd::model::presets::toy_student()
        );
        assert_eq!(cfg.distill.total_steps, 4);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(RunConfig::parse(
            "teacher = \"toy-teacher\"\nstudent = \"toy-student\"\nbogus = 1\n"
        )
        .is_err());
        let bad =
            "teacher = \"toy-teacher\"\nstudent = \"toy-student\"\n[distill]\nlambda = -1.0\n";
        assert_eq!(RunConfig::parse(bad).unwrap_err().code(), "E_CONFIG");
        let cfg = RunConfig::parse("teacher = \"nope\"\nstudent = \"toy-student\"\n").unwrap();
        assert_eq!(cfg.teacher.resolve().unwrap_err().code(), "E_PRESET");
    }
}
