//! Run configuration: a sectioned TOML file plus `--set` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sunfs::augment::AugmentConfig;
use sunfs::backbone::ViTConfig;
use sunfs::data::SyntheticSpec;
use sunfs::eval::EvalConfig;
use sunfs::meta_train::TrainConfig;
use sunfs::meta_tune::TuneConfig;
use sunfs::Error;
use toml::{Table, Value};

/// Sections that take the global seed unless they set their own.
const SEEDED: [&str; 5] = ["data.synthetic", "teacher", "sun", "tune", "eval"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Manifest to read, and the location `generate-data` writes to.
    pub manifest: PathBuf,
    #[serde(default = "base_split")]
    pub base_split: String,
    #[serde(default = "novel_split")]
    pub novel_split: String,
    #[serde(default)]
    pub synthetic: SyntheticSpec,
}

fn base_split() -> String {
    "train".into()
}

fn novel_split() -> String {
    "test".into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataSection,
    #[serde(default)]
    pub backbone: ViTConfig,
    #[serde(default)]
    pub augment: AugmentConfig,
    #[serde(default)]
    pub teacher: TrainConfig,
    #[serde(default)]
    pub sun: TrainConfig,
    #[serde(default)]
    pub tune: TuneConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

const REQUIRED: [&str; 3] = ["seed", "output_dir", "data.manifest"];

impl RunConfig {
    /// Read `path` (if any), apply `key=value` overrides and resolve.
    pub fn resolve(path: Option<&Path>, overrides: &[String]) -> Result<Self, Error> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?;
                text.parse::<Table>()
                    .map_err(|e| Error::Config(format!("malformed config {}: {e}", p.display())))?
            }
            None => Table::new(),
        };
        for o in overrides {
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not of the form key=value")))?;
            set_path(&mut table, key.trim(), parse_value(raw.trim()))?;
        }
        let missing: Vec<&str> = REQUIRED.iter().copied().filter(|k| lookup(&table, k).is_none()).collect();
        if !missing.is_empty() {
            return Err(Error::Config(format!("missing config keys: {}", missing.join(", "))));
        }
        if let Some(seed) = table.get("seed").cloned() {
            for section in SEEDED {
                if lookup(&table, &format!("{section}.seed")).is_none() {
                    set_path(&mut table, &format!("{section}.seed"), seed.clone())?;
                }
            }
        }
        let cfg: RunConfig = Value::Table(table)
            .try_into()
            .map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        cfg.backbone.validate()?;
        cfg.augment.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String, Error> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
    }
}

fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn lookup<'a>(table: &'a Table, key: &str) -> Option<&'a Value> {
    let mut parts = key.split('.');
    let mut cur = table.get(parts.next()?)?;
    for p in parts {
        cur = cur.as_table()?.get(p)?;
    }
    Some(cur)
}

fn set_path(table: &mut Table, key: &str, value: Value) -> Result<(), Error> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad config key `{key}`")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        cur = cur
            .entry(p.to_string())
            .or_insert_with(|| Value::Table(Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{p}` in `{key}` is not a section")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn missing_keys_are_listed() {
        let err = RunConfig::resolve(None, &["seed=1".into()]).unwrap_err().to_string();
        assert!(err.contains("output_dir") && err.contains("data.manifest"), "{err}");
        assert!(!err.contains("seed,"), "{err}");
    }

    #[test]
    fn overrides_and_seed_propagation() {
        let cfg = RunConfig::resolve(
            None,
            &[
                "seed=7".into(),
                "output_dir=out".into(),
                "data.manifest=d/manifest.toml".into(),
                "sun.lambda=0.25".into(),
                "eval.seed=3".into(),
                "backbone.stem.channels=8".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.sun.lambda, 0.25);
        assert_eq!(cfg.sun.seed, 7);
        assert_eq!(cfg.teacher.seed, 7);
        assert_eq!(cfg.data.synthetic.seed, 7);
        assert_eq!(cfg.eval.seed, 3);
        assert_eq!(cfg.backbone.stem.channels, 8);
        assert_eq!(cfg.output_dir, PathBuf::from("out"));
        let again: RunConfig = toml::from_str(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn shipped_toy_config_matches_the_defaults() {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/toy.toml");
        let cfg = RunConfig::resolve(Some(&path), &[]).unwrap();
        assert_eq!(cfg.backbone, ViTConfig::default());
        assert_eq!(cfg.sun, TrainConfig::default());
        assert_eq!(cfg.augment, AugmentConfig::default());
        assert_eq!(cfg.data.synthetic, SyntheticSpec::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::resolve(
            None,
            &["seed=0".into(), "output_dir=o".into(), "data.manifest=m".into(), "sun.lamda=1".into()],
        );
        assert!(matches!(err, Err(Error::Config(_))));
    }
}
