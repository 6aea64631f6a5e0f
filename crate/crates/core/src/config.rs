//! Run configuration read from INI files with `[data]`, `[model]`,
//! `[pretrain]`, `[train]`, `[head]` and `[audit]` sections whose keys are
//! the field names of the corresponding module configs.

use std::path::Path;

use ini::Ini;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Number, Value};

use crate::audit::DEFAULT_BUCKET_EDGES;
use crate::error::{Error, Result};
use crate::experiment::ExperimentConfig;

pub const EFFECTIVE_CONFIG: &str = "config.ini";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditConfig {
    pub min_severity: u8,
    pub bucket_edges: Vec<u64>,
}

impl Default for AuditConfig {
    fn default() -> Self {
        Self {
            min_severity: 2,
            bucket_edges: DEFAULT_BUCKET_EDGES.to_vec(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub experiment: ExperimentConfig,
    pub audit: AuditConfig,
}

const SECTIONS: [&str; 6] = ["data", "model", "pretrain", "train", "head", "audit"];

impl RunConfig {
    pub fn from_ini_str(text: &str) -> Result<Self> {
        let ini = Ini::load_from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let mut sections = Self::default().sections()?;
        for (name, props) in ini.iter() {
            let Some(name) = name else {
                if let Some((k, _)) = props.iter().next() {
                    return Err(Error::Config(format!("key {k:?} outside any section")));
                }
                continue;
            };
            let target = sections
                .iter_mut()
                .find(|(s, _)| *s == name)
                .map(|(_, v)| v)
                .ok_or_else(|| Error::Config(format!("unknown section [{name}]")))?;
            for (key, raw) in props.iter() {
                let slot = target
                    .get_mut(key)
                    .ok_or_else(|| Error::Config(format!("unknown key {key:?} in [{name}]")))?;
                *slot = parse_like(slot, raw).ok_or_else(|| {
                    Error::Config(format!("[{name}] {key} = {raw:?} does not parse as {}", kind(slot)))
                })?;
            }
        }
        let cfg = Self::from_sections(sections)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_ini_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.experiment;
        e.data.validate()?;
        e.model.validate()?;
        e.train.validate()?;
        e.head.validate()?;
        if e.model.image_size != e.data.image_size {
            return Err(Error::Config(format!(
                "model image_size {} differs from data image_size {}",
                e.model.image_size, e.data.image_size
            )));
        }
        if self.audit.min_severity > 4 {
            return Err(Error::Config(format!("min_severity {} above 4", self.audit.min_severity)));
        }
        if self.audit.bucket_edges.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("bucket_edges must increase strictly".into()));
        }
        Ok(())
    }

    /// Every seed of the run set to `seed`.
    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            experiment: self.experiment.with_seed(seed),
            audit: self.audit.clone(),
        }
    }

    /// The effective configuration in the input format.
    pub fn to_ini_string(&self) -> Result<String> {
        let mut out = String::new();
        for (name, map) in self.sections()? {
            out.push_str(&format!("[{name}]\n"));
            for (k, v) in &map {
                out.push_str(&format!("{k} = {}\n", render(v)));
            }
            out.push('\n');
        }
        Ok(out)
    }

    /// Writes the effective configuration as `config.ini` inside `dir`.
    pub fn echo(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(EFFECTIVE_CONFIG);
        std::fs::write(&path, self.to_ini_string()?).map_err(|e| Error::io(&path, e))
    }

    fn sections(&self) -> Result<Vec<(&'static str, Map<String, Value>)>> {
        let e = &self.experiment;
        let mut data = object(&e.data)?;
        data.insert("n_test".into(), Value::from(e.n_test));
        Ok(vec![
            (SECTIONS[0], data),
            (SECTIONS[1], object(&e.model)?),
            (SECTIONS[2], object(&e.pretrain)?),
            (SECTIONS[3], object(&e.train)?),
            (SECTIONS[4], object(&e.head)?),
            (SECTIONS[5], object(&self.audit)?),
        ])
    }

    fn from_sections(sections: Vec<(&'static str, Map<String, Value>)>) -> Result<Self> {
        let mut it = sections.into_iter().map(|(_, m)| m);
        let mut next = || it.next().expect("six sections");
        let mut data = next();
        let n_test = data
            .remove("n_test")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::Config("n_test must be a non-negative integer".into()))?;
        Ok(Self {
            experiment: ExperimentConfig {
                data: typed(data)?,
                n_test: n_test as usize,
                model: typed(next())?,
                pretrain: typed(next())?,
                train: typed(next())?,
                head: typed(next())?,
            },
            audit: typed(next())?,
        })
    }
}

fn object<T: Serialize>(v: &T) -> Result<Map<String, Value>> {
    match serde_json::to_value(v)? {
        Value::Object(m) => Ok(m),
        _ => Err(Error::Config("config section is not a struct".into())),
    }
}

fn typed<T: DeserializeOwned>(m: Map<String, Value>) -> Result<T> {
    serde_json::from_value(Value::Object(m)).map_err(|e| Error::Config(e.to_string()))
}

fn kind(v: &Value) -> &'static str {
    match v {
        Value::Bool(_) => "a boolean",
        Value::Number(n) if n.is_f64() => "a number",
        Value::Number(_) => "an integer",
        Value::String(_) => "a string",
        Value::Array(_) => "a comma-separated list",
        _ => "a value",
    }
}

/// Parses `raw` into a value of the same JSON type as `like`.
fn parse_like(like: &Value, raw: &str) -> Option<Value> {
    let raw = raw.trim();
    match like {
        Value::Bool(_) => raw.parse::<bool>().ok().map(Value::Bool),
        Value::Number(n) if n.is_u64() => raw.parse::<u64>().ok().map(Value::from),
        Value::Number(n) if n.is_i64() => raw.parse::<i64>().ok().map(Value::from),
        Value::Number(_) => raw.parse::<f64>().ok().and_then(Number::from_f64).map(Value::Number),
        Value::String(_) => Some(Value::String(raw.trim_matches('"').to_string())),
        Value::Array(items) => {
            let elem = items.first().cloned().unwrap_or(Value::from(0.0));
            if raw.is_empty() {
                return Some(Value::Array(Vec::new()));
            }
            raw.split(',')
                .map(|part| parse_like(&elem, part))
                .collect::<Option<Vec<_>>>()
                .map(Value::Array)
        }
        _ => None,
    }
}

fn render(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        Value::Array(items) => items.iter().map(render).collect::<Vec<_>>().join(", "),
        other => other.to_string(),
    }
}
