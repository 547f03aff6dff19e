//! Run configuration: built-in defaults, then a TOML file, then `--set
//! dotted.key=value` overrides, in that order of precedence.

use std::path::Path;

use digitwin_eval::{DecoderConfig, ProbeConfig, ProbeMode, TwoAfcConfig};
use digitwin_models::{CnnConfig, MaeConfig, ViTConfig};
use digitwin_sim::{DatasetConfig, ObjectId};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub schema_version: u32,
    /// Seed of every generated dataset.
    pub seed: u64,
    /// Worker threads; 0 uses one per core.
    pub threads: usize,
    pub data: DataConfig,
    pub vit: ViTConfig,
    pub videomae: MaeConfig,
    pub cnn: CnnConfig,
    pub probe: ProbeSection,
    pub sweep: SweepSection,
    pub twoafc: TwoAfcSection,
    pub heatmap: HeatmapSection,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            threads: 0,
            data: DataConfig::default(),
            vit: ViTConfig::default(),
            videomae: MaeConfig {
                // Desk scale; the original latent width is 512.
                encoder_width: 128,
                ..MaeConfig::default()
            },
            cnn: CnnConfig::default(),
            probe: ProbeSection::default(),
            sweep: SweepSection::default(),
            twoafc: TwoAfcSection::default(),
            heatmap: HeatmapSection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Rearing condition 1..=4.
    pub condition: u8,
    pub frames: usize,
    /// Frames in each of the 24 labelled probe subsets.
    pub probe_per_subset: usize,
    pub probe_seed: u64,
    pub dataset: DatasetConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            condition: 1,
            frames: 8000,
            probe_per_subset: 300,
            probe_seed: 1000,
            dataset: DatasetConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeSection {
    pub mode: ProbeMode,
    pub split_seed: u64,
    pub optimizer: ProbeConfig,
}

impl Default for ProbeSection {
    fn default() -> Self {
        Self {
            mode: ProbeMode::Train11,
            split_seed: 0,
            optimizer: ProbeConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub sizes: Vec<usize>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            sizes: vec![0, 500, 2000, 8000],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TwoAfcSection {
    pub imprinted: ObjectId,
    pub decoder: DecoderConfig,
    pub trials: TwoAfcConfig,
}

impl Default for TwoAfcSection {
    fn default() -> Self {
        Self {
            imprinted: ObjectId::A,
            decoder: DecoderConfig::default(),
            trials: TwoAfcConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeatmapSection {
    /// Probe frames rendered per viewpoint range.
    pub frames_per_viewpoint: usize,
}

impl Default for HeatmapSection {
    fn default() -> Self {
        Self { frames_per_viewpoint: 2 }
    }
}

/// A rejected configuration; `keys` names every offending dotted key.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub keys: Vec<String>,
    pub message: String,
}

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "invalid configuration [{}]: {}", self.keys.join(", "), self.message)
    }
}

impl std::error::Error for ConfigError {}

fn invalid(key: impl Into<String>, message: impl Into<String>) -> ConfigError {
    ConfigError {
        keys: vec![key.into()],
        message: message.into(),
    }
}

impl Config {
    pub fn to_table(&self) -> Table {
        Table::try_from(self).expect("config serializes to a table")
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Range checks of every section; all problems are reported together.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut keys = Vec::new();
        let mut messages = Vec::new();
        let mut check = |key: &str, r: Result<(), String>| {
            if let Err(m) = r {
                keys.push(key.to_string());
                messages.push(format!("{key}: {m}"));
            }
        };
        check(
            "schema_version",
            (self.schema_version == SCHEMA_VERSION)
                .then_some(())
                .ok_or(format!("expected {SCHEMA_VERSION}")),
        );
        check(
            "data.condition",
            (1..=4).contains(&self.data.condition).then_some(()).ok_or("must be 1..=4".into()),
        );
        check(
            "data.probe_per_subset",
            (self.data.probe_per_subset > 0).then_some(()).ok_or("must be positive".into()),
        );
        check("data.dataset", self.data.dataset.validate().map_err(|e| e.to_string()));
        check("vit", self.vit.validate().map_err(|e| e.to_string()));
        check("videomae", self.videomae.validate().map_err(|e| e.to_string()));
        check("cnn", self.cnn.validate().map_err(|e| e.to_string()));
        check("twoafc.decoder", self.twoafc.decoder.validate().map_err(|e| e.to_string()));
        check(
            "twoafc.trials.trials_per_viewpoint",
            (self.twoafc.trials.trials_per_viewpoint > 0)
                .then_some(())
                .ok_or("must be positive".into()),
        );
        check(
            "sweep.sizes",
            (self.sweep.sizes.first() == Some(&0) && self.sweep.sizes.windows(2).all(|w| w[0] < w[1]))
                .then_some(())
                .ok_or("must start at 0 and increase".into()),
        );
        check(
            "probe.optimizer",
            (self.probe.optimizer.max_iters > 0 && self.probe.optimizer.l2 >= 0.0)
                .then_some(())
                .ok_or("max_iters must be positive and l2 non-negative".into()),
        );
        check(
            "heatmap.frames_per_viewpoint",
            (self.heatmap.frames_per_viewpoint > 0)
                .then_some(())
                .ok_or("must be positive".into()),
        );
        if keys.is_empty() {
            Ok(())
        } else {
            Err(ConfigError {
                keys,
                message: messages.join("; "),
            })
        }
    }
}

/// Parses an override value as a TOML literal, falling back to a bare string.
fn parse_value(raw: &str) -> Value {
    match toml::from_str::<Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("key just written"),
        Err(_) => Value::String(raw.to_string()),
    }
}

/// Sets `dotted` inside `table`, creating intermediate tables.
pub fn set_dotted(table: &mut Table, dotted: &str, value: Value) -> Result<(), ConfigError> {
    let parts: Vec<&str> = dotted.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(invalid(dotted, "empty key segment"));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = match entry {
            Value::Table(t) => t,
            _ => return Err(invalid(dotted, format!("`{p}` is not a section"))),
        };
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Recursively overlays `top` onto `base`; tables merge, other values replace.
pub fn merge(base: &mut Table, top: Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Dotted paths present in `candidate` but absent from `schema`.
fn unknown_keys(schema: &Table, candidate: &Table, prefix: &str, out: &mut Vec<String>) {
    for (k, v) in candidate {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match (schema.get(k), v) {
            (None, _) => out.push(path),
            (Some(Value::Table(s)), Value::Table(c)) => unknown_keys(s, c, &path, out),
            _ => {}
        }
    }
}

/// Resolves the effective configuration. `overrides` are `key=value` pairs.
pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<Config, ConfigError> {
    let defaults = Config::default().to_table();
    let mut merged = defaults.clone();
    if let Some(path) = file {
        let text = std::fs::read_to_string(path)
            .map_err(|e| invalid("--config", format!("cannot read {}: {e}", path.display())))?;
        let table: Table = toml::from_str(&text).map_err(|e| invalid("--config", e.to_string()))?;
        merge(&mut merged, table);
    }
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| invalid(o.clone(), "override must look like key=value"))?;
        set_dotted(&mut merged, k.trim(), parse_value(v.trim()))?;
    }
    let mut unknown = Vec::new();
    unknown_keys(&defaults, &merged, "", &mut unknown);
    if !unknown.is_empty() {
        return Err(ConfigError {
            message: format!("unknown keys: {}", unknown.join(", ")),
            keys: unknown,
        });
    }
    let cfg: Config = Value::Table(merged).try_into().map_err(|e: toml::de::Error| {
        let msg = e.message().to_string();
        // The deserializer names the field in its message; surface it as the key.
        let key = msg
            .split('`')
            .nth(1)
            .map(str::to_string)
            .unwrap_or_else(|| "config".into());
        invalid(key, msg)
    })?;
    cfg.validate()?;
    Ok(cfg)
}
