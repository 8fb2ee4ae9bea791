//! TOML run configuration, flag overrides and artifact metadata.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tos_core::augment::PreprocessConfig;
use tos_core::eval::{SurfaceConfig, DEFAULT_SLICE_Z};
use tos_core::model::{ModelConfig, Task};
use tos_core::phantom::PhantomSpec;
use tos_core::snake::SnakeConfig;
use tos_core::train::{model_for, TrainConfig};

use crate::CliError;

pub const VERSION: &str = concat!("tosmtl ", env!("CARGO_PKG_VERSION"));

/// Everything a run can be configured with. Missing sections take defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Global seed; a per-command `--seed` wins over it.
    pub seed: Option<u64>,
    pub phantom: PhantomSpec,
    pub preprocess: PreprocessConfig,
    /// Architecture overrides; `task` and input size always come from the
    /// command line and `[preprocess]`.
    pub model: Option<ModelConfig>,
    pub train: TrainOverrides,
    pub split: SplitConfig,
    pub snake: SnakeConfig,
    pub surface: SurfaceSection,
}

/// Training fields left unset fall back to the task's defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainOverrides {
    pub learning_rate: Option<f64>,
    pub batch_size: Option<usize>,
    pub lambda_cls: Option<f64>,
    pub l1_weight: Option<f64>,
    pub max_epochs: Option<usize>,
    pub patience: Option<usize>,
    pub val_fraction: Option<f64>,
}

impl TrainOverrides {
    /// Fields set in `other` replace ours.
    pub fn merge(&mut self, other: &TrainOverrides) {
        macro_rules! take {
            ($($f:ident),*) => { $( if other.$f.is_some() { self.$f = other.$f; } )* };
        }
        take!(learning_rate, batch_size, lambda_cls, l1_weight, max_epochs, patience, val_fraction);
    }

    pub fn apply(&self, mut cfg: TrainConfig) -> TrainConfig {
        macro_rules! put {
            ($($f:ident),*) => { $( if let Some(v) = self.$f { cfg.$f = v; } )* };
        }
        put!(learning_rate, batch_size, lambda_cls, l1_weight, max_epochs, patience, val_fraction);
        cfg
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    /// Patients held out for testing.
    pub test_patients: usize,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self { test_patients: 4, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SurfaceSection {
    pub angular_resolution: usize,
    pub axial_resolution: usize,
    /// Slice heights, apex (0) to base (1).
    pub slice_z: Vec<f64>,
}

impl Default for SurfaceSection {
    fn default() -> Self {
        let g = SurfaceConfig::default();
        Self { angular_resolution: g.angular_resolution, axial_resolution: g.axial_resolution, slice_z: DEFAULT_SLICE_Z.to_vec() }
    }
}

impl SurfaceSection {
    pub fn grid(&self) -> SurfaceConfig {
        SurfaceConfig { angular_resolution: self.angular_resolution, axial_resolution: self.axial_resolution }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }

    pub fn train_config(&self, task: Task, flags: &TrainOverrides, seed: Option<u64>) -> TrainConfig {
        let mut o = self.train.clone();
        o.merge(flags);
        let mut cfg = o.apply(TrainConfig::for_task(task));
        if let Some(s) = seed.or(self.seed) {
            cfg.rng_seed = s;
        }
        cfg
    }

    pub fn model_config(&self, task: Task) -> ModelConfig {
        let base = model_for(task, &self.preprocess);
        match &self.model {
            Some(m) => ModelConfig { task, n_sectors: base.n_sectors, n_frames: base.n_frames, ..m.clone() },
            None => base,
        }
    }
}

/// Header embedded in every artifact: tool version, command and the
/// effective configuration of that command.
pub fn meta(command: &str, config: Value) -> Value {
    json!({ "tool": "tosmtl", "version": VERSION, "command": command, "config": config })
}

pub fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("configs serialize to JSON")
}

/// Inserts the metadata as a `<metadata>` element after the root tag.
pub fn stamp_svg(svg: &str, meta: &Value) -> String {
    let text = serde_json::to_string(meta).expect("metadata serializes");
    let escaped = text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;");
    let mut out = String::with_capacity(svg.len() + escaped.len() + 32);
    let mut done = false;
    for line in svg.split_inclusive('\n') {
        out.push_str(line);
        if !done && line.starts_with("<svg") {
            out.push_str("<metadata>");
            out.push_str(&escaped);
            out.push_str("</metadata>\n");
            done = true;
        }
    }
    out
}

/// `<path>.meta.json`, used for line-oriented outputs.
pub fn sidecar(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    s.into()
}

/// `<path>` with `suffix` appended to the file name.
pub fn with_suffix(path: &Path, suffix: &str) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    s.into()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_win_over_file() {
        let cfg: RunConfig = toml::from_str("seed = 3\n[train]\nlearning_rate = 0.5\nbatch_size = 8\n").unwrap();
        let flags = TrainOverrides { learning_rate: Some(0.25), ..Default::default() };
        let t = cfg.train_config(Task::Regression, &flags, None);
        assert_eq!((t.learning_rate, t.batch_size, t.rng_seed), (0.25, 8, 3));
        assert_eq!((t.lambda_cls, t.l1_weight), (0.0, 0.5));
        assert_eq!(cfg.train_config(Task::MultiTask, &flags, Some(9)).rng_seed, 9);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("[train]\nlr = 1.0\n").is_err());
        assert!(toml::from_str::<RunConfig>("bogus = 1\n").is_err());
    }

    #[test]
    fn model_section_keeps_task_and_input_size() {
        let cfg: RunConfig = toml::from_str("[model]\ntask = \"mtl\"\nn_frames = 7\nhidden = [32]\n").unwrap();
        let m = cfg.model_config(Task::Regression);
        assert_eq!((m.task, m.n_frames, m.hidden.clone()), (Task::Regression, 48, vec![32]));
    }

    #[test]
    fn svg_metadata_follows_the_root() {
        let svg = "<?xml version=\"1.0\"?>\n<svg a=\"1\">\n<rect/>\n</svg>\n";
        let out = stamp_svg(svg, &json!({"k": "<&>"}));
        let lines: Vec<&str> = out.lines().collect();
        assert_eq!(lines[2], "<metadata>{\"k\":\"&lt;&amp;&gt;\"}</metadata>");
    }
}
