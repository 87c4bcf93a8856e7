//! Experiment configuration in a line-based `key = value` format with
//! `[section]` headers. `#` and `;` start comment lines.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use eqimaging::{Error, Result};

use crate::synth::ShapeFamily;

/// Ordered sections of ordered key/value pairs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Ini {
    pub sections: Vec<(String, Vec<(String, String)>)>,
}

impl Ini {
    pub fn parse(text: &str) -> Result<Self> {
        let mut ini = Ini::default();
        let mut offset = 0usize;
        for (lineno, raw) in text.split_inclusive('\n').enumerate() {
            let at = offset;
            offset += raw.len();
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
                continue;
            }
            let err = |what: &str| Error::Format(format!("config line {} (byte offset {at}): {what}: `{line}`", lineno + 1));
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest.strip_suffix(']').ok_or_else(|| err("unterminated section header"))?.trim();
                if name.is_empty() {
                    return Err(err("empty section name"));
                }
                ini.sections.push((name.to_string(), Vec::new()));
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| err("expected `key = value`"))?;
            let section = ini.sections.last_mut().ok_or_else(|| err("key outside of any section"))?;
            section.1.push((k.trim().to_string(), v.trim().to_string()));
        }
        Ok(ini)
    }

    pub fn get(&self, section: &str, key: &str) -> Option<&str> {
        self.sections
            .iter()
            .filter(|(s, _)| s == section)
            .flat_map(|(_, kv)| kv.iter())
            .filter(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .next_back()
    }

    pub fn set(&mut self, section: &str, key: &str, value: impl Into<String>) {
        let value = value.into();
        let idx = match self.sections.iter().position(|(s, _)| s == section) {
            Some(i) => i,
            None => {
                self.sections.push((section.to_string(), Vec::new()));
                self.sections.len() - 1
            }
        };
        let kv = &mut self.sections[idx].1;
        match kv.iter_mut().find(|(k, _)| k == key) {
            Some(slot) => slot.1 = value,
            None => kv.push((key.to_string(), value)),
        }
    }

    pub fn dump(&self) -> String {
        let mut out = String::new();
        for (i, (name, kv)) in self.sections.iter().enumerate() {
            if i > 0 {
                out.push('\n');
            }
            let _ = writeln!(out, "[{name}]");
            for (k, v) in kv {
                let _ = writeln!(out, "{k} = {v}");
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Synth,
    /// Grayscale PGM/PNG files, sorted by name.
    Dir(PathBuf),
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetConfig {
    pub source: DataSource,
    pub count: usize,
    pub test_count: usize,
    /// Held-out images used only to pick the best epoch (0 disables).
    pub val_count: usize,
    pub size: usize,
    pub family: ShapeFamily,
    pub invariant: bool,
    pub max_shapes: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    /// `supervised`, `supervised-da`, `mc` or `ei`.
    pub kind: String,
    pub alpha: f64,
    /// Group elements per item in the EI term; 0 sums over the whole group.
    pub samples: usize,
    pub l1: bool,
    pub resample_noise: bool,
    /// Pixels compared in the EI term: `full`, `interior` or `interior:<margin>`.
    pub region: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// `adam` or `sgd`.
    pub optimizer: String,
    pub eval_every: usize,
    pub select_best: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    pub output: PathBuf,
    /// Number of test reconstructions written as images.
    pub images: usize,
    /// `pgm` or `png`.
    pub image_format: String,
    pub operator: String,
    pub noise: String,
    pub group: String,
    pub model: String,
    pub loss: LossConfig,
    pub train: TrainSection,
    pub dataset: DatasetConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "experiment".into(),
            seed: 0,
            output: PathBuf::from("runs/experiment"),
            images: 4,
            image_format: "png".into(),
            operator: "inpaint:p=0.5:seed=0".into(),
            noise: "none".into(),
            group: "c4+shifts".into(),
            model: "kind=direct;net=cnn:layers=4:channels=8:zero-last".into(),
            loss: LossConfig {
                kind: "ei".into(),
                alpha: 1.0,
                samples: 1,
                l1: false,
                resample_noise: false,
                region: "full".into(),
            },
            train: TrainSection {
                epochs: 10,
                batch_size: 4,
                lr: 2e-3,
                optimizer: "adam".into(),
                eval_every: 1,
                select_best: false,
            },
            dataset: DatasetConfig {
                source: DataSource::Synth,
                count: 100,
                test_count: 20,
                val_count: 0,
                size: 32,
                family: ShapeFamily::Mixed,
                invariant: true,
                max_shapes: 3,
                seed: 0,
            },
        }
    }
}

fn parse_value<V: FromStr>(section: &str, key: &str, v: &str) -> Result<V> {
    v.parse()
        .map_err(|_| Error::Format(format!("config [{section}] {key}: cannot parse `{v}`")))
}

const KNOWN: &[(&str, &[&str])] = &[
    ("experiment", &["name", "seed", "output", "images", "image_format"]),
    ("operator", &["spec", "noise"]),
    ("group", &["spec"]),
    ("model", &["spec"]),
    ("loss", &["kind", "alpha", "samples", "l1", "resample_noise", "region"]),
    ("train", &["epochs", "batch_size", "lr", "optimizer", "eval_every", "select_best"]),
    (
        "dataset",
        &["source", "count", "test_count", "val_count", "size", "family", "invariant", "max_shapes", "seed"],
    ),
];

impl ExperimentConfig {
    /// Builds a config from a parsed file; absent keys keep their defaults.
    pub fn from_ini(ini: &Ini) -> Result<Self> {
        for (section, kv) in &ini.sections {
            let known = KNOWN
                .iter()
                .find(|(s, _)| s == section)
                .ok_or_else(|| Error::Format(format!("unknown config section [{section}]")))?;
            if let Some((k, _)) = kv.iter().find(|(k, _)| !known.1.contains(&k.as_str())) {
                return Err(Error::Format(format!(
                    "unknown key `{k}` in [{section}]; accepted: {}",
                    known.1.join(", ")
                )));
            }
        }
        let mut c = Self::default();
        macro_rules! take {
            ($s:literal, $k:literal, $field:expr) => {
                if let Some(v) = ini.get($s, $k) {
                    $field = parse_value($s, $k, v)?;
                }
            };
        }
        take!("experiment", "name", c.name);
        take!("experiment", "seed", c.seed);
        take!("experiment", "output", c.output);
        take!("experiment", "images", c.images);
        take!("experiment", "image_format", c.image_format);
        take!("operator", "spec", c.operator);
        take!("operator", "noise", c.noise);
        take!("group", "spec", c.group);
        take!("model", "spec", c.model);
        take!("loss", "kind", c.loss.kind);
        take!("loss", "alpha", c.loss.alpha);
        take!("loss", "samples", c.loss.samples);
        take!("loss", "l1", c.loss.l1);
        take!("loss", "resample_noise", c.loss.resample_noise);
        take!("loss", "region", c.loss.region);
        take!("train", "epochs", c.train.epochs);
        take!("train", "batch_size", c.train.batch_size);
        take!("train", "lr", c.train.lr);
        take!("train", "optimizer", c.train.optimizer);
        take!("train", "eval_every", c.train.eval_every);
        take!("train", "select_best", c.train.select_best);
        take!("dataset", "count", c.dataset.count);
        take!("dataset", "test_count", c.dataset.test_count);
        take!("dataset", "val_count", c.dataset.val_count);
        take!("dataset", "size", c.dataset.size);
        take!("dataset", "family", c.dataset.family);
        take!("dataset", "invariant", c.dataset.invariant);
        take!("dataset", "max_shapes", c.dataset.max_shapes);
        take!("dataset", "seed", c.dataset.seed);
        if let Some(v) = ini.get("dataset", "source") {
            c.dataset.source = match v.split_once(':') {
                None if v == "synth" => DataSource::Synth,
                Some(("dir", p)) => DataSource::Dir(PathBuf::from(p)),
                _ => return Err(Error::Format(format!("config [dataset] source: expected `synth` or `dir:<path>`, got `{v}`"))),
            };
        }
        Ok(c)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_ini(&Ini::parse(text)?)
    }

    /// Every field, in canonical order.
    pub fn to_ini(&self) -> Ini {
        let mut ini = Ini::default();
        let d = &self.dataset;
        ini.set("experiment", "name", &self.name);
        ini.set("experiment", "seed", self.seed.to_string());
        ini.set("experiment", "output", self.output.display().to_string());
        ini.set("experiment", "images", self.images.to_string());
        ini.set("experiment", "image_format", &self.image_format);
        ini.set("operator", "spec", &self.operator);
        ini.set("operator", "noise", &self.noise);
        ini.set("group", "spec", &self.group);
        ini.set("model", "spec", &self.model);
        ini.set("loss", "kind", &self.loss.kind);
        ini.set("loss", "alpha", self.loss.alpha.to_string());
        ini.set("loss", "samples", self.loss.samples.to_string());
        ini.set("loss", "l1", self.loss.l1.to_string());
        ini.set("loss", "resample_noise", self.loss.resample_noise.to_string());
        ini.set("loss", "region", &self.loss.region);
        ini.set("train", "epochs", self.train.epochs.to_string());
        ini.set("train", "batch_size", self.train.batch_size.to_string());
        ini.set("train", "lr", self.train.lr.to_string());
        ini.set("train", "optimizer", &self.train.optimizer);
        ini.set("train", "eval_every", self.train.eval_every.to_string());
        ini.set("train", "select_best", self.train.select_best.to_string());
        ini.set(
            "dataset",
            "source",
            match &d.source {
                DataSource::Synth => "synth".to_string(),
                DataSource::Dir(p) => format!("dir:{}", p.display()),
            },
        );
        ini.set("dataset", "count", d.count.to_string());
        ini.set("dataset", "test_count", d.test_count.to_string());
        ini.set("dataset", "val_count", d.val_count.to_string());
        ini.set("dataset", "size", d.size.to_string());
        ini.set("dataset", "family", d.family.to_string());
        ini.set("dataset", "invariant", d.invariant.to_string());
        ini.set("dataset", "max_shapes", d.max_shapes.to_string());
        ini.set("dataset", "seed", d.seed.to_string());
        ini
    }

    /// Resolved dump with every field spelled out.
    pub fn dump(&self) -> String {
        self.to_ini().dump()
    }

    /// Applies a `section.key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (path, value) = assignment
            .split_once('=')
            .ok_or_else(|| Error::InvalidArgument(format!("override `{assignment}` is not `section.key=value`")))?;
        let (section, key) = path
            .split_once('.')
            .ok_or_else(|| Error::InvalidArgument(format!("override `{assignment}` is not `section.key=value`")))?;
        let mut ini = self.to_ini();
        ini.set(section.trim(), key.trim(), value.trim());
        *self = Self::from_ini(&ini)?;
        Ok(())
    }
}

pub fn read_config(path: impl AsRef<Path>) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path.as_ref())?;
    ExperimentConfig::parse(&text)
}

pub fn write_config(path: impl AsRef<Path>, config: &ExperimentConfig) -> Result<()> {
    std::fs::write(path, config.dump())?;
    Ok(())
}
