//! Run configuration: a key=value text file overridden by command-line
//! flags. Unknown keys are rejected and every run logs its fully resolved
//! configuration.

use sn_core::error::{Error, Result};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

/// Known keys with their defaults.
const DEFAULTS: &[(&str, &str)] = &[
    ("data-dir", "data"),
    ("out-dir", "out"),
    ("seed", "0"),
    ("classes", "6"),
    ("threads", "0"),
    // face training
    ("lr", "0.01"),
    ("batch", "64"),
    ("epochs", "5"),
    ("momentum", "0.9"),
    // fused fine-tuning; empty lr means a tenth of the base rate
    ("finetune-lr", ""),
    ("finetune-epochs", "1"),
    ("pairs-per-face", "5"),
    // rejection
    ("variant", "C"),
    ("threshold", "0"),
    ("lambda", "1e-3"),
    ("reject-epochs", "5"),
    ("negatives-per-positive", "1"),
    // naming
    ("gap-tolerance", "0.5"),
    // model file locations (resolved under out-dir when relative)
    ("face-model", "face.model"),
    ("fused-model", "fused.model"),
    ("reject-model", "reject.model"),
    ("model", ""),
    // synthetic dataset
    ("identities", "6"),
    ("train-per-identity", "200"),
    ("test-per-identity", "50"),
    ("utterances-per-identity", "40"),
    ("utterance-seconds", "0.5"),
    ("frames", "120"),
    ("image-noise", "0.05"),
    ("audio-noise", "0.02"),
    ("pose-jitter", "2"),
];

#[derive(Debug, Clone)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl RunConfig {
    pub fn new() -> Self {
        RunConfig {
            values: DEFAULTS
                .iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
        }
    }

    /// Loads `key=value` lines; `#` starts a comment, blank lines are
    /// skipped. Unknown keys are errors.
    pub fn load_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)?;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Parse(format!("{}:{}: expected key=value", path.display(), i + 1))
            })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if !DEFAULTS.iter().any(|(k, _)| *k == key) {
            return Err(Error::Usage(format!("unknown configuration key {key:?}")));
        }
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    pub fn str(&self, key: &str) -> &str {
        self.values
            .get(key)
            .unwrap_or_else(|| panic!("unknown config key {key}"))
    }

    pub fn usize(&self, key: &str) -> Result<usize> {
        self.str(key)
            .parse()
            .map_err(|_| Error::Usage(format!("{key} must be a non-negative integer, got {:?}", self.str(key))))
    }

    pub fn i64(&self, key: &str) -> Result<i64> {
        self.str(key)
            .parse()
            .map_err(|_| Error::Usage(format!("{key} must be an integer, got {:?}", self.str(key))))
    }

    pub fn f64(&self, key: &str) -> Result<f64> {
        self.str(key)
            .parse()
            .map_err(|_| Error::Usage(format!("{key} must be a number, got {:?}", self.str(key))))
    }

    pub fn u64(&self, key: &str) -> Result<u64> {
        self.str(key)
            .parse()
            .map_err(|_| Error::Usage(format!("{key} must be a non-negative integer, got {:?}", self.str(key))))
    }

    pub fn data_dir(&self) -> PathBuf {
        PathBuf::from(self.str("data-dir"))
    }

    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(self.str("out-dir"))
    }

    /// Model paths resolve relative to the output directory unless absolute
    /// or explicitly relative to the working directory.
    pub fn model_path(&self, key: &str) -> PathBuf {
        let raw = PathBuf::from(self.str(key));
        if raw.is_absolute() || raw.components().count() > 1 {
            raw
        } else {
            self.out_dir().join(raw)
        }
    }

    /// Fine-tuning rate: explicit value or a tenth of the base rate.
    pub fn finetune_lr(&self) -> Result<f64> {
        if self.str("finetune-lr").is_empty() {
            Ok(self.f64("lr")? / 10.0)
        } else {
            self.f64("finetune-lr")
        }
    }

    /// Sorted key=value block for logging and metric files.
    pub fn resolved_block(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.values {
            out.push_str(&format!("{k}={v}\n"));
        }
        out
    }
}

/// Parses the command line: a subcommand followed by `--flag value` or
/// `--flag=value` pairs. `--config FILE` loads the file first, then the
/// remaining flags override it.
pub fn parse_args(args: &[String]) -> Result<(String, RunConfig)> {
    if args.is_empty() {
        return Err(Error::Usage("missing command".into()));
    }
    let command = args[0].clone();
    let mut pairs: Vec<(String, String)> = Vec::new();
    let mut i = 1;
    while i < args.len() {
        let arg = &args[i];
        let Some(flag) = arg.strip_prefix("--") else {
            return Err(Error::Usage(format!("unexpected argument {arg:?}")));
        };
        let (key, value) = if let Some((k, v)) = flag.split_once('=') {
            (k.to_string(), v.to_string())
        } else {
            let v = args
                .get(i + 1)
                .ok_or_else(|| Error::Usage(format!("flag --{flag} needs a value")))?;
            i += 1;
            (flag.to_string(), v.clone())
        };
        pairs.push((key, value));
        i += 1;
    }
    let mut config = RunConfig::new();
    // Config file first, explicit flags afterwards.
    for (k, v) in &pairs {
        if k == "config" {
            config.load_file(Path::new(v))?;
        }
    }
    for (k, v) in pairs {
        if k != "config" {
            config.set(&k, &v)?;
        }
    }
    Ok((command, config))
}
