//! Flat `section.key = value` run configuration.

use std::path::{Path, PathBuf};

use gfus::corpus::PairingMode;
use gfus::generator::DecodeConfig;
use gfus::model::ModelConfig;
use gfus::trainer::TrainConfig;

use crate::error::{CliError, CliResult};


const DATA_KEYS: [&str; 7] = ["train", "format", "prefix_fraction", "vocab", "min_freq", "max_vocab", "split_seed"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataFormat {
    PairedTsv,
    AutoSplit,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub train: Option<PathBuf>,
    pub format: DataFormat,
    /// Share of each document used as source in `auto_split` format.
    pub prefix_fraction: f64,
    /// Existing vocabulary to use instead of building one from the
    /// training split.
    pub vocab: Option<PathBuf>,
    pub min_freq: usize,
    pub max_vocab: usize,
    pub split_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train: None,
            format: DataFormat::PairedTsv,
            prefix_fraction: 0.5,
            vocab: None,
            min_freq: 1,
            max_vocab: 30_000,
            split_seed: 0,
        }
    }
}

fn path_string(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> CliResult<T> {
    value
        .parse()
        .map_err(|_| CliError::Usage(format!("invalid value {value:?} for data.{key}")))
}

impl DataConfig {
    pub fn pairing(&self) -> PairingMode {
        match self.format {
            DataFormat::PairedTsv => PairingMode::PairedTsv,
            DataFormat::AutoSplit => PairingMode::AutoSplit {
                prefix_fraction: self.prefix_fraction,
            },
        }
    }

    fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "train" => path_string(&self.train),
            "format" => match self.format {
                DataFormat::PairedTsv => "paired_tsv".to_owned(),
                DataFormat::AutoSplit => "auto_split".to_owned(),
            },
            "prefix_fraction" => self.prefix_fraction.to_string(),
            "vocab" => path_string(&self.vocab),
            "min_freq" => self.min_freq.to_string(),
            "max_vocab" => self.max_vocab.to_string(),
            "split_seed" => self.split_seed.to_string(),
            _ => return None,
        })
    }

    fn set(&mut self, key: &str, value: &str) -> CliResult<()> {
        let path = |v: &str| (!v.is_empty()).then(|| PathBuf::from(v));
        match key {
            "train" => self.train = path(value),
            "format" => {
                self.format = match value {
                    "paired_tsv" => DataFormat::PairedTsv,
                    "auto_split" => DataFormat::AutoSplit,
                    _ => return Err(CliError::Usage(format!("unknown data.format {value:?}"))),
                }
            }
            "prefix_fraction" => {
                let f: f64 = parse(key, value)?;
                if !(f > 0.0 && f <= 1.0) {
                    return Err(CliError::Usage(format!("data.prefix_fraction must lie in (0, 1], got {f}")));
                }
                self.prefix_fraction = f;
            }
            "vocab" => self.vocab = path(value),
            "min_freq" => self.min_freq = parse(key, value)?,
            "max_vocab" => self.max_vocab = parse(key, value)?,
            "split_seed" => self.split_seed = parse(key, value)?,
            _ => return Err(CliError::Usage(format!("unknown config key data.{key}"))),
        }
        Ok(())
    }
}

/// Every setting of a run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
    pub data: DataConfig,
    pub output_dir: Option<PathBuf>,
}

impl RunConfig {
    /// Applies one `section.key` assignment.
    pub fn set(&mut self, qualified: &str, value: &str) -> CliResult<()> {
        let value = value.trim();
        let (section, key) = qualified
            .trim()
            .split_once('.')
            .ok_or_else(|| CliError::Usage(format!("config key {qualified:?} must look like section.key")))?;
        let unknown = || CliError::Usage(format!("unknown config key {section}.{key}"));
        match section {
            "model" if ModelConfig::keys().contains(&key) => self.model.set(key, value)?,
            "train" if TrainConfig::keys().contains(&key) => self.train.set(key, value)?,
            "decode" if DecodeConfig::keys().contains(&key) => self.decode.set(key, value)?,
            "data" if DATA_KEYS.contains(&key) => self.data.set(key, value)?,
            "output" if key == "dir" => self.output_dir = (!value.is_empty()).then(|| PathBuf::from(value)),
            _ => return Err(unknown()),
        }
        Ok(())
    }

    pub fn parse_into(&mut self, text: &str) -> CliResult<()> {
        let mut seen: Vec<String> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("config line {}: expected `section.key = value`", i + 1)))?;
            let key = key.trim().to_owned();
            if seen.contains(&key) {
                return Err(CliError::Usage(format!("config line {}: duplicate key {key}", i + 1)));
            }
            seen.push(key.clone());
            self.set(&key, value)
                .map_err(|e| CliError::Usage(format!("config line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let mut config = RunConfig::default();
        config.parse_into(&text)?;
        Ok(config)
    }

    /// Applies `section.key=value` overrides from the command line.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> CliResult<()> {
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("override {o:?} must be section.key=value")))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    /// One seed for every random stream of the run.
    pub fn set_seed(&mut self, seed: u64) {
        self.model.seed = seed;
        self.train.seed = seed;
        self.decode.seed = seed;
        self.data.split_seed = seed;
    }

    /// The fully resolved configuration in the file format.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for k in ModelConfig::keys() {
            out.push_str(&format!("model.{k} = {}\n", self.model.get(k).expect("model key")));
        }
        for k in TrainConfig::keys() {
            out.push_str(&format!("train.{k} = {}\n", self.train.get(k).expect("train key")));
        }
        for k in DecodeConfig::keys() {
            out.push_str(&format!("decode.{k} = {}\n", self.decode.get(k).expect("decode key")));
        }
        for k in DATA_KEYS {
            out.push_str(&format!("data.{k} = {}\n", self.data.get(k).expect("data key")));
        }
        out.push_str(&format!("output.dir = {}\n", path_string(&self.output_dir)));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resolved_text_round_trips() {
        let mut c = RunConfig::default();
        c.parse_into(
            "# reversal run\nmodel.d_model = 48\ntrain.clip_norm = off\ndata.prefix_fraction = 0.25\ndata.format = auto_split\n",
        )
        .unwrap();
        assert_eq!(c.model.d_model, 48);
        assert_eq!(c.train.clip_norm, None);
        assert_eq!(c.data.pairing(), PairingMode::AutoSplit { prefix_fraction: 0.25 });
        let mut back = RunConfig::default();
        back.parse_into(&c.to_text()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_and_duplicate_keys_are_rejected() {
        let mut c = RunConfig::default();
        let err = c.parse_into("model.d_modle = 4\n").unwrap_err();
        assert!(err.to_string().contains("line 1"), "{err}");
        assert!(RunConfig::default().parse_into("train.epochs = 1\ntrain.epochs = 2\n").is_err());
        assert!(RunConfig::default().parse_into("epochs = 1\n").is_err());
        assert!(RunConfig::default().parse_into("train.epochs 1\n").is_err());
    }

    #[test]
    fn overrides_and_seed() {
        let mut c = RunConfig::default();
        c.apply_overrides(&["train.epochs=3".into(), "model.fusion_mode=none".into()]).unwrap();
        assert_eq!(c.train.epochs, 3);
        c.set_seed(9);
        assert_eq!((c.model.seed, c.train.seed, c.decode.seed, c.data.split_seed), (9, 9, 9, 9));
        assert!(c.apply_overrides(&["train.epochs".into()]).is_err());
    }
}
