//! Run configuration: documented defaults, overlaid by a TOML file, overlaid
//! by command-line flags.

use std::path::{Path, PathBuf};

use laddermoe::corpus::CorpusConfig;
use laddermoe::pipeline::ExperimentConfig;
use laddermoe::{DecoderConfig, EncoderConfig, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const DEFAULT_OUT: &str = "laddermoe-out";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub workers: usize,
    /// Column-grouping threshold factor.
    pub lambda: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corpus_dir: Option<PathBuf>,
    pub corpus: CorpusConfig,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let e = ExperimentConfig::default();
        RunConfig {
            seed: e.seed,
            workers: 1,
            lambda: e.factor,
            corpus_dir: None,
            corpus: e.corpus,
            encoder: e.encoder,
            decoder: e.decoder,
            train: e.train,
        }
    }
}

/// Values given on the command line; `None` leaves the lower layer in place.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub lambda: Option<f64>,
    pub experts: Option<usize>,
    pub top_k: Option<usize>,
    pub adapter_layers: Option<Vec<usize>>,
    pub permutations: Option<usize>,
    pub plm_epochs: Option<usize>,
    pub osf_epochs: Option<usize>,
    pub batch_size: Option<usize>,
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl RunConfig {
    /// Defaults overlaid with the TOML file at `path`. Unknown keys fail.
    pub fn from_file(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let file: toml::Value = toml::from_str(&text)
            .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
        let mut value = toml::Value::try_from(RunConfig::default())
            .map_err(|e| CliError::Runtime(format!("default config: {e}")))?;
        merge(&mut value, file);
        value
            .try_into()
            .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))
    }

    pub fn apply(&mut self, o: &Overrides) {
        let set = |slot: &mut usize, v: Option<usize>| {
            if let Some(v) = v {
                *slot = v;
            }
        };
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(l) = o.lambda {
            self.lambda = l;
        }
        set(&mut self.workers, o.workers);
        set(&mut self.encoder.num_experts, o.experts);
        set(&mut self.encoder.top_k, o.top_k);
        if let Some(layers) = &o.adapter_layers {
            self.encoder.adapter_layers = layers.clone();
        }
        set(&mut self.decoder.num_permutations, o.permutations);
        set(&mut self.train.plm_epochs, o.plm_epochs);
        set(&mut self.train.osf_epochs, o.osf_epochs);
        set(&mut self.train.batch_size, o.batch_size);
    }

    pub fn experiment(&self) -> ExperimentConfig {
        ExperimentConfig {
            seed: self.seed,
            factor: self.lambda,
            corpus: self.corpus.clone(),
            encoder: self.encoder.clone(),
            decoder: self.decoder.clone(),
            train: self.train.clone(),
        }
    }

    /// Checks every range and fills in the derived fields.
    pub fn resolve(mut self) -> Result<Self, CliError> {
        if self.workers == 0 {
            return Err(CliError::Usage("workers must be >= 1, got 0".into()));
        }
        let e = self.experiment().resolve().map_err(|e| CliError::Usage(e.to_string()))?;
        self.lambda = e.factor;
        self.corpus = e.corpus;
        self.encoder = e.encoder;
        self.decoder = e.decoder;
        self.train = e.train;
        Ok(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, text: &str) -> PathBuf {
        let p = dir.join("run.toml");
        std::fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn flag_beats_file_beats_default() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "seed = 4\n[encoder]\ntop_k = 3\nnum_experts = 9\n");
        let mut c = RunConfig::from_file(Some(&p)).unwrap();
        assert_eq!(c.seed, 4);
        assert_eq!(c.encoder.top_k, 3);
        assert_eq!(c.encoder.embed_dim, EncoderConfig::desk().embed_dim);
        c.apply(&Overrides {
            top_k: Some(5),
            ..Overrides::default()
        });
        let c = c.resolve().unwrap();
        assert_eq!(c.encoder.top_k, 5);
        assert_eq!(c.encoder.num_experts, 9);
    }

    #[test]
    fn unknown_key_and_bad_range_are_usage_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "[encoder]\ntopk = 3\n");
        assert!(matches!(RunConfig::from_file(Some(&p)), Err(CliError::Usage(m)) if m.contains("topk")));
        let mut c = RunConfig::default();
        c.apply(&Overrides {
            top_k: Some(0),
            ..Overrides::default()
        });
        assert!(matches!(c.resolve(), Err(CliError::Usage(m)) if m.contains("top_k")));
    }

    #[test]
    fn full_expert_pool_accepted() {
        let mut c = RunConfig::default();
        c.apply(&Overrides {
            experts: Some(36),
            top_k: Some(5),
            ..Overrides::default()
        });
        c.resolve().unwrap();
    }
}
