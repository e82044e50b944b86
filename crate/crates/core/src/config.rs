//! Run configuration: one TOML document for every command.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bench::BenchConfig;
use crate::data::{ingest_text, synth_markov, Corpus, MarkovChain, Vocab};
use crate::distill::DistillConfig;
use crate::error::{Error, Result};
use crate::mdlm::MdlmConfig;
use crate::model::ModelConfig;
use crate::partition::PartitionConfig;
use crate::sampling::{SampleOptions, SamplerKind};
use crate::schedule::NoiseSchedule;
use crate::training::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DataConfig {
    /// Order-1 Markov chain with a random transition matrix.
    Markov {
        states: usize,
        n_sequences: usize,
        seq_len: usize,
        seed: u64,
        /// Share of sequences held out for validation.
        val_fraction: f64,
    },
    /// Byte-level text file; documents are separated by blank lines.
    Text {
        path: PathBuf,
        seq_len: usize,
        val_fraction: f64,
    },
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig::Markov {
            states: 16,
            n_sequences: 4096,
            seq_len: 32,
            seed: 0,
            val_fraction: 0.1,
        }
    }
}

/// Training and validation splits, plus the generating chain when synthetic.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub train: Corpus,
    pub val: Corpus,
    pub chain: Option<MarkovChain>,
}

impl DataConfig {
    pub fn seq_len(&self) -> usize {
        match self {
            DataConfig::Markov { seq_len, .. } | DataConfig::Text { seq_len, .. } => *seq_len,
        }
    }

    pub fn vocab(&self) -> Vocab {
        match self {
            DataConfig::Markov { states, .. } => Vocab::markov(*states),
            DataConfig::Text { .. } => Vocab::bytes(),
        }
    }

    pub fn load(&self) -> Result<Dataset> {
        let (corpus, chain, frac) = match self {
            DataConfig::Markov {
                states,
                n_sequences,
                seq_len,
                seed,
                val_fraction,
            } => {
                let (c, m) = synth_markov(*states, *seed, *n_sequences, *seq_len)?;
                (c, Some(m), *val_fraction)
            }
            DataConfig::Text {
                path,
                seq_len,
                val_fraction,
            } => (ingest_text(path, *seq_len)?, None, *val_fraction),
        };
        let (train, val) = corpus.split(frac)?;
        Ok(Dataset { train, val, chain })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleConfig {
    pub sampler: SamplerKind,
    pub steps: usize,
    pub batch: usize,
    /// Total sequences to generate, in batches of `batch`.
    pub n_samples: usize,
    pub seed: u64,
    pub guidance: f64,
    pub nucleus_p: Option<f64>,
    pub class: Option<u32>,
    pub confidence_temperature: f64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            sampler: SamplerKind::FixedK,
            steps: 32,
            batch: 16,
            n_samples: 16,
            seed: 0,
            guidance: 0.0,
            nucleus_p: None,
            class: None,
            confidence_temperature: 0.0,
        }
    }
}

impl SampleConfig {
    pub fn options(&self, schedule: NoiseSchedule, bos: Option<u32>) -> SampleOptions {
        SampleOptions {
            schedule,
            class: self.class,
            guidance: self.guidance,
            nucleus_p: self.nucleus_p,
            bos,
            confidence_temperature: self.confidence_temperature,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub n_mc: usize,
    pub seed: u64,
    /// Order of the n-gram reference scorer fit on the training split.
    pub ngram_order: usize,
    /// Sequences generated for generative perplexity; 0 skips it.
    pub gen_samples: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_mc: 4,
            seed: 0,
            ngram_order: 3,
            gen_samples: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    /// Seed for parameter initialisation.
    pub init_seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub schedule: NoiseSchedule,
    pub train: TrainConfig,
    pub sample: SampleConfig,
    pub eval: EvalConfig,
    pub distill: DistillConfig,
    pub bench: BenchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("run"),
            init_seed: 0,
            data: DataConfig::default(),
            model: ModelConfig::Pgm(PartitionConfig {
                n_encoder_layers: 2,
                n_decoder_layers: 2,
                hidden_dim: 64,
                n_heads: 4,
                vocab_size: 18,
                max_len: 32,
                query_mode: Default::default(),
                dropout_rate: 0.0,
                n_classes: 0,
            }),
            schedule: NoiseSchedule::linear(),
            train: TrainConfig::default(),
            sample: SampleConfig::default(),
            eval: EvalConfig::default(),
            distill: DistillConfig::default(),
            bench: BenchConfig::default(),
        }
    }
}

/// A baseline with the same data vocabulary and length as `pgm`.
pub fn matched_mdlm(pgm: &PartitionConfig, n_layers: usize) -> MdlmConfig {
    MdlmConfig {
        n_layers,
        hidden_dim: pgm.hidden_dim,
        n_heads: pgm.n_heads,
        vocab_size: pgm.vocab_size,
        max_len: pgm.max_len,
        dropout_rate: pgm.dropout_rate,
        n_classes: pgm.n_classes,
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(one_line(&e.to_string())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.data.seq_len() > self.model.max_len() {
            return Err(Error::Config(format!(
                "data seq_len {} exceeds model max_len {}",
                self.data.seq_len(),
                self.model.max_len()
            )));
        }
        if self.data.vocab().size != self.model.vocab_size() {
            return Err(Error::Config(format!(
                "data vocabulary has {} tokens but the model expects {}",
                self.data.vocab().size,
                self.model.vocab_size()
            )));
        }
        if self.sample.batch == 0 || self.sample.steps == 0 {
            return Err(Error::Config("sample batch and steps must be positive".into()));
        }
        if self.eval.n_mc == 0 {
            return Err(Error::Config("eval n_mc must be positive".into()));
        }
        Ok(())
    }

    /// Applies `key=value` overrides. Dotted keys address a table directly; a
    /// bare key is looked up at the top level, then in `section`, then in the
    /// only table that has it.
    pub fn with_overrides(&self, overrides: &[String], section: Option<&str>) -> Result<Self> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let mut doc: toml::Table = toml::from_str(&self.to_toml()?).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            let value = parse_value(raw.trim());
            let path = resolve_key(&doc, key.trim(), section)?;
            set_path(&mut doc, &path, value)?;
        }
        let text = toml::to_string(&doc).map_err(|e| Error::Config(e.to_string()))?;
        Self::from_toml(&text)
    }

    /// Writes `config.resolved` into the output directory.
    pub fn write_resolved(&self) -> Result<PathBuf> {
        std::fs::create_dir_all(&self.output_dir).map_err(|e| Error::io(&self.output_dir, e))?;
        let path = self.output_dir.join("config.resolved");
        std::fs::write(&path, self.to_toml()?).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn resolve_key(doc: &toml::Table, key: &str, section: Option<&str>) -> Result<Vec<String>> {
    if key.contains('.') {
        return Ok(key.split('.').map(str::to_string).collect());
    }
    if doc.get(key).is_some_and(|v| !v.is_table()) {
        return Ok(vec![key.to_string()]);
    }
    let has = |s: &str| doc.get(s).and_then(toml::Value::as_table).is_some_and(|t| t.contains_key(key));
    if let Some(s) = section.filter(|s| has(s)) {
        return Ok(vec![s.to_string(), key.to_string()]);
    }
    let owners: Vec<&String> = doc.keys().filter(|s| has(s)).collect();
    match owners.as_slice() {
        [one] => Ok(vec![one.to_string(), key.to_string()]),
        [] => Err(Error::Config(format!("unknown key `{key}`"))),
        _ => Err(Error::Config(format!(
            "key `{key}` is ambiguous; qualify it with one of {owners:?}"
        ))),
    }
}

fn set_path(doc: &mut toml::Table, path: &[String], value: toml::Value) -> Result<()> {
    let (last, parents) = path.split_last().ok_or_else(|| Error::Config("empty key".into()))?;
    let mut table = doc;
    for p in parents {
        table = table
            .entry(p.clone())
            .or_insert_with(|| toml::Value::Table(Default::default()))
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{p}` is not a table")))?;
    }
    table.insert(last.clone(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_through_toml() {
        let cfg = RunConfig::default();
        let back = RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn rejects_unknown_keys() {
        let mut text = RunConfig::default().to_toml().unwrap();
        text = text.replace("[train]", "[train]\nlearning_rat = 0.1");
        assert!(matches!(RunConfig::from_toml(&text), Err(Error::Config(_))));
        assert!(RunConfig::from_toml("bogus = 1").is_err());
        let model = RunConfig::default().to_toml().unwrap().replace("[model]", "[model]\nwidth = 3");
        assert!(RunConfig::from_toml(&model).is_err());
    }

    #[test]
    fn overrides() {
        let cfg = RunConfig::default();
        let c = cfg.with_overrides(&["steps=0".into()], Some("train")).unwrap();
        assert_eq!(c.train.steps, 0);
        assert_eq!(c.sample.steps, cfg.sample.steps);
        let c = cfg
            .with_overrides(&["sample.nucleus_p=0.9".into(), "output_dir=out/x".into()], None)
            .unwrap();
        assert_eq!(c.sample.nucleus_p, Some(0.9));
        assert_eq!(c.output_dir, PathBuf::from("out/x"));
        let c = cfg.with_overrides(&["objective=\"mgm\"".into()], None).unwrap();
        assert_eq!(c.train.objective, crate::training::Objective::Mgm);
        assert!(cfg.with_overrides(&["steps=1".into()], None).is_err());
        assert!(cfg.with_overrides(&["nonsense=1".into()], None).is_err());
        assert!(cfg.with_overrides(&["train.nonsense=1".into()], None).is_err());
        assert!(cfg.with_overrides(&["noequals".into()], None).is_err());
    }

    #[test]
    fn markov_data_loads() {
        let cfg = DataConfig::Markov {
            states: 4,
            n_sequences: 20,
            seq_len: 8,
            seed: 1,
            val_fraction: 0.25,
        };
        let d = cfg.load().unwrap();
        assert_eq!(d.train.len() + d.val.len(), 20);
        assert!(d.chain.is_some());
    }
}
