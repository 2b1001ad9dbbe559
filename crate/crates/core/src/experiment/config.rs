use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::bilstm::BiLstmConfig;
use crate::corpus::{load_corpus, synthesize_corpus, Construct, Dialog, SignalSpec};
use crate::error::{Error, Result};
use crate::features::{FeatureConfig, Lexicons};
use crate::fusion::FusionMode;
use crate::linear::{GridSpec, OptConfig};
use crate::memn2n::MemN2NConfig;

/// Built-in scorers, in report column order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum System {
    Svm,
    SvmPp,
    Lstm,
    LstmAtt,
    Memn2n,
}

impl System {
    pub const ALL: [System; 5] = [System::Svm, System::SvmPp, System::Lstm, System::LstmAtt, System::Memn2n];

    pub fn as_str(self) -> &'static str {
        match self {
            System::Svm => "svm",
            System::SvmPp => "svm_pp",
            System::Lstm => "lstm",
            System::LstmAtt => "lstm_att",
            System::Memn2n => "memn2n",
        }
    }

    pub fn is_builtin(id: &str) -> bool {
        id.parse::<System>().is_ok()
    }
}

impl fmt::Display for System {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for System {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        System::ALL
            .into_iter()
            .find(|x| x.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown system `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSource {
    pub seed: u64,
    pub n: usize,
    #[serde(default)]
    pub signal: SignalSpec,
}

/// Exactly one of `path` and `synth`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSource {
    pub path: Option<PathBuf>,
    pub synth: Option<SynthSource>,
}

impl CorpusSource {
    pub fn load(&self) -> Result<Vec<Dialog>> {
        match (&self.path, &self.synth) {
            (Some(p), None) => load_corpus(p),
            (None, Some(s)) => synthesize_corpus(s.seed, s.n, &s.signal),
            _ => Err(Error::Config("corpus needs exactly one of `path` and `synth`".into())),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinearConfig {
    /// Feature set of `svm_pp`; `svm` uses the same with politeness off.
    pub features: FeatureConfig,
    pub grid: GridSpec,
    pub opt: OptConfig,
}

/// A cross-validation run. Relative paths are resolved against the config
/// file's directory by [`ExperimentConfig::from_file`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub out_dir: PathBuf,
    pub constructs: Vec<Construct>,
    pub systems: Vec<System>,
    pub k: usize,
    /// Fold assignment seed; per-cell model seeds derive from it.
    pub seed: u64,
    /// Directory overriding the bundled politeness lexicons.
    pub lexicons: Option<PathBuf>,
    /// Keep `lstm_att` snapshots for heatmaps.
    pub save_models: bool,
    pub fusion: FusionMode,
    pub corpus: CorpusSource,
    pub linear: LinearConfig,
    pub bilstm: BiLstmConfig,
    pub memn2n: MemN2NConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            out_dir: PathBuf::from("run"),
            constructs: Construct::ALL.to_vec(),
            systems: System::ALL.to_vec(),
            k: 10,
            seed: 1,
            lexicons: None,
            save_models: true,
            fusion: FusionMode::Mean,
            corpus: CorpusSource::default(),
            linear: LinearConfig::default(),
            bilstm: BiLstmConfig::default(),
            memn2n: MemN2NConfig::default(),
        }
    }
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl ExperimentConfig {
    pub fn from_toml(body: &str) -> Result<Self> {
        toml::from_str(body).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Parses, resolves relative paths and validates.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let body = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config = Self::from_toml(&body)?;
        let base = path.parent().unwrap_or(Path::new(""));
        resolve(base, &mut config.out_dir);
        for p in [
            config.corpus.path.as_mut(),
            config.lexicons.as_mut(),
            config.bilstm.pretrained.as_mut(),
            config.memn2n.pretrained.as_mut(),
        ]
        .into_iter()
        .flatten()
        {
            resolve(base, p);
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.systems.is_empty() || self.constructs.is_empty() {
            return Err(Error::Config("at least one system and one construct are required".into()));
        }
        let dup = |n: usize, m: usize| n != m;
        let mut s = self.systems.clone();
        s.sort();
        s.dedup();
        let mut c = self.constructs.clone();
        c.sort();
        c.dedup();
        if dup(s.len(), self.systems.len()) || dup(c.len(), self.constructs.len()) {
            return Err(Error::Config("systems and constructs must not repeat".into()));
        }
        if self.k < 2 {
            return Err(Error::Config(format!("k must be at least 2, got {}", self.k)));
        }
        match (&self.corpus.path, &self.corpus.synth) {
            (Some(p), None) if !p.exists() => {
                return Err(Error::Config(format!("corpus `{}` does not exist", p.display())))
            }
            (Some(_), None) => {}
            (None, Some(s)) if s.n == 0 => return Err(Error::Config("synthetic corpus size must be positive".into())),
            (None, Some(_)) => {}
            _ => return Err(Error::Config("corpus needs exactly one of `path` and `synth`".into())),
        }
        for p in [&self.lexicons, &self.bilstm.pretrained, &self.memn2n.pretrained].into_iter().flatten() {
            if !p.exists() {
                return Err(Error::Config(format!("`{}` does not exist", p.display())));
            }
        }
        self.memn2n.validate()
    }

    pub fn lexicons(&self) -> Result<Lexicons> {
        match &self.lexicons {
            Some(dir) => Lexicons::load_dir(dir),
            None => Ok(Lexicons::default()),
        }
    }
}
