use std::path::Path;

use serde::{Deserialize, Serialize};

use patternlens::featenc::{ThresholdMode, DEFAULT_K_ACTIVE};
use patternlens::interphead::HeadConfig;
use patternlens::mlpcls::TrainConfig;
use patternlens::patterns::annotate::HttpClientConfig;
use patternlens::patterns::DiscoverConfig;
use patternlens::synthgen::SyntheticSpec;
use patternlens::transcoder::TranscoderConfig;
use patternlens::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Base seed. `--seed` on the command line overwrites every section seed with it.
    pub seed: u64,
    pub ingest: IngestConfig,
    pub split: SplitConfig,
    pub classifier: TrainConfig,
    pub targets: TargetsConfig,
    pub transcoders: TranscodersConfig,
    pub discover: DiscoverConfig,
    pub annotate: AnnotateConfig,
    pub features: FeaturesConfig,
    pub head: HeadConfig,
    pub synth: Option<SyntheticSpec>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IngestConfig {
    /// Names for the label columns; `label_{i}` when absent.
    pub label_names: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    pub ratios: [f64; 3],
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            ratios: [0.8, 0.1, 0.1],
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum TargetSource {
    /// Classifier penultimate activations.
    #[default]
    Penultimate,
    Logits,
    /// Targets planted by `synth`.
    Planted,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TargetsConfig {
    pub source: TargetSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TranscodersConfig {
    pub members: usize,
    pub seed: u64,
    pub model: TranscoderConfig,
}

impl Default for TranscodersConfig {
    fn default() -> Self {
        TranscodersConfig {
            members: 8,
            seed: 0,
            model: TranscoderConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum ClientKind {
    /// Offline deterministic annotator.
    #[default]
    Mock,
    /// OpenAI-compatible chat completions endpoint.
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnnotateConfig {
    pub client: ClientKind,
    pub http: HttpClientConfig,
    /// Accept every pattern that passes verification, as reviewer `auto-curator`.
    pub auto_accept: bool,
    /// Attempts per pattern for retryable transport failures.
    pub attempts: usize,
}

impl Default for AnnotateConfig {
    fn default() -> Self {
        AnnotateConfig {
            client: ClientKind::Mock,
            http: HttpClientConfig::default(),
            auto_accept: false,
            attempts: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeaturesConfig {
    pub k_active: usize,
    pub threshold_mode: ThresholdMode,
}

impl Default for FeaturesConfig {
    fn default() -> Self {
        FeaturesConfig {
            k_active: DEFAULT_K_ACTIVE,
            threshold_mode: ThresholdMode::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        serde_json::from_slice(bytes).map_err(|e| Error::InvalidArgument(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)
            .map_err(|e| Error::InvalidArgument(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&bytes)
    }

    /// Overwrite the base seed and every section seed.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.split.seed = seed;
        self.classifier.seed = seed;
        self.transcoders.seed = seed;
        self.discover.probe_seed = seed;
        self.head.seed = seed;
        if let Some(s) = &mut self.synth {
            s.seed = seed;
        }
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.split.ratios;
        if r.iter().any(|x| !(*x >= 0.0)) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "split.ratios must be non-negative and sum to 1, got {r:?}"
            )));
        }
        if self.transcoders.members == 0 {
            return Err(Error::InvalidArgument("transcoders.members must be positive".into()));
        }
        if self.features.k_active == 0 {
            return Err(Error::InvalidArgument("features.k_active must be positive".into()));
        }
        if self.annotate.attempts == 0 {
            return Err(Error::InvalidArgument("annotate.attempts must be positive".into()));
        }
        self.classifier.validate()?;
        self.transcoders.model.validate()?;
        self.head.validate()?;
        if let Some(s) = &self.synth {
            s.validate()?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_roundtrips() {
        let c = PipelineConfig::default();
        let back = PipelineConfig::from_json(&serde_json::to_vec(&c).unwrap()).unwrap();
        assert_eq!(back, c);
        c.validate().unwrap();
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(PipelineConfig::from_json(br#"{"sed": 1}"#).is_err());
        assert!(PipelineConfig::from_json(br#"{"head": {"alpah": 1}}"#).is_err());
        let c = PipelineConfig::from_json(br#"{"head": {"alpha": 0.5}}"#).unwrap();
        assert_eq!(c.head.alpha, 0.5);
        assert_eq!(c.transcoders.members, 8);
    }

    #[test]
    fn seed_reaches_every_section() {
        let mut c = PipelineConfig::default();
        c.set_seed(41);
        assert_eq!(
            [
                c.split.seed,
                c.classifier.seed,
                c.transcoders.seed,
                c.discover.probe_seed,
                c.head.seed
            ],
            [41; 5]
        );
    }
}
