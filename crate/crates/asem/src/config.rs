//! Run configuration files.
//!
//! A run config is a TOML file with `[synth]`, `[network]` and `[trainer]`
//! sections. Every key is optional and falls back to its documented default;
//! unknown keys are hard errors. Commands echo the effective (post-default)
//! config into their output directory for provenance.

use crate::error::{Error, Result};
use crate::network::NetworkConfig;
use crate::synthdata::SynthSpec;
use crate::trainer::TrainerConfig;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub synth: SynthSpec,
    pub network: NetworkConfig,
    pub trainer: TrainerConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<RunConfig> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml())
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::GanKind;

    #[test]
    fn defaults_round_trip_through_toml() {
        let config = RunConfig::default();
        let text = config.to_toml();
        let parsed = RunConfig::from_toml(&text).unwrap();
        assert_eq!(config, parsed);
    }

    #[test]
    fn empty_file_yields_defaults() {
        let parsed = RunConfig::from_toml("").unwrap();
        assert_eq!(parsed, RunConfig::default());
        // paper-fixed defaults
        assert_eq!(parsed.trainer.pretrain_lr, 0.001);
        assert_eq!(parsed.trainer.classifier_lr, 0.003);
        assert_eq!(parsed.trainer.adv_lr, 0.001);
        assert_eq!(parsed.trainer.samples_per_recording, 10);
        assert_eq!(parsed.trainer.am.scale, 30.0);
        assert_eq!(parsed.trainer.am.margin, 0.6);
        assert_eq!(parsed.network.post_pool_widths, [512, 512]);
        assert_eq!(parsed.network.disc_widths, vec![256, 256]);
        assert_eq!(parsed.network.embedding_dim, 64);
    }

    #[test]
    fn partial_overrides_keep_other_defaults() {
        let parsed = RunConfig::from_toml(
            "[trainer]\nseed = 99\nvariant = { kind = \"lsgan\", aux = true }\n",
        )
        .unwrap();
        assert_eq!(parsed.trainer.seed, 99);
        assert_eq!(parsed.trainer.variant.kind, GanKind::Lsgan);
        assert!(parsed.trainer.variant.aux);
        assert_eq!(parsed.trainer.batch_size, 64);
        assert_eq!(parsed.synth, RunConfig::default().synth);
    }

    #[test]
    fn unknown_keys_are_hard_errors() {
        for text in [
            "[synth]\nnum_source_speekers = 8\n",
            "[trainer]\nlr = 0.1\n",
            "[mystery]\nx = 1\n",
            "[network]\nembedding_dim = 64\nextra = true\n",
        ] {
            assert!(
                matches!(RunConfig::from_toml(text), Err(Error::Config(_))),
                "expected unknown-key error for {text:?}"
            );
        }
    }

    #[test]
    fn parse_write_parse_is_identity() {
        let text = "[synth]\nseed = 3\nframe_dim = 4\n[trainer]\nbatch_size = 16\n";
        let first = RunConfig::from_toml(text).unwrap();
        let second = RunConfig::from_toml(&first.to_toml()).unwrap();
        assert_eq!(first, second);
    }
}
