//! Experiment configuration read from TOML.
//!
//! Every table rejects unknown keys. Relative paths are resolved against
//! the directory of the configuration file.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autoencoder::{AutoencoderConfig, TrainSettings};
use crate::datapipe::{window_size, DEFAULT_BIT_DEPTH, DEFAULT_GAMMA};
use crate::diffusion::{SamplerConfig, ScheduleConfig};
use crate::error::{Error, Result};
use crate::ldm::LdmConfig;
use crate::loss::LossWeights;
use crate::tcam::TcamConfig;
use crate::toy::ToySpec;
use crate::zica::ReconConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Autoencoder,
    Ldm,
    Tcam,
    Recon,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::Autoencoder, Stage::Ldm, Stage::Tcam, Stage::Recon];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Autoencoder => "autoencoder",
            Stage::Ldm => "ldm",
            Stage::Tcam => "tcam",
            Stage::Recon => "recon",
        }
    }

    /// Stages whose checkpoints must exist before this one can run.
    pub fn prerequisites(self) -> &'static [Stage] {
        match self {
            Stage::Autoencoder | Stage::Tcam => &[],
            Stage::Ldm => &[Stage::Autoencoder],
            Stage::Recon => &[Stage::Autoencoder, Stage::Ldm, Stage::Tcam],
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage {s:?} (expected autoencoder, ldm, tcam or recon)")))
    }
}

/// Where training sequences come from and how LDR frames are synthesised.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// HDR frame directories (`.hdrf` files in name order).
    #[serde(default)]
    pub hdr_dirs: Vec<PathBuf>,
    /// Procedural sequences appended after the directories.
    #[serde(default)]
    pub toy: Option<ToySpec>,
    /// Center crop `[height, width]` applied to every HDR frame.
    #[serde(default)]
    pub crop: Option<[usize; 2]>,
    #[serde(default = "default_pattern")]
    pub exposure_pattern: Vec<f64>,
    #[serde(default)]
    pub reference_index: usize,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_bit_depth")]
    pub bit_depth: u8,
    #[serde(default)]
    pub noise_sigma: Option<f64>,
}

fn default_pattern() -> Vec<f64> {
    vec![1.0, 8.0]
}
fn default_gamma() -> f64 {
    DEFAULT_GAMMA
}
fn default_bit_depth() -> u8 {
    DEFAULT_BIT_DEPTH
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            hdr_dirs: Vec::new(),
            toy: None,
            crop: None,
            exposure_pattern: default_pattern(),
            reference_index: 0,
            gamma: default_gamma(),
            bit_depth: default_bit_depth(),
            noise_sigma: None,
        }
    }
}

/// Optimiser settings per stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub autoencoder: TrainSettings,
    pub ldm: TrainSettings,
    pub tcam: TrainSettings,
    pub recon: TrainSettings,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let s = |steps, batch_size, lr| TrainSettings { steps, batch_size, lr, seed: 0 };
        Self {
            autoencoder: s(2000, 8, 2e-4),
            ldm: s(2000, 16, 2e-4),
            tcam: s(2000, 4, 2e-4),
            recon: s(1000, 4, 1e-4),
        }
    }
}

impl TrainConfig {
    pub fn for_stage(&self, stage: Stage) -> &TrainSettings {
        match stage {
            Stage::Autoencoder => &self.autoencoder,
            Stage::Ldm => &self.ldm,
            Stage::Tcam => &self.tcam,
            Stage::Recon => &self.recon,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CheckpointPaths {
    /// Directory holding checkpoints and run manifests.
    pub dir: PathBuf,
    pub autoencoder: String,
    pub ldm: String,
    pub tcam: String,
    pub recon: String,
}

impl Default for CheckpointPaths {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("checkpoints"),
            autoencoder: "autoencoder.ckpt".into(),
            ldm: "ldm.ckpt".into(),
            tcam: "tcam.ckpt".into(),
            recon: "recon.ckpt".into(),
        }
    }
}

impl CheckpointPaths {
    pub fn path(&self, stage: Stage) -> PathBuf {
        let file = match stage {
            Stage::Autoencoder => &self.autoencoder,
            Stage::Ldm => &self.ldm,
            Stage::Tcam => &self.tcam,
            Stage::Recon => &self.recon,
        };
        self.dir.join(file)
    }

    pub fn manifest(&self, stage: Stage) -> PathBuf {
        self.dir.join(format!("{stage}.run.json"))
    }
}

/// Switches affecting how stages run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageFlags {
    /// Compare frozen-module digests before and after each stage.
    pub verify_frozen: bool,
    /// Replace `ldm.latent_scale` with one over the latent standard deviation.
    pub auto_latent_scale: bool,
    /// Log the loss every this many steps (0 disables).
    pub log_every: usize,
}

impl Default for StageFlags {
    fn default() -> Self {
        Self {
            verify_frozen: true,
            auto_latent_scale: true,
            log_every: 100,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub autoencoder: AutoencoderConfig,
    #[serde(default)]
    pub ldm: LdmConfig,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub tcam: TcamConfig,
    #[serde(default)]
    pub recon: ReconConfig,
    #[serde(default)]
    pub loss: LossWeights,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub checkpoints: CheckpointPaths,
    #[serde(default)]
    pub stages: StageFlags,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path` and resolves relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        self.data.hdr_dirs.iter_mut().for_each(fix);
        fix(&mut self.checkpoints.dir);
    }

    pub fn validate(&self) -> Result<()> {
        let mus = [self.autoencoder.mu, self.tcam.mu, self.recon.mu];
        if mus.iter().any(|m| *m != mus[0]) {
            return Err(Error::Config(format!("tonemapping mu differs between modules: {mus:?}")));
        }
        if !self.recon.temporal_channels.is_empty() || !self.recon.prior_channels.is_empty() {
            return Err(Error::Config(
                "recon.temporal_channels and recon.prior_channels are derived from the other modules".into(),
            ));
        }
        if self.autoencoder.latent_channels != self.ldm.latent_channels {
            return Err(Error::Config(format!(
                "autoencoder latent channels {} differ from ldm latent channels {}",
                self.autoencoder.latent_channels, self.ldm.latent_channels
            )));
        }
        let ae_scales = self.autoencoder.widths.len();
        let tcam_scales = self.tcam.decoder_widths.len();
        if ae_scales != tcam_scales {
            return Err(Error::Config(format!(
                "autoencoder produces {ae_scales} decoder scales but the temporal decoder produces {tcam_scales}"
            )));
        }
        let window = window_size(self.data.exposure_pattern.len());
        if self.tcam.neighbors + 1 != window {
            return Err(Error::Config(format!(
                "a {}-exposure pattern needs a {window}-frame window, so tcam.neighbors must be {}",
                self.data.exposure_pattern.len(),
                window - 1
            )));
        }
        if self.data.hdr_dirs.is_empty() && self.data.toy.is_none() {
            return Err(Error::Config("data needs hdr_dirs or a toy table".into()));
        }
        Ok(())
    }

    /// Reconstruction settings with channel lists filled in.
    pub fn resolved_recon(&self) -> ReconConfig {
        ReconConfig {
            temporal_channels: self.tcam.decoder_widths.iter().rev().copied().collect(),
            prior_channels: self.autoencoder.widths.iter().rev().copied().collect(),
            ..self.recon.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "[data]\ntoy = {}\n";

    #[test]
    fn minimal_config_uses_defaults() {
        let cfg = ExperimentConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(cfg.data.exposure_pattern, vec![1.0, 8.0]);
        assert_eq!(cfg.train.recon.lr, 1e-4);
        assert_eq!(cfg.train.tcam.lr, 2e-4);
        assert_eq!(cfg.loss, LossWeights::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for text in [
            "bogus = 1\n[data]\ntoy = {}\n",
            "[data]\ntoy = {}\nbogus = 1\n",
            "[data]\ntoy = { frames = 2, bogus = 1 }\n",
            "[data]\ntoy = {}\n[tcam]\nfeatures = 8\nbogus = 1\n",
            "[data]\ntoy = {}\n[train.ldm]\nsteps = 1\nbatch_size = 1\nlr = 1.0\nbogus = 1\n",
        ] {
            let err = ExperimentConfig::from_toml(text).unwrap_err();
            assert!(err.to_string().contains("bogus"), "{err}");
        }
    }

    #[test]
    fn inconsistent_modules_are_rejected() {
        assert!(ExperimentConfig::from_toml("[data]\ntoy = {}\n[tcam]\nmu = 10.0\n").is_err());
        assert!(ExperimentConfig::from_toml("[data]\ntoy = {}\n[tcam]\ndecoder_widths = [8, 8]\n").is_err());
        assert!(ExperimentConfig::from_toml("[data]\n").is_err());
        assert!(ExperimentConfig::from_toml("[data]\ntoy = {}\nexposure_pattern = [1.0, 4.0, 16.0]\n").is_err());
        assert!(ExperimentConfig::from_toml("[data]\ntoy = {}\nexposure_pattern = [1.0, 4.0, 16.0]\n[tcam]\nneighbors = 4\n").is_ok());
    }

    #[test]
    fn stage_names_round_trip() {
        for s in Stage::ALL {
            assert_eq!(s.name().parse::<Stage>().unwrap(), s);
        }
        assert!("bogus".parse::<Stage>().is_err());
    }

    #[test]
    fn recon_channels_follow_other_modules() {
        let cfg = ExperimentConfig::from_toml(MINIMAL).unwrap();
        let r = cfg.resolved_recon();
        assert_eq!(r.temporal_channels, vec![32, 32, 24, 16]);
        assert_eq!(r.prior_channels, vec![32, 32, 16, 8]);
    }
}
