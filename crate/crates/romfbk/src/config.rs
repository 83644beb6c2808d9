//! One JSON configuration drives the whole pipeline.
//!
//! Every field has a default tuned to the desk-scale problem (32×32 grid,
//! 20 scenarios plus mirror twins, POD+AE reduction), so an empty file or
//! no file at all gives a working setup. Top-level fields may be set
//! individually; nested sections must be complete when present.
//!
//! [`RunConfig::resolved`] derives the fields that must stay consistent
//! across sections from their single source of truth: sampler and trainer
//! seeds come from the root seed, the trainer's parameter box and target
//! variance come from the dataset section. Values written into those
//! derived fields by hand are overwritten.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::grid::{FomConfig, Grid};
use crate::ocp::{DatasetConfig, OcpConfig};
use crate::seed::derive_seed;
use crate::training::TrainConfig;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Cells per direction of the uniform grid.
    pub nx: usize,
    pub fom: FomConfig,
    pub ocp: OcpConfig,
    pub dataset: DatasetConfig,
    pub train: TrainConfig,
    /// Root seed; all per-phase seeds derive from it.
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            nx: 32,
            fom: FomConfig { nu: 1e-3, dt: 0.25, t_final: 1.0, nt: 4 },
            ocp: OcpConfig::default(),
            dataset: DatasetConfig::default(),
            train: TrainConfig::default(),
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let bytes = std::fs::read(path)?;
        let cfg: RunConfig = serde_json::from_slice(&bytes)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_vec_pretty(self)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn grid(&self) -> Result<Grid> {
        Grid::build(self.nx)
    }

    pub fn validate(&self) -> Result<()> {
        Grid::build(self.nx)?;
        let rebuilt = FomConfig::new(self.fom.nu, self.fom.dt, self.fom.t_final)?;
        if rebuilt.nt != self.fom.nt {
            return Err(Error::invalid(format!(
                "fom.nt = {} disagrees with t_final/dt = {}",
                self.fom.nt, rebuilt.nt
            )));
        }
        if !(self.dataset.variance > 0.0) {
            return Err(Error::invalid("dataset.variance must be positive"));
        }
        if self.train.latent_state == 0 || self.train.latent_control == 0 {
            return Err(Error::invalid("latent widths must be positive"));
        }
        Ok(())
    }

    /// Copy with all derived fields filled in; `seed_override` replaces the
    /// root seed first when given.
    pub fn resolved(&self, seed_override: Option<u64>) -> RunConfig {
        let mut c = self.clone();
        if let Some(s) = seed_override {
            c.seed = s;
        }
        c.dataset.seed = derive_seed(c.seed, "dataset");
        c.train.seed = derive_seed(c.seed, "train");
        c.train.variance = c.dataset.variance;
        c.ocp.target_variance = c.dataset.variance;
        let mut mu_box = vec![
            (c.dataset.target_box.0 .0, c.dataset.target_box.0 .1),
            (c.dataset.target_box.1 .0, c.dataset.target_box.1 .1),
        ];
        if let Some((gamma, alpha)) = c.dataset.flow_ranges {
            mu_box.push(gamma);
            mu_box.push(alpha);
        }
        c.train.mu_box = mu_box;
        c
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_describe_the_desk_problem() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.nx, 32);
        assert_eq!(cfg.fom.nt, 4);
        assert_eq!(cfg.dataset.n_scenarios, 20);
        assert_eq!(cfg.train.latent_state, 10);
        assert_eq!(cfg.train.latent_control, 18);
    }

    #[test]
    fn json_round_trip_preserves_the_config() {
        let cfg = RunConfig::default();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        cfg.save(&path).unwrap();
        let back = RunConfig::load(&path).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn partial_files_fall_back_to_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        std::fs::write(&path, br#"{"nx": 16, "seed": 7}"#).unwrap();
        let cfg = RunConfig::load(&path).unwrap();
        assert_eq!(cfg.nx, 16);
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.dataset.n_scenarios, 20);
    }

    #[test]
    fn inconsistent_time_grids_are_rejected() {
        let mut cfg = RunConfig::default();
        cfg.fom.nt = 5;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn resolution_derives_seeds_and_the_parameter_box() {
        let mut cfg = RunConfig::default();
        cfg.train.mu_box = vec![(9.0, 10.0)];
        cfg.train.variance = 99.0;
        let r = cfg.resolved(Some(5));
        assert_eq!(r.seed, 5);
        assert_eq!(r.dataset.seed, derive_seed(5, "dataset"));
        assert_eq!(r.train.seed, derive_seed(5, "train"));
        assert_eq!(r.train.variance, r.dataset.variance);
        assert_eq!(r.train.mu_box.len(), 2);
        assert_eq!(r.train.mu_box[0], (0.0, 0.5));
        assert_eq!(r.train.mu_box[1], (-0.5, 0.5));

        cfg.dataset.flow_ranges = Some(((0.0, 0.5), (-0.5, 0.5)));
        cfg.dataset.augment = false;
        let r = cfg.resolved(None);
        assert_eq!(r.train.mu_box.len(), 4);
    }
}
