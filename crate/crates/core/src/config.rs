//! Simulation configuration: arena and episode settings, radio, DVFS tables,
//! battery wear constants and cost weights.
//!
//! Files are TOML (sections `[sim]`, `[link]`, `[md_dvfs]`, `[ed_dvfs]`,
//! `[battery]`, `[cost]`, with `seed` at the top level) or the same structure in
//! JSON. Every field is optional; absent fields take the defaults below.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::battery::BatteryParams;
use crate::channel::LinkParams;
use crate::compute::DvfsTable;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub num_mds: usize,
    pub num_eds: usize,
    /// Side of the square arena, meters.
    pub arena_side: f64,
    /// Maximum D2D link distance, meters.
    pub d2d_range: f64,
    /// Slot length, seconds.
    pub slot_length: f64,
    pub episode_slots: usize,
    pub task_gen_prob: f64,
    /// Per-device, per-slot disconnection probability.
    pub disconnect_prob: f64,
    /// Overrides `disconnect_prob` for mobile devices.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub md_disconnect_prob: Option<f64>,
    /// Overrides `disconnect_prob` for edge devices.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ed_disconnect_prob: Option<f64>,
    /// Joules.
    pub battery_capacity: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            num_mds: 7,
            num_eds: 5,
            arena_side: 200.0,
            d2d_range: 30.0,
            slot_length: 1.0,
            episode_slots: 100,
            task_gen_prob: 0.9,
            disconnect_prob: 0.1,
            md_disconnect_prob: None,
            ed_disconnect_prob: None,
            battery_capacity: 1000.0,
        }
    }
}

fn check_prob(field: &'static str, p: f64) -> Result<()> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::invalid(field, format!("must lie in [0, 1], got {p}")))
    }
}

fn check_positive(field: &'static str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(field, format!("must be > 0, got {v}")))
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_mds < 1 {
            return Err(Error::invalid("num_mds", "must be >= 1"));
        }
        if self.num_eds < 1 {
            return Err(Error::invalid("num_eds", "must be >= 1"));
        }
        if self.episode_slots < 1 {
            return Err(Error::invalid("episode_slots", "must be >= 1"));
        }
        check_positive("arena_side", self.arena_side)?;
        check_positive("d2d_range", self.d2d_range)?;
        check_positive("slot_length", self.slot_length)?;
        check_positive("battery_capacity", self.battery_capacity)?;
        if self.d2d_range > self.arena_side {
            return Err(Error::invalid("d2d_range", "must not exceed arena_side"));
        }
        check_prob("task_gen_prob", self.task_gen_prob)?;
        check_prob("disconnect_prob", self.disconnect_prob)?;
        if let Some(p) = self.md_disconnect_prob {
            check_prob("md_disconnect_prob", p)?;
        }
        if let Some(p) = self.ed_disconnect_prob {
            check_prob("ed_disconnect_prob", p)?;
        }
        Ok(())
    }

    pub fn md_disconnect(&self) -> f64 {
        self.md_disconnect_prob.unwrap_or(self.disconnect_prob)
    }

    pub fn ed_disconnect(&self) -> f64 {
        self.ed_disconnect_prob.unwrap_or(self.disconnect_prob)
    }

    pub fn num_devices(&self) -> usize {
        self.num_mds + self.num_eds
    }

    /// Episode length in seconds.
    pub fn horizon(&self) -> f64 {
        self.episode_slots as f64 * self.slot_length
    }
}

/// Weights of the per-task cost and the reward scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostWeights {
    /// Per joule of prioritized energy.
    pub energy: f64,
    pub drop: f64,
    pub failure: f64,
    pub degradation: f64,
    /// Reward scale: reward = -reward_scale * cost.
    pub reward_scale: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        Self {
            energy: 1.0,
            drop: 1.0,
            failure: 1.0,
            degradation: 1e4,
            reward_scale: 0.1,
        }
    }
}

impl CostWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            ("energy", self.energy),
            ("drop", self.drop),
            ("failure", self.failure),
            ("degradation", self.degradation),
            ("reward_scale", self.reward_scale),
        ];
        for (field, v) in all {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(field, format!("must be >= 0, got {v}")));
            }
        }
        if all.iter().all(|&(_, v)| v == 0.0) {
            return Err(Error::invalid("cost", "at least one weight must be > 0"));
        }
        Ok(())
    }
}

/// Everything needed to build an environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub sim: SimConfig,
    pub link: LinkParams<f64>,
    pub md_dvfs: DvfsTable<f64>,
    pub ed_dvfs: DvfsTable<f64>,
    pub battery: BatteryParams<f64>,
    pub cost: CostWeights,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 0,
            sim: SimConfig::default(),
            link: LinkParams::default(),
            md_dvfs: DvfsTable::default_md(),
            ed_dvfs: DvfsTable::default_ed(),
            battery: BatteryParams::default(),
            cost: CostWeights::default(),
        }
    }
}

impl Config {
    pub fn validate(&self) -> Result<()> {
        self.sim.validate()?;
        self.link.validate()?;
        self.md_dvfs.validate("md_dvfs")?;
        self.ed_dvfs.validate("ed_dvfs")?;
        if self.md_dvfs.num_modes() != self.ed_dvfs.num_modes() {
            return Err(Error::invalid(
                "ed_dvfs",
                "MD and ED tables must have the same number of modes",
            ));
        }
        self.battery.validate()?;
        self.cost.validate()
    }

    /// Number of selectable CPU operating modes.
    pub fn num_modes(&self) -> usize {
        self.md_dvfs.num_modes()
    }

    /// Same configuration with both tables pinned to their fastest mode.
    pub fn fixed_max_frequency(&self) -> Self {
        let mut out = self.clone();
        out.md_dvfs = self.md_dvfs.pinned(self.md_dvfs.max_mode());
        out.ed_dvfs = self.ed_dvfs.pinned(self.ed_dvfs.max_mode());
        out
    }

    /// Parses TOML, or JSON when the text starts with `{`, and validates.
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Config = if text.trim_start().starts_with('{') {
            serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?
        } else {
            toml::from_str(text).map_err(|e| Error::Parse(e.to_string().replace('\n', " ")))?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_toml()).map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })
    }
}

pub fn load_config(path: impl AsRef<Path>) -> Result<Config> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    Config::parse(&text)
}
