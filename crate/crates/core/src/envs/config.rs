use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::EnvError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Marine,
    Fc,
}

/// Difficulty tier of a named preset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tier {
    Easy,
    Medium,
    Hard,
}

impl Tier {
    pub fn index(self) -> usize {
        match self {
            Tier::Easy => 0,
            Tier::Medium => 1,
            Tier::Hard => 2,
        }
    }
}

/// Named preset, e.g. `marine-easy` or `fc-hard`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Preset {
    pub domain: Domain,
    pub tier: Tier,
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let d = match self.domain {
            Domain::Marine => "marine",
            Domain::Fc => "fc",
        };
        let t = match self.tier {
            Tier::Easy => "easy",
            Tier::Medium => "medium",
            Tier::Hard => "hard",
        };
        write!(f, "{d}-{t}")
    }
}

impl FromStr for Preset {
    type Err = EnvError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (d, t) = s.split_once('-').ok_or_else(|| EnvError::UnknownPreset(s.to_string()))?;
        let domain = match d {
            "marine" => Domain::Marine,
            "fc" => Domain::Fc,
            _ => return Err(EnvError::UnknownPreset(s.to_string())),
        };
        let tier = match t {
            "easy" => Tier::Easy,
            "medium" => Tier::Medium,
            "hard" => Tier::Hard,
            _ => return Err(EnvError::UnknownPreset(s.to_string())),
        };
        Ok(Preset { domain, tier })
    }
}

impl TryFrom<String> for Preset {
    type Error = EnvError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<Preset> for String {
    fn from(p: Preset) -> String {
        p.to_string()
    }
}

/// Simulator configuration.
///
/// `n_type1` counts routing agents (MARINE) or perception agents (FC); `n_type2`
/// counts logistic or action agents. `n_targets` is the number of destinations
/// or initial fires.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub domain: Domain,
    pub width: usize,
    pub height: usize,
    pub fov: usize,
    pub n_type1: usize,
    pub n_type2: usize,
    pub n_targets: usize,
    pub max_steps: usize,
    #[serde(default)]
    pub initial_fuel: f64,
    #[serde(default)]
    pub subarea_side: usize,
    #[serde(default)]
    pub seed: u64,
    /// Standard deviation of the AR(1) wave noise (MARINE).
    #[serde(default = "default_wave_noise")]
    pub wave_noise: f64,
    /// Base per-neighbor ignition probability (FC).
    #[serde(default = "default_spread")]
    pub fire_spread: f64,
    /// Multiplier on `fire_spread` for the downwind neighbor (FC).
    #[serde(default = "default_downwind")]
    pub downwind_factor: f64,
}

fn default_wave_noise() -> f64 {
    0.1
}

fn default_spread() -> f64 {
    0.05
}

fn default_downwind() -> f64 {
    3.0
}

impl EnvConfig {
    pub fn preset(p: Preset) -> Self {
        let base = |domain, w: usize, fov, n1, n2, h, fuel, sub| EnvConfig {
            domain,
            width: w,
            height: w,
            fov,
            n_type1: n1,
            n_type2: n2,
            n_targets: 1,
            max_steps: h,
            initial_fuel: fuel,
            subarea_side: sub,
            seed: 0,
            wave_noise: default_wave_noise(),
            fire_spread: default_spread(),
            downwind_factor: default_downwind(),
        };
        match (p.domain, p.tier) {
            (Domain::Marine, Tier::Easy) => base(Domain::Marine, 5, 3, 2, 1, 50, 5.0, 0),
            (Domain::Marine, Tier::Medium) => base(Domain::Marine, 10, 3, 3, 2, 100, 10.0, 0),
            (Domain::Marine, Tier::Hard) => base(Domain::Marine, 20, 5, 6, 4, 200, 20.0, 0),
            // Perception count first: 1P/2A, 2P/3A, 4P/6A.
            (Domain::Fc, Tier::Easy) => base(Domain::Fc, 5, 3, 1, 2, 50, 0.0, 5),
            (Domain::Fc, Tier::Medium) => base(Domain::Fc, 10, 3, 2, 3, 100, 0.0, 5),
            (Domain::Fc, Tier::Hard) => base(Domain::Fc, 21, 5, 4, 6, 210, 0.0, 7),
        }
    }

    pub fn named(name: &str) -> Result<Self, EnvError> {
        Ok(Self::preset(name.parse()?))
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn n_agents(&self) -> usize {
        self.n_type1 + self.n_type2
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        let bad = |m: String| Err(EnvError::InvalidConfig(m));
        if self.width == 0 || self.height == 0 {
            return bad("grid must be non-empty".into());
        }
        if self.fov < 3 || self.fov % 2 == 0 {
            return bad(format!("fov must be odd and >= 3, got {}", self.fov));
        }
        if self.n_type1 == 0 || self.n_type2 == 0 || self.n_targets == 0 {
            return bad("agent and target counts must be >= 1".into());
        }
        if self.max_steps == 0 {
            return bad("max_steps must be >= 1".into());
        }
        match self.domain {
            Domain::Marine => {
                if !(self.initial_fuel >= 1.0 && self.initial_fuel.is_finite()) {
                    return bad("initial_fuel must be >= 1".into());
                }
                if !(self.wave_noise >= 0.0 && self.wave_noise.is_finite()) {
                    return bad("wave_noise must be >= 0".into());
                }
            }
            Domain::Fc => {
                if self.subarea_side == 0
                    || self.subarea_side > self.width.max(self.height)
                {
                    return bad("subarea_side must be in [1, grid side]".into());
                }
                if !(0.0..=1.0).contains(&self.fire_spread)
                    || !(self.fire_spread * self.downwind_factor <= 1.0 && self.downwind_factor >= 1.0)
                {
                    return bad("fire spread probabilities must lie in [0, 1]".into());
                }
            }
        }
        let entities = match self.domain {
            Domain::Marine => self.n_agents() + self.n_targets,
            Domain::Fc => self.n_agents() + self.n_targets,
        };
        if entities > self.width * self.height {
            return Err(EnvError::GridTooSmall { cells: self.width * self.height, entities });
        }
        Ok(())
    }
}
