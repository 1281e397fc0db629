use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::EnvError;

/// Remove `agent` from the simulation when the clock reaches `step`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttritionEvent {
    pub step: u64,
    pub agent: usize,
}

/// Reward mixing and normalization constants.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardConfig {
    pub alpha: f64,
    pub beta: f64,
    pub epsilon: f64,
    /// When set, the terminal reward is paid on the step taken at
    /// `episode_len - 1`.
    pub episode_len: Option<u64>,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 0.5,
            epsilon: 1e-5,
            episode_len: Some(200),
        }
    }
}

/// Environment and disturbance settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    /// Bernoulli reception probability of each telemetry message.
    pub comm_success: f64,
    /// Observation radius in meters; `f64::INFINITY` for unlimited.
    pub obs_radius: f64,
    pub attrition: Vec<AttritionEvent>,
    /// Idleness at which the normalized idleness feature saturates at 1.
    pub zeta_scale: f64,
    pub episode_len: u64,
    pub seed: u64,
    /// Steps between telemetry broadcasts (at least 1, i.e. ≤ 1 Hz).
    pub telemetry_period: u64,
    /// Believed positions of other agents older than this are dropped.
    pub agent_belief_ttl: u64,
    pub max_neighbors: usize,
    pub rewards: RewardConfig,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            comm_success: 1.0,
            obs_radius: f64::INFINITY,
            attrition: Vec::new(),
            zeta_scale: 50.0,
            episode_len: 200,
            seed: 0,
            telemetry_period: 1,
            agent_belief_ttl: 20,
            max_neighbors: 10,
            rewards: RewardConfig::default(),
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<(), EnvError> {
        let fail = |message: String| Err(EnvError::Config { line: 0, message });
        if !(0.0..=1.0).contains(&self.comm_success) {
            return fail(format!("comm_success {} outside [0,1]", self.comm_success));
        }
        if !(self.obs_radius >= 0.0) {
            return fail(format!("obs_radius {} must be non-negative", self.obs_radius));
        }
        if !(self.zeta_scale > 0.0) {
            return fail("zeta_scale must be positive".into());
        }
        if self.episode_len < 2 {
            return fail("episode_len must be at least 2".into());
        }
        if self.telemetry_period == 0 {
            return fail("telemetry_period must be at least 1".into());
        }
        if self.max_neighbors == 0 {
            return fail("max_neighbors must be at least 1".into());
        }
        Ok(())
    }

    /// Reward constants with the terminal step tied to `episode_len`.
    pub fn reward_config(&self) -> RewardConfig {
        RewardConfig {
            episode_len: Some(self.episode_len),
            ..self.rewards
        }
    }

    /// Parses `key = value` lines over the defaults. Recognized keys:
    /// `comm_success`, `obs_radius` (`inf` allowed), `attrition`
    /// (`<step>:<agent>,<step>:<agent>`), `zeta_scale`, `episode_len`,
    /// `seed`, `telemetry_period`, `agent_belief_ttl`, `max_neighbors`,
    /// `alpha`, `beta`.
    pub fn parse(text: &str) -> Result<Self, EnvError> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| EnvError::Config {
                line: i + 1,
                message: format!("expected `key = value`, found `{line}`"),
            })?;
            cfg.set(key.trim(), value.trim()).map_err(|message| EnvError::Config {
                line: i + 1,
                message,
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies one `key = value` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, String> {
            v.parse().map_err(|_| format!("bad value `{v}` for {key}"))
        }
        match key {
            "comm_success" => self.comm_success = num(key, value)?,
            "obs_radius" => {
                self.obs_radius = match value {
                    "inf" | "infinity" | "∞" => f64::INFINITY,
                    v => num(key, v)?,
                }
            }
            "attrition" => self.attrition = parse_attrition(value)?,
            "zeta_scale" => self.zeta_scale = num(key, value)?,
            "episode_len" => self.episode_len = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "telemetry_period" => self.telemetry_period = num(key, value)?,
            "agent_belief_ttl" => self.agent_belief_ttl = num(key, value)?,
            "max_neighbors" => self.max_neighbors = num(key, value)?,
            "alpha" => self.rewards.alpha = num(key, value)?,
            "beta" => self.rewards.beta = num(key, value)?,
            other => return Err(format!("unknown key `{other}`")),
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "comm_success = {}", self.comm_success);
        if self.obs_radius.is_infinite() {
            let _ = writeln!(out, "obs_radius = inf");
        } else {
            let _ = writeln!(out, "obs_radius = {}", self.obs_radius);
        }
        let _ = writeln!(out, "attrition = {}", format_attrition(&self.attrition));
        let _ = writeln!(out, "zeta_scale = {}", self.zeta_scale);
        let _ = writeln!(out, "episode_len = {}", self.episode_len);
        let _ = writeln!(out, "seed = {}", self.seed);
        let _ = writeln!(out, "telemetry_period = {}", self.telemetry_period);
        let _ = writeln!(out, "agent_belief_ttl = {}", self.agent_belief_ttl);
        let _ = writeln!(out, "max_neighbors = {}", self.max_neighbors);
        let _ = writeln!(out, "alpha = {}", self.rewards.alpha);
        let _ = writeln!(out, "beta = {}", self.rewards.beta);
        out
    }
}

pub fn parse_attrition(value: &str) -> Result<Vec<AttritionEvent>, String> {
    let value = value.trim();
    if value.is_empty() || value == "none" {
        return Ok(Vec::new());
    }
    let mut events: Vec<AttritionEvent> = value
        .split(',')
        .map(|item| {
            let (step, agent) = item
                .trim()
                .split_once(':')
                .ok_or_else(|| format!("attrition entry `{item}` is not `<step>:<agent>`"))?;
            Ok(AttritionEvent {
                step: step.trim().parse().map_err(|_| format!("bad step in `{item}`"))?,
                agent: agent.trim().parse().map_err(|_| format!("bad agent in `{item}`"))?,
            })
        })
        .collect::<Result<_, String>>()?;
    events.sort_by_key(|e| (e.step, e.agent));
    Ok(events)
}

pub fn format_attrition(events: &[AttritionEvent]) -> String {
    if events.is_empty() {
        return "none".into();
    }
    events
        .iter()
        .map(|e| format!("{}:{}", e.step, e.agent))
        .collect::<Vec<_>>()
        .join(",")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_all_keys() {
        let cfg = EnvConfig::parse(
            "# disturbance\ncomm_success = 0.1\nobs_radius = 6\nattrition = 600:2, 300:1\nzeta_scale = 40\nepisode_len = 100\nseed = 9\n",
        )
        .unwrap();
        assert_eq!(cfg.comm_success, 0.1);
        assert_eq!(cfg.obs_radius, 6.0);
        assert_eq!(
            cfg.attrition,
            vec![
                AttritionEvent { step: 300, agent: 1 },
                AttritionEvent { step: 600, agent: 2 }
            ]
        );
        assert_eq!(cfg.zeta_scale, 40.0);
        assert_eq!(cfg.episode_len, 100);
        assert_eq!(cfg.seed, 9);
        assert_eq!(EnvConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn infinite_radius_and_errors() {
        assert!(EnvConfig::parse("obs_radius = inf").unwrap().obs_radius.is_infinite());
        assert!(matches!(
            EnvConfig::parse("bogus = 1"),
            Err(EnvError::Config { line: 1, .. })
        ));
        assert!(matches!(
            EnvConfig::parse("\ncomm_success = 1.5"),
            Err(EnvError::Config { .. })
        ));
    }
}
