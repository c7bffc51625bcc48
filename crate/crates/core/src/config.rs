//! Flat `key = value` configuration files.
//!
//! Blank lines and lines starting with `#` are ignored. Every key is
//! optional; missing keys keep their defaults. Unknown or repeated keys and
//! unparsable values are configuration errors.
//!
//! | key | field |
//! |---|---|
//! | `mode` | `e2e`, `tbd`, `ensemble` or `auto` |
//! | `tau_init`, `tau_update` | thresholds |
//! | `max_age` | frames a lost track survives |
//! | `w_iou`, `w_app`, `max_cost`, `max_cost_low`, `tau_split` | association |
//! | `geometry` | `cyclic` or `clamped` |
//! | `memory` | `true` / `false` |
//! | `n_m`, `K_r`, `n_e`, `theta_sim`, `temperature`, `lambda`, `expert_perturbation` | memory |
//! | `claim_gate`, `instances`, `sigma_x`, `sigma_y` | instances |
//! | `emit_lost`, `dssm`, `dssm_directions`, `ensemble_iou`, `auto_high`, `auto_low` | misc |
//! | `process_noise_pos`, `process_noise_vel`, `measurement_noise` | Kalman filter |
//! | `seed` | |

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tracker::TrackerConfig;

fn value<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("invalid value `{v}` for `{key}`")))
}

fn set(cfg: &mut TrackerConfig, key: &str, v: &str) -> Result<()> {
    match key {
        "mode" => cfg.mode = v.parse()?,
        "tau_init" => cfg.tau_init = value(key, v)?,
        "tau_update" => cfg.tau_update = value(key, v)?,
        "max_age" => cfg.max_age = value(key, v)?,
        "w_iou" => cfg.association.w_iou = value(key, v)?,
        "w_app" => cfg.association.w_app = value(key, v)?,
        "max_cost" => cfg.association.max_cost = value(key, v)?,
        "max_cost_low" => cfg.association.max_cost_low = value(key, v)?,
        "tau_split" => cfg.association.tau_split = value(key, v)?,
        "geometry" => cfg.association.geometry = v.parse()?,
        "memory" => cfg.memory.enabled = value(key, v)?,
        "n_m" => cfg.memory.capacity = value(key, v)?,
        "K_r" => cfg.memory.k_r = value(key, v)?,
        "n_e" => cfg.memory.n_experts = value(key, v)?,
        "theta_sim" => cfg.memory.theta_sim = value(key, v)?,
        "temperature" => cfg.memory.temperature = value(key, v)?,
        "lambda" => cfg.memory.lambda = value(key, v)?,
        "expert_perturbation" => cfg.memory.expert_perturbation = value(key, v)?,
        "claim_gate" => cfg.claim_gate = value(key, v)?,
        "instances" => cfg.instances = v.parse()?,
        "sigma_x" => cfg.sigma_x = value(key, v)?,
        "sigma_y" => cfg.sigma_y = value(key, v)?,
        "emit_lost" => cfg.emit_lost = value(key, v)?,
        "dssm" => cfg.dssm = value(key, v)?,
        "dssm_directions" => cfg.dssm_directions = value(key, v)?,
        "ensemble_iou" => cfg.ensemble_iou = value(key, v)?,
        "auto_high" => cfg.auto_high = value(key, v)?,
        "auto_low" => cfg.auto_low = value(key, v)?,
        "process_noise_pos" => cfg.process_noise.position = value(key, v)?,
        "process_noise_vel" => cfg.process_noise.velocity = value(key, v)?,
        "measurement_noise" => cfg.measurement_noise.std = value(key, v)?,
        "seed" => cfg.seed = value(key, v)?,
        _ => return Err(Error::Config(format!("unknown key `{key}`"))),
    }
    Ok(())
}

/// Applies the settings in `text` on top of `base` and validates the result.
pub fn parse_config_onto(base: TrackerConfig, text: &str) -> Result<TrackerConfig> {
    let mut cfg = base;
    let mut seen = BTreeSet::new();
    for (k, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, v)) = line.split_once('=') else {
            return Err(Error::Config(format!("line {}: expected `key = value`", k + 1)));
        };
        let (key, v) = (key.trim(), v.trim());
        if !seen.insert(key.to_string()) {
            return Err(Error::Config(format!("line {}: `{key}` set twice", k + 1)));
        }
        set(&mut cfg, key, v).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("line {}: {m}", k + 1)),
            other => other,
        })?;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(text: &str) -> Result<TrackerConfig> {
    parse_config_onto(TrackerConfig::default(), text)
}

/// Reads a config file. A missing or unreadable file is an input error.
pub fn load_config(path: impl AsRef<Path>) -> Result<TrackerConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Input(format!("cannot read {}: {e}", path.display())))?;
    parse_config(&text)
}

/// Writes every key; `parse_config(&config_text(c))` reproduces `c`.
pub fn config_text(cfg: &TrackerConfig) -> String {
    let a = &cfg.association;
    let m = &cfg.memory;
    let entries: Vec<(&str, String)> = vec![
        ("mode", cfg.mode.to_string()),
        ("tau_init", cfg.tau_init.to_string()),
        ("tau_update", cfg.tau_update.to_string()),
        ("max_age", cfg.max_age.to_string()),
        ("w_iou", a.w_iou.to_string()),
        ("w_app", a.w_app.to_string()),
        ("max_cost", a.max_cost.to_string()),
        ("max_cost_low", a.max_cost_low.to_string()),
        ("tau_split", a.tau_split.to_string()),
        ("geometry", a.geometry.to_string()),
        ("memory", m.enabled.to_string()),
        ("n_m", m.capacity.to_string()),
        ("K_r", m.k_r.to_string()),
        ("n_e", m.n_experts.to_string()),
        ("theta_sim", m.theta_sim.to_string()),
        ("temperature", m.temperature.to_string()),
        ("lambda", m.lambda.to_string()),
        ("expert_perturbation", m.expert_perturbation.to_string()),
        ("claim_gate", cfg.claim_gate.to_string()),
        ("instances", cfg.instances.to_string()),
        ("sigma_x", cfg.sigma_x.to_string()),
        ("sigma_y", cfg.sigma_y.to_string()),
        ("emit_lost", cfg.emit_lost.to_string()),
        ("dssm", cfg.dssm.to_string()),
        ("dssm_directions", cfg.dssm_directions.to_string()),
        ("ensemble_iou", cfg.ensemble_iou.to_string()),
        ("auto_high", cfg.auto_high.to_string()),
        ("auto_low", cfg.auto_low.to_string()),
        ("process_noise_pos", cfg.process_noise.position.to_string()),
        ("process_noise_vel", cfg.process_noise.velocity.to_string()),
        ("measurement_noise", cfg.measurement_noise.std.to_string()),
        ("seed", cfg.seed.to_string()),
    ];
    let mut out = String::new();
    for (k, v) in entries {
        let _ = writeln!(out, "{k} = {v}");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tracker::TrackingMode;

    #[test]
    fn empty_text_gives_defaults() {
        assert_eq!(parse_config("").unwrap(), TrackerConfig::default());
        assert_eq!(parse_config("# nothing\n\n").unwrap(), TrackerConfig::default());
    }

    #[test]
    fn documented_keys_parse() {
        let cfg = parse_config(
            "mode = tbd\ntau_init=0.4\ntau_update = 0.6\nmax_age = 12\nw_iou = 0.7\nw_app = 0.3\n\
             tau_split = 0.45\nn_m = 6\nK_r = 2\nn_e = 3\nlambda = 0.25\nseed = 9\n",
        )
        .unwrap();
        assert_eq!(cfg.mode, TrackingMode::Tbd);
        assert_eq!(cfg.tau_init, 0.4);
        assert_eq!(cfg.tau_update, 0.6);
        assert_eq!(cfg.max_age, 12);
        assert_eq!(cfg.association.w_iou, 0.7);
        assert_eq!(cfg.association.tau_split, 0.45);
        assert_eq!(cfg.memory.capacity, 6);
        assert_eq!(cfg.memory.k_r, 2);
        assert_eq!(cfg.memory.n_experts, 3);
        assert_eq!(cfg.memory.lambda, 0.25);
        assert_eq!(cfg.seed, 9);
    }

    #[test]
    fn errors_are_config_errors() {
        for bad in [
            "bogus = 1",
            "tau_init = high",
            "tau_init = 1.5",
            "mode = fast",
            "seed = 1\nseed = 2",
            "just words",
            "w_iou = 0.9",
            "n_m = 5",
        ] {
            assert!(parse_config(bad).unwrap_err().is_config(), "{bad}");
        }
    }

    #[test]
    fn text_round_trip() {
        let mut cfg = TrackerConfig::default();
        cfg.tau_init = 0.1 + 0.2;
        cfg.mode = TrackingMode::Auto;
        cfg.memory.enabled = false;
        assert_eq!(parse_config(&config_text(&cfg)).unwrap(), cfg);
        assert_eq!(parse_config(&config_text(&TrackerConfig::default())).unwrap(), TrackerConfig::default());
    }
}
