//! `key=value` configuration with per-experiment defaults.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

/// Keys every experiment accepts besides its own.
const COMMON: &[(&str, &str)] = &[("out", ""), ("threads", "0")];

pub const EXPERIMENTS: &[&str] = &[
    "sheet-stats",
    "ito-check",
    "est-check",
    "chaos-rate",
    "chaos-closed-form",
    "picard",
    "fokker-planck",
    "lemma61",
    "control-equiv",
    "control-search",
];

fn defaults(experiment: &str) -> Option<Vec<(&'static str, &'static str)>> {
    let own: &[(&str, &str)] = match experiment {
        "sheet-stats" => &[("seed", "1"), ("reps", "10000"), ("n", "32")],
        "ito-check" => &[("seed", "4"), ("reps", "200"), ("grids", "16,32,64"), ("f", "square"), ("min_ratio", "1.5")],
        "est-check" => &[
            ("seed", "5"),
            ("pairs", "100"),
            ("atoms", "200"),
            ("shift", "0.2"),
            ("spread", "0.5"),
            ("order", "40"),
            ("delta_order", "100"),
            ("slack", "0.02"),
        ],
        "chaos-rate" => &[
            ("seed", "6"),
            ("reps", "100"),
            ("particles", "8,16,32,64"),
            ("n", "32"),
            ("t", "0.5"),
            ("x", "0.5"),
            ("a", "1"),
            ("a_spread", "0"),
            ("q", "0.1"),
        ],
        "chaos-closed-form" => &[("seed", "6"), ("reps", "1"), ("particles", "4"), ("grids", "16,32,64"), ("a", "1"), ("y0", "1")],
        "picard" => &[("seed", "8"), ("m", "200"), ("n", "16"), ("scale", "0.5"), ("max_iter", "12"), ("terms", "60")],
        "fokker-planck" => &[
            ("seed", "9"),
            ("reps", "20"),
            ("m_small", "100"),
            ("m", "1000"),
            ("n", "16"),
            ("fine", "32"),
            ("freqs", "1,2"),
            ("a", "0.5"),
            ("kappa", "1"),
            ("sigma1", "0.6"),
            ("sigma2", "0.8"),
            ("y0", "1"),
        ],
        "lemma61" => &[("cells", "128"), ("h", "1e-3"), ("tol_const", "5e-3"), ("tol_poly", "2e-3")],
        "control-search" => {
            let mut v = defaults("control-equiv")?;
            v.retain(|(k, _)| *k != "thetas");
            v.push(("thetas", "-1,-0.5,0,0.5,1"));
            return Some(v);
        }
        "control-equiv" => &[
            ("seed", "11"),
            ("seed2", "12"),
            ("reps", "100"),
            ("m", "50"),
            ("n", "16"),
            ("thetas", "-0.5,0,0.5"),
            ("cost", "lq"),
            ("lambda", "1"),
            ("target", "0"),
            ("a", "0.5"),
            ("kappa", "1"),
            ("b", "1"),
            ("sigma1", "0.6"),
            ("sigma2", "0.8"),
            ("y0", "1"),
        ],
        _ => return None,
    };
    Some(own.to_vec())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

/// Resolved configuration: every accepted key with its final value.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub experiment: String,
    values: BTreeMap<String, String>,
}

impl ExperimentConfig {
    pub fn parse<S: AsRef<str>>(experiment: &str, overrides: &[S]) -> Result<Self, ConfigError> {
        let own = defaults(experiment)
            .ok_or_else(|| ConfigError(format!("unknown experiment '{experiment}'; expected one of: {}", EXPERIMENTS.join(", "))))?;
        let mut values: BTreeMap<String, String> = own.iter().chain(COMMON.iter()).map(|(k, v)| (k.to_string(), v.to_string())).collect();
        for arg in overrides {
            let arg = arg.as_ref();
            let (k, v) = arg.split_once('=').ok_or_else(|| ConfigError(format!("expected key=value, got '{arg}'")))?;
            match values.get_mut(k) {
                Some(slot) => *slot = v.to_string(),
                None => return Err(ConfigError(format!("unknown key '{k}' for {experiment}"))),
            }
        }
        Ok(Self { experiment: experiment.to_string(), values })
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or_default()
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T, ConfigError> {
        let raw = self.raw(key);
        raw.trim().parse().map_err(|_| ConfigError(format!("cannot parse {key}='{raw}'")))
    }

    pub fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>, ConfigError> {
        let raw = self.raw(key);
        let out: Vec<T> = raw
            .split(',')
            .map(|s| s.trim().parse().map_err(|_| ConfigError(format!("cannot parse list {key}='{raw}'"))))
            .collect::<Result<_, _>>()?;
        if out.is_empty() {
            return Err(ConfigError(format!("{key} must not be empty")));
        }
        Ok(out)
    }

    /// `key=value` pairs in key order, for the output header.
    pub fn echo(&self) -> impl Iterator<Item = (&str, &str)> {
        self.values.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_and_rejections() {
        let c = ExperimentConfig::parse("picard", &["m=40", "scale=0.3"]).unwrap();
        assert_eq!(c.get::<usize>("m").unwrap(), 40);
        assert_eq!(c.get::<f64>("scale").unwrap(), 0.3);
        assert_eq!(c.get::<u64>("seed").unwrap(), 8);
        assert!(ExperimentConfig::parse("picard", &["bogus=1"]).is_err());
        assert!(ExperimentConfig::parse("picard", &["m"]).is_err());
        assert!(ExperimentConfig::parse("nope", &[] as &[&str]).is_err());
        let bad = ExperimentConfig::parse("picard", &["m=abc"]).unwrap();
        assert!(bad.get::<usize>("m").is_err());
        let l = ExperimentConfig::parse("ito-check", &["grids=4, 8"]).unwrap();
        assert_eq!(l.list::<usize>("grids").unwrap(), vec![4, 8]);
    }

    #[test]
    fn every_experiment_has_defaults() {
        for e in EXPERIMENTS {
            let c = ExperimentConfig::parse(e, &[] as &[&str]).unwrap();
            assert!(c.echo().any(|(k, _)| k == "threads"));
        }
    }
}
