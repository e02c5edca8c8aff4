use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{run_training, RunConfig};
use crate::agent::AdvantageMode;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    EpsGreedySelection,
    DisableMiReg,
    NStepAdvantage,
    TruncatedAdvantage,
}

impl Variant {
    pub const ALL: [Variant; 4] =
        [Variant::EpsGreedySelection, Variant::DisableMiReg, Variant::NStepAdvantage, Variant::TruncatedAdvantage];

    pub fn name(self) -> &'static str {
        match self {
            Variant::EpsGreedySelection => "eps_greedy_selection",
            Variant::DisableMiReg => "disable_mi_reg",
            Variant::NStepAdvantage => "n_step_advantage",
            Variant::TruncatedAdvantage => "truncated_advantage",
        }
    }

    pub fn apply(self, config: &mut RunConfig) {
        let agent = &mut config.agent;
        match self {
            Variant::EpsGreedySelection => agent.eps_greedy_selection = true,
            Variant::DisableMiReg => agent.disable_mi_reg = true,
            Variant::NStepAdvantage => agent.advantage_mode = Some(AdvantageMode::NStep),
            Variant::TruncatedAdvantage => agent.advantage_mode = Some(AdvantageMode::Truncated),
        }
    }

    /// Parses a comma-separated list; an empty string is an empty list.
    pub fn parse_list(list: &str) -> Result<Vec<Variant>> {
        list.split(',').map(str::trim).filter(|s| !s.is_empty()).map(str::parse).collect()
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL.into_iter().find(|v| v.name() == s).ok_or_else(|| {
            let known: Vec<&str> = Variant::ALL.iter().map(|v| v.name()).collect();
            Error::Usage(format!("unknown variant `{s}` (known: {})", known.join(", ")))
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub config: String,
    pub seed: u64,
    pub final_return: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationSummary {
    pub config: String,
    pub n: usize,
    pub mean: f64,
    /// Sample standard deviation (0 for a single seed).
    pub std: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    /// Mean and spread per configuration, in first-seen order.
    pub fn summary(&self) -> Vec<AblationSummary> {
        let mut names: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !names.contains(&r.config.as_str()) {
                names.push(&r.config);
            }
        }
        names
            .into_iter()
            .map(|name| {
                let xs: Vec<f64> = self.rows.iter().filter(|r| r.config == name).map(|r| r.final_return).collect();
                let n = xs.len();
                let mean = xs.iter().sum::<f64>() / n as f64;
                let var = if n > 1 { xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64 } else { 0.0 };
                AblationSummary { config: name.to_string(), n, mean, std: var.sqrt() }
            })
            .collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for s in self.summary() {
            w.serialize(s)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn run_grid(configs: Vec<(String, RunConfig)>, seeds: &[u64], out: Option<&Path>) -> Result<AblationTable> {
    let mut table = AblationTable::default();
    for (name, cfg) in configs {
        for &seed in seeds {
            let run = RunConfig { seed: Some(seed), ..cfg.clone() };
            let dir = out.map(|d| d.join(&name).join(format!("seed-{seed}")));
            let summary = run_training(&run, dir.as_deref())?;
            table.rows.push(AblationRow { config: name.clone(), seed, final_return: summary.final_return });
        }
    }
    Ok(table)
}

/// The base config and each single-variant change, over the same seeds.
pub fn run_ablation(base: &RunConfig, variants: &[Variant], seeds: &[u64], out: Option<&Path>) -> Result<AblationTable> {
    let mut configs = vec![("base".to_string(), base.clone())];
    for v in variants {
        let mut cfg = base.clone();
        v.apply(&mut cfg);
        configs.push((v.name().to_string(), cfg));
    }
    run_grid(configs, seeds, out)
}

/// One configuration per entry of `n_options_sweep`.
pub fn run_sweep(base: &RunConfig, seeds: &[u64], out: Option<&Path>) -> Result<AblationTable> {
    if base.n_options_sweep.is_empty() {
        return Err(Error::Config("n_options_sweep is empty".into()));
    }
    let configs = base
        .n_options_sweep
        .iter()
        .map(|k| (format!("n_options={k}"), RunConfig { n_options: Some(*k), ..base.clone() }))
        .collect();
    run_grid(configs, seeds, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_names_parse() {
        let all = Variant::parse_list("eps_greedy_selection, disable_mi_reg,n_step_advantage,truncated_advantage").unwrap();
        assert_eq!(all, Variant::ALL);
        assert!(Variant::parse_list("").unwrap().is_empty());
        assert!(Variant::parse_list("bogus").is_err());
    }

    #[test]
    fn summary_groups_by_config() {
        let rows = vec![
            AblationRow { config: "base".into(), seed: 0, final_return: 1.0 },
            AblationRow { config: "base".into(), seed: 1, final_return: 3.0 },
            AblationRow { config: "x".into(), seed: 0, final_return: 2.0 },
        ];
        let s = AblationTable { rows }.summary();
        assert_eq!(s.len(), 2);
        assert_eq!((s[0].mean, s[0].n), (2.0, 2));
        assert!((s[0].std - 2f64.sqrt()).abs() < 1e-12);
        assert_eq!((s[1].mean, s[1].std), (2.0, 0.0));
    }
}
