use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::adapt::self_train_adapt;
use super::config::AdaptationConfig;
use crate::data::{Sample, UnlabeledImage};
use crate::error::{Error, Result};
use crate::losses::EntropyMode;
use crate::metrics::{probe_table_csv, StabilityReport};
use crate::model::SegModel;
use crate::params::ParameterSnapshot;

/// The four loss compositions of the ablation study.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AblationGroup {
    /// Pseudo-label cross entropy alone.
    A,
    /// Plus entropy minimisation.
    B,
    /// Weight consolidation without entropy increase.
    C,
    /// Weight consolidation with entropy increase.
    D,
}

impl AblationGroup {
    pub const ALL: [AblationGroup; 4] = [AblationGroup::A, AblationGroup::B, AblationGroup::C, AblationGroup::D];

    /// `base` with the group's loss switches; everything else is kept.
    pub fn configure(self, base: &AdaptationConfig) -> AdaptationConfig {
        let (use_wc, use_ei, entropy_mode) = match self {
            AblationGroup::A => (false, false, EntropyMode::None),
            AblationGroup::B => (false, false, EntropyMode::Min),
            AblationGroup::C => (true, false, EntropyMode::None),
            AblationGroup::D => (true, true, EntropyMode::None),
        };
        AdaptationConfig {
            use_wc,
            use_ei,
            entropy_mode,
            ..base.clone()
        }
    }

    pub fn parse_list(s: &str) -> Result<Vec<AblationGroup>> {
        s.split(',').filter(|t| !t.trim().is_empty()).map(|t| t.trim().parse()).collect()
    }
}

impl FromStr for AblationGroup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "A" => Ok(AblationGroup::A),
            "B" => Ok(AblationGroup::B),
            "C" => Ok(AblationGroup::C),
            "D" => Ok(AblationGroup::D),
            other => Err(Error::Config(format!("unknown ablation group {other:?} (expected A, B, C or D)"))),
        }
    }
}

impl fmt::Display for AblationGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

#[derive(Clone, Debug)]
pub struct AblationCell {
    pub name: String,
    pub config: AdaptationConfig,
    /// A failed run keeps its error message; the grid carries on.
    pub result: std::result::Result<StabilityReport, String>,
}

/// Runs every configuration independently from the same starting model.
pub fn run_ablation_grid(
    model: &SegModel<f32>,
    theta_star: &ParameterSnapshot<f32>,
    target_train: &[UnlabeledImage],
    target_val: &[Sample],
    grid: &[(String, AdaptationConfig)],
) -> Result<Vec<AblationCell>> {
    if grid.is_empty() {
        return Err(Error::Argument("ablation grid is empty".into()));
    }
    Ok(grid
        .iter()
        .map(|(name, cfg)| AblationCell {
            name: name.clone(),
            config: cfg.clone(),
            result: self_train_adapt(model, theta_star, target_train, target_val, cfg).and_then(|o| {
                o.report
                    .ok_or_else(|| Error::Argument("run has no epochs".into()))
            })
            .map_err(|e| e.to_string()),
        })
        .collect())
}

fn entropy_label(cfg: &AdaptationConfig) -> &'static str {
    match (cfg.use_ei, cfg.entropy_mode) {
        (_, EntropyMode::Min) => "Min",
        (true, _) | (_, EntropyMode::Max) => "Max",
        _ => "-",
    }
}

/// One row per cell: identifying columns, probe epochs, then best, best
/// epoch, final and gap. Failed cells read `FAILED`.
pub fn ablation_csv(cells: &[AblationCell], probe_epochs: &[usize]) -> String {
    let rows: Vec<(String, Option<&StabilityReport>)> = cells
        .iter()
        .map(|c| {
            let id = format!(
                "{},{},{},{},{}",
                c.name,
                c.config.method,
                entropy_label(&c.config),
                if c.config.use_wc { "on" } else { "off" },
                if c.config.use_ei { "on" } else { "off" },
            );
            (id, c.result.as_ref().ok())
        })
        .collect();
    let table = probe_table_csv(probe_epochs, &rows);
    let body = table.strip_prefix("run").expect("table starts with the run column");
    format!("run,method,entropy,wc,ei{body}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn groups_map_to_loss_switches() {
        let base = AdaptationConfig::default();
        let d = AblationGroup::D.configure(&base);
        assert!(d.use_wc && d.use_ei && d.validate().is_ok());
        assert_eq!(AblationGroup::B.configure(&base).entropy_mode, EntropyMode::Min);
        assert_eq!(AblationGroup::parse_list("A, b,D").unwrap().len(), 3);
        assert!(AblationGroup::parse_list("A,E").is_err());
    }

    #[test]
    fn csv_has_one_row_per_cell() {
        let report = crate::metrics::stability_report(&[0.5, 0.7, 0.6], &[1, 50]).unwrap();
        let cells = vec![
            AblationCell {
                name: "A".into(),
                config: AblationGroup::A.configure(&AdaptationConfig::default()),
                result: Ok(report),
            },
            AblationCell {
                name: "D".into(),
                config: AblationGroup::D.configure(&AdaptationConfig::default()),
                result: Err("boom".into()),
            },
        ];
        let csv = ablation_csv(&cells, &[1, 50]);
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].starts_with("run,method,entropy,wc,ei,Epoch 1,Epoch 50,Best Performance"));
        assert!(lines[1].starts_with("A,fairld,-,off,off,0.5000,,0.7000,2"));
        assert!(lines[2].starts_with("D,fairld,Max,on,on,FAILED"));
    }
}
