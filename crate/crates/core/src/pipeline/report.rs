//! Plain-text forgetting report over one or more metrics logs.
//!
//! For each modality and evaluation setting, the table lists every
//! strategy's metric per stage in the `value(↓delta)` convention: the
//! parenthesized delta is the drop relative to the stage where the
//! modality was learned (↑ marks an improvement, i.e. backward transfer).

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::eval::MetricsRecord;

/// Parse a metrics JSON-lines file body.
pub fn parse_metrics(text: &str) -> Result<Vec<MetricsRecord>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            serde_json::from_str::<MetricsRecord>(line)
                .map_err(|e| Error::Format(format!("metrics line: {e}")))
        })
        .collect()
}

/// `value(↓delta)` cell: metric and delta as percents, one decimal.
/// A `None` delta (learning stage) renders the bare value.
pub fn format_cell(metric: f64, delta: Option<f64>) -> String {
    let value = metric * 100.0;
    match delta {
        None => format!("{value:.1}"),
        Some(d) => {
            let pts = d * 100.0;
            // Render through the same rounding the numbers are shown with.
            let rounded = (pts * 10.0).round() / 10.0;
            if rounded > 0.0 {
                format!("{value:.1}(\u{2193}{rounded:.1})")
            } else if rounded < 0.0 {
                format!("{value:.1}(\u{2191}{:.1})", -rounded)
            } else {
                format!("{value:.1}(0.0)")
            }
        }
    }
}

fn setting_title(setting: &str) -> &str {
    match setting {
        "zeroshot" => "Zero-Shot",
        "linprobe" => "Linear Probe",
        other => other,
    }
}

/// Render the comparison table across runs (one record list per run).
pub fn render_report(runs: &[Vec<MetricsRecord>]) -> Result<String> {
    let all: Vec<&MetricsRecord> = runs.iter().flatten().collect();
    if all.is_empty() {
        return Err(Error::Contract("no metrics records to report".into()));
    }

    // (modality, setting, strategy, stage) -> record
    let mut index: BTreeMap<(u32, String, String, usize), &MetricsRecord> = BTreeMap::new();
    let mut modalities: Vec<u32> = Vec::new();
    let mut strategies: Vec<String> = Vec::new();
    let mut max_stage = 0;
    for r in &all {
        index.insert((r.modality, r.setting.clone(), r.strategy.clone(), r.stage), r);
        if !modalities.contains(&r.modality) {
            modalities.push(r.modality);
        }
        if !strategies.contains(&r.strategy) {
            strategies.push(r.strategy.clone());
        }
        max_stage = max_stage.max(r.stage);
    }
    modalities.sort_unstable();

    let mut out = String::new();
    for &m in &modalities {
        let learning_stage = m as usize;
        out.push_str(&format!("== Modality {m} (learned at stage {learning_stage}) ==\n"));
        for setting in ["zeroshot", "linprobe"] {
            if !index.keys().any(|(mm, s, _, _)| *mm == m && s == setting) {
                continue;
            }
            out.push_str(&format!("-- {} --\n", setting_title(setting)));
            out.push_str(&format!(
                "{:<6} {:<16} {:>16} {:>16}\n",
                "stage", "strategy", "ACC(%)", "AUC(%)"
            ));
            for stage in learning_stage..=max_stage {
                for strategy in &strategies {
                    let key = (m, setting.to_string(), strategy.clone(), stage);
                    let Some(r) = index.get(&key) else { continue };
                    let learn_key = (m, setting.to_string(), strategy.clone(), learning_stage);
                    let learn = index.get(&learn_key);
                    let auc_delta = if stage == learning_stage {
                        None
                    } else {
                        learn.map(|lr| lr.auc - r.auc)
                    };
                    out.push_str(&format!(
                        "{:<6} {:<16} {:>16} {:>16}\n",
                        stage,
                        strategy,
                        format_cell(r.acc, r.forgetting),
                        format_cell(r.auc, auc_delta),
                    ));
                }
            }
        }
        out.push('\n');
    }
    Ok(out)
}
