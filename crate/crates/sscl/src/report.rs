//! Markdown summary of a finished ablation.

use std::fmt::Write;
use std::path::Path;

use sscl_core::datagen::{Label, Split};

use crate::config::Arm;
use crate::dataset::{read_manifest, MANIFEST};
use crate::error::Result;
use crate::pipeline::{read_metrics, summarize, Layout, METRICS};

/// Table of mean test metrics per arm under `root`. Fails when `metrics.csv`
/// is missing; image counts are read from the split manifest when present.
pub fn render(root: &Path) -> Result<String> {
    let rows = read_metrics(&root.join(METRICS))?;
    let summary = summarize(&rows);
    let manifest = Layout::new(root).split().join(MANIFEST);
    let (unlabeled, labeled, positives) = match read_manifest(&manifest) {
        Ok(m) => {
            let unl = m.entries.iter().filter(|e| e.split == Split::Unlabeled).count();
            let pos = m.entries.iter().filter(|e| e.label == Some(Label::Positive)).count();
            (unl.to_string(), (m.len() - unl).to_string(), pos.to_string())
        }
        Err(_) => ("?".into(), "?".into(), "?".into()),
    };

    let mut out = String::new();
    writeln!(out, "# Ablation results\n").unwrap();
    writeln!(out, "Test split, mean over seeds. Labeled tiles: {labeled} ({positives} positive).\n").unwrap();
    writeln!(out, "| Backbone | Loss function | Unlabeled images | Labeled images | F1 score (macro) | Balanced accuracy | Rank |")
        .unwrap();
    writeln!(out, "|---|---|---|---|---|---|---|").unwrap();
    for s in &summary {
        let arm = s.arm.parse::<Arm>().ok();
        let (backbone, loss, unl) = match arm {
            Some(Arm::Baseline) => ("encoder", "Cross entropy".to_string(), "N/A".to_string()),
            Some(Arm::Pretrained(_)) => ("SimSiam", s.arm.clone(), unlabeled.clone()),
            None => ("?", s.arm.clone(), "?".to_string()),
        };
        writeln!(
            out,
            "| {backbone} | {loss} | {unl} | {labeled} | {:.3} | {:.3} ± {:.3} | {} |",
            s.macro_f1, s.balanced_accuracy, s.sd_balanced_accuracy, s.rank
        )
        .unwrap();
    }
    let seeds: Vec<String> = {
        let mut v: Vec<u64> = rows.iter().map(|r| r.seed).collect();
        v.sort_unstable();
        v.dedup();
        v.iter().map(u64::to_string).collect()
    };
    writeln!(out, "\nSeeds: {}. Balanced accuracy is shown as mean ± sample standard deviation.", seeds.join(", "))
        .unwrap();
    Ok(out)
}
