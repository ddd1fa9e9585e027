use serde::{Deserialize, Serialize};

use crate::data::AnnotatedImage;
use crate::detector::{count_flops, evaluate_model, train, ModelConfig, Toggles};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub seed: u64,
    /// `ok`, or the divergence message.
    pub status: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub map50: f64,
    pub map50_95: f64,
    pub ap50_per_class: Vec<f64>,
    pub flops: u64,
    pub final_loss: Option<f64>,
}

impl AblationRow {
    pub fn ok(&self) -> bool {
        self.status == "ok"
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: String,
    pub runs: usize,
    pub diverged: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub map50: f64,
    pub map50_95: f64,
    pub flops: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
    pub summary: Vec<VariantSummary>,
}

impl AblationReport {
    pub fn row(&self, variant: &str, seed: u64) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant && r.seed == seed)
    }

    /// Seeds on which `a` reaches at least `b`'s mAP@.5, out of the seeds
    /// where both runs finished.
    pub fn wins(&self, a: &str, b: &str) -> (usize, usize) {
        let mut wins = 0;
        let mut total = 0;
        for &s in &self.seeds {
            if let (Some(x), Some(y)) = (self.row(a, s), self.row(b, s)) {
                if x.ok() && y.ok() {
                    total += 1;
                    if x.map50 >= y.map50 {
                        wins += 1;
                    }
                }
            }
        }
        (wins, total)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Per-variant means followed by the per-seed mAP@.5 table.
    pub fn to_markdown(&self) -> String {
        let mut s = String::from("| Variant | P | R | mAP@.5 | mAP@.5:.95 | F1 | MFLOPs | Diverged |\n");
        s.push_str("|---|---|---|---|---|---|---|---|\n");
        for v in &self.summary {
            s.push_str(&format!(
                "| {} | {:.3} | {:.3} | {:.3} | {:.3} | {:.3} | {:.3} | {}/{} |\n",
                v.variant,
                v.precision,
                v.recall,
                v.map50,
                v.map50_95,
                v.f1,
                v.flops as f64 / 1e6,
                v.diverged,
                v.runs
            ));
        }
        s.push_str("\n| Variant |");
        for seed in &self.seeds {
            s.push_str(&format!(" seed {seed} |"));
        }
        s.push_str("\n|---|");
        s.push_str(&"---|".repeat(self.seeds.len()));
        s.push('\n');
        for v in &self.summary {
            s.push_str(&format!("| {} |", v.variant));
            for &seed in &self.seeds {
                match self.row(&v.variant, seed) {
                    Some(r) if r.ok() => s.push_str(&format!(" {:.3} |", r.map50)),
                    Some(r) => s.push_str(&format!(" {} |", r.status)),
                    None => s.push_str(" - |"),
                }
            }
            s.push('\n');
        }
        s
    }
}

/// Trains and evaluates one variant for one seed. Divergence becomes a row
/// with a non-`ok` status; other errors propagate.
pub fn run_variant(base: &ModelConfig, variant: &str, seed: u64, train_set: &[AnnotatedImage], val: &[AnnotatedImage]) -> Result<AblationRow> {
    let cfg = ModelConfig {
        toggles: Toggles::variant(variant)?,
        seed,
        ..base.clone()
    };
    let flops = count_flops(&cfg)?.total_flops;
    let mut row = AblationRow {
        variant: variant.to_string(),
        seed,
        status: "ok".into(),
        precision: 0.0,
        recall: 0.0,
        f1: 0.0,
        map50: 0.0,
        map50_95: 0.0,
        ap50_per_class: vec![0.0; cfg.num_classes],
        flops,
        final_loss: None,
    };
    match train(train_set, None, &cfg, None) {
        Ok(out) => {
            let r = evaluate_model(&out.model, val)?;
            row.precision = r.precision.micro;
            row.recall = r.recall.micro;
            row.f1 = r.f1.micro;
            row.map50 = r.map50;
            row.map50_95 = r.map50_95;
            row.ap50_per_class = (0..cfg.num_classes).map(|c| r.ap50(c)).collect();
            row.final_loss = out.log.last().map(|l| l.loss);
        }
        Err(e @ Error::Diverged { .. }) => row.status = format!("diverged: {e}"),
        Err(e) => return Err(e),
    }
    Ok(row)
}

/// Runs every `(variant, seed)` pair with identical data and seeds;
/// `progress` sees each row as it completes.
pub fn run_ablation(
    base: &ModelConfig,
    variants: &[String],
    seeds: &[u64],
    train_set: &[AnnotatedImage],
    val: &[AnnotatedImage],
    mut progress: impl FnMut(&AblationRow),
) -> Result<AblationReport> {
    if variants.is_empty() || seeds.is_empty() {
        return Err(Error::invalid("run_ablation", "need at least one variant and one seed"));
    }
    let mut rows = Vec::new();
    for v in variants {
        for &seed in seeds {
            let row = run_variant(base, v, seed, train_set, val)?;
            progress(&row);
            rows.push(row);
        }
    }
    let mut summary = Vec::new();
    for v in variants {
        if summary.iter().any(|s: &VariantSummary| &s.variant == v) {
            continue;
        }
        let runs: Vec<&AblationRow> = rows.iter().filter(|r| &r.variant == v).collect();
        let ok: Vec<&&AblationRow> = runs.iter().filter(|r| r.ok()).collect();
        let mean = |f: fn(&AblationRow) -> f64| {
            if ok.is_empty() {
                0.0
            } else {
                ok.iter().map(|r| f(r)).sum::<f64>() / ok.len() as f64
            }
        };
        summary.push(VariantSummary {
            variant: v.clone(),
            runs: runs.len(),
            diverged: runs.len() - ok.len(),
            precision: mean(|r| r.precision),
            recall: mean(|r| r.recall),
            f1: mean(|r| r.f1),
            map50: mean(|r| r.map50),
            map50_95: mean(|r| r.map50_95),
            flops: runs[0].flops,
        });
    }
    Ok(AblationReport {
        seeds: seeds.to_vec(),
        rows,
        summary,
    })
}
