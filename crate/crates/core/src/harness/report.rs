use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::eval::EvalReport;
use super::pipeline::AblationTable;

pub fn report_csv(report: &EvalReport) -> String {
    let mut out = String::from("domain,correct,total,accuracy\n");
    for d in &report.domains {
        out.push_str(&format!("{},{},{},{:.4}\n", d.domain, d.correct, d.total, d.accuracy));
    }
    out.push_str(&format!("mean,,{},{:.4}\n", report.num_samples, report.mean_accuracy));
    out
}

pub fn report_markdown(report: &EvalReport) -> String {
    let mut head = String::from("|");
    let mut rule = String::from("|");
    let mut row = String::from("|");
    for d in &report.domains {
        head.push_str(&format!(" {} |", d.domain));
        rule.push_str("---:|");
        row.push_str(&format!(" {:.2} |", d.accuracy));
    }
    head.push_str(" Avg |");
    rule.push_str("---:|");
    row.push_str(&format!(" {:.2} |", report.mean_accuracy));
    format!("{head}\n{rule}\n{row}\n")
}

fn domain_names(table: &AblationTable) -> Vec<String> {
    table
        .rows
        .iter()
        .find_map(|r| r.summary.as_ref())
        .map(|s| s.domains.iter().map(|(n, _)| n.clone()).collect())
        .unwrap_or_default()
}

pub fn ablation_csv(table: &AblationTable) -> String {
    let domains = domain_names(table);
    let mut out = String::from("variant");
    for d in &domains {
        out.push_str(&format!(",{d}"));
    }
    out.push_str(",mean,std,delta,error\n");
    for r in &table.rows {
        out.push_str(&r.label);
        match &r.summary {
            Some(s) => {
                for (_, acc) in &s.domains {
                    out.push_str(&format!(",{acc:.4}"));
                }
                out.push_str(&format!(
                    ",{:.4},{:.4},{:.4},\n",
                    s.mean_accuracy,
                    s.std_accuracy,
                    r.delta.unwrap_or(f64::NAN)
                ));
            }
            None => {
                out.push_str(&",".repeat(domains.len() + 3));
                out.push_str(&format!(",\"{}\"\n", r.error.as_deref().unwrap_or("").replace('"', "'")));
            }
        }
    }
    out
}

/// Table with per-domain accuracy and the gap to the full method in
/// parentheses.
pub fn ablation_markdown(table: &AblationTable) -> String {
    let domains = domain_names(table);
    let mut out = String::from("| Variant |");
    for d in &domains {
        out.push_str(&format!(" {d} |"));
    }
    out.push_str(" Avg |\n|---|");
    out.push_str(&"---:|".repeat(domains.len() + 1));
    out.push('\n');
    let full = table.rows.first().and_then(|r| r.summary.as_ref());
    for r in &table.rows {
        out.push_str(&format!("| {} |", r.label));
        match (&r.summary, full) {
            (Some(s), Some(f)) => {
                for ((_, acc), (_, base)) in s.domains.iter().zip(&f.domains) {
                    if r.label == "full" {
                        out.push_str(&format!(" {acc:.2} |"));
                    } else {
                        out.push_str(&format!(" {acc:.2} ({:+.2}) |", acc - base));
                    }
                }
                if r.label == "full" {
                    out.push_str(&format!(" {:.2} ± {:.2} |\n", s.mean_accuracy, s.std_accuracy));
                } else {
                    out.push_str(&format!(
                        " {:.2} ({:+.2}) |\n",
                        s.mean_accuracy,
                        r.delta.unwrap_or(f64::NAN)
                    ));
                }
            }
            _ => {
                out.push_str(&" - |".repeat(domains.len()));
                out.push_str(&format!(" failed: {} |\n", r.error.as_deref().unwrap_or("?")));
            }
        }
    }
    out
}

/// Enough to rerun a command exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub args: Vec<String>,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub config: Value,
}

impl Manifest {
    pub fn new(command: &str, args: Vec<String>, config: Value, config_hash: String, seeds: Vec<u64>) -> Self {
        Manifest {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            args,
            config_hash,
            seeds,
            config,
        }
    }
}
