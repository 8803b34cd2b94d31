use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::auction::kpi::mean_std;
use crate::error::Result;

/// KPIs of one controlled agent in one evaluation episode.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct KpiRow {
    pub policy: String,
    pub seed: u64,
    pub agent: usize,
    pub ret: f64,
    pub cost: f64,
    pub cpa: f64,
    pub roi: f64,
    pub win_rate: f64,
    pub budget_adherence: f64,
    pub social_welfare: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ForecastEntry {
    pub model: String,
    pub split: usize,
    pub k: usize,
    pub score: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BidAccuracyRow {
    pub agent: usize,
    pub l2: f64,
    pub baseline_l2: f64,
}

/// Evaluation results plus the identity of the run that produced them.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct MetricsReport {
    pub config_hash: String,
    pub provenance: String,
    pub seeds: usize,
    pub kpi: Vec<KpiRow>,
    pub forecast: Vec<ForecastEntry>,
    pub bid_accuracy: Vec<BidAccuracyRow>,
    /// Extra `key: value` lines for the summary.
    pub notes: Vec<(String, String)>,
}

/// `bidlab-v<version>-g<first 12 hex digits of the config hash>`.
pub fn provenance(config_hash: &str) -> String {
    format!("bidlab-v{}-g{}", env!("CARGO_PKG_VERSION"), &config_hash[..config_hash.len().min(12)])
}

fn num(v: f64) -> String {
    if v.is_finite() { format!("{v:.6}") } else { format!("{v}") }
}

/// Write `kpi.csv`, `forecast.csv`, `bid_accuracy.csv` and `summary.txt`.
pub fn export_report(report: &MetricsReport, out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    let mut kpi = String::from("policy,seed,agent,return,cost,cpa,roi,win_rate,budget_adherence,social_welfare\n");
    for r in &report.kpi {
        let _ = writeln!(
            kpi,
            "{},{},{},{},{},{},{},{},{},{}",
            r.policy,
            r.seed,
            r.agent,
            num(r.ret),
            num(r.cost),
            num(r.cpa),
            num(r.roi),
            num(r.win_rate),
            num(r.budget_adherence),
            num(r.social_welfare)
        );
    }
    fs::write(out.join("kpi.csv"), kpi)?;
    let mut fc = String::from("model,split,K,score,seed\n");
    for r in &report.forecast {
        let _ = writeln!(fc, "{},{},{},{},{}", r.model, r.split, r.k, num(r.score), r.seed);
    }
    fs::write(out.join("forecast.csv"), fc)?;
    let mut ba = String::from("agent,l2,baseline_l2\n");
    for r in &report.bid_accuracy {
        let _ = writeln!(ba, "{},{},{}", r.agent, num(r.l2), num(r.baseline_l2));
    }
    fs::write(out.join("bid_accuracy.csv"), ba)?;
    fs::write(out.join("summary.txt"), summary(report))?;
    Ok(())
}

pub fn summary(report: &MetricsReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "provenance: {}", report.provenance);
    let _ = writeln!(s, "config hash: {}", report.config_hash);
    let _ = writeln!(s, "seeds: {}", report.seeds);
    let mut policies: Vec<&str> = report.kpi.iter().map(|r| r.policy.as_str()).collect();
    policies.dedup();
    for p in policies {
        let rows: Vec<&KpiRow> = report.kpi.iter().filter(|r| r.policy == p).collect();
        let _ = writeln!(s, "\n[{p}] n={}", rows.len());
        let cols: [(&str, fn(&KpiRow) -> f64); 7] = [
            ("return", |r| r.ret),
            ("cost", |r| r.cost),
            ("cpa", |r| r.cpa),
            ("roi", |r| r.roi),
            ("win_rate", |r| r.win_rate),
            ("budget_adherence", |r| r.budget_adherence),
            ("social_welfare", |r| r.social_welfare),
        ];
        for (name, f) in cols {
            let xs: Vec<f64> = rows.iter().map(|r| f(r)).filter(|v| v.is_finite()).collect();
            let (m, sd) = mean_std(&xs);
            let _ = writeln!(s, "  {name}: {} ± {}", num(m), num(sd));
        }
    }
    let mut models: Vec<&str> = report.forecast.iter().map(|r| r.model.as_str()).collect();
    models.dedup();
    for m in models {
        let xs: Vec<f64> = report.forecast.iter().filter(|r| r.model == m).map(|r| r.score).collect();
        let (mean, sd) = mean_std(&xs);
        let _ = writeln!(s, "\nforecast [{m}] n={}: {} ± {} nats/dim", xs.len(), num(mean), num(sd));
    }
    if !report.bid_accuracy.is_empty() {
        let _ = writeln!(s, "\nbid accuracy (mean l2 per agent):");
        for r in &report.bid_accuracy {
            let _ = writeln!(s, "  agent {}: {} (mean-bid baseline {})", r.agent, num(r.l2), num(r.baseline_l2));
        }
    }
    if !report.notes.is_empty() {
        s.push('\n');
        for (k, v) in &report.notes {
            let _ = writeln!(s, "{k}: {v}");
        }
    }
    s
}
