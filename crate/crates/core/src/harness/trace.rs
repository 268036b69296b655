//! Per-round risk traces and their CSV form.
//!
//! One row per `(round, node)`:
//! `round,node,local_risk,global_risk,consensus_gap,J_v,delta_norm_sq,verified_count,rejected`.
//! Global columns repeat on every node row. Combined multi-run files prepend
//! a `run` column.

use std::io::Write;

use serde::Serialize;

use crate::engine::RoundReport;
use crate::harness::metrics::global_risk_from_errors;

pub const CSV_HEADER: [&str; 9] =
    ["round", "node", "local_risk", "global_risk", "consensus_gap", "J_v", "delta_norm_sq", "verified_count", "rejected"];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunMetadata {
    pub run_id: String,
    pub label: String,
    pub seed: u64,
    pub config: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RiskTrace {
    pub reports: Vec<RoundReport>,
    /// `N~_v` per node.
    pub test_sizes: Vec<usize>,
    pub metadata: Option<RunMetadata>,
}

impl RiskTrace {
    pub fn new(reports: Vec<RoundReport>, test_sizes: Vec<usize>) -> Self {
        Self { reports, test_sizes, metadata: None }
    }

    pub fn rounds(&self) -> usize {
        self.reports.len()
    }

    pub fn global_risk(&self) -> Vec<f64> {
        self.reports.iter().map(|r| r.global_risk).collect()
    }

    pub fn node_risk(&self, v: usize) -> Vec<f64> {
        self.reports.iter().map(|r| r.local_risk[v]).collect()
    }

    pub fn final_report(&self) -> &RoundReport {
        self.reports.last().expect("trace has at least one round")
    }

    /// Mean global risk over the last `n` rounds (or all, if fewer).
    pub fn tail_mean_global(&self, n: usize) -> f64 {
        let g = self.global_risk();
        let tail = &g[g.len().saturating_sub(n)..];
        tail.iter().sum::<f64>() / tail.len() as f64
    }

    /// Mean local risk of node `v` over the last `n` rounds.
    pub fn tail_mean_node(&self, v: usize, n: usize) -> f64 {
        let s = self.node_risk(v);
        let tail = &s[s.len().saturating_sub(n)..];
        tail.iter().sum::<f64>() / tail.len() as f64
    }

    /// Global risk recomputed from the per-node error counts and test sizes.
    pub fn recomputed_global_risk(&self) -> Vec<f64> {
        self.reports
            .iter()
            .map(|r| global_risk_from_errors(&r.errors, &self.test_sizes).expect("non-empty test sets"))
            .collect()
    }

    pub fn rejection_count(&self) -> usize {
        self.reports.iter().map(|r| r.rejected.iter().filter(|&&x| x).count()).sum()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(CSV_HEADER)?;
        self.write_rows(&mut w, None)?;
        w.flush()?;
        Ok(())
    }

    fn write_rows<W: Write>(&self, w: &mut csv::Writer<W>, run: Option<&str>) -> csv::Result<()> {
        for rep in &self.reports {
            for v in 0..rep.local_risk.len() {
                let mut row: Vec<String> = Vec::with_capacity(10);
                if let Some(label) = run {
                    row.push(label.to_string());
                }
                row.extend([
                    rep.round.to_string(),
                    v.to_string(),
                    rep.local_risk[v].to_string(),
                    rep.global_risk.to_string(),
                    rep.consensus_gap.to_string(),
                    rep.j[v].to_string(),
                    rep.delta_norm_sq[v].to_string(),
                    rep.verified_count[v].to_string(),
                    u8::from(rep.rejected[v]).to_string(),
                ]);
                w.write_record(&row)?;
            }
        }
        Ok(())
    }
}

/// Writes several labelled traces into one CSV with a leading `run` column.
pub fn write_combined_csv<W: Write>(runs: &[(String, RiskTrace)], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["run"];
    header.extend(CSV_HEADER);
    w.write_record(&header)?;
    for (label, trace) in runs {
        trace.write_rows(&mut w, Some(label))?;
    }
    w.flush()?;
    Ok(())
}
