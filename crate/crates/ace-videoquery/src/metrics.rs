//! Run metrics: F1 against the cloud-verdict ground truth, edge-cloud
//! bandwidth consumption from the traffic log, and end-to-end inference
//! latency statistics over the crop trace.

use ace_core::tracelog::{is_control_plane, TrafficLog};
use serde::Serialize;

use crate::crop::{Route, RunTrace};

#[derive(Debug, Clone, Serialize)]
pub struct MetricsReport {
    pub paradigm: String,
    pub interval_ms: u64,
    pub delay_ms: u64,
    pub seed: u64,
    pub f1: f64,
    /// Mean WAN data-plane throughput over the run, Mbps.
    pub bwc_mbps: f64,
    pub eil_mean_ms: f64,
    pub eil_p50_ms: f64,
    pub eil_p95_ms: f64,
    pub crops: u64,
    pub positives: u64,
    pub drops: u64,
    pub uploads: u64,
    pub direct_uploads: u64,
    pub wan_data_bytes: u64,
    pub unresolved: u64,
    pub rs_results: u64,
}

/// F1 with the degenerate convention: no true positives anywhere means 0.
pub fn f1_score(tp: u64, fp: u64, fn_: u64) -> f64 {
    if tp == 0 {
        return 0.0;
    }
    let p = tp as f64 / (tp + fp) as f64;
    let r = tp as f64 / (tp + fn_) as f64;
    2.0 * p * r / (p + r)
}

fn percentile(sorted: &[u64], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let idx = ((sorted.len() as f64 - 1.0) * q).round() as usize;
    sorted[idx] as f64 / 1_000.0
}

#[allow(clippy::too_many_arguments)]
pub fn compute_metrics(
    paradigm: &str,
    interval_ms: u64,
    delay_ms: u64,
    seed: u64,
    trace: &RunTrace,
    traffic: &TrafficLog,
    duration_s: u64,
    rs_results: u64,
) -> MetricsReport {
    let mut tp = 0u64;
    let mut fp = 0u64;
    let mut fn_ = 0u64;
    let mut counts = [0u64; 5]; // pending, pos, drop, upload, direct
    let mut eils: Vec<u64> = Vec::with_capacity(trace.crops.len());
    let mut unresolved = 0u64;
    for rec in trace.crops.values() {
        let predicted = rec.predicted.unwrap_or(false);
        match (predicted, rec.oracle_positive) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
        let slot = match rec.route {
            Route::Pending => 0,
            Route::EocPositive => 1,
            Route::EocDrop => 2,
            Route::Upload => 3,
            Route::Direct => 4,
        };
        counts[slot] += 1;
        match rec.t_labeled_us {
            Some(t) => eils.push(t - rec.t_od_sent_us),
            None => unresolved += 1,
        }
    }
    eils.sort_unstable();
    let eil_mean_ms = if eils.is_empty() {
        0.0
    } else {
        (eils.iter().sum::<u64>() as f64 / eils.len() as f64) / 1_000.0
    };
    let wan_data_bytes = traffic.wan_bytes_where(|r| !is_control_plane(&r.topic));
    MetricsReport {
        paradigm: paradigm.to_string(),
        interval_ms,
        delay_ms,
        seed,
        f1: f1_score(tp, fp, fn_),
        bwc_mbps: wan_data_bytes as f64 * 8.0 / duration_s as f64 / 1e6,
        eil_mean_ms,
        eil_p50_ms: percentile(&eils, 0.50),
        eil_p95_ms: percentile(&eils, 0.95),
        crops: trace.crops.len() as u64,
        positives: counts[1],
        drops: counts[2],
        uploads: counts[3],
        direct_uploads: counts[4],
        wan_data_bytes,
        unresolved,
        rs_results,
    }
}

pub const CSV_HEADER: &str = "paradigm,interval_s,delay_ms,seed,f1,bwc_mbps,eil_mean_ms,eil_p50_ms,eil_p95_ms,crops,positives,drops,uploads,direct_uploads,wan_data_bytes,unresolved,rs_results";

impl MetricsReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.1},{},{},{:.6},{:.6},{:.3},{:.3},{:.3},{},{},{},{},{},{},{},{}",
            self.paradigm,
            self.interval_ms as f64 / 1000.0,
            self.delay_ms,
            self.seed,
            self.f1,
            self.bwc_mbps,
            self.eil_mean_ms,
            self.eil_p50_ms,
            self.eil_p95_ms,
            self.crops,
            self.positives,
            self.drops,
            self.uploads,
            self.direct_uploads,
            self.wan_data_bytes,
            self.unresolved,
            self.rs_results,
        )
    }
}

pub fn to_csv(rows: &[MetricsReport]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

/// Parse a results.csv produced by `to_csv`.
pub fn parse_csv(text: &str) -> Result<Vec<MetricsReport>, String> {
    let mut lines = text.lines();
    let header = lines.next().ok_or("empty csv")?;
    if header != CSV_HEADER {
        return Err(format!("unexpected header {header:?}"));
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 17 {
            return Err(format!("line {}: {} fields", i + 2, f.len()));
        }
        let num = |s: &str| -> Result<f64, String> {
            s.parse().map_err(|e| format!("line {}: {e}", i + 2))
        };
        let int = |s: &str| -> Result<u64, String> {
            s.parse().map_err(|e| format!("line {}: {e}", i + 2))
        };
        out.push(MetricsReport {
            paradigm: f[0].to_string(),
            interval_ms: (num(f[1])? * 1000.0).round() as u64,
            delay_ms: int(f[2])?,
            seed: int(f[3])?,
            f1: num(f[4])?,
            bwc_mbps: num(f[5])?,
            eil_mean_ms: num(f[6])?,
            eil_p50_ms: num(f[7])?,
            eil_p95_ms: num(f[8])?,
            crops: int(f[9])?,
            positives: int(f[10])?,
            drops: int(f[11])?,
            uploads: int(f[12])?,
            direct_uploads: int(f[13])?,
            wan_data_bytes: int(f[14])?,
            unresolved: int(f[15])?,
            rs_results: int(f[16])?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crop::{CropRecord, Route};

    fn rec(id: &str, oracle: bool, predicted: Option<bool>, route: Route) -> CropRecord {
        CropRecord {
            crop_id: id.into(),
            source: "n".into(),
            latent: oracle,
            oracle_positive: oracle,
            size: 100,
            t_extracted_us: 0,
            t_od_sent_us: 0,
            t_labeled_us: predicted.map(|_| 10_000),
            predicted,
            route,
            path: Vec::new(),
        }
    }

    #[test]
    fn hand_built_trace_gives_two_thirds_f1() {
        // TP=2, FP=1, FN=1 -> P = R = 2/3 -> F1 = 2/3.
        let mut trace = RunTrace::default();
        trace.on_extracted(rec("a", true, Some(true), Route::EocPositive));
        trace.on_extracted(rec("b", true, Some(true), Route::Upload));
        trace.on_extracted(rec("c", false, Some(true), Route::EocPositive));
        trace.on_extracted(rec("d", true, Some(false), Route::EocDrop));
        trace.on_extracted(rec("e", false, Some(false), Route::EocDrop));
        trace.on_extracted(rec("f", false, Some(false), Route::Upload));
        let m = compute_metrics("X", 500, 0, 1, &trace, &TrafficLog::default(), 300, 0);
        assert!((m.f1 - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(m.crops, 6);
        assert_eq!(m.positives + m.drops + m.uploads + m.direct_uploads, 6);
    }

    #[test]
    fn degenerate_f1_conventions() {
        assert_eq!(f1_score(0, 0, 0), 0.0);
        assert_eq!(f1_score(0, 5, 5), 0.0);
        assert_eq!(f1_score(10, 0, 0), 1.0);
    }

    #[test]
    fn all_correct_is_perfect() {
        let mut trace = RunTrace::default();
        for i in 0..20 {
            let oracle = i % 3 == 0;
            trace.on_extracted(rec(&format!("c{i}"), oracle, Some(oracle), Route::Direct));
        }
        let m = compute_metrics("X", 100, 50, 1, &trace, &TrafficLog::default(), 300, 0);
        assert_eq!(m.f1, 1.0);
    }
}
