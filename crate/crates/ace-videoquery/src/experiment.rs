//! Experiment harness: build the reference testbed, deploy one paradigm's
//! topology through the real orchestrator/controller path, run the query
//! task for its full duration on the simulated network, and reduce the crop
//! trace to a metrics report. The matrix runner sweeps paradigms, sampling
//! intervals, delays and seeds, and checks the qualitative trends.

use std::cell::RefCell;
use std::collections::BTreeSet;
use std::rc::Rc;

use ace_core::controller::DeployStatus;
use ace_core::inapp::{OverridePoint, PolicyHook, Trigger};
use ace_core::infrastructure::{ClusterDecl, ClusterKind};
use ace_core::messaging::BridgeDirection;
use ace_core::orchestrator::orchestrate;
use ace_core::scenario::NetConfig;
use ace_core::simnet::rng::derive_seed;
use ace_core::simnet::{secs, SimTime};
use ace_core::{HierarchicalId, Platform};

use crate::components::{VqConfig, APP};
use crate::crop::{new_trace, TraceHandle};
use crate::metrics::{compute_metrics, MetricsReport};
use crate::model::P_POS;
use crate::paradigm::{build_topology, data_bridges, register_images, Paradigm};

/// One cell of the experiment matrix.
#[derive(Debug, Clone, Copy)]
pub struct RunParams {
    pub paradigm: Paradigm,
    pub interval_ms: u64,
    pub delay_ms: u64,
    pub seed: u64,
    pub duration_s: u64,
}

impl RunParams {
    pub fn new(paradigm: Paradigm, interval_ms: u64, delay_ms: u64, seed: u64) -> Self {
        RunParams {
            paradigm,
            interval_ms,
            delay_ms,
            seed,
            duration_s: 300,
        }
    }
}

pub fn default_config(paradigm: Paradigm, interval_us: u64, seed: u64) -> VqConfig {
    VqConfig {
        paradigm,
        interval_us,
        duration_us: secs(300),
        start_barrier_us: secs(5),
        // Mean crops per sampling event per camera. Spans the single cloud
        // classifier from clear underload at 0.5 s to heavy overload at
        // 0.1 s while the per-EC edge classifiers stay stable.
        lambda_crops: 0.4,
        p_pos: P_POS,
        size_median: 40_000.0,
        size_sigma: 0.5,
        size_cap: 200_000,
        eil_target_us: 300_000,
        epoch_us: secs(1),
        ewma_alpha: 0.2,
        coc_seed: derive_seed(seed, "vq/coc-oracle"),
    }
}

/// Register the reference infrastructure: one CC workstation and three
/// ECs of one gateway plus three camera nodes each.
pub fn reference_testbed(p: &mut Platform) -> HierarchicalId {
    let decls = vec![
        ClusterDecl {
            kind: ClusterKind::Cc,
            name: "cloud",
        },
        ClusterDecl {
            kind: ClusterKind::Ec,
            name: "site-a",
        },
        ClusterDecl {
            kind: ClusterKind::Ec,
            name: "site-b",
        },
        ClusterDecl {
            kind: ClusterKind::Ec,
            name: "site-c",
        },
    ];
    let infra = p
        .registry
        .register_infrastructure("u1", &decls)
        .expect("testbed registers")
        .id
        .clone();
    p.registry
        .register_node(
            &infra.cluster("cc"),
            16_000,
            65_536,
            ["gpu=true".to_string()].into(),
        )
        .unwrap();
    for ec in ["ec-1", "ec-2", "ec-3"] {
        let cid = infra.cluster(ec);
        p.registry
            .register_node(&cid, 8_000, 16_384, ["gateway=true".to_string()].into())
            .unwrap();
        for _ in 0..3 {
            p.registry
                .register_node(&cid, 4_000, 4_096, ["camera=true".to_string()].into())
                .unwrap();
        }
    }
    infra
}

/// Everything a finished run yields: the report, plus the raw artifacts the
/// acceptance suite and the CLI audit paths need.
pub struct RunOutput {
    pub report: MetricsReport,
    pub traffic_digest: u64,
    pub trace: TraceHandle,
    pub traffic_jsonl: String,
    pub plan_json: String,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Keep the serialized traffic log (large); digests are always computed.
    pub keep_traffic_jsonl: bool,
}

pub fn run_experiment(params: RunParams) -> RunOutput {
    run_experiment_with(params, RunOptions::default())
}

pub fn run_experiment_with(params: RunParams, opts: RunOptions) -> RunOutput {
    let mut cfg = default_config(params.paradigm, params.interval_ms * 1_000, params.seed);
    cfg.duration_us = secs(params.duration_s);
    let cfg = Rc::new(cfg);

    let mut p = Platform::new(params.seed);
    let infra = reference_testbed(&mut p);
    let net = NetConfig {
        wan_delay_ms: params.delay_ms,
        ..NetConfig::default()
    };
    p.adopt_infra(&infra, &net);

    let trace = new_trace();
    let rs_counter = Rc::new(RefCell::new(0u64));
    register_images(&mut p, cfg.clone(), trace.clone(), rs_counter.clone());

    let topology = build_topology(params.paradigm, &cfg);
    let infra_rec = p.registry.infra(&infra).expect("infra").clone();
    let plan = orchestrate(&topology, &infra_rec, &Default::default()).expect("testbed fits");
    let plan_json = plan.to_canonical_json();
    p.deploy(&plan).expect("deploy accepted");

    // Workload-plane bridges, live before the first crop flows.
    let (up, down) = data_bridges(params.paradigm);
    for ec in infra_rec.ecs() {
        if !up.is_empty() {
            p.configure_bridge(&ec.id, &up, BridgeDirection::Up)
                .expect("bridge");
        }
        if !down.is_empty() {
            p.configure_bridge(&ec.id, &down, BridgeDirection::Down)
                .expect("bridge");
        }
    }

    // Let agents start everything, then activate the advanced policy for the
    // plus variant; crops only start at the barrier.
    p.run_until(SimTime::from_secs(3));
    assert_eq!(
        p.control.records[APP].status,
        DeployStatus::Running,
        "deployment must settle before the run"
    );
    if params.paradigm == Paradigm::AcePlus {
        p.inapp_register_policy(
            APP,
            PolicyHook {
                name: "ap".into(),
                trigger: Trigger::OnSample,
                point: OverridePoint::Route,
            },
        )
        .expect("policy registered");
    }

    // Run generation plus drain. The horizon advances in slices until every
    // crop is resolved; periodic platform timers never go quiet on their own.
    let gen_end = cfg.start_barrier_us + cfg.duration_us + cfg.interval_us;
    let hard_cap = gen_end + secs(420);
    let mut horizon = gen_end;
    loop {
        p.run_until(SimTime(horizon));
        let resolved = trace.borrow().unresolved() == 0;
        if (resolved && horizon >= gen_end) || horizon >= hard_cap {
            break;
        }
        horizon += secs(5);
    }

    let report = compute_metrics(
        params.paradigm.tag(),
        params.interval_ms,
        params.delay_ms,
        params.seed,
        &trace.borrow(),
        &p.traffic,
        params.duration_s,
        *rs_counter.borrow(),
    );
    RunOutput {
        report,
        traffic_digest: p.traffic.digest(),
        traffic_jsonl: if opts.keep_traffic_jsonl {
            p.traffic.to_jsonl()
        } else {
            String::new()
        },
        trace,
        plan_json,
    }
}

// ---------------------------------------------------------------------------
// Matrix
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ExperimentMatrix {
    pub paradigms: Vec<Paradigm>,
    pub intervals_ms: Vec<u64>,
    pub delays_ms: Vec<u64>,
    pub seeds: Vec<u64>,
    pub duration_s: u64,
}

impl Default for ExperimentMatrix {
    fn default() -> Self {
        ExperimentMatrix {
            paradigms: Paradigm::ALL.to_vec(),
            intervals_ms: vec![500, 400, 300, 200, 100],
            delays_ms: vec![0, 50],
            seeds: vec![1, 2, 3],
            duration_s: 300,
        }
    }
}

impl ExperimentMatrix {
    pub fn cells(&self) -> Vec<RunParams> {
        let mut out = Vec::new();
        for &paradigm in &self.paradigms {
            for &interval_ms in &self.intervals_ms {
                for &delay_ms in &self.delays_ms {
                    for &seed in &self.seeds {
                        out.push(RunParams {
                            paradigm,
                            interval_ms,
                            delay_ms,
                            seed,
                            duration_s: self.duration_s,
                        });
                    }
                }
            }
        }
        out
    }
}

pub struct MatrixOutput {
    pub rows: Vec<MetricsReport>,
    pub digests: Vec<u64>,
}

impl MatrixOutput {
    pub fn csv(&self) -> String {
        crate::metrics::to_csv(&self.rows)
    }
}

pub fn run_matrix(matrix: &ExperimentMatrix) -> MatrixOutput {
    let mut rows = Vec::new();
    let mut digests = Vec::new();
    for cell in matrix.cells() {
        let out = run_experiment(cell);
        rows.push(out.report);
        digests.push(out.traffic_digest);
    }
    MatrixOutput { rows, digests }
}

// ---------------------------------------------------------------------------
// Trend checks over a finished matrix
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct TrendCheck {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

pub struct TrendReport {
    pub checks: Vec<TrendCheck>,
}

impl TrendReport {
    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            out.push_str(&format!(
                "[{}] {} — {}\n",
                if c.pass { "PASS" } else { "FAIL" },
                c.name,
                c.detail
            ));
        }
        out
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

pub struct MatrixView<'a> {
    rows: &'a [MetricsReport],
}

impl<'a> MatrixView<'a> {
    pub fn new(rows: &'a [MetricsReport]) -> Self {
        MatrixView { rows }
    }

    /// Mean of `f` over seeds at a fixed (paradigm, interval, delay).
    pub fn cell_mean(
        &self,
        paradigm: &str,
        interval_ms: u64,
        delay_ms: u64,
        f: impl Fn(&MetricsReport) -> f64,
    ) -> f64 {
        mean(
            self.rows
                .iter()
                .filter(|r| {
                    r.paradigm == paradigm && r.interval_ms == interval_ms && r.delay_ms == delay_ms
                })
                .map(f),
        )
    }

    /// Mean of `f` over seeds and delays at a fixed (paradigm, interval).
    pub fn interval_mean(
        &self,
        paradigm: &str,
        interval_ms: u64,
        f: impl Fn(&MetricsReport) -> f64,
    ) -> f64 {
        mean(
            self.rows
                .iter()
                .filter(|r| r.paradigm == paradigm && r.interval_ms == interval_ms)
                .map(f),
        )
    }

    pub fn seeds(&self) -> Vec<u64> {
        let mut s: Vec<u64> = self.rows.iter().map(|r| r.seed).collect();
        s.sort_unstable();
        s.dedup();
        s
    }

    pub fn intervals(&self) -> Vec<u64> {
        let mut s: Vec<u64> = self.rows.iter().map(|r| r.interval_ms).collect();
        s.sort_unstable();
        s.dedup();
        s
    }

    pub fn delays(&self) -> Vec<u64> {
        let mut s: Vec<u64> = self.rows.iter().map(|r| r.delay_ms).collect();
        s.sort_unstable();
        s.dedup();
        s
    }
}

/// The qualitative claims the experiment must reproduce, checked at fixed
/// tolerances. Accuracy and latency orderings hold per load and delay;
/// bandwidth orderings aggregate over delays (the advanced policy trades
/// bytes differently at ideal and practical delay).
pub fn check_trends(rows: &[MetricsReport]) -> TrendReport {
    let v = MatrixView::new(rows);
    let mut checks = Vec::new();

    // F1 ordering at every (load, delay), means over seeds.
    let mut f1_ok = true;
    let mut f1_detail = String::new();
    for &i in &v.intervals() {
        for &d in &v.delays() {
            let ci = v.cell_mean("CI", i, d, |r| r.f1);
            let ei = v.cell_mean("EI", i, d, |r| r.f1);
            let ace = v.cell_mean("ACE", i, d, |r| r.f1);
            let acep = v.cell_mean("ACE+", i, d, |r| r.f1);
            let ok = ci >= acep && acep >= ace - 0.02 && ace >= ei + 0.05;
            if !ok {
                f1_ok = false;
            }
            f1_detail = format!(
                "last cell i={i}ms d={d}ms: CI {ci:.3} >= ACE+ {acep:.3} >= ACE {ace:.3} - 0.02, ACE >= EI {ei:.3} + 0.05"
            );
        }
    }
    checks.push(TrendCheck {
        name: "f1-ordering".into(),
        pass: f1_ok,
        detail: f1_detail,
    });

    // Bandwidth ordering at high load, aggregated over delays and seeds.
    let mut bwc_ok = true;
    let mut bwc_detail = String::new();
    for &i in &v.intervals() {
        if i > 200 {
            continue;
        }
        let ci = v.interval_mean("CI", i, |r| r.bwc_mbps);
        let ace = v.interval_mean("ACE", i, |r| r.bwc_mbps);
        let acep = v.interval_mean("ACE+", i, |r| r.bwc_mbps);
        let ok = ci >= 1.5 * ace && acep >= ace;
        if !ok {
            bwc_ok = false;
        }
        bwc_detail.push_str(&format!(
            "i={i}ms: CI {ci:.3} vs 1.5*ACE {:.3}, ACE+ {acep:.3} >= ACE {ace:.3}; ",
            1.5 * ace
        ));
    }
    let ei_wan: u64 = rows
        .iter()
        .filter(|r| r.paradigm == "EI")
        .map(|r| r.wan_data_bytes)
        .sum();
    if ei_wan != 0 {
        bwc_ok = false;
        bwc_detail.push_str(&format!("EI data-plane WAN bytes = {ei_wan} (want 0)"));
    } else {
        bwc_detail.push_str("EI data-plane WAN bytes = 0");
    }
    checks.push(TrendCheck {
        name: "bwc-ordering".into(),
        pass: bwc_ok,
        detail: bwc_detail,
    });

    // Cloud-only backlog: EIL blows up with load; others stay flat.
    let ci_01 = v.cell_mean("CI", 100, 50, |r| r.eil_mean_ms);
    let ci_05 = v.cell_mean("CI", 500, 50, |r| r.eil_mean_ms);
    let mut backlog_ok = ci_01 >= 3.0 * ci_05;
    let mut detail = format!("CI @0.1s {ci_01:.1}ms vs 3x @0.5s {:.1}ms", 3.0 * ci_05);
    for paradigm in ["EI", "ACE", "ACE+"] {
        let eils: Vec<f64> = v
            .intervals()
            .iter()
            .map(|&i| v.cell_mean(paradigm, i, 50, |r| r.eil_mean_ms))
            .collect();
        let (lo, hi) = (
            eils.iter().cloned().fold(f64::INFINITY, f64::min),
            eils.iter().cloned().fold(0.0, f64::max),
        );
        let variation = (hi - lo) / lo;
        if variation >= 0.5 {
            backlog_ok = false;
        }
        detail.push_str(&format!(
            "; {paradigm} sweep variation {:.0}%",
            variation * 100.0
        ));
    }
    checks.push(TrendCheck {
        name: "ci-backlog".into(),
        pass: backlog_ok,
        detail,
    });

    // Advanced-policy latency benefit at the highest load, per seed, means
    // over delays.
    let mut ap_ok = true;
    let mut ap_detail = String::new();
    for &seed in &v.seeds() {
        let pick = |paradigm: &str| {
            mean(
                rows.iter()
                    .filter(|r| r.paradigm == paradigm && r.interval_ms == 100 && r.seed == seed)
                    .map(|r| r.eil_mean_ms),
            )
        };
        let ace = pick("ACE");
        let acep = pick("ACE+");
        if acep >= ace || acep.is_nan() || ace.is_nan() {
            ap_ok = false;
        }
        ap_detail.push_str(&format!(
            "seed {seed}: ACE+ {acep:.1}ms vs ACE {ace:.1}ms; "
        ));
    }
    checks.push(TrendCheck {
        name: "ap-benefit".into(),
        pass: ap_ok,
        detail: ap_detail,
    });

    TrendReport { checks }
}

/// Paradigm-dominance invariant over the whole matrix (aggregate means):
/// accuracy CI >= ACE+ >= ACE - 0.02 > EI chain and bandwidth
/// CI > ACE+ >= ACE > EI.
pub fn dominance_holds(rows: &[MetricsReport]) -> Result<(), String> {
    let agg = |p: &str, f: &dyn Fn(&MetricsReport) -> f64| {
        mean(rows.iter().filter(|r| r.paradigm == p).map(f))
    };
    let f1 = |p: &str| agg(p, &|r: &MetricsReport| r.f1);
    let bwc = |p: &str| agg(p, &|r: &MetricsReport| r.bwc_mbps);
    let checks = [
        (f1("CI") >= f1("ACE+"), "f1 CI >= ACE+"),
        (f1("ACE+") >= f1("ACE") - 0.02, "f1 ACE+ >= ACE - 0.02"),
        (f1("ACE") > f1("EI"), "f1 ACE > EI"),
        (bwc("CI") > bwc("ACE+"), "bwc CI > ACE+"),
        (bwc("ACE+") >= bwc("ACE"), "bwc ACE+ >= ACE"),
        (bwc("ACE") > bwc("EI"), "bwc ACE > EI"),
    ];
    for (ok, name) in checks {
        if !ok {
            return Err(format!("dominance violated: {name}"));
        }
    }
    Ok(())
}

/// Crop conservation and timestamp sanity for one run.
pub fn check_run_invariants(out: &RunOutput) -> Result<(), String> {
    let r = &out.report;
    let routed = r.positives + r.drops + r.uploads + r.direct_uploads;
    if routed + r.unresolved != r.crops && routed != r.crops {
        return Err(format!(
            "crop conservation violated: {} routed of {} crops ({} unresolved)",
            routed, r.crops, r.unresolved
        ));
    }
    let trace = out.trace.borrow();
    for rec in trace.crops.values() {
        if rec.t_extracted_us > rec.t_od_sent_us {
            return Err(format!("{}: extracted after sent", rec.crop_id));
        }
        if let Some(t) = rec.t_labeled_us {
            if rec.t_od_sent_us > t {
                return Err(format!("{}: labeled before sent", rec.crop_id));
            }
        }
    }
    Ok(())
}

pub fn seeds_set(rows: &[MetricsReport]) -> BTreeSet<u64> {
    rows.iter().map(|r| r.seed).collect()
}
