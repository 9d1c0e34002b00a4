//! Component-level behavior checked through short real runs: crop statistics
//! against their closed forms, classifier queue timing, verdict determinism,
//! and policy-visible routing differences between the paradigms.

use ace_core::messaging::{Message, Payload};
use ace_core::platform::{Actor, Ctx};
use ace_core::scenario::NetConfig;
use ace_core::simnet::SimTime;
use ace_core::Platform;
use ace_videoquery::crop::Route;
use ace_videoquery::experiment::{default_config, reference_testbed, run_experiment, RunParams};
use ace_videoquery::model::{coc_verdict, P_POS};
use ace_videoquery::Paradigm;

fn quick(
    paradigm: Paradigm,
    interval_ms: u64,
    delay_ms: u64,
    seed: u64,
    secs: u64,
) -> ace_videoquery::experiment::RunOutput {
    let mut params = RunParams::new(paradigm, interval_ms, delay_ms, seed);
    params.duration_s = secs;
    run_experiment(params)
}

#[test]
fn crop_statistics_match_closed_forms() {
    // 9 cameras x (60 s / 0.5 s) events x lambda crops/event.
    let out = quick(Paradigm::Ei, 500, 0, 11, 60);
    let crops = out.report.crops as f64;
    let events = 9.0 * 60.0 / 0.5;
    let lambda = 0.4;
    let mean: f64 = events * lambda;
    let sigma = mean.sqrt();
    assert!(
        (crops - mean).abs() < 3.0 * sigma,
        "crops {crops} vs Poisson mean {mean} (3 sigma = {:.1})",
        3.0 * sigma
    );
    // Latent positives fraction within 3 sigma of the binomial.
    let trace = out.trace.borrow();
    let positives = trace.crops.values().filter(|c| c.latent).count() as f64;
    let p_sigma = (crops * P_POS * (1.0 - P_POS)).sqrt();
    assert!(
        (positives - crops * P_POS).abs() < 3.0 * p_sigma,
        "positives {positives} vs {:.1}",
        crops * P_POS
    );
    // Sizes respect the cap.
    assert!(trace
        .crops
        .values()
        .all(|c| c.size <= 200_000 && c.size >= 1));
}

#[test]
fn coc_runtime_verdict_equals_posthoc_oracle() {
    let out = quick(Paradigm::Ci, 500, 0, 3, 30);
    let cfg = default_config(Paradigm::Ci, 500_000, 3);
    let trace = out.trace.borrow();
    assert!(trace.len() > 100);
    for rec in trace.crops.values() {
        assert_eq!(rec.route, Route::Direct);
        let oracle = coc_verdict(cfg.coc_seed, &rec.crop_id, rec.latent);
        assert_eq!(rec.predicted, Some(oracle), "crop {}", rec.crop_id);
        assert_eq!(rec.oracle_positive, oracle);
    }
}

#[test]
fn advanced_policy_strictly_increases_direct_uploads_under_load() {
    let bp = quick(Paradigm::Ace, 100, 0, 5, 60);
    let ap = quick(Paradigm::AcePlus, 100, 0, 5, 60);
    assert_eq!(
        bp.report.direct_uploads, 0,
        "basic policy never leaves the detector path"
    );
    assert!(
        ap.report.direct_uploads > 0,
        "advanced policy balances load toward the cloud"
    );
    assert!(
        ap.report.crops == bp.report.crops,
        "paired seeds share the crop stream"
    );
}

#[test]
fn ei_never_uploads_and_f1_matches_mix_analysis() {
    let out = quick(Paradigm::Ei, 200, 50, 7, 120);
    let r = &out.report;
    assert_eq!(r.uploads, 0);
    assert_eq!(r.direct_uploads, 0);
    assert_eq!(r.wan_data_bytes, 0);
    // Closed-form F1 of the threshold rule under the confidence mix is about
    // 0.44; sampling noise at this run length stays well inside +-0.05.
    assert!((r.f1 - 0.44).abs() < 0.05, "EI f1 {:.3}", r.f1);
}

// ---------------------------------------------------------------------------
// Edge classifier queue timing through the live message path.
// ---------------------------------------------------------------------------

struct ResultRecorder {
    topic: String,
    times: std::rc::Rc<std::cell::RefCell<Vec<u64>>>,
}

impl Actor for ResultRecorder {
    fn on_start(&mut self, ctx: &mut Ctx<'_>) {
        let client = ctx.client.clone();
        ctx.platform.subscribe_from(&client, &self.topic).unwrap();
    }
    fn on_message(&mut self, ctx: &mut Ctx<'_>, _msg: &Message) {
        self.times.borrow_mut().push(ctx.now().as_micros());
    }
}

#[test]
fn eoc_is_a_single_server_fifo_at_exactly_service_time() {
    let mut p = Platform::new(42);
    let infra = reference_testbed(&mut p);
    p.adopt_infra(&infra, &NetConfig::default());
    let cfg = std::rc::Rc::new(default_config(Paradigm::Ace, 500_000, 42));
    let trace = ace_videoquery::crop::new_trace();
    let ec1 = infra.cluster("ec-1");
    let gateway = ec1.node("n1");
    let law = ace_videoquery::model::EocLaw::calibrated(cfg.p_pos, 0.1106);
    p.attach_client(
        "eoc-under-test",
        gateway.clone(),
        Box::new(ace_videoquery::components::EdgeClassifier::new(
            cfg.clone(),
            trace.clone(),
            law,
        )),
    );
    let times = std::rc::Rc::new(std::cell::RefCell::new(Vec::new()));
    p.attach_client(
        "observer",
        gateway,
        Box::new(ResultRecorder {
            topic: format!("app/vq/eocres/{ec1}"),
            times: times.clone(),
        }),
    );
    p.attach_client(
        "od-stub",
        ec1.node("n2"),
        Box::new(ace_core::platform::InertActor),
    );
    p.run_until(SimTime::from_ms(10));
    // Ten crops published back to back: the k-th completes 44 ms after the
    // (k-1)-th — single-server FIFO with deterministic service.
    for i in 0..10 {
        let crop = ace_videoquery::crop::CropMsg {
            crop_id: format!("q/c{i}"),
            source: "inf-1.ec-1.n2".into(),
            latent: false,
            size: 1_000,
            t_extracted_us: 10_000,
            t_od_sent_us: 10_000,
            t_handoff_us: 0,
            confidence: None,
        };
        p.publish_from(
            &"od-stub".into(),
            &format!("app/vq/crop/eoc/{ec1}"),
            Payload::json_with_opaque(&crop, 1_000),
        )
        .unwrap();
    }
    p.run_until(SimTime::from_secs(2));
    let times = times.borrow();
    assert_eq!(times.len(), 10);
    for pair in times.windows(2) {
        assert_eq!(pair[1] - pair[0], 44_000, "strict 44 ms service spacing");
    }
}
