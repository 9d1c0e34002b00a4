//! File service behavior: control/data separation, transfer timing against
//! the link closed forms, caching, integrity, gc tiers, and partition
//! failures.

mod common;

use std::cell::RefCell;
use std::rc::Rc;
use std::sync::Arc;

use ace_core::fileservice::{FileError, TicketState, Tier};
use ace_core::simnet::{ms, set_status_at, LinkId, LinkStatus, SimTime};
use ace_core::Platform;
use common::{net, testbed};

fn attach_app_client(p: &mut Platform, id: &str, node: ace_core::HierarchicalId) {
    p.attach_client(id, node, Box::new(ace_core::platform::InertActor));
}

type FetchResult = Rc<RefCell<Option<Result<Arc<Vec<u8>>, FileError>>>>;

fn fetch(
    p: &mut Platform,
    client: &str,
    key: &str,
    src: &ace_core::HierarchicalId,
) -> (Option<String>, FetchResult) {
    let out: FetchResult = Rc::new(RefCell::new(None));
    let out2 = out.clone();
    let ticket = p
        .file_fetch(
            &client.to_string(),
            key,
            src,
            Box::new(move |_, res| {
                *out2.borrow_mut() = Some(res);
            }),
        )
        .expect("fetch accepted");
    (ticket, out)
}

#[test]
fn put_stores_and_announces_across_the_bridge() {
    let t = &mut testbed(1, &net(0));
    let ec1 = t.infra.cluster("ec-1");
    let cc = t.infra.cluster("cc");
    attach_app_client(&mut t.p, "writer", ec1.node("n2"));
    common::settle(&mut t.p, 5);
    t.p.file_put(
        &"writer".into(),
        "models/delta1",
        vec![7u8; 12 << 20],
        Tier::Temporary,
    )
    .unwrap();
    common::settle(&mut t.p, 2_000);
    // Announcement observed at the CC over the control plane.
    let cc_saw = t.p.traffic.records().iter().any(|r| {
        r.topic == format!("ace/svc/file/{ec1}/models/delta1")
            && r.link.starts_with("wan:")
            && r.dst == cc.to_string()
    });
    assert!(cc_saw, "control announcement bridged to CC");
    // Control messages stay small packets.
    let oversize =
        t.p.traffic
            .records()
            .iter()
            .filter(|r| {
                r.topic.starts_with("ace/svc/file/") && !r.topic.starts_with("ace/svc/file/data/")
            })
            .any(|r| r.bytes > 1024);
    assert!(!oversize, "file control messages must stay under 1 KiB");
    // Data never traversed the message brokers: no 12 MiB message records.
    assert!(t.p.traffic.records().iter().all(|r| r.bytes < 13 << 20));

    let dup =
        t.p.file_put(&"writer".into(), "models/delta1", vec![1], Tier::Temporary);
    assert!(matches!(dup, Err(FileError::KeyExists(_))));
}

#[test]
fn big_transfer_matches_uplink_closed_form() {
    // 300 MiB at 20 Mbps: 314572800 * 8 / 20e6 s = 125.83 s, plus delay.
    let t = &mut testbed(1, &net(50));
    let ec1 = t.infra.cluster("ec-1");
    let cc = t.infra.cluster("cc");
    attach_app_client(&mut t.p, "edge-writer", ec1.node("n2"));
    attach_app_client(&mut t.p, "cloud-reader", cc.node("n1"));
    common::settle(&mut t.p, 10);
    let body = vec![42u8; 300 << 20];
    let expected_sum = {
        // independent of the store's internal hashing path
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in &body {
            h ^= *b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        h
    };
    t.p.file_put(&"edge-writer".into(), "models/big", body, Tier::Permanent)
        .unwrap();
    common::settle(&mut t.p, 500);
    let start = t.p.now();
    let (ticket, out) = fetch(&mut t.p, "cloud-reader", "models/big", &ec1);
    let ticket = ticket.expect("remote fetch has a ticket");
    t.p.run_until(SimTime::from_secs(200));
    let done_at = {
        let got = out.borrow();
        let bytes = got.as_ref().unwrap().as_ref().unwrap().clone();
        assert_eq!(bytes.len(), 300 << 20);
        t.p.files.ticket(&ticket).unwrap().clone()
    };
    assert_eq!(done_at.state, TicketState::Complete);
    assert_eq!(done_at.checksum, expected_sum);
    // Transfer duration: control round trip (~seconds of slack allowed by the
    // 1% bound) + serialization + one-way delay.
    let data_rec =
        t.p.traffic
            .records()
            .iter()
            .find(|r| r.topic == "ace/svc/file/data/models/big")
            .expect("data flow accounted");
    let duration_s = (data_rec.t_dlv - data_rec.t_pub) as f64 / 1e6;
    let expected_s = (300u64 << 20) as f64 * 8.0 / 20e6 + 0.050;
    assert!(
        (duration_s - expected_s).abs() <= expected_s * 0.01,
        "transfer took {duration_s:.3}s, expected {expected_s:.3}s ±1%"
    );
    let _ = start;
}

#[test]
fn second_fetch_served_from_cache_with_zero_wan_data_bytes() {
    let t = &mut testbed(1, &net(0));
    let ec1 = t.infra.cluster("ec-1");
    let cc = t.infra.cluster("cc");
    attach_app_client(&mut t.p, "edge-writer", ec1.node("n2"));
    attach_app_client(&mut t.p, "cloud-reader", cc.node("n1"));
    common::settle(&mut t.p, 5);
    t.p.file_put(
        &"edge-writer".into(),
        "obj/a",
        vec![9u8; 100_000],
        Tier::Permanent,
    )
    .unwrap();
    common::settle(&mut t.p, 100);
    let (_, out1) = fetch(&mut t.p, "cloud-reader", "obj/a", &ec1);
    common::settle(&mut t.p, 2_000);
    assert!(out1.borrow().as_ref().unwrap().is_ok());
    let wan_before =
        t.p.traffic
            .wan_bytes_where(|r| r.topic.starts_with("ace/svc/file/data/"));
    assert!(wan_before >= 100_000);

    let (ticket2, out2) = fetch(&mut t.p, "cloud-reader", "obj/a", &ec1);
    common::settle(&mut t.p, 2_100);
    assert!(ticket2.is_none(), "cache hit needs no ticket");
    assert!(out2.borrow().as_ref().unwrap().is_ok());
    let wan_after =
        t.p.traffic
            .wan_bytes_where(|r| r.topic.starts_with("ace/svc/file/data/"));
    assert_eq!(wan_before, wan_after, "cache hit moved zero WAN data bytes");
}

#[test]
fn fetch_failures() {
    let t = &mut testbed(1, &net(0));
    let ec1 = t.infra.cluster("ec-1");
    let ec2 = t.infra.cluster("ec-2");
    let cc = t.infra.cluster("cc");
    attach_app_client(&mut t.p, "cloud-reader", cc.node("n1"));
    attach_app_client(&mut t.p, "edge-reader", ec2.node("n2"));
    common::settle(&mut t.p, 5);

    // Unknown key nacked by the source site.
    let (_, out) = fetch(&mut t.p, "cloud-reader", "no/such", &ec1);
    common::settle(&mut t.p, 2_000);
    assert!(matches!(
        out.borrow().as_ref().unwrap(),
        Err(FileError::UnknownKey(_))
    ));

    // EC-to-EC has no route.
    let err =
        t.p.file_fetch(&"edge-reader".into(), "x/y", &ec1, Box::new(|_, _| {}));
    assert!(matches!(err, Err(FileError::UnsupportedRoute(_, _))));

    // Partitioned source with no cache fails fast.
    let at = t.p.now().as_micros() / 1000 + 100;
    set_status_at(
        &mut t.p,
        &LinkId::wan(&ec1),
        LinkStatus::Partitioned,
        SimTime::from_ms(at),
    );
    common::settle(&mut t.p, at + 50);
    let err =
        t.p.file_fetch(&"cloud-reader".into(), "x/y", &ec1, Box::new(|_, _| {}));
    assert!(matches!(err, Err(FileError::PartitionedSource)));
}

#[test]
fn partition_mid_transfer_fails_ticket() {
    let t = &mut testbed(1, &net(50));
    let ec1 = t.infra.cluster("ec-1");
    let cc = t.infra.cluster("cc");
    attach_app_client(&mut t.p, "edge-writer", ec1.node("n2"));
    attach_app_client(&mut t.p, "cloud-reader", cc.node("n1"));
    common::settle(&mut t.p, 5);
    // 50 MiB takes ~21 s; partition at 5 s.
    t.p.file_put(
        &"edge-writer".into(),
        "m/big",
        vec![1u8; 50 << 20],
        Tier::Permanent,
    )
    .unwrap();
    common::settle(&mut t.p, 500);
    let (ticket, out) = fetch(&mut t.p, "cloud-reader", "m/big", &ec1);
    let ticket = ticket.unwrap();
    set_status_at(
        &mut t.p,
        &LinkId::wan(&ec1),
        LinkStatus::Partitioned,
        SimTime::from_secs(5),
    );
    t.p.run_until(SimTime::from_secs(30));
    assert_eq!(
        t.p.files.ticket(&ticket).unwrap().state,
        TicketState::Failed
    );
    assert!(matches!(
        out.borrow().as_ref().unwrap(),
        Err(FileError::PartitionedSource)
    ));
}

#[test]
fn gc_respects_tiers_and_age() {
    let t = &mut testbed(1, &net(0));
    let ec1 = t.infra.cluster("ec-1");
    attach_app_client(&mut t.p, "w", ec1.node("n2"));
    common::settle(&mut t.p, 5);
    t.p.file_put(&"w".into(), "tmp/a", vec![0; 10], Tier::Temporary)
        .unwrap();
    t.p.file_put(&"w".into(), "tmp/b", vec![0; 10], Tier::Temporary)
        .unwrap();
    t.p.file_put(&"w".into(), "keep/model", vec![0; 10], Tier::Permanent)
        .unwrap();
    common::settle(&mut t.p, 1_000);
    t.p.file_put(&"w".into(), "tmp/fresh", vec![0; 10], Tier::Temporary)
        .unwrap();

    // Age threshold spares the fresh temporary.
    let removed = t.p.file_gc_temporary(&ec1, ms(500));
    assert_eq!(removed, 2);
    // Threshold zero removes all remaining temporaries,永 never permanents.
    let removed = t.p.file_gc_temporary(&ec1, 0);
    assert_eq!(removed, 1);
    let removed = t.p.file_gc_temporary(&ec1, 0);
    assert_eq!(removed, 0, "idempotent");
    assert!(t
        .p
        .files
        .site(&ec1)
        .unwrap()
        .objects
        .contains_key("keep/model"));
}

#[test]
fn stale_cache_invalidated_by_new_announcement() {
    let t = &mut testbed(1, &net(0));
    let ec1 = t.infra.cluster("ec-1");
    let cc = t.infra.cluster("cc");
    attach_app_client(&mut t.p, "edge-writer", ec1.node("n2"));
    attach_app_client(&mut t.p, "cloud-reader", cc.node("n1"));
    common::settle(&mut t.p, 5);
    t.p.file_put(
        &"edge-writer".into(),
        "m/v",
        vec![1u8; 1000],
        Tier::Temporary,
    )
    .unwrap();
    common::settle(&mut t.p, 100);
    let (_, out) = fetch(&mut t.p, "cloud-reader", "m/v", &ec1);
    common::settle(&mut t.p, 2_000);
    assert_eq!(out.borrow().as_ref().unwrap().as_ref().unwrap()[0], 1);

    // Authoritative copy deleted then replaced with new content.
    assert_eq!(t.p.file_gc_temporary(&ec1, 0), 1);
    t.p.file_put(
        &"edge-writer".into(),
        "m/v",
        vec![2u8; 1000],
        Tier::Temporary,
    )
    .unwrap();
    common::settle(&mut t.p, 3_000);
    // The CC's cached copy must not be served anymore.
    let (ticket, out2) = fetch(&mut t.p, "cloud-reader", "m/v", &ec1);
    assert!(
        ticket.is_some(),
        "stale cache dropped, refetches over the WAN"
    );
    common::settle(&mut t.p, 5_000);
    assert_eq!(out2.borrow().as_ref().unwrap().as_ref().unwrap()[0], 2);
}
