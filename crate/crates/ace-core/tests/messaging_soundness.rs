//! End-to-end broker behavior on the reference testbed: fan-out counting,
//! default-deny bridging, exactly-once cross-site delivery, per-publisher
//! ordering, partition autonomy, and WAN byte conservation.

mod common;

use ace_core::messaging::{BridgeDirection, Payload};
use ace_core::simnet::{set_status_at, Direction, LinkId, LinkStatus, SimTime};
use common::{net, testbed, Recorder};

#[test]
fn local_fanout_exactly_once_per_subscriber() {
    let t = &mut testbed(1, &net(50));
    let ec1 = t.infra.cluster("ec-1");
    let cam = ec1.node("n2");
    let a = Recorder::attach(&mut t.p, "sub-a", ec1.node("n3"), &["a/+"]);
    let b = Recorder::attach(&mut t.p, "sub-b", ec1.node("n4"), &["a/+"]);
    t.p.attach_client("pub", cam, Box::new(ace_core::platform::InertActor));

    t.p.publish_from(&"pub".into(), "a/b", Payload::bytes(vec![1; 100]))
        .unwrap();
    common::settle(&mut t.p, 100);
    assert_eq!(a.borrow().len(), 1);
    assert_eq!(b.borrow().len(), 1);
}

#[test]
fn overlapping_subscriptions_deliver_once_each() {
    let t = &mut testbed(1, &net(0));
    let ec1 = t.infra.cluster("ec-1");
    let seen = Recorder::attach(&mut t.p, "multi", ec1.node("n2"), &["a/#", "a/b"]);
    t.p.attach_client(
        "pub",
        ec1.node("n3"),
        Box::new(ace_core::platform::InertActor),
    );
    t.p.publish_from(&"pub".into(), "a/b", Payload::bytes(vec![0; 10]))
        .unwrap();
    common::settle(&mut t.p, 50);
    // one delivery per message per subscription
    assert_eq!(seen.borrow().len(), 2);
}

#[test]
fn no_retained_messages_for_late_subscribers() {
    let t = &mut testbed(1, &net(0));
    let ec1 = t.infra.cluster("ec-1");
    t.p.attach_client(
        "pub",
        ec1.node("n2"),
        Box::new(ace_core::platform::InertActor),
    );
    t.p.publish_from(&"pub".into(), "x/y", Payload::bytes(vec![0; 10]))
        .unwrap();
    common::settle(&mut t.p, 50);
    let late = Recorder::attach(&mut t.p, "late", ec1.node("n3"), &["x/#"]);
    common::settle(&mut t.p, 100);
    assert!(late.borrow().is_empty());
}

#[test]
fn default_deny_without_bridge_rule() {
    let t = &mut testbed(1, &net(0));
    let ec1 = t.infra.cluster("ec-1");
    let cc = t.infra.cluster("cc");
    let cc_seen = Recorder::attach(&mut t.p, "cc-sub", cc.node("n1"), &["app/x/#"]);
    t.p.attach_client(
        "pub",
        ec1.node("n2"),
        Box::new(ace_core::platform::InertActor),
    );
    for i in 0..5 {
        t.p.publish_from(
            &"pub".into(),
            &format!("app/x/data/{i}"),
            Payload::bytes(vec![0; 64]),
        )
        .unwrap();
    }
    common::settle(&mut t.p, 500);
    assert!(
        cc_seen.borrow().is_empty(),
        "cross-site delivery without a rule"
    );
    // and no app bytes ever crossed the WAN
    let wan_app_bytes =
        t.p.traffic
            .wan_bytes_where(|r| r.topic.starts_with("app/x/"));
    assert_eq!(wan_app_bytes, 0);
}

#[test]
fn bridged_counting_and_duplicate_rule_idempotence() {
    let t = &mut testbed(1, &net(50));
    let ec1 = t.infra.cluster("ec-1");
    let cc = t.infra.cluster("cc");
    t.p.configure_bridge(&ec1, &["app/x/#"], BridgeDirection::Both)
        .unwrap();

    let cc_a = Recorder::attach(&mut t.p, "cc-a", cc.node("n1"), &["app/x/#"]);
    let cc_b = Recorder::attach(&mut t.p, "cc-b", cc.node("n1"), &["app/x/#"]);
    let local = Recorder::attach(&mut t.p, "local", ec1.node("n3"), &["app/x/#"]);
    t.p.attach_client(
        "pub",
        ec1.node("n2"),
        Box::new(ace_core::platform::InertActor),
    );

    let publish_round = |p: &mut ace_core::Platform, n: usize, tag: &str| {
        for i in 0..n {
            p.publish_from(
                &"pub".into(),
                &format!("app/x/data/{tag}{i}"),
                Payload::bytes(vec![0; 1000]),
            )
            .unwrap();
        }
    };
    publish_round(&mut t.p, 20, "r1-");
    common::settle(&mut t.p, 2_000);
    assert_eq!(local.borrow().len(), 20);
    assert_eq!(cc_a.borrow().len(), 20, "exactly once per matched publish");
    assert_eq!(cc_b.borrow().len(), 20);

    // A duplicate identical rule must not double deliveries.
    t.p.configure_bridge(&ec1, &["app/x/#"], BridgeDirection::Both)
        .unwrap();
    publish_round(&mut t.p, 10, "r2-");
    common::settle(&mut t.p, 4_000);
    assert_eq!(cc_a.borrow().len(), 30);
    assert_eq!(cc_b.borrow().len(), 30);

    // Counting against simnet accounting: every bridged copy crossed the EC-1
    // uplink exactly once.
    let wan_records: Vec<_> =
        t.p.traffic
            .records()
            .iter()
            .filter(|r| r.link.starts_with("wan:") && r.topic.starts_with("app/x/"))
            .collect();
    assert_eq!(wan_records.len(), 30);
    let wan_bytes: u64 = wan_records.iter().map(|r| r.bytes).sum();
    let link = LinkId::wan(&ec1);
    // The uplink also carries platform control traffic; bridged app bytes must
    // be included in (and bounded by) the link's delivered byte counter.
    assert!(t.p.links.delivered_bytes(&link, Direction::Up) >= wan_bytes);
    assert!(wan_bytes >= 30 * 1000);
}

#[test]
fn downlink_bridging_is_symmetric() {
    let t = &mut testbed(1, &net(0));
    let ec2 = t.infra.cluster("ec-2");
    let cc = t.infra.cluster("cc");
    t.p.configure_bridge(&ec2, &["app/x/ctl/#"], BridgeDirection::Down)
        .unwrap();
    let edge = Recorder::attach(&mut t.p, "edge", ec2.node("n2"), &["app/x/ctl/#"]);
    t.p.attach_client(
        "cloud",
        cc.node("n1"),
        Box::new(ace_core::platform::InertActor),
    );
    t.p.publish_from(&"cloud".into(), "app/x/ctl/go", Payload::bytes(vec![0; 32]))
        .unwrap();
    // Down-only rule does not forward upward.
    t.p.attach_client(
        "edge-pub",
        ec2.node("n3"),
        Box::new(ace_core::platform::InertActor),
    );
    let cc_seen = Recorder::attach(&mut t.p, "cc-sub", cc.node("n1"), &["app/x/ctl/#"]);
    t.p.publish_from(
        &"edge-pub".into(),
        "app/x/ctl/up",
        Payload::bytes(vec![0; 32]),
    )
    .unwrap();
    common::settle(&mut t.p, 500);
    let from_cloud = edge
        .borrow()
        .iter()
        .filter(|s| s.topic == "app/x/ctl/go")
        .count();
    assert_eq!(from_cloud, 1);
    assert!(cc_seen.borrow().iter().all(|s| s.topic != "app/x/ctl/up"));
}

#[test]
fn per_publisher_fifo_order() {
    let t = &mut testbed(3, &net(50));
    let ec1 = t.infra.cluster("ec-1");
    let cc = t.infra.cluster("cc");
    t.p.configure_bridge(&ec1, &["seq/#"], BridgeDirection::Up)
        .unwrap();
    let local = Recorder::attach(&mut t.p, "l", ec1.node("n4"), &["seq/#"]);
    let remote = Recorder::attach(&mut t.p, "r", cc.node("n1"), &["seq/#"]);
    t.p.attach_client(
        "pub",
        ec1.node("n2"),
        Box::new(ace_core::platform::InertActor),
    );
    for i in 0..50u32 {
        t.p.publish_from(
            &"pub".into(),
            "seq/s",
            Payload::bytes(i.to_be_bytes().to_vec()),
        )
        .unwrap();
    }
    common::settle(&mut t.p, 5_000);
    for seen in [local, remote] {
        let seen = seen.borrow();
        assert_eq!(seen.len(), 50);
        let order: Vec<u32> = seen
            .iter()
            .map(|s| u32::from_be_bytes(s.head.clone().try_into().unwrap()))
            .collect();
        assert_eq!(order, (0..50).collect::<Vec<_>>());
    }
}

#[test]
fn partition_autonomy_and_at_most_once() {
    // EC-local delivery counts during a WAN partition equal those of an
    // unpartitioned run restricted to local traffic; dropped bridged copies
    // are not replayed after restore.
    let run = |partition: bool| -> (usize, usize) {
        let t = &mut testbed(9, &net(50));
        let ec1 = t.infra.cluster("ec-1");
        let cc = t.infra.cluster("cc");
        t.p.configure_bridge(&ec1, &["app/x/#"], BridgeDirection::Up)
            .unwrap();
        let local = Recorder::attach(&mut t.p, "l", ec1.node("n3"), &["app/x/#"]);
        let remote = Recorder::attach(&mut t.p, "r", cc.node("n1"), &["app/x/#"]);
        t.p.attach_client(
            "pub",
            ec1.node("n2"),
            Box::new(ace_core::platform::InertActor),
        );
        let link = LinkId::wan(&ec1);
        if partition {
            set_status_at(
                &mut t.p,
                &link,
                LinkStatus::Partitioned,
                SimTime::from_ms(100),
            );
            set_status_at(&mut t.p, &link, LinkStatus::Up, SimTime::from_ms(400));
        }
        // 10 messages at t=0.. (pre-partition), 10 at t=200 (inside), 10 at
        // t=500 (after restore).
        for batch in 0..3u64 {
            let at = batch * 200 + if batch == 2 { 100 } else { 0 };
            common::settle(&mut t.p, at);
            for i in 0..10 {
                t.p.publish_from(
                    &"pub".into(),
                    &format!("app/x/b{batch}/m{i}"),
                    Payload::bytes(vec![0; 200]),
                )
                .unwrap();
            }
        }
        common::settle(&mut t.p, 3_000);
        let counts = (local.borrow().len(), remote.borrow().len());
        counts
    };
    let (local_plain, remote_plain) = run(false);
    let (local_part, remote_part) = run(true);
    assert_eq!(local_plain, 30);
    assert_eq!(remote_plain, 30);
    assert_eq!(local_part, 30, "EC-local delivery unaffected by partition");
    assert_eq!(
        remote_part, 20,
        "mid-partition bridged copies dropped, not replayed"
    );
}

#[test]
fn bridged_latency_closed_form() {
    // 40 kB from an EC camera to a CC subscriber:
    //   LAN ingress 3.2 ms + 1 ms, WAN 16 ms + 50 ms, CC egress 0.32 ms + 1 ms
    let t = &mut testbed(1, &net(50));
    let ec1 = t.infra.cluster("ec-1");
    let cc = t.infra.cluster("cc");
    t.p.configure_bridge(&ec1, &["app/x/#"], BridgeDirection::Up)
        .unwrap();
    let remote = Recorder::attach(&mut t.p, "r", cc.node("n1"), &["app/x/#"]);
    t.p.attach_client(
        "pub",
        ec1.node("n2"),
        Box::new(ace_core::platform::InertActor),
    );
    common::settle(&mut t.p, 10);
    t.p.publish_from(&"pub".into(), "app/x/crop", Payload::bytes(vec![0; 40_000]))
        .unwrap();
    common::settle(&mut t.p, 1_000);
    let seen = remote.borrow();
    assert_eq!(seen.len(), 1);
    let elapsed = seen[0].at.as_micros() - 10_000;
    assert_eq!(elapsed, 3_200 + 1_000 + 16_000 + 50_000 + 320 + 1_000);
}

#[test]
fn payload_cap_routes_big_data_to_file_service() {
    let t = &mut testbed(1, &net(0));
    let ec1 = t.infra.cluster("ec-1");
    t.p.attach_client(
        "pub",
        ec1.node("n2"),
        Box::new(ace_core::platform::InertActor),
    );
    let err = t.p.publish_from(
        &"pub".into(),
        "big/blob",
        Payload::json_with_opaque(&(), 17 << 20),
    );
    assert!(matches!(
        err,
        Err(ace_core::messaging::PublishError::PayloadTooLarge { .. })
    ));
}

#[test]
fn unregistered_client_and_malformed_topic() {
    let t = &mut testbed(1, &net(0));
    let ec1 = t.infra.cluster("ec-1");
    let err =
        t.p.publish_from(&"ghost".into(), "a/b", Payload::bytes(vec![]));
    assert!(matches!(
        err,
        Err(ace_core::messaging::PublishError::UnregisteredClient(_))
    ));
    t.p.attach_client(
        "pub",
        ec1.node("n2"),
        Box::new(ace_core::platform::InertActor),
    );
    let err =
        t.p.publish_from(&"pub".into(), "a//b", Payload::bytes(vec![]));
    assert!(matches!(
        err,
        Err(ace_core::messaging::PublishError::Topic(_))
    ));
}
