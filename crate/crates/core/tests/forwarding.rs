mod common;

use std::sync::Arc;

use qkdnet_core::audit::{AuditLog, BlockSource};
use qkdnet_core::forwarding::{
    combine_keys, estimate_delivery_latency, CombinedKeySpec, ComponentSource, ForwardError, Forwarder, HopBuffer,
    JobStatus, TransportJob,
};
use qkdnet_core::ids::{ChannelId, JobId, KeyId};
use qkdnet_core::kms::Kms;
use qkdnet_core::settings::ForwardingSettings;
use qkdnet_core::time::SimTime;

use common::{chain_route, chain_topology, n, relay_campaign};

#[test]
fn relayed_keys_match_xor_replay() {
    let c = relay_campaign(600, 42);
    assert!(c.mismatches.is_empty(), "{:?}", &c.mismatches[..c.mismatches.len().min(5)]);
    assert_eq!(c.delivered, 600);
    assert!(c.single_use_clean);
}

#[test]
fn short_hop_fails_without_spending_later_hops() {
    let topo = chain_topology();
    let audit = Arc::new(AuditLog::new());
    let kms = Arc::new(Kms::new(&topo, audit.clone()));
    let fwd = Forwarder::new(ForwardingSettings::default(), kms.clone(), audit);
    let src = |v: &str| BlockSource::Channel { channel_id: ChannelId::from("c"), vendor: v.into() };
    let mut id = 0u128;
    let mut put = |a: &str, b: &str, len: usize| {
        id += 1;
        kms.ingest(&n(a), &n(b), KeyId(uuid::Uuid::from_u128(id)), vec![7; len], src("V"), SimTime(0)).unwrap();
    };
    put("N0", "N1", 64);
    put("N1", "N2", 10);
    put("N2", "N3", 64);
    let mut job = TransportJob::new(JobId::from("j"), vec![1; 32], chain_route(0, 3), SimTime(0));
    let o = fwd.relay_key(&mut job, &|_| true, false, SimTime(0));
    assert_eq!(o.status, JobStatus::Failed);
    assert_eq!(o.blocked, Some((1, 32, 10)));
    assert!(o.failure.unwrap().resumable);
    assert_eq!(kms.pair_stats(&n("N0"), &n("N1")).unwrap().buffered_bytes, 32);
    assert_eq!(kms.pair_stats(&n("N2"), &n("N3")).unwrap().buffered_bytes, 64);

    // Parked, the job resumes at the blocked hop once key arrives.
    let mut job = TransportJob::new(JobId::from("k"), vec![2; 16], chain_route(0, 3), SimTime(0));
    let o = fwd.relay_key(&mut job, &|_| true, true, SimTime(0));
    assert_eq!(o.status, JobStatus::InFlight);
    assert_eq!(job.hop_cursor, 1);
    put("N1", "N2", 64);
    let o = fwd.relay_key(&mut job, &|_| true, true, SimTime(1_000));
    assert_eq!(o.status, JobStatus::Delivered);
    assert_eq!(o.delivered.unwrap(), vec![2; 16]);
    assert_eq!(o.traces.len(), 2);

    // A route reported broken fails the job for good.
    let mut job = TransportJob::new(JobId::from("m"), vec![3; 8], chain_route(0, 1), SimTime(0));
    let o = fwd.relay_key(&mut job, &|_| false, true, SimTime(0));
    assert_eq!(o.status, JobStatus::Failed);
    assert!(!o.failure.unwrap().resumable);
}

#[test]
fn hop_latency_is_per_hop_delay() {
    let c = chain_topology();
    let audit = Arc::new(AuditLog::new());
    let kms = Arc::new(Kms::new(&c, audit.clone()));
    let fwd = Forwarder::new(ForwardingSettings::default(), kms.clone(), audit);
    for i in 0..4 {
        let src = BlockSource::Channel { channel_id: ChannelId::from("c"), vendor: "V".into() };
        kms.ingest(&n(&format!("N{i}")), &n(&format!("N{}", i + 1)), KeyId(uuid::Uuid::from_u128(i + 1)), vec![0; 64], src, SimTime(0))
            .unwrap();
    }
    let mut job = TransportJob::new(JobId::from("j"), vec![5; 16], chain_route(0, 4), SimTime(0));
    let o = fwd.relay_key(&mut job, &|_| true, false, SimTime(0));
    assert!((o.latency_s - 4.0 * 0.5e-3).abs() < 1e-12);
}

#[test]
fn combination_is_xor_of_distinct_vendors() {
    let spec = CombinedKeySpec {
        component_sources: vec![
            ComponentSource { a: n("A"), b: n("B"), vendor: "X".into() },
            ComponentSource { a: n("A"), b: n("B"), vendor: "Y".into() },
        ],
        output_size_bytes: 4,
        independent: true,
    };
    let k = combine_keys(&spec, &[vec![1, 2, 3, 4], vec![0xff, 0, 0xff, 0]]).unwrap();
    assert_eq!(k, vec![0xfe, 2, 0xfc, 4]);
    assert!(matches!(combine_keys(&spec, &[vec![1, 2, 3, 4]]), Err(ForwardError::NotEnoughSources { .. })));
}

#[test]
fn latency_estimate_is_an_upper_bound_sum() {
    let s = ForwardingSettings::default();
    let hops = [HopBuffer { buffered_bytes: 100, rate_kbps: 8.0 }, HopBuffer { buffered_bytes: 0, rate_kbps: 8.0 }];
    // 32 bytes short on the second hop at 1000 bytes/s.
    let t = estimate_delivery_latency(32, &hops, &s);
    assert!((t - (2.0 * 0.5e-3 + 0.032)).abs() < 1e-12);
}
