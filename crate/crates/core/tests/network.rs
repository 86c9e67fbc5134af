mod common;

use std::collections::BTreeSet;

use common::{key_windows_in, madqci, madqci_topology, n, stored_key_material};
use qkdnet_core::audit::check_single_use;
use qkdnet_core::controller::southbound::RelayStatus;
use qkdnet_core::controller::{AgentStatus, ProvisionPolicy, SwitchCommand, SwitchResult};
use qkdnet_core::ids::{ModuleId, PortId, SaeId, SwitchId};
use qkdnet_core::kms::Qos;
use qkdnet_core::linksim::ChannelState;
use qkdnet_core::network::{Network, ProvisionError};
use qkdnet_core::settings::ExhaustionPolicy;
use qkdnet_core::time::SimTime;
use qkdnet_core::topology::SwitchStates;

fn xc(pairs: &[(&str, &str)]) -> Vec<(PortId, PortId)> {
    pairs.iter().map(|(a, b)| (PortId::from(*a), PortId::from(*b))).collect()
}

#[test]
fn bring_up_and_cross_domain_route() {
    let mut net = madqci();
    net.run_for(30.0);
    assert!(net.linksim().up().next().is_none(), "nothing is up before sync completes");
    net.run_for(31.0);
    let up = net.up_by_vendor();
    assert_eq!(up.values().sum::<usize>(), 13);
    assert_eq!((up["AIT"], up["HWDU"], up["IDQ"], up["Toshiba"]), (1, 4, 4, 4));

    let r = net.compute_route(&n("Quintin"), &n("Distrito"), 0.0).unwrap();
    assert_eq!(r.nodes, ["Quintin", "Quijote", "Quevedo", "Norte", "Distrito"].map(n));
    assert!(r.contains_hop(&n("Quevedo"), &n("Norte")));
    assert!(r.domains.len() >= 2);
}

#[test]
fn switch_repairing_follows_the_new_cross_connects() {
    let mut net = madqci();
    net.run_for(61.0);
    let old = net
        .linksim()
        .channels()
        .find(|c| c.emitter == ModuleId::from("hwdu-tx-quijote") && c.state == ChannelState::Up)
        .unwrap()
        .channel_id
        .clone();

    let e = net.apply_switch(SwitchCommand {
        switch_id: SwitchId::from("sw-quijote"),
        cross_connects: xc(&[("tx", "l3"), ("rx", "l2")]),
        issued_at: SimTime(0),
    });
    assert_eq!(e.result, SwitchResult::Applied, "{:?}", e.reason);
    assert_eq!(e.torn_down, vec![old.clone()]);
    assert_eq!(net.linksim().get(&old).unwrap().state, ChannelState::Down);

    let cfg = e.config.clone().unwrap();
    let expect: BTreeSet<_> =
        net.topology().enumerate_feasible_channels(&SwitchStates::Given(cfg)).iter().map(|c| c.key()).collect();
    let got: BTreeSet<_> = net.controller().feasible().iter().map(|c| c.key()).collect();
    assert_eq!(got, expect);
    assert_eq!(e.feasible_channels, expect.len());

    let fresh = net
        .linksim()
        .channels()
        .find(|c| c.emitter == ModuleId::from("hwdu-tx-quijote") && c.state != ChannelState::Down)
        .unwrap()
        .channel_id
        .clone();
    assert_ne!(fresh, old);
    let ch = net.linksim().get(&fresh).unwrap();
    assert_eq!(ch.receiver, ModuleId::from("hwdu-rx-quevedo"));
    assert_eq!(ch.state, ChannelState::Syncing);
    net.run_for(59.0);
    assert_eq!(net.linksim().get(&fresh).unwrap().state, ChannelState::Syncing);
    net.run_for(2.0);
    assert_eq!(net.linksim().get(&fresh).unwrap().state, ChannelState::Up);
    assert_eq!(net.controller().channels()[&fresh].state, ChannelState::Up);
    assert_eq!(net.controller().channels()[&old].state, ChannelState::Down);

    // A port used twice is refused and still journaled, with the epoch kept.
    let epoch = net.controller().switch_config().epoch;
    let bad = net.apply_switch(SwitchCommand {
        switch_id: SwitchId::from("sw-quijote"),
        cross_connects: xc(&[("tx", "l3"), ("rx", "l3")]),
        issued_at: SimTime(0),
    });
    assert_eq!(bad.result, SwitchResult::Rejected);
    assert!(bad.reason.is_some());
    assert_eq!(net.controller().switch_config().epoch, epoch);
    assert_eq!(net.controller().journal().last().unwrap().seq, bad.seq);
    assert_eq!(net.linksim().get(&fresh).unwrap().state, ChannelState::Up);
}

#[test]
fn silent_agent_turns_suspect_and_recovers() {
    let mut net = madqci();
    net.run_for(61.0);
    let s = net.topology().settings.controller.clone();
    net.silence(&n("Quevedo"));
    net.run_for(s.heartbeat_interval_s * (s.missed_heartbeats as f64 - 1.0));
    assert_eq!(net.controller().registrations()[&n("Quevedo")].status, AgentStatus::Active);
    net.run_for(s.heartbeat_interval_s * 2.0);
    assert_eq!(net.controller().registrations()[&n("Quevedo")].status, AgentStatus::Suspect);
    assert_eq!(net.controller().registrations()[&n("Norte")].status, AgentStatus::Active);
    // Routes avoid the unreachable node.
    let r = net.compute_route(&n("Quintin"), &n("Distrito"), 0.0);
    assert!(r.map_or(true, |r| !r.nodes.contains(&n("Quevedo"))));

    net.resume(&n("Quevedo"));
    net.run_for(s.heartbeat_interval_s + 1.0);
    assert_eq!(net.controller().registrations()[&n("Quevedo")].status, AgentStatus::Active);
    assert!(net.compute_route(&n("Quintin"), &n("Distrito"), 0.0).is_ok());
}

#[test]
fn controller_state_never_holds_key_bytes() {
    let mut net = madqci();
    net.run_for(300.0);
    let mut keys = Vec::new();
    for _ in 0..10 {
        let r = net.provision(&n("Quijote"), &n("Norte"), 32, ProvisionPolicy::Plain).unwrap();
        assert_eq!(r.status, RelayStatus::Delivered);
    }
    let kms = net.kms().clone();
    let got = kms.etsi14_get_enc_keys(&SaeId::from("Quijote"), &SaeId::from("Norte"), 5, 32, net.now()).unwrap();
    keys.extend(got.into_iter().map(|k| k.bits));
    keys.extend(stored_key_material(&net));
    assert!(keys.iter().map(|k| k.len()).sum::<usize>() > 100_000);

    let state = net.controller().state_json();
    assert!(key_windows_in(&state, &keys).is_empty());
    // The scan itself does find planted material.
    let mut planted = state.clone();
    planted.extend_from_slice(&keys[0][..16]);
    assert_eq!(key_windows_in(&planted, &keys), vec![state.len()]);
}

#[test]
fn independent_sources_output_is_xor_of_components() {
    let mut net = madqci();
    net.agent_mut(&n("Quevedo")).unwrap().enable_trace();
    net.run_for(300.0);
    let r = net.provision(&n("Quevedo"), &n("Norte"), 32, ProvisionPolicy::IndependentSources).unwrap();
    assert_eq!(r.status, RelayStatus::Delivered);
    assert_eq!(r.component_jobs.len(), 2);
    let trace = &net.agent(&n("Quevedo")).unwrap().traced()[0];
    assert_eq!(trace.components.len(), 2);
    assert_ne!(trace.components[0], trace.components[1]);
    let xor: Vec<u8> = trace.components[0].iter().zip(&trace.components[1]).map(|(a, b)| a ^ b).collect();
    assert_eq!(trace.output, xor);

    let store = net.kms().pair_store(&n("Quevedo"), &n("Norte")).unwrap();
    let view = store.lock().end_view(&n("Norte"));
    let deposited = view.into_iter().find(|(k, _)| Some(*k) == r.key_id).unwrap().1;
    assert_eq!(deposited, trace.output);
    // The two components come from different vendors' channels.
    let vendors: BTreeSet<_> = net.controller().job(r.job_id.as_ref().unwrap()).unwrap().components.iter().cloned().collect();
    assert_eq!(vendors.len(), 2);
}

fn parking_network() -> Network {
    let mut t = madqci_topology();
    t.settings.forwarding.on_exhaustion = ExhaustionPolicy::Park;
    Network::new(t, std::sync::Arc::new(qkdnet_core::audit::AuditLog::new()))
}

#[test]
fn parked_jobs_resume_or_hit_the_deadline() {
    let mut net = parking_network();
    net.run_for(62.0);
    // The Quintin hop makes well under 100 bytes a second.
    let r = net.provision(&n("Quintin"), &n("Quevedo"), 256, ProvisionPolicy::Plain).unwrap();
    assert_eq!(r.status, RelayStatus::Parked);
    let job = r.job_id.unwrap();
    assert!(net.pending_retries() > 0);
    net.run_for(25.0);
    assert_eq!(net.controller().job(&job).unwrap().status, RelayStatus::Delivered);

    let deadline = net.topology().settings.forwarding.retry_deadline_s;
    let r = net.provision(&n("Quintin"), &n("Quevedo"), 4096, ProvisionPolicy::Plain).unwrap();
    assert_eq!(r.status, RelayStatus::Parked);
    let job = r.job_id.unwrap();
    net.run_for(deadline + 6.0);
    let rec = net.controller().job(&job).unwrap();
    assert_eq!(rec.status, RelayStatus::Failed);
    let f = rec.report.as_ref().unwrap().failure.as_ref().unwrap();
    assert!(!f.resumable && f.reason.contains("deadline"), "{f:?}");
    assert!(check_single_use(&net.audit().records()).is_clean());
}

#[test]
fn without_parking_a_short_hop_fails_resumable() {
    let mut net = madqci();
    net.run_for(62.0);
    match net.provision(&n("Quintin"), &n("Quevedo"), 4096, ProvisionPolicy::Plain) {
        Err(ProvisionError::Relay { resumable, .. }) => assert!(resumable),
        other => panic!("{other:?}"),
    }
}

#[test]
fn session_keys_agree_on_both_sides() {
    let mut net = madqci();
    net.run_for(120.0);
    let (a, b) = (SaeId::from("Quevedo:app"), SaeId::from("Norte:app"));
    let ksid = net.open_session(&a, &b, Qos { max_bps: 64.0, ..Qos::default() }).unwrap();
    let x = net.get_key(&ksid, &a, None).unwrap();
    let y = net.get_key(&ksid, &b, Some(x.index)).unwrap();
    assert_eq!((x.key_id, &x.bits), (y.key_id, &y.bits));
    assert_eq!(x.bits.len(), 32);
    net.close_session(&ksid).unwrap();
    assert!(net.get_key(&ksid, &a, None).is_err());
}

#[test]
fn identical_runs_are_identical() {
    let run = || {
        let mut net = madqci();
        net.run_for(200.0);
        net.provision(&n("Quintin"), &n("Distrito"), 16, ProvisionPolicy::Plain).ok();
        net.run_for(50.0);
        (net.audit().to_jsonl(), serde_json::to_string(&net.snapshot()).unwrap())
    };
    assert_eq!(run(), run());
}
