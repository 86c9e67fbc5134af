use std::collections::BTreeSet;

use qkdnet_core::ids::ModuleId;
use qkdnet_core::linksim::{skr_at_loss, ChannelState, LinkError, LinkSim};
use qkdnet_core::time::{SimDuration, SimTime};
use qkdnet_core::topology::{load_topology_file, ChannelCandidate, SwitchStates, Topology, PAIR_TOML};

fn madqci() -> Topology {
    load_topology_file(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/madqci.toml")).unwrap()
}

fn candidate(t: &Topology, emitter: &str) -> ChannelCandidate {
    t.enumerate_feasible_channels(&SwitchStates::Given(t.initial_switch_config()))
        .into_iter()
        .find(|c| c.emitter == ModuleId::from(emitter))
        .unwrap()
}

/// Runs one channel for `secs` one-second steps and returns emitted bytes
/// and per-step rates in kbps.
fn run(sim: &mut LinkSim, t: &Topology, c: &ChannelCandidate, secs: u64) -> (u64, Vec<f64>) {
    let id = sim.establish_channel(t, c, 0, SimTime(0)).unwrap();
    let start = SimTime::from_secs_f64(sim.settings().sync_delay_s);
    assert!(sim.promote(&id, start));
    let (mut bytes, mut rates) = (0u64, Vec::new());
    for s in 1..=secs {
        let adv = sim.advance(&id, SimDuration::from_secs_f64(1.0), start + SimDuration::from_secs_f64(s as f64)).unwrap();
        bytes += adv.blocks.iter().map(|b| b.size_bytes() as u64).sum::<u64>();
        rates.push(adv.health.unwrap().current_skr_kbps);
    }
    (bytes, rates)
}

#[test]
fn table_anchors_and_budget() {
    let t = madqci();
    let tosh = &t.profiles["toshiba"];
    let l9 = t.path_loss(&[qkdnet_core::ids::LinkId(9)], qkdnet_core::topology::Band::O).unwrap();
    assert_eq!(skr_at_loss(tosh, 20.0, l9), 2857.1);
    assert_eq!(skr_at_loss(&t.profiles["hwdu-c37"], 23.0, 30.0), 0.0);
    let anchor = t.profiles["hwdu-c37"].anchors.iter().find(|a| a.row.as_deref() == Some("6+7")).unwrap().loss_db;
    assert_eq!(skr_at_loss(&t.profiles["hwdu-c37"], 23.0, anchor), 0.11);
}

#[test]
fn interpolation_is_monotone_between_anchors() {
    let t = madqci();
    for (name, p) in &t.profiles {
        let lo = p.anchors[0].loss_db;
        let hi = p.anchors.last().unwrap().loss_db + 2.0;
        let mut prev = f64::INFINITY;
        let mut x = lo;
        while x <= hi {
            let r = skr_at_loss(p, 23.0, x);
            assert!(r <= prev + 1e-12, "{name} at {x}");
            prev = r;
            x += 0.01;
        }
    }
}

#[test]
fn link5_hour_mean_near_anchor() {
    let t = madqci();
    let c = candidate(&t, "tosh-tx-l5");
    let mut sim = LinkSim::new(t.settings.simulation.clone());
    let (bytes, _) = run(&mut sim, &t, &c, 3600);
    let mean_kbps = bytes as f64 * 8.0 / 3600.0 / 1000.0;
    assert!((mean_kbps / 1039.9 - 1.0).abs() <= 0.10, "{mean_kbps}");
}

#[test]
fn long_run_mean_converges_and_jitter_matches_model() {
    let t = madqci();
    let c = candidate(&t, "tosh-tx-l8");
    let nominal = t.candidate_skr(&c);
    let mut sim = LinkSim::new(t.settings.simulation.clone());
    let (bytes, rates) = run(&mut sim, &t, &c, 10_000);
    let mean = bytes as f64 * 8.0 / 10_000.0 / 1000.0;
    assert!((mean / nominal - 1.0).abs() <= 0.05, "{mean} vs {nominal}");
    // ln(rate/nominal) is normal with sigma s and mean -s^2/2.
    let s = t.settings.simulation.jitter_sigma;
    let logs: Vec<f64> = rates.iter().map(|r| (r / nominal).ln()).collect();
    let m = logs.iter().sum::<f64>() / logs.len() as f64;
    let sd = (logs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (logs.len() - 1) as f64).sqrt();
    assert!((m + s * s / 2.0).abs() < 4.0 * s / 100.0, "{m}");
    assert!((sd / s - 1.0).abs() < 0.05, "{sd}");
}

#[test]
fn exact_bytes_without_jitter() {
    let mut t = madqci();
    t.settings.simulation.jitter_sigma = 0.0;
    let mut c = candidate(&t, "tosh-tx-l9");
    // Force an 8 kbps rate by moving the path onto a synthetic profile.
    let mut p = t.profiles["toshiba"].clone();
    for a in &mut p.anchors {
        a.skr_kbps = 8.0;
    }
    p.anchors.truncate(1);
    t.profiles.insert("toshiba".into(), p);
    c.loss_db = t.profiles["toshiba"].anchors[0].loss_db;
    let mut sim = LinkSim::new(t.settings.simulation.clone());
    let id = sim.establish_channel(&t, &c, 0, SimTime(0)).unwrap();
    let up = SimTime::from_secs_f64(60.0);
    sim.promote(&id, up);
    let adv = sim.advance(&id, SimDuration::from_secs_f64(1.0), up + SimDuration::from_secs_f64(1.0)).unwrap();
    assert_eq!(adv.blocks.iter().map(|b| b.size_bytes()).sum::<usize>(), 1000);
}

#[test]
fn state_machine_guards() {
    let t = madqci();
    let c = candidate(&t, "tosh-tx-l9");
    let mut sim = LinkSim::new(t.settings.simulation.clone());
    assert!(matches!(sim.establish_channel(&t, &c, 3, SimTime(0)), Err(LinkError::StaleCandidate { .. })));
    let id = sim.establish_channel(&t, &c, 0, SimTime(0)).unwrap();
    assert_eq!(sim.get(&id).unwrap().state, ChannelState::Syncing);
    // Nothing is emitted before sync completes.
    assert_eq!(sim.advance(&id, SimDuration::from_secs_f64(1.0), SimTime::from_secs_f64(1.0)).unwrap_err(), LinkError::NotUp);
    assert!(!sim.promote(&id, SimTime::from_secs_f64(59.0)));
    assert!(sim.promote(&id, SimTime::from_secs_f64(60.0)));
    assert!(matches!(sim.establish_channel(&t, &c, 0, SimTime(0)), Err(LinkError::ModuleBusy(_))));
    assert_eq!(sim.advance(&id, SimDuration(0), SimTime::from_secs_f64(61.0)).unwrap_err(), LinkError::BadStep);
    sim.teardown(&id, "test").unwrap();
    assert_eq!(sim.advance(&id, SimDuration::from_secs_f64(1.0), SimTime::from_secs_f64(62.0)).unwrap_err(), LinkError::NotUp);
}

#[test]
fn reestablished_channel_gets_fresh_ids() {
    let t = madqci();
    let c = candidate(&t, "tosh-tx-l9");
    let mut sim = LinkSim::new(t.settings.simulation.clone());
    let mut seen = BTreeSet::new();
    let mut channel_ids = BTreeSet::new();
    let mut now = SimTime(0);
    for _ in 0..3 {
        let id = sim.establish_channel(&t, &c, 0, now).unwrap();
        assert!(channel_ids.insert(id.clone()));
        now = now + SimDuration::from_secs_f64(60.0);
        sim.promote(&id, now);
        for _ in 0..20 {
            now = now + SimDuration::from_secs_f64(1.0);
            for b in sim.advance(&id, SimDuration::from_secs_f64(1.0), now).unwrap().blocks {
                assert!(seen.insert(b.key_id), "key id reused");
            }
        }
        sim.teardown(&id, "cycle").unwrap();
    }
    assert!(seen.len() > 100);
}

#[test]
fn same_seed_same_stream() {
    let t = madqci();
    let c = candidate(&t, "tosh-tx-l5");
    let collect = || {
        let mut sim = LinkSim::new(t.settings.simulation.clone());
        let id = sim.establish_channel(&t, &c, 0, SimTime(0)).unwrap();
        sim.promote(&id, SimTime::from_secs_f64(60.0));
        (61..200)
            .flat_map(|s| sim.advance(&id, SimDuration::from_secs_f64(1.0), SimTime::from_secs_f64(s as f64)).unwrap().blocks)
            .collect::<Vec<_>>()
    };
    assert_eq!(collect(), collect());
}

#[test]
fn qber_stays_bounded_and_abort_cuts_output() {
    let t = madqci();
    let c = candidate(&t, "tosh-tx-l5");
    let mut sim = LinkSim::new(t.settings.simulation.clone());
    let id = sim.establish_channel(&t, &c, 0, SimTime(0)).unwrap();
    sim.promote(&id, SimTime::from_secs_f64(60.0));
    for s in 61..2000 {
        let adv = sim.advance(&id, SimDuration::from_secs_f64(1.0), SimTime::from_secs_f64(s as f64)).unwrap();
        let q = adv.health.unwrap().current_qber_pct.unwrap();
        assert!((0.0..=25.0).contains(&q));
    }
    sim.set_qber(&id, 20.0).unwrap();
    let adv = sim.advance(&id, SimDuration::from_secs_f64(1.0), SimTime::from_secs_f64(2000.0)).unwrap();
    assert!(adv.blocks.is_empty());
    assert_eq!(sim.get(&id).unwrap().state, ChannelState::Down);
}

#[test]
fn minimal_pair_has_one_channel() {
    let t = qkdnet_core::topology::load_topology(PAIR_TOML).unwrap();
    assert_eq!(t.enumerate_feasible_channels(&SwitchStates::Any).len(), 1);
}
