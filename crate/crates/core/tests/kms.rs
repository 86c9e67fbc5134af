use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::{mpsc, Arc, Barrier};

use parking_lot::Mutex;
use proptest::prelude::*;
use qkdnet_core::audit::{check_single_use, AuditLog, AuditRecord, BlockSource};
use qkdnet_core::harness::cloud::hammer;
use qkdnet_core::ids::{ChannelId, KeyId, NodeId, SaeId};
use qkdnet_core::kms::{KeyIdFault, Kms, KmsError};
use qkdnet_core::time::SimTime;
use qkdnet_core::topology::{load_topology, PAIR_TOML};

fn kms(capacity: usize, ttl_s: f64) -> (Kms, Arc<AuditLog>) {
    let mut t = load_topology(PAIR_TOML).unwrap();
    t.settings.kms.capacity_bytes = capacity;
    t.settings.kms.ttl_s = ttl_s;
    let audit = Arc::new(AuditLog::new());
    (Kms::new(&t, audit.clone()), audit)
}

fn src() -> BlockSource {
    BlockSource::Channel { channel_id: ChannelId::from("ch-test"), vendor: "V".into() }
}

fn sae(s: &str) -> SaeId {
    SaeId::from(s)
}

fn block(seed: u64, n: usize) -> (KeyId, Vec<u8>) {
    let id = KeyId(uuid::Uuid::from_u64_pair(0xfeed, seed));
    let bits = (0..n).map(|i| (seed as usize * 131 + i * 7) as u8).collect();
    (id, bits)
}

/// Rebuilds every served key from the ingested blocks and its audited
/// segments, and checks no stored byte went out twice.
fn check_against_blocks(audit: &AuditLog, blocks: &BTreeMap<KeyId, Vec<u8>>, served: &BTreeMap<KeyId, Vec<u8>>) {
    let report = check_single_use(&audit.records());
    assert!(report.is_clean(), "{report:?}");
    for r in audit.records() {
        if let AuditRecord::Served { key_id, segments, .. } = r {
            let mut rebuilt = Vec::new();
            for s in &segments {
                let b = &blocks[&s.block];
                rebuilt.extend_from_slice(&b[s.offset as usize..(s.offset + s.len) as usize]);
            }
            assert_eq!(&rebuilt, &served[&key_id]);
        }
    }
}

#[test]
fn concurrent_clients_never_share_key_material() {
    let (k, audit) = kms(64 << 20, 3600.0);
    let k = Arc::new(k);
    let blocks: Arc<Mutex<BTreeMap<KeyId, Vec<u8>>>> = Arc::default();
    let served: Arc<Mutex<BTreeMap<KeyId, Vec<u8>>>> = Arc::default();
    let (tx, rx) = mpsc::channel::<(KeyId, Vec<u8>)>();
    let masters = 16;
    let barrier = Arc::new(Barrier::new(masters + 2));
    let mut handles = Vec::new();
    for p in 0..2u64 {
        let (k, blocks, barrier) = (k.clone(), blocks.clone(), barrier.clone());
        handles.push(std::thread::spawn(move || {
            barrier.wait();
            for i in 0..400 {
                let (id, bits) = block(p * 10_000 + i, 97 + (i as usize % 13));
                blocks.lock().insert(id, bits.clone());
                k.ingest(&"A".into(), &"B".into(), id, bits, src(), SimTime(0)).unwrap();
            }
        }));
    }
    for m in 0..masters {
        let (k, served, barrier, tx) = (k.clone(), served.clone(), barrier.clone(), tx.clone());
        handles.push(std::thread::spawn(move || {
            barrier.wait();
            for i in 0..300 {
                let number = 1 + (m + i) % 3;
                if let Ok(keys) = k.etsi14_get_enc_keys(&sae("A"), &sae("B"), number, 8 + (i % 5) * 8, SimTime(0)) {
                    for key in keys {
                        assert!(served.lock().insert(key.key_id, key.bits.clone()).is_none());
                        tx.send((key.key_id, key.bits)).unwrap();
                    }
                }
            }
        }));
    }
    drop(tx);
    let slave = {
        let k = k.clone();
        std::thread::spawn(move || {
            let mut n = 0;
            for (id, bits) in rx {
                let got = k.etsi14_get_keys_with_ids(&sae("B"), &sae("A"), &[id.to_string()], SimTime(0)).unwrap();
                assert_eq!(got[0].bits, bits);
                n += 1;
            }
            n
        })
    };
    for h in handles {
        h.join().unwrap();
    }
    let retrieved = slave.join().unwrap();
    let served = served.lock().clone();
    assert_eq!(retrieved, served.len());
    assert!(!served.is_empty());
    check_against_blocks(&audit, &blocks.lock(), &served);
    let stats = k.pair_stats(&"A".into(), &"B".into()).unwrap();
    assert!(stats.balanced(), "{stats:?}");
    assert_eq!(stats.served_bytes, served.values().map(|b| b.len() as u64).sum::<u64>());
}

#[test]
fn hundred_threads_get_unique_ids() {
    let (k, audit) = kms(64 << 20, 3600.0);
    for i in 0..200 {
        let (id, bits) = block(i, 4096);
        k.ingest(&"A".into(), &"B".into(), id, bits, src(), SimTime(0)).unwrap();
    }
    let got = hammer(Arc::new(k), sae("A"), sae("B"), 100, 30, SimTime(0));
    let all: Vec<KeyId> = got.into_iter().flatten().collect();
    let unique: BTreeSet<_> = all.iter().collect();
    assert_eq!(all.len(), 3000);
    assert_eq!(unique.len(), all.len());
    assert!(check_single_use(&audit.records()).is_clean());
}

#[test]
fn relay_nodes_and_degenerate_pairs_are_refused() {
    let mut t = load_topology(PAIR_TOML).unwrap();
    t.nodes.get_mut(&NodeId::from("B")).unwrap().kms_enabled = false;
    let k = Kms::new(&t, Arc::new(AuditLog::new()));
    assert!(matches!(k.etsi14_get_enc_keys(&sae("A"), &sae("B"), 1, 32, SimTime(0)), Err(KmsError::NotKmsNode(_))));
    let (k, _) = kms(1 << 20, 10.0);
    assert!(matches!(
        k.etsi14_get_enc_keys(&sae("A:x"), &sae("A:y"), 1, 32, SimTime(0)),
        Err(KmsError::DegenerateEndpoints(_))
    ));
    assert!(matches!(k.etsi14_get_enc_keys(&sae("Z"), &sae("A"), 1, 32, SimTime(0)), Err(KmsError::UnknownNode(_))));
}

#[derive(Clone, Debug)]
enum Op {
    Ingest(usize),
    Enc(usize, usize),
    Dec(usize),
    DecUnknown,
    Wait(u64),
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        (1usize..300).prop_map(Op::Ingest),
        (0usize..5, 4usize..48).prop_map(|(n, s)| Op::Enc(n, s)),
        (0usize..64).prop_map(Op::Dec),
        Just(Op::DecUnknown),
        (1u64..8).prop_map(Op::Wait),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    /// Sequential model: a FIFO byte queue, served keys awaiting pickup with
    /// a deadline, and tombstones.
    #[test]
    fn matches_sequential_model(ops in proptest::collection::vec(op(), 1..80)) {
        let (k, audit) = kms(1 << 24, 5.0);
        let ttl = 5_000_000u64;
        let mut fifo: VecDeque<u8> = VecDeque::new();
        let mut pending: Vec<(KeyId, Vec<u8>, u64)> = Vec::new();
        let mut gone: BTreeMap<KeyId, KeyIdFault> = BTreeMap::new();
        let mut blocks = BTreeMap::new();
        let mut served = BTreeMap::new();
        let mut now = 0u64;
        let mut seed = 0;
        for o in ops {
            match o {
                Op::Ingest(n) => {
                    seed += 1;
                    let (id, bits) = block(seed, n);
                    fifo.extend(bits.iter().copied());
                    blocks.insert(id, bits.clone());
                    k.ingest(&"A".into(), &"B".into(), id, bits, src(), SimTime(now)).unwrap();
                }
                Op::Enc(number, size) => {
                    let r = k.etsi14_get_enc_keys(&sae("A"), &sae("B"), number, size, SimTime(now));
                    if number == 0 {
                        prop_assert!(matches!(r, Err(KmsError::BadKeyCount { .. })), "{:?}", r);
                    } else if size < 8 {
                        prop_assert!(matches!(r, Err(KmsError::SizeOutOfBounds { .. })), "{:?}", r);
                    } else if number * size > fifo.len() {
                        prop_assert_eq!(r, Err(KmsError::InsufficientKey { requested: number * size, available: fifo.len() }));
                    } else {
                        let keys = r.unwrap();
                        prop_assert_eq!(keys.len(), number);
                        for key in keys {
                            let expect: Vec<u8> = fifo.drain(..size).collect();
                            prop_assert_eq!(&key.bits, &expect);
                            served.insert(key.key_id, key.bits.clone());
                            pending.push((key.key_id, key.bits, now + ttl));
                        }
                    }
                }
                Op::Dec(i) => {
                    // Expiry is applied at the call, as the store does.
                    pending.retain(|(id, _, exp)| {
                        if *exp <= now { gone.insert(*id, KeyIdFault::Expired); false } else { true }
                    });
                    let all: Vec<KeyId> = pending.iter().map(|p| p.0).chain(gone.keys().copied()).collect();
                    if all.is_empty() {
                        continue;
                    }
                    let id = all[i % all.len()];
                    let r = k.etsi14_get_keys_with_ids(&sae("B"), &sae("A"), &[id.to_string()], SimTime(now));
                    if let Some(pos) = pending.iter().position(|p| p.0 == id) {
                        let (_, bits, _) = pending.remove(pos);
                        prop_assert_eq!(&r.unwrap()[0].bits, &bits);
                        gone.insert(id, KeyIdFault::Consumed);
                    } else {
                        match r {
                            Err(KmsError::KeyIdErrors(f)) => prop_assert_eq!(f[0].reason, gone[&id]),
                            other => prop_assert!(false, "expected fault, got {:?}", other),
                        }
                    }
                }
                Op::DecUnknown => {
                    let r = k.etsi14_get_keys_with_ids(&sae("B"), &sae("A"), &["not-a-key".into()], SimTime(now));
                    prop_assert!(matches!(r, Err(KmsError::KeyIdErrors(ref f)) if f[0].reason == KeyIdFault::Unknown), "{:?}", r);
                }
                Op::Wait(s) => now += s * 1_000_000,
            }
            let stats = k.pair_stats(&"A".into(), &"B".into()).unwrap_or_default();
            prop_assert!(stats.balanced());
            prop_assert_eq!(stats.buffered_bytes as usize, fifo.len());
        }
        check_against_blocks(&audit, &blocks, &served);
    }
}
