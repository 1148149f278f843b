use std::collections::{BTreeSet, VecDeque};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::digest::{ChainId, PacketSignature};
use crate::sigcore::{compute_fingerprint, compute_signature, Direction, PacketRecord, Protocol};
use crate::time::SimTime;

fn rec(proto: Protocol, endpoint: &str, port: u16) -> PacketRecord {
    PacketRecord {
        timestamp: 0.0,
        protocol: proto,
        endpoint: endpoint.into(),
        service_port: port,
        direction: Direction::Remote,
        device_id: String::new(),
    }
}

fn ntp() -> PacketRecord {
    rec(Protocol::Udp, "time1.google.com", 123)
}

fn api() -> PacketRecord {
    rec(Protocol::Tcp, "104.198.46.246", 56700)
}

fn scan(n: u8) -> PacketRecord {
    PacketRecord { direction: Direction::Local, ..rec(Protocol::Tcp, &format!("198.51.100.{n}"), 23) }
}

fn sig(r: &PacketRecord) -> PacketSignature {
    compute_signature(r).unwrap()
}

fn lifx_chain() -> ChainId {
    compute_fingerprint(&[sig(&ntp()), sig(&api())]).unwrap()
}

fn config() -> SentinelConfig {
    SentinelConfig { adoption_margin: 3, confirmations: 0, prune_depth: 16, ..SentinelConfig::default() }
}

fn network(n: usize, cfg: SentinelConfig) -> Vec<SentinelState> {
    (0..n)
        .map(|i| {
            let peers = (0..n).filter(|&p| p != i).collect();
            SentinelState::new(i, peers, cfg.clone(), ChaCha8Rng::seed_from_u64(100 + i as u64))
        })
        .collect()
}

/// Delivers every message instantly and drops timers.
fn pump(nodes: &mut [SentinelState], from: PeerId, actions: Vec<Action>, now: SimTime) -> Vec<SentinelEvent> {
    let mut log = Vec::new();
    let mut queue: VecDeque<(PeerId, Action)> = actions.into_iter().map(|a| (from, a)).collect();
    while let Some((src, action)) = queue.pop_front() {
        let targets: Vec<(PeerId, Arc<Message>)> = match action {
            Action::Send { to, msg } => vec![(to, msg)],
            Action::Broadcast { to, msg } => to.into_iter().map(|t| (t, msg.clone())).collect(),
            Action::Log(e) => {
                log.push(e);
                continue;
            }
            _ => continue,
        };
        for (to, msg) in targets {
            let mut out = Vec::new();
            nodes[to].on_message(src, &msg, now, &mut out);
            queue.extend(out.into_iter().map(|a| (to, a)));
        }
    }
    log
}

/// Connects one lifx-like device per node and finishes profiling.
fn onboard(nodes: &mut [SentinelState]) {
    onboard_first(nodes, nodes.len());
}

fn onboard_first(nodes: &mut [SentinelState], count: usize) {
    for i in 0..count {
        let mut out = Vec::new();
        let dev = format!("lifx-{i}");
        nodes[i].on_device_connected(&dev, SimTime::ZERO, &mut out).unwrap();
        nodes[i].on_packet(&dev, &ntp(), SimTime::from_secs(1), &mut out).unwrap();
        nodes[i].on_packet(&dev, &api(), SimTime::from_secs(2), &mut out).unwrap();
        nodes[i].finish_profiling(&dev, SimTime::from_secs(60), &mut out).unwrap();
        pump(nodes, i, out, SimTime::from_secs(60));
    }
    make_all_active(nodes, SimTime::from_secs(60));
}

fn make_all_active(nodes: &mut [SentinelState], now: SimTime) {
    for i in 0..nodes.len() {
        let mut out = Vec::new();
        nodes[i].emit_share(0, &mut out);
        pump(nodes, i, out, now);
    }
}

fn win(nodes: &mut [SentinelState], who: PeerId, now: SimTime) -> Vec<SentinelEvent> {
    let mut out = Vec::new();
    nodes[who].on_block_win(now, &mut out).unwrap();
    pump(nodes, who, out, now)
}

#[test]
fn addresses_are_seeded_and_distinct() {
    let a = sentinel_address_new(&mut ChaCha8Rng::seed_from_u64(1));
    let b = sentinel_address_new(&mut ChaCha8Rng::seed_from_u64(1));
    let c = sentinel_address_new(&mut ChaCha8Rng::seed_from_u64(2));
    assert_eq!(a, b);
    assert_ne!(a, c);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let all: BTreeSet<_> = (0..1000).map(|_| sentinel_address_new(&mut rng)).collect();
    assert_eq!(all.len(), 1000);
}

#[test]
fn profiling_passes_everything_then_subscribes() {
    let mut nodes = network(1, config());
    let mut out = Vec::new();
    let s = &mut nodes[0];
    assert!(matches!(s.on_device_connected("d", SimTime::ZERO, &mut out), Ok(Phase::Profiling { .. })));
    assert_eq!(s.on_device_connected("d", SimTime::ZERO, &mut out), Err(SentinelError::DuplicateDevice("d".into())));
    let d = s.on_packet("d", &scan(1), SimTime::from_secs(5), &mut out).unwrap();
    assert_eq!(d.verdict, Verdict::ProfilePass);
    assert_eq!(s.finish_profiling("d", SimTime::from_secs(30), &mut out).unwrap(), None);
    let chain = s.finish_profiling("d", SimTime::from_secs(60), &mut out).unwrap().unwrap();
    assert_eq!(chain, compute_fingerprint(&[sig(&scan(1))]).unwrap());
    assert_eq!(s.phase("d"), Some(Phase::Enforcing));
    assert!(out.iter().any(|a| matches!(a, Action::StartMining)));
    assert!(matches!(s.on_packet("nope", &ntp(), SimTime::ZERO, &mut out), Err(SentinelError::UnknownDevice(_))));
}

#[test]
fn default_profiling_is_one_minute() {
    assert_eq!(SentinelConfig::default().profiling_duration, SimTime::from_secs(60));
}

#[test]
fn silent_device_is_held_until_first_packet() {
    let mut nodes = network(1, SentinelConfig { profiling_duration: SimTime::ZERO, ..config() });
    let s = &mut nodes[0];
    let mut out = Vec::new();
    s.on_device_connected("d", SimTime::ZERO, &mut out).unwrap();
    assert_eq!(s.finish_profiling("d", SimTime::ZERO, &mut out).unwrap(), None);
    assert!(matches!(s.phase("d"), Some(Phase::Profiling { .. })));
    let d = s.on_packet("d", &ntp(), SimTime::from_secs(9), &mut out).unwrap();
    assert_eq!(d.verdict, Verdict::ProfilePass);
    assert_eq!(s.phase("d"), Some(Phase::Enforcing));
}

#[test]
fn identical_devices_share_a_chain_and_attacked_ones_do_not() {
    let mut nodes = network(3, config());
    let mut chains = Vec::new();
    for (i, extra) in [(0, None), (1, None), (2, Some(scan(9)))] {
        let mut out = Vec::new();
        nodes[i].on_device_connected("d", SimTime::ZERO, &mut out).unwrap();
        for r in [ntp(), api()].into_iter().chain(extra) {
            nodes[i].on_packet("d", &r, SimTime::from_secs(1), &mut out).unwrap();
        }
        chains.push(nodes[i].finish_profiling("d", SimTime::from_secs(60), &mut out).unwrap().unwrap());
    }
    assert_eq!(chains[0], lifx_chain());
    assert_eq!(chains[0], chains[1]);
    assert_ne!(chains[0], chains[2]);
}

#[test]
fn enforcement_forwards_whitelisted_and_drops_new() {
    let mut nodes = network(1, config());
    onboard(&mut nodes);
    let s = &mut nodes[0];
    let mut out = Vec::new();
    let t = SimTime::from_secs(70);
    assert_eq!(s.on_packet("lifx-0", &ntp(), t, &mut out).unwrap().verdict, Verdict::Forward);
    assert_eq!(s.on_packet("lifx-0", &scan(4), t, &mut out).unwrap().verdict, Verdict::Drop);
    assert_eq!(s.on_packet("lifx-0", &scan(4), t, &mut out).unwrap().verdict, Verdict::Drop);
    let round = s.build_round_candidates(t).unwrap();
    assert_eq!(round.whitelist.len(), 1);
    assert_eq!(round.whitelist[0].signatures, vec![sig(&scan(4))]);
    let c = s.counters("lifx-0").unwrap();
    assert_eq!((c.forwarded, c.dropped), (1, 2));
}

#[test]
fn candidates_list_one_header_per_subscription() {
    let mut nodes = network(1, config());
    let s = &mut nodes[0];
    assert_eq!(s.build_round_candidates(SimTime::ZERO), Err(SentinelError::NoSubscriptions));
    let mut out = Vec::new();
    let sets = [vec![ntp(), api()], vec![scan(1)], vec![scan(2), scan(3)]];
    for (i, set) in sets.iter().enumerate() {
        let dev = format!("d{i}");
        s.on_device_connected(&dev, SimTime::ZERO, &mut out).unwrap();
        for r in set {
            s.on_packet(&dev, r, SimTime::from_secs(1), &mut out).unwrap();
        }
        s.finish_profiling(&dev, SimTime::from_secs(60), &mut out).unwrap();
    }
    let one = s.build_round_candidates(SimTime::from_secs(61)).unwrap();
    assert_eq!(one.control.whitelist_headers.len(), 3);
    assert!(one.whitelist.iter().all(|b| b.signatures.is_empty()));
    s.on_packet("d1", &scan(7), SimTime::from_secs(62), &mut out).unwrap();
    let two = s.build_round_candidates(SimTime::from_secs(62)).unwrap();
    assert_eq!(two.control.whitelist_headers.len(), 3);
    assert_eq!(two.whitelist.iter().filter(|b| !b.signatures.is_empty()).count(), 1);
    for (b, h) in two.whitelist.iter().zip(&two.control.whitelist_headers) {
        assert_eq!(b.hash(), *h);
    }
}

#[test]
fn win_extends_chains_and_broadcasts_to_active_peers() {
    let mut nodes = network(3, config());
    onboard(&mut nodes);
    let chain = lifx_chain();
    let before = nodes[0].store().control_height();
    let mut out = Vec::new();
    let msg = nodes[0].on_block_win(SimTime::from_secs(80), &mut out).unwrap();
    match &*msg {
        Message::Announce { whitelist, .. } => assert_eq!(whitelist.len(), 1),
        other => panic!("{other:?}"),
    }
    assert_eq!(nodes[0].store().control_height(), before + 1);
    let tip = nodes[0].chosen_tip(&chain).unwrap();
    assert_eq!(nodes[0].store().device_tree(&chain).unwrap().get(&tip).unwrap().height, 1);
    let to = out.iter().find_map(|a| match a {
        Action::Broadcast { to, .. } => Some(to.clone()),
        _ => None,
    });
    assert_eq!(to, Some(vec![1, 2]));

    // long after the last share, nobody is active
    let late = SimTime::from_secs(10_000);
    let mut out = Vec::new();
    nodes[1].on_block_win(late, &mut out).unwrap();
    let to = out.iter().find_map(|a| match a {
        Action::Broadcast { to, .. } => Some(to.clone()),
        _ => None,
    });
    assert_eq!(to, Some(vec![]));
}

#[test]
fn honest_blocks_are_accepted_and_mined_upon() {
    let mut nodes = network(3, config());
    onboard(&mut nodes);
    let chain = lifx_chain();
    win(&mut nodes, 0, SimTime::from_secs(80));
    let tip = nodes[0].chosen_tip(&chain).unwrap();
    assert_eq!(nodes[1].chosen_tip(&chain), Some(tip));
    assert_eq!(nodes[2].build_round_candidates(SimTime::from_secs(81)).unwrap().whitelist[0].prev_hash, tip);
}

#[test]
fn unknown_signature_blocks_are_not_extended_until_margin() {
    let mut nodes = network(3, config());
    onboard(&mut nodes);
    let chain = lifx_chain();
    let mut t = 80;
    let mut out = Vec::new();
    nodes[2].on_packet("lifx-2", &scan(5), SimTime::from_secs(t), &mut out).unwrap();
    let events = win(&mut nodes, 2, SimTime::from_secs(t));
    assert!(events.iter().any(|e| matches!(e, SentinelEvent::BlockRejected { unrecognized, .. } if unrecognized == &vec![sig(&scan(5))])));
    let genesis_set: BTreeSet<_> = [sig(&ntp()), sig(&api())].into();
    assert_eq!(nodes[0].branch_whitelist(&chain), Some(&genesis_set));
    assert_eq!(nodes[0].store().derive_whitelist(&chain).unwrap().allowed.len(), 3);

    // the infected node keeps extending its branch; margin 3 means adoption
    // when its branch leads genesis by three
    for _ in 0..1 {
        t += 20;
        win(&mut nodes, 2, SimTime::from_secs(t));
        assert!(!nodes[0].branch_whitelist(&chain).unwrap().contains(&sig(&scan(5))));
    }
    t += 20;
    let events = win(&mut nodes, 2, SimTime::from_secs(t));
    assert!(events.iter().any(|e| matches!(e, SentinelEvent::Adopted { .. })));
    assert!(nodes[0].branch_whitelist(&chain).unwrap().contains(&sig(&scan(5))));
    assert_eq!(nodes[0].chosen_tip(&chain), nodes[2].chosen_tip(&chain));
    assert!(nodes[0].observed(&chain).is_some_and(|o| !o.contains(&sig(&scan(5)))));
}

#[test]
fn margin_one_adopts_at_local_plus_one() {
    let mut nodes = network(2, SentinelConfig { adoption_margin: 1, ..config() });
    onboard(&mut nodes);
    let chain = lifx_chain();
    let mut out = Vec::new();
    nodes[1].on_packet("lifx-1", &scan(5), SimTime::from_secs(80), &mut out).unwrap();
    win(&mut nodes, 1, SimTime::from_secs(80));
    assert!(nodes[0].branch_whitelist(&chain).unwrap().contains(&sig(&scan(5))));
}

#[test]
fn honest_majority_overtakes_a_lone_fork() {
    let mut nodes = network(3, config());
    onboard(&mut nodes);
    let chain = lifx_chain();
    let mut out = Vec::new();
    nodes[2].on_packet("lifx-2", &scan(5), SimTime::from_secs(80), &mut out).unwrap();
    win(&mut nodes, 2, SimTime::from_secs(80));
    win(&mut nodes, 0, SimTime::from_secs(100));
    // equal heights: the infected node stays on the branch it got first
    assert_ne!(nodes[2].chosen_tip(&chain), nodes[0].chosen_tip(&chain));
    win(&mut nodes, 1, SimTime::from_secs(120));
    assert_eq!(nodes[2].chosen_tip(&chain), nodes[0].chosen_tip(&chain));
    // and forks again with its signature on its next win
    let round = nodes[2].build_round_candidates(SimTime::from_secs(130)).unwrap();
    assert_eq!(round.whitelist[0].signatures, vec![sig(&scan(5))]);
}

#[test]
fn confirmation_depth_delays_enforcement() {
    let mut nodes = network(2, SentinelConfig { adoption_margin: 1, confirmations: 2, ..config() });
    onboard(&mut nodes);
    let chain = lifx_chain();
    let mut out = Vec::new();
    nodes[0].on_packet("lifx-0", &scan(5), SimTime::from_secs(80), &mut out).unwrap();
    nodes[1].on_packet("lifx-1", &scan(5), SimTime::from_secs(80), &mut out).unwrap();
    win(&mut nodes, 0, SimTime::from_secs(80));
    assert!(!nodes[1].enforced_whitelist(&chain).unwrap().contains(&sig(&scan(5))));
    win(&mut nodes, 0, SimTime::from_secs(100));
    assert!(!nodes[1].enforced_whitelist(&chain).unwrap().contains(&sig(&scan(5))));
    let events = win(&mut nodes, 1, SimTime::from_secs(120));
    assert!(nodes[1].enforced_whitelist(&chain).unwrap().contains(&sig(&scan(5))));
    assert!(events.iter().any(|e| matches!(e, SentinelEvent::WhitelistChanged { added, .. } if added.contains(&sig(&scan(5))))));
    let mut out = Vec::new();
    let d = nodes[1].on_packet("lifx-1", &scan(5), SimTime::from_secs(121), &mut out).unwrap();
    assert_eq!(d.verdict, Verdict::Forward);
}

#[test]
fn late_joiner_syncs_the_chain() {
    let mut nodes = network(3, config());
    onboard_first(&mut nodes, 2);
    make_all_active(&mut nodes, SimTime::from_secs(60));
    let chain = lifx_chain();
    for k in 0..5 {
        win(&mut nodes, k % 2, SimTime::from_secs(80 + 20 * k as u64));
    }
    let mut out = Vec::new();
    nodes[2].on_device_connected("late", SimTime::from_secs(200), &mut out).unwrap();
    nodes[2].on_packet("late", &ntp(), SimTime::from_secs(201), &mut out).unwrap();
    nodes[2].on_packet("late", &api(), SimTime::from_secs(202), &mut out).unwrap();
    nodes[2].finish_profiling("late", SimTime::from_secs(260), &mut out).unwrap();
    pump(&mut nodes, 2, out, SimTime::from_secs(260));
    assert_eq!(nodes[2].pending_syncs(), 0);
    assert_eq!(nodes[2].chosen_tip(&chain), nodes[0].chosen_tip(&chain));
    assert_eq!(nodes[2].branch_whitelist(&chain), nodes[0].branch_whitelist(&chain));
}

#[test]
fn sync_of_unknown_chain_is_empty() {
    let nodes = network(1, config());
    let (c, w) = nodes[0].chain_sync_payload(&lifx_chain());
    assert!(c.is_empty() && w.is_empty());
}

#[test]
fn missed_announcement_is_recovered_from_orphans() {
    let mut nodes = network(3, config());
    onboard(&mut nodes);
    let chain = lifx_chain();
    // node 0 wins but its broadcast never reaches node 2
    let mut out = Vec::new();
    nodes[0].on_block_win(SimTime::from_secs(80), &mut out).unwrap();
    let out: Vec<Action> = out
        .into_iter()
        .map(|a| match a {
            Action::Broadcast { to, msg } => Action::Broadcast { to: to.into_iter().filter(|&t| t != 2).collect(), msg },
            other => other,
        })
        .collect();
    pump(&mut nodes, 0, out, SimTime::from_secs(80));
    assert_ne!(nodes[2].chosen_tip(&chain), nodes[0].chosen_tip(&chain));
    win(&mut nodes, 1, SimTime::from_secs(100));
    assert_eq!(nodes[2].chosen_tip(&chain), nodes[0].chosen_tip(&chain));
    assert_eq!(nodes[2].store().control_tip(), nodes[0].store().control_tip());
}

#[test]
fn sync_retries_then_gives_up() {
    let mut nodes = network(2, SentinelConfig { sync_retries: 2, ..config() });
    let mut out = Vec::new();
    nodes[0].chain_sync(1, lifx_chain(), SimTime::ZERO, &mut out);
    let mut timers = 0;
    let mut gave_up = false;
    for step in 0..10 {
        let timer = out.iter().find_map(|a| match a {
            Action::SetTimer { timer, .. } => Some(timer.clone()),
            _ => None,
        });
        gave_up |= out.iter().any(|a| matches!(a, Action::Log(SentinelEvent::SyncGaveUp { .. })));
        let Some(timer) = timer else { break };
        timers += 1;
        out.clear();
        nodes[0].on_timer(&timer, SimTime::from_secs(step + 1), &mut out);
    }
    gave_up |= out.iter().any(|a| matches!(a, Action::Log(SentinelEvent::SyncGaveUp { .. })));
    assert_eq!(timers, 3);
    assert!(gave_up);
    assert_eq!(nodes[0].pending_syncs(), 0);
}

#[test]
fn config_validation() {
    assert!(SentinelConfig::default().validate().is_ok());
    assert!(SentinelConfig { adoption_margin: 0, ..SentinelConfig::default() }.validate().is_err());
    assert!(SentinelConfig { prune_depth: 10, ..SentinelConfig::default() }.validate().is_err());
}
