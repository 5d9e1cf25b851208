use proptest::prelude::*;
use qdex_core::netsim::{LinkModel, NetEvent, Network, US_PER_MS};

fn run(link: LinkModel, sends: &[(u32, u32, u64)]) -> Vec<(u64, u64, u64)> {
    let mut net = Network::with_nodes(link, 4);
    for &(src, dst, delay) in sends {
        net.send_after(delay, src, dst, "m", vec![]).unwrap();
    }
    let mut out = Vec::new();
    let mut last = 0;
    while let Some(ev) = net.next_event(u64::MAX) {
        assert!(net.now_us() >= last);
        last = net.now_us();
        match ev {
            NetEvent::Deliver(m) => out.push((m.seq, m.sent_at_us, m.deliver_at_us)),
            NetEvent::Slot { .. } if net.in_flight() == 0 => break,
            NetEvent::Slot { .. } => {}
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn no_delivery_precedes_its_send(
        sends in prop::collection::vec((0u32..4, 0u32..4, 0u64..50_000), 1..100),
        seed in any::<u64>(),
    ) {
        let link = LinkModel { seed, ..LinkModel::default() };
        let a = run(link, &sends);
        prop_assert_eq!(a.len(), sends.len());
        for &(_, sent, deliver) in &a {
            prop_assert!(deliver >= sent);
        }
        prop_assert_eq!(a, run(link, &sends));
    }
}

#[test]
fn request_response_round_trips_stay_in_band() {
    let link = LinkModel {
        seed: 9,
        ..LinkModel::default()
    };
    let mut net = Network::with_nodes(link, 2);
    let (lo, hi) = (link.d0_ms, link.d0_ms + link.jitter_max_ms);
    for _ in 0..10_000 {
        let t0 = net.now_us();
        net.send(0, 1, "req", vec![]).unwrap();
        loop {
            match net.next_event(u64::MAX).unwrap() {
                NetEvent::Deliver(m) if m.kind == "req" => {
                    net.send(1, 0, "resp", vec![]).unwrap();
                }
                NetEvent::Deliver(_) => break,
                NetEvent::Slot { .. } => {}
            }
        }
        let rtt_ms = (net.now_us() - t0) as f64 / US_PER_MS as f64;
        assert!(rtt_ms >= lo - 1e-3 && rtt_ms <= hi + 1e-3, "{rtt_ms}");
    }
}
