use mbgr_core::ldr::{labels, next_event_labels, route_labels, TargetMode};
use mbgr_core::Interaction;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn seq(businesses: &[u16]) -> Vec<Interaction> {
    businesses
        .iter()
        .enumerate()
        .map(|(i, &b)| Interaction {
            item: i as u32,
            business: b,
            ts: 100 + i as i64,
        })
        .collect()
}

/// Forward scan straight from the definition.
fn brute_force(events: &[Interaction], businesses: usize) -> Vec<Vec<Option<usize>>> {
    (0..events.len())
        .map(|t| {
            (0..businesses)
                .map(|k| (t + 1..events.len()).find(|&j| events[j].business as usize == k))
                .collect()
        })
        .collect()
}

fn table(events: &[Interaction], businesses: usize) -> Vec<Vec<Option<usize>>> {
    let r = route_labels(events, businesses).unwrap();
    (0..r.len())
        .map(|t| (0..businesses).map(|k| r.get(t, k)).collect())
        .collect()
}

#[test]
fn interleaved_example() {
    let events = seq(&[0, 1, 0, 1]);
    let expect = vec![
        vec![Some(2), Some(1)],
        vec![Some(2), Some(3)],
        vec![None, Some(3)],
        vec![None, None],
    ];
    assert_eq!(table(&events, 2), expect);
    assert_eq!(brute_force(&events, 2), expect);
}

#[test]
fn single_business_targets_the_successor() {
    let t = table(&seq(&[0, 0, 0]), 3);
    assert_eq!(t[0], vec![Some(1), None, None]);
    assert_eq!(t[1], vec![Some(2), None, None]);
    assert_eq!(t[2], vec![None, None, None]);
}

#[test]
fn empty_sequence_gives_empty_targets() {
    let r = route_labels(&[], 4).unwrap();
    assert!(r.is_empty());
    assert_eq!(r.supervised(), 0);
}

#[test]
fn oracle_equivalence_on_random_sequences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..1000 {
        let businesses = rng.random_range(1..=6usize);
        let len = rng.random_range(1..=64usize);
        let bs: Vec<u16> = (0..len).map(|_| rng.random_range(0..businesses) as u16).collect();
        let events = seq(&bs);
        assert_eq!(table(&events, businesses), brute_force(&events, businesses));
    }
}

fn sequence() -> impl Strategy<Value = (usize, Vec<u16>)> {
    (1usize..=6).prop_flat_map(|b| (Just(b), prop::collection::vec(0..b as u16, 0..64)))
}

proptest! {
    #[test]
    fn targets_are_valid((businesses, bs) in sequence()) {
        let events = seq(&bs);
        let r = route_labels(&events, businesses).unwrap();
        for p in r.pairs() {
            prop_assert!(p.target > p.position);
            prop_assert_eq!(events[p.target].business, p.business);
            prop_assert!((p.position + 1..p.target).all(|j| events[j].business != p.business));
        }
        // Every business that recurs after t is supervised at t.
        for t in 0..events.len() {
            for k in 0..businesses {
                let recurs = events[t + 1..].iter().any(|e| e.business as usize == k);
                prop_assert_eq!(r.get(t, k).is_some(), recurs);
            }
        }
    }

    #[test]
    fn routing_is_at_least_as_dense_as_next_token((businesses, bs) in sequence()) {
        let events = seq(&bs);
        let routed = route_labels(&events, businesses).unwrap();
        let ntp = next_event_labels(&events, businesses).unwrap();
        prop_assert!(routed.supervised() >= ntp.supervised());
        // The immediate successor is always among the routed targets.
        for p in ntp.pairs() {
            prop_assert_eq!(routed.get(p.position, p.business as usize), Some(p.target));
        }
    }

    #[test]
    fn mode_dispatch((businesses, bs) in sequence()) {
        let events = seq(&bs);
        prop_assert_eq!(labels(&events, businesses, TargetMode::Routed).unwrap(), route_labels(&events, businesses).unwrap());
        prop_assert_eq!(labels(&events, businesses, TargetMode::Ntp).unwrap(), next_event_labels(&events, businesses).unwrap());
    }
}
