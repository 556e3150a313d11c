//! Per-position, per-business target construction.
//!
//! For position `t` and business `k` the target is the earliest later
//! position whose event belongs to `k`, or nothing when `k` never recurs.

use serde::{Deserialize, Serialize};

use crate::data::Interaction;
use crate::error::{invalid, Error, Result};

/// How supervision targets are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetMode {
    /// Nearest future event of every business.
    #[default]
    Routed,
    /// Only the immediate successor, under its own business.
    Ntp,
}

/// Dense `len x businesses` table of target positions; `None` is a mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoutedTargets {
    len: usize,
    businesses: usize,
    targets: Vec<Option<usize>>,
}

/// One supervised `(position, business) -> target position` entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pair {
    pub position: usize,
    pub business: u16,
    pub target: usize,
}

impl RoutedTargets {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn businesses(&self) -> usize {
        self.businesses
    }

    pub fn get(&self, position: usize, business: usize) -> Option<usize> {
        self.targets[position * self.businesses + business]
    }

    /// Unmasked entries in position-major, business-minor order.
    pub fn pairs(&self) -> impl Iterator<Item = Pair> + '_ {
        self.targets.iter().enumerate().filter_map(move |(i, t)| {
            t.map(|target| Pair {
                position: i / self.businesses,
                business: (i % self.businesses) as u16,
                target,
            })
        })
    }

    pub fn supervised(&self) -> usize {
        self.targets.iter().filter(|t| t.is_some()).count()
    }
}

fn check(events: &[Interaction], businesses: usize) -> Result<()> {
    if businesses == 0 {
        return Err(invalid("business count must be positive"));
    }
    for (i, e) in events.iter().enumerate() {
        if e.business as usize >= businesses {
            return Err(Error::UnknownBusiness(e.business));
        }
        if i > 0 && e.ts < events[i - 1].ts {
            return Err(invalid(format!(
                "events out of order at position {i}: {} < {}",
                e.ts,
                events[i - 1].ts
            )));
        }
    }
    Ok(())
}

/// Nearest-future same-business targets, built in one backward sweep.
pub fn route_labels(events: &[Interaction], businesses: usize) -> Result<RoutedTargets> {
    check(events, businesses)?;
    let len = events.len();
    let mut targets = vec![None; len * businesses];
    let mut next: Vec<Option<usize>> = vec![None; businesses];
    for t in (0..len).rev() {
        targets[t * businesses..(t + 1) * businesses].copy_from_slice(&next);
        next[events[t].business as usize] = Some(t);
    }
    Ok(RoutedTargets {
        len,
        businesses,
        targets,
    })
}

/// Single next-event target per position.
pub fn next_event_labels(events: &[Interaction], businesses: usize) -> Result<RoutedTargets> {
    check(events, businesses)?;
    let len = events.len();
    let mut targets = vec![None; len * businesses];
    for t in 0..len.saturating_sub(1) {
        targets[t * businesses + events[t + 1].business as usize] = Some(t + 1);
    }
    Ok(RoutedTargets {
        len,
        businesses,
        targets,
    })
}

pub fn labels(events: &[Interaction], businesses: usize, mode: TargetMode) -> Result<RoutedTargets> {
    match mode {
        TargetMode::Routed => route_labels(events, businesses),
        TargetMode::Ntp => next_event_labels(events, businesses),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(bs: &[u16]) -> Vec<Interaction> {
        bs.iter()
            .enumerate()
            .map(|(i, &b)| Interaction {
                item: i as u32,
                business: b,
                ts: i as i64,
            })
            .collect()
    }

    #[test]
    fn interleaved_example() {
        let r = route_labels(&seq(&[0, 1, 0, 1]), 2).unwrap();
        let table: Vec<[Option<usize>; 2]> = (0..4).map(|t| [r.get(t, 0), r.get(t, 1)]).collect();
        assert_eq!(
            table,
            vec![
                [Some(2), Some(1)],
                [Some(2), Some(3)],
                [None, Some(3)],
                [None, None]
            ]
        );
    }

    #[test]
    fn single_business() {
        let r = route_labels(&seq(&[0, 0, 0]), 3).unwrap();
        for t in 0..3 {
            assert_eq!(r.get(t, 0), if t < 2 { Some(t + 1) } else { None });
            assert_eq!(r.get(t, 1), None);
            assert_eq!(r.get(t, 2), None);
        }
    }

    #[test]
    fn empty_and_errors() {
        assert!(route_labels(&[], 2).unwrap().is_empty());
        assert!(matches!(
            route_labels(&seq(&[0, 5]), 2),
            Err(Error::UnknownBusiness(5))
        ));
        let mut s = seq(&[0, 1]);
        s[1].ts = -1;
        assert!(route_labels(&s, 2).is_err());
    }

    #[test]
    fn ntp_targets_immediate_successor() {
        let r = next_event_labels(&seq(&[0, 1, 1, 0]), 2).unwrap();
        let pairs: Vec<_> = r.pairs().map(|p| (p.position, p.business, p.target)).collect();
        assert_eq!(pairs, vec![(0, 1, 1), (1, 1, 2), (2, 0, 3)]);
    }
}
