//! Synthetic multi-business interaction data, persistence, hold-out split
//! and deterministic batching.
//!
//! Items live in a shared feature space where each business owns a Gaussian
//! cluster. Every user keeps one latent preference vector per business that
//! takes a normalised random-walk step after each of that business's events;
//! items are drawn by softmax affinity to the current preference.

use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Gamma, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, Error, Result};
use crate::tokenizer::ItemVector;

/// Business shares of the reference traffic mix (A, B, C, D).
pub const TARGET_PROPORTIONS: [f64; 4] = [0.6147, 0.0956, 0.1231, 0.1666];

pub const SECONDS_PER_DAY: f64 = 86_400.0;

/// One user event. Serialised as `[item, business, ts]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "(u32, u16, i64)", into = "(u32, u16, i64)")]
pub struct Interaction {
    pub item: u32,
    pub business: u16,
    /// Seconds since the Unix epoch.
    pub ts: i64,
}

impl From<(u32, u16, i64)> for Interaction {
    fn from((item, business, ts): (u32, u16, i64)) -> Self {
        Self { item, business, ts }
    }
}

impl From<Interaction> for (u32, u16, i64) {
    fn from(e: Interaction) -> Self {
        (e.item, e.business, e.ts)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserHistory {
    pub user: u32,
    pub events: Vec<Interaction>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub users: usize,
    /// Items per business; ids are assigned business by business.
    pub catalog_sizes: Vec<usize>,
    /// Share of events per business; must sum to one.
    pub proportions: Vec<f64>,
    /// Per-business random-walk step applied to the preference after each event.
    pub drift: Vec<f64>,
    pub mean_length: f64,
    pub min_length: usize,
    pub max_length: usize,
    /// Fraction of preference variance shared across a user's businesses.
    pub correlation: f64,
    /// Dirichlet concentration of each user's business mix around `proportions`;
    /// smaller means stronger per-user bias.
    pub concentration: f64,
    pub feature_dim: usize,
    /// Within-business spread of item features relative to the spread of
    /// business centres.
    pub overlap: f64,
    /// Inverse temperature of the item-choice softmax.
    pub sharpness: f64,
    pub mean_gap_secs: f64,
    pub start_ts: i64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            users: 2000,
            catalog_sizes: vec![480, 240, 240, 240],
            proportions: TARGET_PROPORTIONS.to_vec(),
            drift: vec![0.05, 0.3, 0.3, 0.1],
            mean_length: 40.0,
            min_length: 6,
            max_length: 200,
            correlation: 0.3,
            concentration: 10.0,
            feature_dim: 16,
            overlap: 0.5,
            sharpness: 2.5,
            mean_gap_secs: SECONDS_PER_DAY,
            start_ts: 1_700_000_000,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn businesses(&self) -> usize {
        self.proportions.len()
    }

    pub fn validate(&self) -> Result<()> {
        let b = self.proportions.len();
        if b == 0 || b > u16::MAX as usize {
            return Err(Error::InvalidConfig("need at least one business".into()));
        }
        if self.catalog_sizes.len() != b || self.drift.len() != b {
            return Err(Error::InvalidConfig(format!(
                "catalog_sizes ({}) and drift ({}) must have one entry per business ({b})",
                self.catalog_sizes.len(),
                self.drift.len()
            )));
        }
        if self.proportions.iter().any(|&p| !(p > 0.0 && p <= 1.0)) {
            return Err(Error::InvalidConfig(format!(
                "proportions must lie in (0, 1], got {:?}",
                self.proportions
            )));
        }
        let total: f64 = self.proportions.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!(
                "proportions must sum to 1, got {total}"
            )));
        }
        if self.catalog_sizes.iter().any(|&c| c == 0) || self.users == 0 {
            return Err(Error::InvalidConfig("user and catalog counts must be positive".into()));
        }
        if self.drift.iter().any(|&d| !(d >= 0.0 && d.is_finite())) {
            return Err(Error::InvalidConfig("drift rates must be finite and non-negative".into()));
        }
        if self.min_length == 0 || self.min_length > self.max_length {
            return Err(Error::InvalidConfig("need 1 <= min_length <= max_length".into()));
        }
        if !(self.mean_length >= self.min_length as f64) {
            return Err(Error::InvalidConfig("mean_length below min_length".into()));
        }
        if !(0.0..=1.0).contains(&self.correlation) {
            return Err(Error::InvalidConfig("correlation must lie in [0, 1]".into()));
        }
        for (name, v) in [
            ("concentration", self.concentration),
            ("overlap", self.overlap),
            ("sharpness", self.sharpness),
            ("mean_gap_secs", self.mean_gap_secs),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!("{name} must be positive")));
            }
        }
        if self.feature_dim == 0 {
            return Err(Error::InvalidConfig("feature_dim must be positive".into()));
        }
        Ok(())
    }
}

/// Generated catalog and histories.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub items: Vec<ItemVector>,
    pub users: Vec<UserHistory>,
}

fn normal_vec<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn generate(cfg: &SyntheticConfig) -> Result<SyntheticData> {
    cfg.validate()?;
    let b_count = cfg.businesses();
    let d = cfg.feature_dim;

    let mut rng = stream_rng(cfg.seed, 0);
    let centers: Vec<Vec<f64>> = (0..b_count).map(|_| normal_vec(&mut rng, d)).collect();
    let mut items = Vec::new();
    // Standardised offsets from the business centre; these drive affinity.
    let mut offsets: Vec<Vec<Vec<f64>>> = vec![Vec::new(); b_count];
    let mut first_id = Vec::with_capacity(b_count);
    for (b, &size) in cfg.catalog_sizes.iter().enumerate() {
        first_id.push(items.len() as u32);
        for _ in 0..size {
            let u = normal_vec(&mut rng, d);
            let vec = centers[b]
                .iter()
                .zip(&u)
                .map(|(c, z)| c + cfg.overlap * z)
                .collect();
            items.push(ItemVector {
                item: items.len() as u32,
                business: Some(b as u16),
                vec,
            });
            offsets[b].push(u);
        }
    }

    let gamma: Vec<Gamma<f64>> = cfg
        .proportions
        .iter()
        .map(|&p| Gamma::new(cfg.concentration * p, 1.0).map_err(|e| Error::InvalidConfig(e.to_string())))
        .collect::<Result<_>>()?;
    let extra = cfg.mean_length - cfg.min_length as f64;
    let poisson = if extra > 0.0 {
        Some(Poisson::new(extra).map_err(|e| Error::InvalidConfig(e.to_string()))?)
    } else {
        None
    };
    let gap = Exp::new(1.0 / cfg.mean_gap_secs).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let scale = 1.0 / (d as f64).sqrt();

    let mut users = Vec::with_capacity(cfg.users);
    for user in 0..cfg.users {
        let mut rng = stream_rng(cfg.seed, user as u64 + 1);
        let mut mix: Vec<f64> = gamma.iter().map(|g| g.sample(&mut rng).max(1e-300)).collect();
        let z: f64 = mix.iter().sum();
        mix.iter_mut().for_each(|m| *m /= z);

        let shared = normal_vec(&mut rng, d);
        let mut prefs: Vec<Vec<f64>> = (0..b_count)
            .map(|_| {
                let own = normal_vec(&mut rng, d);
                shared
                    .iter()
                    .zip(&own)
                    .map(|(s, o)| (cfg.correlation.sqrt() * s + (1.0 - cfg.correlation).sqrt() * o) * scale)
                    .collect()
            })
            .collect();

        let len = poisson
            .as_ref()
            .map_or(0, |p| p.sample(&mut rng) as usize)
            .saturating_add(cfg.min_length)
            .min(cfg.max_length);
        let mut ts = cfg.start_ts + rng.random_range(0..30 * SECONDS_PER_DAY as i64);
        let mut events = Vec::with_capacity(len);
        for _ in 0..len {
            let b = sample_index(&mut rng, &mix);
            let pref = &prefs[b];
            let logits: Vec<f64> = offsets[b]
                .iter()
                .map(|u| cfg.sharpness * u.iter().zip(pref).map(|(x, p)| x * p).sum::<f64>())
                .collect();
            let local = sample_softmax(&mut rng, &logits);
            events.push(Interaction {
                item: first_id[b] + local as u32,
                business: b as u16,
                ts,
            });
            ts += 1 + gap.sample(&mut rng) as i64;

            let step = cfg.drift[b];
            if step > 0.0 {
                let norm = (1.0 + step * step).sqrt();
                for p in prefs[b].iter_mut() {
                    let e: f64 = rng.sample(StandardNormal);
                    *p = (*p + step * scale * e) / norm;
                }
            }
        }
        users.push(UserHistory {
            user: user as u32,
            events,
        });
    }
    Ok(SyntheticData { items, users })
}

fn sample_index<R: Rng>(rng: &mut R, probs: &[f64]) -> usize {
    let mut u = rng.random::<f64>();
    for (i, &p) in probs.iter().enumerate() {
        if u < p {
            return i;
        }
        u -= p;
    }
    probs.len() - 1
}

fn sample_softmax<R: Rng>(rng: &mut R, logits: &[f64]) -> usize {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let z: f64 = w.iter().sum();
    let probs: Vec<f64> = w.iter().map(|x| x / z).collect();
    sample_index(rng, &probs)
}

/// Empirical share of events per business.
pub fn business_shares(users: &[UserHistory], businesses: usize) -> Vec<f64> {
    let mut counts = vec![0usize; businesses];
    let mut total = 0usize;
    for u in users {
        for e in &u.events {
            if let Some(c) = counts.get_mut(e.business as usize) {
                *c += 1;
            }
            total += 1;
        }
    }
    counts
        .iter()
        .map(|&c| if total == 0 { 0.0 } else { c as f64 / total as f64 })
        .collect()
}

pub fn write_dataset(path: &Path, users: &[UserHistory]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for u in users {
        serde_json::to_writer(&mut w, u)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Streams users from a JSON Lines file; malformed lines report their number.
pub fn stream_dataset(path: &Path) -> Result<impl Iterator<Item = Result<UserHistory>>> {
    let reader = std::io::BufReader::new(std::fs::File::open(path)?);
    Ok(reader
        .lines()
        .enumerate()
        .filter_map(|(i, line)| match line {
            Err(e) => Some(Err(Error::Io(e))),
            Ok(l) if l.trim().is_empty() => None,
            Ok(l) => Some(parse_user(&l, i + 1)),
        }))
}

fn parse_user(line: &str, number: usize) -> Result<UserHistory> {
    let u: UserHistory = serde_json::from_str(line).map_err(|e| Error::Parse {
        line: number,
        msg: e.to_string(),
    })?;
    if u.events.windows(2).any(|w| w[1].ts < w[0].ts) {
        return Err(Error::Parse {
            line: number,
            msg: "timestamps decrease".into(),
        });
    }
    Ok(u)
}

pub fn read_dataset(path: &Path) -> Result<Vec<UserHistory>> {
    stream_dataset(path)?.collect()
}

/// Item id to business id lookup built from the item file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Catalog {
    business: Vec<u16>,
    businesses: usize,
}

impl Catalog {
    pub fn from_items(items: &[ItemVector]) -> Result<Self> {
        let mut business = vec![u16::MAX; items.len()];
        for it in items {
            let slot = business.get_mut(it.item as usize).ok_or(Error::IndexOutOfRange {
                what: "item id (ids must be 0..n)",
                index: it.item as usize,
                size: items.len(),
            })?;
            *slot = it
                .business
                .ok_or_else(|| invalid(format!("item {} has no business", it.item)))?;
        }
        if business.contains(&u16::MAX) {
            return Err(invalid("item ids are not contiguous"));
        }
        let businesses = business.iter().map(|&b| b as usize + 1).max().unwrap_or(0);
        Ok(Self { business, businesses })
    }

    pub fn len(&self) -> usize {
        self.business.len()
    }

    pub fn is_empty(&self) -> bool {
        self.business.is_empty()
    }

    pub fn businesses(&self) -> usize {
        self.businesses
    }

    pub fn business_of(&self, item: u32) -> Option<u16> {
        self.business.get(item as usize).copied()
    }

    /// Checks every event's item id and business against the catalog.
    pub fn check(&self, users: &[UserHistory]) -> Result<()> {
        for u in users {
            for e in &u.events {
                match self.business_of(e.item) {
                    None => {
                        return Err(Error::IndexOutOfRange {
                            what: "item id",
                            index: e.item as usize,
                            size: self.len(),
                        })
                    }
                    Some(b) if b != e.business => {
                        return Err(invalid(format!(
                            "user {}: item {} belongs to business {b}, event says {}",
                            u.user, e.item, e.business
                        )))
                    }
                    _ => {}
                }
            }
        }
        Ok(())
    }
}

/// Most recent `max_len` events.
pub fn truncate(events: &[Interaction], max_len: usize) -> &[Interaction] {
    &events[events.len().saturating_sub(max_len)..]
}

/// One held-out interaction and the history preceding it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TestCase {
    pub user: u32,
    pub business: u16,
    pub target: Interaction,
    /// Training events before the target, most recent `max_len`.
    pub context: Vec<Interaction>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<UserHistory>,
    pub test: Vec<TestCase>,
}

/// Holds out each user's last interaction of every business they used.
///
/// Training histories drop all held-out events. A test context is the part of
/// the training history that precedes its target, so no held-out event is ever
/// visible; cases with an empty context are skipped.
pub fn split(users: &[UserHistory], businesses: usize, max_len: usize) -> Split {
    let mut train = Vec::with_capacity(users.len());
    let mut test = Vec::new();
    for u in users {
        let mut last: Vec<Option<usize>> = vec![None; businesses];
        for (i, e) in u.events.iter().enumerate() {
            if let Some(slot) = last.get_mut(e.business as usize) {
                *slot = Some(i);
            }
        }
        let mut held: Vec<usize> = last.iter().flatten().copied().collect();
        held.sort_unstable();
        let kept: Vec<usize> = (0..u.events.len()).filter(|i| held.binary_search(i).is_err()).collect();
        let events: Vec<Interaction> = kept.iter().map(|&i| u.events[i]).collect();
        for &h in &held {
            let before = kept.partition_point(|&i| i < h);
            if before == 0 {
                continue;
            }
            let e = u.events[h];
            test.push(TestCase {
                user: u.user,
                business: e.business,
                target: e,
                context: truncate(&events[..before], max_len).to_vec(),
            });
        }
        train.push(UserHistory {
            user: u.user,
            events,
        });
    }
    Split { train, test }
}

/// Epoch-wise shuffled mini-batches of user indices; the order depends only
/// on the seed.
#[derive(Debug, Clone)]
pub struct Batcher {
    n: usize,
    batch_size: usize,
    seed: u64,
    epoch: u64,
    order: Vec<usize>,
    pos: usize,
}

impl Batcher {
    pub fn new(n: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if n == 0 || batch_size == 0 {
            return Err(invalid("batcher needs at least one item and a positive batch size"));
        }
        let mut b = Self {
            n,
            batch_size,
            seed,
            epoch: 0,
            order: Vec::new(),
            pos: 0,
        };
        b.reshuffle();
        Ok(b)
    }

    fn reshuffle(&mut self) {
        use rand::seq::SliceRandom;
        self.order = (0..self.n).collect();
        let mut rng = stream_rng(self.seed ^ 0x5eed_ba7c, self.epoch);
        self.order.shuffle(&mut rng);
        self.pos = 0;
    }

    /// Next batch; a short tail is dropped in favour of a fresh epoch.
    pub fn next_batch(&mut self) -> Vec<usize> {
        let size = self.batch_size.min(self.n);
        if self.pos + size > self.n {
            self.epoch += 1;
            self.reshuffle();
        }
        let out = self.order[self.pos..self.pos + size].to_vec();
        self.pos += size;
        out
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }
}

/// Short digest of the user ids in one batch, for auditing data order.
pub fn batch_checksum(users: &[u32]) -> String {
    let mut h = Sha256::new();
    for u in users {
        h.update(u.to_le_bytes());
    }
    hex::encode(&h.finalize()[..8])
}
