//! Residual k-means quantizer that maps item feature vectors to semantic IDs.
//!
//! Level 1 clusters the raw vectors; each further level clusters what is left
//! after subtracting the centroids already assigned. The per-level codebooks
//! double as the vocabularies the prediction loss contrasts against.

use std::io::{BufRead, Write};
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

const KMEANS_RESTARTS: usize = 4;
const KMEANS_MAX_ITER: usize = 100;

/// Ordered per-level token indices identifying an item.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SemanticId(pub Vec<usize>);

impl SemanticId {
    pub fn tokens(&self) -> &[usize] {
        &self.0
    }

    pub fn levels(&self) -> usize {
        self.0.len()
    }
}

/// Per-level codeword tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Codebook {
    pub levels: usize,
    pub vocab: usize,
    pub dim: usize,
    /// `levels * vocab` codewords, level-major.
    pub codewords: Vec<Vec<f64>>,
}

impl Codebook {
    pub fn new(levels: usize, vocab: usize, dim: usize, codewords: Vec<Vec<f64>>) -> Result<Self> {
        let cb = Self {
            levels,
            vocab,
            dim,
            codewords,
        };
        cb.validate()?;
        Ok(cb)
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 {
            return Err(invalid("codebook needs at least one level"));
        }
        if self.vocab < 2 {
            return Err(invalid("codebook vocabulary must have at least two codewords"));
        }
        if self.codewords.len() != self.levels * self.vocab {
            return Err(Error::DimensionMismatch {
                expected: self.levels * self.vocab,
                got: self.codewords.len(),
            });
        }
        for c in &self.codewords {
            if c.len() != self.dim {
                return Err(Error::DimensionMismatch {
                    expected: self.dim,
                    got: c.len(),
                });
            }
            if c.iter().any(|v| !v.is_finite()) {
                return Err(invalid("codebook contains a non-finite codeword"));
            }
        }
        Ok(())
    }

    pub fn codeword(&self, level: usize, token: usize) -> &[f64] {
        &self.codewords[level * self.vocab + token]
    }

    pub fn level(&self, level: usize) -> &[Vec<f64>] {
        &self.codewords[level * self.vocab..(level + 1) * self.vocab]
    }

    /// Level codewords as a `[vocab, width]` table: truncated or zero-padded
    /// to `width`, then rescaled so the mean row norm is one.
    pub fn level_table(&self, level: usize, width: usize) -> Array2<f64> {
        let mut t = Array2::zeros((self.vocab, width));
        for (r, c) in self.level(level).iter().enumerate() {
            for (j, &v) in c.iter().take(width).enumerate() {
                t[[r, j]] = v;
            }
        }
        let mean_norm = t
            .rows()
            .into_iter()
            .map(|r| r.dot(&r).sqrt())
            .sum::<f64>()
            / self.vocab as f64;
        if mean_norm > 0.0 {
            t /= mean_norm;
        }
        t
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        serde_json::to_writer(std::io::BufWriter::new(f), self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cb: Codebook = serde_json::from_str(&text)?;
        cb.validate()?;
        Ok(cb)
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest centroid; ties go to the lowest index.
fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centroids.iter().enumerate() {
        let d = sq_dist(point, c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

fn kmeans_pp_init(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut centroids = vec![points[rng.random_range(0..points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut chosen = points.len() - 1;
            for (i, &d) in d2.iter().enumerate() {
                if u < d {
                    chosen = i;
                    break;
                }
                u -= d;
            }
            chosen
        } else {
            rng.random_range(0..points.len())
        };
        let c = points[pick].clone();
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &c));
        }
        centroids.push(c);
    }
    centroids
}

/// Lloyd iterations from a k-means++ start. Returns centroids and inertia.
fn lloyd(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> (Vec<Vec<f64>>, f64) {
    let dim = points[0].len();
    let mut centroids = kmeans_pp_init(points, k, rng);
    let mut assign = vec![usize::MAX; points.len()];
    for _ in 0..KMEANS_MAX_ITER {
        let mut changed = false;
        for (a, p) in assign.iter_mut().zip(points) {
            let (c, _) = nearest(p, &centroids);
            if *a != c {
                *a = c;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (&a, p) in assign.iter().zip(points) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        let mut reseeded = Vec::new();
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                // Empty cluster: move it onto the point farthest from its own
                // centroid (lowest index on ties), skipping points already used.
                let mut far = (usize::MAX, -1.0);
                for (i, p) in points.iter().enumerate() {
                    if reseeded.contains(&i) {
                        continue;
                    }
                    let d = sq_dist(p, &centroids[assign[i]]);
                    if d > far.1 {
                        far = (i, d);
                    }
                }
                if far.0 != usize::MAX {
                    reseeded.push(far.0);
                    centroids[c] = points[far.0].clone();
                }
            }
        }
    }
    let inertia = points.iter().map(|p| nearest(p, &centroids).1).sum();
    (centroids, inertia)
}

fn kmeans(points: &[Vec<f64>], k: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut best: Option<(Vec<Vec<f64>>, f64)> = None;
    for restart in 0..KMEANS_RESTARTS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(restart as u64 * 0x9E37_79B9));
        let (c, inertia) = lloyd(points, k, &mut rng);
        if best.as_ref().is_none_or(|(_, b)| inertia < *b) {
            best = Some((c, inertia));
        }
    }
    best.expect("at least one restart").0
}

/// Fits a `levels`-deep residual quantizer with `vocab` codewords per level.
pub fn fit_residual_quantizer(
    vectors: &[Vec<f64>],
    levels: usize,
    vocab: usize,
    seed: u64,
) -> Result<Codebook> {
    if levels == 0 || vocab < 2 {
        return Err(invalid(format!(
            "need levels >= 1 and vocab >= 2, got levels={levels} vocab={vocab}"
        )));
    }
    if vectors.len() < vocab {
        return Err(invalid(format!(
            "need at least {vocab} vectors to fit {vocab} codewords, got {}",
            vectors.len()
        )));
    }
    let dim = vectors[0].len();
    if dim == 0 {
        return Err(invalid("item vectors are empty"));
    }
    for v in vectors {
        if v.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: v.len(),
            });
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(invalid("item vector contains a non-finite value"));
        }
    }
    let mut residuals = vectors.to_vec();
    let mut codewords = Vec::with_capacity(levels * vocab);
    for level in 0..levels {
        let centroids = kmeans(&residuals, vocab, seed.wrapping_add(level as u64 * 7919));
        for r in residuals.iter_mut() {
            let (c, _) = nearest(r, &centroids);
            for (x, y) in r.iter_mut().zip(&centroids[c]) {
                *x -= y;
            }
        }
        codewords.extend(centroids);
    }
    Codebook::new(levels, vocab, dim, codewords)
}

/// Greedy residual assignment: nearest codeword per level, lowest index on ties.
pub fn assign_sid(vector: &[f64], cb: &Codebook) -> Result<SemanticId> {
    if vector.len() != cb.dim {
        return Err(Error::DimensionMismatch {
            expected: cb.dim,
            got: vector.len(),
        });
    }
    let mut residual = vector.to_vec();
    let mut tokens = Vec::with_capacity(cb.levels);
    for level in 0..cb.levels {
        let (t, _) = nearest(&residual, cb.level(level));
        for (x, y) in residual.iter_mut().zip(cb.codeword(level, t)) {
            *x -= y;
        }
        tokens.push(t);
    }
    Ok(SemanticId(tokens))
}

/// Sum of the selected codeword at every level.
pub fn reconstruct_vector(sid: &SemanticId, cb: &Codebook) -> Result<Vec<f64>> {
    if sid.levels() != cb.levels {
        return Err(Error::DimensionMismatch {
            expected: cb.levels,
            got: sid.levels(),
        });
    }
    let mut out = vec![0.0; cb.dim];
    for (level, &t) in sid.tokens().iter().enumerate() {
        if t >= cb.vocab {
            return Err(Error::IndexOutOfRange {
                what: "semantic id token",
                index: t,
                size: cb.vocab,
            });
        }
        for (o, c) in out.iter_mut().zip(cb.codeword(level, t)) {
            *o += c;
        }
    }
    Ok(out)
}

/// One line of the item-vector file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemVector {
    pub item: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub business: Option<u16>,
    pub vec: Vec<f64>,
}

pub fn write_item_vectors(path: &Path, items: &[ItemVector]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for it in items {
        serde_json::to_writer(&mut w, it)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_item_vectors(path: &Path) -> Result<Vec<ItemVector>> {
    let r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let it: ItemVector = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(it);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cb(levels: Vec<Vec<Vec<f64>>>) -> Codebook {
        let vocab = levels[0].len();
        let dim = levels[0][0].len();
        Codebook::new(levels.len(), vocab, dim, levels.into_iter().flatten().collect()).unwrap()
    }

    #[test]
    fn two_points_are_their_own_centroids() {
        let pts = vec![vec![0.0, 0.0], vec![10.0, 10.0]];
        let c = fit_residual_quantizer(&pts, 1, 2, 5).unwrap();
        let mut words = c.codewords.clone();
        words.sort_by(|a, b| a[0].total_cmp(&b[0]));
        assert_eq!(words, pts);
    }

    #[test]
    fn too_few_points_is_an_error() {
        assert!(fit_residual_quantizer(&[vec![1.0, 2.0]], 1, 2, 0).is_err());
    }

    #[test]
    fn unit_square_second_level_recovers_remaining_axis() {
        // Lloyd on the four corners with V=2: the best split separates the
        // square along one axis into centroids (0.5±0.5 on that axis, 0.5 on
        // the other); the residuals are ±0.5 along the remaining axis and the
        // second level picks exactly those two codewords.
        let pts = vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]];
        for seed in 0..8 {
            let c = fit_residual_quantizer(&pts, 2, 2, seed).unwrap();
            let l1 = c.level(0);
            let split_axis = if (l1[0][0] - l1[1][0]).abs() > 0.5 { 0 } else { 1 };
            let other = 1 - split_axis;
            for w in l1 {
                assert!((w[other] - 0.5).abs() < 1e-12, "seed {seed}: {l1:?}");
            }
            let mut l2: Vec<f64> = c.level(1).iter().map(|w| w[other]).collect();
            l2.sort_by(f64::total_cmp);
            assert_eq!(l2, vec![-0.5, 0.5], "seed {seed}");
            for p in &pts {
                let sid = assign_sid(p, &c).unwrap();
                let r = reconstruct_vector(&sid, &c).unwrap();
                assert!(sq_dist(p, &r) < 1e-24);
            }
        }
    }

    #[test]
    fn assignment_examples() {
        let one = cb(vec![vec![vec![0.0, 0.0], vec![1.0, 1.0]]]);
        assert_eq!(assign_sid(&[0.9, 0.9], &one).unwrap().0, vec![1]);
        assert_eq!(assign_sid(&[0.5, 0.5], &one).unwrap().0, vec![0]);
        assert_eq!(reconstruct_vector(&SemanticId(vec![0]), &one).unwrap(), vec![0.0, 0.0]);

        let two = cb(vec![
            vec![vec![0.0, 0.0], vec![1.0, 1.0]],
            vec![vec![0.0, 0.0], vec![-0.1, -0.1]],
        ]);
        let sid = assign_sid(&[0.9, 0.9], &two).unwrap();
        assert_eq!(sid.0, vec![1, 1]);
        let r = reconstruct_vector(&sid, &two).unwrap();
        assert!((r[0] - 0.9).abs() < 1e-15 && (r[1] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn zero_codebook_reconstructs_zero() {
        let z = cb(vec![vec![vec![0.0; 3]; 4]; 2]);
        assert_eq!(reconstruct_vector(&SemanticId(vec![3, 1]), &z).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn errors() {
        let one = cb(vec![vec![vec![0.0, 0.0], vec![1.0, 1.0]]]);
        assert!(assign_sid(&[1.0], &one).is_err());
        assert!(reconstruct_vector(&SemanticId(vec![2]), &one).is_err());
        assert!(reconstruct_vector(&SemanticId(vec![0, 0]), &one).is_err());
    }

    #[test]
    fn level_table_pads_and_normalises() {
        let c = cb(vec![vec![vec![3.0, 4.0], vec![0.0, 2.0]]]);
        let t = c.level_table(0, 3);
        assert_eq!(t.dim(), (2, 3));
        // mean norm (5 + 2) / 2 = 3.5
        assert!((t[[0, 0]] - 3.0 / 3.5).abs() < 1e-15);
        assert_eq!(t[[0, 2]], 0.0);
        let narrow = c.level_table(0, 1);
        assert_eq!(narrow.dim(), (2, 1));
    }
}
