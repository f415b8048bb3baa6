//! Rehearsal buffer construction and the exemplar samplers.
//!
//! The main path builds similarity-weighted joint embeddings for a pool of
//! image-text pairs, clusters them with seeded k-means, and keeps the
//! pairs closest to each centroid. The buffer itself is fixed-capacity and
//! evenly partitioned across past modalities; when a new modality arrives,
//! each modality's overflow is evicted least-representative-first.
//! Baseline samplers (reservoir, herding) live here too so every strategy
//! shares one buffer implementation.
//!
//! Everything in this module is bookkeeping: no gradients flow through
//! exemplar selection.

use crate::alignment::SimilarityMatrix;
use crate::diffcore::tensor::{self, Tensor};
use crate::encoders::PairEncoder;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::synthstream::{image_batch, text_batch, ModalityGenerator, PairSample};

/// Joint embeddings for a batch of pairs, J_i = s * I_i + (1 - s) * T_i
/// with s = clamp(S_ii, 0, 1) on row-normalized embeddings.
#[derive(Debug, Clone)]
pub struct JointEmbeddingSet {
    pub vectors: Tensor,
    /// Index of the source pair for each row.
    pub pair_indices: Vec<usize>,
}

/// Convex combination of each normalized image/text embedding pair,
/// weighted by the (clamped) diagonal similarity. Strongly aligned pairs
/// lean on the image side, weakly aligned pairs on the text side.
pub fn joint_embeddings(
    image_norm: &Tensor,
    text_norm: &Tensor,
    s: &SimilarityMatrix,
) -> Result<JointEmbeddingSet> {
    let (n, d) = image_norm.dims2()?;
    let (n2, d2) = text_norm.dims2()?;
    if n != n2 || d != d2 || n != s.batch_size() {
        return Err(Error::Shape(format!(
            "joint embeddings over {n}x{d}, {n2}x{d2}, S {}",
            s.batch_size()
        )));
    }
    let mut data = Vec::with_capacity(n * d);
    for i in 0..n {
        let w = s.get(i, i).clamp(0.0, 1.0);
        let irow = image_norm.row(i);
        let trow = text_norm.row(i);
        for j in 0..d {
            data.push(w * irow[j] + (1.0 - w) * trow[j]);
        }
    }
    Ok(JointEmbeddingSet {
        vectors: Tensor::matrix(n, d, data)?,
        pair_indices: (0..n).collect(),
    })
}

// ── k-means ─────────────────────────────────────────────────────────

/// Output of [`kmeans`]: centroids, assignments, and total inertia.
#[derive(Debug, Clone)]
pub struct ClusterResult {
    pub centroids: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    pub k: usize,
    pub inertia: f64,
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid index, ties broken by lowest centroid index.
fn nearest_centroid(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (k, c) in centroids.iter().enumerate() {
        let d = squared_distance(point, c);
        if d < best_d {
            best_d = d;
            best = k;
        }
    }
    (best, best_d)
}

/// Seeded k-means++ initial centroids (first uniform, then D^2-weighted).
pub fn kmeanspp_init(points: &Tensor, k: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    let (n, _) = points.dims2()?;
    let mut rng = Rng::derive(seed, &[0x6b6d65616e73]);
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
    centroids.push(points.row(rng.uniform_usize(n)).to_vec());
    let mut d2: Vec<f64> = (0..n)
        .map(|i| squared_distance(points.row(i), &centroids[0]))
        .collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total <= 0.0 {
            // All remaining mass at distance zero: fall back to uniform.
            rng.uniform_usize(n)
        } else {
            let mut target = rng.uniform() * total;
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                target -= w;
                if target <= 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        };
        centroids.push(points.row(next).to_vec());
        for i in 0..n {
            d2[i] = d2[i].min(squared_distance(points.row(i), centroids.last().unwrap()));
        }
    }
    Ok(centroids)
}

/// Seeded k-means++ initialization followed by Lloyd iterations.
///
/// Terminates when assignments stabilize, when the largest centroid shift
/// drops below `tol`, or after `max_iters`. Empty clusters keep their
/// previous centroid. Deterministic for a fixed seed.
pub fn kmeans(points: &Tensor, k: usize, seed: u64, max_iters: usize, tol: f64) -> Result<ClusterResult> {
    let (n, d) = points.dims2()?;
    if k == 0 {
        return Err(Error::Parameter("k-means needs at least one cluster".into()));
    }
    if k > n {
        return Err(Error::Parameter(format!("k-means with K={k} over only {n} points")));
    }

    let mut centroids = kmeanspp_init(points, k, seed)?;

    let mut assignments = vec![0usize; n];
    for iter in 0..max_iters {
        let mut changed = false;
        for i in 0..n {
            let (a, _) = nearest_centroid(points.row(i), &centroids);
            if assignments[i] != a || iter == 0 {
                changed = assignments[i] != a || iter == 0;
                assignments[i] = a;
            }
        }

        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for (i, &a) in assignments.iter().enumerate() {
            counts[a] += 1;
            for (s, &v) in sums[a].iter_mut().zip(points.row(i)) {
                *s += v;
            }
        }
        let mut max_shift: f64 = 0.0;
        for c in 0..k {
            if counts[c] == 0 {
                continue;
            }
            let mut shift = 0.0;
            for j in 0..d {
                let nc = sums[c][j] / counts[c] as f64;
                shift += (nc - centroids[c][j]) * (nc - centroids[c][j]);
                centroids[c][j] = nc;
            }
            max_shift = max_shift.max(shift.sqrt());
        }

        if !changed || max_shift < tol {
            break;
        }
    }

    // Final assignment pass so the result is consistent with the returned
    // centroids.
    let mut inertia = 0.0;
    for i in 0..n {
        let (a, dist) = nearest_centroid(points.row(i), &centroids);
        assignments[i] = a;
        inertia += dist;
    }
    Ok(ClusterResult { centroids, assignments, k, inertia })
}

/// Per cluster, the `per_cluster` member points closest to the centroid
/// (ties by lowest point index); clusters smaller than `per_cluster`
/// contribute all their members. Returns (point index, distance-to-centroid
/// rank) pairs, cluster by cluster.
pub fn select_representatives(
    clusters: &ClusterResult,
    points: &Tensor,
    per_cluster: usize,
) -> Result<Vec<(usize, f64)>> {
    if per_cluster == 0 {
        return Err(Error::Parameter("per_cluster must be at least 1".into()));
    }
    let mut selected = Vec::new();
    for c in 0..clusters.k {
        let mut members: Vec<(usize, f64)> = clusters
            .assignments
            .iter()
            .enumerate()
            .filter(|(_, &a)| a == c)
            .map(|(i, _)| (i, squared_distance(points.row(i), &clusters.centroids[c]).sqrt()))
            .collect();
        members.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
        selected.extend(members.into_iter().take(per_cluster));
    }
    Ok(selected)
}

// ── Rehearsal buffer ────────────────────────────────────────────────

/// One stored exemplar pair.
#[derive(Debug, Clone, PartialEq)]
pub struct BufferEntry {
    pub sample: PairSample,
    /// Representativeness rank: distance to the selecting centroid for
    /// k-means exemplars, selection order for the baseline samplers.
    /// Larger = less representative = evicted first.
    pub rank: f64,
}

/// Fixed-capacity store of past-modality pairs, evenly partitioned across
/// modalities after every rebalance.
#[derive(Debug, Clone, PartialEq)]
pub struct RehearsalBuffer {
    capacity: usize,
    entries: Vec<BufferEntry>,
}

impl RehearsalBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Parameter("buffer capacity must be positive".into()));
        }
        Ok(RehearsalBuffer { capacity, entries: Vec::new() })
    }

    /// Rebuild from stored entries (checkpoint load).
    pub fn from_entries(capacity: usize, entries: Vec<BufferEntry>) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Parameter("buffer capacity must be positive".into()));
        }
        if entries.len() > capacity {
            return Err(Error::Contract(format!(
                "{} entries exceed buffer capacity {capacity}",
                entries.len()
            )));
        }
        Ok(RehearsalBuffer { capacity, entries })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[BufferEntry] {
        &self.entries
    }

    /// Modality ids currently present, ascending (arrival order).
    pub fn modalities(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.entries.iter().map(|e| e.sample.modality_id).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    pub fn count_for(&self, modality_id: u32) -> usize {
        self.entries.iter().filter(|e| e.sample.modality_id == modality_id).count()
    }

    /// Even split of the capacity over `m` modalities; earlier slots get
    /// the remainder first.
    pub fn quotas(capacity: usize, m: usize) -> Vec<usize> {
        let base = capacity / m;
        let rem = capacity % m;
        (0..m).map(|i| base + usize::from(i < rem)).collect()
    }

    /// Admit a new modality's exemplars and rebalance: quotas are the even
    /// split over all modalities now present (earlier modalities padded
    /// first), and each modality keeps its lowest-rank entries.
    pub fn rebalance(&mut self, new_exemplars: Vec<BufferEntry>, modality_id: u32) {
        self.entries.retain(|e| e.sample.modality_id != modality_id);
        let mut ids = self.modalities();
        ids.push(modality_id);
        ids.sort_unstable();
        ids.dedup();

        let quotas = Self::quotas(self.capacity, ids.len());
        let mut kept = Vec::with_capacity(self.capacity);
        for (slot, &id) in ids.iter().enumerate() {
            let mut group: Vec<BufferEntry> = if id == modality_id {
                new_exemplars.iter().filter(|e| e.sample.modality_id == id).cloned().collect()
            } else {
                self.entries.iter().filter(|e| e.sample.modality_id == id).cloned().collect()
            };
            // Stable by rank: least representative (largest rank) dropped first.
            group.sort_by(|a, b| a.rank.partial_cmp(&b.rank).unwrap());
            group.truncate(quotas[slot]);
            kept.extend(group);
        }
        self.entries = kept;
    }
}

/// Classic reservoir update: the first `capacity` items are always stored;
/// afterwards item number `n_seen` replaces a uniform slot with probability
/// capacity / n_seen.
pub fn reservoir_update(
    reservoir: &mut Vec<PairSample>,
    capacity: usize,
    item: PairSample,
    n_seen: usize,
    rng: &mut Rng,
) {
    assert!(n_seen >= 1, "n_seen counts from 1");
    if reservoir.len() < capacity {
        reservoir.push(item);
    } else {
        let j = rng.uniform_usize(n_seen);
        if j < capacity {
            reservoir[j] = item;
        }
    }
}

/// Herding / mean-of-features selection: greedily pick points so the mean
/// of the selected set tracks the full feature mean. Ties by lowest index.
pub fn mof_select(features: &Tensor, quota: usize) -> Result<Vec<usize>> {
    let (n, d) = features.dims2()?;
    if quota > n {
        return Err(Error::Parameter(format!("herding quota {quota} over only {n} points")));
    }
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, &v) in mean.iter_mut().zip(features.row(i)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);

    let mut selected: Vec<usize> = Vec::with_capacity(quota);
    let mut running_sum = vec![0.0; d];
    let mut taken = vec![false; n];
    for step in 0..quota {
        let denom = (step + 1) as f64;
        let mut best: Option<(usize, f64)> = None;
        for i in 0..n {
            if taken[i] {
                continue;
            }
            let row = features.row(i);
            let mut err = 0.0;
            for j in 0..d {
                let candidate_mean = (running_sum[j] + row[j]) / denom;
                err += (mean[j] - candidate_mean) * (mean[j] - candidate_mean);
            }
            if best.map_or(true, |(_, e)| err < e) {
                best = Some((i, err));
            }
        }
        let (pick, _) = best.unwrap();
        taken[pick] = true;
        selected.push(pick);
        for (s, &v) in running_sum.iter_mut().zip(features.row(pick)) {
            *s += v;
        }
    }
    Ok(selected)
}

/// Mixed training batch: round(rho * n) pairs drawn uniformly with
/// replacement from the buffer, the rest fresh from the current stage's
/// generator, order shuffled. An empty buffer with rho > 0 falls back to
/// an all-current batch (reported via the returned flag, not an error).
pub fn sample_mixed_batch(
    buffer: &RehearsalBuffer,
    current: &ModalityGenerator,
    n: usize,
    replay_fraction: f64,
    rng: &mut Rng,
) -> Result<(Vec<PairSample>, bool)> {
    if !(0.0..1.0).contains(&replay_fraction) {
        return Err(Error::Parameter(format!(
            "replay fraction must be in [0, 1), got {replay_fraction}"
        )));
    }
    if n == 0 {
        return Err(Error::Parameter("batch size must be positive".into()));
    }
    let mut fell_back = false;
    let n_replay = if buffer.is_empty() {
        fell_back = replay_fraction > 0.0;
        0
    } else {
        (replay_fraction * n as f64).round() as usize
    };
    let mut batch = Vec::with_capacity(n);
    for _ in 0..n_replay {
        let idx = rng.uniform_usize(buffer.len());
        batch.push(buffer.entries()[idx].sample.clone());
    }
    for _ in n_replay..n {
        batch.push(current.sample_one(rng));
    }
    rng.shuffle(&mut batch);
    Ok((batch, fell_back))
}

/// Build one stage's exemplar list: encode the pool, form joint
/// embeddings, cluster with K centroids, keep ceil(quota / K) per cluster,
/// and truncate to exactly `quota` by ascending rank.
pub fn build_stage_exemplars<E: PairEncoder>(
    pool: &[PairSample],
    encoders: &E,
    quota: usize,
    k: usize,
    seed: u64,
) -> Result<Vec<BufferEntry>> {
    if pool.is_empty() {
        return Err(Error::Contract("exemplar pool is empty".into()));
    }
    if quota == 0 || quota > pool.len() {
        return Err(Error::Parameter(format!(
            "quota {quota} must be in 1..={}",
            pool.len()
        )));
    }
    if k == 0 || k > quota {
        return Err(Error::Parameter(format!("cluster count {k} must be in 1..={quota}")));
    }

    let images = encoders.embed_images(&image_batch(pool)?)?;
    let texts = encoders.embed_texts(&text_batch(pool)?)?;
    let (inorm, _) = tensor::l2_normalize_rows(&images)?;
    let (tnorm, _) = tensor::l2_normalize_rows(&texts)?;
    let s = crate::alignment::SimilarityMatrix::new(tensor::matmul(
        &inorm,
        &tensor::transpose(&tnorm)?,
    )?)?;
    let joints = joint_embeddings(&inorm, &tnorm, &s)?;

    let clusters = kmeans(&joints.vectors, k, seed, 100, 1e-8)?;
    let per_cluster = quota.div_ceil(k);
    let mut picks = select_representatives(&clusters, &joints.vectors, per_cluster)?;
    picks.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
    picks.truncate(quota);

    Ok(picks
        .into_iter()
        .map(|(i, rank)| BufferEntry { sample: pool[i].clone(), rank })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::{chi_square_sf, chi_square_stat};

    fn entry(modality_id: u32, rank: f64) -> BufferEntry {
        BufferEntry {
            sample: PairSample {
                image: vec![rank],
                text: vec![rank],
                class_label: modality_id * 1000,
                modality_id,
            },
            rank,
        }
    }

    fn points(data: Vec<f64>, d: usize) -> Tensor {
        let n = data.len() / d;
        Tensor::matrix(n, d, data).unwrap()
    }

    // ── joint embeddings ────────────────────────────────────────────

    fn unit_rows(n: usize, d: usize, seed: u64) -> Tensor {
        let mut rng = Rng::from_seed(seed);
        let data: Vec<f64> = (0..n * d).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
        let (t, _) = tensor::l2_normalize_rows(&Tensor::matrix(n, d, data).unwrap()).unwrap();
        t
    }

    fn diag_similarity(diag: &[f64]) -> SimilarityMatrix {
        let n = diag.len();
        let mut data = vec![0.0; n * n];
        for (i, &v) in diag.iter().enumerate() {
            data[i * n + i] = v;
        }
        SimilarityMatrix::new(Tensor::matrix(n, n, data).unwrap()).unwrap()
    }

    #[test]
    fn joint_boundary_cases() {
        let i = unit_rows(3, 4, 41);
        let t = unit_rows(3, 4, 42);
        let s = diag_similarity(&[1.0, 0.0, 0.5]);
        let j = joint_embeddings(&i, &t, &s).unwrap();
        assert_eq!(j.vectors.row(0), i.row(0));
        assert_eq!(j.vectors.row(1), t.row(1));
        for k in 0..4 {
            let mid = 0.5 * i.row(2)[k] + 0.5 * t.row(2)[k];
            assert!((j.vectors.row(2)[k] - mid).abs() < 1e-15);
        }
    }

    #[test]
    fn joint_clamps_negative_similarity_to_text() {
        let i = unit_rows(1, 4, 43);
        let t = unit_rows(1, 4, 44);
        let s = diag_similarity(&[-0.8]);
        let j = joint_embeddings(&i, &t, &s).unwrap();
        assert_eq!(j.vectors.row(0), t.row(0));
    }

    #[test]
    fn joint_lies_on_segment() {
        let mut rng = Rng::from_seed(45);
        for _ in 0..50 {
            let i = unit_rows(4, 5, rng.next_u64());
            let t = unit_rows(4, 5, rng.next_u64());
            let diag: Vec<f64> = (0..4).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
            let s = diag_similarity(&diag);
            let j = joint_embeddings(&i, &t, &s).unwrap();
            for r in 0..4 {
                let w = diag[r].clamp(0.0, 1.0);
                for c in 0..5 {
                    let expect = w * i.row(r)[c] + (1.0 - w) * t.row(r)[c];
                    assert!((j.vectors.row(r)[c] - expect).abs() < 1e-12);
                }
            }
        }
    }

    // ── k-means ─────────────────────────────────────────────────────

    #[test]
    fn kmeans_every_point_its_own_centroid() {
        let p = points(vec![0.0, 0.0, 1.0, 1.0, 2.0, 0.0, 3.0, 3.0], 2);
        let r = kmeans(&p, 4, 7, 100, 1e-8).unwrap();
        assert!(r.inertia < 1e-24);
        let mut seen = r.assignments.clone();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 4);
    }

    #[test]
    fn kmeans_two_separated_pairs() {
        let p = points(vec![0.0, 0.0, 0.2, 0.0, 10.0, 0.0, 10.2, 0.0], 2);
        let r = kmeans(&p, 2, 3, 100, 1e-8).unwrap();
        let mut centroid_xs: Vec<f64> = r.centroids.iter().map(|c| c[0]).collect();
        centroid_xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!((centroid_xs[0] - 0.1).abs() < 1e-12);
        assert!((centroid_xs[1] - 10.1).abs() < 1e-12);
        assert_eq!(r.assignments[0], r.assignments[1]);
        assert_eq!(r.assignments[2], r.assignments[3]);
        assert_ne!(r.assignments[0], r.assignments[2]);
    }

    #[test]
    fn kmeans_rejects_bad_k() {
        let p = points(vec![0.0, 1.0, 2.0], 1);
        assert!(matches!(kmeans(&p, 0, 1, 10, 1e-8), Err(Error::Parameter(_))));
        assert!(matches!(kmeans(&p, 4, 1, 10, 1e-8), Err(Error::Parameter(_))));
    }

    #[test]
    fn kmeans_is_deterministic() {
        let mut rng = Rng::from_seed(46);
        let data: Vec<f64> = (0..40).map(|_| rng.uniform_range(-2.0, 2.0)).collect();
        let p = points(data, 2);
        let a = kmeans(&p, 3, 5, 100, 1e-8).unwrap();
        let b = kmeans(&p, 3, 5, 100, 1e-8).unwrap();
        assert_eq!(a.assignments, b.assignments);
        assert_eq!(a.centroids, b.centroids);
    }

    #[test]
    fn kmeans_terminates_at_lloyd_fixed_point() {
        let mut rng = Rng::from_seed(47);
        for trial in 0..20 {
            let n = 5 + rng.uniform_usize(10);
            let data: Vec<f64> = (0..n * 3).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
            let p = points(data, 3);
            let k = 1 + rng.uniform_usize(3.min(n));
            let r = kmeans(&p, k, trial, 200, 1e-10).unwrap();
            // every point assigned to its nearest centroid
            for i in 0..n {
                let (a, _) = nearest_centroid(p.row(i), &r.centroids);
                assert_eq!(r.assignments[i], a, "trial {trial} point {i}");
            }
            // every nonempty centroid is the mean of its members
            for c in 0..k {
                let members: Vec<usize> =
                    (0..n).filter(|&i| r.assignments[i] == c).collect();
                if members.is_empty() {
                    continue;
                }
                for j in 0..3 {
                    let mean: f64 =
                        members.iter().map(|&i| p.row(i)[j]).sum::<f64>() / members.len() as f64;
                    assert!((mean - r.centroids[c][j]).abs() < 1e-7, "trial {trial}");
                }
            }
        }
    }

    #[test]
    fn kmeans_matches_naive_lloyd_oracle_from_same_init() {
        // Independent oracle: plain assign/update loop run to an exact
        // fixed point from the same k-means++ initial centroids.
        let mut rng = Rng::from_seed(64);
        for trial in 0..50u64 {
            let n = 4 + rng.uniform_usize(5);
            let d = 2 + rng.uniform_usize(2);
            let k = 1 + rng.uniform_usize(3.min(n));
            let data: Vec<f64> = (0..n * d).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
            let p = points(data, d);

            let ours = kmeans(&p, k, trial, 200, 1e-12).unwrap();

            let mut centroids = kmeanspp_init(&p, k, trial).unwrap();
            loop {
                let assign: Vec<usize> =
                    (0..n).map(|i| nearest_centroid(p.row(i), &centroids).0).collect();
                let mut sums = vec![vec![0.0; d]; k];
                let mut counts = vec![0usize; k];
                for (i, &a) in assign.iter().enumerate() {
                    counts[a] += 1;
                    for j in 0..d {
                        sums[a][j] += p.row(i)[j];
                    }
                }
                let mut moved = false;
                for c in 0..k {
                    if counts[c] == 0 {
                        continue;
                    }
                    for j in 0..d {
                        let nc = sums[c][j] / counts[c] as f64;
                        if (nc - centroids[c][j]).abs() > 0.0 {
                            moved = true;
                        }
                        centroids[c][j] = nc;
                    }
                }
                if !moved {
                    break;
                }
            }
            let oracle_inertia: f64 =
                (0..n).map(|i| nearest_centroid(p.row(i), &centroids).1).sum();
            assert!(
                ours.inertia <= oracle_inertia + 1e-9,
                "trial {trial}: {} > oracle {oracle_inertia}",
                ours.inertia
            );
        }
    }

    #[test]
    fn kmeans_inertia_non_increasing_over_iteration_budget() {
        let mut rng = Rng::from_seed(48);
        let data: Vec<f64> = (0..60).map(|_| rng.uniform_range(-2.0, 2.0)).collect();
        let p = points(data, 2);
        let mut prev = f64::INFINITY;
        for iters in 1..8 {
            let r = kmeans(&p, 4, 9, iters, 0.0).unwrap();
            assert!(r.inertia <= prev + 1e-12, "iters {iters}: {} > {prev}", r.inertia);
            prev = r.inertia;
        }
    }

    // ── representative selection ────────────────────────────────────

    #[test]
    fn select_all_when_k_equals_n() {
        let p = points(vec![0.0, 1.0, 2.0, 5.0], 1);
        let r = kmeans(&p, 4, 1, 100, 1e-8).unwrap();
        let sel = select_representatives(&r, &p, 1).unwrap();
        let mut idx: Vec<usize> = sel.iter().map(|(i, _)| *i).collect();
        idx.sort_unstable();
        assert_eq!(idx, vec![0, 1, 2, 3]);
    }

    #[test]
    fn collinear_middle_point_selected() {
        let p = points(vec![0.0, 1.0, 2.0], 1);
        let r = ClusterResult {
            centroids: vec![vec![1.0]],
            assignments: vec![0, 0, 0],
            k: 1,
            inertia: 2.0,
        };
        let sel = select_representatives(&r, &p, 1).unwrap();
        assert_eq!(sel.len(), 1);
        assert_eq!(sel[0].0, 1);
        assert_eq!(sel[0].1, 0.0);
    }

    #[test]
    fn small_cluster_contributes_all_members() {
        let p = points(vec![0.0, 0.1, 10.0], 1);
        let r = kmeans(&p, 2, 2, 100, 1e-8).unwrap();
        let sel = select_representatives(&r, &p, 5).unwrap();
        assert_eq!(sel.len(), 3);
    }

    #[test]
    fn selection_invariant_to_input_ordering() {
        // Reversing the point order (and remapping assignments) must pick
        // the same points; distances here are distinct so tie-breaks never
        // fire.
        let mut rng = Rng::from_seed(66);
        let n = 12;
        let data: Vec<f64> = (0..n * 2).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
        let p = points(data.clone(), 2);
        let clusters = kmeans(&p, 3, 4, 100, 1e-10).unwrap();
        let sel = select_representatives(&clusters, &p, 2).unwrap();

        let mut reversed = Vec::new();
        for i in (0..n).rev() {
            reversed.extend_from_slice(p.row(i));
        }
        let p_rev = points(reversed, 2);
        let clusters_rev = ClusterResult {
            centroids: clusters.centroids.clone(),
            assignments: clusters.assignments.iter().rev().copied().collect(),
            k: clusters.k,
            inertia: clusters.inertia,
        };
        let sel_rev = select_representatives(&clusters_rev, &p_rev, 2).unwrap();

        let mut chosen: Vec<Vec<f64>> = sel.iter().map(|(i, _)| p.row(*i).to_vec()).collect();
        let mut chosen_rev: Vec<Vec<f64>> =
            sel_rev.iter().map(|(i, _)| p_rev.row(*i).to_vec()).collect();
        let key = |v: &Vec<f64>| (v[0].to_bits(), v[1].to_bits());
        chosen.sort_by_key(key);
        chosen_rev.sort_by_key(key);
        assert_eq!(chosen, chosen_rev);
    }

    #[test]
    fn selection_matches_brute_force_oracle() {
        let mut rng = Rng::from_seed(49);
        for trial in 0..30 {
            let data: Vec<f64> = (0..20 * 3).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
            let p = points(data, 3);
            let r = kmeans(&p, 4, trial, 100, 1e-8).unwrap();
            let sel = select_representatives(&r, &p, 2).unwrap();
            // oracle: per cluster, enumerate members and take the 2 smallest
            // distances (ties by index)
            let mut oracle = Vec::new();
            for c in 0..4 {
                let mut members: Vec<(usize, f64)> = (0..20)
                    .filter(|&i| r.assignments[i] == c)
                    .map(|i| (i, squared_distance(p.row(i), &r.centroids[c]).sqrt()))
                    .collect();
                members.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
                oracle.extend(members.into_iter().take(2).map(|(i, _)| i));
            }
            let got: Vec<usize> = sel.iter().map(|(i, _)| *i).collect();
            assert_eq!(got, oracle, "trial {trial}");
        }
    }

    // ── buffer ──────────────────────────────────────────────────────

    #[test]
    fn quotas_split_evenly_with_earlier_remainder() {
        assert_eq!(RehearsalBuffer::quotas(12, 1), vec![12]);
        assert_eq!(RehearsalBuffer::quotas(12, 2), vec![6, 6]);
        assert_eq!(RehearsalBuffer::quotas(12, 3), vec![4, 4, 4]);
        assert_eq!(RehearsalBuffer::quotas(10, 2), vec![5, 5]);
        assert_eq!(RehearsalBuffer::quotas(10, 3), vec![4, 3, 3]);
    }

    #[test]
    fn rebalance_keeps_most_representative() {
        let mut buf = RehearsalBuffer::new(4).unwrap();
        buf.rebalance((0..4).map(|i| entry(1, i as f64)).collect(), 1);
        assert_eq!(buf.len(), 4);
        // second modality: quotas 2 + 2, modality 1 keeps ranks 0 and 1
        buf.rebalance((0..2).map(|i| entry(2, 10.0 + i as f64)).collect(), 2);
        assert_eq!(buf.count_for(1), 2);
        assert_eq!(buf.count_for(2), 2);
        let kept: Vec<f64> = buf
            .entries()
            .iter()
            .filter(|e| e.sample.modality_id == 1)
            .map(|e| e.rank)
            .collect();
        assert_eq!(kept, vec![0.0, 1.0]);
    }

    #[test]
    fn rebalance_counts_differ_by_at_most_one() {
        let mut buf = RehearsalBuffer::new(10).unwrap();
        for m in 1..=3u32 {
            buf.rebalance((0..10).map(|i| entry(m, i as f64)).collect(), m);
            let counts: Vec<usize> = buf.modalities().iter().map(|&id| buf.count_for(id)).collect();
            let max = *counts.iter().max().unwrap();
            let min = *counts.iter().min().unwrap();
            assert!(max - min <= 1, "counts {counts:?}");
            assert!(buf.len() <= 10);
        }
        assert_eq!(buf.count_for(1), 4);
        assert_eq!(buf.count_for(2), 3);
        assert_eq!(buf.count_for(3), 3);
    }

    // ── reservoir ───────────────────────────────────────────────────

    #[test]
    fn reservoir_keeps_first_capacity_items() {
        let mut rng = Rng::from_seed(50);
        let mut res = Vec::new();
        for i in 1..=5 {
            reservoir_update(&mut res, 5, entry(1, i as f64).sample, i, &mut rng);
        }
        assert_eq!(res.len(), 5);
        for (i, s) in res.iter().enumerate() {
            assert_eq!(s.image[0], (i + 1) as f64);
        }
    }

    #[test]
    fn reservoir_inclusion_frequencies_pass_chi_square() {
        // Stream 1000 items through a 50-slot reservoir, 10000 trials.
        let capacity = 50;
        let stream = 1000;
        let trials = 10_000;
        let mut rng = Rng::from_seed(51);
        let mut counts = vec![0.0f64; stream];
        for _ in 0..trials {
            let mut res: Vec<PairSample> = Vec::with_capacity(capacity);
            for i in 0..stream {
                let sample = PairSample {
                    image: vec![i as f64],
                    text: vec![],
                    class_label: 0,
                    modality_id: 1,
                };
                reservoir_update(&mut res, capacity, sample, i + 1, &mut rng);
            }
            for s in &res {
                counts[s.image[0] as usize] += 1.0;
            }
        }
        let expected = vec![trials as f64 * capacity as f64 / stream as f64; stream];
        let stat = chi_square_stat(&counts, &expected);
        let p = chi_square_sf(stat, (stream - 1) as f64);
        assert!(p > 0.01, "stat {stat}, p {p}");
    }

    // ── herding ─────────────────────────────────────────────────────

    #[test]
    fn herding_first_pick_is_nearest_to_mean() {
        let p = points(vec![0.0, 0.0, 4.0, 0.0, 2.1, 0.0, 0.0, 4.0], 2);
        // mean = (1.525, 1.0); closest single point is (2.1, 0.0)
        let sel = mof_select(&p, 1).unwrap();
        assert_eq!(sel, vec![2]);
    }

    #[test]
    fn herding_identical_points_tie_break_by_index() {
        let p = points(vec![1.0; 8], 2);
        let sel = mof_select(&p, 3).unwrap();
        assert_eq!(sel, vec![0, 1, 2]);
    }

    #[test]
    fn herding_matches_greedy_reevaluation_oracle() {
        let mut rng = Rng::from_seed(52);
        for trial in 0..50 {
            let data: Vec<f64> = (0..6 * 3).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
            let p = points(data, 3);
            let got = mof_select(&p, 3).unwrap();

            // oracle: recompute the full candidate mean each step
            let mut mean = [0.0; 3];
            for i in 0..6 {
                for j in 0..3 {
                    mean[j] += p.row(i)[j] / 6.0;
                }
            }
            let mut chosen: Vec<usize> = Vec::new();
            for _ in 0..3 {
                let mut best: Option<(usize, f64)> = None;
                for cand in 0..6 {
                    if chosen.contains(&cand) {
                        continue;
                    }
                    let mut trial_set = chosen.clone();
                    trial_set.push(cand);
                    let mut err = 0.0;
                    for j in 0..3 {
                        let m: f64 = trial_set.iter().map(|&i| p.row(i)[j]).sum::<f64>()
                            / trial_set.len() as f64;
                        err += (mean[j] - m) * (mean[j] - m);
                    }
                    if best.map_or(true, |(_, e)| err < e) {
                        best = Some((cand, err));
                    }
                }
                chosen.push(best.unwrap().0);
            }
            assert_eq!(got, chosen, "trial {trial}");
        }
    }

    #[test]
    fn herding_rejects_oversized_quota() {
        let p = points(vec![0.0, 1.0], 1);
        assert!(matches!(mof_select(&p, 3), Err(Error::Parameter(_))));
    }

    // ── mixed batches ───────────────────────────────────────────────

    fn tiny_generator(seed: u64) -> ModalityGenerator {
        // image_dim == text_dim so the identity RawEncoder below is a
        // valid shared-space embedder.
        crate::synthstream::build_modality(&crate::synthstream::ModalitySpec {
            modality_id: 9,
            n_classes: 3,
            latent_dim: 4,
            image_dim: 5,
            text_dim: 5,
            noise_sigma: 0.1,
            generator_seed: seed,
        })
        .unwrap()
    }

    #[test]
    fn zero_replay_fraction_is_all_current() {
        let buf = RehearsalBuffer::new(8).unwrap();
        let gen = tiny_generator(1);
        let mut rng = Rng::from_seed(53);
        let (batch, fell_back) = sample_mixed_batch(&buf, &gen, 12, 0.0, &mut rng).unwrap();
        assert!(!fell_back);
        assert_eq!(batch.len(), 12);
        assert!(batch.iter().all(|s| s.modality_id == 9));
    }

    #[test]
    fn half_replay_splits_batch() {
        let mut buf = RehearsalBuffer::new(8).unwrap();
        buf.rebalance((0..8).map(|i| entry(1, i as f64)).collect(), 1);
        let gen = tiny_generator(2);
        let mut rng = Rng::from_seed(54);
        let (batch, fell_back) = sample_mixed_batch(&buf, &gen, 24, 0.5, &mut rng).unwrap();
        assert!(!fell_back);
        let replayed = batch.iter().filter(|s| s.modality_id == 1).count();
        let current = batch.iter().filter(|s| s.modality_id == 9).count();
        assert_eq!(replayed, 12);
        assert_eq!(current, 12);
    }

    #[test]
    fn empty_buffer_falls_back_to_current() {
        let buf = RehearsalBuffer::new(8).unwrap();
        let gen = tiny_generator(3);
        let mut rng = Rng::from_seed(55);
        let (batch, fell_back) = sample_mixed_batch(&buf, &gen, 10, 0.25, &mut rng).unwrap();
        assert!(fell_back);
        assert!(batch.iter().all(|s| s.modality_id == 9));
    }

    #[test]
    fn replay_draws_match_buffer_composition() {
        // Uneven modality mix in the buffer; replayed frequencies should
        // match the realized composition.
        let mut entries: Vec<BufferEntry> = (0..6).map(|i| entry(1, i as f64)).collect();
        entries.extend((0..2).map(|i| entry(2, i as f64)));
        let mut buf = RehearsalBuffer::new(8).unwrap();
        buf.rebalance(entries[..6].to_vec(), 1);
        buf.rebalance(entries[6..].to_vec(), 2);
        let m1 = buf.count_for(1) as f64;
        let m2 = buf.count_for(2) as f64;
        let gen = tiny_generator(4);
        let mut rng = Rng::from_seed(56);
        let mut counts = [0.0f64; 2];
        let draws = 10_000;
        let mut drawn = 0.0;
        for _ in 0..draws / 10 {
            let (batch, _) = sample_mixed_batch(&buf, &gen, 20, 0.5, &mut rng).unwrap();
            for s in batch.iter().filter(|s| s.modality_id != 9) {
                counts[(s.modality_id - 1) as usize] += 1.0;
                drawn += 1.0;
            }
        }
        let total = m1 + m2;
        let expected = [drawn * m1 / total, drawn * m2 / total];
        let stat = chi_square_stat(&counts, &expected);
        let p = chi_square_sf(stat, 1.0);
        assert!(p > 0.01, "stat {stat}, p {p}");
    }

    #[test]
    fn mixed_batch_rejects_bad_fraction() {
        let buf = RehearsalBuffer::new(4).unwrap();
        let gen = tiny_generator(5);
        let mut rng = Rng::from_seed(57);
        assert!(sample_mixed_batch(&buf, &gen, 8, 1.0, &mut rng).is_err());
        assert!(sample_mixed_batch(&buf, &gen, 8, -0.1, &mut rng).is_err());
    }

    // ── stage exemplars ─────────────────────────────────────────────

    struct RawEncoder;

    impl PairEncoder for RawEncoder {
        fn embed_images(&self, batch: &Tensor) -> crate::error::Result<Tensor> {
            Ok(batch.clone())
        }
        fn embed_texts(&self, batch: &Tensor) -> crate::error::Result<Tensor> {
            Ok(batch.clone())
        }
    }

    #[test]
    fn pool_of_quota_size_returned_verbatim() {
        let gen = tiny_generator(6);
        let mut rng = Rng::from_seed(58);
        let pool = gen.sample_pairs(6, &mut rng).unwrap();
        let ex = build_stage_exemplars(&pool, &RawEncoder, 6, 6, 1).unwrap();
        assert_eq!(ex.len(), 6);
        let mut images: Vec<f64> = ex.iter().map(|e| e.sample.image[0]).collect();
        let mut expect: Vec<f64> = pool.iter().map(|s| s.image[0]).collect();
        images.sort_by(|a, b| a.partial_cmp(b).unwrap());
        expect.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(images, expect);
    }

    #[test]
    fn exemplars_deterministic_for_fixed_seed() {
        let gen = tiny_generator(7);
        let mut rng = Rng::from_seed(59);
        let pool = gen.sample_pairs(40, &mut rng).unwrap();
        let a = build_stage_exemplars(&pool, &RawEncoder, 8, 4, 3).unwrap();
        let b = build_stage_exemplars(&pool, &RawEncoder, 8, 4, 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn exemplars_truncate_to_quota_by_rank() {
        let gen = tiny_generator(8);
        let mut rng = Rng::from_seed(60);
        let pool = gen.sample_pairs(50, &mut rng).unwrap();
        let ex = build_stage_exemplars(&pool, &RawEncoder, 7, 4, 5).unwrap();
        assert_eq!(ex.len(), 7);
    }

    #[test]
    fn empty_pool_is_contract_error() {
        assert!(matches!(
            build_stage_exemplars(&[], &RawEncoder, 1, 1, 1),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn exemplar_class_coverage_over_seeds() {
        // 64-pair pools from a 4-class generator; 8 exemplars over 4
        // clusters should cover at least 3 latent classes nearly always.
        let spec = crate::synthstream::ModalitySpec {
            modality_id: 1,
            n_classes: 4,
            latent_dim: 6,
            image_dim: 10,
            text_dim: 10,
            noise_sigma: 0.1,
            generator_seed: 77,
        };
        let gen = crate::synthstream::build_modality(&spec).unwrap();
        let mut covered = 0;
        for seed in 0..100u64 {
            let mut rng = Rng::from_seed(1000 + seed);
            let pool = gen.sample_pairs(64, &mut rng).unwrap();
            let ex = build_stage_exemplars(&pool, &RawEncoder, 8, 4, seed).unwrap();
            let mut classes: Vec<u32> = ex.iter().map(|e| e.sample.class_label).collect();
            classes.sort_unstable();
            classes.dedup();
            if classes.len() >= 3 {
                covered += 1;
            }
        }
        assert!(covered >= 90, "class coverage in only {covered}/100 seeds");
    }
}

