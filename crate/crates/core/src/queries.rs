//! Pillar queries and the dynamic merge / remove / split update.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::config::QueryInitConfig;
use crate::error::{Error, Result};
use crate::kernels::ops::sigmoid;
use crate::kernels::{Graph, ParamId, ParamStore, Tape, Tensor, Var};
use crate::nn::{normal_tensor, Linear, Mlp2};

/// Lower bound kept on box extents after an additive update.
pub const MIN_SIZE: f64 = 0.1;

/// Wraps an angle into `(-π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r -= 2.0 * PI;
    }
    r
}

/// A 3D box in the reference ego frame. `z` is the bottom face; the box
/// center sits at `z + h/2`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryBox {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub w: f64,
    pub l: f64,
    pub h: f64,
    pub theta: f64,
    pub vx: f64,
    pub vy: f64,
}

impl QueryBox {
    pub const PARAMS: usize = 9;
    pub const ENCODING: usize = 10;

    pub fn to_array(&self) -> [f64; 9] {
        [self.x, self.y, self.z, self.w, self.l, self.h, self.theta, self.vx, self.vy]
    }

    pub fn from_array(a: [f64; 9]) -> Self {
        Self {
            x: a[0],
            y: a[1],
            z: a[2],
            w: a[3],
            l: a[4],
            h: a[5],
            theta: a[6],
            vx: a[7],
            vy: a[8],
        }
    }

    pub fn center(&self) -> [f64; 3] {
        [self.x, self.y, self.z + 0.5 * self.h]
    }

    /// Normalised features for the positional encoding.
    pub fn encode(&self) -> [f64; 10] {
        [
            self.x / 50.0,
            self.y / 50.0,
            self.z / 5.0,
            self.w / 5.0,
            self.l / 10.0,
            self.h / 5.0,
            self.theta.cos(),
            self.theta.sin(),
            self.vx / 10.0,
            self.vy / 10.0,
        ]
    }

    /// Adds `deltas` (9 values, same order as [`QueryBox::to_array`]); the
    /// angle is wrapped and extents kept above [`MIN_SIZE`].
    pub fn apply_deltas(&self, d: &[f64]) -> Self {
        let a = self.to_array();
        let mut out = [0.0; 9];
        for i in 0..9 {
            out[i] = a[i] + d[i];
        }
        for s in &mut out[3..6] {
            *s = s.max(MIN_SIZE);
        }
        out[6] = wrap_angle(out[6]);
        Self::from_array(out)
    }
}

/// Merge labels above this pair a query with its partner.
pub const MERGE_THRESHOLD: f64 = 0.5;
pub const REMOVE_MIN: f64 = 0.2;
pub const REMOVE_MAX: f64 = 0.3;
/// Upper bound of the split percentage.
pub const SPLIT_MAX_PERCENT: f64 = 5.0;
/// Added to the covariance diagonal before taking the off-diagonal row max.
const DIAG_MASK: f64 = -1e12;

/// The live query set: boxes (values) and features (on the tape).
#[derive(Clone, Debug)]
pub struct QuerySet<'t> {
    pub boxes: Vec<QueryBox>,
    pub features: Var<'t>,
    pub floor: usize,
    pub layer: usize,
}

impl QuerySet<'_> {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.value().last_dim()
    }
}

/// Pillar boxes: `z = 0`, fixed height, zero velocity, the rest Gaussian.
pub fn init_boxes(n: usize, cfg: &QueryInitConfig, seed: u64) -> Vec<QueryBox> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xy = Normal::new(0.0, cfg.xy_std).unwrap();
    let w = Normal::new(cfg.size_mean[0], cfg.size_std).unwrap();
    let l = Normal::new(cfg.size_mean[1], cfg.size_std).unwrap();
    let th = Normal::new(0.0, cfg.theta_std).unwrap();
    (0..n)
        .map(|_| QueryBox {
            x: xy.sample(&mut rng),
            y: xy.sample(&mut rng),
            z: 0.0,
            w: w.sample(&mut rng).max(MIN_SIZE),
            l: l.sample(&mut rng).max(MIN_SIZE),
            h: cfg.height,
            theta: wrap_angle(th.sample(&mut rng)),
            vx: 0.0,
            vy: 0.0,
        })
        .collect()
}

/// Fresh query set with constant features drawn from `N(0, feature_std²)`.
pub fn init_queries<'t>(
    tape: &'t Tape,
    n: usize,
    dim: usize,
    floor: usize,
    cfg: &QueryInitConfig,
    seed: u64,
) -> Result<QuerySet<'t>> {
    if n == 0 || dim == 0 {
        return Err(Error::contract("init_queries needs n ≥ 1 and dim ≥ 1"));
    }
    let boxes = init_boxes(n, cfg, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xF00D);
    let features = tape.constant(normal_tensor(&[n, dim], cfg.feature_std, &mut rng));
    Ok(QuerySet {
        boxes,
        features,
        floor: floor.min(n),
        layer: 0,
    })
}

/// `C = X̄·X̄ᵀ / (D − 1)` over rows centered by their own mean.
pub fn covariance<'t>(features: &Var<'t>) -> Result<Var<'t>> {
    let s = features.shape();
    if s.len() != 2 || s[0] < 2 || s[1] < 2 {
        return Err(Error::contract(format!("covariance needs ≥ 2 rows of width ≥ 2, got {s:?}")));
    }
    let c = features.center_rows();
    Ok(c.matmul(&c.transpose())?.scale(1.0 / (s[1] - 1) as f64))
}

/// Per-row `[mean, off-diagonal max]` of a covariance matrix, `[n × 2]`.
fn row_stats<'t>(cov: &Var<'t>) -> Result<Var<'t>> {
    let n = cov.shape()[0];
    let mask = cov.tape().constant(Tensor::from_fn(&[n, n], |i| {
        if i / n == i % n {
            DIAG_MASK
        } else {
            0.0
        }
    }));
    let mean = cov.row_mean().reshape(&[n, 1])?;
    let max = cov.add(&mask)?.row_max().reshape(&[n, 1])?;
    Var::concat_last(&[&mean, &max])
}

/// Pooled statistics for the ratio heads: mean over rows of the row means and
/// of the off-diagonal row maxima.
pub fn pooled_stats(cov: &Tensor) -> [f64; 2] {
    let n = cov.rows();
    let mut mean = 0.0;
    let mut max = 0.0;
    for i in 0..n {
        let row = cov.row(i);
        mean += row.iter().sum::<f64>() / n as f64;
        max += row
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(_, &v)| v)
            .fold(f64::NEG_INFINITY, f64::max);
    }
    [mean / n as f64, max / n as f64]
}

/// Multi-head scaled dot-product attention from queries onto state tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CrossAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl CrossAttention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut impl Rng) -> Self {
        assert!(heads > 0 && dim % heads == 0, "dim must split evenly over heads");
        Self {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, 1.0, rng),
            k: Linear::new(store, &format!("{name}.k"), dim, dim, 1.0, rng),
            v: Linear::new(store, &format!("{name}.v"), dim, dim, 1.0, rng),
            o: Linear::new(store, &format!("{name}.o"), dim, dim, 0.5, rng),
            heads,
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        [self.q, self.k, self.v, self.o].iter().flat_map(|l| l.params()).collect()
    }
}

/// Trainable heads driving the query update.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct QueryUpdateHeads {
    pub merge: Linear,
    pub remove: Mlp2,
    pub split: Mlp2,
    pub remove_ratio: Linear,
    pub split_ratio: Linear,
    pub attention: CrossAttention,
}

impl QueryUpdateHeads {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut impl Rng) -> Self {
        let merge = Linear::new(store, &format!("{name}.merge"), dim + 2, 1, 1.0, rng);
        let remove = Mlp2::new(store, &format!("{name}.remove"), [dim, dim, 1], 0.5, rng);
        let split = Mlp2::new(store, &format!("{name}.split"), [dim, dim, 1], 0.5, rng);
        let remove_ratio = Linear::new(store, &format!("{name}.remove_ratio"), 2, 1, 1.0, rng);
        let split_ratio = Linear::new(store, &format!("{name}.split_ratio"), 2, 1, 1.0, rng);
        // Start conservative: few merges, light removal damping, strong split
        // labels so duplicated rows keep most of their magnitude.
        merge.fill_bias(store, -1.0);
        remove.out.fill_bias(store, -2.0);
        split.out.fill_bias(store, 2.0);
        Self {
            merge,
            remove,
            split,
            remove_ratio,
            split_ratio,
            attention: CrossAttention::new(store, &format!("{name}.attn"), dim, heads, rng),
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v: Vec<_> = self.merge.params().to_vec();
        v.extend(self.remove.params());
        v.extend(self.split.params());
        v.extend(self.remove_ratio.params());
        v.extend(self.split_ratio.params());
        v.extend(self.attention.params());
        v
    }
}

/// Attention of the query features onto `s` (`[tokens × D]`) with a residual.
/// `pos`, when given, is added to the features on the query side only.
pub fn cross_attend<'t>(
    g: &'t Graph<'_>,
    attn: &CrossAttention,
    qset: &QuerySet<'t>,
    s: &Var<'t>,
    pos: Option<&Var<'t>>,
) -> Result<QuerySet<'t>> {
    let d = qset.dim();
    if s.shape().len() != 2 || s.shape()[1] != d {
        return Err(Error::contract(format!(
            "cross_attend: state rows {:?} do not match query width {d}",
            s.shape()
        )));
    }
    let q_in = match pos {
        Some(p) => qset.features.add(p)?,
        None => qset.features.clone(),
    };
    let q = attn.q.forward(g, &q_in)?;
    let k = attn.k.forward(g, s)?;
    let v = attn.v.forward(g, s)?;
    let dh = d / attn.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(attn.heads);
    for h in 0..attn.heads {
        let qh = q.slice_last(h * dh, dh)?;
        let kh = k.slice_last(h * dh, dh)?;
        let vh = v.slice_last(h * dh, dh)?;
        let w = qh.matmul(&kh.transpose())?.scale(scale).softmax();
        outs.push(w.matmul(&vh)?);
    }
    let refs: Vec<&Var<'t>> = outs.iter().collect();
    let merged = Var::concat_last(&refs)?;
    let features = attn.o.forward(g, &merged)?.add(&qset.features)?;
    Ok(QuerySet {
        boxes: qset.boxes.clone(),
        features,
        floor: qset.floor,
        layer: qset.layer,
    })
}

/// Indices sorted by descending value, lower index first on ties.
fn ranked(values: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx
}

/// Merge labels `[n × 1]` from features and covariance row statistics.
pub fn merge_labels<'t>(g: &'t Graph<'_>, heads: &QueryUpdateHeads, features: &Var<'t>, cov: &Var<'t>) -> Result<Var<'t>> {
    let x = Var::concat_last(&[features, &row_stats(cov)?])?;
    Ok(heads.merge.forward(g, &x)?.sigmoid())
}

/// Pairs chosen by the greedy merge rule: candidates in descending label
/// order take their highest-covariance partner unless either is already
/// used. At most `budget` pairs.
pub fn merge_pairs(cov: &Tensor, labels: &[f64], budget: usize) -> Vec<(usize, usize)> {
    let n = labels.len();
    let mut used = vec![false; n];
    let mut pairs = Vec::new();
    for i in ranked(labels) {
        if pairs.len() >= budget || labels[i] <= MERGE_THRESHOLD {
            break;
        }
        if used[i] {
            continue;
        }
        let row = cov.row(i);
        let mut partner = None;
        for j in (0..n).filter(|&j| j != i) {
            if partner.is_none_or(|p: usize| row[j] > row[p]) {
                partner = Some(j);
            }
        }
        let Some(j) = partner else { continue };
        if used[j] {
            continue;
        }
        used[i] = true;
        used[j] = true;
        pairs.push((i, j));
    }
    pairs
}

fn circular_mean(a: f64, b: f64) -> f64 {
    let (s, c) = (a.sin() + b.sin(), a.cos() + b.cos());
    if s.abs() < 1e-15 && c.abs() < 1e-15 {
        wrap_angle(a)
    } else {
        wrap_angle(s.atan2(c))
    }
}

/// Mean of two boxes; yaw by circular mean.
pub fn merge_boxes(a: &QueryBox, b: &QueryBox) -> QueryBox {
    let x = a.to_array();
    let y = b.to_array();
    let mut m = [0.0; 9];
    for i in 0..9 {
        m[i] = 0.5 * (x[i] + y[i]);
    }
    m[6] = circular_mean(a.theta, b.theta);
    QueryBox::from_array(m)
}

/// Applies merges for the given labels. Each pair collapses into the lower
/// of its two indices; features combine as the label-weighted mean so the
/// merge head receives gradient. Returns the new set and the pair count.
pub fn merge_with<'t>(qset: &QuerySet<'t>, cov: &Tensor, labels: &Var<'t>, budget: usize) -> Result<(QuerySet<'t>, usize)> {
    let n = qset.len();
    if labels.value().len() != n {
        return Err(Error::shape("merge_with", labels.shape(), &[n, 1]));
    }
    let pairs = merge_pairs(cov, labels.value().data(), budget);
    if pairs.is_empty() {
        return Ok((qset.clone(), 0));
    }
    let lab = labels.reshape(&[n, 1])?;
    let first: Vec<usize> = pairs.iter().map(|&(i, _)| i).collect();
    let second: Vec<usize> = pairs.iter().map(|&(_, j)| j).collect();
    let (mi, mj) = (lab.gather_rows(&first)?, lab.gather_rows(&second)?);
    let fi = qset.features.gather_rows(&first)?.mul_col(&mi)?;
    let fj = qset.features.gather_rows(&second)?.mul_col(&mj)?;
    let inv = mi.add(&mj)?;
    let ones = labels.tape().constant(Tensor::full(inv.shape(), 1.0));
    let merged = fi.add(&fj)?.mul_col(&ones.div(&inv)?)?;

    let mut slot: Vec<Option<usize>> = (0..n).map(Some).collect();
    let mut boxes = qset.boxes.clone();
    for (p, &(i, j)) in pairs.iter().enumerate() {
        let (lo, hi) = (i.min(j), i.max(j));
        slot[lo] = Some(n + p);
        slot[hi] = None;
        boxes[lo] = merge_boxes(&qset.boxes[i], &qset.boxes[j]);
    }
    let rows: Vec<usize> = slot.iter().flatten().copied().collect();
    let keep: Vec<usize> = (0..n).filter(|&r| slot[r].is_some()).collect();
    let features = Var::concat_rows(&[&qset.features, &merged])?.gather_rows(&rows)?;
    Ok((
        QuerySet {
            boxes: keep.iter().map(|&r| boxes[r]).collect(),
            features,
            floor: qset.floor,
            layer: qset.layer,
        },
        pairs.len(),
    ))
}

/// Merge step with labels from the heads; never goes below the floor.
pub fn merge<'t>(g: &'t Graph<'_>, heads: &QueryUpdateHeads, qset: &QuerySet<'t>, cov: &Var<'t>) -> Result<(QuerySet<'t>, usize)> {
    if qset.len() < 2 {
        return Err(Error::contract("merge needs at least two queries"));
    }
    let labels = merge_labels(g, heads, &qset.features, cov)?;
    merge_with(qset, cov.value(), &labels, qset.len().saturating_sub(qset.floor))
}

/// Remove labels `[n × 1]`.
pub fn remove_labels<'t>(g: &'t Graph<'_>, heads: &QueryUpdateHeads, features: &Var<'t>) -> Result<Var<'t>> {
    Ok(heads.remove.forward(g, features)?.sigmoid())
}

/// Remove ratio in `[0.2, 0.3]` from pooled covariance statistics. A value,
/// not a graph node: the count it yields is an integer.
pub fn remove_ratio(store: &ParamStore, heads: &QueryUpdateHeads, cov: &Tensor) -> f64 {
    let z = heads.remove_ratio.apply(store, &pooled_stats(cov))[0];
    REMOVE_MIN + (REMOVE_MAX - REMOVE_MIN) * sigmoid(z)
}

/// `floor(r·n)` clamped to `[ceil(n/5), floor(3n/10)]` so the removed
/// fraction stays inside the bounds whenever an integer count can.
pub fn remove_count(n: usize, ratio: f64) -> usize {
    let lo = n.div_ceil(5);
    let hi = 3 * n / 10;
    if lo > hi {
        return hi;
    }
    ((ratio * n as f64).floor() as usize).clamp(lo, hi)
}

/// Removes the `k` queries with the highest labels. When anything is removed
/// the survivors are scaled by `1 − label`.
pub fn remove_with<'t>(qset: &QuerySet<'t>, labels: &Var<'t>, k: usize) -> Result<QuerySet<'t>> {
    let n = qset.len();
    if labels.value().len() != n {
        return Err(Error::shape("remove_with", labels.shape(), &[n, 1]));
    }
    if k == 0 {
        return Ok(qset.clone());
    }
    if k >= n {
        return Err(Error::contract(format!("cannot remove {k} of {n} queries")));
    }
    let mut gone = vec![false; n];
    for &i in ranked(labels.value().data()).iter().take(k) {
        gone[i] = true;
    }
    let keep: Vec<usize> = (0..n).filter(|&i| !gone[i]).collect();
    let damp = labels.reshape(&[n, 1])?.gather_rows(&keep)?.one_minus();
    Ok(QuerySet {
        boxes: keep.iter().map(|&i| qset.boxes[i]).collect(),
        features: qset.features.gather_rows(&keep)?.mul_col(&damp)?,
        floor: qset.floor,
        layer: qset.layer,
    })
}

/// Remove step with the heads' labels and ratio, clamped at the floor.
pub fn remove<'t>(g: &'t Graph<'_>, heads: &QueryUpdateHeads, qset: &QuerySet<'t>, cov: &Var<'t>) -> Result<(QuerySet<'t>, usize)> {
    let n = qset.len();
    if n < 2 {
        return Err(Error::contract("remove needs at least two queries"));
    }
    let k = remove_count(n, remove_ratio(g.store(), heads, cov.value())).min(n.saturating_sub(qset.floor));
    let labels = remove_labels(g, heads, &qset.features)?;
    Ok((remove_with(qset, &labels, k)?, k))
}

/// Split labels `[n × 1]`.
pub fn split_labels<'t>(g: &'t Graph<'_>, heads: &QueryUpdateHeads, features: &Var<'t>) -> Result<Var<'t>> {
    Ok(heads.split.forward(g, features)?.sigmoid())
}

/// Split percentage in `[0, 5]` from pooled covariance statistics.
pub fn split_percent(store: &ParamStore, heads: &QueryUpdateHeads, cov: &Tensor) -> f64 {
    let z = heads.split_ratio.apply(store, &pooled_stats(cov))[0];
    SPLIT_MAX_PERCENT * sigmoid(z)
}

/// `floor(p/100 · n)`, never above `n/20`.
pub fn split_count(n: usize, percent: f64) -> usize {
    (((percent / 100.0) * n as f64).floor() as usize).min(n / 20)
}

/// Duplicates the `m` queries with the highest labels and appends the copies
/// in source order. Source and copy are both scaled by the label, so they
/// stay bitwise equal and the head receives gradient.
pub fn split_with<'t>(qset: &QuerySet<'t>, labels: &Var<'t>, m: usize) -> Result<QuerySet<'t>> {
    let n = qset.len();
    if labels.value().len() != n {
        return Err(Error::shape("split_with", labels.shape(), &[n, 1]));
    }
    if m == 0 {
        return Ok(qset.clone());
    }
    if m > n {
        return Err(Error::contract(format!("cannot split {m} of {n} queries")));
    }
    let mut chosen: Vec<usize> = ranked(labels.value().data()).into_iter().take(m).collect();
    chosen.sort_unstable();
    let mut is_src = vec![false; n];
    for &i in &chosen {
        is_src[i] = true;
    }
    let rows: Vec<usize> = (0..n).chain(chosen.iter().copied()).collect();
    // Row 0 of the factor table is a constant 1 for rows left alone.
    let factor_idx: Vec<usize> = rows.iter().map(|&r| if is_src[r] { 1 + r } else { 0 }).collect();
    let one = labels.tape().constant(Tensor::full(&[1, 1], 1.0));
    let factors = Var::concat_rows(&[&one, &labels.reshape(&[n, 1])?])?.gather_rows(&factor_idx)?;
    Ok(QuerySet {
        boxes: rows.iter().map(|&r| qset.boxes[r]).collect(),
        features: qset.features.gather_rows(&rows)?.mul_col(&factors)?,
        floor: qset.floor,
        layer: qset.layer,
    })
}

/// Split step with the heads' labels and percentage.
pub fn split<'t>(g: &'t Graph<'_>, heads: &QueryUpdateHeads, qset: &QuerySet<'t>, cov: &Var<'t>) -> Result<(QuerySet<'t>, usize)> {
    let m = split_count(qset.len(), split_percent(g.store(), heads, cov.value()));
    let labels = split_labels(g, heads, &qset.features)?;
    Ok((split_with(qset, &labels, m)?, m))
}

/// Query counts of one update.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UpdateLog {
    pub layer: usize,
    pub n_in: usize,
    pub merged: usize,
    pub removed: usize,
    pub split: usize,
    pub n_out: usize,
}

/// End-of-layer update: cross-attention, then (when `dynamic`) merge, remove
/// and split in that order.
///
/// The remove count is clamped so that survivors plus the planned splits
/// reach the floor; the split percentage is read from the same post-merge
/// covariance as the remove ratio, which fixes the planned count before the
/// removal happens.
pub fn update<'t>(
    g: &'t Graph<'_>,
    heads: &QueryUpdateHeads,
    qset: &QuerySet<'t>,
    s: &Var<'t>,
    pos: Option<&Var<'t>>,
    dynamic: bool,
) -> Result<(QuerySet<'t>, UpdateLog)> {
    let n_in = qset.len();
    let mut q = cross_attend(g, &heads.attention, qset, s, pos)?;
    let mut log = UpdateLog {
        layer: qset.layer,
        n_in,
        ..UpdateLog::default()
    };
    if dynamic && n_in >= 2 {
        let cov = covariance(&q.features)?;
        let (merged, count) = merge(g, heads, &q, &cov)?;
        log.merged = count;
        q = merged;
    }
    if dynamic && q.len() >= 2 {
        let m_count = q.len();
        let cov = covariance(&q.features)?;
        let k_raw = remove_count(m_count, remove_ratio(g.store(), heads, cov.value()));
        let planned = split_count(m_count - k_raw, split_percent(g.store(), heads, cov.value()));
        let min_survivors = q.floor.saturating_sub(planned);
        let k = k_raw.min(m_count.saturating_sub(min_survivors));
        let labels = remove_labels(g, heads, &q.features)?;
        q = remove_with(&q, &labels, k)?;
        log.removed = k;
        let labels = split_labels(g, heads, &q.features)?;
        q = split_with(&q, &labels, planned)?;
        log.split = planned;
    }
    q.layer = qset.layer + 1;
    log.n_out = q.len();
    debug_assert!(log.n_out >= qset.floor.min(n_in));
    Ok((q, log))
}
