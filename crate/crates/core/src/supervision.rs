//! Set-based training objective: optimal assignment, focal classification,
//! L1 box regression and the auxiliary SSM terms, with deep supervision over
//! every decoder layer.

use serde::{Deserialize, Serialize};

use crate::config::LossConfig;
use crate::decoder::{ForwardOptions, ForwardOutput};
use crate::error::{Error, Result};
use crate::kernels::{Tensor, Var};
use crate::queries::{wrap_angle, QueryBox};
use crate::ssm::aux_losses;

/// Per-parameter divisors that bring box errors to comparable ranges:
/// `x, y, z, w, l, h, θ, vx, vy`.
pub const BOX_SCALE: [f64; QueryBox::PARAMS] = [2.0, 2.0, 1.0, 1.0, 2.0, 1.0, 1.0, 2.0, 2.0];

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchResult {
    /// `(prediction, ground truth)` pairs, sorted by prediction.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched: Vec<usize>,
}

impl MatchResult {
    /// Target class per prediction, `None` for background.
    pub fn targets(&self, n_pred: usize, gt: &[(usize, QueryBox)]) -> Vec<Option<usize>> {
        let mut t = vec![None; n_pred];
        for &(p, g) in &self.pairs {
            t[p] = Some(gt[g].0);
        }
        t
    }
}

/// Minimum-cost assignment of rows to columns of a rectangular matrix;
/// `min(rows, cols)` pairs. Shortest augmenting paths with potentials.
pub fn hungarian(cost: &Tensor) -> Result<MatchResult> {
    if cost.rank() != 2 {
        return Err(Error::contract(format!("hungarian needs a matrix, got {:?}", cost.shape())));
    }
    let (rows, cols) = (cost.shape()[0], cost.shape()[1]);
    if !cost.all_finite() {
        return Err(Error::contract("hungarian: non-finite cost"));
    }
    let transposed = rows > cols;
    let (n, m) = if transposed { (cols, rows) } else { (rows, cols) };
    let at = |i: usize, j: usize| if transposed { cost.at(&[j, i]) } else { cost.at(&[i, j]) };

    // 1-based arrays; column 0 is the virtual start.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = at(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut pairs: Vec<(usize, usize)> = (1..=m)
        .filter(|&j| owner[j] != 0)
        .map(|j| {
            let (i, j) = (owner[j] - 1, j - 1);
            if transposed {
                (j, i)
            } else {
                (i, j)
            }
        })
        .collect();
    pairs.sort_unstable();
    let mut matched = vec![false; rows];
    for &(p, _) in &pairs {
        matched[p] = true;
    }
    Ok(MatchResult {
        pairs,
        unmatched: (0..rows).filter(|&i| !matched[i]).collect(),
    })
}

/// Exhaustive minimum over all injective assignments; the oracle for
/// [`hungarian`]. Exponential, meant for `min(rows, cols) ≤ 8`.
pub fn brute_force_assignment(cost: &Tensor) -> (f64, Vec<(usize, usize)>) {
    let (rows, cols) = (cost.shape()[0], cost.shape()[1]);
    let k = rows.min(cols);
    let mut best = (f64::INFINITY, Vec::new());
    let mut used_r = vec![false; rows];
    let mut used_c = vec![false; cols];
    let mut cur = Vec::with_capacity(k);
    // Assign the smaller side in order to any unused element of the larger.
    fn rec(
        cost: &Tensor,
        by_row: bool,
        idx: usize,
        k: usize,
        acc: f64,
        used: &mut [bool],
        cur: &mut Vec<(usize, usize)>,
        best: &mut (f64, Vec<(usize, usize)>),
    ) {
        if idx == k {
            if acc < best.0 {
                *best = (acc, cur.clone());
            }
            return;
        }
        for o in 0..used.len() {
            if used[o] {
                continue;
            }
            let (r, c) = if by_row { (idx, o) } else { (o, idx) };
            used[o] = true;
            cur.push((r, c));
            rec(cost, by_row, idx + 1, k, acc + cost.at(&[r, c]), used, cur, best);
            cur.pop();
            used[o] = false;
        }
    }
    if rows <= cols {
        rec(cost, true, 0, k, 0.0, &mut used_c, &mut cur, &mut best);
    } else {
        rec(cost, false, 0, k, 0.0, &mut used_r, &mut cur, &mut best);
    }
    best.1.sort_unstable();
    best
}

pub fn assignment_cost(cost: &Tensor, pairs: &[(usize, usize)]) -> f64 {
    pairs.iter().map(|&(i, j)| cost.at(&[i, j])).sum()
}

/// Absolute per-parameter box errors with the angle difference wrapped.
pub fn box_abs_errors(a: &[f64], b: &[f64]) -> [f64; QueryBox::PARAMS] {
    let mut e = [0.0; QueryBox::PARAMS];
    for j in 0..QueryBox::PARAMS {
        e[j] = if j == 6 {
            wrap_angle(a[j] - b[j]).abs()
        } else {
            (a[j] - b[j]).abs()
        };
    }
    e
}

/// Mean scaled L1 distance between two boxes.
pub fn box_distance(a: &[f64], b: &[f64]) -> f64 {
    box_abs_errors(a, b)
        .iter()
        .zip(BOX_SCALE)
        .map(|(e, s)| e / s)
        .sum::<f64>()
        / QueryBox::PARAMS as f64
}

/// `α·(1 − p_true) + β·box_distance` for every prediction/ground-truth pair.
pub fn match_cost(logits: &Tensor, boxes: &Tensor, gt: &[(usize, QueryBox)], cfg: &LossConfig) -> Tensor {
    let n = logits.rows();
    let mut c = vec![0.0; n * gt.len()];
    for i in 0..n {
        for (j, (class, b)) in gt.iter().enumerate() {
            let p = crate::kernels::ops::sigmoid(logits.at(&[i, *class]));
            c[i * gt.len() + j] =
                cfg.match_cls * (1.0 - p) + cfg.match_box * box_distance(boxes.row(i), &b.to_array());
        }
    }
    Tensor::from_parts(vec![n, gt.len()], c)
}

pub fn match_layer(logits: &Tensor, boxes: &Tensor, gt: &[(usize, QueryBox)], cfg: &LossConfig) -> Result<MatchResult> {
    if gt.is_empty() {
        return Ok(MatchResult {
            pairs: Vec::new(),
            unmatched: (0..logits.rows()).collect(),
        });
    }
    hungarian(&match_cost(logits, boxes, gt, cfg))
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Sigmoid focal loss summed over classes and averaged over predictions.
/// `targets[i]` is the class of prediction `i` or `None` for background.
pub fn focal_loss<'t>(logits: &Var<'t>, targets: &[Option<usize>], gamma: f64, alpha: f64) -> Result<Var<'t>> {
    let l = logits.value();
    if l.rank() != 2 || l.rows() != targets.len() {
        return Err(Error::shape("focal_loss", l.shape(), &[targets.len()]));
    }
    let (n, k) = (l.rows(), l.last_dim());
    if targets.iter().flatten().any(|&c| c >= k) {
        return Err(Error::contract("focal_loss: target class out of range"));
    }
    let mut total = 0.0;
    let mut grad = vec![0.0; n * k];
    for i in 0..n {
        for c in 0..k {
            let x = l.at(&[i, c]);
            let p = crate::kernels::ops::sigmoid(x);
            if targets[i] == Some(c) {
                let logp = -softplus(-x);
                let w = (1.0 - p).powf(gamma);
                total += -alpha * w * logp;
                grad[i * k + c] = alpha * w * (gamma * p * logp - (1.0 - p));
            } else {
                let log1mp = -softplus(x);
                let w = p.powf(gamma);
                total += -(1.0 - alpha) * w * log1mp;
                grad[i * k + c] = (1.0 - alpha) * w * (p - gamma * (1.0 - p) * log1mp);
            }
        }
    }
    let inv_n = 1.0 / n as f64;
    let shape = l.shape().to_vec();
    Ok(logits.tape().record(Tensor::scalar(total * inv_n), &[logits], move |g, _| {
        let s = g.item() * inv_n;
        vec![Some(Tensor::from_parts(shape.clone(), grad.iter().map(|v| v * s).collect()))]
    }))
}

/// Mean over matched pairs of the scaled L1 error over the 9 box parameters.
/// The flag is set when there are no pairs (the loss is then 0).
pub fn l1_box_loss<'t>(
    boxes: &Var<'t>,
    pairs: &[(usize, usize)],
    gt: &[(usize, QueryBox)],
) -> Result<(Var<'t>, bool)> {
    let b = boxes.value();
    if b.rank() != 2 || b.last_dim() != QueryBox::PARAMS {
        return Err(Error::shape("l1_box_loss", b.shape(), &[0, QueryBox::PARAMS]));
    }
    if pairs.is_empty() {
        return Ok((boxes.tape().constant(Tensor::scalar(0.0)), true));
    }
    let norm = 1.0 / (pairs.len() * QueryBox::PARAMS) as f64;
    let mut total = 0.0;
    let mut grad = vec![0.0; b.len()];
    for &(p, g) in pairs {
        let t = gt[g].1.to_array();
        let row = b.row(p);
        for j in 0..QueryBox::PARAMS {
            let d = if j == 6 { wrap_angle(row[j] - t[j]) } else { row[j] - t[j] };
            total += d.abs() / BOX_SCALE[j];
            // Zero subgradient at an exact hit; `signum(0.0)` is 1.
            if d != 0.0 {
                grad[p * QueryBox::PARAMS + j] += d.signum() / BOX_SCALE[j];
            }
        }
    }
    let shape = b.shape().to_vec();
    let loss = boxes.tape().record(Tensor::scalar(total * norm), &[boxes], move |g, _| {
        let s = g.item() * norm;
        vec![Some(Tensor::from_parts(shape.clone(), grad.iter().map(|v| v * s).collect()))]
    });
    Ok((loss, false))
}

/// Scalar loss terms of one layer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LayerLoss {
    pub cls: f64,
    pub boxes: f64,
    pub recon: f64,
    pub future: f64,
    pub matched: usize,
}

/// The differentiable total plus its parts summed over layers.
pub struct LossBreakdown<'t> {
    pub total: Var<'t>,
    pub cls: f64,
    pub boxes: f64,
    pub recon: f64,
    pub future: f64,
    pub layers: Vec<LayerLoss>,
    /// The assignment used at each layer.
    pub matches: Vec<MatchResult>,
}

impl LossBreakdown<'_> {
    pub fn summary(&self) -> LossSummary {
        LossSummary {
            cls: self.cls,
            boxes: self.boxes,
            recon: self.recon,
            future: self.future,
            total: self.total.item(),
        }
    }
}

/// Value-only copy of a [`LossBreakdown`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossSummary {
    pub cls: f64,
    pub boxes: f64,
    pub recon: f64,
    pub future: f64,
    pub total: f64,
}

impl LossSummary {
    pub fn add(&mut self, o: &LossSummary) {
        self.cls += o.cls;
        self.boxes += o.boxes;
        self.recon += o.recon;
        self.future += o.future;
        self.total += o.total;
    }

    pub fn scaled(mut self, s: f64) -> Self {
        self.cls *= s;
        self.boxes *= s;
        self.recon *= s;
        self.future *= s;
        self.total *= s;
        self
    }
}

/// `Σ_layers cls + λ_box·box + λ_r·L_r + λ_f·L_f`, matching afresh at every
/// layer. The auxiliary terms are averaged over the transform blocks and
/// dropped when `cfg.aux` is off.
pub fn total_loss<'t>(out: &ForwardOutput<'t>, gt: &[(usize, QueryBox)], cfg: &LossConfig) -> Result<LossBreakdown<'t>> {
    total_loss_with(out, gt, cfg, None)
}

/// The discrete and stop-gradient inputs of one loss evaluation: per-layer
/// assignments and the sampled feature targets of every bundle.
#[derive(Clone, Debug)]
pub struct Frozen {
    pub matches: Vec<MatchResult>,
    /// `[layer][block][step]`.
    pub targets: Vec<Vec<Vec<Tensor>>>,
    /// Input boxes of each layer, for [`ForwardOptions::pinned_boxes`].
    pub boxes: Vec<Vec<QueryBox>>,
}

impl Frozen {
    pub fn capture(out: &ForwardOutput<'_>, loss: &LossBreakdown<'_>) -> Self {
        Self {
            matches: loss.matches.clone(),
            targets: out
                .layers
                .iter()
                .map(|l| l.bundles.iter().map(|b| b.target.clone()).collect())
                .collect(),
            boxes: out.layers.iter().map(|l| l.input_boxes.clone()).collect(),
        }
    }

    /// Forward options that replay the same masks with these boxes pinned.
    pub fn options(&self, mask_seed: Option<u64>) -> ForwardOptions {
        ForwardOptions {
            mask_seed,
            pinned_boxes: Some(self.boxes.clone()),
        }
    }
}

/// [`total_loss`] with assignments and feature targets held fixed, so a
/// finite-difference probe sees the same function the gradient describes.
pub fn total_loss_with<'t>(
    out: &ForwardOutput<'t>,
    gt: &[(usize, QueryBox)],
    cfg: &LossConfig,
    frozen: Option<&Frozen>,
) -> Result<LossBreakdown<'t>> {
    let first = out
        .layers
        .first()
        .ok_or_else(|| Error::contract("total_loss: forward produced no layers"))?;
    if frozen.is_some_and(|f| f.matches.len() != out.layers.len() || f.targets.len() != out.layers.len()) {
        return Err(Error::contract("total_loss: frozen inputs do not match the layer count"));
    }
    let tape = first.logits.tape();
    let mut total = tape.constant(Tensor::scalar(0.0));
    let mut layers = Vec::with_capacity(out.layers.len());
    let mut matches = Vec::with_capacity(out.layers.len());
    for (l, layer) in out.layers.iter().enumerate() {
        let m = match frozen {
            Some(f) => f.matches[l].clone(),
            None => match_layer(layer.logits.value(), layer.boxes.value(), gt, cfg)?,
        };
        let targets = m.targets(layer.logits.value().rows(), gt);
        let cls = focal_loss(&layer.logits, &targets, cfg.focal_gamma, cfg.focal_alpha)?;
        let (bl, _) = l1_box_loss(&layer.boxes, &m.pairs, gt)?;
        let mut lt = cls.add(&bl.scale(cfg.box_weight))?;
        let mut parts = LayerLoss {
            cls: cls.item(),
            boxes: bl.item(),
            matched: m.pairs.len(),
            ..LayerLoss::default()
        };
        if cfg.aux && !layer.bundles.is_empty() {
            let inv = 1.0 / layer.bundles.len() as f64;
            for (b, bundle) in layer.bundles.iter().enumerate() {
                let aux = match frozen {
                    Some(f) => {
                        let mut fixed = bundle.clone();
                        fixed.target = f.targets[l]
                            .get(b)
                            .cloned()
                            .ok_or_else(|| Error::contract("total_loss: frozen targets miss a block"))?;
                        aux_losses(&fixed)?
                    }
                    None => aux_losses(bundle)?,
                };
                parts.recon += aux.recon.item() * inv;
                parts.future += aux.future.item() * inv;
                lt = lt
                    .add(&aux.recon.scale(cfg.recon_weight * inv))?
                    .add(&aux.future.scale(cfg.future_weight * inv))?;
            }
        }
        total = total.add(&lt)?;
        layers.push(parts);
        matches.push(m);
    }
    let sum = |f: fn(&LayerLoss) -> f64| layers.iter().map(f).sum::<f64>();
    Ok(LossBreakdown {
        cls: sum(|l| l.cls),
        boxes: sum(|l| l.boxes),
        recon: sum(|l| l.recon),
        future: sum(|l| l.future),
        total,
        layers,
        matches,
    })
}
