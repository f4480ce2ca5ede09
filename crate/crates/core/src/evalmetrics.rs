//! Center-distance detection metrics (mAP, true-positive errors, composite
//! score) and forward-latency benchmarking.

use std::cmp::Ordering;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::DecoderConfig;
use crate::decoder::{Detection, ForwardOptions, Model};
use crate::error::{Error, Result};
use crate::kernels::Graph;
use crate::par;
use crate::queries::{wrap_angle, QueryBox, UpdateLog};
use crate::simworld::{SceneData, NUM_CLASSES};

/// BEV center-distance thresholds in meters.
pub const THRESHOLDS: [f64; 4] = [0.5, 1.0, 2.0, 4.0];
/// Threshold whose matches feed the true-positive errors.
pub const TP_THRESHOLD: f64 = 2.0;

pub fn bev_distance(a: &QueryBox, b: &QueryBox) -> f64 {
    (a.x - b.x).hypot(a.y - b.y)
}

/// Indices of `scores` by descending score, lower index first on ties.
pub fn score_order(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// Greedy matching of single-class predictions to ground truth: in score
/// order, each prediction takes the nearest unmatched box within
/// `threshold`. Returns the matched ground-truth index per prediction.
pub fn match_predictions(preds: &[Detection], gts: &[QueryBox], threshold: f64) -> Vec<Option<usize>> {
    let scores: Vec<f64> = preds.iter().map(|p| p.score).collect();
    let mut taken = vec![false; gts.len()];
    let mut out = vec![None; preds.len()];
    for i in score_order(&scores) {
        let best = gts
            .iter()
            .enumerate()
            .filter(|(j, _)| !taken[*j])
            .map(|(j, g)| (j, bev_distance(&preds[i].bbox, g)))
            .filter(|&(_, d)| d <= threshold)
            .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        if let Some((j, _)) = best {
            taken[j] = true;
            out[i] = Some(j);
        }
    }
    out
}

/// 101-point interpolated average precision of a score-ordered list of
/// true/false positives. `None` when there is nothing to recall.
pub fn average_precision(tp: &[bool], n_gt: usize) -> Option<f64> {
    if n_gt == 0 {
        return None;
    }
    let mut hits = 0usize;
    let mut curve = Vec::with_capacity(tp.len());
    for (k, &t) in tp.iter().enumerate() {
        hits += t as usize;
        curve.push((hits as f64 / n_gt as f64, hits as f64 / (k + 1) as f64));
    }
    // Running max of precision from the tail, so each recall level reads
    // the best precision at or beyond it.
    let mut best = vec![0.0f64; curve.len() + 1];
    for k in (0..curve.len()).rev() {
        best[k] = best[k + 1].max(curve[k].1);
    }
    let mut sum = 0.0;
    let mut k = 0;
    for i in 0..=100 {
        let r = i as f64 / 100.0;
        while k < curve.len() && curve[k].0 < r {
            k += 1;
        }
        sum += best[k];
    }
    Some(sum / 101.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TpErrors {
    /// BEV center distance, meters.
    pub ate: f64,
    /// 1 − IoU after aligning centers and yaw.
    pub ase: f64,
    /// Absolute yaw difference, radians in [0, π].
    pub aoe: f64,
    /// Velocity difference, m/s.
    pub ave: f64,
}

impl TpErrors {
    pub const WORST: TpErrors = TpErrors {
        ate: 1.0,
        ase: 1.0,
        aoe: 1.0,
        ave: 1.0,
    };

    pub fn of_pair(pred: &QueryBox, gt: &QueryBox) -> Self {
        let inter = pred.w.min(gt.w) * pred.l.min(gt.l) * pred.h.min(gt.h);
        let union = pred.w * pred.l * pred.h + gt.w * gt.l * gt.h - inter;
        Self {
            ate: bev_distance(pred, gt),
            ase: 1.0 - inter / union,
            aoe: wrap_angle(pred.theta - gt.theta).abs(),
            ave: (pred.vx - gt.vx).hypot(pred.vy - gt.vy),
        }
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.ate, self.ase, self.aoe, self.ave]
    }
}

/// Mean errors over matched `(prediction, ground truth)` pairs; `None` when
/// nothing matched.
pub fn tp_errors(pairs: &[(QueryBox, QueryBox)]) -> Option<TpErrors> {
    if pairs.is_empty() {
        return None;
    }
    let mut acc = [0.0; 4];
    for (p, g) in pairs {
        for (a, e) in acc.iter_mut().zip(TpErrors::of_pair(p, g).as_array()) {
            *a += e;
        }
    }
    let n = pairs.len() as f64;
    Some(TpErrors {
        ate: acc[0] / n,
        ase: acc[1] / n,
        aoe: acc[2] / n,
        ave: acc[3] / n,
    })
}

/// `(5·mAP + Σ (1 − min(1, e))) / 9` over the four error terms.
pub fn composite_score(map: f64, errors: &TpErrors) -> f64 {
    let tp: f64 = errors.as_array().iter().map(|e| 1.0 - e.min(1.0)).sum();
    (5.0 * map + tp) / 9.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassReport {
    pub class: usize,
    pub n_gt: usize,
    pub n_pred: usize,
    /// AP at each of [`THRESHOLDS`].
    pub ap: Vec<f64>,
    pub errors: TpErrors,
    /// True when no prediction matched at the error threshold and the
    /// errors were set to the worst value.
    pub errors_flagged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub scenes: usize,
    pub n_gt: usize,
    pub n_pred: usize,
    #[serde(rename = "mAP")]
    pub map: f64,
    #[serde(rename = "mATE")]
    pub ate: f64,
    #[serde(rename = "mASE")]
    pub ase: f64,
    #[serde(rename = "mAOE")]
    pub aoe: f64,
    #[serde(rename = "mAVE")]
    pub ave: f64,
    pub composite: f64,
    pub thresholds: Vec<f64>,
    /// Class-mean AP at each threshold.
    pub ap_by_threshold: Vec<f64>,
    /// Classes with at least one ground-truth box.
    pub per_class: Vec<ClassReport>,
    pub flags: Vec<String>,
}

impl EvalReport {
    /// Class-mean AP at `threshold`, if it is one of [`THRESHOLDS`].
    pub fn ap_at(&self, threshold: f64) -> Option<f64> {
        self.thresholds
            .iter()
            .position(|&t| t == threshold)
            .map(|i| self.ap_by_threshold[i])
    }
}

/// A scored prediction after per-scene matching.
struct Scored {
    score: f64,
    scene: usize,
    index: usize,
    /// Matched ground truth per threshold.
    hits: [Option<usize>; THRESHOLDS.len()],
}

struct SceneClass {
    n_gt: usize,
    scored: Vec<Scored>,
    pairs: Vec<(QueryBox, QueryBox)>,
}

fn match_scene(scene: usize, dets: &[Detection], gts: &[(usize, QueryBox)]) -> Vec<SceneClass> {
    (0..NUM_CLASSES)
        .map(|c| {
            let idx: Vec<usize> = (0..dets.len()).filter(|&i| dets[i].class == c).collect();
            let preds: Vec<Detection> = idx.iter().map(|&i| dets[i]).collect();
            let boxes: Vec<QueryBox> = gts.iter().filter(|g| g.0 == c).map(|g| g.1).collect();
            let per_t: Vec<Vec<Option<usize>>> = THRESHOLDS
                .iter()
                .map(|&t| match_predictions(&preds, &boxes, t))
                .collect();
            let scored = idx
                .iter()
                .enumerate()
                .map(|(k, &i)| Scored {
                    score: dets[i].score,
                    scene,
                    index: i,
                    hits: std::array::from_fn(|t| per_t[t][k]),
                })
                .collect();
            let tp_t = THRESHOLDS.iter().position(|&t| t == TP_THRESHOLD).unwrap();
            let pairs = per_t[tp_t]
                .iter()
                .enumerate()
                .filter_map(|(k, m)| m.map(|j| (preds[k].bbox, boxes[j])))
                .collect();
            SceneClass {
                n_gt: boxes.len(),
                scored,
                pairs,
            }
        })
        .collect()
}

/// Pools detections over scenes (matched per scene) into one report.
/// Errors when there is no ground truth at all.
pub fn evaluate(dets: &[Vec<Detection>], gts: &[Vec<(usize, QueryBox)>]) -> Result<EvalReport> {
    if dets.len() != gts.len() {
        return Err(Error::contract(format!(
            "{} prediction sets for {} scenes",
            dets.len(),
            gts.len()
        )));
    }
    let per_scene = par::map_range(dets.len(), |s| match_scene(s, &dets[s], &gts[s]));
    let mut per_class = Vec::new();
    let mut flags = Vec::new();
    for c in 0..NUM_CLASSES {
        let mut n_gt = 0;
        let mut scored = Vec::new();
        let mut pairs = Vec::new();
        for scene in &per_scene {
            let sc = &scene[c];
            n_gt += sc.n_gt;
            scored.extend(sc.scored.iter().map(|s| (s.score, s.scene, s.index, s.hits)));
            pairs.extend_from_slice(&sc.pairs);
        }
        if n_gt == 0 {
            continue;
        }
        scored.sort_by(|a, b| match b.0.total_cmp(&a.0) {
            Ordering::Equal => (a.1, a.2).cmp(&(b.1, b.2)),
            o => o,
        });
        let ap = (0..THRESHOLDS.len())
            .map(|t| {
                let tp: Vec<bool> = scored.iter().map(|s| s.3[t].is_some()).collect();
                average_precision(&tp, n_gt).expect("n_gt > 0")
            })
            .collect();
        let (errors, flagged) = match tp_errors(&pairs) {
            Some(e) => (e, false),
            None => {
                flags.push(format!("class {c}: no matches at {TP_THRESHOLD} m, errors set to 1.0"));
                (TpErrors::WORST, true)
            }
        };
        per_class.push(ClassReport {
            class: c,
            n_gt,
            n_pred: scored.len(),
            ap,
            errors,
            errors_flagged: flagged,
        });
    }
    if per_class.is_empty() {
        return Err(Error::contract("no ground-truth boxes to evaluate against"));
    }
    let nc = per_class.len() as f64;
    let ap_by_threshold: Vec<f64> = (0..THRESHOLDS.len())
        .map(|t| per_class.iter().map(|c| c.ap[t]).sum::<f64>() / nc)
        .collect();
    let map = ap_by_threshold.iter().sum::<f64>() / THRESHOLDS.len() as f64;
    let mean = |f: fn(&TpErrors) -> f64| per_class.iter().map(|c| f(&c.errors)).sum::<f64>() / nc;
    let errors = TpErrors {
        ate: mean(|e| e.ate),
        ase: mean(|e| e.ase),
        aoe: mean(|e| e.aoe),
        ave: mean(|e| e.ave),
    };
    Ok(EvalReport {
        scenes: dets.len(),
        n_gt: per_class.iter().map(|c| c.n_gt).sum(),
        n_pred: dets.iter().map(Vec::len).sum(),
        map,
        ate: errors.ate,
        ase: errors.ase,
        aoe: errors.aoe,
        ave: errors.ave,
        composite: composite_score(map, &errors),
        thresholds: THRESHOLDS.to_vec(),
        ap_by_threshold,
        per_class,
        flags,
    })
}

/// Inference-mode detections for every scene.
pub fn predict(model: &Model, scenes: &[SceneData]) -> Result<Vec<Vec<Detection>>> {
    par::map(scenes, |s| {
        let g = Graph::inference(&model.store);
        Ok(model.forward(&g, s, &ForwardOptions::default())?.detections())
    })
    .into_iter()
    .collect()
}

/// Runs the model over `scenes` and scores it against their ground truth.
pub fn evaluate_model(model: &Model, scenes: &[SceneData]) -> Result<EvalReport> {
    if scenes.is_empty() {
        return Err(Error::contract("cannot evaluate on an empty dataset"));
    }
    let dets = predict(model, scenes)?;
    let gts: Vec<_> = scenes.iter().map(|s| s.scene.ground_truth()).collect();
    evaluate(&dets, &gts)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub iters: usize,
    pub mean_secs: f64,
    pub min_secs: f64,
    pub trajectory: Vec<UpdateLog>,
    /// Query rows processed, summed over layers.
    pub query_rows: usize,
}

/// Mean inference latency of `model` on `scene`.
pub fn bench_forward(model: &Model, scene: &SceneData, warmup: usize, iters: usize) -> Result<BenchResult> {
    let run = || -> Result<(f64, Vec<UpdateLog>)> {
        let start = Instant::now();
        let g = Graph::inference(&model.store);
        let out = model.forward(&g, scene, &ForwardOptions::default())?;
        Ok((start.elapsed().as_secs_f64(), out.trajectory()))
    };
    for _ in 0..warmup {
        run()?;
    }
    let mut times = Vec::with_capacity(iters);
    let mut trajectory = Vec::new();
    for _ in 0..iters.max(1) {
        let (t, traj) = run()?;
        times.push(t);
        trajectory = traj;
    }
    Ok(summarize(times, trajectory))
}

fn summarize(times: Vec<f64>, trajectory: Vec<UpdateLog>) -> BenchResult {
    BenchResult {
        iters: times.len(),
        mean_secs: times.iter().sum::<f64>() / times.len() as f64,
        min_secs: times.iter().copied().fold(f64::INFINITY, f64::min),
        query_rows: trajectory.iter().map(|l| l.n_in).sum(),
        trajectory,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchComparison {
    pub dynamic: BenchResult,
    pub fixed: BenchResult,
    /// Dynamic over static mean latency.
    pub ratio: f64,
}

/// Times the same weights with the dynamic update on and off. Iterations
/// alternate between the two so drift in machine load hits both alike.
pub fn bench_compare(cfg: &DecoderConfig, channels: usize, scene: &SceneData, warmup: usize, iters: usize) -> Result<BenchComparison> {
    let mut dyn_cfg = cfg.clone();
    dyn_cfg.dynamic = true;
    let dynamic = Model::new(&dyn_cfg, channels)?;
    bench_compare_model(&dynamic, scene, warmup, iters)
}

/// As [`bench_compare`], reusing trained weights.
pub fn bench_compare_model(model: &Model, scene: &SceneData, warmup: usize, iters: usize) -> Result<BenchComparison> {
    let mut dynamic = model.clone();
    dynamic.cfg.dynamic = true;
    let mut fixed = model.clone();
    fixed.cfg.dynamic = false;
    let models = [&dynamic, &fixed];
    let mut times = [Vec::new(), Vec::new()];
    let mut traj = [Vec::new(), Vec::new()];
    for it in 0..warmup + iters.max(1) {
        for (k, m) in models.iter().enumerate() {
            let r = bench_forward(m, scene, 0, 1)?;
            if it >= warmup {
                times[k].push(r.mean_secs);
                traj[k] = r.trajectory;
            }
        }
    }
    let [td, tf] = times;
    let [jd, jf] = traj;
    let dynamic = summarize(td, jd);
    let fixed = summarize(tf, jf);
    let ratio = dynamic.mean_secs / fixed.mean_secs;
    Ok(BenchComparison { dynamic, fixed, ratio })
}
