//! The oracle suite behind `statequery verify`: every check reruns a
//! reference computation and reports pass/fail with a short detail.

use std::f64::consts::FRAC_PI_2;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::decoder::{Detection, ForwardOptions, Model};
use crate::error::{Error, Result};
use crate::evalmetrics::{average_precision, evaluate, match_predictions, tp_errors};
use crate::kernels::fft::{fft, ifft};
use crate::kernels::{grad_check, grad_check_params, GradCheckReport, Graph, Tape, Tensor, Var};
use crate::queries::{covariance, QueryBox};
use crate::simworld::generate_dataset;
use crate::ssm::{aux_losses, feedback, ssm_scan, ssm_step, SsmState, SsmWeights, TransformKind};
use crate::supervision::{
    assignment_cost, brute_force_assignment, focal_loss, hungarian, l1_box_loss, total_loss, total_loss_with, Frozen,
};

pub const OP_TOL: f64 = 1e-4;
pub const E2E_TOL: f64 = 1e-3;
pub const FFT_TOL: f64 = 1e-9;
pub const METRIC_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, Default)]
pub struct VerifyOptions {
    /// Swaps in an op whose backward is deliberately wrong, to show that
    /// the suite names the failure.
    pub corrupt_gradient: bool,
    /// Random forwards for the dynamic-query bound check.
    pub bound_forwards: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub secs: f64,
}

fn timed(name: &str, f: impl FnOnce() -> Result<(bool, String)>) -> CheckResult {
    let start = Instant::now();
    let (passed, detail) = match f() {
        Ok(r) => r,
        Err(e) => (false, format!("error: {e}")),
    };
    CheckResult {
        name: name.to_string(),
        passed,
        detail,
        secs: start.elapsed().as_secs_f64(),
    }
}

/// Runs every check in order.
pub fn run(opts: &VerifyOptions) -> Vec<CheckResult> {
    let mut out = vec![
        timed("scan/identity equals step loop", || scan_vs_loop(TransformKind::Identity)),
        timed("scan/fft equals step loop", || scan_vs_loop(TransformKind::Fft)),
        timed("fft/round trip", fft_round_trip),
        timed("hungarian/brute force N<=7", hungarian_vs_brute_force),
    ];
    for (name, case) in op_cases() {
        out.push(timed(&format!("grad/{name}"), || report(op_check(case)?, OP_TOL)));
    }
    if opts.corrupt_gradient {
        out.push(timed("grad/corrupted square", || report(corrupted_check()?, OP_TOL)));
    }
    out.push(timed("grad/end-to-end toy", || report(end_to_end_check()?, E2E_TOL)));
    out.push(timed("bounds/dynamic queries", || {
        dynamic_bounds(opts.bound_forwards.unwrap_or(100))
    }));
    out.push(timed("bounds/900 to 269 trajectory", trajectory_check));
    out.push(timed("metrics/fixtures", metric_fixtures));
    out
}

pub fn all_passed(results: &[CheckResult]) -> bool {
    results.iter().all(|r| r.passed)
}

/// Fixed-width table, one row per check.
pub fn render_table(results: &[CheckResult]) -> String {
    let width = results.iter().map(|r| r.name.len()).max().unwrap_or(5).max(5);
    let mut s = format!("{:<width$}  {:<4}  {:>8}  detail\n", "check", "ok", "secs");
    for r in results {
        s.push_str(&format!(
            "{:<width$}  {:<4}  {:>8.2}  {}\n",
            r.name,
            if r.passed { "PASS" } else { "FAIL" },
            r.secs,
            r.detail
        ));
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    s.push_str(&format!("{} checks, {} failed\n", results.len(), failed));
    s
}

fn report(r: GradCheckReport, tol: f64) -> Result<(bool, String)> {
    Ok((
        r.passed(tol),
        format!("max rel err {:.2e} over {} entries (tol {tol:.0e})", r.max_rel_err, r.entries_checked),
    ))
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], amp: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-amp..amp))
}

fn scan_vs_loop(kind: TransformKind) -> Result<(bool, String)> {
    let mut mismatches = 0;
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (tokens, d, n) = (6, 4, 8);
        let wd = kind.width(d);
        let tape = Tape::new();
        let w = SsmWeights {
            a: tape.leaf(Tensor::from_fn(&[n], |_| rng.gen_range(-0.9..0.9))),
            input: tape.leaf(random(&mut rng, &[2 * wd, n], 0.5)),
            output: tape.leaf(random(&mut rng, &[n, wd], 0.5)),
            pred: tape.leaf(random(&mut rng, &[n, wd], 0.5)),
        };
        let inputs: Vec<Var<'_>> = (0..5).map(|_| tape.constant(random(&mut rng, &[tokens, d], 1.0))).collect();
        let (bundle, last) = ssm_scan(&w, &inputs, kind, None, 0)?;
        let mut state = SsmState::zeros(&tape, tokens, n, 0);
        let mut pred = tape.constant(Tensor::zeros(&[tokens, wd]));
        for (t, x) in inputs.iter().enumerate() {
            let (next, y, y_next) = ssm_step(&w, &state, &kind.forward(x), &pred)?;
            mismatches += (kind.inverse(&y)?.value() != bundle.enhanced[t].value()) as usize;
            mismatches += (kind.inverse(&y_next)?.value() != bundle.predicted[t].value()) as usize;
            state = next;
            pred = feedback(&y_next);
        }
        mismatches += (state.h.value() != last.h.value()) as usize;
    }
    Ok((mismatches == 0, format!("10 seeds x 5 steps, {mismatches} bitwise mismatches")))
}

fn fft_round_trip() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut worst = 0.0f64;
    for n in 1..=64 {
        let x = random(&mut rng, &[3, n], 1.0);
        let (re, im) = fft(&x);
        let (back, imag) = ifft(&re, &im)?;
        let err = back.zip_map(&x, |a, b| (a - b).abs())?.max_abs().max(imag.max_abs());
        worst = worst.max(err);
    }
    Ok((worst < FFT_TOL, format!("lengths 1..=64, max abs err {worst:.2e}")))
}

fn hungarian_vs_brute_force() -> Result<(bool, String)> {
    let mut bad = 0;
    let mut cases = 0;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for r in 1..=7 {
            for c in [r, (r % 7) + 1] {
                let m = Tensor::from_fn(&[r, c], |_| rng.gen_range(0.0..10.0));
                let fast = hungarian(&m)?;
                let (best, pairs) = brute_force_assignment(&m);
                cases += 1;
                bad += (fast.pairs != pairs || assignment_cost(&m, &fast.pairs) != best) as usize;
            }
        }
    }
    Ok((bad == 0, format!("{cases} matrices, {bad} disagreements")))
}

type OpFn = for<'t> fn(&[Var<'t>]) -> Result<Var<'t>>;

/// Each case: input shapes and the op, reduced to a scalar by a fixed
/// weighting in [`op_check`].
fn op_cases() -> Vec<(&'static str, (Vec<Vec<usize>>, OpFn))> {
    fn gt() -> Vec<(usize, QueryBox)> {
        let b = |x: f64, th: f64| QueryBox {
            x,
            y: 1.0,
            z: 0.0,
            w: 2.0,
            l: 4.0,
            h: 1.5,
            theta: th,
            vx: 1.0,
            vy: 0.0,
        };
        vec![(0, b(1.0, 3.1)), (2, b(-2.0, -1.0))]
    }
    fn ssm_loss<'t>(x: &[Var<'t>], kind: TransformKind) -> Result<Var<'t>> {
        let w = SsmWeights {
            a: x[0].tanh(),
            input: x[1].clone(),
            output: x[2].clone(),
            pred: x[3].clone(),
        };
        // The clip is data, not a probed input: its values double as the
        // stop-gradient targets of the auxiliary losses.
        let tape = x[0].tape();
        let steps: Vec<Var<'t>> = (0..3)
            .map(|t| tape.constant(Tensor::from_fn(&[3, 2], |i| ((i + 7 * t) as f64 * 1.3).sin())))
            .collect();
        let (bundle, _) = ssm_scan(&w, &steps, kind, None, 0)?;
        let aux = aux_losses(&bundle)?;
        aux.recon.add(&aux.future)
    }
    let v = |s: &[&[usize]]| s.iter().map(|x| x.to_vec()).collect::<Vec<_>>();
    vec![
        ("linear", (v(&[&[3, 4], &[4, 2], &[2]]), |x| x[0].matmul(&x[1])?.add_row(&x[2]))),
        ("mul", (v(&[&[3, 4], &[3, 4]]), |x| x[0].mul(&x[1]))),
        ("sigmoid", (v(&[&[3, 4]]), |x| Ok(x[0].sigmoid()))),
        ("tanh", (v(&[&[3, 4]]), |x| Ok(x[0].tanh()))),
        ("relu", (v(&[&[3, 4]]), |x| Ok(x[0].relu()))),
        ("softmax", (v(&[&[3, 4]]), |x| Ok(x[0].softmax()))),
        ("div", (v(&[&[3, 4], &[3, 4]]), |x| x[0].div(&x[1].square().add_scalar(0.5)))),
        ("layer norm", (v(&[&[3, 4], &[4], &[4]]), |x| x[0].layer_norm(&x[1], &x[2]))),
        ("bmm", (v(&[&[2, 3, 4], &[2, 4, 3]]), |x| x[0].bmm(&x[1]))),
        ("transpose", (v(&[&[2, 3, 4]]), |x| Ok(x[0].transpose()))),
        ("gather rows", (v(&[&[4, 3]]), |x| x[0].gather_rows(&[3, 0, 3, 1]))),
        ("mask rows", (v(&[&[4, 3], &[3]]), |x| x[0].mask_rows(&[true, false, false, true], &x[1]))),
        ("fft", (v(&[&[3, 5]]), |x| Ok(x[0].fft_packed()))),
        ("inverse fft", (v(&[&[3, 10]]), |x| x[0].ifft_packed_real())),
        ("covariance", (v(&[&[5, 3]]), |x| covariance(&x[0]))),
        ("focal loss", (v(&[&[4, 3]]), |x| focal_loss(&x[0], &[Some(1), None, Some(0), None], 2.0, 0.25))),
        ("l1 box loss", (v(&[&[3, 9]]), |x| Ok(l1_box_loss(&x[0], &[(0, 0), (2, 1)], &gt())?.0))),
        ("ssm scan identity", (v(&[&[4], &[4, 4], &[4, 2], &[4, 2]]), |x| ssm_loss(x, TransformKind::Identity))),
        ("ssm scan fft", (v(&[&[4], &[8, 4], &[4, 4], &[4, 4]]), |x| ssm_loss(x, TransformKind::Fft))),
    ]
}

fn weighted_sum<'t>(v: &Var<'t>) -> Result<Var<'t>> {
    let w = Tensor::from_fn(v.shape(), |i| ((i as f64) * 0.7).sin() + 0.3);
    v.mul(&v.tape().constant(w)).map(|p| p.sum())
}

fn op_check((shapes, f): (Vec<Vec<usize>>, OpFn)) -> Result<GradCheckReport> {
    let mut merged: Option<GradCheckReport> = None;
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs: Vec<Tensor> = shapes.iter().map(|s| random(&mut rng, s, 1.5)).collect();
        let r = grad_check(|xs| weighted_sum(&f(xs)?), &inputs)?;
        merged = Some(match merged {
            Some(m) if m.max_rel_err >= r.max_rel_err => GradCheckReport {
                entries_checked: m.entries_checked + r.entries_checked,
                ..m
            },
            Some(m) => GradCheckReport {
                entries_checked: m.entries_checked + r.entries_checked,
                ..r
            },
            None => r,
        });
    }
    merged.ok_or_else(|| Error::contract("no seeds"))
}

/// `x²` with a backward that is off by 10%.
fn corrupted_square<'t>(x: &Var<'t>) -> Var<'t> {
    let xv = x.value().clone();
    x.tape().record(x.value().map(|v| v * v), &[x], move |g, _| {
        vec![Some(g.zip_map(&xv, |gi, xi| 2.2 * gi * xi).expect("same shape"))]
    })
}

fn corrupted_check() -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    grad_check(|xs| weighted_sum(&corrupted_square(&xs[0])), &[random(&mut rng, &[3, 4], 1.5)])
}

/// Tiny single-camera world and model for the full-stack gradient check.
pub fn toy_config() -> RunConfig {
    let mut c = RunConfig::desk();
    c.world.frames = 2;
    c.world.cameras = 1;
    c.world.hfov_deg = 120.0;
    c.world.channels = 8;
    c.world.image_width = 40;
    c.world.image_height = 24;
    c.world.objects_min = 2;
    c.world.objects_max = 2;
    c.world.range_min = 4.0;
    c.world.range_max = 8.0;
    c.decoder.queries = 3;
    c.decoder.floor = 2;
    c.decoder.layers = 2;
    c.decoder.dim = 4;
    c.decoder.points = 2;
    c.decoder.state_dim = 4;
    c.decoder.heads = 2;
    c.decoder.init.xy_std = 3.0;
    c
}

/// Finite differences through sampling, scan, mixing, heads and the query
/// update. Matches, aux targets and inter-layer boxes are held fixed, and
/// the layer-norm biases are moved off 0 so no channel sits on the ReLU kink.
fn end_to_end_check() -> Result<GradCheckReport> {
    let cfg = toy_config();
    let ds = generate_dataset(&cfg.world, 11, 1);
    let sc = &ds.scenes[0];
    let gt = sc.scene.ground_truth();
    let mut model = Model::new(&cfg.decoder, cfg.world.channels)?;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for id in [model.layer.mix.channel_bias, model.layer.mix.point_bias] {
        for v in model.store.value_mut(id).data_mut() {
            *v = rng.gen_range(-0.1..0.1);
        }
    }
    let opts = ForwardOptions::masked(3);
    let frozen = {
        let g = Graph::inference(&model.store);
        let out = model.forward(&g, sc, &opts)?;
        let loss = total_loss(&out, &gt, &cfg.loss)?;
        Frozen::capture(&out, &loss)
    };
    let ids: Vec<_> = model.store.ids().collect();
    let pinned = frozen.options(opts.mask_seed);
    grad_check_params(&model.store, &ids, 6, |g| {
        let out = model.forward(g, sc, &pinned)?;
        Ok(total_loss_with(&out, &gt, &cfg.loss, Some(&frozen))?.total)
    })
}

/// Config for the bound check: the floor is far below every count reached,
/// so the removal band is never clipped.
pub fn bounds_config() -> RunConfig {
    let mut c = RunConfig::desk();
    c.world.frames = 2;
    c.world.cameras = 3;
    c.decoder.queries = 200;
    c.decoder.floor = 1;
    c.decoder.layers = 3;
    c.decoder.dim = 8;
    c.decoder.points = 2;
    c.decoder.state_dim = 8;
    c.decoder.heads = 2;
    c
}

/// Per-layer query counts over `n` forwards with fresh weights and scenes.
pub fn dynamic_bounds(n: usize) -> Result<(bool, String)> {
    let base = bounds_config();
    let mut layers = 0;
    let mut violations = Vec::new();
    let mut removed_range = (f64::INFINITY, f64::NEG_INFINITY);
    for i in 0..n as u64 {
        let mut cfg = base.clone();
        cfg.decoder.seed = 1000 + i;
        let scene = &generate_dataset(&cfg.world, 5000 + i, 1).scenes[0];
        let model = Model::new(&cfg.decoder, cfg.world.channels)?;
        let g = Graph::inference(&model.store);
        let out = model.forward(&g, scene, &ForwardOptions::default())?;
        for log in out.trajectory() {
            layers += 1;
            let after_merge = log.n_in - log.merged;
            let frac = log.removed as f64 / after_merge as f64;
            removed_range = (removed_range.0.min(frac), removed_range.1.max(frac));
            let survivors = after_merge - log.removed;
            if !(0.2..=0.3).contains(&frac) {
                violations.push(format!("forward {i} layer {}: removed {}/{after_merge}", log.layer, log.removed));
            }
            if log.split * 20 > survivors {
                violations.push(format!("forward {i} layer {}: split {}/{survivors}", log.layer, log.split));
            }
            if log.n_out < cfg.decoder.floor || log.n_out != survivors + log.split {
                violations.push(format!("forward {i} layer {}: n_out {}", log.layer, log.n_out));
            }
        }
    }
    let detail = match violations.first() {
        Some(v) => format!("{} violations, first: {v}", violations.len()),
        None => format!(
            "{n} forwards, {layers} layers, removed fraction in [{:.3}, {:.3}]",
            removed_range.0, removed_range.1
        ),
    };
    Ok((violations.is_empty(), detail))
}

fn trajectory_check() -> Result<(bool, String)> {
    let mut cfg = RunConfig::default();
    cfg.world.frames = 2;
    let scene = &generate_dataset(&cfg.world, 3, 1).scenes[0];
    let model = Model::new(&cfg.decoder, cfg.world.channels)?;
    let g = Graph::inference(&model.store);
    let out = model.forward(&g, scene, &ForwardOptions::default())?;
    let counts: Vec<usize> = std::iter::once(cfg.decoder.queries)
        .chain(out.trajectory().iter().map(|l| l.n_out))
        .collect();
    let last = *counts.last().unwrap_or(&0);
    Ok((last == cfg.decoder.floor, format!("{counts:?}")))
}

fn metric_fixtures() -> Result<(bool, String)> {
    let close = |a: f64, b: f64| (a - b).abs() <= METRIC_TOL;
    let g = QueryBox {
        x: 3.0,
        y: 4.0,
        z: 0.8,
        w: 2.0,
        l: 4.0,
        h: 1.6,
        theta: 0.3,
        vx: 1.0,
        vy: -0.5,
    };
    let det = |score: f64, bbox: QueryBox| Detection { class: 0, score, bbox };
    let mut failures = Vec::new();
    let mut check = |name: &str, ok: bool| {
        if !ok {
            failures.push(name.to_string());
        }
    };
    check("AP perfect", close(average_precision(&[true, true], 2).unwrap_or(-1.0), 1.0));
    check("AP no hits", close(average_precision(&[false], 1).unwrap_or(-1.0), 0.0));
    check("AP TP then FP", close(average_precision(&[true, false], 1).unwrap_or(-1.0), 1.0));
    check("AP FP then TP", close(average_precision(&[false, true], 1).unwrap_or(-1.0), 0.5));
    check("exact errors", tp_errors(&[(g, g)]).map(|e| e.as_array()) == Some([0.0; 4]));
    let mut rot = g;
    rot.theta += FRAC_PI_2;
    check("AOE pi/2", tp_errors(&[(rot, g)]).is_some_and(|e| close(e.aoe, FRAC_PI_2)));
    let mut half = g;
    half.w /= 2.0;
    half.l /= 2.0;
    half.h /= 2.0;
    check("ASE half scale", tp_errors(&[(half, g)]).is_some_and(|e| close(e.ase, 7.0 / 8.0)));
    let mut moved = g;
    moved.x += 3.0;
    moved.y += 4.0;
    moved.vx += 0.6;
    moved.vy -= 0.8;
    check(
        "ATE/AVE 3-4-5",
        tp_errors(&[(moved, g)]).is_some_and(|e| close(e.ate, 5.0) && close(e.ave, 1.0)),
    );
    let gts = vec![g];
    check(
        "greedy by score",
        match_predictions(&[det(0.3, g), det(0.9, moved)], &gts, 6.0) == vec![None, Some(0)],
    );
    let rep = evaluate(&[vec![det(0.9, g)]], &[vec![(0, g)]])?;
    check("perfect composite", close(rep.composite, 1.0) && close(rep.map, 1.0));
    let n = 11;
    Ok((
        failures.is_empty(),
        if failures.is_empty() {
            format!("{n} fixtures exact to {METRIC_TOL:.0e}")
        } else {
            format!("failed: {}", failures.join(", "))
        },
    ))
}
