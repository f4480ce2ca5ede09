use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statequery::kernels::{grad_check_params, Graph, ParamStore, Tape, Tensor, Var};
use statequery::ssm::{
    aux_losses, feedback, mask_features, ssm_scan, ssm_step, FeatureBundle, MaskConfig, SsmParams, SsmState,
    SsmWeights, TransformKind,
};

fn weights<'t>(tape: &'t Tape, a: Tensor, b: Tensor, c: Tensor, p: Tensor) -> SsmWeights<'t> {
    SsmWeights {
        a: tape.leaf(a),
        input: tape.leaf(b),
        output: tape.leaf(c),
        pred: tape.leaf(p),
    }
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], amp: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-amp..amp))
}

fn steps<'t>(tape: &'t Tape, xs: &[Tensor]) -> Vec<Var<'t>> {
    xs.iter().map(|x| tape.constant(x.clone())).collect()
}

#[test]
fn scalar_recurrence_by_hand() {
    let tape = Tape::new();
    let w = weights(
        &tape,
        Tensor::new(&[1], vec![0.5]).unwrap(),
        Tensor::new(&[2, 1], vec![1.0, 0.0]).unwrap(),
        Tensor::new(&[1, 1], vec![1.0]).unwrap(),
        Tensor::new(&[1, 1], vec![0.3]).unwrap(),
    );
    let xs: Vec<Tensor> = [1.0, 0.0, 0.0]
        .iter()
        .map(|&v| Tensor::new(&[1, 1], vec![v]).unwrap())
        .collect();
    let (bundle, state) = ssm_scan(&w, &steps(&tape, &xs), TransformKind::Identity, None, 0).unwrap();
    let y: Vec<f64> = bundle.enhanced.iter().map(|v| v.value().data()[0]).collect();
    assert_eq!(y, vec![1.0, 0.5, 0.25]);
    assert_eq!(state.t, 3);
}

#[test]
fn memoryless_when_a_is_zero() {
    let tape = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let d = 3;
    let mut b = Tensor::zeros(&[2 * d, d]);
    for i in 0..d {
        b.set(&[i, i], 1.0);
    }
    let w = weights(&tape, Tensor::zeros(&[d]), b, Tensor::eye(d), random(&mut rng, &[d, d], 1.0));
    let xs: Vec<Tensor> = (0..4).map(|_| random(&mut rng, &[5, d], 1.0)).collect();
    let (bundle, _) = ssm_scan(&w, &steps(&tape, &xs), TransformKind::Identity, None, 0).unwrap();
    for (y, x) in bundle.enhanced.iter().zip(&xs) {
        assert_eq!(y.value(), x);
    }
}

#[test]
fn hidden_state_matches_closed_form_unroll() {
    // With the prediction path disconnected, h_T = Σ_i A^{T-i} B x_i.
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (tokens, d, n, t_len) = (4, 3, 5, 6);
    let a = Tensor::from_fn(&[n], |_| rng.gen_range(-0.9..0.9));
    let mut b = random(&mut rng, &[2 * d, n], 1.0);
    for r in d..2 * d {
        for c in 0..n {
            b.set(&[r, c], 0.0);
        }
    }
    let xs: Vec<Tensor> = (0..t_len).map(|_| random(&mut rng, &[tokens, d], 1.0)).collect();
    let tape = Tape::new();
    let w = weights(&tape, a.clone(), b.clone(), random(&mut rng, &[n, d], 1.0), random(&mut rng, &[n, d], 1.0));
    let (_, state) = ssm_scan(&w, &steps(&tape, &xs), TransformKind::Identity, None, 0).unwrap();

    let bx = b.data();
    for tok in 0..tokens {
        for k in 0..n {
            let mut expect = 0.0;
            for (i, x) in xs.iter().enumerate() {
                let power = (t_len - 1 - i) as i32;
                let proj: f64 = (0..d).map(|j| x.at(&[tok, j]) * bx[j * n + k]).sum();
                expect += a.data()[k].powi(power) * proj;
            }
            let got = state.h.value().at(&[tok, k]);
            assert!((got - expect).abs() < 1e-12, "token {tok} state {k}: {got} vs {expect}");
        }
    }
}

#[test]
fn scan_is_bitwise_equal_to_explicit_loop() {
    for kind in [TransformKind::Identity, TransformKind::Fft] {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (tokens, d, n) = (6, 4, 8);
        let wd = kind.width(d);
        let (a, b, c, p) = (
            Tensor::from_fn(&[n], |_| rng.gen_range(-0.9..0.9)),
            random(&mut rng, &[2 * wd, n], 0.5),
            random(&mut rng, &[n, wd], 0.5),
            random(&mut rng, &[n, wd], 0.5),
        );
        let xs: Vec<Tensor> = (0..5).map(|_| random(&mut rng, &[tokens, d], 1.0)).collect();
        let tape = Tape::new();
        let w = weights(&tape, a, b, c, p);
        let inputs = steps(&tape, &xs);
        let (bundle, final_state) = ssm_scan(&w, &inputs, kind, None, 2).unwrap();

        let mut state = SsmState::zeros(&tape, tokens, n, 2);
        let mut pred = tape.constant(Tensor::zeros(&[tokens, wd]));
        for (t, x) in inputs.iter().enumerate() {
            let (next, y, y_next) = ssm_step(&w, &state, &kind.forward(x), &pred).unwrap();
            assert_eq!(kind.inverse(&y).unwrap().value(), bundle.enhanced[t].value());
            assert_eq!(kind.inverse(&y_next).unwrap().value(), bundle.predicted[t].value());
            state = next;
            pred = feedback(&y_next);
        }
        assert_eq!(state.h.value(), final_state.h.value());
        assert_eq!(final_state.layer, 2);
    }
}

#[test]
fn single_step_scan_is_one_step_with_zero_prediction() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let tape = Tape::new();
    let w = weights(
        &tape,
        Tensor::from_fn(&[3], |_| rng.gen_range(-0.9..0.9)),
        random(&mut rng, &[4, 3], 1.0),
        random(&mut rng, &[3, 2], 1.0),
        random(&mut rng, &[3, 2], 1.0),
    );
    let x = tape.constant(random(&mut rng, &[5, 2], 1.0));
    let (bundle, _) = ssm_scan(&w, std::slice::from_ref(&x), TransformKind::Identity, None, 0).unwrap();
    let zero = tape.constant(Tensor::zeros(&[5, 2]));
    let (_, y, _) = ssm_step(&w, &SsmState::zeros(&tape, 5, 3, 0), &x, &zero).unwrap();
    assert_eq!(y.value(), bundle.enhanced[0].value());
}

#[test]
fn fft_scan_matches_identity_on_dc_bin() {
    // One channel: the DFT is the value itself plus a zero imaginary part, so
    // an fft block that ignores imaginary lanes reproduces the identity block.
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 4;
    let a = Tensor::from_fn(&[n], |_| rng.gen_range(-0.9..0.9));
    let b = random(&mut rng, &[2, n], 1.0);
    let c = random(&mut rng, &[n, 1], 1.0);
    let p = random(&mut rng, &[n, 1], 1.0);
    let mut b_fft = Tensor::zeros(&[4, n]);
    let mut c_fft = Tensor::zeros(&[n, 2]);
    let mut p_fft = Tensor::zeros(&[n, 2]);
    for k in 0..n {
        b_fft.set(&[0, k], b.at(&[0, k]));
        b_fft.set(&[2, k], b.at(&[1, k]));
        c_fft.set(&[k, 0], c.at(&[k, 0]));
        p_fft.set(&[k, 0], p.at(&[k, 0]));
    }
    let xs: Vec<Tensor> = (0..6).map(|_| Tensor::full(&[3, 1], 0.7)).collect();
    let tape = Tape::new();
    let wi = weights(&tape, a.clone(), b, c, p);
    let wf = weights(&tape, a, b_fft, c_fft, p_fft);
    let (bi, _) = ssm_scan(&wi, &steps(&tape, &xs), TransformKind::Identity, None, 0).unwrap();
    let (bf, _) = ssm_scan(&wf, &steps(&tape, &xs), TransformKind::Fft, None, 0).unwrap();
    for t in 0..xs.len() {
        for (u, v) in bi.enhanced[t].value().data().iter().zip(bf.enhanced[t].value().data()) {
            assert!((u - v).abs() < 1e-9);
        }
        for (u, v) in bi.predicted[t].value().data().iter().zip(bf.predicted[t].value().data()) {
            assert!((u - v).abs() < 1e-9);
        }
    }
}

#[test]
fn step_rejects_token_mismatch() {
    let tape = Tape::new();
    let w = weights(&tape, Tensor::zeros(&[2]), Tensor::zeros(&[4, 2]), Tensor::zeros(&[2, 2]), Tensor::zeros(&[2, 2]));
    let state = SsmState::zeros(&tape, 3, 2, 0);
    let x = tape.constant(Tensor::zeros(&[4, 2]));
    let err = ssm_step(&w, &state, &x, &x).unwrap_err();
    assert!(err.to_string().contains("3 tokens"), "{err}");
}

#[test]
fn masking_ratio_zero_is_identity() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::from_fn(&[10, 3], |i| i as f64));
    let embed = tape.constant(Tensor::full(&[3], 9.0));
    let (m, mask) = mask_features(&x, 0.0, 7, &embed).unwrap();
    assert_eq!(m.value(), x.value());
    assert!(mask.iter().all(|&b| !b));
}

#[test]
fn masking_fraction_and_determinism() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::from_fn(&[1000, 2], |i| i as f64));
    let embed = tape.constant(Tensor::full(&[2], -1.0));
    for seed in 0..50 {
        let (m, mask) = mask_features(&x, 0.5, seed, &embed).unwrap();
        let frac = mask.iter().filter(|&&b| b).count() as f64 / 1000.0;
        assert!((0.45..=0.55).contains(&frac), "seed {seed}: fraction {frac}");
        for (r, &masked) in mask.iter().enumerate() {
            let row = m.value().row(r);
            if masked {
                assert_eq!(row, &[-1.0, -1.0]);
            } else {
                assert_eq!(row, x.value().row(r));
            }
        }
        let (_, again) = mask_features(&x, 0.5, seed, &embed).unwrap();
        assert_eq!(mask, again);
    }
    assert!(mask_features(&x, 1.0, 0, &embed).is_err());
}

#[test]
fn hidden_state_stays_bounded_over_long_runs() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let params = SsmParams::new(&mut store, "ssm", TransformKind::Identity, 4, 16, 8, &mut rng);
    let graph = Graph::inference(&store);
    let w = params.bind(&graph);
    assert!(w.a.value().data().iter().all(|a| a.abs() < 1.0));
    let mut state = SsmState::zeros(graph.tape(), 2, 16, 0);
    let mut pred = graph.constant(Tensor::zeros(&[2, 4]));
    let mut peak: f64 = 0.0;
    for _ in 0..10_000 {
        let x = graph.constant(Tensor::from_fn(&[2, 4], |_| if rng.gen_bool(0.5) { 1.0 } else { -1.0 }));
        let (next, _, y_next) = ssm_step(&w, &state, &x, &pred).unwrap();
        state = next;
        pred = feedback(&y_next);
        peak = peak.max(state.h.value().max_abs());
    }
    assert!(state.h.value().all_finite());
    assert!(peak < 1e3, "state grew to {peak}");
}

#[test]
fn predictions_use_only_own_feedback() {
    // Corrupting inputs from step k on leaves every prediction emitted before
    // k untouched, and the feedback fed at each step is the previous output,
    // never the ground truth.
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut store = ParamStore::new();
    let params = SsmParams::new(&mut store, "ssm", TransformKind::Fft, 4, 8, 8, &mut rng);
    let graph = Graph::inference(&store);
    let w = params.bind(&graph);
    let clean: Vec<Tensor> = (0..6).map(|_| random(&mut rng, &[3, 4], 1.0)).collect();
    let mut dirty = clean.clone();
    for x in dirty.iter_mut().skip(3) {
        *x = random(&mut rng, &[3, 4], 5.0);
    }
    let tape = graph.tape();
    let (a, _) = ssm_scan(&w, &steps(tape, &clean), TransformKind::Fft, None, 0).unwrap();
    let (b, _) = ssm_scan(&w, &steps(tape, &dirty), TransformKind::Fft, None, 0).unwrap();
    for t in 0..3 {
        assert_eq!(a.predicted[t].value(), b.predicted[t].value());
    }
    assert_ne!(a.predicted[3].value(), b.predicted[3].value());

    // Teacher forcing would feed the true next input instead.
    let mut state = SsmState::zeros(tape, 3, 8, 0);
    let mut forced = tape.constant(Tensor::zeros(&[3, 8]));
    let mut differs = false;
    for (t, x) in clean.iter().enumerate() {
        let xf = TransformKind::Fft.forward(&tape.constant(x.clone()));
        let (next, _, y_next) = ssm_step(&w, &state, &xf, &forced).unwrap();
        let y_next = TransformKind::Fft.inverse(&y_next).unwrap();
        differs |= y_next.value() != a.predicted[t].value();
        state = next;
        if let Some(truth) = clean.get(t + 1) {
            forced = TransformKind::Fft.forward(&tape.constant(truth.clone()));
        }
    }
    assert!(differs);
}

fn bundle_from<'t>(tape: &'t Tape, target: Vec<Tensor>, enhanced: Vec<Tensor>, predicted: Vec<Tensor>) -> FeatureBundle<'t> {
    FeatureBundle {
        mask: target.iter().map(|t| vec![false; t.rows()]).collect(),
        target,
        enhanced: enhanced.into_iter().map(|t| tape.leaf(t)).collect(),
        predicted: predicted.into_iter().map(|t| tape.leaf(t)).collect(),
    }
}

#[test]
fn aux_losses_by_hand() {
    let tape = Tape::new();
    let one = |v: f64| Tensor::new(&[1, 1], vec![v]).unwrap();
    let b = bundle_from(&tape, vec![one(0.0)], vec![one(2.0)], vec![one(5.0)]);
    let l = aux_losses(&b).unwrap();
    assert_eq!(l.recon.item(), 4.0);
    assert_eq!(l.future.item(), 0.0);
    assert!(l.future_undefined);

    let xs: Vec<Tensor> = (0..4).map(|i| Tensor::full(&[2, 3], i as f64)).collect();
    let mut shifted: Vec<Tensor> = xs[1..].to_vec();
    shifted.push(Tensor::full(&[2, 3], 100.0));
    let b = bundle_from(&tape, xs.clone(), xs.clone(), shifted);
    let l = aux_losses(&b).unwrap();
    assert_eq!(l.recon.item(), 0.0);
    assert_eq!(l.future.item(), 0.0);
    assert!(!l.future_undefined);

    // Per-element mean: residual 1 everywhere gives 1 regardless of size.
    let off: Vec<Tensor> = xs.iter().map(|x| x.map(|v| v + 1.0)).collect();
    let b = bundle_from(&tape, xs.clone(), off, xs.clone());
    let l = aux_losses(&b).unwrap();
    assert!((l.recon.item() - 1.0).abs() < 1e-15);
    assert!((l.future.item() - 1.0).abs() < 1e-15);
}

#[test]
fn aux_loss_gradients_match_finite_differences() {
    for kind in [TransformKind::Identity, TransformKind::Fft] {
        for seed in 0..3 {
            let mut rng = ChaCha8Rng::seed_from_u64(10 + seed);
            let mut store = ParamStore::new();
            let params = SsmParams::new(&mut store, "ssm", kind, 3, 4, 4, &mut rng);
            let xs: Vec<Tensor> = (0..4).map(|_| random(&mut rng, &[5, 3], 1.0)).collect();
            let ids = [params.a_raw, params.input_proj, params.output_proj, params.pred_proj, params.mask_embed];
            let report = grad_check_params(&store, &ids, 64, |g| {
                let w = params.bind(g);
                let embed = g.param(params.mask_embed);
                let inputs: Vec<Var> = xs.iter().map(|x| g.constant(x.clone())).collect();
                let mask = MaskConfig { ratio: 0.4, seed };
                let (bundle, _) = ssm_scan(&w, &inputs, kind, Some((mask, &embed)), 0)?;
                let l = aux_losses(&bundle)?;
                l.recon.add(&l.future)
            })
            .unwrap();
            assert!(report.passed(1e-4), "{kind:?} seed {seed}: {} at {:?}", report.max_rel_err, report.worst);
        }
    }
}
