use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statequery::config::{LossConfig, RunConfig};
use statequery::decoder::{ForwardOptions, ForwardOutput, LayerOutput, Model};
use statequery::kernels::{grad_check, grad_check_params, Graph, Tape, Tensor};
use statequery::queries::{QueryBox, QuerySet, UpdateLog};
use statequery::simworld::generate_dataset;
use statequery::ssm::FeatureBundle;
use statequery::supervision::{
    assignment_cost, box_abs_errors, brute_force_assignment, focal_loss, hungarian, l1_box_loss, match_cost,
    match_layer, total_loss, total_loss_with, Frozen, BOX_SCALE,
};

fn rand_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    Tensor::from_fn(&[r, c], |_| rng.gen_range(0.0..10.0))
}

fn abox(x: f64, y: f64, theta: f64) -> QueryBox {
    QueryBox {
        x,
        y,
        z: 0.0,
        w: 2.0,
        l: 4.0,
        h: 1.5,
        theta,
        vx: 1.0,
        vy: 0.0,
    }
}

#[test]
fn hungarian_small_cases() {
    let one = hungarian(&Tensor::new(&[1, 1], vec![3.0]).unwrap()).unwrap();
    assert_eq!(one.pairs, vec![(0, 0)]);
    assert!(one.unmatched.is_empty());
    let diag = Tensor::from_fn(&[3, 3], |i| if i / 3 == i % 3 { 0.1 } else { 5.0 + i as f64 });
    assert_eq!(hungarian(&diag).unwrap().pairs, vec![(0, 0), (1, 1), (2, 2)]);
    let wide = hungarian(&Tensor::new(&[2, 3], vec![5.0, 1.0, 9.0, 1.0, 9.0, 9.0]).unwrap()).unwrap();
    assert_eq!(wide.pairs, vec![(0, 1), (1, 0)]);
    let tall = hungarian(&Tensor::new(&[3, 1], vec![4.0, 2.0, 3.0]).unwrap()).unwrap();
    assert_eq!(tall.pairs, vec![(1, 0)]);
    assert_eq!(tall.unmatched, vec![0, 2]);
    assert!(hungarian(&Tensor::new(&[1, 1], vec![f64::NAN]).unwrap()).is_err());
}

#[test]
fn hungarian_equals_brute_force_up_to_seven() {
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for r in 1..=7 {
            for c in [r, (r % 7) + 1] {
                let m = rand_matrix(&mut rng, r, c);
                let fast = hungarian(&m).unwrap();
                let (best, pairs) = brute_force_assignment(&m);
                assert_eq!(fast.pairs, pairs, "seed {seed} {r}x{c}");
                assert_eq!(assignment_cost(&m, &fast.pairs), best);
                assert_eq!(fast.pairs.len(), r.min(c));
            }
        }
    }
}

proptest! {
    #[test]
    fn assignment_ignores_positive_scaling(seed in 0u64..500, n in 1usize..7, s in 0.01f64..100.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = rand_matrix(&mut rng, n, n);
        let scaled = m.map(|v| v * s);
        prop_assert_eq!(hungarian(&m).unwrap().pairs, hungarian(&scaled).unwrap().pairs);
    }
}

#[test]
fn match_cost_cases() {
    let cfg = LossConfig::default();
    let gt = vec![(0, abox(1.0, 2.0, 0.0)), (2, abox(-5.0, 3.0, 1.0))];
    let boxes = Tensor::from_fn(&[3, 9], |i| {
        let row = [gt[0].1, gt[1].1, gt[1].1][i / 9].to_array();
        row[i % 9]
    });
    let logits = Tensor::from_fn(&[3, 4], |i| if (i / 4 == 0 && i % 4 == 0) || (i / 4 > 0 && i % 4 == 2) { 5.0 } else { -5.0 });
    let c = match_cost(&logits, &boxes, &gt, &cfg);
    assert!(c.at(&[0, 0]) < c.at(&[0, 1]));
    assert!(c.at(&[1, 1]) < c.at(&[1, 0]));
    assert_eq!(c.row(1), c.row(2));

    // Hand case: logit 0 (p = 1/2) and a 1 m x-offset.
    let logits = Tensor::zeros(&[1, 4]);
    let mut b = gt[0].1.to_array();
    b[0] += 1.0;
    let c = match_cost(&logits, &Tensor::new(&[1, 9], b.to_vec()).unwrap(), &gt[..1], &cfg);
    let want = cfg.match_cls * 0.5 + cfg.match_box * (1.0 / BOX_SCALE[0]) / 9.0;
    assert!((c.item() - want).abs() < 1e-15);

    let empty = match_layer(&logits, &Tensor::zeros(&[1, 9]), &[], &cfg).unwrap();
    assert!(empty.pairs.is_empty());
    assert_eq!(empty.unmatched, vec![0]);
}

#[test]
fn focal_loss_values() {
    let tape = Tape::new();
    let zero = tape.constant(Tensor::zeros(&[1, 1]));
    let v = focal_loss(&zero, &[Some(0)], 2.0, 0.25).unwrap().item();
    assert!((v - 0.25 * 0.25 * std::f64::consts::LN_2).abs() < 1e-15);

    let confident = tape.constant(Tensor::new(&[1, 2], vec![40.0, -40.0]).unwrap());
    assert!(focal_loss(&confident, &[Some(0)], 2.0, 0.25).unwrap().item() < 1e-30);

    // γ = 0 is α-weighted binary cross-entropy.
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::from_fn(&[3, 4], |_| rng.gen_range(-3.0..3.0));
    let targets = [Some(1), None, Some(3)];
    let f = focal_loss(&tape.constant(x.clone()), &targets, 0.0, 0.25).unwrap().item();
    let mut ce = 0.0;
    for i in 0..3 {
        for c in 0..4 {
            let p = 1.0 / (1.0 + (-x.at(&[i, c])).exp());
            ce += if targets[i] == Some(c) { -0.25 * p.ln() } else { -0.75 * (1.0 - p).ln() };
        }
    }
    assert!((f - ce / 3.0).abs() < 1e-12);
    assert!(focal_loss(&tape.constant(x), &[Some(4), None, None], 2.0, 0.25).is_err());
}

#[test]
fn focal_loss_gradient() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::from_fn(&[4, 3], |_| rng.gen_range(-4.0..4.0));
        let targets: Vec<Option<usize>> = (0..4).map(|_| rng.gen_bool(0.5).then(|| rng.gen_range(0..3))).collect();
        let r = grad_check(|v| focal_loss(&v[0], &targets, 2.0, 0.25), &[x]).unwrap();
        assert!(r.passed(1e-4), "seed {seed}: {}", r.max_rel_err);
    }
}

#[test]
fn l1_box_loss_values() {
    let tape = Tape::new();
    let gt = vec![(1, abox(3.0, 4.0, std::f64::consts::PI - 0.01))];
    let exact = tape.constant(Tensor::new(&[1, 9], gt[0].1.to_array().to_vec()).unwrap());
    let (l, flag) = l1_box_loss(&exact, &[(0, 0)], &gt).unwrap();
    assert_eq!((l.item(), flag), (0.0, false));

    let mut turned = gt[0].1.to_array();
    turned[6] = -std::f64::consts::PI + 0.01;
    let e = box_abs_errors(&turned, &gt[0].1.to_array());
    assert!((e[6] - 0.02).abs() < 1e-12);
    let (l, _) = l1_box_loss(&tape.constant(Tensor::new(&[1, 9], turned.to_vec()).unwrap()), &[(0, 0)], &gt).unwrap();
    assert!((l.item() - 0.02 / BOX_SCALE[6] / 9.0).abs() < 1e-12);

    // Single pair, x off by 1 and h off by 0.5.
    let mut b = gt[0].1.to_array();
    b[0] += 1.0;
    b[5] -= 0.5;
    let (l, _) = l1_box_loss(&tape.constant(Tensor::new(&[1, 9], b.to_vec()).unwrap()), &[(0, 0)], &gt).unwrap();
    assert!((l.item() - (1.0 / BOX_SCALE[0] + 0.5 / BOX_SCALE[5]) / 9.0).abs() < 1e-15);

    let (l, flag) = l1_box_loss(&exact, &[], &gt).unwrap();
    assert_eq!((l.item(), flag), (0.0, true));
}

#[test]
fn l1_box_loss_gradient() {
    let gt = vec![(0, abox(1.0, 1.0, 3.1)), (2, abox(-2.0, 0.5, -1.0))];
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::from_fn(&[3, 9], |_| rng.gen_range(-3.0..3.0));
        let r = grad_check(|v| Ok(l1_box_loss(&v[0], &[(0, 1), (2, 0)], &gt)?.0), &[x]).unwrap();
        assert!(r.passed(1e-4), "seed {seed}: {}", r.max_rel_err);
    }
}

fn handmade_output<'t>(tape: &'t Tape, perfect: bool) -> ForwardOutput<'t> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let steps: Vec<Tensor> = (0..3).map(|_| Tensor::from_fn(&[4, 2], |_| rng.gen_range(-1.0..1.0))).collect();
    let enhanced = steps.iter().map(|t| tape.constant(if perfect { t.clone() } else { t.map(|v| v + 0.5) })).collect();
    let predicted = (0..3)
        .map(|i| tape.constant(if i + 1 < 3 && perfect { steps[i + 1].clone() } else { Tensor::zeros(&[4, 2]) }))
        .collect();
    let bundle = FeatureBundle {
        target: steps,
        enhanced,
        predicted,
        mask: vec![vec![false; 4]; 3],
    };
    let boxes: Vec<f64> = [abox(1.0, 1.0, 0.0), abox(4.0, 0.0, 0.5)].iter().flat_map(|b| b.to_array()).collect();
    ForwardOutput {
        layers: vec![LayerOutput {
            input_boxes: Vec::new(),
            logits: tape.constant(Tensor::from_fn(&[2, 4], |i| i as f64 * 0.3 - 1.0)),
            boxes: tape.constant(Tensor::new(&[2, 9], boxes).unwrap()),
            bundles: vec![bundle],
            log: UpdateLog::default(),
        }],
        final_set: QuerySet {
            boxes: vec![abox(0.0, 0.0, 0.0)],
            features: tape.constant(Tensor::zeros(&[1, 2])),
            floor: 1,
            layer: 1,
        },
    }
}

#[test]
fn perfect_auxiliary_features_leave_only_detection() {
    let tape = Tape::new();
    let gt = vec![(1, abox(1.2, 0.8, 0.1))];
    let cfg = LossConfig::default();
    let out = handmade_output(&tape, true);
    let l = total_loss(&out, &gt, &cfg).unwrap();
    assert_eq!((l.recon, l.future), (0.0, 0.0));
    let det = l.cls + cfg.box_weight * l.boxes;
    assert!((l.total.item() - det).abs() < 1e-15);

    let noisy = handmade_output(&tape, false);
    let l = total_loss(&noisy, &gt, &cfg).unwrap();
    assert!(l.recon > 0.0 && l.future > 0.0);
    let want = l.cls + cfg.box_weight * l.boxes + cfg.recon_weight * l.recon + cfg.future_weight * l.future;
    assert!((l.total.item() - want).abs() < 1e-12);
    let no_aux = LossConfig { aux: false, ..cfg };
    let l2 = total_loss(&noisy, &gt, &no_aux).unwrap();
    assert_eq!((l2.recon, l2.future), (0.0, 0.0));
}

fn toy() -> RunConfig {
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

#[test]
fn total_loss_is_finite_and_non_negative_at_init() {
    let cfg = RunConfig::desk();
    let ds = generate_dataset(&cfg.world, 7, 2);
    let model = Model::new(&cfg.decoder, cfg.world.channels).unwrap();
    for sc in &ds.scenes {
        let g = Graph::new(&model.store);
        let out = model.forward(&g, sc, &ForwardOptions::masked(1)).unwrap();
        let l = total_loss(&out, &sc.scene.ground_truth(), &cfg.loss).unwrap();
        assert!(l.total.item().is_finite() && l.total.item() >= 0.0);
        for part in &l.layers {
            assert!(part.cls >= 0.0 && part.boxes >= 0.0 && part.recon >= 0.0 && part.future >= 0.0);
        }
        assert_eq!(l.layers.len(), cfg.decoder.layers);
    }
}

#[test]
fn end_to_end_gradient_on_a_toy_scene() {
    let cfg = toy();
    let ds = generate_dataset(&cfg.world, 11, 1);
    let sc = &ds.scenes[0];
    let gt = sc.scene.ground_truth();
    let mut model = Model::new(&cfg.decoder, cfg.world.channels).unwrap();
    // Channels zeroed at every point normalize to exactly 0, on the ReLU
    // kink while the layer-norm biases are 0; move them off it.
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for id in [model.layer.mix.channel_bias, model.layer.mix.point_bias] {
        for v in model.store.value_mut(id).data_mut() {
            *v = rng.gen_range(-0.1..0.1);
        }
    }
    let model = model;
    let opts = ForwardOptions::masked(3);
    let frozen = {
        let g = Graph::inference(&model.store);
        let out = model.forward(&g, sc, &opts).unwrap();
        let loss = total_loss(&out, &gt, &cfg.loss).unwrap();
        Frozen::capture(&out, &loss)
    };
    let ids: Vec<_> = model.store.ids().collect();
    let pinned = frozen.options(opts.mask_seed);
    let report = grad_check_params(&model.store, &ids, 6, |g| {
        let out = model.forward(g, sc, &pinned)?;
        Ok(total_loss_with(&out, &gt, &cfg.loss, Some(&frozen))?.total)
    })
    .unwrap();
    let worst = report.worst.map(|(i, e)| (model.store.name(ids[i]).to_string(), e));
    assert!(report.passed(1e-3), "{} at {:?}", report.max_rel_err, worst);
}
