use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statequery::config::QueryInitConfig;
use statequery::kernels::{grad_check, grad_check_params, Graph, ParamStore, Tape, Tensor, Var};
use statequery::queries::{
    covariance, cross_attend, init_queries, merge_pairs, merge_with, remove, remove_count, remove_with, split_count,
    split_with, update, wrap_angle, QueryBox, QuerySet, QueryUpdateHeads,
};

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn boxes(n: usize, rng: &mut ChaCha8Rng) -> Vec<QueryBox> {
    (0..n)
        .map(|_| QueryBox {
            x: rng.gen_range(-10.0..10.0),
            y: rng.gen_range(-10.0..10.0),
            z: 0.0,
            w: 2.0,
            l: 4.0,
            h: 4.0,
            theta: rng.gen_range(-3.0..3.0),
            vx: 0.0,
            vy: 0.0,
        })
        .collect()
}

fn qset<'t>(tape: &'t Tape, features: Tensor, floor: usize, rng: &mut ChaCha8Rng) -> QuerySet<'t> {
    QuerySet {
        boxes: boxes(features.rows(), rng),
        features: tape.leaf(features),
        floor,
        layer: 0,
    }
}

fn labels<'t>(tape: &'t Tape, v: &[f64]) -> Var<'t> {
    tape.leaf(Tensor::new(&[v.len(), 1], v.to_vec()).unwrap())
}

#[test]
fn init_places_pillars() {
    let tape = Tape::new();
    let cfg = QueryInitConfig::default();
    let q = init_queries(&tape, 50, 8, 10, &cfg, 3).unwrap();
    assert_eq!(q.len(), 50);
    for b in &q.boxes {
        assert_eq!(b.z, 0.0);
        assert_eq!(b.h, 4.0);
        assert_eq!((b.vx, b.vy), (0.0, 0.0));
        assert!(b.w > 0.0 && b.l > 0.0);
        assert!(b.theta > -std::f64::consts::PI && b.theta <= std::f64::consts::PI);
    }
    let again = init_queries(&tape, 50, 8, 10, &cfg, 3).unwrap();
    assert_eq!(q.boxes, again.boxes);
    assert_eq!(q.features.value(), again.features.value());
    assert!(q.features.value().max_abs() < 0.2);
}

#[test]
fn wrap_angle_range() {
    assert_eq!(wrap_angle(std::f64::consts::PI), std::f64::consts::PI);
    assert!((wrap_angle(-std::f64::consts::PI) - std::f64::consts::PI).abs() < 1e-15);
    assert!((wrap_angle(3.0 * std::f64::consts::PI / 2.0) + std::f64::consts::FRAC_PI_2).abs() < 1e-12);
}

#[test]
fn covariance_hand_cases() {
    let tape = Tape::new();
    let f = tape.constant(Tensor::new(&[2, 2], vec![1.0, -1.0, 2.0, -2.0]).unwrap());
    assert_eq!(covariance(&f).unwrap().value().data(), &[2.0, 4.0, 4.0, 8.0]);
    let c = tape.constant(Tensor::new(&[2, 3], vec![5.0; 6]).unwrap());
    assert!(covariance(&c).unwrap().value().data().iter().all(|&v| v == 0.0));
    let d = tape.constant(Tensor::new(&[3, 3], vec![1.0, 2.0, 4.0, 1.0, 2.0, 4.0, 0.0, 1.0, -1.0]).unwrap());
    let cv = covariance(&d).unwrap();
    let c = cv.value();
    assert_eq!(c.at(&[0, 0]), c.at(&[0, 1]));
    assert_eq!(c.at(&[0, 1]), c.at(&[1, 1]));
    assert!(covariance(&tape.constant(Tensor::zeros(&[1, 3]))).is_err());
}

proptest! {
    #[test]
    fn covariance_is_symmetric_psd_diagonal(seed in 0u64..1000, n in 2usize..8, d in 2usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tape = Tape::new();
        let cv = covariance(&tape.constant(random(&mut rng, &[n, d]))).unwrap();
        let c = cv.value();
        for i in 0..n {
            prop_assert!(c.at(&[i, i]) >= -1e-12);
            for j in 0..n {
                prop_assert!((c.at(&[i, j]) - c.at(&[j, i])).abs() <= 1e-12);
            }
        }
    }
}

fn heads(dim: usize, seed: u64) -> (ParamStore, QueryUpdateHeads) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = QueryUpdateHeads::new(&mut store, "upd", dim, 2, &mut rng);
    (store, h)
}

#[test]
fn attention_over_a_single_token_is_the_value_projection() {
    let (store, h) = heads(4, 0);
    let g = Graph::new(&store);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let q = qset(g.tape(), random(&mut rng, &[3, 4]), 1, &mut rng);
    let s = g.constant(random(&mut rng, &[1, 4]));
    let out = cross_attend(&g, &h.attention, &q, &s, None).unwrap();
    let v = h.attention.v.forward(&g, &s).unwrap();
    let o = h.attention.o.forward(&g, &v).unwrap();
    for r in 0..3 {
        for c in 0..4 {
            let want = q.features.value().at(&[r, c]) + o.value().at(&[0, c]);
            assert!((out.features.value().at(&[r, c]) - want).abs() < 1e-12);
        }
    }
}

#[test]
fn attention_permutation_properties() {
    let (store, h) = heads(4, 1);
    let g = Graph::new(&store);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let q = qset(g.tape(), random(&mut rng, &[3, 4]), 1, &mut rng);
    let s_t = random(&mut rng, &[5, 4]);
    let perm = [3, 0, 4, 1, 2];
    let s_p = Tensor::from_fn(&[5, 4], |i| s_t.data()[perm[i / 4] * 4 + i % 4]);
    let a = cross_attend(&g, &h.attention, &q, &g.constant(s_t.clone()), None).unwrap();
    let b = cross_attend(&g, &h.attention, &q, &g.constant(s_p), None).unwrap();
    for (x, y) in a.features.value().data().iter().zip(b.features.value().data()) {
        assert!((x - y).abs() < 1e-12);
    }
    let qp_t = Tensor::from_fn(&[3, 4], |i| q.features.value().data()[[2, 0, 1][i / 4] * 4 + i % 4]);
    let qp = QuerySet {
        boxes: vec![q.boxes[2], q.boxes[0], q.boxes[1]],
        features: g.constant(qp_t),
        floor: 1,
        layer: 0,
    };
    let c = cross_attend(&g, &h.attention, &qp, &g.constant(s_t), None).unwrap();
    for (j, &i) in [2, 0, 1].iter().enumerate() {
        for k in 0..4 {
            assert!((c.features.value().at(&[j, k]) - a.features.value().at(&[i, k])).abs() < 1e-12);
        }
    }
}

#[test]
fn attention_gradients() {
    let (store, h) = heads(4, 3);
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = vec![random(&mut rng, &[3, 4]), random(&mut rng, &[5, 4]), random(&mut rng, &[3, 4])];
        let bx = boxes(3, &mut rng);
        let report = grad_check(
            |x| {
                let q = QuerySet { boxes: bx.clone(), features: x[0].clone(), floor: 1, layer: 0 };
                attention_on(&store, &h, &q, &x[1], &x[2])
            },
            &inputs,
        )
        .unwrap();
        assert!(report.passed(1e-4), "seed {seed}: {} at {:?}", report.max_rel_err, report.worst);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let f = random(&mut rng, &[3, 4]);
    let s = random(&mut rng, &[5, 4]);
    let bx = boxes(3, &mut rng);
    let report = grad_check_params(&store, &h.attention.params(), 16, |g| {
        let q = QuerySet { boxes: bx.clone(), features: g.constant(f.clone()), floor: 1, layer: 0 };
        let out = cross_attend(g, &h.attention, &q, &g.constant(s.clone()), None)?;
        weighted(&out.features)
    })
    .unwrap();
    assert!(report.passed(1e-4), "params: {} at {:?}", report.max_rel_err, report.worst);
}

/// Attention written against the values of the stored weights, so inputs can
/// live on a plain tape.
fn attention_on<'t>(store: &ParamStore, h: &QueryUpdateHeads, q: &QuerySet<'t>, s: &Var<'t>, pos: &Var<'t>) -> statequery::Result<Var<'t>> {
    let tape = s.tape();
    let lin = |l: &statequery::nn::Linear, x: &Var<'t>| -> statequery::Result<Var<'t>> {
        x.matmul(&tape.constant(store.value(l.weight).clone()))?
            .add_row(&tape.constant(store.value(l.bias).clone()))
    };
    let a = &h.attention;
    let qi = q.features.add(pos)?;
    let (qq, k, v) = (lin(&a.q, &qi)?, lin(&a.k, s)?, lin(&a.v, s)?);
    let dh = 4 / a.heads;
    let mut outs = Vec::new();
    for hh in 0..a.heads {
        let w = qq
            .slice_last(hh * dh, dh)?
            .matmul(&k.slice_last(hh * dh, dh)?.transpose())?
            .scale(1.0 / (dh as f64).sqrt())
            .softmax();
        outs.push(w.matmul(&v.slice_last(hh * dh, dh)?)?);
    }
    let refs: Vec<&Var> = outs.iter().collect();
    let out = lin(&a.o, &Var::concat_last(&refs)?)?.add(&q.features)?;
    weighted(&out)
}

fn weighted<'t>(v: &Var<'t>) -> statequery::Result<Var<'t>> {
    let w = v.tape().constant(Tensor::from_fn(v.shape(), |i| (i as f64 * 0.53).sin() + 0.2));
    Ok(v.mul(&w)?.sum())
}

#[test]
fn attention_helper_matches_library() {
    let (store, h) = heads(4, 4);
    let g = Graph::new(&store);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let q = qset(g.tape(), random(&mut rng, &[3, 4]), 1, &mut rng);
    let s = g.constant(random(&mut rng, &[6, 4]));
    let pos = g.constant(random(&mut rng, &[3, 4]));
    let lib = weighted(&cross_attend(&g, &h.attention, &q, &s, Some(&pos)).unwrap().features).unwrap();
    let mine = attention_on(&store, &h, &q, &s, &pos).unwrap();
    assert!((lib.item() - mine.item()).abs() < 1e-12);
}

#[test]
fn merge_of_duplicates_is_idempotent() {
    let tape = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let row = random(&mut rng, &[1, 5]);
    let f = Tensor::from_fn(&[2, 5], |i| row.data()[i % 5]);
    let mut q = qset(&tape, f, 1, &mut rng);
    q.boxes[1] = q.boxes[0];
    let cov = covariance(&q.features).unwrap();
    let (m, count) = merge_with(&q, cov.value(), &labels(&tape, &[1.0, 1.0]), 1).unwrap();
    assert_eq!(count, 1);
    assert_eq!(m.len(), 1);
    assert_eq!(m.boxes[0].to_array(), q.boxes[0].to_array());
    for (a, b) in m.features.value().data().iter().zip(row.data()) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn merge_with_zero_labels_is_identity() {
    let tape = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let q = qset(&tape, random(&mut rng, &[6, 4]), 1, &mut rng);
    let cov = covariance(&q.features).unwrap();
    let (m, count) = merge_with(&q, cov.value(), &labels(&tape, &[0.0; 6]), 5).unwrap();
    assert_eq!(count, 0);
    assert_eq!(m.boxes, q.boxes);
    assert_eq!(m.features.value(), q.features.value());
}

#[test]
fn merge_pairs_duplicates_like_brute_force() {
    // Two duplicate pairs: (0, 2) and (1, 3).
    let tape = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..20 {
        let a = random(&mut rng, &[1, 6]);
        let b = random(&mut rng, &[1, 6]);
        let f = Tensor::from_fn(&[4, 6], |i| if (i / 6) % 2 == 0 { a.data()[i % 6] } else { b.data()[i % 6] });
        let q = qset(&tape, f, 1, &mut rng);
        let cov = covariance(&q.features).unwrap();
        let c = cov.value();
        let pairs = merge_pairs(c, &[1.0; 4], 3);
        // Brute force over the three perfect pairings of four items.
        let pairings = [[(0, 1), (2, 3)], [(0, 2), (1, 3)], [(0, 3), (1, 2)]];
        let best = pairings
            .iter()
            .max_by(|x, y| {
                let s = |p: &[(usize, usize); 2]| p.iter().map(|&(i, j)| c.at(&[i, j])).sum::<f64>();
                s(x).total_cmp(&s(y))
            })
            .unwrap();
        let mut got: Vec<(usize, usize)> = pairs.iter().map(|&(i, j)| (i.min(j), i.max(j))).collect();
        got.sort();
        assert_eq!(got, best.to_vec());
        for &(i, j) in &pairs {
            let argmax = (0..4).filter(|&k| k != i).max_by(|&x, &y| c.at(&[i, x]).total_cmp(&c.at(&[i, y])).then(y.cmp(&x))).unwrap();
            assert_eq!(j, argmax);
        }
        let (m, count) = merge_with(&q, c, &labels(&tape, &[1.0; 4]), 3).unwrap();
        assert_eq!((count, m.len()), (2, 2));
    }
}

#[test]
fn merge_respects_budget_and_single_use() {
    let tape = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let q = qset(&tape, random(&mut rng, &[10, 4]), 1, &mut rng);
    let cov = covariance(&q.features).unwrap();
    let lab: Vec<f64> = (0..10).map(|_| rng.gen_range(0.5..1.0)).collect();
    for budget in 0..6 {
        let pairs = merge_pairs(cov.value(), &lab, budget);
        assert!(pairs.len() <= budget);
        let mut seen = std::collections::HashSet::new();
        for (i, j) in pairs {
            assert!(seen.insert(i) && seen.insert(j));
        }
    }
}

#[test]
fn remove_counts() {
    assert_eq!(remove_count(900, 0.30), 270);
    assert_eq!(remove_count(900, 0.2), 180);
    for n in 5usize..2000 {
        if n.div_ceil(5) > 3 * n / 10 {
            // No integer count lands inside the band (n = 6).
            continue;
        }
        for r in [0.2, 0.2001, 0.25, 0.2999] {
            let k = remove_count(n, r);
            let frac = k as f64 / n as f64;
            assert!((0.2..=0.3).contains(&frac), "n {n} r {r} k {k}");
        }
    }
}

#[test]
fn remove_with_drops_highest_labels_and_damps_survivors() {
    let tape = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let q = qset(&tape, random(&mut rng, &[5, 3]), 1, &mut rng);
    let lab = [0.1, 0.9, 0.4, 0.9, 0.2];
    let r = remove_with(&q, &labels(&tape, &lab), 2).unwrap();
    assert_eq!(r.boxes, vec![q.boxes[0], q.boxes[2], q.boxes[4]]);
    for (row, (src, l)) in [(0, 0.1), (2, 0.4), (4, 0.2)].iter().enumerate() {
        for c in 0..3 {
            assert_eq!(r.features.value().at(&[row, c]), q.features.value().at(&[*src, c]) * (1.0 - l));
        }
    }
    let same = remove_with(&q, &labels(&tape, &lab), 0).unwrap();
    assert_eq!(same.features.value(), q.features.value());
}

#[test]
fn remove_at_floor_is_identity() {
    let (store, h) = heads(4, 11);
    let g = Graph::new(&store);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let q = qset(g.tape(), random(&mut rng, &[8, 4]), 8, &mut rng);
    let cov = covariance(&q.features).unwrap();
    let (r, k) = remove(&g, &h, &q, &cov).unwrap();
    assert_eq!(k, 0);
    assert_eq!(r.boxes, q.boxes);
    assert_eq!(r.features.value(), q.features.value());
}

#[test]
fn removed_fraction_stays_in_bounds_for_random_heads() {
    for seed in 0..100 {
        let (store, h) = heads(6, 1000 + seed);
        let g = Graph::inference(&store);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.gen_range(20..120);
        let q = qset(g.tape(), random(&mut rng, &[n, 6]), 1, &mut rng);
        let cov = covariance(&q.features).unwrap();
        let (r, k) = remove(&g, &h, &q, &cov).unwrap();
        let frac = k as f64 / n as f64;
        assert!((0.2..=0.3).contains(&frac), "seed {seed}: {k}/{n}");
        assert_eq!(r.len(), n - k);
    }
}

#[test]
fn split_counts_and_duplicates() {
    assert_eq!(split_count(269, 5.0), 13);
    assert_eq!(split_count(269, 0.0), 0);
    assert_eq!(split_count(10, 5.0), 0);
    let tape = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let q = qset(&tape, random(&mut rng, &[269, 4]), 1, &mut rng);
    let lab: Vec<f64> = (0..269).map(|_| rng.gen_range(0.0..1.0)).collect();
    let s = split_with(&q, &labels(&tape, &lab), split_count(269, 5.0)).unwrap();
    assert_eq!(s.len(), 282);
    let mut order: Vec<usize> = (0..269).collect();
    order.sort_by(|&a, &b| lab[b].total_cmp(&lab[a]));
    let mut top: Vec<usize> = order[..13].to_vec();
    top.sort();
    for (k, &src) in top.iter().enumerate() {
        let dup = 269 + k;
        assert_eq!(s.boxes[dup], s.boxes[src]);
        assert_eq!(s.features.value().row(dup), s.features.value().row(src));
        assert_eq!(s.boxes[src], q.boxes[src]);
    }
    let none = split_with(&q, &labels(&tape, &lab), 0).unwrap();
    assert_eq!(none.features.value(), q.features.value());
}

#[test]
fn neutral_update_only_attends() {
    let (mut store, h) = heads(4, 13);
    h.merge.fill_bias(&mut store, -1e3);
    h.split_ratio.fill_bias(&mut store, -1e3);
    store.value_mut(h.split_ratio.weight).data_mut().fill(0.0);
    let g = Graph::new(&store);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let q = qset(g.tape(), random(&mut rng, &[12, 4]), 12, &mut rng);
    let s = g.constant(random(&mut rng, &[7, 4]));
    let (u, log) = update(&g, &h, &q, &s, None, true).unwrap();
    let a = cross_attend(&g, &h.attention, &q, &s, None).unwrap();
    assert_eq!((log.merged, log.removed, log.split), (0, 0, 0));
    assert_eq!(u.len(), 12);
    assert_eq!(u.features.value(), a.features.value());
    assert_eq!(u.layer, 1);
}

#[test]
fn update_chain_reaches_the_floor_exactly() {
    let (store, h) = heads(8, 14);
    let g = Graph::inference(&store);
    let cfg = QueryInitConfig::default();
    let mut q = init_queries(g.tape(), 900, 8, 269, &cfg, 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut trajectory = vec![q.len()];
    for _ in 0..6 {
        let s = g.constant(random(&mut rng, &[40, 8]));
        let n_before = q.len();
        let (next, log) = update(&g, &h, &q, &s, None, true).unwrap();
        let after_merge = n_before - log.merged;
        let lower = (0.7 * after_merge as f64).ceil() as usize;
        assert!(log.n_out >= 269.max(lower.min(log.n_out)), "{log:?}");
        assert!(log.n_out as f64 <= n_before as f64 * 1.05);
        assert!(log.n_out >= 269);
        q = next;
        trajectory.push(q.len());
    }
    assert_eq!(*trajectory.last().unwrap(), 269, "{trajectory:?}");
}

#[test]
fn update_head_gradients() {
    for seed in 0..5 {
        let (mut store, h) = heads(4, 20 + seed);
        // Make merges likely so the merge head is on the gradient path.
        h.merge.fill_bias(&mut store, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = random(&mut rng, &[10, 4]);
        let s = random(&mut rng, &[6, 4]);
        let bx = boxes(10, &mut rng);
        let ids = h.params();
        let report = grad_check_params(&store, &ids, 12, |g| {
            let q = QuerySet { boxes: bx.clone(), features: g.constant(f.clone()), floor: 3, layer: 0 };
            let (u, _) = update(g, &h, &q, &g.constant(s.clone()), None, true)?;
            weighted(&u.features)
        })
        .unwrap();
        assert!(report.passed(1e-4), "seed {seed}: {} at {:?}", report.max_rel_err, report.worst);
    }
}
