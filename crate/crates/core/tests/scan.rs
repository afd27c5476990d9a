use std::time::Instant;

use argmamba::scan_geometry::{gather, scatter, window_order, WindowMode};
use argmamba::selective_scan::{
    scan_sequential, scan_sequential_inputs, selective_scan, selective_scan_inputs, ss2d, DirectionReduce, ScanInputs,
    ScanSequence, SsmParams,
};
use argmamba::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

fn random_params(rng: &mut ChaCha8Rng, c: usize, s: usize) -> SsmParams<f64> {
    SsmParams {
        a: rand_t(rng, &[c, s], -3.0, -0.1),
        d: rand_t(rng, &[c], -1.0, 1.0),
        w_delta: rand_t(rng, &[c, c], -0.5, 0.5),
        delta_bias: rand_t(rng, &[c], -2.0, 0.5),
        w_b: rand_t(rng, &[c, s], -1.0, 1.0),
        w_c: rand_t(rng, &[c, s], -1.0, 1.0),
    }
}

fn random_inputs(rng: &mut ChaCha8Rng, l: usize, c: usize, s: usize) -> ScanInputs<f64> {
    ScanInputs {
        x: rand_t(rng, &[l, c], -1.0, 1.0),
        delta: rand_t(rng, &[l, c], 0.01, 1.0),
        a: rand_t(rng, &[c, s], -3.0, -0.1),
        b: rand_t(rng, &[l, s], -1.0, 1.0),
        c: rand_t(rng, &[l, s], -1.0, 1.0),
        d: rand_t(rng, &[c], -1.0, 1.0),
    }
}

/// Textbook recurrence written out independently of the library.
fn naive(inp: &ScanInputs<f64>) -> Vec<f64> {
    let (l, c, s) = (inp.x.dim(0), inp.x.dim(1), inp.a.dim(1));
    let mut h = vec![vec![0.0; s]; c];
    let mut y = Vec::with_capacity(l * c);
    for t in 0..l {
        for ch in 0..c {
            let x = inp.x.at(&[t, ch]);
            let dt = inp.delta.at(&[t, ch]);
            let mut out = inp.d.at(&[ch]) * x;
            for n in 0..s {
                h[ch][n] = (dt * inp.a.at(&[ch, n])).exp() * h[ch][n] + dt * inp.b.at(&[t, n]) * x;
                out += inp.c.at(&[t, n]) * h[ch][n];
            }
            y.push(out);
        }
    }
    y
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn production_scan_matches_sequential(
        seed in any::<u64>(),
        l in 1usize..=64,
        c in prop::sample::select(vec![1usize, 2, 4]),
        s in prop::sample::select(vec![1usize, 2, 8]),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = random_params(&mut rng, c, s);
        let seq = ScanSequence { tokens: rand_t(&mut rng, &[l, c], -1.0, 1.0), order_id: "raster".into() };
        let fast = selective_scan(&seq, &params).unwrap();
        let slow = scan_sequential(&seq, &params).unwrap();
        prop_assert!(max_diff(fast.data(), slow.data()) < 1e-10);
    }

    #[test]
    fn sequential_matches_textbook(seed in any::<u64>(), l in 1usize..40, c in 1usize..4, s in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inp = random_inputs(&mut rng, l, c, s);
        let y = scan_sequential_inputs(&inp).unwrap();
        prop_assert!(max_diff(y.data(), &naive(&inp)) < 1e-12);
    }

    #[test]
    fn segmented_scan_is_per_segment_oracle(seed in any::<u64>(), segs in 1usize..5, seg in 1usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inp = random_inputs(&mut rng, segs * seg, 2, 3);
        let y = selective_scan_inputs(&inp, seg).unwrap();
        for k in 0..segs {
            let rows = |t: &Tensor<f64>| {
                let w = t.dim(1);
                Tensor::new(&[seg, w], t.data()[k * seg * w..(k + 1) * seg * w].to_vec()).unwrap()
            };
            let part = ScanInputs {
                x: rows(&inp.x),
                delta: rows(&inp.delta),
                a: inp.a.clone(),
                b: rows(&inp.b),
                c: rows(&inp.c),
                d: inp.d.clone(),
            };
            prop_assert!(max_diff(&y.data()[k * seg * 2..(k + 1) * seg * 2], &naive(&part)) < 1e-10);
        }
    }

    #[test]
    fn causal(seed in any::<u64>(), l in 2usize..50, pick in 0usize..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut inp = random_inputs(&mut rng, l, 2, 2);
        let base = selective_scan_inputs(&inp, l).unwrap();
        let t = pick % l;
        inp.x.data_mut()[t * 2] += 0.5;
        let moved = selective_scan_inputs(&inp, l).unwrap();
        prop_assert_eq!(&base.data()[..t * 2], &moved.data()[..t * 2]);
        prop_assert!(base.data()[t * 2] != moved.data()[t * 2]);
    }

    #[test]
    fn linear_in_x_with_frozen_coefficients(seed in any::<u64>(), l in 1usize..50, alpha in -2.0f64..2.0, beta in -2.0f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inp = random_inputs(&mut rng, l, 3, 4);
        let x2 = rand_t(&mut rng, &[l, 3], -1.0, 1.0);
        let y1 = selective_scan_inputs(&inp, l).unwrap();
        let y2 = selective_scan_inputs(&ScanInputs { x: x2.clone(), ..inp.clone() }, l).unwrap();
        let mixed = inp.x.zip_map(&x2, |a, b| alpha * a + beta * b).unwrap();
        let y = selective_scan_inputs(&ScanInputs { x: mixed, ..inp.clone() }, l).unwrap();
        let expect = y1.zip_map(&y2, |a, b| alpha * a + beta * b).unwrap();
        prop_assert!(y.max_abs_diff(&expect) < 1e-8);
    }
}

#[test]
fn ss2d_matches_oracle_composition() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for trial in 0..20 {
        let (c, s) = (2, 3);
        let params = random_params(&mut rng, c, s);
        let x = rand_t(&mut rng, &[c, 4, 4], -1.0, 1.0);
        let scale = [1, 2][trial % 2];
        let fwd = window_order(4, 4, scale, WindowMode::Divide).unwrap();
        let bwd = fwd.reversed();
        let got = ss2d(&x, &params, (&fwd, &bwd), DirectionReduce::Sum).unwrap();

        // gather -> per-window sequential scan -> scatter -> sum
        let mut expect = Tensor::<f64>::zeros(&[c, 4, 4]);
        for order in [&fwd, &bwd] {
            let tokens = gather(&x, order).unwrap();
            let wl = order.window_len();
            let mut ys = Vec::new();
            for k in 0..16 / wl {
                let part = Tensor::new(&[wl, c], tokens.data()[k * wl * c..(k + 1) * wl * c].to_vec()).unwrap();
                let seq = ScanSequence { tokens: part, order_id: format!("window{k}") };
                ys.extend_from_slice(scan_sequential(&seq, &params).unwrap().data());
            }
            expect.add_assign(&scatter(&Tensor::new(&[16, c], ys).unwrap(), order).unwrap());
        }
        assert!(got.max_abs_diff(&expect) < 1e-10, "trial {trial}");
    }
}

#[test]
fn ss2d_mean_halves_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let params = random_params(&mut rng, 2, 2);
    let x = rand_t(&mut rng, &[2, 4, 4], -1.0, 1.0);
    let o = window_order(4, 4, 1, WindowMode::Divide).unwrap();
    let r = o.reversed();
    let sum = ss2d(&x, &params, (&o, &r), DirectionReduce::Sum).unwrap();
    let mean = ss2d(&x, &params, (&o, &r), DirectionReduce::Mean).unwrap();
    assert!(sum.scale(0.5).max_abs_diff(&mean) < 1e-15);
    assert!(ss2d(&x, &params, (&o, &o), DirectionReduce::Sum).is_err());
}

fn median_ms(mut f: impl FnMut(), repeats: usize) -> f64 {
    let mut times: Vec<f64> = (0..repeats)
        .map(|_| {
            let t = Instant::now();
            f();
            t.elapsed().as_secs_f64() * 1e3
        })
        .collect();
    times.sort_by(f64::total_cmp);
    times[repeats / 2]
}

#[test]
fn runtime_grows_linearly() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let small = random_inputs(&mut rng, 1024, 4, 8);
    let large = random_inputs(&mut rng, 4096, 4, 8);
    let t1 = median_ms(|| drop(selective_scan_inputs(&small, 1024).unwrap()), 20);
    let t4 = median_ms(|| drop(selective_scan_inputs(&large, 4096).unwrap()), 20);
    assert!(t4 / t1 < 6.0, "t(4096)/t(1024) = {t4:.3}/{t1:.3}");
}
