use argmamba::blocks::{default_split, ms_ss2d, MsSs2d, MsSsmConfig, ScanBlock};
use argmamba::gradcheck::{ms_ssm_check, random_tensor};
use argmamba::scan_geometry::WindowMode;
use argmamba::{Ctx, Graph, ParamBuilder, ParamStore, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn run_block(block: &ScanBlock, store: &ParamStore<f64>, x: &Tensor<f64>) -> Tensor<f64> {
    let g = Graph::inference();
    let cx = Ctx::new(&g, store);
    block.forward(&cx, g.constant(x.clone())).unwrap().value().as_ref().clone()
}

fn block(seed: u64, dim: usize, cfg: &MsSsmConfig) -> (ScanBlock, ParamStore<f64>) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = ScanBlock::new(&mut ParamBuilder::new(&mut store, &mut rng).sub("b"), dim, 2, 4, cfg).unwrap();
    (b, store)
}

#[test]
fn blocks_are_identity_at_init() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for (dim, cfg) in [
        (4, MsSsmConfig::global()),
        (4, MsSsmConfig::default()),
        (6, MsSsmConfig { scales: vec![1, 2], window_mode: WindowMode::Literal, ..MsSsmConfig::default() }),
    ] {
        let (b, store) = block(1, dim, &cfg);
        let x = random_tensor(&mut rng, &[dim, 8, 8]);
        let y = run_block(&b, &store, &x);
        assert!(y.max_abs_diff(&x) <= 1e-12, "{cfg:?}");
    }
}

#[test]
fn vssb_equals_single_scale_ms_ssm() {
    let mut s1 = ParamStore::<f64>::new();
    let mut s2 = ParamStore::<f64>::new();
    let (mut r1, mut r2) = (ChaCha8Rng::seed_from_u64(9), ChaCha8Rng::seed_from_u64(9));
    let v = ScanBlock::vssb(&mut ParamBuilder::new(&mut s1, &mut r1), 4, 2, 3).unwrap();
    let cfg = MsSsmConfig { scales: vec![1], ..MsSsmConfig::default() };
    let m = ScanBlock::new(&mut ParamBuilder::new(&mut s2, &mut r2), 4, 2, 3, &cfg).unwrap();
    argmamba::gradcheck::jitter(&mut s1, 3, 0.3);
    argmamba::gradcheck::jitter(&mut s2, 3, 0.3);
    let x = random_tensor(&mut ChaCha8Rng::seed_from_u64(0), &[4, 8, 8]);
    assert_eq!(run_block(&v, &s1, &x), run_block(&m, &s2, &x));
}

#[test]
fn ms_ssm_block_gradients() {
    let rep = ms_ssm_check(0).unwrap();
    assert!(rep.passed && rep.max_rel_err < 1e-5, "{rep:?}");
}

#[test]
fn indivisible_map_is_rejected_unless_adaptive() {
    let cfg = MsSsmConfig::default();
    let (b, mut store) = block(2, 4, &cfg);
    argmamba::gradcheck::jitter(&mut store, 1, 0.1);
    let x = Tensor::<f64>::zeros(&[4, 4, 4]);
    let g = Graph::inference();
    let cx = Ctx::new(&g, &store);
    assert!(b.forward(&cx, g.constant(x.clone())).is_err());
    let b = b.with_adaptive_scales();
    assert_eq!(b.forward(&cx, g.constant(x)).unwrap().shape(), vec![4, 4, 4]);
}

#[test]
fn mixer_output_depends_on_scale() {
    // Same weights, different windows: the scan sees different sequences.
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut pb = ParamBuilder::new(&mut store, &mut rng);
    let mut m = MsSs2d::new(&mut pb, 2, 3, &MsSsmConfig::global()).unwrap();
    let x = random_tensor(&mut ChaCha8Rng::seed_from_u64(1), &[2, 8, 8]);
    let global = ms_ss2d(&x, &m, &store).unwrap();
    m.cfg.scales = vec![4];
    let local = ms_ss2d(&x, &m, &store).unwrap();
    assert!(global.max_abs_diff(&local) > 1e-6);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn blocks_preserve_shape(seed in any::<u64>(), dim in 1usize..4, hw in prop::sample::select(vec![(8usize, 8usize), (8, 16), (16, 8)])) {
        let cfg = MsSsmConfig { scales: vec![1, 2, 4], ..MsSsmConfig::default() };
        let dim = dim * 2;
        let (b, mut store) = block(seed, dim, &cfg);
        argmamba::gradcheck::jitter(&mut store, seed, 0.2);
        let x = random_tensor(&mut ChaCha8Rng::seed_from_u64(seed), &[dim, hw.0, hw.1]);
        let y = run_block(&b, &store, &x);
        prop_assert_eq!(y.shape(), x.shape());
        prop_assert!(y.all_finite());
    }

    #[test]
    fn equal_split(c in 1usize..200, n in 1usize..9) {
        prop_assume!(c >= n);
        let split = default_split(c, n).unwrap();
        prop_assert_eq!(split.len(), n);
        prop_assert_eq!(split.iter().sum::<usize>(), c);
        for &ci in &split {
            prop_assert!((ci as f64 - c as f64 / n as f64).abs() <= 1.0);
        }
        // remainder goes to the earliest groups
        prop_assert!(split.windows(2).all(|p| p[0] >= p[1]));
    }
}
