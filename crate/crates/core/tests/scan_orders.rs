use argmamba::scan_geometry::{gather, scatter, two_way, window_order, ScanOrder, WindowMode};
use argmamba::Tensor;
use proptest::prelude::*;

const SIZES: [usize; 3] = [8, 16, 32];
const SCALES: [usize; 4] = [1, 2, 4, 8];
const MODES: [WindowMode; 2] = [WindowMode::Divide, WindowMode::Literal];

fn all_orders() -> impl Iterator<Item = (usize, usize, usize, WindowMode, ScanOrder)> {
    SIZES.into_iter().flat_map(|h| {
        SIZES.into_iter().flat_map(move |w| {
            SCALES.into_iter().flat_map(move |s| {
                MODES
                    .into_iter()
                    .map(move |m| (h, w, s, m, window_order(h, w, s, m).unwrap()))
            })
        })
    })
}

#[test]
fn every_order_is_a_bijection() {
    for (h, w, s, m, o) in all_orders() {
        let mut sorted = o.perm().to_vec();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..h * w).collect::<Vec<_>>(), "{h}x{w} s={s} {m:?}");
        assert!(o.is_bijection());
    }
}

#[test]
fn two_way_orders_are_mutual_reverses() {
    for (_, _, _, _, o) in all_orders() {
        let (f, b) = two_way(&o);
        let n = f.len();
        assert!((0..n).all(|i| f.perm()[i] == b.perm()[n - 1 - i]));
        assert_eq!(b.reversed().perm(), f.perm());
    }
}

#[test]
fn gather_scatter_roundtrip_is_bit_exact() {
    for (h, w, _, _, o) in all_orders() {
        let x = Tensor::<f32>::from_fn(&[3, h, w], |i| (i as f32 * 0.37).sin() * 1e3);
        let tokens = gather(&x, &o).unwrap();
        assert_eq!(scatter(&tokens, &o).unwrap(), x);
        let back = gather(&scatter(&tokens, &o).unwrap(), &o).unwrap();
        assert_eq!(back, tokens);
        let xd = x.cast::<f64>();
        assert_eq!(scatter(&gather(&xd, &o).unwrap(), &o).unwrap(), xd);
    }
}

#[test]
fn windows_stay_local() {
    for (_, w, _, m, o) in all_orders() {
        if m != WindowMode::Divide {
            continue;
        }
        let wl = o.window_len();
        for (k, pair) in o.perm().windows(2).enumerate() {
            // steps that end a window are allowed to jump
            if (k + 1) % wl == 0 {
                continue;
            }
            let (y0, x0) = (pair[0] / w, pair[0] % w);
            let (y1, x1) = (pair[1] / w, pair[1] % w);
            let same_row_step = y0 == y1 && x1 == x0 + 1;
            let row_wrap = y1 == y0 + 1;
            assert!(same_row_step || row_wrap, "step {k}: {pair:?}");
        }
        // each window is one contiguous run covering a rectangle
        for run in o.perm().chunks(wl) {
            let ys: Vec<usize> = run.iter().map(|p| p / w).collect();
            let xs: Vec<usize> = run.iter().map(|p| p % w).collect();
            let (ymin, ymax) = (*ys.iter().min().unwrap(), *ys.iter().max().unwrap());
            let (xmin, xmax) = (*xs.iter().min().unwrap(), *xs.iter().max().unwrap());
            assert_eq!((ymax - ymin + 1) * (xmax - xmin + 1), wl);
        }
    }
}

#[test]
fn window_sizes_follow_mode() {
    let d = window_order(16, 8, 4, WindowMode::Divide).unwrap();
    assert_eq!(d.window_len(), 4 * 2);
    let l = window_order(16, 8, 4, WindowMode::Literal).unwrap();
    assert_eq!(l.window_len(), 16);
    assert!(window_order(12, 12, 8, WindowMode::Divide).is_err());
}

proptest! {
    #[test]
    fn roundtrip_arbitrary_permutations(perm in Just((0..24usize).collect::<Vec<_>>()).prop_shuffle(), c in 1usize..4) {
        let o = ScanOrder::from_perm(perm, 4, 6).unwrap();
        let x = Tensor::<f64>::from_fn(&[c, 4, 6], |i| i as f64 - 7.5);
        prop_assert_eq!(scatter(&gather(&x, &o).unwrap(), &o).unwrap(), x);
        let inv = o.inverse();
        prop_assert!(o.perm().iter().enumerate().all(|(i, &p)| inv[p] == i));
    }
}
