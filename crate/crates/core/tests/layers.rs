use dmagaze::nn::{init_tensor, Builder, Conv2d, Ctx, InitScheme, Linear, ParamStore};
use dmagaze::{Error, Tape, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

mod common;
use common::*;

fn conv(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
    let mut t = Tape::new();
    let (vx, vw, vb) = (
        t.constant(x.clone()),
        t.constant(w.clone()),
        t.constant(b.clone()),
    );
    let y = t.conv2d(vx, vw, vb, stride, pad).unwrap();
    t.value(y).clone()
}

#[test]
fn conv2d_matches_six_loop_oracle() {
    let cases = [
        ([2, 3, 8, 8], [4, 3, 3, 3], 1, 1),
        ([2, 3, 8, 8], [2, 3, 3, 3], 2, 1),
        ([1, 2, 7, 5], [3, 2, 7, 7], 1, 3),
        ([2, 3, 6, 8], [5, 3, 1, 1], 1, 0),
        ([1, 1, 8, 8], [2, 1, 4, 2], 3, 0),
    ];
    for (k, (xs, ws, stride, pad)) in cases.into_iter().enumerate() {
        let k = k as u64;
        let (x, w, b) = (rand(&xs, k), rand(&ws, 10 + k), rand(&[ws[0]], 20 + k));
        let got = conv(&x, &w, &b, stride, pad);
        let want = conv_oracle(&x, &w, &b, stride, pad);
        assert_eq!(got.shape(), want.shape());
        assert!(got.max_abs_diff(&want) < 1e-10, "case {k}");
    }
}

#[test]
fn conv2d_trivial_cases() {
    let ones = Tensor::ones(&[1, 1, 2, 2]);
    let y = conv(
        &ones,
        &Tensor::full(&[1, 1, 1, 1], 2.0),
        &Tensor::zeros(&[1]),
        1,
        0,
    );
    assert_eq!(y.data(), &[2.0; 4]);
    let y = conv(
        &Tensor::ones(&[1, 1, 3, 3]),
        &Tensor::ones(&[1, 1, 3, 3]),
        &Tensor::zeros(&[1]),
        1,
        0,
    );
    assert_eq!(y.shape(), &[1, 1, 1, 1]);
    assert_eq!(y.data(), &[9.0]);
}

#[test]
fn conv2d_channel_mismatch_is_a_dimension_error() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::zeros(&[1, 2, 4, 4]));
    let w = t.constant(Tensor::zeros(&[1, 3, 3, 3]));
    let b = t.constant(Tensor::zeros(&[1]));
    assert!(matches!(t.conv2d(x, w, b, 1, 1), Err(Error::Dimension(_))));
}

#[test]
fn conv_transpose_spreads_a_single_pixel() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::full(&[1, 1, 1, 1], 3.0));
    let w = t.constant(Tensor::ones(&[1, 1, 2, 2]));
    let b = t.constant(Tensor::zeros(&[1]));
    let y = t.conv_transpose2d(x, w, b, 2, 0).unwrap();
    assert_eq!(t.shape(y), [1, 1, 2, 2]);
    assert_eq!(t.value(y).data(), &[3.0; 4]);
}

/// The transposed convolution of `x` equals the gradient, with respect to
/// the input `z`, of `⟨conv(z, w), x⟩`.
#[test]
fn conv_transpose_is_the_gradient_of_conv() {
    for (k, (stride, pad, kern, h)) in [(2, 1, 4, 3), (1, 1, 3, 4), (2, 0, 3, 3), (3, 1, 5, 2)]
        .into_iter()
        .enumerate()
    {
        let k = k as u64;
        let (ci, co) = (3, 2);
        let x = rand(&[2, ci, h, h + 1], k);
        let w = rand(&[ci, co, kern, kern], 10 + k);
        let oh = (h - 1) * stride + kern - 2 * pad;
        let ow = h * stride + kern - 2 * pad;

        let mut t = Tape::new();
        let (vx, vw, vb) = (
            t.constant(x.clone()),
            t.constant(w.clone()),
            t.constant(Tensor::zeros(&[co])),
        );
        let y = t.conv_transpose2d(vx, vw, vb, stride, pad).unwrap();
        let got = t.value(y).clone();

        let mut t = Tape::new();
        let z = t.variable(Tensor::zeros(&[2, co, oh, ow]));
        let (cw, cb) = (t.constant(w), t.constant(Tensor::zeros(&[ci])));
        let c = t.conv2d(z, cw, cb, stride, pad).unwrap();
        assert_eq!(t.shape(c), x.shape());
        let vx = t.constant(x);
        let p = t.mul(c, vx).unwrap();
        let s = t.sum(p);
        let want = t.backward(s).unwrap().tensor(z);
        assert_eq!(got.shape(), want.shape());
        assert!(got.max_abs_diff(&want) < 1e-12, "case {k}");
    }
}

#[test]
fn pooling_examples() {
    let x = Tensor::new(&[1, 1, 2, 2], vec![1.0, 3.0, 5.0, 7.0]).unwrap();
    let mut t = Tape::new();
    let v = t.constant(x);
    let (a, m) = (t.global_avg_pool(v).unwrap(), t.global_max_pool(v).unwrap());
    assert_eq!(t.value(a).data(), &[4.0]);
    assert_eq!(t.value(m).data(), &[7.0]);
    assert_eq!(t.shape(a), [1, 1, 1, 1]);

    let px = Tensor::new(&[1, 2, 1, 1], vec![2.0, 4.0]).unwrap();
    let v = t.constant(px);
    let (cm, cx) = (t.channel_mean(v).unwrap(), t.channel_max(v).unwrap());
    assert_eq!(t.value(cm).data(), &[3.0]);
    assert_eq!(t.value(cx).data(), &[4.0]);
}

#[test]
fn channel_reductions_match_per_pixel_loop() {
    let x = rand(&[2, 5, 3, 4], 3);
    let mut t = Tape::new();
    let v = t.constant(x.clone());
    let (cm, cx) = (t.channel_mean(v).unwrap(), t.channel_max(v).unwrap());
    assert_eq!(t.shape(cm), [2, 1, 3, 4]);
    for n in 0..2 {
        for p in 0..12 {
            let vals: Vec<f64> = (0..5).map(|c| x.data()[(n * 5 + c) * 12 + p]).collect();
            let mean = vals.iter().sum::<f64>() / 5.0;
            let max = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            assert!((t.value(cm).data()[n * 12 + p] - mean).abs() < 1e-15);
            assert_eq!(t.value(cx).data()[n * 12 + p], max);
        }
    }
}

#[test]
fn single_channel_reductions_are_identity() {
    let x = rand(&[2, 1, 3, 3], 8);
    let mut t = Tape::new();
    let v = t.constant(x.clone());
    let (cm, cx) = (t.channel_mean(v).unwrap(), t.channel_max(v).unwrap());
    assert_eq!(t.value(cm), &x);
    assert_eq!(t.value(cx), &x);
}

fn linear_layer(d_in: usize, d_out: usize, seed: u64) -> (Linear, ParamStore) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layer = Linear::new(&mut Builder::new(&mut store, &mut rng), "fc", d_in, d_out);
    (layer, store)
}

#[test]
fn linear_identity_and_row_sums() {
    let (layer, mut store) = linear_layer(3, 3, 0);
    *store.get_mut(layer.weight) = Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
    let x = rand(&[2, 3], 1);
    let mut ctx = Ctx::inference(&store);
    let v = ctx.input(x.clone());
    let y = layer.forward(&mut ctx, v).unwrap();
    assert_eq!(ctx.value(y), &x);

    let (layer, mut store) = linear_layer(4, 2, 0);
    *store.get_mut(layer.weight) = Tensor::ones(&[2, 4]);
    let x = Tensor::new(&[1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let mut ctx = Ctx::inference(&store);
    let v = ctx.input(x);
    let y = layer.forward(&mut ctx, v).unwrap();
    assert_eq!(ctx.value(y).data(), &[10.0, 10.0]);
}

#[test]
fn linear_matches_matmul_oracle_on_leading_axes() {
    let (layer, mut store) = linear_layer(5, 3, 4);
    *store.get_mut(layer.bias) = rand(&[3], 5);
    let x = rand(&[2, 4, 5], 6);
    let mut ctx = Ctx::inference(&store);
    let v = ctx.input(x.clone());
    let y = layer.forward(&mut ctx, v).unwrap();
    assert_eq!(ctx.value(y).shape(), &[2, 4, 3]);
    let (w, b) = (store.get(layer.weight).data(), store.get(layer.bias).data());
    for r in 0..8 {
        for o in 0..3 {
            let want: f64 = b[o]
                + (0..5)
                    .map(|i| x.data()[r * 5 + i] * w[o * 5 + i])
                    .sum::<f64>();
            assert!((ctx.value(y).data()[r * 3 + o] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn init_is_deterministic_bounded_and_centred() {
    let draw = |seed| {
        init_tensor(
            &[100, 100],
            50,
            InitScheme::FanInUniform,
            &mut ChaCha8Rng::seed_from_u64(seed),
        )
    };
    let (a, b) = (draw(3), draw(3));
    assert_eq!(a, b);
    assert_ne!(a, draw(4));
    let bound = (1.0f64 / 50.0).sqrt();
    assert!(a.data().iter().all(|w| w.abs() <= bound));
    let n = a.numel() as f64;
    let mean = a.data().iter().sum::<f64>() / n;
    let sd = bound / 3f64.sqrt();
    assert!(mean.abs() < 3.0 * sd / n.sqrt(), "mean {mean}");
}

#[test]
fn conv_layer_biases_start_at_zero() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let c = Conv2d::new(&mut Builder::new(&mut store, &mut rng), "c", 2, 3, 3, 1, 1);
    assert_eq!(store.get(c.bias), &Tensor::zeros(&[3]));
    assert_eq!(c.out_extent(8), Some(8));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn pooling_of_constant_returns_constant(c in -10.0f64..10.0, h in 1usize..5, w in 1usize..5) {
        let mut t = Tape::new();
        let v = t.constant(Tensor::full(&[2, 3, h, w], c));
        let outs = [
            t.global_avg_pool(v).unwrap(),
            t.global_max_pool(v).unwrap(),
            t.channel_mean(v).unwrap(),
            t.channel_max(v).unwrap(),
        ];
        for o in outs {
            for x in t.value(o).data() {
                prop_assert!((x - c).abs() <= 1e-14 * c.abs().max(1.0));
            }
        }
    }

    #[test]
    fn conv_output_extent_formula(h in 1usize..10, k in 1usize..4, s in 1usize..4, p in 0usize..2) {
        prop_assume!(h + 2 * p >= k);
        let y = conv(&rand(&[1, 1, h, h], 0), &rand(&[1, 1, k, k], 1), &Tensor::zeros(&[1]), s, p);
        let want = (h + 2 * p - k) / s + 1;
        prop_assert_eq!(y.shape(), &[1, 1, want, want]);
    }
}
