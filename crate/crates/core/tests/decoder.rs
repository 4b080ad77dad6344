mod common;

use std::sync::Arc;

use spmim::rng::rng_from_seed;
use spmim::{finite_difference_grad, Decoder, DecoderConfig, Error, MimModel, Mode, ModelSpec, ParamStore, Session, SparseExec, SpatialMask, Tensor};

const ENC: [usize; 5] = [4, 6, 8, 10, 12];

fn decoder(width: usize, seed: u64) -> (Decoder, ParamStore) {
    let mut store = ParamStore::new();
    let d = Decoder::new(&DecoderConfig::uniform(width), &ENC, &mut store, "decoder", &mut rng_from_seed(seed)).unwrap();
    (d, store)
}

/// Random `S'_1..S'_5` for an `h x h` image.
fn s_prime(n: usize, h: usize, seed: u64) -> Vec<Tensor> {
    (1..=5)
        .map(|i| Tensor::uniform(&[n, ENC[i - 1], h >> i, h >> i], -1.0, 1.0, &mut rng_from_seed(seed + i as u64)))
        .collect()
}

fn zero_all(store: &mut ParamStore, pred: impl Fn(&str) -> bool) {
    for id in store.ids().collect::<Vec<_>>() {
        if pred(store.name(id)) {
            let shape = store.get(id).shape().to_vec();
            store.set(id, Tensor::zeros(&shape)).unwrap();
        }
    }
}

#[test]
fn projection_shape_identity_and_zero() {
    let mut store = ParamStore::new();
    let mut cfg = DecoderConfig::uniform(8);
    cfg.channels[4] = 48;
    let enc = [4, 6, 8, 10, 64];
    let d = Decoder::new(&cfg, &enc, &mut store, "d", &mut rng_from_seed(0)).unwrap();
    let x = Tensor::uniform(&[1, 64, 7, 7], -1.0, 1.0, &mut rng_from_seed(1));
    {
        let mut s = Session::new(&store, Mode::Eval, 0);
        let xv = s.input(x.clone());
        let y = d.project(&mut s, 5, xv).unwrap();
        assert_eq!(s.value(y).shape(), &[1, 48, 7, 7]);
        let bad = s.input(Tensor::zeros(&[1, 5, 7, 7]));
        assert!(matches!(d.project(&mut s, 5, bad), Err(Error::Dimension(_))));
    }

    // Equal widths with an identity 1x1 kernel.
    let mut store = ParamStore::new();
    let d = Decoder::new(&DecoderConfig::uniform(4), &[4; 5], &mut store, "d", &mut rng_from_seed(0)).unwrap();
    let eye = Tensor::from_fn(&[4, 4, 1, 1], |i| if i / 4 == i % 4 { 1.0 } else { 0.0 });
    store.set(d.projection(2).weight, eye).unwrap();
    let x = Tensor::uniform(&[2, 4, 5, 5], -1.0, 1.0, &mut rng_from_seed(2));
    let mut s = Session::new(&store, Mode::Eval, 0);
    let xv = s.input(x.clone());
    let y = d.project(&mut s, 2, xv).unwrap();
    assert_eq!(s.value(y), &x);

    store.set(d.projection(2).weight, Tensor::zeros(&[4, 4, 1, 1])).unwrap();
    let mut s = Session::new(&store, Mode::Eval, 0);
    let xv = s.input(x);
    let y = d.project(&mut s, 2, xv).unwrap();
    assert!(s.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn decode_sizes_for_224() {
    let (d, store) = decoder(4, 0);
    let maps = s_prime(1, 224, 1);
    let mut s = Session::new(&store, Mode::Eval, 0);
    let vars: Vec<_> = maps.into_iter().map(|t| s.input(t)).collect();
    let state = d.decode(&mut s, &vars).unwrap();
    for i in 1..=5 {
        let shape = s.value(state.d(i)).shape().to_vec();
        assert_eq!(shape, vec![1, 4, 224 >> i, 224 >> i]);
    }
    let out = d.reconstruct_head(&mut s, state.d(1)).unwrap();
    assert_eq!(s.value(out).shape(), &[1, 3, 224, 224]);
    assert!(matches!(d.decode(&mut s, &vars[..4]), Err(Error::Argument(_))));
}

#[test]
fn zero_blocks_collapse_to_skips() {
    let (d, mut store) = decoder(6, 2);
    zero_all(&mut store, |n| n.contains(".block") || n.ends_with(".bias") || n.ends_with(".beta"));
    let maps = s_prime(2, 64, 3);
    for mode in [Mode::Train, Mode::Eval] {
        let mut s = Session::new(&store, mode, 0);
        let vars: Vec<_> = maps.iter().map(|t| s.input(t.clone())).collect();
        let state = d.decode(&mut s, &vars).unwrap();
        for i in 1..=5 {
            let phi = d.project(&mut s, i, vars[i - 1]).unwrap();
            assert_eq!(s.value(state.d(i)), s.value(phi), "D_{i}");
        }
    }
}

#[test]
fn zero_skips_collapse_to_the_block_chain() {
    let (d, mut store) = decoder(6, 4);
    zero_all(&mut store, |n| {
        ["phi1.", "phi2.", "phi3.", "phi4."].iter().any(|p| n.starts_with(&format!("decoder.{p}")))
    });
    let maps = s_prime(1, 64, 5);
    let mut s = Session::new(&store, Mode::Eval, 0);
    let vars: Vec<_> = maps.iter().map(|t| s.input(t.clone())).collect();
    let state = d.decode(&mut s, &vars).unwrap();
    let mut chain = state.d(5);
    for i in (1..=4).rev() {
        chain = d.block(i).forward(&mut s, chain).unwrap();
    }
    assert_eq!(s.value(state.d(1)), s.value(chain));
}

#[test]
fn head_shape_and_constant_output() {
    let (d, mut store) = decoder(5, 6);
    store.set(d.head().weight, Tensor::zeros(&[3, 5, 1, 1])).unwrap();
    store.set(d.head().bias, Tensor::new(vec![3], vec![0.25, -1.0, 2.0]).unwrap()).unwrap();
    let mut s = Session::new(&store, Mode::Eval, 0);
    let x = s.input(Tensor::uniform(&[1, 5, 112, 112], -1.0, 1.0, &mut rng_from_seed(0)));
    let y = d.reconstruct_head(&mut s, x).unwrap();
    let out = s.value(y);
    assert_eq!(out.shape(), &[1, 3, 224, 224]);
    for (c, b) in [0.25, -1.0, 2.0].into_iter().enumerate() {
        assert!(out.data()[c * 224 * 224..(c + 1) * 224 * 224].iter().all(|&v| v == b));
    }
}

#[test]
fn head_weight_gradient_matches_finite_differences() {
    let (d, store) = decoder(3, 7);
    let d1 = Tensor::uniform(&[1, 3, 8, 8], -1.0, 1.0, &mut rng_from_seed(1));
    let target = Tensor::uniform(&[1, 3, 16, 16], 0.0, 1.0, &mut rng_from_seed(2));
    let mask = Arc::new(SpatialMask::new(1, 16, 16, (0..256).map(|i| (i / 16 + i % 16) % 4 != 0).collect()).unwrap());
    let loss_with = |w: &Tensor| -> spmim::Result<f64> {
        let mut st = store.clone();
        st.set(d.head().weight, w.clone())?;
        let mut s = Session::new(&st, Mode::Eval, 0);
        let x = s.input(d1.clone());
        let y = d.reconstruct_head(&mut s, x)?;
        let l = s.graph.masked_mse(y, &target, &mask)?;
        s.value(l).item()
    };
    let mut s = Session::new(&store, Mode::Eval, 0);
    let x = s.input(d1.clone());
    let y = d.reconstruct_head(&mut s, x).unwrap();
    let l = s.graph.masked_mse(y, &target, &mask).unwrap();
    let mut g = s.backward(l).unwrap();
    let analytic = s.param_grads(&mut g)[d.head().weight.index()].clone().unwrap();
    let w0 = store.get(d.head().weight).clone();
    let numeric = finite_difference_grad(loss_with, &w0, 1e-5).unwrap();
    assert!(common::rel_err(&analytic, &numeric) < 1e-6);
}

#[test]
fn perturbing_a_skip_only_changes_finer_maps() {
    let (d, store) = decoder(4, 8);
    let maps = s_prime(1, 64, 9);
    let run = |maps: &[Tensor]| -> Vec<Tensor> {
        let mut s = Session::new(&store, Mode::Eval, 0);
        let vars: Vec<_> = maps.iter().map(|t| s.input(t.clone())).collect();
        let st = d.decode(&mut s, &vars).unwrap();
        (1..=5).map(|i| s.value(st.d(i)).clone()).collect()
    };
    let base = run(&maps);
    for i in 1..=5 {
        let mut changed = maps.clone();
        changed[i - 1] = changed[i - 1].map(|v| v + 0.5);
        let out = run(&changed);
        for j in 1..=5 {
            assert_eq!(out[j - 1] != base[j - 1], j <= i, "perturb S'_{i}, check D_{j}");
        }
    }
}

#[test]
fn end_to_end_shapes_and_deterministic_autoencoder() {
    let spec = ModelSpec { encoder: common::micro_encoder(), decoder: DecoderConfig::uniform(4) };
    let (model, mut store) = MimModel::build(&spec, 1).unwrap();
    zero_all(&mut store, |n| n.starts_with("mask_embedding"));
    for (h, w) in [(64usize, 64usize), (32, 96)] {
        let x = Tensor::uniform(&[2, 3, h, w], 0.0, 1.0, &mut rng_from_seed(3));
        let masks = common::random_levels(2, h, w, 0.0, 4);
        let run = || {
            let mut s = Session::new(&store, Mode::Eval, 0);
            let xv = s.input(x.clone());
            let out = model.forward(&mut s, xv, &masks, SparseExec::Compact).unwrap();
            s.value(out.recon).clone()
        };
        let a = run();
        assert_eq!(a.shape(), &[2, 3, h, w]);
        assert!(a.bitwise_eq(&run()));
    }
}
