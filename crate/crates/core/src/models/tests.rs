use super::*;
use crate::audio::MelSpectrogram;
use crate::gradcheck::check_params;
use proptest::prelude::{prop_assert, prop_assert_eq, proptest};

fn random_input<T: Scalar>(batch: usize, h: usize, w: usize, seed: u64) -> Tensor<T> {
    let mut rng = Rng::new(seed);
    Tensor::from_fn([batch, h, w], |_| T::of(rng.normal(0.0, 1.0)))
}

fn random_spec(h: usize, w: usize, seed: u64) -> MelSpectrogram {
    let mut rng = Rng::new(seed);
    MelSpectrogram::from_values(h, w, (0..h * w).map(|_| rng.normal(0.0, 1.0) as f32).collect()).unwrap()
}

fn build(cfg: &ModelConfig, seed: u64) -> (Model, ParamStore<f64>) {
    let mut store = ParamStore::<f64>::new();
    let model = Model::new(cfg, &mut store, &mut Rng::new(seed)).unwrap();
    (model, store)
}

#[test]
fn grid_patch_examples() {
    let spec = random_spec(128, 48, 1);
    let seq = grid_patchify(&spec, 16, 16).unwrap();
    assert_eq!((seq.n_patches, seq.patch_dim), (24, 256));
    let whole = grid_patchify(&spec, 128, 48).unwrap();
    assert_eq!(whole.n_patches, 1);
    assert_eq!(whole.patches, spec.values);
    assert!(grid_patchify(&spec, 129, 4).is_err());
}

#[test]
fn vertical_patch_examples() {
    let spec = random_spec(128, 100, 2);
    let seq = vertical_patchify(&spec, 7, 1).unwrap();
    assert_eq!((seq.n_patches, seq.patch_dim), (94, 128 * 7));
    assert_eq!(vertical_patchify(&spec, 100, 1).unwrap().n_patches, 1);
    assert!(vertical_patchify(&spec, 101, 1).is_err());
    assert!(vertical_patchify(&spec, 5, 0).is_err());
    // time-major: the first n_mels entries are frame 0
    assert_eq!(seq.patch(3)[..128], spec.column(3)[..]);
}

proptest! {
    #[test]
    fn grid_round_trip(h in 1usize..40, w in 1usize..40, ph in 1usize..10, pw in 1usize..10, seed: u64) {
        let spec = random_spec(h, w, seed);
        let seq = grid_patchify(&spec, ph, pw);
        if ph > h || pw > w {
            prop_assert!(seq.is_err());
        } else {
            let seq = seq.unwrap();
            prop_assert_eq!(seq.n_patches, (h / ph) * (w / pw));
            prop_assert_eq!(seq.patch_dim, ph * pw);
            let (vals, rows, cols) = unpatchify(&seq, h).unwrap();
            prop_assert_eq!((rows, cols), ((h / ph) * ph, (w / pw) * pw));
            for r in 0..rows {
                for c in 0..cols {
                    prop_assert_eq!(vals[r * cols + c], spec.get(r, c));
                }
            }
        }
    }

    #[test]
    fn vertical_overlap_and_round_trip(h in 1usize..20, w in 1usize..40, width in 1usize..10, stride in 1usize..4, seed: u64) {
        prop_assume_fits(width, w)?;
        let spec = random_spec(h, w, seed);
        let seq = vertical_patchify(&spec, width, stride).unwrap();
        prop_assert_eq!(seq.n_patches, (w - width) / stride + 1);
        prop_assert_eq!(seq.patch_dim, h * width);
        if stride == 1 {
            for p in 0..seq.n_patches - 1 {
                prop_assert_eq!(&seq.patch(p)[h..], &seq.patch(p + 1)[..(width - 1) * h]);
            }
        }
        if stride <= width {
            let (vals, rows, cols) = unpatchify(&seq, h).unwrap();
            prop_assert_eq!(rows, h);
            for r in 0..rows {
                for c in 0..cols {
                    prop_assert_eq!(vals[r * cols + c], spec.get(r, c));
                }
            }
        }
    }
}

fn prop_assume_fits(width: usize, w: usize) -> std::result::Result<(), proptest::test_runner::TestCaseError> {
    if width > w {
        Err(proptest::test_runner::TestCaseError::reject("window wider than input"))
    } else {
        Ok(())
    }
}

#[test]
fn attention_examples() {
    let mut tape = Tape::<f64>::new();
    let v = Tensor::from_fn([4, 3], |i| i as f64 * 0.7 - 1.0);
    let q = tape.constant(Tensor::zeros([4, 3]));
    let k = tape.constant(random_input::<f64>(1, 4, 3, 3).reshape([4, 3]).unwrap());
    let vv = tape.constant(v.clone());
    let out = attention(&mut tape, q, k, vv, 1.0 / 3f64.sqrt()).unwrap();
    for r in 0..4 {
        for c in 0..3 {
            let mean = (0..4).map(|i| v.at2(i, c)).sum::<f64>() / 4.0;
            assert!((tape.value(out).at2(r, c) - mean).abs() < 1e-12);
        }
    }
    let one = tape.constant(Tensor::from_fn([1, 3], |i| i as f64 + 0.5));
    let q1 = tape.constant(Tensor::from_fn([1, 3], |i| i as f64));
    let out = attention(&mut tape, q1, q1, one, 1.0).unwrap();
    assert_eq!(tape.value(out), tape.value(one));
    let bad = tape.constant(Tensor::zeros([4, 2]));
    assert!(attention(&mut tape, q, bad, vv, 1.0).is_err());
}

proptest! {
    #[test]
    fn attention_rows_are_stochastic(n in 1usize..8, m in 1usize..8, d in 1usize..6, seed: u64) {
        let mut tape = Tape::<f64>::new();
        let q = tape.constant(random_input::<f64>(1, n, d, seed).reshape([n, d]).unwrap());
        let k = tape.constant(random_input::<f64>(1, m, d, seed ^ 1).reshape([m, d]).unwrap());
        let w = attention_weights(&mut tape, q, k, 0.5).unwrap();
        for row in tape.value(w).data().chunks(m) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
}

fn set(store: &mut ParamStore<f64>, id: crate::tensor::ParamId, f: impl Fn(usize) -> f64) {
    for (i, v) in store.get_mut(id).value.data_mut().iter_mut().enumerate() {
        *v = f(i);
    }
}

#[test]
fn single_head_with_identity_projections_is_plain_attention() {
    let d = 4;
    let mut store = ParamStore::<f64>::new();
    let mha = MultiHead::new(&mut store, "mha", d, 1, None, AttentionScale::HeadDim, &mut Rng::new(0)).unwrap();
    for lin in [&mha.q, &mha.k, &mha.v, &mha.out] {
        set(&mut store, lin.w, |i| if i / d == i % d { 1.0 } else { 0.0 });
    }
    let x = random_input::<f64>(1, 5, d, 4).reshape([5, d]).unwrap();
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let a = mha.forward(&mut tape, &store, xv, 1, 5).unwrap();
    let b = attention(&mut tape, xv, xv, xv, 0.5).unwrap();
    for (p, q) in tape.value(a).data().iter().zip(tape.value(b).data()) {
        assert!((p - q).abs() < 1e-12);
    }
}

#[test]
fn multi_head_shapes_and_divisibility() {
    for heads in [1, 2, 4, 8] {
        let mut store = ParamStore::<f64>::new();
        let mha = MultiHead::new(&mut store, "m", 8, heads, None, AttentionScale::HeadDim, &mut Rng::new(1)).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(random_input::<f64>(3, 5, 8, heads as u64).reshape([15, 8]).unwrap());
        let y = mha.forward(&mut tape, &store, x, 3, 5).unwrap();
        assert_eq!(tape.shape(y), [15, 8]);
    }
    let mut store = ParamStore::<f64>::new();
    assert!(MultiHead::new(&mut store, "m", 10, 3, None, AttentionScale::HeadDim, &mut Rng::new(1)).is_err());
    let mha = MultiHead::new(&mut store, "m", 10, 3, Some(4), AttentionScale::SeqLen, &mut Rng::new(1)).unwrap();
    assert_eq!(store.value(mha.out.w).shape(), [12, 10]);
}

#[test]
fn zero_output_projection_gives_zero_but_keeps_gradient() {
    let mut store = ParamStore::<f64>::new();
    let mha = MultiHead::new(&mut store, "m", 6, 2, None, AttentionScale::HeadDim, &mut Rng::new(2)).unwrap();
    set(&mut store, mha.out.w, |_| 0.0);
    let x = random_input::<f64>(2, 4, 6, 9).reshape([8, 6]).unwrap();
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let y = mha.forward(&mut tape, &store, xv, 2, 4).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));

    let f = |tape: &mut Tape<f64>, st: &mut ParamStore<f64>| {
        let xv = tape.constant(x.clone());
        let y = mha.forward(tape, st, xv, 2, 4)?;
        let sq = tape.mul(y, y)?;
        let target = tape.constant(Tensor::from_fn([8, 6], |i| (i as f64 * 0.3).sin()));
        let prod = tape.mul(y, target)?;
        let s = tape.add(sq, prod)?;
        Ok(tape.sum(s))
    };
    let mut tape = Tape::new();
    let mut st = store.clone();
    let loss = f(&mut tape, &mut st).unwrap();
    tape.backward(loss).unwrap();
    tape.write_grads(&mut st);
    assert!(st.get(mha.out.w).grad.as_ref().unwrap().data().iter().any(|&g| g != 0.0));
    let report = check_params(&store, f, 20, 1e-5, 3).unwrap();
    assert!(report.max_rel_err < 1e-4, "{report:?}");
}

fn block_cfg() -> (ParamStore<f64>, Vec<TransformerBlock>) {
    let mut store = ParamStore::<f64>::new();
    let mut rng = Rng::new(5);
    let blocks = (0..2)
        .map(|i| {
            TransformerBlock::new(&mut store, &format!("b{i}"), 8, 2, None, 16, 0.1, AttentionScale::HeadDim, &mut rng)
                .unwrap()
        })
        .collect();
    (store, blocks)
}

#[test]
fn block_with_zero_output_projections_is_identity() {
    let (mut store, blocks) = block_cfg();
    for b in &blocks {
        set(&mut store, b.attn.out.w, |_| 0.0);
        set(&mut store, b.fc2.w, |_| 0.0);
    }
    let x = random_input::<f64>(2, 3, 8, 1).reshape([6, 8]).unwrap();
    let mut tape = Tape::new();
    let mut h = tape.constant(x.clone());
    for b in &blocks {
        h = b.forward(&mut tape, &store, h, 2, 3, &mut Rng::new(0), true).unwrap();
    }
    assert_eq!(tape.value(h), &x);
}

#[test]
fn two_blocks_match_finite_differences() {
    let (store, blocks) = block_cfg();
    let x = random_input::<f64>(2, 3, 8, 2).reshape([6, 8]).unwrap();
    let f = |tape: &mut Tape<f64>, st: &mut ParamStore<f64>| {
        let mut rng = Rng::new(11);
        let mut h = tape.constant(x.clone());
        for b in &blocks {
            h = b.forward(tape, st, h, 2, 3, &mut rng, true)?;
        }
        let w = tape.constant(Tensor::from_fn([6, 8], |i| ((i * 7) % 5) as f64 - 2.0));
        let p = tape.mul(h, w)?;
        Ok(tape.sum(p))
    };
    let report = check_params(&store, f, 20, 1e-5, 4).unwrap();
    assert!(report.max_rel_err < 1e-4, "{report:?}");
}

#[test]
fn vit_output_lengths() {
    for (n_logits, arch) in [(5, Arch::Vit), (1, Arch::Vit), (5, Arch::Vvit), (1, Arch::Vvit)] {
        let cfg = ModelConfig {
            arch,
            n_logits,
            ..ModelConfig::default()
        };
        let (model, mut store) = build(&cfg, 1);
        let logits = model.predict_logits(&mut store, &random_input(2, 128, 22, 3)).unwrap();
        assert_eq!(logits.len(), 2);
        assert!(logits.iter().all(|r| r.len() == n_logits));
    }
}

#[test]
fn logits_finite_for_large_inputs() {
    for arch in Arch::ALL {
        let (model, mut store) = build(&ModelConfig::tiny(arch, 5), 2);
        let mut x = random_input::<f64>(3, 32, 24, 4);
        x.data_mut().iter_mut().for_each(|v| *v *= 100.0);
        let logits = model.predict_logits(&mut store, &x).unwrap();
        assert!(logits.iter().flatten().all(|v| v.is_finite()), "{arch}");
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, &mut store, &x, &mut Rng::new(1), true).unwrap();
        assert!(tape.value(out).is_finite(), "{arch}");
    }
}

#[test]
fn cnn_feature_map_and_param_count() {
    let cfg = ModelConfig {
        arch: Arch::Cnn,
        n_mels: 128,
        n_frames: 64,
        ..ModelConfig::default()
    };
    let mut store = ParamStore::<f32>::new();
    let model = Model::new(&cfg, &mut store, &mut Rng::new(0)).unwrap();
    let Net::Cnn(cnn) = &model.net else { panic!() };
    assert_eq!((cnn.stack.out_channels, cnn.stack.out_h, cnn.stack.out_w), (64, 8, 4));

    for (cfg, name) in [(cfg.clone(), "full"), (ModelConfig::tiny(Arch::Cnn, 1), "tiny")] {
        let mut store = ParamStore::<f32>::new();
        Model::new(&cfg, &mut store, &mut Rng::new(0)).unwrap();
        // conv blocks: bn(2 per input channel) + 3x3 weights + bias
        let mut expected = 0;
        let mut c_in = 1;
        for &f in &cfg.cnn_filters {
            expected += 2 * c_in + 9 * c_in * f + f;
            c_in = f;
        }
        let shrink = 1 << cfg.cnn_filters.len();
        let flat = c_in * (cfg.n_mels / shrink) * (cfg.n_frames / shrink);
        expected += 2 * flat + flat * cfg.cnn_fc + cfg.cnn_fc + cfg.cnn_fc * cfg.n_logits + cfg.n_logits;
        assert_eq!(store.n_trainable(), expected, "{name}");
    }
}

#[test]
fn vit_param_count_closed_form() {
    for arch in [Arch::Vit, Arch::Vvit] {
        let cfg = ModelConfig::tiny(arch, 5);
        let (_, store) = build(&cfg, 0);
        let (n, p) = match arch {
            Arch::Vit => (4 * 3, 64),
            _ => (20, 32 * 5),
        };
        let e = 16;
        let block = 4 * e + 4 * (e * e + e) + (e * 32 + 32) + (32 * e + e);
        let expected = (p * e + e) + e + (n + 1) * e + 2 * block + 2 * e + (e * 16 + 16) + (16 * 5 + 5);
        assert_eq!(store.n_trainable(), expected, "{arch}");
    }
}

#[test]
fn ssc_bands_and_concat_order() {
    let cfg = ModelConfig {
        arch: Arch::Ssc,
        ..ModelConfig::default()
    };
    let mut store = ParamStore::<f32>::new();
    let model = Model::new(&cfg, &mut store, &mut Rng::new(0)).unwrap();
    let Net::Ssc(ssc) = &model.net else { panic!() };
    assert_eq!((ssc.bands.len(), ssc.band_height), (4, 32));

    // Share the band weights, then swap two bands of the input: the band
    // embeddings swap slots, which the first MLP layer sees as a column swap.
    let cfg = ModelConfig {
        dropout: 0.0,
        ..ModelConfig::tiny(Arch::Ssc, 3)
    };
    let (model, mut store) = build(&cfg, 3);
    let Net::Ssc(ssc) = &model.net else { panic!() };
    let names: Vec<String> = store.iter().map(|p| p.name.clone()).collect();
    for name in &names {
        if let Some(rest) = name.strip_prefix("ssc.band0") {
            let v = store.value(store.by_name(name).unwrap()).clone();
            for b in 1..4 {
                let id = store.by_name(&format!("ssc.band{b}{rest}")).unwrap();
                store.get_mut(id).value = v.clone();
            }
        }
    }
    let x = random_input::<f64>(2, 32, 24, 5);
    let mut swapped = x.clone();
    let bh = 8;
    for n in 0..2 {
        for r in 0..bh {
            for t in 0..24 {
                let a = n * 32 * 24 + r * 24 + t;
                let b = n * 32 * 24 + (r + bh) * 24 + t;
                swapped.data_mut().swap(a, b);
            }
        }
    }
    let embed = |store: &mut ParamStore<f64>, x: &Tensor<f64>| {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone().reshape([2, 1, 32, 24]).unwrap());
        let mut rng = Rng::new(0);
        let parts: Vec<Var> = ssc
            .bands
            .iter()
            .enumerate()
            .map(|(i, band)| {
                let rows = tape.narrow(xv, 2, i * bh, bh).unwrap();
                band.forward(&mut tape, store, rows, 0.0, &mut rng, false).unwrap()
            })
            .collect();
        parts.iter().map(|&p| tape.value(p).clone()).collect::<Vec<_>>()
    };
    let a = embed(&mut store, &x);
    let b = embed(&mut store, &swapped);
    assert_eq!(a[0], b[1]);
    assert_eq!(a[1], b[0]);
    assert_eq!(a[2], b[2]);
    let mut bad = ModelConfig::tiny(Arch::Ssc, 2);
    bad.n_mels = 30;
    bad.ssc_bands = 4;
    assert!(!bad.violations().is_empty());
}

#[test]
fn eval_forward_is_deterministic() {
    for arch in Arch::ALL {
        let (model, mut store) = build(&ModelConfig::tiny(arch, 2), 4);
        let x = random_input::<f64>(3, 32, 24, 6);
        // a training step first so running statistics are non-trivial
        let mut tape = Tape::new();
        model.forward(&mut tape, &mut store, &x, &mut Rng::new(1), true).unwrap();
        let a = model.predict_logits(&mut store, &x).unwrap();
        let b = model.predict_logits(&mut store, &x).unwrap();
        assert_eq!(a, b, "{arch}");
    }
}

#[test]
fn vvit_matches_vit_when_layouts_coincide() {
    let base = ModelConfig {
        n_mels: 6,
        n_frames: 9,
        embedding_size: 8,
        lat_dim: 8,
        mlp_dim: 8,
        n_heads: 2,
        n_blocks: 2,
        n_logits: 3,
        patch_h: 6,
        patch_w: 1,
        vpatch_width: 1,
        vpatch_stride: 1,
        ..ModelConfig::default()
    };
    let vit_cfg = ModelConfig { arch: Arch::Vit, ..base.clone() };
    let vvit_cfg = ModelConfig { arch: Arch::Vvit, ..base };
    let (vit, mut s1) = build(&vit_cfg, 9);
    let (vvit, mut s2) = build(&vvit_cfg, 9);
    let x = random_input::<f64>(2, 6, 9, 7);
    assert_eq!(vit.predict_logits(&mut s1, &x).unwrap(), vvit.predict_logits(&mut s2, &x).unwrap());
}

#[test]
fn shuffling_patches_with_positions_leaves_logits_unchanged() {
    let cfg = ModelConfig::tiny(Arch::Vit, 4);
    let (model, store) = build(&cfg, 10);
    let vit = model.vit().unwrap();
    let x = random_input::<f64>(1, 32, 24, 8);
    let patches = vit.patch_matrix(&x).unwrap();
    let n = vit.n_patches;
    let perm: Vec<usize> = (0..n).map(|i| (i * 5 + 3) % n).collect();
    let d = vit.patch_dim;
    let shuffled = Tensor::from_fn([n, d], |i| patches.data()[perm[i / d] * d + i % d]);
    let mut store2 = store.clone();
    let e = cfg.embedding_size;
    let pos = store.value(vit.positions).clone();
    set(&mut store2, vit.positions, |i| {
        let (row, col) = (i / e, i % e);
        if row == 0 {
            pos.data()[i]
        } else {
            pos.data()[(perm[row - 1] + 1) * e + col]
        }
    });
    let run = |st: &ParamStore<f64>, p: &Tensor<f64>| {
        let mut tape = Tape::new();
        let pv = tape.constant(p.clone());
        let out = vit.forward_patches(&mut tape, st, pv, 1, &mut Rng::new(0), false).unwrap();
        tape.value(out).clone()
    };
    let a = run(&store, &patches);
    let b = run(&store2, &shuffled);
    for (p, q) in a.data().iter().zip(b.data()) {
        assert!((p - q).abs() < 1e-10, "{a:?} vs {b:?}");
    }
}

#[test]
fn every_parameter_receives_gradient() {
    for arch in Arch::ALL {
        let (model, mut store) = build(&ModelConfig::tiny(arch, 3), 11);
        let x = random_input::<f64>(4, 32, 24, 12);
        let mut tape = Tape::new();
        let logits = model.forward(&mut tape, &mut store, &x, &mut Rng::new(2), true).unwrap();
        let loss = tape.cross_entropy(logits, &[0, 1, 2, 1]).unwrap();
        tape.backward(loss).unwrap();
        tape.write_grads(&mut store);
        for p in store.iter().filter(|p| p.trainable) {
            let g = p.grad.as_ref().unwrap_or_else(|| panic!("{arch}: {} has no gradient", p.name));
            assert!(g.data().iter().any(|&v| v != 0.0), "{arch}: {} has zero gradient", p.name);
        }
    }
}

#[test]
fn architectures_match_finite_differences() {
    for arch in Arch::ALL {
        let cfg = ModelConfig::tiny(arch, 3);
        let (model, store) = build(&cfg, 13);
        let x = random_input::<f64>(2, 32, 24, 14);
        let f = |tape: &mut Tape<f64>, st: &mut ParamStore<f64>| {
            let logits = model.forward(tape, st, &x, &mut Rng::new(3), true)?;
            tape.cross_entropy(logits, &[0, 2])
        };
        let report = check_params(&store, f, 3, 1e-6, 5).unwrap();
        assert!(report.max_rel_err < 1e-4, "{arch}: {report:?}");
    }
}

#[test]
fn predictions() {
    assert_eq!(predict_class(&[0.3]), 1);
    assert_eq!(predict_class(&[-0.3]), 0);
    assert_eq!(predict_class(&[0.1, 0.5, 0.5]), 1);
    assert!((positive_score(&[0.0]) - 0.5).abs() < 1e-12);
    assert!((positive_score(&[0.0, 0.0]) - 0.5).abs() < 1e-12);
    assert!("transformer".parse::<Arch>().is_err());
    assert_eq!("vvit".parse::<Arch>().unwrap(), Arch::Vvit);
}
