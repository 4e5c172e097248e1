use approx::assert_relative_eq;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use ssvae_core::layers::Mode;
use ssvae_core::model::{
    argmax_rows, classify, decode_logprob, encode, load_arrays, one_hot, save_arrays, ModelConfig,
    ModelParams, NamedArray, TokenBatch, BOS_ID, EOS_ID, PAD_ID,
};
use ssvae_core::rng::{stream, Domain};
use ssvae_core::tensor::{finite_difference_check, Tape, Tensor};

fn tiny_config(drop_z: bool) -> ModelConfig {
    let mut cfg = ModelConfig::new(7, 2);
    cfg.embed_dim = 3;
    cfg.enc_hidden = 2;
    cfg.z_dim = 2;
    cfg.dec_hidden = 3;
    cfg.drop_z = drop_z;
    cfg.max_len = 8;
    cfg.dropout = 0.5;
    cfg
}

fn tiny_batch() -> TokenBatch {
    TokenBatch::from_rows(&[vec![4, 5, 6], vec![5, 4]], Some(vec![0, 1])).expect("valid batch")
}

#[test]
fn token_batch_pads_and_validates() {
    let b = tiny_batch();
    assert_eq!((b.batch, b.time), (2, 3));
    assert_eq!(b.ids, vec![4, 5, 6, 5, 4, PAD_ID]);
    assert_eq!(b.lengths, vec![3, 2]);
    assert_eq!(b.row(1), &[5, 4]);
    assert!(TokenBatch::from_rows(&[], None).is_err());
    assert!(TokenBatch::from_rows(&[vec![]], None).is_err());
    assert!(TokenBatch::from_rows(&[vec![1]], Some(vec![0, 1])).is_err());
}

#[test]
fn encode_shapes_and_positive_sigma() {
    let cfg = tiny_config(false);
    let params = ModelParams::<f64>::init(&cfg, 42).unwrap();
    let tape = Tape::new();
    let mut rng = stream(42, Domain::DropoutStandalone, 0);
    let (y, z) = encode(&tape, &params, &cfg, &tiny_batch(), Mode::Train, &mut rng).unwrap();
    assert_eq!(y.logits.shape(), &[2, 2]);
    let z = z.expect("z posterior present");
    assert_eq!(z.mu.shape(), &[2, 2]);
    assert_eq!(z.sigma.shape(), &[2, 2]);
    assert!(z.sigma.data().iter().all(|&s| s > 0.0));
}

#[test]
fn drop_z_removes_parameters_structurally() {
    let full_cfg = tiny_config(false);
    let drop_cfg = tiny_config(true);
    let full = ModelParams::<f64>::init(&full_cfg, 7).unwrap();
    let dropped = ModelParams::<f64>::init(&drop_cfg, 7).unwrap();
    assert!(dropped.z_enc.is_none());
    assert!(dropped.numel() < full.numel());

    // The delta is exactly the z tower plus the decoder input-width change.
    let z = full.z_enc.as_ref().unwrap();
    let z_tower = z.fwd.w.numel()
        + z.fwd.b.numel()
        + z.bwd.w.numel()
        + z.bwd.b.numel()
        + z.mu_w.numel()
        + z.mu_b.numel()
        + z.sigma_w.numel()
        + z.sigma_b.numel();
    let dec_delta = full.decoder.w.numel() - dropped.decoder.w.numel();
    assert_eq!(full.numel() - dropped.numel(), z_tower + dec_delta);
    assert_eq!(dec_delta, full_cfg.z_dim * 4 * full_cfg.dec_hidden);

    // The dropped model still encodes, with no z posterior.
    let tape = Tape::new();
    let mut rng = stream(7, Domain::DropoutStandalone, 0);
    let (y, zp) = encode(&tape, &dropped, &drop_cfg, &tiny_batch(), Mode::Eval, &mut rng).unwrap();
    assert_eq!(y.logits.shape(), &[2, 2]);
    assert!(zp.is_none());
}

#[test]
fn shared_parameters_identical_across_variants() {
    // Same seed: every parameter that exists in both models is bitwise
    // equal, because init streams are keyed by parameter name.
    let full = ModelParams::<f64>::init(&tiny_config(false), 99).unwrap();
    let dropped = ModelParams::<f64>::init(&tiny_config(true), 99).unwrap();
    let bits = |t: &Tensor<f64>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&full.embedding), bits(&dropped.embedding));
    assert_eq!(bits(&full.y_fwd.w), bits(&dropped.y_fwd.w));
    assert_eq!(bits(&full.y_head_w), bits(&dropped.y_head_w));
    assert_eq!(bits(&full.dec_out_w), bits(&dropped.dec_out_w));
    // Decoder input width differs, so its weights are allowed to differ.
    assert_ne!(full.decoder.w.shape(), dropped.decoder.w.shape());
}

#[test]
fn decode_uniform_head_scores_log_vocab_per_prediction() {
    let cfg = tiny_config(true);
    let mut params = ModelParams::<f64>::init(&cfg, 3).unwrap();
    params.dec_out_w = Tensor::zeros(vec![cfg.dec_hidden, cfg.vocab_size]);
    params.dec_out_b = Tensor::zeros(vec![cfg.vocab_size]);

    let batch = tiny_batch();
    let tape = Tape::new();
    let y = one_hot::<f64>(&[0, 1], 2).unwrap();
    let mut rng = stream(3, Domain::DropoutStandalone, 0);
    let lp = decode_logprob(&tape, &params, &cfg, &batch, &y, None, Mode::Eval, &mut rng).unwrap();
    // Uniform head: each predicted position (content tokens plus EOS)
    // contributes -ln(vocab).
    let ln_v = (cfg.vocab_size as f64).ln();
    assert_relative_eq!(lp.data()[0], -((batch.lengths[0] + 1) as f64) * ln_v, max_relative = 1e-12);
    assert_relative_eq!(lp.data()[1], -((batch.lengths[1] + 1) as f64) * ln_v, max_relative = 1e-12);
}

#[test]
fn decode_ignores_appended_padding() {
    let cfg = tiny_config(false);
    let params = ModelParams::<f64>::init(&cfg, 11).unwrap();
    let y = one_hot::<f64>(&[1, 0], 2).unwrap();
    let z = Tensor::new(vec![2, 2], vec![0.3, -0.8, 1.1, 0.0]).unwrap();

    let short = TokenBatch::from_rows(&[vec![4, 5], vec![6, 6, 5]], None).unwrap();
    // Same rows, two extra all-padding columns.
    let mut wide = short.clone();
    wide.time += 2;
    let mut ids = vec![PAD_ID; wide.batch * wide.time];
    for b in 0..short.batch {
        for i in 0..short.lengths[b] {
            ids[b * wide.time + i] = short.ids[b * short.time + i];
        }
    }
    wide.ids = ids;

    let mut rng = stream(11, Domain::DropoutStandalone, 0);
    let tape = Tape::new();
    let a = decode_logprob(&tape, &params, &cfg, &short, &y, Some(&z), Mode::Eval, &mut rng).unwrap();
    let b = decode_logprob(&tape, &params, &cfg, &wide, &y, Some(&z), Mode::Eval, &mut rng).unwrap();
    assert_eq!(a.data()[0].to_bits(), b.data()[0].to_bits());
    assert_eq!(a.data()[1].to_bits(), b.data()[1].to_bits());
}

#[test]
fn decode_rejects_bad_y_and_mismatched_z() {
    let cfg = tiny_config(false);
    let params = ModelParams::<f64>::init(&cfg, 1).unwrap();
    let batch = tiny_batch();
    let tape = Tape::new();
    let mut rng = stream(1, Domain::DropoutStandalone, 0);
    let z = Tensor::zeros(vec![2, 2]);

    let not_simplex = Tensor::new(vec![2, 2], vec![0.9, 0.9, 0.5, 0.5]).unwrap();
    assert!(decode_logprob(&tape, &params, &cfg, &batch, &not_simplex, Some(&z), Mode::Eval, &mut rng).is_err());

    let y = one_hot::<f64>(&[0, 1], 2).unwrap();
    assert!(decode_logprob(&tape, &params, &cfg, &batch, &y, None, Mode::Eval, &mut rng).is_err());
}

#[test]
fn decode_matches_scalar_chain_oracle() {
    let cfg = tiny_config(false);
    let params = ModelParams::<f64>::init(&cfg, 29).unwrap();
    let tokens = vec![4usize, 6, 5];
    let batch = TokenBatch::from_rows(&[tokens.clone()], None).unwrap();
    let y_row = [0.25, 0.75];
    let z_row = [0.4, -1.2];
    let y = Tensor::new(vec![1, 2], y_row.to_vec()).unwrap();
    let z = Tensor::new(vec![1, 2], z_row.to_vec()).unwrap();

    let tape = Tape::new();
    let mut rng = stream(29, Domain::DropoutStandalone, 0);
    let got = decode_logprob(&tape, &params, &cfg, &batch, &y, Some(&z), Mode::Eval, &mut rng)
        .unwrap()
        .data()[0];

    // Scalar recomputation of the teacher-forced chain.
    let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
    let emb = params.embedding.data();
    let dcw = params.decoder.w.data();
    let dcb = params.decoder.b.data();
    let hid = cfg.dec_hidden;
    let mut h = vec![0.0; hid];
    let mut c = vec![0.0; hid];
    let mut want = 0.0;
    let inputs = [BOS_ID, tokens[0], tokens[1], tokens[2]];
    let targets = [tokens[0], tokens[1], tokens[2], EOS_ID];
    for (inp, tgt) in inputs.iter().zip(targets) {
        let mut xs: Vec<f64> = emb[inp * cfg.embed_dim..(inp + 1) * cfg.embed_dim].to_vec();
        xs.extend_from_slice(&y_row);
        xs.extend_from_slice(&z_row);
        xs.extend_from_slice(&h);
        let mut gates = vec![0.0; 4 * hid];
        for (g, gate) in gates.iter_mut().enumerate() {
            *gate = dcb[g] + xs.iter().enumerate().map(|(r, &v)| v * dcw[r * 4 * hid + g]).sum::<f64>();
        }
        for u in 0..hid {
            let (gi, gf, gg, go) = (
                sig(gates[u]),
                sig(gates[hid + u]),
                gates[2 * hid + u].tanh(),
                sig(gates[3 * hid + u]),
            );
            c[u] = gf * c[u] + gi * gg;
            h[u] = go * c[u].tanh();
        }
        let logits: Vec<f64> = (0..cfg.vocab_size)
            .map(|v| {
                params.dec_out_b.data()[v]
                    + h.iter()
                        .enumerate()
                        .map(|(r, &hv)| hv * params.dec_out_w.data()[r * cfg.vocab_size + v])
                        .sum::<f64>()
            })
            .collect();
        let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + logits.iter().map(|&v| (v - mx).exp()).sum::<f64>().ln();
        want += logits[tgt] - lse;
    }
    assert_relative_eq!(got, want, max_relative = 1e-9);
    assert!(got <= 0.0);
}

#[test]
fn decode_logprob_is_nonpositive() {
    let cfg = tiny_config(false);
    let params = ModelParams::<f64>::init(&cfg, 77).unwrap();
    let y = one_hot::<f64>(&[0, 1], 2).unwrap();
    let z = Tensor::new(vec![2, 2], vec![1.5, -2.0, 0.0, 3.0]).unwrap();
    let tape = Tape::new();
    let mut rng = stream(77, Domain::DropoutStandalone, 0);
    let lp = decode_logprob(&tape, &params, &cfg, &tiny_batch(), &y, Some(&z), Mode::Train, &mut rng)
        .unwrap();
    assert!(lp.data().iter().all(|&v| v <= 0.0));
}

#[test]
fn classifier_semantics() {
    // Softmax of [2, 1] and the tie rule, on the same helpers classify uses.
    let tape: Tape<f64> = Tape::new();
    let logits = Tensor::new(vec![2, 2], vec![2.0, 1.0, 0.3, 0.3]).unwrap();
    let probs = tape.softmax(&logits).unwrap();
    let e = std::f64::consts::E;
    assert_relative_eq!(probs.data()[0], e / (e + 1.0), max_relative = 1e-12);
    assert_relative_eq!(probs.data()[1], 1.0 / (e + 1.0), max_relative = 1e-12);
    assert_eq!(argmax_rows(&probs), vec![0, 0]);

    // Argmax is invariant to a per-row constant shift.
    let shifted = tape.add(&logits, &Tensor::full(vec![2, 2], 13.5)).unwrap();
    assert_eq!(argmax_rows(&shifted), argmax_rows(&logits));

    // classify agrees with encode + softmax + argmax and is deterministic.
    let cfg = tiny_config(false);
    let params = ModelParams::<f64>::init(&cfg, 5).unwrap();
    let batch = tiny_batch();
    let (preds_a, probs_a) = classify(&params, &cfg, &batch).unwrap();
    let (preds_b, probs_b) = classify(&params, &cfg, &batch).unwrap();
    assert_eq!(preds_a, preds_b);
    assert_eq!(probs_a.data(), probs_b.data());
    let eval_tape = Tape::new();
    let mut rng = stream(5, Domain::DropoutStandalone, 0);
    let (y, _) = encode(&eval_tape, &params, &cfg, &batch, Mode::Eval, &mut rng).unwrap();
    assert_eq!(preds_a, argmax_rows(&y.logits));
}

#[test]
fn end_to_end_gradient_matches_finite_differences() {
    let cfg = tiny_config(false);
    let params = ModelParams::<f64>::init(&cfg, 13).unwrap();
    let batch = tiny_batch();
    let eps = Tensor::new(vec![2, 2], vec![0.7, -0.3, 1.2, 0.1]).unwrap();

    let mut flat: Vec<Tensor<f64>> = Vec::new();
    params.for_each(|_, t| flat.push(t.clone()));
    let report = finite_difference_check(&flat, 1e-3, |tape, ins| {
        let mut it = ins.iter();
        let watched = params.map_named(|_, _| it.next().expect("one input per param").clone());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (y_post, z_post) = encode(tape, &watched, &cfg, &batch, Mode::Eval, &mut rng)?;
        let z_post = z_post.expect("full model");
        let y = tape.softmax(&y_post.logits)?;
        let z = ssvae_core::stochastic::sample_gaussian_reparam(tape, &z_post, &eps)?;
        let lp = decode_logprob(tape, &watched, &cfg, &batch, &y, Some(&z), Mode::Eval, &mut rng)?;
        let kl = ssvae_core::stochastic::kl_gaussian_standard(tape, &z_post)?;
        let obj = tape.sub(&lp, &kl)?;
        tape.neg(&tape.mean(&obj, None)?)
    })
    .expect("fd check runs");
    assert!(report.non_finite.is_empty());
    assert!(
        report.max_rel_error < 1e-4,
        "max error {} at {:?}",
        report.max_rel_error,
        report.worst
    );
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.bin");

    let cfg = tiny_config(false);
    let params = ModelParams::<f64>::init(&cfg, 21).unwrap();
    save_arrays(&path, &params.to_named()).unwrap();
    let loaded = load_arrays::<f64>(&path).unwrap();
    let rebuilt = ModelParams::from_named(&cfg, &loaded).unwrap();
    params.for_each(|name, t| {
        let mut found = false;
        rebuilt.for_each(|n2, t2| {
            if n2 == name {
                found = true;
                let a: Vec<u64> = t.data().iter().map(|v| v.to_bits()).collect();
                let b: Vec<u64> = t2.data().iter().map(|v| v.to_bits()).collect();
                assert_eq!(a, b, "mismatch in {name}");
            }
        });
        assert!(found, "{name} missing after round trip");
    });

    // Precision is part of the format.
    assert!(load_arrays::<f32>(&path).is_err());

    // Scalar (rank-0) arrays survive too.
    let meta = vec![NamedArray { name: "step".into(), shape: vec![], data: vec![42.0f64] }];
    let meta_path = dir.path().join("meta.bin");
    save_arrays(&meta_path, &meta).unwrap();
    assert_eq!(load_arrays::<f64>(&meta_path).unwrap(), meta);

    // Missing arrays are called out by name.
    let partial: Vec<NamedArray<f64>> =
        loaded.iter().filter(|a| a.name != "decoder.w").cloned().collect();
    let err = match ModelParams::from_named(&cfg, &partial) {
        Err(e) => e,
        Ok(_) => panic!("partial checkpoint accepted"),
    };
    assert!(err.to_string().contains("decoder.w"), "{err}");
}

#[test]
fn f32_checkpoint_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model32.bin");
    let cfg = tiny_config(true);
    let params = ModelParams::<f32>::init(&cfg, 8).unwrap();
    save_arrays(&path, &params.to_named()).unwrap();
    let loaded = load_arrays::<f32>(&path).unwrap();
    let original = params.to_named();
    assert_eq!(loaded.len(), original.len());
    for (a, b) in loaded.iter().zip(&original) {
        assert_eq!(a.name, b.name);
        assert_eq!(a.shape, b.shape);
        let ab: Vec<u32> = a.data.iter().map(|v| v.to_bits()).collect();
        let bb: Vec<u32> = b.data.iter().map(|v| v.to_bits()).collect();
        assert_eq!(ab, bb, "mismatch in {}", a.name);
    }
}
