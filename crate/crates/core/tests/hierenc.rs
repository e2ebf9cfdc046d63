use hierflow_core::diffcore::{gradient_check, GradCheckOptions, Graph, ParamStore, Tensor, Var};
use hierflow_core::hierenc::*;
use hierflow_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-4;

fn dims() -> EncoderDims {
    EncoderDims {
        lip_layers: 3,
        d_lip: 5,
        d_face: 4,
        d_expr: 3,
        d_timbre: 4,
        n_units: 6,
        n_mels: 80,
        energy_mean: 40.0,
        energy_std: 5.0,
    }
}

fn small_cfg() -> EncoderConfig {
    EncoderConfig { dim: 8, heads: 2, ..EncoderConfig::default() }
}

fn rand_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn sample(seed: u64, tv: usize) -> (EncoderInput<f64>, EncoderTargets<f64>) {
    let d = dims();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let input = EncoderInput {
        lip_layers: (0..d.lip_layers).map(|_| rand_tensor(&mut rng, tv, d.d_lip)).collect(),
        face_id: (0..d.d_face).map(|_| rng.random_range(-1.0..1.0)).collect(),
        expr: rand_tensor(&mut rng, tv, d.d_expr),
    };
    let n = 2 * tv;
    let targets = EncoderTargets {
        content_units: (0..n).map(|_| rng.random_range(0..d.n_units)).collect(),
        timbre: (0..d.d_timbre).map(|_| rng.random_range(-1.0..1.0)).collect(),
        pitch: (0..n).map(|_| rng.random_range(-1.5..1.5)).collect(),
        energy: (0..n).map(|_| rng.random_range(30.0..50.0)).collect(),
    };
    (input, targets)
}

/// Targets offset from any plausible prediction, so MAE residual signs never
/// cancel (an exactly zero subgradient is all roundoff under finite differences).
fn offset_targets(t: &mut EncoderTargets<f64>) {
    t.pitch.iter_mut().for_each(|p| *p = 2.0 + p.abs());
    t.energy.iter_mut().for_each(|e| *e = 46.0 + *e / 10.0);
}

fn build(cfg: &EncoderConfig, seed: u64) -> (HierEncoder, ParamStore<f64>) {
    let mut ps = ParamStore::new();
    let enc = HierEncoder::new(&mut ps, cfg, dims(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    (enc, ps)
}

fn perturb(ps: &mut ParamStore<f64>, prefix: &str, seed: u64, scale: f64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut n = 0;
    for p in ps.iter_mut().filter(|p| p.name.starts_with(prefix)) {
        p.value.data_mut().iter_mut().for_each(|v| *v += scale * rng.random_range(-1.0..1.0));
        n += 1;
    }
    n
}

fn opts(seed: u64) -> GradCheckOptions {
    GradCheckOptions { seed, ..GradCheckOptions::default() }
}

// ---- weighted layer sum ----

fn layer_sum_out(ws: &WeightedLayerSum, ps: &ParamStore<f64>, layers: &[Tensor<f64>], on: bool) -> Tensor<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = layers.iter().map(|l| g.constant(l.clone())).collect();
    let out = ws.forward(&mut g, ps, &vars, on).unwrap();
    g.value(out).clone()
}

#[test]
fn layer_sum_saturates_to_one_layer() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let layers: Vec<_> = (0..4).map(|_| rand_tensor(&mut rng, 5, 3)).collect();
    let mut ps = ParamStore::new();
    let ws = WeightedLayerSum::new(&mut ps, "w", 4);
    ps.value_mut(ws.weights).data_mut().copy_from_slice(&[40.0, -40.0, -40.0, -40.0]);
    let out = layer_sum_out(&ws, &ps, &layers, true);
    for (a, b) in out.data().iter().zip(layers[0].data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn layer_sum_equal_weights_average() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let layers: Vec<_> = (0..3).map(|_| rand_tensor(&mut rng, 4, 2)).collect();
    let mut ps = ParamStore::new();
    let ws = WeightedLayerSum::new(&mut ps, "w", 3);
    let out = layer_sum_out(&ws, &ps, &layers, true);
    for i in 0..out.len() {
        let avg = layers.iter().map(|l| l.data()[i]).sum::<f64>() / 3.0;
        assert!((out.data()[i] - avg).abs() < 1e-12);
    }
    let w = ws.softmax_weights(&ps);
    assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
}

#[test]
fn layer_sum_disabled_is_last_layer() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let layers: Vec<_> = (0..3).map(|_| rand_tensor(&mut rng, 4, 2)).collect();
    let mut ps = ParamStore::new();
    let ws = WeightedLayerSum::new(&mut ps, "w", 3);
    ps.value_mut(ws.weights).data_mut().copy_from_slice(&[0.3, -1.0, 2.0]);
    assert_eq!(layer_sum_out(&ws, &ps, &layers, false), layers[2]);
    let w = ws.softmax_weights(&ps);
    assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
}

#[test]
fn layer_sum_rejects_wrong_layer_count() {
    let mut ps = ParamStore::<f64>::new();
    let ws = WeightedLayerSum::new(&mut ps, "w", 3);
    let mut g = Graph::new();
    let v = g.constant(Tensor::zeros(&[2, 2]));
    assert!(matches!(ws.forward(&mut g, &ps, &[v, v], true), Err(Error::Dimension { .. })));
}

#[test]
fn layer_sum_gradcheck() {
    for seed in 0..3 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers: Vec<_> = (0..3).map(|_| rand_tensor(&mut rng, 4, 2)).collect();
        let mut ps = ParamStore::new();
        let ws = WeightedLayerSum::new(&mut ps, "w", 3);
        ps.value_mut(ws.weights).data_mut().copy_from_slice(&[0.3, -0.2, 0.5]);
        let r = gradient_check(&mut ps, None, &layers, |g, ps, x| ws.forward(g, ps, x, true), &opts(seed)).unwrap();
        assert!(r.passes(TOL), "{:?}", r.worst());
    }
}

// ---- masked predictor ----

fn masked_out(mp: &MaskedPredictor, ps: &ParamStore<f64>, x: &Tensor<f64>) -> Tensor<f64> {
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let out = mp.forward(&mut g, ps, v).unwrap();
    g.value(out).clone()
}

#[test]
fn masked_predictor_ignores_its_own_frame() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut ps = ParamStore::new();
    let mp = MaskedPredictor::new(&mut ps, "m", 4, 3, 3, &mut rng).unwrap();
    let x = rand_tensor(&mut rng, 7, 4);
    let base = masked_out(&mp, &ps, &x);
    let t = 3;
    let mut y = x.clone();
    y.row_mut(t).iter_mut().for_each(|v| *v += 5.0);
    let out = masked_out(&mp, &ps, &y);
    assert_eq!(out.row(t), base.row(t));
    assert_ne!(out.row(t - 1), base.row(t - 1));
    assert_ne!(out.row(t + 1), base.row(t + 1));
    for r in [0, 1, 5, 6] {
        assert_eq!(out.row(r), base.row(r));
    }
}

#[test]
fn masked_predictor_zero_input_is_bias_only() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut ps = ParamStore::new();
    let mp = MaskedPredictor::new(&mut ps, "m", 4, 3, 5, &mut rng).unwrap();
    let out = masked_out(&mp, &ps, &Tensor::zeros(&[6, 4]));
    // SiLU(conv bias) through the head
    let cb = ps.value(mp.conv.bias).data().to_vec();
    let act: Vec<f64> = cb.iter().map(|&b| b / (1.0 + (-b).exp())).collect();
    let w = ps.value(mp.head.weight);
    let hb = ps.value(mp.head.bias.unwrap()).data();
    for r in 0..6 {
        for c in 0..3 {
            let expect: f64 = (0..4).map(|i| act[i] * w.get(i, c)).sum::<f64>() + hb[c];
            assert!((out.get(r, c) - expect).abs() < 1e-12);
        }
    }
}

#[test]
fn masked_predictor_needs_kernel_three() {
    let mut ps = ParamStore::<f64>::new();
    let r = MaskedPredictor::new(&mut ps, "m", 4, 3, 1, &mut ChaCha8Rng::seed_from_u64(0));
    assert!(matches!(r, Err(Error::Config(_))));
}

#[test]
fn masked_predictor_gradcheck() {
    for seed in 0..3 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamStore::new();
        let mp = MaskedPredictor::new(&mut ps, "m", 3, 2, 3, &mut rng).unwrap();
        let x = rand_tensor(&mut rng, 5, 3);
        let r = gradient_check(&mut ps, None, &[x], |g, ps, x| mp.forward(g, ps, x[0]), &opts(seed)).unwrap();
        assert!(r.passes(TOL), "{:?}", r.worst());
    }
}

// ---- content stage ----

fn content_loss(enc: &HierEncoder, ps: &ParamStore<f64>, h: &Tensor<f64>, units: &[usize]) -> f64 {
    let mut g = Graph::new();
    let h = g.constant(h.clone());
    let out = enc.content_stage(&mut g, ps, h, Some(units), Mode::Train).unwrap();
    g.value(out.loss.unwrap()).data()[0]
}

fn set_head_logits(enc: &HierEncoder, ps: &mut ParamStore<f64>, bias: &[f64]) {
    for head in [&enc.cp.head, &enc.cp_m.head] {
        ps.value_mut(head.weight).data_mut().iter_mut().for_each(|v| *v = 0.0);
        ps.value_mut(head.bias.unwrap()).data_mut().copy_from_slice(bias);
    }
}

#[test]
fn uniform_logits_give_two_log_k() {
    let (enc, mut ps) = build(&small_cfg(), 6);
    let k = dims().n_units;
    set_head_logits(&enc, &mut ps, &vec![0.0; k]);
    let h = rand_tensor(&mut ChaCha8Rng::seed_from_u64(6), 6, 8);
    let lc = content_loss(&enc, &ps, &h, &[0, 1, 2, 3, 4, 5]);
    assert!((lc - 2.0 * (k as f64).ln()).abs() < 1e-12, "{lc}");
}

/// Closed-form label-smoothed loss for a target logit `s` over zeros.
fn smoothed(s: f64, k: usize, alpha: f64) -> f64 {
    let z = s.exp() + (k - 1) as f64;
    let ce_c = z.ln() - s;
    let ce_u = z.ln() - s / k as f64;
    2.0 * (alpha * ce_c + (1.0 - alpha) * ce_u)
}

#[test]
fn content_loss_tracks_target_logit() {
    let cfg = small_cfg();
    let (enc, mut ps) = build(&cfg, 7);
    let k = dims().n_units;
    let h = rand_tensor(&mut ChaCha8Rng::seed_from_u64(7), 4, 8);
    // the smoothed loss is minimized where p(target) = α + (1 − α)/K
    let p_star = cfg.alpha + (1.0 - cfg.alpha) / k as f64;
    let s_star = (p_star * (k - 1) as f64 / (1.0 - p_star)).ln();
    let mut prev = f64::INFINITY;
    let mut s = 0.0;
    while s <= 10.0 {
        let mut bias = vec![0.0; k];
        bias[2] = s;
        set_head_logits(&enc, &mut ps, &bias);
        let lc = content_loss(&enc, &ps, &h, &[2; 4]);
        assert!((lc - smoothed(s, k, cfg.alpha)).abs() < 1e-10);
        assert!(lc >= 0.0);
        if s <= s_star {
            assert!(lc < prev, "not decreasing at s = {s}");
        } else if s - 0.5 > s_star {
            assert!(lc > prev, "not increasing past the minimizer at s = {s}");
        }
        prev = lc;
        s += 0.5;
    }
    // with enough classes the minimizer moves past 10 and the sweep is monotone
    let big = 4096;
    let mut prev = f64::INFINITY;
    for i in 0..=20 {
        let l = smoothed(i as f64 * 0.5, big, cfg.alpha);
        assert!(l < prev);
        prev = l;
    }
}

#[test]
fn content_targets_must_match_length() {
    let (enc, ps) = build(&small_cfg(), 8);
    let (input, mut targets) = sample(8, 3);
    targets.content_units.pop();
    let mut g = Graph::new();
    assert!(matches!(enc.encode(&mut g, &ps, &input, Some(&targets), Mode::Train), Err(Error::Validation(_))));
}

#[test]
fn content_stage_gradcheck() {
    for seed in 0..3 {
        let (enc, mut ps) = build(&small_cfg(), seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = rand_tensor(&mut rng, 4, 8);
        let units: Vec<usize> = (0..4).map(|_| rng.random_range(0..6)).collect();
        let ids: Vec<_> = ps.ids().filter(|&id| ps.get(id).name.starts_with("enc.cp") || ps.get(id).name == "enc.unit_table").collect();
        let r = gradient_check(
            &mut ps,
            Some(&ids),
            &[h],
            |g, ps, x| {
                let out = enc.content_stage(g, ps, x[0], Some(&units), Mode::Train)?;
                let s = g.sum(out.h);
                g.add(s, out.loss.unwrap())
            },
            &opts(seed),
        )
        .unwrap();
        assert!(r.passes(TOL), "{:?}", r.worst());
    }
}

// ---- mappers and fusion ----

#[test]
fn disabled_mapper_is_identity() {
    let (enc, ps) = build(&small_cfg(), 9);
    let mut g = Graph::new();
    let h = g.constant(rand_tensor(&mut ChaCha8Rng::seed_from_u64(9), 5, 8));
    let out = enc.c2t.forward(&mut g, &ps, h, false).unwrap();
    assert_eq!(g.value(out), g.value(h));
    let on = enc.t2p.forward(&mut g, &ps, h, true).unwrap();
    assert_eq!(g.shape(on), &[5, 8]);
}

#[test]
fn mapper_gradcheck() {
    for seed in 0..3 {
        let (enc, mut ps) = build(&small_cfg(), seed);
        let h = rand_tensor(&mut ChaCha8Rng::seed_from_u64(seed), 4, 8);
        let ids: Vec<_> = ps.ids().filter(|&id| ps.get(id).name.starts_with("enc.c2t")).collect();
        let r = gradient_check(&mut ps, Some(&ids), &[h], |g, ps, x| enc.c2t.forward(g, ps, x[0], true), &opts(seed)).unwrap();
        assert!(r.passes(TOL), "{:?}", r.worst());
    }
}

#[test]
fn passthrough_fusion_recovers_first_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut ps = ParamStore::new();
    let f = Fusion::new(&mut ps, "f", 4, 3, &mut rng).unwrap();
    f.init_passthrough(&mut ps);
    let a = rand_tensor(&mut rng, 6, 4);
    let mut g = Graph::new();
    let av = g.constant(a.clone());
    let b = g.constant(Tensor::zeros(&[6, 4]));
    let out = f.forward(&mut g, &ps, av, b).unwrap();
    assert_eq!(g.value(out), &a);
}

#[test]
fn face_stream_broadcasts_identically() {
    let (enc, ps) = build(&small_cfg(), 11);
    let mut g = Graph::new();
    let face = g.constant(Tensor::vector(vec![0.1, -0.4, 0.3, 0.9]));
    let h = enc.face_stream(&mut g, &ps, face, 7).unwrap();
    let a = g.constant(rand_tensor(&mut ChaCha8Rng::seed_from_u64(11), 7, 8));
    let cat = g.concat_cols(&[a, h]).unwrap();
    let v = g.value(cat);
    for t in 1..7 {
        assert_eq!(&v.row(t)[8..], &v.row(0)[8..]);
    }
}

#[test]
fn fusion_rejects_length_mismatch() {
    let (enc, ps) = build(&small_cfg(), 12);
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[4, 8]));
    let b = g.constant(Tensor::zeros(&[5, 8]));
    assert!(enc.timbre_fusion.forward(&mut g, &ps, a, b).is_err());
}

#[test]
fn fusion_gradcheck() {
    for seed in 0..3 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamStore::new();
        let f = Fusion::new(&mut ps, "f", 3, 3, &mut rng).unwrap();
        let a = rand_tensor(&mut rng, 4, 3);
        let b = rand_tensor(&mut rng, 4, 3);
        let r = gradient_check(&mut ps, None, &[a, b], |g, ps, x| f.forward(g, ps, x[0], x[1]), &opts(seed)).unwrap();
        assert!(r.passes(TOL), "{:?}", r.worst());
    }
}

// ---- timbre and prosody stages ----

fn stage_inputs(seed: u64, t: usize) -> Vec<Tensor<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    vec![rand_tensor(&mut rng, t, 8), rand_tensor(&mut rng, t, 8), rand_tensor(&mut rng, t, 8)]
}

#[test]
fn perfect_timbre_prediction_has_zero_loss() {
    let (enc, ps) = build(&small_cfg(), 13);
    let x = stage_inputs(13, 4);
    let mut g = Graph::new();
    let v: Vec<Var> = x.iter().map(|t| g.constant(t.clone())).collect();
    let out = enc.timbre_stage(&mut g, &ps, v[0], v[1], v[2], None, Mode::Infer).unwrap();
    assert!(out.loss.is_none());
    let pred = g.value(out.prediction).data().to_vec();
    let again = enc.timbre_stage(&mut g, &ps, v[0], v[1], v[2], Some(&pred), Mode::Train).unwrap();
    assert_eq!(g.value(again.loss.unwrap()).data()[0], 0.0);
}

#[test]
fn timbre_stage_gradcheck() {
    for seed in 0..3 {
        let (enc, mut ps) = build(&small_cfg(), seed);
        let target = [0.3, -0.2, 0.5, 0.1];
        let ids: Vec<_> = ps
            .ids()
            .filter(|&id| ["enc.timbre", "enc.tp"].iter().any(|p| ps.get(id).name.starts_with(p)))
            .collect();
        let r = gradient_check(
            &mut ps,
            Some(&ids),
            &stage_inputs(seed, 4),
            |g, ps, x| {
                let out = enc.timbre_stage(g, ps, x[0], x[1], x[2], Some(&target), Mode::Train)?;
                let s = g.mean(out.h);
                g.add(s, out.loss.unwrap())
            },
            &opts(seed),
        )
        .unwrap();
        assert!(r.passes(TOL), "{:?}", r.worst());
    }
}

#[test]
fn perfect_prosody_prediction_has_zero_loss() {
    let cfg = EncoderConfig { ablation: AblationFlags { masked_pred: false, ..AblationFlags::default() }, ..small_cfg() };
    let (enc, ps) = build(&cfg, 14);
    let x = stage_inputs(14, 6);
    let mut g = Graph::new();
    let v: Vec<Var> = x.iter().map(|t| g.constant(t.clone())).collect();
    let out = enc.prosody_stage(&mut g, &ps, v[0], v[1], None, None, Mode::Infer).unwrap();
    let p = g.value(out.pitch).data().to_vec();
    let e = g.value(out.energy).data().to_vec();
    let again = enc.prosody_stage(&mut g, &ps, v[0], v[1], None, Some((&p, &e)), Mode::Train).unwrap();
    assert!(g.value(again.loss.unwrap()).data()[0].abs() < 1e-12);
}

#[test]
fn zero_pitch_target_loss_is_mean_abs_prediction() {
    let cfg = EncoderConfig { ablation: AblationFlags { masked_pred: false, ..AblationFlags::default() }, ..small_cfg() };
    let (enc, ps) = build(&cfg, 15);
    let x = stage_inputs(15, 6);
    let mut g = Graph::new();
    let v: Vec<Var> = x.iter().map(|t| g.constant(t.clone())).collect();
    let zeros = vec![0.0; 6];
    let out0 = enc.prosody_stage(&mut g, &ps, v[0], v[1], None, None, Mode::Infer).unwrap();
    let e = g.value(out0.energy).data().to_vec();
    let out = enc.prosody_stage(&mut g, &ps, v[0], v[1], None, Some((&zeros, &e)), Mode::Train).unwrap();
    let mean_abs = g.value(out.pitch).data().iter().map(|v| v.abs()).sum::<f64>() / 6.0;
    assert!((g.value(out.loss.unwrap()).data()[0] - mean_abs).abs() < 1e-12);
}

#[test]
fn prosody_stage_rejects_short_contours() {
    let (enc, ps) = build(&small_cfg(), 16);
    let x = stage_inputs(16, 6);
    let mut g = Graph::new();
    let v: Vec<Var> = x.iter().map(|t| g.constant(t.clone())).collect();
    let short = vec![0.0; 5];
    let r = enc.prosody_stage(&mut g, &ps, v[0], v[1], None, Some((&short, &short)), Mode::Train);
    assert!(r.is_err());
}

#[test]
fn prosody_stage_gradcheck() {
    for seed in 0..3 {
        let (enc, mut ps) = build(&small_cfg(), seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 50);
        let pitch: Vec<f64> = (0..4).map(|_| rng.random_range(2.0..3.0)).collect();
        let energy: Vec<f64> = (0..4).map(|_| rng.random_range(60.0..70.0)).collect();
        let ids: Vec<_> = ps
            .ids()
            .filter(|&id| ["enc.prosody", "enc.pitch", "enc.energy"].iter().any(|p| ps.get(id).name.starts_with(p)))
            .collect();
        let r = gradient_check(
            &mut ps,
            Some(&ids),
            &stage_inputs(seed, 4),
            |g, ps, x| {
                let out = enc.prosody_stage(g, ps, x[0], x[1], Some(x[2]), Some((&pitch, &energy)), Mode::Train)?;
                let s = g.mean(out.h);
                g.add(s, out.loss.unwrap())
            },
            &opts(seed),
        )
        .unwrap();
        assert!(r.passes(TOL), "{:?}", r.worst());
    }
}

// ---- finalize and full encoder ----

#[test]
fn finalize_shapes_and_constant_input() {
    let (enc, ps) = build(&small_cfg(), 17);
    let mut g = Graph::new();
    let h = g.constant(Tensor::zeros(&[5, 8]));
    let mu = enc.finalize(&mut g, &ps, h).unwrap();
    let v = g.value(mu);
    assert_eq!(v.shape(), &[5, 80]);
    for t in 1..5 {
        assert_eq!(v.row(t), v.row(0));
    }
}

#[test]
fn finalize_gradcheck() {
    for seed in 0..3 {
        let (enc, mut ps) = build(&small_cfg(), seed);
        let h = rand_tensor(&mut ChaCha8Rng::seed_from_u64(seed), 3, 8);
        let ids: Vec<_> = ps
            .ids()
            .filter(|&id| ["enc.final", "enc.out"].iter().any(|p| ps.get(id).name.starts_with(p)))
            .collect();
        let r = gradient_check(&mut ps, Some(&ids), &[h], |g, ps, x| enc.finalize(g, ps, x[0]), &opts(seed)).unwrap();
        assert!(r.passes(TOL), "{:?}", r.worst());
    }
}

#[test]
fn full_encoder_gradcheck() {
    for seed in 0..3 {
        let (enc, mut ps) = build(&small_cfg(), seed);
        let (input, mut targets) = sample(seed, 2);
        offset_targets(&mut targets);
        let o = GradCheckOptions { max_coords: Some(400), ..opts(seed) };
        let mu = gradient_check(
            &mut ps,
            None,
            &[],
            |g, ps, _| Ok(enc.encode(g, ps, &input, Some(&targets), Mode::Train)?.mu),
            &o,
        )
        .unwrap();
        assert!(mu.passes(TOL), "μ: {:?}", mu.worst());
        let losses = gradient_check(
            &mut ps,
            None,
            &[],
            |g, ps, _| {
                let tr = enc.encode(g, ps, &input, Some(&targets), Mode::Train)?;
                g.add_all(&[tr.l_c, tr.l_t, tr.l_p])
            },
            &o,
        )
        .unwrap();
        assert!(losses.passes(TOL), "losses: {:?}", losses.worst());
    }
}

#[test]
fn encode_is_deterministic_and_mel_rate() {
    for (label, flags) in AblationFlags::table() {
        let cfg = EncoderConfig { ablation: flags, ..small_cfg() };
        let (enc, ps) = build(&cfg, 18);
        let (input, targets) = sample(18, 5);
        let a = encode(&enc, &ps, &input, Some(&targets), Mode::Train).unwrap();
        let b = encode(&enc, &ps, &input, Some(&targets), Mode::Train).unwrap();
        assert_eq!(a, b, "{label}");
        assert_eq!(a.0.shape(), &[10, 80], "{label}");
        assert!(a.1.l_c > 0.0, "{label}");
        assert_eq!(a.1.l_t > 0.0, flags.timbre_stage, "{label}");
        assert_eq!(a.1.l_p > 0.0, flags.prosody_stage, "{label}");
        let (mu, losses) = encode(&enc, &ps, &input, None, Mode::Infer).unwrap();
        assert_eq!(mu.shape(), &[10, 80]);
        assert_eq!(losses, EncoderLosses::default());
    }
}

#[test]
fn train_mode_requires_targets() {
    let (enc, ps) = build(&small_cfg(), 19);
    let (input, _) = sample(19, 3);
    assert!(matches!(encode(&enc, &ps, &input, None, Mode::Train), Err(Error::Validation(_))));
}

#[test]
fn teacher_forcing_isolates_predictors() {
    let (enc, ps) = build(&small_cfg(), 20);
    let (input, targets) = sample(20, 6);
    let (mu_train, _) = encode(&enc, &ps, &input, Some(&targets), Mode::Train).unwrap();
    let (mu_infer, _) = encode(&enc, &ps, &input, None, Mode::Infer).unwrap();
    for prefix in ["enc.cp", "enc.tp", "enc.pitch.pp", "enc.energy.pp"] {
        let mut p2 = ps.clone();
        assert!(perturb(&mut p2, prefix, 21, 2.0) > 0);
        let (m_train, _) = encode(&enc, &p2, &input, Some(&targets), Mode::Train).unwrap();
        let diff = m_train.zip_map(&mu_train, |a, b| a - b).unwrap().max_abs();
        assert!(diff <= 1e-12, "{prefix}: train-mode μ moved by {diff}");
        let (m_infer, _) = encode(&enc, &p2, &input, None, Mode::Infer).unwrap();
        let diff = m_infer.zip_map(&mu_infer, |a, b| a - b).unwrap().max_abs();
        assert!(diff > 1e-6, "{prefix}: infer-mode μ unchanged");
    }
}

#[test]
fn without_timbre_face_id_is_ignored() {
    let cfg = EncoderConfig { ablation: AblationFlags { timbre_stage: false, ..AblationFlags::default() }, ..small_cfg() };
    let (enc, ps) = build(&cfg, 22);
    let (input, targets) = sample(22, 4);
    let mut other = input.clone();
    other.face_id.iter_mut().for_each(|v| *v = -3.0 * *v + 1.0);
    for mode in [Mode::Train, Mode::Infer] {
        let t = (mode == Mode::Train).then_some(&targets);
        assert_eq!(encode(&enc, &ps, &input, t, mode).unwrap().0, encode(&enc, &ps, &other, t, mode).unwrap().0);
    }
}

#[test]
fn without_hierarchy_mappers_are_bypassed() {
    let cfg = EncoderConfig { ablation: AblationFlags { hier: false, ..AblationFlags::default() }, ..small_cfg() };
    let (enc, ps) = build(&cfg, 23);
    let (input, targets) = sample(23, 4);
    let (mu, losses) = encode(&enc, &ps, &input, Some(&targets), Mode::Train).unwrap();
    assert!(losses.l_c > 0.0 && losses.l_t > 0.0 && losses.l_p > 0.0);
    let mut p2 = ps.clone();
    perturb(&mut p2, "enc.c2t", 1, 1.0);
    perturb(&mut p2, "enc.t2p", 2, 1.0);
    assert_eq!(encode(&enc, &p2, &input, Some(&targets), Mode::Train).unwrap().0, mu);
    // the full model does route through them
    let (full, fps) = build(&small_cfg(), 23);
    let (mu_full, _) = encode(&full, &fps, &input, Some(&targets), Mode::Train).unwrap();
    let mut p3 = fps.clone();
    perturb(&mut p3, "enc.c2t", 1, 1.0);
    assert_ne!(encode(&full, &p3, &input, Some(&targets), Mode::Train).unwrap().0, mu_full);
}

#[test]
fn without_expression_input_is_ignored() {
    let cfg = EncoderConfig { ablation: AblationFlags { expr: false, ..AblationFlags::default() }, ..small_cfg() };
    let (enc, ps) = build(&cfg, 24);
    let (input, targets) = sample(24, 4);
    let mut other = input.clone();
    other.expr = other.expr.map(|v| v * 2.0 + 1.0);
    let a = encode(&enc, &ps, &input, Some(&targets), Mode::Train).unwrap();
    let b = encode(&enc, &ps, &other, Some(&targets), Mode::Train).unwrap();
    assert_eq!(a, b);
}

#[test]
fn infer_mode_does_not_need_targets() {
    let (enc, ps) = build(&small_cfg(), 25);
    let (input, targets) = sample(25, 4);
    let a = encode(&enc, &ps, &input, None, Mode::Infer).unwrap();
    let b = encode(&enc, &ps, &input, Some(&targets), Mode::Infer).unwrap();
    assert_eq!(a, b);
}

#[test]
fn config_validation() {
    let bad = EncoderConfig { alpha: 0.0, ..EncoderConfig::default() };
    assert!(matches!(bad.validate(), Err(Error::Config(_))));
    let bad = EncoderConfig { kernel: 1, ..EncoderConfig::default() };
    assert!(bad.validate().is_err());
    assert_eq!(AblationFlags::table().len(), 8);
}
