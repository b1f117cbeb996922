use angioqa::fusion::{
    deformable_align, encode, must_forward, oq_branch, patchify, vbd_branch, vessel_tokens,
    vmc_branch, AttentionVars, BranchVars, DeformableVars, EncoderVars, ModelConfig, ModelError,
    QualityModel, TokenGrid, TokenSource, TripletImages,
};
use angioqa::gradcheck::{grad_check_with, GradCheckOptions};
use angioqa::graph::{Graph, Var};
use angioqa::tensor::{Tensor, TensorError};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], scale: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-scale..scale))
}

fn grid(g: &mut Graph<f64>, tokens: Tensor<f64>, side: usize, source: TokenSource) -> TokenGrid {
    let dim = tokens.shape()[1];
    TokenGrid {
        tokens: g.param(tokens),
        grid: side,
        dim,
        source,
    }
}

fn attention(g: &mut Graph<f64>, d: usize, rng: &mut ChaCha8Rng) -> AttentionVars {
    AttentionVars {
        wq: g.param(random(&[d, d], 0.5, rng)),
        wk: g.param(random(&[d, d], 0.5, rng)),
        wv: g.param(random(&[d, d], 0.5, rng)),
    }
}

fn branches(g: &mut Graph<f64>, d: usize, rng: &mut ChaCha8Rng) -> BranchVars {
    BranchVars {
        vmc_attn: attention(g, d, rng),
        wq_vmc: g.param(random(&[d, d], 0.5, rng)),
        bq_vmc: g.param(random(&[d], 0.1, rng)),
        conv1: g.param(random(&[d, d, 3, 3], 0.3, rng)),
        conv1_bias: g.param(random(&[d], 0.1, rng)),
        conv2: g.param(random(&[d, d, 3, 3], 0.3, rng)),
        conv2_bias: g.param(random(&[d], 0.1, rng)),
        wq_vbd: g.param(random(&[d, d], 0.5, rng)),
        bq_vbd: g.param(random(&[d], 0.1, rng)),
        wk: g.param(random(&[d, d], 0.5, rng)),
        wv: g.param(random(&[d, d], 0.5, rng)),
        wq_oq: g.param(random(&[d, d], 0.5, rng)),
        bq_oq: g.param(random(&[d], 0.1, rng)),
        fusion_logits: g.param(random(&[1, 3], 1.0, rng)),
    }
}

fn identity_dconv(g: &mut Graph<f64>, d: usize) -> DeformableVars {
    let mut k = Tensor::zeros(vec![d, d, 3, 3]);
    for c in 0..d {
        k.data_mut()[(c * d + c) * 9 + 4] = 1.0;
    }
    DeformableVars {
        offset_kernel: g.param(Tensor::zeros(vec![18, d, 3, 3])),
        kernel: g.param(k),
    }
}

fn rows_sum_to_one(t: &Tensor<f64>, tol: f64) -> bool {
    let n = t.shape()[1];
    t.data()
        .chunks(n)
        .all(|r| (r.iter().sum::<f64>() - 1.0).abs() <= tol)
}

fn max_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.max_abs_diff(b)
}

fn random_images(size: usize, rng: &mut ChaCha8Rng) -> TripletImages<f64> {
    let mut img = || {
        (0..size * size)
            .map(|_| rng.random_range(0.0..1.0))
            .collect::<Vec<f64>>()
    };
    TripletImages {
        mask: img(),
        contrast: img(),
        generated: img(),
    }
}

// Loop-based deformable convolution used as an oracle.

fn tent(plane: &[f64], side: usize, y: f64, x: f64) -> f64 {
    let mut acc = 0.0;
    for i in 0..side {
        for j in 0..side {
            let ky = (1.0 - (y - i as f64).abs()).max(0.0);
            let kx = (1.0 - (x - j as f64).abs()).max(0.0);
            acc += ky * kx * plane[i * side + j];
        }
    }
    acc
}

/// `tokens[n×d]` → channel planes `[d][g·g]`.
fn planes(tokens: &Tensor<f64>, side: usize) -> Vec<Vec<f64>> {
    let d = tokens.shape()[1];
    (0..d)
        .map(|c| (0..side * side).map(|p| tokens.data()[p * d + c]).collect())
        .collect()
}

fn naive_dconv(
    tokens: &Tensor<f64>,
    side: usize,
    offset_kernel: &Tensor<f64>,
    kernel: &Tensor<f64>,
) -> Tensor<f64> {
    let d = tokens.shape()[1];
    let o = kernel.shape()[0];
    let maps = planes(tokens, side);
    let at = |c: usize, y: i64, x: i64| {
        if y < 0 || x < 0 || y >= side as i64 || x >= side as i64 {
            0.0
        } else {
            maps[c][y as usize * side + x as usize]
        }
    };
    let mut out = vec![0.0; side * side * o];
    for y in 0..side {
        for x in 0..side {
            let mut offsets = [0.0; 18];
            for (ch, off) in offsets.iter_mut().enumerate() {
                for c in 0..d {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            *off += offset_kernel.data()[((ch * d + c) * 3 + ky) * 3 + kx]
                                * at(c, y as i64 + ky as i64 - 1, x as i64 + kx as i64 - 1);
                        }
                    }
                }
            }
            for oc in 0..o {
                let mut acc = 0.0;
                for c in 0..d {
                    for tap in 0..9 {
                        let sy = y as f64 + (tap / 3) as f64 - 1.0 + offsets[2 * tap];
                        let sx = x as f64 + (tap % 3) as f64 - 1.0 + offsets[2 * tap + 1];
                        acc += kernel.data()[(oc * d + c) * 9 + tap] * tent(&maps[c], side, sy, sx);
                    }
                }
                out[(y * side + x) * o + oc] = acc;
            }
        }
    }
    Tensor::new(vec![side * side, o], out).unwrap()
}

#[test]
fn zero_image_with_zero_biases_encodes_to_zeros() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (size, patch, d) = (16, 4, 6);
    let mut g = Graph::new();
    let enc = EncoderVars {
        embed: g.param(random(&[16, d], 0.5, &mut rng)),
        embed_bias: g.param(Tensor::zeros(vec![d])),
        position: g.param(Tensor::zeros(vec![16, d])),
        attn: attention(&mut g, d, &mut rng),
    };
    let patches = g.input(patchify(&vec![0.0; size * size], size, patch).unwrap());
    let out = encode(&mut g, patches, &enc, 4, TokenSource::Mask).unwrap();
    assert!(g.value(out.tokens).data().iter().all(|&v| v == 0.0));
    assert_eq!(g.shape(out.tokens), &[16, d]);
}

#[test]
fn different_images_encode_differently() {
    let model = QualityModel::<f64>::init(ModelConfig::tiny(), 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = random_images(16, &mut rng);
    let b = random_images(16, &mut rng);
    let (pa, pb) = (model.predict(&a).unwrap(), model.predict(&b).unwrap());
    assert_ne!(pa.scores(), pb.scores());
}

#[test]
fn patchify_layout_and_errors() {
    let img: Vec<f64> = (0..16).map(|v| v as f64).collect();
    let p = patchify(&img, 4, 2).unwrap();
    assert_eq!(p.shape(), &[4, 4]);
    assert_eq!(&p.data()[0..4], &[0.0, 1.0, 4.0, 5.0]);
    assert_eq!(&p.data()[12..16], &[10.0, 11.0, 14.0, 15.0]);
    assert!(patchify(&img, 4, 3).is_err());
    assert!(patchify(&img[..15], 4, 2).is_err());
}

#[test]
fn wrong_image_size_is_rejected() {
    let model = QualityModel::<f64>::init(ModelConfig::tiny(), 0).unwrap();
    let mut images = random_images(16, &mut ChaCha8Rng::seed_from_u64(0));
    images.generated.pop();
    assert!(matches!(
        model.predict(&images),
        Err(ModelError::Tensor(TensorError::Invalid { .. }))
    ));
}

#[test]
fn constant_grid_stays_constant_inside() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (side, d) = (7, 3);
    let mut g = Graph::new();
    let row: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let tokens = Tensor::from_fn(vec![side * side, d], |i| row[i % d]);
    let fc = grid(&mut g, tokens, side, TokenSource::Contrast);
    let dconv = DeformableVars {
        offset_kernel: g.param(random(&[18, d, 3, 3], 0.02, &mut rng)),
        kernel: g.param(random(&[d, d, 3, 3], 0.5, &mut rng)),
    };
    let out = deformable_align(&mut g, &fc, &dconv).unwrap();
    let v = g.value(out.tokens).data();
    let reference = &v[(2 * side + 2) * d..(2 * side + 3) * d];
    for y in 2..side - 2 {
        for x in 2..side - 2 {
            let cell = &v[(y * side + x) * d..(y * side + x + 1) * d];
            for (a, b) in cell.iter().zip(reference) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn vessel_token_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (side, d) = (4, 3);
    let t = random(&[16, d], 1.0, &mut rng);
    let mut g = Graph::new();
    let fc = grid(&mut g, t.clone(), side, TokenSource::Contrast);
    let fm = grid(&mut g, t.clone(), side, TokenSource::Mask);
    let ident = identity_dconv(&mut g, d);
    let v = vessel_tokens(&mut g, &fc, &fm, &ident).unwrap();
    assert_eq!(v.source, TokenSource::Vessel);
    assert!(g.value(v.tokens).data().iter().all(|&x| x == 0.0));

    let zero = grid(&mut g, Tensor::zeros(vec![16, d]), side, TokenSource::Mask);
    let dconv = DeformableVars {
        offset_kernel: g.param(random(&[18, d, 3, 3], 0.2, &mut rng)),
        kernel: g.param(random(&[d, d, 3, 3], 0.5, &mut rng)),
    };
    let v = vessel_tokens(&mut g, &fc, &zero, &dconv).unwrap();
    let aligned = deformable_align(&mut g, &fc, &dconv).unwrap();
    assert_eq!(g.value(v.tokens).data(), g.value(aligned.tokens).data());

    assert!(matches!(
        vessel_tokens(&mut g, &fm, &fc, &dconv),
        Err(ModelError::Usage(_))
    ));
}

#[test]
fn vessel_tokens_match_loop_oracle() {
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let (side, d) = (5, 3);
        let c = random(&[side * side, d], 1.0, &mut rng);
        let m = random(&[side * side, d], 1.0, &mut rng);
        let ok = random(&[18, d, 3, 3], 0.3, &mut rng);
        let k = random(&[d, d, 3, 3], 0.5, &mut rng);
        let mut g = Graph::new();
        let fc = grid(&mut g, c.clone(), side, TokenSource::Contrast);
        let fm = grid(&mut g, m.clone(), side, TokenSource::Mask);
        let dconv = DeformableVars {
            offset_kernel: g.param(ok.clone()),
            kernel: g.param(k.clone()),
        };
        let v = vessel_tokens(&mut g, &fc, &fm, &dconv).unwrap();
        let aligned = naive_dconv(&c, side, &ok, &k);
        let expected = Tensor::from_fn(vec![side * side, d], |i| aligned.data()[i] - m.data()[i]);
        assert!(max_diff(g.value(v.tokens), &expected) < 1e-12);
    }
}

#[test]
fn single_token_branches() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let d = 4;
    let mut g = Graph::new();
    let fv = grid(
        &mut g,
        random(&[1, d], 1.0, &mut rng),
        1,
        TokenSource::Vessel,
    );
    let fg = grid(
        &mut g,
        random(&[1, d], 1.0, &mut rng),
        1,
        TokenSource::Generated,
    );
    let b = branches(&mut g, d, &mut rng);
    let (a_vmc, f_vmc) = vmc_branch(&mut g, &fv, &fg, &b).unwrap();
    assert_eq!(g.value(a_vmc).data(), &[1.0]);
    let v = g.matmul(fg.tokens, b.wv).unwrap();
    assert_eq!(g.value(f_vmc).data(), g.value(v).data());
    let (a_vbd, _) = vbd_branch(&mut g, &fv, &fg, &b).unwrap();
    assert_eq!(g.value(a_vbd).data(), &[1.0]);
}

#[test]
fn zero_conv_block_gives_uniform_vbd_attention() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (side, d) = (3, 4);
    let mut g = Graph::new();
    let fv = grid(
        &mut g,
        random(&[9, d], 1.0, &mut rng),
        side,
        TokenSource::Vessel,
    );
    let fg = grid(
        &mut g,
        random(&[9, d], 1.0, &mut rng),
        side,
        TokenSource::Generated,
    );
    let mut b = branches(&mut g, d, &mut rng);
    b.conv1 = g.param(Tensor::zeros(vec![d, d, 3, 3]));
    b.conv1_bias = g.param(Tensor::zeros(vec![d]));
    b.conv2 = g.param(Tensor::zeros(vec![d, d, 3, 3]));
    b.conv2_bias = g.param(Tensor::zeros(vec![d]));
    b.bq_vbd = g.param(Tensor::zeros(vec![d]));
    let (a, _) = vbd_branch(&mut g, &fv, &fg, &b).unwrap();
    assert!(g
        .value(a)
        .data()
        .iter()
        .all(|&p| (p - 1.0 / 9.0).abs() < 1e-15));
}

#[test]
fn oq_simplex_corner_and_center() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (side, d) = (3, 4);
    let mut g = Graph::new();
    let fv = grid(
        &mut g,
        random(&[9, d], 1.0, &mut rng),
        side,
        TokenSource::Vessel,
    );
    let fg = grid(
        &mut g,
        random(&[9, d], 1.0, &mut rng),
        side,
        TokenSource::Generated,
    );
    let mut b = branches(&mut g, d, &mut rng);
    let (a_vmc, f_vmc) = vmc_branch(&mut g, &fv, &fg, &b).unwrap();
    let (a_vbd, _) = vbd_branch(&mut g, &fv, &fg, &b).unwrap();

    b.fusion_logits = g.param(Tensor::from_f64(vec![1, 3], &[-400.0, 400.0, -400.0]).unwrap());
    let oq = oq_branch(&mut g, &fg, a_vmc, a_vbd, &b).unwrap();
    assert_eq!(g.value(oq.weights).data(), &[0.0, 1.0, 0.0]);
    assert_eq!(g.value(oq.tokens).data(), g.value(f_vmc).data());

    b.fusion_logits = g.param(Tensor::zeros(vec![1, 3]));
    let oq = oq_branch(&mut g, &fg, a_vmc, a_vbd, &b).unwrap();
    for &w in g.value(oq.weights).data() {
        assert!((w - 1.0 / 3.0).abs() < 1e-16);
    }
    assert!(rows_sum_to_one(g.value(oq.attn_fused), 1e-12));
    assert!(rows_sum_to_one(g.value(oq.attn_generated), 1e-12));
}

#[test]
fn must_forward_is_deterministic_and_matches_manual_chain() {
    let config = ModelConfig::tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let images = random_images(config.image_size, &mut rng);
    let d = config.dim;
    let n = config.tokens();
    let mut g = Graph::new();
    let enc = EncoderVars {
        embed: g.param(random(&[16, d], 0.5, &mut rng)),
        embed_bias: g.param(random(&[d], 0.1, &mut rng)),
        position: g.param(random(&[n, d], 0.3, &mut rng)),
        attn: attention(&mut g, d, &mut rng),
    };
    let dconv = DeformableVars {
        offset_kernel: g.param(random(&[18, d, 3, 3], 0.05, &mut rng)),
        kernel: g.param(random(&[d, d, 3, 3], 0.3, &mut rng)),
    };
    let b = branches(&mut g, d, &mut rng);
    let side = config.grid();
    let patches = |g: &mut Graph<f64>, img: &[f64]| {
        g.input(patchify(img, config.image_size, config.patch_size).unwrap())
    };
    let (pm, pc, pg) = (
        patches(&mut g, &images.mask),
        patches(&mut g, &images.contrast),
        patches(&mut g, &images.generated),
    );

    let first = must_forward(&mut g, pm, pc, pg, &enc, &dconv, &b, side).unwrap();
    let second = must_forward(&mut g, pm, pc, pg, &enc, &dconv, &b, side).unwrap();
    for (x, y) in [
        (first.vmc, second.vmc),
        (first.vbd, second.vbd),
        (first.oq, second.oq),
    ] {
        assert_eq!(g.value(x).data(), g.value(y).data());
    }

    let fm = encode(&mut g, pm, &enc, side, TokenSource::Mask).unwrap();
    let fc = encode(&mut g, pc, &enc, side, TokenSource::Contrast).unwrap();
    let fg = encode(&mut g, pg, &enc, side, TokenSource::Generated).unwrap();
    let fv = vessel_tokens(&mut g, &fc, &fm, &dconv).unwrap();
    let (a_vmc, f_vmc) = vmc_branch(&mut g, &fv, &fg, &b).unwrap();
    let (a_vbd, f_vbd) = vbd_branch(&mut g, &fv, &fg, &b).unwrap();
    let oq = oq_branch(&mut g, &fg, a_vmc, a_vbd, &b).unwrap();
    for (x, y) in [
        (first.vmc, f_vmc),
        (first.vbd, f_vbd),
        (first.oq, oq.tokens),
        (first.attn_vmc, a_vmc),
        (first.attn_vbd, a_vbd),
    ] {
        assert!(max_diff(g.value(x), g.value(y)) <= 1e-12);
    }
    for a in [
        first.attn_vmc,
        first.attn_vbd,
        first.attn_generated,
        first.attn_fused,
    ] {
        assert!(rows_sum_to_one(g.value(a), 1e-6));
    }
}

#[test]
fn mask_equal_to_contrast_collapses_vmc_queries() {
    let config = ModelConfig::tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let img: Vec<f64> = (0..256).map(|_| rng.random_range(0.0..1.0)).collect();
    let d = config.dim;
    let mut g = Graph::new();
    let enc = EncoderVars {
        embed: g.param(random(&[16, d], 0.5, &mut rng)),
        embed_bias: g.param(random(&[d], 0.1, &mut rng)),
        position: g.param(random(&[16, d], 0.3, &mut rng)),
        attn: attention(&mut g, d, &mut rng),
    };
    let dconv = identity_dconv(&mut g, d);
    let mut b = branches(&mut g, d, &mut rng);
    b.bq_vmc = g.param(Tensor::zeros(vec![d]));
    let p = g.input(patchify(&img, 16, 4).unwrap());
    let gen = g.input(random(&[16, 16], 1.0, &mut rng));
    let out = must_forward(&mut g, p, p, gen, &enc, &dconv, &b, 4).unwrap();
    assert!(g.value(out.vessel.tokens).data().iter().all(|&v| v == 0.0));
    assert!(g
        .value(out.attn_vmc)
        .data()
        .iter()
        .all(|&a| (a - 1.0 / 16.0).abs() < 1e-15));
}

#[test]
fn model_parameters_all_receive_finite_nonzero_gradients() {
    for fusion in [true, false] {
        let config = ModelConfig {
            fusion,
            ..ModelConfig::tiny()
        };
        let model = QualityModel::<f64>::init(config, 11).unwrap();
        let images = random_images(16, &mut ChaCha8Rng::seed_from_u64(11));
        let (loss, grads) = model.loss_and_gradients(&images, [0, 2, 4]).unwrap();
        assert!(loss.is_finite() && loss > 0.0);
        for ((name, _), grad) in model.params().iter().zip(&grads) {
            assert!(grad.is_finite(), "{name}");
            assert!(
                grad.data().iter().any(|&v| v != 0.0),
                "{name} has a zero gradient"
            );
        }
    }
}

#[test]
fn fusion_weights_start_uniform() {
    let model = QualityModel::<f64>::init(ModelConfig::default(), 0).unwrap();
    let w = model.fusion_weights().unwrap();
    assert_eq!(w[0] + w[1] + w[2], 1.0);
    assert!(w.iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-15), "{w:?}");
    let baseline = QualityModel::<f64>::init(
        ModelConfig {
            fusion: false,
            ..ModelConfig::default()
        },
        0,
    )
    .unwrap();
    assert!(baseline.fusion_weights().is_none());
}

#[test]
fn default_model_is_desk_sized() {
    let model = QualityModel::<f64>::init(ModelConfig::default(), 0).unwrap();
    let n = model.params().num_scalars();
    assert!((20_000..120_000).contains(&n), "{n} parameters");
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    let model = QualityModel::<f64>::init(ModelConfig::tiny(), 12).unwrap();
    model.save(&path).unwrap();
    let loaded = QualityModel::<f64>::load(&path).unwrap();
    assert_eq!(loaded.config(), model.config());
    for ((n1, a), (n2, b)) in model.params().iter().zip(loaded.params().iter()) {
        assert_eq!(n1, n2);
        assert_eq!(a, b);
    }
    let images = random_images(16, &mut ChaCha8Rng::seed_from_u64(12));
    assert_eq!(
        model.predict(&images).unwrap().scores(),
        loaded.predict(&images).unwrap().scores()
    );

    let text = model.to_json().unwrap();
    let bad = text.replacen("angioqa-checkpoint", "other", 1);
    assert!(matches!(
        QualityModel::<f64>::from_json(&bad),
        Err(ModelError::Checkpoint(_))
    ));
    let other_config = QualityModel::<f64>::init(
        ModelConfig {
            dim: 6,
            ..ModelConfig::tiny()
        },
        0,
    )
    .unwrap();
    let mixed = text.replacen("\"dim\":8", "\"dim\":6", 1);
    assert!(matches!(
        QualityModel::<f64>::from_json(&mixed),
        Err(ModelError::Checkpoint(_))
    ));
    assert!(other_config.to_json().is_ok());
}

#[test]
fn single_precision_model_runs() {
    let model = QualityModel::<f32>::init(ModelConfig::tiny(), 13).unwrap();
    let images = TripletImages {
        mask: vec![0.2f32; 256],
        contrast: vec![0.5; 256],
        generated: vec![0.7; 256],
    };
    let scores = model.predict(&images).unwrap().scores();
    assert!(scores.iter().all(|s| (10.0..=90.0).contains(s)));
}

/// Freshly initialized model with small random deformable offsets, so sampling
/// points leave the integer grid where bilinear interpolation has kinks.
fn perturbed_model(config: ModelConfig, seed: u64) -> QualityModel<f64> {
    let mut model = QualityModel::<f64>::init(config, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let params = model.params_mut();
    if let Some(id) = params.find("dconv.offset_kernel") {
        for v in params.get_mut(id).data_mut() {
            *v = rng.random_range(-0.05..0.05);
        }
    }
    model
}

fn model_loss(
    model: &QualityModel<f64>,
    images: &TripletImages<f64>,
    g: &mut Graph<f64>,
    vars: &[Var],
) -> Result<Var, TensorError> {
    let to_tensor = |e: ModelError| match e {
        ModelError::Tensor(t) => t,
        other => TensorError::invalid("model", other.to_string()),
    };
    let out = model.forward(g, vars, images).map_err(to_tensor)?;
    model.loss(g, &out, [1, 3, 2]).map_err(to_tensor)
}

#[test]
fn tiny_model_passes_gradient_check() {
    for fusion in [true, false] {
        let config = ModelConfig {
            fusion,
            ..ModelConfig::tiny()
        };
        let model = perturbed_model(config, 14);
        let images = random_images(16, &mut ChaCha8Rng::seed_from_u64(14));
        let params: Vec<(String, Tensor<f64>)> = model
            .params()
            .iter()
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect();
        let report = grad_check_with(
            &params,
            GradCheckOptions {
                max_per_param: Some(24),
                ..Default::default()
            },
            |g, v| model_loss(&model, &images, g, v),
        )
        .unwrap();
        assert_eq!(report.params.len(), params.len());
        assert!(report.max_rel_error() < 1e-4, "{:?}", report.worst());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn identity_dconv_is_identity(side in 1usize..6, d in 1usize..5, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = random(&[side * side, d], 2.0, &mut rng);
        let mut g = Graph::new();
        let fc = grid(&mut g, t.clone(), side, TokenSource::Contrast);
        let ident = identity_dconv(&mut g, d);
        let out = deformable_align(&mut g, &fc, &ident).unwrap();
        prop_assert!(max_diff(g.value(out.tokens), &t) <= 1e-12);
    }

    #[test]
    fn model_attention_is_row_stochastic(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = perturbed_model(ModelConfig::tiny(), seed);
        let images = random_images(16, &mut rng);
        let mut g = Graph::new();
        let bound = model.params().bind(&mut g);
        let out = model.forward(&mut g, &bound, &images).unwrap();
        let br = out.branches.unwrap();
        for a in [br.attn_vmc, br.attn_vbd, br.attn_generated, br.attn_fused] {
            prop_assert!(rows_sum_to_one(g.value(a), 1e-6));
            prop_assert!(g.value(a).data().iter().all(|&p| p >= 0.0));
        }
        let w = g.value(br.weights).data();
        prop_assert!(w.iter().all(|&x| x > 0.0 && x < 1.0));
    }

    #[test]
    fn vmc_output_ignores_key_value_order(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (side, d) = (3, 4);
        let n = side * side;
        let gen = random(&[n, d], 1.0, &mut rng);
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let permuted = Tensor::from_fn(vec![n, d], |i| gen.data()[perm[i / d] * d + i % d]);
        let mut g = Graph::new();
        let fv = grid(&mut g, random(&[n, d], 1.0, &mut rng), side, TokenSource::Vessel);
        let b = branches(&mut g, d, &mut rng);
        let fg = grid(&mut g, gen, side, TokenSource::Generated);
        let fp = grid(&mut g, permuted, side, TokenSource::Generated);
        let (_, a) = vmc_branch(&mut g, &fv, &fg, &b).unwrap();
        let (_, p) = vmc_branch(&mut g, &fv, &fp, &b).unwrap();
        prop_assert!(max_diff(g.value(a), g.value(p)) < 1e-9);
    }
}
