use pamr_core::backbone::{
    interpolation_weights, pretrain_loss, token_propagate, ReconstructionHead, SelfAttention, TransformerBlock,
};
use pamr_core::embedding::{LaConfig, LocalAttention, PatchEmbed, PosEmbed, TokenBatch, TokenMerge};
use pamr_core::geometry::{build_scale_pyramid, gather_patches, mask_and_backproject, MaskPlan, Point};
use pamr_core::nn::Linear;
use pamr_core::params::ParamBuilder;
use pamr_core::tensor::{finite_diff_check, GradCheckConfig};
use pamr_core::{BackboneConfig, Error, MaskedAutoencoder, ParamSet, PointCloud, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn build<T>(seed: u64, f: impl FnOnce(&mut ParamBuilder) -> T) -> (T, ParamSet) {
    let mut params = ParamSet::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let out = f(&mut ParamBuilder { params: &mut params, rng: &mut rng });
    (out, params)
}

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn cloud(n: usize, seed: u64) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pts = (0..n).map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]);
    PointCloud::new(pts.collect(), None).unwrap().normalized()
}

fn edit(params: &mut ParamSet, id: pamr_core::ParamId, f: impl FnOnce(&mut [f64])) {
    let t = params.get(id);
    let mut d = t.data().to_vec();
    f(&mut d);
    let t = Tensor::new(t.shape(), d).unwrap();
    let name = params.name(id).to_string();
    params.load_matching([(name.as_str(), &t)]).unwrap();
}

fn bits(tape: &Tape, v: pamr_core::Var) -> Vec<u64> {
    tape.value(v).iter().map(|x| x.to_bits()).collect()
}

#[test]
fn la_keeps_shape_at_paper_width() {
    let (la, params) = build(1, |b| LocalAttention::new(b, "la", 96, LaConfig::default()).unwrap());
    let mut tape = Tape::new();
    let x = tape.constant(random(&[4, 16, 96], 2));
    let y = la.forward(&mut tape, &params, x).unwrap();
    assert_eq!(tape.shape(y), &[4, 16, 96]);
}

#[test]
fn patch_tokens_ignore_neighbor_order_and_duplicates() {
    let cfg = LaConfig { window: 3, groups: 4, ..LaConfig::default() };
    let (embed, params) = build(3, |b| PatchEmbed::new(b, "e", 8, 16, cfg).unwrap());
    let patches = random(&[3, 5, 3], 4);
    let p = patches.data();
    let regroup = |order: &[usize]| {
        let mut d = Vec::new();
        for m in 0..3 {
            for &j in order {
                d.extend_from_slice(&p[(m * 5 + j) * 3..(m * 5 + j + 1) * 3]);
            }
        }
        Tensor::new(&[3, order.len(), 3], d).unwrap()
    };
    let run = |t: &Tensor| {
        let mut tape = Tape::new();
        let y = embed.tokenize(&mut tape, &params, t).unwrap();
        assert_eq!(tape.shape(y), &[3, 16]);
        tape.value(y).to_vec()
    };
    let base = run(&patches);
    for (a, b) in base.iter().zip(run(&regroup(&[4, 2, 0, 3, 1]))) {
        assert!((a - b).abs() < 1e-12);
    }
    for (a, b) in base.iter().zip(run(&regroup(&[0, 0, 1, 1, 2, 2, 3, 3, 4, 4]))) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn paper_first_stage_tokens() {
    let cfg = BackboneConfig::paper();
    let pc = cloud(2048, 5);
    let pyr = build_scale_pyramid(&pc, &cfg.sizes, &cfg.ks).unwrap();
    let (embed, params) = build(6, |b| PatchEmbed::new(b, "e", cfg.embed_hidden, cfg.dims[0], cfg.la).unwrap());
    let centers: Vec<usize> = (0..512).collect();
    let patches = gather_patches(&pyr, 1, &centers).unwrap();
    let mut tape = Tape::new();
    let t = embed.tokenize(&mut tape, &params, &patches).unwrap();
    assert_eq!(tape.shape(t), &[512, 96]);
    let (pos, pp) = build(7, |b| PosEmbed::new(b, "pos", 96).unwrap());
    let mut tape = Tape::new();
    let pe = pos.forward(&mut tape, &pp, pyr.points(1)).unwrap();
    assert_eq!(tape.shape(pe), &[512, 96]);
}

#[test]
fn positional_embedding_depends_only_on_coords() {
    let (pos, mut params) = build(8, |b| PosEmbed::new(b, "pos", 6).unwrap());
    let coords: Vec<Point> = vec![[0.1, 0.2, 0.3], [0.5, -0.5, 0.0], [0.1, 0.2, 0.3]];
    let mut tape = Tape::new();
    let y = pos.forward(&mut tape, &params, &coords).unwrap();
    let v = tape.value(y);
    assert_eq!(v[..6], v[12..]);
    assert_ne!(v[..6], v[6..12]);
    let w = random(&[3, 6], 9);
    let report = finite_diff_check(
        |t, p| {
            let y = pos.forward(t, p, &coords)?;
            let w = t.constant(w.clone());
            let z = t.mul(y, w)?;
            t.sum(z)
        },
        &mut params,
        &GradCheckConfig::default(),
    )
    .unwrap();
    assert!(report.passed(), "max rel err {}", report.max_rel_err());
}

fn tiny_setup(ratio: f64, seed: u64) -> (BackboneConfig, pamr_core::ScalePyramid, MaskPlan) {
    let cfg = BackboneConfig::tiny();
    let pc = cloud(cfg.n_points, seed);
    let pyr = build_scale_pyramid(&pc, &cfg.sizes, &cfg.ks).unwrap();
    let plan = mask_and_backproject(&pyr, ratio, seed).unwrap();
    (cfg, pyr, plan)
}

#[test]
fn merge_is_order_free_and_checks_visibility() {
    let (cfg, pyr, plan) = tiny_setup(0.5, 11);
    let (merge, params) = build(12, |b| TokenMerge::new(b, "m", 8, 16).unwrap());
    let n1 = plan.visible(1).len();
    let feats = random(&[n1, 8], 13);
    let mut tape = Tape::new();
    let prev = TokenBatch {
        tokens: tape.constant(feats.clone()),
        coords: vec![],
        indices: plan.visible(1).to_vec(),
        scale: 1,
    };
    let out = merge.forward(&mut tape, &params, &prev, &pyr, &plan, 2).unwrap();
    assert_eq!(tape.shape(out.tokens), &[plan.visible(2).len(), cfg.dims[1]]);
    let base = tape.value(out.tokens).to_vec();

    // same tokens listed in reverse order
    let rev: Vec<usize> = (0..n1).rev().collect();
    let d: Vec<f64> = rev.iter().flat_map(|&r| feats.row(r).to_vec()).collect();
    let prev_rev = TokenBatch {
        tokens: tape.constant(Tensor::new(&[n1, 8], d).unwrap()),
        coords: vec![],
        indices: rev.iter().map(|&r| plan.visible(1)[r]).collect(),
        scale: 1,
    };
    let out = merge.forward(&mut tape, &params, &prev_rev, &pyr, &plan, 2).unwrap();
    assert_eq!(tape.value(out.tokens), &base[..]);

    let short = TokenBatch {
        tokens: tape.constant(random(&[n1 - 1, 8], 14)),
        coords: vec![],
        indices: plan.visible(1)[1..].to_vec(),
        scale: 1,
    };
    assert!(matches!(merge.forward(&mut tape, &params, &short, &pyr, &plan, 2), Err(Error::Consistency(_))));
}

#[test]
fn single_token_attention_is_value_projection() {
    let (attn, mut params) = build(15, |b| SelfAttention::new(b, "a", 6, 2).unwrap());
    let x = random(&[1, 6], 16);
    let run = |p: &ParamSet| {
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let y = attn.forward(&mut tape, p, v).unwrap();
        tape.value(y).to_vec()
    };
    let before = run(&params);
    // query and key weights occupy the first 2C output columns of qkv
    edit(&mut params, attn.qkv.weight, |w| {
        for r in 0..6 {
            for c in 0..12 {
                w[r * 18 + c] += 0.7;
            }
        }
    });
    assert_eq!(before, run(&params));
}

#[test]
fn block_shape_and_gradient() {
    let (block, params) = build(17, |b| TransformerBlock::new(b, "blk", 384, 6, 4).unwrap());
    let mut tape = Tape::new();
    let x = tape.constant(random(&[26, 384], 18));
    let y = block.forward(&mut tape, &params, x).unwrap();
    assert_eq!(tape.shape(y), &[26, 384]);

    let (block, mut params) = build(19, |b| TransformerBlock::new(b, "blk", 6, 2, 4).unwrap());
    let x = random(&[4, 6], 20);
    let w = random(&[4, 6], 21);
    let report = finite_diff_check(
        |t, p| {
            let x = t.constant(x.clone());
            let y = block.forward(t, p, x)?;
            let w = t.constant(w.clone());
            let z = t.mul(y, w)?;
            t.sum(z)
        },
        &mut params,
        &GradCheckConfig::default(),
    )
    .unwrap();
    assert!(report.passed(), "max rel err {}", report.max_rel_err());
}

#[test]
fn interpolation_weights_are_convex() {
    let coarse = cloud(10, 22).points;
    let mut fine = cloud(30, 23).points;
    fine[0] = coarse[4];
    let (table, w) = interpolation_weights(&fine, &coarse, 3).unwrap();
    for row in w.chunks(3) {
        assert!(row.iter().all(|&v| v >= 0.0));
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    assert_eq!(table.row(0)[0], 4);
    assert!(w[0] > 1.0 - 1e-6);
    assert!(matches!(interpolation_weights(&fine, &[], 3), Err(Error::Argument(_))));
}

#[test]
fn propagating_constant_tokens_gives_projection() {
    let (proj, params) = build(24, |b| Linear::new(b, "p", 4, 3).unwrap());
    let v = [0.3, -1.2, 0.8, 2.0];
    let coarse = cloud(6, 25).points;
    let fine = cloud(15, 26).points;
    let mut tape = Tape::new();
    let tokens = tape.constant(Tensor::new(&[6, 4], v.repeat(6)).unwrap());
    let out = token_propagate(&mut tape, &params, tokens, &coarse, &fine, 3, &proj).unwrap();
    let one = tape.constant(Tensor::new(&[1, 4], v.to_vec()).unwrap());
    let want = proj.forward(&mut tape, &params, one).unwrap();
    let want = tape.value(want).to_vec();
    for row in tape.value(out).chunks(3) {
        for (a, b) in row.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn encoder_counts_without_masking() {
    let mut cfg = BackboneConfig::paper();
    cfg.encoder_blocks = 1;
    let pc = cloud(2048, 27);
    let pyr = build_scale_pyramid(&pc, &cfg.sizes, &cfg.ks).unwrap();
    let plan = mask_and_backproject(&pyr, 0.0, 1).unwrap();
    let (model, params) = MaskedAutoencoder::new(cfg, 28).unwrap();
    let mut tape = Tape::new();
    let enc = model.encoder.forward(&mut tape, &params, &pyr, &plan).unwrap();
    let shapes: Vec<_> = enc.iter().map(|b| tape.shape(b.tokens).to_vec()).collect();
    assert_eq!(shapes, vec![vec![512, 96], vec![256, 192], vec![64, 384]]);
    let dec = model.decoder.forward(&mut tape, &params, &enc, &pyr, &plan).unwrap();
    assert!(dec.masked.is_none());
    assert_eq!(tape.shape(dec.tokens), &[256, 192]);
    assert!(matches!(model.forward(&mut tape, &params, &pyr, &plan), Err(Error::UndefinedLoss(_))));
}

#[test]
fn forward_is_deterministic_and_mask_token_matters() {
    let (cfg, pyr, plan) = tiny_setup(0.6, 29);
    let (model, mut params) = MaskedAutoencoder::new(cfg, 30).unwrap();
    let run = |p: &ParamSet| {
        let mut tape = Tape::new();
        let f = model.forward(&mut tape, p, &pyr, &plan).unwrap();
        let enc: Vec<_> = f.encoded.iter().map(|b| bits(&tape, b.tokens)).collect();
        (enc, bits(&tape, f.decoded.stages[0]), bits(&tape, f.loss))
    };
    let a = run(&params);
    assert_eq!(a, run(&params));

    edit(&mut params, model.decoder.mask_token, |m| m[0] += 0.5);
    let b = run(&params);
    assert_eq!(a.0, b.0);
    let d = BackboneConfig::tiny().dims[1];
    let changed = |j: usize| a.1[j * d..(j + 1) * d] != b.1[j * d..(j + 1) * d];
    // one decoder block mixes all rows, so check that masked rows moved
    assert!(plan.masked(2).iter().all(|&j| changed(j)));
}

#[test]
fn encoder_ignores_points_outside_visible_patches() {
    let (cfg, pyr, plan) = tiny_setup(0.75, 31);
    let pc = PointCloud::new(pyr.points(0).to_vec(), None).unwrap();
    let used: Vec<usize> = plan.visible(1).iter().flat_map(|&c| pyr.neighbors(1).row(c).to_vec()).collect();
    let sampled = pyr.sampled(1);
    let victim = (0..pc.len()).find(|j| !used.contains(j) && !sampled.contains(j)).expect("a hidden point");
    let mut moved = pc.clone();
    moved.points[victim][0] += 1e-9;
    let pyr2 = build_scale_pyramid(&moved, &cfg.sizes, &cfg.ks).unwrap();
    assert_eq!((pyr.sampled(1), pyr.neighbors(1)), (pyr2.sampled(1), pyr2.neighbors(1)));
    let plan2 = mask_and_backproject(&pyr2, 0.75, 31).unwrap();
    assert_eq!(plan, plan2);

    let (model, params) = MaskedAutoencoder::new(cfg, 32).unwrap();
    let enc = |p: &pamr_core::ScalePyramid| {
        let mut tape = Tape::new();
        let e = model.encoder.forward(&mut tape, &params, p, &plan).unwrap();
        e.iter().map(|b| bits(&tape, b.tokens)).collect::<Vec<_>>()
    };
    assert_eq!(enc(&pyr), enc(&pyr2));
}

#[test]
fn head_shapes_and_zero_weights() {
    let (head, mut params) = build(33, |b| ReconstructionHead::new(b, "h", 192, 8).unwrap());
    assert_eq!(head.proj.d_out, 24);
    for id in [head.proj.weight, head.proj.bias] {
        edit(&mut params, id, |d| d.fill(0.0));
    }
    let mut tape = Tape::new();
    let x = tape.constant(random(&[5, 192], 34));
    let y = head.forward(&mut tape, &params, x).unwrap();
    assert_eq!(tape.shape(y), &[5, 8, 3]);
    assert!(tape.value(y).iter().all(|&v| v == 0.0));
}

#[test]
fn pretrain_loss_hand_values() {
    let pc = cloud(24, 35);
    let pyr = build_scale_pyramid(&pc, &[12, 4], &[3, 1]).unwrap();
    // floor(0.25 * 4) = 1 masked center
    let plan = mask_and_backproject(&pyr, 0.25, 36).unwrap();
    let truth = gather_patches(&pyr, 2, plan.masked(2)).unwrap();
    assert_eq!(truth.shape(), &[1, 1, 3]);

    let mut tape = Tape::new();
    let exact = tape.constant(truth.clone());
    let l = pretrain_loss(&mut tape, exact, &pyr, &plan).unwrap();
    assert_eq!(tape.scalar_value(l), 0.0);

    let mut off = truth.data().to_vec();
    off[0] += 1.0;
    let shifted = tape.constant(Tensor::new(&[1, 1, 3], off).unwrap());
    let l = pretrain_loss(&mut tape, shifted, &pyr, &plan).unwrap();
    assert!((tape.scalar_value(l) - 2.0).abs() < 1e-12);

    let open = mask_and_backproject(&pyr, 0.0, 36).unwrap();
    let p = tape.constant(truth);
    assert!(matches!(pretrain_loss(&mut tape, p, &pyr, &open), Err(Error::UndefinedLoss(_))));
}
