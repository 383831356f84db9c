use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use slab_core::attention::{self, AttentionParams, TokenGrid};
use slab_core::model::{self, AttnKind, Model, ModelConfig, NormKind};
use slab_core::normalization::*;
use slab_core::tensor::ops;
use slab_core::Tensor;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_repbn(c: usize, r: &mut ChaCha8Rng) -> RepBNParams<f64> {
    let mut p = RepBNParams::<f64>::new(c);
    p.bn.alpha = Tensor::randn(&[c], 1.0, r);
    p.bn.beta = Tensor::randn(&[c], 1.0, r);
    p.bn.running_mean = Tensor::randn(&[c], 2.0, r);
    p.bn.running_var = Tensor::uniform(&[c], 0.0, 4.0, r);
    p.eta = Tensor::randn(&[c], 1.0, r);
    p
}

fn permute_rows(x: &Tensor<f64>, perm: &[usize]) -> Tensor<f64> {
    let c = x.last_dim();
    let mut out = Vec::with_capacity(x.numel());
    for &i in perm {
        out.extend_from_slice(&x.data()[i * c..(i + 1) * c]);
    }
    Tensor::new(x.shape().to_vec(), out).unwrap()
}

fn shuffled(n: usize, r: &mut ChaCha8Rng) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        p.swap(i, r.gen_range(0..=i));
    }
    p
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..6, len in 1usize..200, scale in 1e-3f64..1e3, seed: u64) {
        let x = Tensor::<f64>::randn(&[rows, len], scale, &mut rng(seed));
        let y = ops::softmax_lastdim(&x);
        for row in y.data().chunks(len) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        }
        let y32 = ops::softmax_lastdim(&x.cast::<f32>());
        for row in y32.data().chunks(len) {
            prop_assert!((row.iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs() <= 1e-6 * len as f64);
        }
    }

    #[test]
    fn moments_variance_is_non_negative(rows in 1usize..40, cols in 1usize..8, offset in -1e4f64..1e4, seed: u64) {
        let x = Tensor::<f64>::randn(&[rows, cols], 1e-3, &mut rng(seed)).map(|v| v + offset);
        let (_, var) = ops::reduce_moments(&x, &[0]).unwrap();
        prop_assert!(var.data().iter().all(|&v| v >= 0.0));
        let (_, var32) = ops::reduce_moments(&x.cast::<f32>(), &[0]).unwrap();
        prop_assert!(var32.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn centre_one_kernel_is_identity(c in 1usize..5, h in 1usize..7, w in 1usize..7, half in 0usize..3, seed: u64) {
        let k = 2 * half + 1;
        let x = Tensor::<f32>::randn(&[c, h, w], 3.0, &mut rng(seed));
        let kernel = Tensor::from_fn(&[c, k, k], |i| if i % (k * k) == half * k + half { 1.0 } else { 0.0 });
        prop_assert!(ops::depthwise_conv2d(&x, &kernel).unwrap().bit_eq(&x));
    }

    #[test]
    fn schedules_start_at_one_end_at_zero_and_never_rise(total in 1u64..5000, kind in prop_oneof![
        Just(DecaySchedule::Linear), Just(DecaySchedule::Cosine), Just(DecaySchedule::Step)
    ]) {
        prop_assert_eq!(schedule_gamma(kind, 0, total), 1.0);
        prop_assert_eq!(schedule_gamma(kind, total, total), 0.0);
        prop_assert_eq!(schedule_gamma(kind, total + 17, total), 0.0);
        let mut prev = 1.0;
        for t in 0..=total.min(600) {
            let g = schedule_gamma(kind, t * total / total.min(600), total);
            prop_assert!((0.0..=1.0).contains(&g) && g <= prev);
            prev = g;
        }
    }

    #[test]
    fn repbn_reparameterizes_exactly(c in 1usize..16, rows in 1usize..16, seed: u64) {
        let mut r = rng(seed);
        let p = random_repbn(c, &mut r);
        let x = Tensor::<f64>::randn(&[rows, c], 3.0, &mut r);
        let direct = repbn_eval(&x, &p).unwrap();
        let folded = batchnorm_eval(&x, &reparam_repbn_to_bn(&p)).unwrap();
        let scale = 1.0 + direct.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        prop_assert!(direct.max_abs_diff(&folded) <= 1e-12 * scale);
    }

    #[test]
    fn repbn_degenerate_cases(c in 1usize..16, rows in 1usize..16, seed: u64) {
        let mut r = rng(seed);
        let mut p = random_repbn(c, &mut r);
        let x = Tensor::<f64>::randn(&[rows, c], 3.0, &mut r);
        p.eta = Tensor::zeros(&[c]);
        prop_assert!(repbn_eval(&x, &p).unwrap().bit_eq(&batchnorm_eval(&x, &p.bn).unwrap()));
        let mut p = random_repbn(c, &mut r);
        p.bn.alpha = Tensor::zeros(&[c]);
        p.bn.beta = Tensor::zeros(&[c]);
        let skip = ops::mul_row(&x, &p.eta).unwrap();
        prop_assert!(repbn_eval(&x, &p).unwrap().bit_eq(&skip));
    }

    #[test]
    fn bn_folds_into_next_linear(c in 1usize..12, d in 1usize..12, rows in 1usize..10, seed: u64) {
        let mut r = rng(seed);
        let bn = reparam_repbn_to_bn(&random_repbn(c, &mut r));
        let w = Tensor::<f64>::randn(&[c, d], 1.0, &mut r);
        let b = Tensor::<f64>::randn(&[d], 1.0, &mut r);
        let x = Tensor::<f64>::randn(&[rows, c], 2.0, &mut r);
        let want = ops::linear(&batchnorm_eval(&x, &bn).unwrap(), &w, Some(&b)).unwrap();
        let (wf, bf) = fuse_bn_into_linear(&bn, &w, &b).unwrap();
        let got = ops::linear(&x, &wf, Some(&bf)).unwrap();
        prop_assert!(want.max_abs_diff(&got) <= 1e-10);
    }

    #[test]
    fn sla_orders_agree(heads in 1usize..5, d in 1usize..9, h in 1usize..7, w in 1usize..7, seed: u64) {
        let mut r = rng(seed);
        let c = heads * d;
        let mut p = AttentionParams::<f64>::init(c, heads, 3, &mut r).unwrap();
        p.dwc_kernel = Tensor::randn(&[c, 3, 3], 0.3, &mut r);
        let x = Tensor::<f64>::randn(&[h * w, c], 1.0, &mut r);
        let grid = TokenGrid::new(h, w);
        let fast = attention::sla_attention(&x, &p, grid).unwrap();
        let slow = attention::sla_naive_oracle(&x, &p, grid).unwrap();
        prop_assert!(fast.max_abs_diff(&slow) <= 1e-10);
    }

    #[test]
    fn attention_commutes_with_token_permutation(heads in 1usize..4, d in 1usize..6, n in 1usize..24, seed: u64) {
        let mut r = rng(seed);
        let c = heads * d;
        let (q, k, v) = (
            Tensor::<f64>::randn(&[n, c], 1.0, &mut r),
            Tensor::<f64>::randn(&[n, c], 1.0, &mut r),
            Tensor::<f64>::randn(&[n, c], 1.0, &mut r),
        );
        let perm = shuffled(n, &mut r);
        let (pq, pk, pv) = (permute_rows(&q, &perm), permute_rows(&k, &perm), permute_rows(&v, &perm));
        let soft = attention::softmax_attention_core(&q, &k, &v, heads).unwrap();
        let soft_p = attention::softmax_attention_core(&pq, &pk, &pv, heads).unwrap();
        prop_assert!(permute_rows(&soft, &perm).max_abs_diff(&soft_p) <= 1e-12);
        let lin = attention::sla_attention_branch(&q, &k, &v, heads, 1e-6).unwrap();
        let lin_p = attention::sla_attention_branch(&pq, &pk, &pv, heads, 1e-6).unwrap();
        prop_assert!(permute_rows(&lin, &perm).max_abs_diff(&lin_p) <= 1e-9);
    }

    #[test]
    fn softmax_attention_rows_are_distributions(heads in 1usize..4, d in 1usize..8, n in 1usize..40, seed: u64) {
        let mut r = rng(seed);
        let p = AttentionParams::<f32>::init(heads * d, heads, 3, &mut r).unwrap();
        let x = Tensor::<f32>::randn(&[n, heads * d], 2.0, &mut r);
        let a = attention::softmax_attention_map(&x, &p, heads - 1).unwrap();
        for row in a.data().chunks(n) {
            prop_assert!((row.iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn sla_similarity_rank_is_bounded_by_head_dim(heads in 1usize..3, d in 1usize..6, n in 8usize..24, seed: u64) {
        let mut r = rng(seed);
        let p = AttentionParams::<f64>::init(heads * d, heads, 3, &mut r).unwrap();
        let x = Tensor::<f64>::randn(&[n, heads * d], 1.0, &mut r);
        let sim = attention::sla_similarity(&x, &p, 0).unwrap();
        prop_assert!(attention::attention_map_rank(&sim, 1e-9).unwrap() <= d);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn checkpoints_round_trip_bit_exactly(
        norm in prop_oneof![Just(NormKind::LayerNorm), Just(NormKind::BatchNorm), Just(NormKind::PRepBN)],
        attn in prop_oneof![Just(AttnKind::Softmax), Just(AttnKind::Sla)],
        seed: u64,
    ) {
        let cfg = ModelConfig { depth: 1, dim: 8, norm_kind: norm, attn_kind: attn, num_classes: 3, ..Default::default() };
        let m = Model::<f32>::seeded(&cfg, seed).unwrap();
        let bytes = model::checkpoint_bytes(&m).unwrap();
        let back: Model<f32> = model::checkpoint_from_bytes(&bytes).unwrap();
        prop_assert_eq!(model::checkpoint_bytes(&back).unwrap(), bytes);
        for (a, b) in m.named_tensors().iter().zip(back.named_tensors().iter()) {
            prop_assert_eq!(&a.name, &b.name);
            prop_assert!(a.tensor.bit_eq(b.tensor));
        }
    }
}
