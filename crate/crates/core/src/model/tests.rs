use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::functional::sum_all;
use crate::autodiff::Tensor;

fn small(heads: usize) -> ModelConfig {
    ModelConfig {
        image_height: 8,
        image_width: 8,
        channels: 1,
        patch_size: 4,
        dim: 8,
        heads,
        ..ModelConfig::default()
    }
}

fn images(config: &ModelConfig, batch: usize, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [h, w, c] = config.image_shape();
    let data = (0..batch * h * w * c).map(|_| rng.gen_range(0.0..1.0)).collect();
    Tensor::from_vec(&[batch, h, w, c], data).unwrap()
}

fn tokens(batch: usize, n: usize, d: usize, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_vec(&[batch, n, d], (0..batch * n * d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn token_count_follows_patch_grid() {
    let config = ModelConfig {
        image_height: 32,
        image_width: 32,
        channels: 3,
        patch_size: 8,
        ..ModelConfig::default()
    };
    assert_eq!(config.num_tokens(), 16);
    let model = Vit::<f64>::init(&config, 0).unwrap();
    let x = patchify_embed(&images(&config, 2, 0), &model).unwrap();
    assert_eq!(x.shape(), &[2, 16, config.dim]);
}

#[test]
fn patchify_rejects_wrong_image_size() {
    let config = small(2);
    let bad = Tensor::<f64>::zeros(&[1, 8, 12, 1]);
    assert!(matches!(patchify(&bad, &config), Err(ModelError::Input { .. })));
}

#[test]
fn zero_image_and_zero_projection_yield_positions() {
    let config = small(2);
    let mut model = Vit::<f64>::init(&config, 1).unwrap();
    model.patch_weight = Tensor::zeros(model.patch_weight.shape());
    let x = patchify_embed(&Tensor::zeros(&[1, 8, 8, 1]), &model).unwrap();
    assert_eq!(x.data(), model.positions.data());
}

#[test]
fn swapping_two_patches_swaps_two_token_rows() {
    let config = small(2);
    let mut model = Vit::<f64>::init(&config, 2).unwrap();
    model.positions = Tensor::zeros(model.positions.shape());
    let img = images(&config, 1, 3);
    // Swap the top-left and bottom-right 4x4 patches.
    let mut swapped = img.to_vec();
    for y in 0..4 {
        for x in 0..4 {
            swapped.swap(y * 8 + x, (y + 4) * 8 + x + 4);
        }
    }
    let swapped = Tensor::from_vec(img.shape(), swapped).unwrap();
    let a = patchify_embed(&img, &model).unwrap();
    let b = patchify_embed(&swapped, &model).unwrap();
    let d = config.dim;
    let row = |t: &Tensor<f64>, i: usize| t.data()[i * d..(i + 1) * d].to_vec();
    assert_eq!(row(&a, 0), row(&b, 3));
    assert_eq!(row(&a, 3), row(&b, 0));
    assert_eq!(row(&a, 1), row(&b, 1));
    assert_eq!(row(&a, 2), row(&b, 2));
    assert_ne!(row(&a, 0), row(&b, 0));
}

#[test]
fn single_token_head_is_value_projection() {
    let config = small(3);
    let model = Vit::<f64>::init(&config, 4).unwrap();
    let attn = &model.blocks[0].attention;
    let x = tokens(2, 1, 8, 5);
    let out = mhsa_forward(&x, attn, &[true; 3], 1.0).unwrap();
    for (i, h) in out.heads.iter().enumerate() {
        let want = x.matmul(&attn.value[i]).unwrap();
        assert!(max_abs_diff(h.as_ref().unwrap().data(), want.data()) < 1e-12);
    }
}

#[test]
fn identical_tokens_attend_uniformly() {
    let config = small(2);
    let model = Vit::<f64>::init(&config, 6).unwrap();
    let attn = &model.blocks[0].attention;
    let row = tokens(1, 1, 8, 7);
    let x = row.expand_axis(1, 5).unwrap();
    let out = mhsa_forward(&x, attn, &[true, true], 1.0).unwrap();
    for (i, h) in out.heads.iter().enumerate() {
        let want = row.matmul(&attn.value[i]).unwrap();
        let h = h.as_ref().unwrap();
        for n in 0..5 {
            assert!(max_abs_diff(&h.data()[n * 8..(n + 1) * 8], want.data()) < 1e-12);
        }
    }
}

#[test]
fn attention_rows_sum_to_one() {
    let config = small(4);
    let model = Vit::<f32>::init(&config, 8).unwrap();
    let x = patchify_embed(&images(&config, 3, 9).cast::<f32>(), &model).unwrap();
    let attn = &model.blocks[0].attention;
    let scale = 1.0 / (config.dim as f32).sqrt();
    for h in 0..config.heads {
        let q = x.matmul(&attn.query[h]).unwrap();
        let k = x.matmul(&attn.key[h]).unwrap();
        let weights = q
            .matmul(&k.transpose_last2().unwrap())
            .unwrap()
            .scale(scale)
            .unwrap()
            .softmax_last()
            .unwrap();
        for row in weights.data().chunks(config.num_tokens()) {
            let total: f32 = row.iter().sum();
            assert!((total - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn single_kept_head_matches_extracted_model() {
    for heads in [2, 4, 8] {
        let config = small(heads);
        let model = Vit::<f64>::init(&config, heads as u64).unwrap();
        let img = images(&config, 3, 10);
        for head in 0..heads {
            let mask = PruneMask::single(&config, 0, head).unwrap();
            let pruned = model.logits(&img, Some(&mask)).unwrap();
            let extracted = model.extract_head(head).unwrap().logits(&img, None).unwrap();
            assert!(max_abs_diff(pruned.data(), extracted.data()) < 1e-5);
        }
    }
}

#[test]
fn single_kept_head_routes_through_its_projection_block() {
    let config = small(4);
    let model = Vit::<f64>::init(&config, 11).unwrap();
    let x = tokens(2, 4, 8, 12);
    let attn = &model.blocks[0].attention;
    let full = mhsa_forward(&x, attn, &[true; 4], 1.0).unwrap();
    let pruned = mhsa_forward(&x, attn, &[false, false, true, false], 4.0).unwrap();
    let d = config.dim;
    let block = attn.output.data()[2 * d * d..3 * d * d].to_vec();
    let block = Tensor::from_vec(&[d, d], block).unwrap();
    let h2 = full.heads[2].as_ref().unwrap();
    let want = h2
        .scale(4.0)
        .unwrap()
        .matmul(&block)
        .unwrap()
        .add(&crate::autodiff::functional::broadcast_leading(&attn.output_bias, &[2, 4]).unwrap())
        .unwrap();
    assert!(max_abs_diff(pruned.output.data(), want.data()) < 1e-12);
    assert!(pruned.heads[0].is_none());
}

#[test]
fn all_kept_mask_is_bit_identical_to_no_mask() {
    let config = small(4);
    let model = Vit::<f32>::init(&config, 13).unwrap();
    let img = images(&config, 4, 14).cast::<f32>();
    let mask = PruneMask::all(1, 4);
    assert_eq!(mask.rescale(0), 1.0);
    let a = model.logits(&img, None).unwrap();
    let b = model.logits(&img, Some(&mask)).unwrap();
    assert_eq!(a.data(), b.data());
}

#[test]
fn permuting_tokens_permutes_attention_output() {
    let config = small(3);
    let model = Vit::<f64>::init(&config, 15).unwrap();
    let attn = &model.blocks[0].attention;
    let x = tokens(1, 4, 8, 16);
    let perm = [2, 0, 3, 1];
    let mut permuted = Vec::new();
    for &p in &perm {
        permuted.extend_from_slice(&x.data()[p * 8..(p + 1) * 8]);
    }
    let xp = Tensor::from_vec(&[1, 4, 8], permuted).unwrap();
    let y = mhsa_forward(&x, attn, &[true; 3], 1.0).unwrap().output;
    let yp = mhsa_forward(&xp, attn, &[true; 3], 1.0).unwrap().output;
    for (i, &p) in perm.iter().enumerate() {
        assert!(max_abs_diff(&yp.data()[i * 8..(i + 1) * 8], &y.data()[p * 8..(p + 1) * 8]) < 1e-12);
    }
}

#[test]
fn zero_classifier_gives_zero_logits_and_class_zero() {
    let config = small(2);
    let mut model = Vit::<f64>::init(&config, 17).unwrap();
    model.classifier = Tensor::zeros(model.classifier.shape());
    let img = images(&config, 3, 18);
    assert!(model.logits(&img, None).unwrap().data().iter().all(|&v| v == 0.0));
    assert_eq!(model.predict(&img, None).unwrap(), vec![0, 0, 0]);
}

#[test]
fn every_head_pruned_is_rejected() {
    let config = small(2);
    assert!(matches!(PruneMask::new(vec![vec![false, false]]), Err(ModelError::Mask(_))));
    let model = Vit::<f64>::init(&config, 19).unwrap();
    let x = tokens(1, 4, 8, 20);
    assert!(mhsa_forward(&x, &model.blocks[0].attention, &[false, false], 1.0).is_err());
    let wrong = PruneMask::all(1, 3);
    assert!(model.logits(&images(&config, 1, 0), Some(&wrong)).is_err());
}

#[test]
fn mask_rescale_counts_kept_heads() {
    let config = small(8);
    let mask = PruneMask::subset(&config, 0, &[1, 5]).unwrap();
    assert_eq!(mask.kept(0), 2);
    assert_eq!(mask.rescale(0), 4.0);
    assert!(!mask.is_all_kept());
}

#[test]
fn config_validation_names_the_field() {
    let mut config = small(2);
    config.image_width = 10;
    let err = config.validate().unwrap_err();
    assert!(matches!(err, ModelError::Config { field: "image_width", .. }));
    let mut config = small(2);
    config.regularized_layer = 1;
    assert!(matches!(config.validate(), Err(ModelError::Config { field: "regularized_layer", .. })));
}

#[test]
fn config_round_trips_through_key_values() {
    let config = ModelConfig {
        mlp_hidden: 16,
        use_residual: true,
        layers: 2,
        regularized_layer: 1,
        ..small(4)
    };
    assert_eq!(ModelConfig::from_kv(&config.to_kv()).unwrap(), config);
}

#[test]
fn deeper_models_with_residual_and_mlp_run() {
    let config = ModelConfig {
        mlp_hidden: 12,
        use_residual: true,
        layers: 2,
        regularized_layer: 1,
        ..small(2)
    };
    let model = Vit::<f64>::init(&config, 21).unwrap();
    let trace = model.forward(&images(&config, 2, 22), None).unwrap();
    assert_eq!(trace.logits.shape(), &[2, 2]);
    assert_eq!(trace.block_input.shape(), &[2, 4, 8]);
    let loss = sum_all(&trace.logits).unwrap();
    let grads = crate::autodiff::grad(&loss, &model.parameters().iter().collect::<Vec<_>>(), false).unwrap();
    assert_eq!(grads.len(), model.parameters().len());
}

#[test]
fn vit_forward_gradient_matches_finite_differences() {
    let config = small(2);
    let model = Vit::<f64>::init(&config, 23).unwrap();
    let img = images(&config, 2, 24);
    let labels = [0, 1];
    for (index, name) in [(0, "patch.weight"), (3, "blocks.0.attn.query.0"), (9, "blocks.0.attn.output")] {
        let params = model.parameters();
        assert_eq!(model.named_parameters()[index].0, name);
        let err = crate::autodiff::check_gradient(
            |p| {
                let mut m = model.clone();
                replace_param(&mut m, index, p.clone());
                crate::autodiff::functional::cross_entropy(&m.logits(&img, None).unwrap(), &labels)
            },
            &params[index],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{name}: {err}");
    }
}

/// Swaps in a graph-attached tensor without re-leafing it.
fn replace_param(model: &mut Vit<f64>, index: usize, value: Tensor<f64>) {
    match index {
        0 => model.patch_weight = value,
        3 => model.blocks[0].attention.query[0] = value,
        9 => model.blocks[0].attention.output = value,
        _ => unreachable!(),
    }
}

#[test]
fn checkpoint_round_trips_bit_exactly() {
    let config = ModelConfig {
        mlp_hidden: 6,
        ..small(3)
    };
    let model = Vit::<f32>::init(&config, 25).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    save_checkpoint(&model, &path).unwrap();
    let back: Vit<f32> = load_checkpoint(&path).unwrap();
    assert_eq!(back.config, config);
    for ((na, a), (nb, b)) in model.named_parameters().iter().zip(back.named_parameters().iter()) {
        assert_eq!(na, nb);
        assert_eq!(a.data(), b.data());
    }
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let model = Vit::<f32>::init(&small(2), 26).unwrap();
    let bytes = encode_checkpoint(&model);
    let mut bad_magic = bytes.clone();
    bad_magic[0] = b'X';
    assert!(matches!(decode_checkpoint::<f32>(&bad_magic), Err(ModelError::Checkpoint(m)) if m.contains("magic")));
    let truncated = &bytes[..bytes.len() - 3];
    assert!(matches!(decode_checkpoint::<f32>(truncated), Err(ModelError::Checkpoint(m)) if m.contains("truncated")));
    let mut trailing = bytes.clone();
    trailing.push(0);
    assert!(decode_checkpoint::<f32>(&trailing).is_err());
    assert_eq!(&bytes[..8], CHECKPOINT_MAGIC);
}
