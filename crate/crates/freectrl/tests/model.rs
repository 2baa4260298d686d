//! Checkpoint loading, forward-pass identities, and steering exactness on
//! the miniature fixture model.

use freectrl::model::{load_checkpoint, softmax_distribution, Model, SteeringSet, ValueVectorRef};
use freectrl::testkit;
use ndarray::Array1;
use tempfile::TempDir;

fn fixture_model(seed: u64) -> (TempDir, Model) {
    let dir = TempDir::new().unwrap();
    let (ckpt, _, _) = testkit::write_fixture_model(dir.path(), seed).unwrap();
    let model = load_checkpoint(ckpt).unwrap();
    (dir, model)
}

#[test]
fn fixture_checkpoint_loads_with_derived_config() {
    let (_dir, model) = fixture_model(7);
    let cfg = testkit::fixture_config();
    assert_eq!(*model.config(), cfg);
    assert_eq!(cfg.value_vector_count(), cfg.n_layers * cfg.d_ffn);
}

#[test]
fn missing_tensor_is_reported_by_name() {
    let dir = TempDir::new().unwrap();
    let mut ckpt = testkit::fixture_checkpoint(7);
    assert!(ckpt.remove("h.1.mlp.c_fc.weight"));
    let path = testkit::write_checkpoint(dir.path(), &ckpt).unwrap();
    let err = load_checkpoint(path).unwrap_err();
    assert!(
        err.to_string().contains("h.1.mlp.c_fc.weight"),
        "error should name the tensor: {err}"
    );
}

#[test]
fn misshapen_tensor_is_reported_by_name() {
    let dir = TempDir::new().unwrap();
    let mut ckpt = testkit::fixture_checkpoint(7);
    let d = testkit::fixture_config().d_model;
    ckpt.insert("ln_f.bias", vec![d + 1], vec![0.0; d + 1]);
    let path = testkit::write_checkpoint(dir.path(), &ckpt).unwrap();
    let err = load_checkpoint(path).unwrap_err();
    assert!(err.to_string().contains("ln_f.bias"), "{err}");
}

#[test]
fn forward_produces_finite_logits() {
    let (_dir, model) = fixture_model(7);
    let logits = model.forward(&[1, 2, 3], &SteeringSet::new()).unwrap();
    assert_eq!(logits.len(), model.config().vocab_size);
    assert!(logits.iter().all(|v| v.is_finite()));
}

#[test]
fn empty_steering_is_deterministic_and_identical_to_baseline() {
    let (_dir, model) = fixture_model(9);
    let tokens = [5u32, 99, 260, 17];
    let a = model.forward(&tokens, &SteeringSet::new()).unwrap();
    let b = model.forward(&tokens, &SteeringSet::new()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn zero_weight_entry_is_bitwise_noop() {
    let (_dir, model) = fixture_model(9);
    let tokens = [5u32, 99, 260, 17];
    let baseline = model.forward(&tokens, &SteeringSet::new()).unwrap();
    let steering = SteeringSet::single(ValueVectorRef::new(0, 3), 0.0);
    let steered = model.forward(&tokens, &steering).unwrap();
    assert_eq!(baseline, steered);
}

#[test]
fn ffn_steering_adds_exactly_the_weighted_vector() {
    let (_dir, model) = fixture_model(11);
    let d = model.config().d_model;
    let x = Array1::from_iter((0..d).map(|i| (i as f32 * 0.37).sin() * 0.4));
    let vref = ValueVectorRef::new(0, 3);
    let u = 2.5f32;

    let base = model.ffn_forward(x.view(), 0, &SteeringSet::new()).unwrap();
    let steered = model
        .ffn_forward(x.view(), 0, &SteeringSet::single(vref, u))
        .unwrap();

    let v = model.value_vector(vref).unwrap();
    let expected: Array1<f32> = &base + &v.mapv(|w| u * w);
    // bitwise: the hook performs exactly this addition
    assert_eq!(steered, expected);
}

#[test]
fn decomposition_matches_matrix_form_on_random_inputs() {
    let (_dir, model) = fixture_model(13);
    let cfg = *model.config();
    for layer in 0..cfg.n_layers {
        for seed in 0..3u32 {
            let x = Array1::from_iter(
                (0..cfg.d_model).map(|i| ((i as f32 + seed as f32 * 3.1) * 0.71).cos() * 0.5),
            );
            let coeffs = model.ffn_decompose(x.view(), layer).unwrap();
            assert_eq!(coeffs.len(), cfg.d_ffn);

            // matrix-form oracle: coefficient row times the value matrix
            let values = model.value_matrix(layer).unwrap();
            let matrix_form = coeffs.dot(values);

            // row-sum form: explicit weighted sum of value vectors
            let mut row_sum = Array1::<f32>::zeros(cfg.d_model);
            for (i, &m) in coeffs.iter().enumerate() {
                row_sum = row_sum + values.row(i).mapv(|v| m * v);
            }

            let denom = matrix_form.iter().map(|v| v.abs()).fold(0.0f32, f32::max).max(1e-6);
            let max_rel = matrix_form
                .iter()
                .zip(row_sum.iter())
                .map(|(a, b)| (a - b).abs() / denom)
                .fold(0.0f32, f32::max);
            assert!(max_rel < 1e-4, "layer {layer} seed {seed}: rel err {max_rel}");

            // and the feedforward output is the decomposition plus the bias
            let ffn = model.ffn_forward(x.view(), layer, &SteeringSet::new()).unwrap();
            let with_bias_gap = ffn
                .iter()
                .zip(matrix_form.iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f32, f32::max);
            assert!(with_bias_gap < 1.0, "bias accounts for the difference");
        }
    }
}

#[test]
fn gelu_zero_input_keeps_decomposition_consistent() {
    let (_dir, model) = fixture_model(13);
    let cfg = *model.config();
    let x = Array1::<f32>::zeros(cfg.d_model);
    let coeffs = model.ffn_decompose(x.view(), 0).unwrap();
    let values = model.value_matrix(0).unwrap();
    let matrix_form = coeffs.dot(values);
    let mut row_sum = Array1::<f32>::zeros(cfg.d_model);
    for (i, &m) in coeffs.iter().enumerate() {
        row_sum = row_sum + values.row(i).mapv(|v| m * v);
    }
    for (a, b) in matrix_form.iter().zip(row_sum.iter()) {
        assert!((a - b).abs() < 1e-6);
    }
}

#[test]
fn decompose_rejects_wrong_dimension() {
    let (_dir, model) = fixture_model(13);
    let x = Array1::<f32>::zeros(3);
    assert!(model.ffn_decompose(x.view(), 0).is_err());
}

#[test]
fn steering_rejects_out_of_range_and_bad_weights() {
    let (_dir, model) = fixture_model(13);
    let cfg = *model.config();
    let out_of_range = SteeringSet::single(ValueVectorRef::new(cfg.n_layers, 0), 1.0);
    assert!(model.forward(&[1, 2], &out_of_range).is_err());
    let negative = SteeringSet::single(ValueVectorRef::new(0, 0), -1.0);
    assert!(model.forward(&[1, 2], &negative).is_err());
    let non_finite = SteeringSet::single(ValueVectorRef::new(0, 0), f32::NAN);
    assert!(model.forward(&[1, 2], &non_finite).is_err());
}

#[test]
fn sequence_length_limit_is_enforced() {
    let (_dir, model) = fixture_model(13);
    let max = model.config().max_positions;
    let tokens: Vec<u32> = (0..max as u32 + 1).map(|i| i % 200).collect();
    assert!(model.forward(&tokens, &SteeringSet::new()).is_err());
    assert!(model.forward(&[], &SteeringSet::new()).is_err());
}

#[test]
fn embedding_rows_match_the_checkpoint_tensor() {
    let dir = TempDir::new().unwrap();
    let ckpt = testkit::fixture_checkpoint(21);
    let path = testkit::write_checkpoint(dir.path(), &ckpt).unwrap();
    let model = load_checkpoint(path).unwrap();

    let (shape, data) = ckpt.tensor("wte.weight").unwrap();
    let d = shape[1];
    for token in [0u32, 7, 264] {
        let row = model.embedding_of(token).unwrap();
        let expected = &data[token as usize * d..(token as usize + 1) * d];
        assert_eq!(row.as_slice().unwrap(), expected);
        // second call is identical
        let again = model.embedding_of(token).unwrap();
        assert_eq!(row, again);
    }
    assert!(model.embedding_of(99_999).is_err());
}

#[test]
fn incremental_decoding_matches_full_forward() {
    let (_dir, model) = fixture_model(17);
    let tokens = [12u32, 40, 258, 9, 77, 3];
    let empty = SteeringSet::new();

    let full = model.forward(&tokens, &empty).unwrap();

    let mut cache = model.new_cache();
    let mut last = model.forward_cached(&mut cache, &tokens[..3], &empty).unwrap();
    for t in &tokens[3..] {
        last = model.forward_cached(&mut cache, &[*t], &empty).unwrap();
    }
    let max_diff = full
        .iter()
        .zip(last.iter())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f32, f32::max);
    assert!(max_diff < 1e-4, "cache drift {max_diff}");
}

#[test]
fn steered_resume_is_bitwise_equal_to_full_steered_forward() {
    let (_dir, model) = fixture_model(19);
    let prompt = [1u32, 2, 3];
    let states = model.prefix_states(&prompt).unwrap();
    for (layer, row, u) in [(0usize, 5usize, 3.0f32), (1, 60, 50.0), (0, 0, 0.0)] {
        let vref = ValueVectorRef::new(layer, row);
        let resumed = model.resume_steered(&states, vref, u).unwrap();
        let full = model.forward(&prompt, &SteeringSet::single(vref, u)).unwrap();
        assert_eq!(resumed, full, "layer {layer} row {row} u {u}");
    }
}

#[test]
fn softmax_distribution_examples() {
    // uniform logits give the uniform distribution
    let dist = softmax_distribution(&[0.5; 8], 1.0).unwrap();
    for &p in dist.probs() {
        assert!((p - 0.125).abs() < 1e-6);
    }

    // two-token vocabulary at logits (0, ln 3): probabilities (1/4, 3/4)
    let dist = softmax_distribution(&[0.0, 3.0f32.ln()], 1.0).unwrap();
    assert!((dist.prob(0) - 0.25).abs() < 1e-6);
    assert!((dist.prob(1) - 0.75).abs() < 1e-6);

    // extreme temperature flattens toward uniform
    let dist = softmax_distribution(&[5.0, -3.0, 1.0], 1e6).unwrap();
    for &p in dist.probs() {
        assert!((p - 1.0 / 3.0).abs() < 1e-4);
    }

    assert!(softmax_distribution(&[1.0, 2.0], 0.0).is_err());
    assert!(softmax_distribution(&[1.0, 2.0], -1.0).is_err());
    assert!(softmax_distribution(&[f32::NAN, 2.0], 1.0).is_err());

    // probabilities sum to one and are non-negative
    let dist = softmax_distribution(&[3.0, -9.0, 0.2, 4.4], 0.7).unwrap();
    let sum: f32 = dist.probs().iter().sum();
    assert!((sum - 1.0).abs() < 1e-6);
    assert!(dist.probs().iter().all(|&p| p >= 0.0));
}

#[test]
fn degenerate_checkpoints_have_closed_form_distributions() {
    let dir = TempDir::new().unwrap();
    let path = testkit::write_checkpoint(dir.path(), &testkit::degenerate_checkpoint(testkit::Degenerate::Uniform)).unwrap();
    let model = load_checkpoint(path).unwrap();
    let logits = model.forward(&[3, 4, 5], &SteeringSet::new()).unwrap();
    let dist = softmax_distribution(logits.as_slice().unwrap(), 1.0).unwrap();
    let v = model.config().vocab_size as f32;
    for &p in dist.probs() {
        assert!((p - 1.0 / v).abs() < 1e-9);
    }

    let dir2 = TempDir::new().unwrap();
    let path2 = testkit::write_checkpoint(
        dir2.path(),
        &testkit::degenerate_checkpoint(testkit::Degenerate::ConstantToken(7)),
    )
    .unwrap();
    let constant = load_checkpoint(path2).unwrap();
    let logits = constant.forward(&[3, 4, 5], &SteeringSet::new()).unwrap();
    let dist = softmax_distribution(logits.as_slice().unwrap(), 1.0).unwrap();
    assert!(dist.prob(7) > 0.999_999);
}
