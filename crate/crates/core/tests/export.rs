//! Pruning, CSR kernels and the SPNN format against dense oracles.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sparsegate::gates::{apply_mask, draw_ml};
use sparsegate::infer::{csr_matvec, infer};
use sparsegate::model::{ForwardMode, Network};
use sparsegate::regularizers::complexity;
use sparsegate::sparsify::{
    self, prune, storage_cost, CsrMatrix, LayerPayload, SparseModel, SparsifyError, SparsityTable, HEADER_BYTES,
};
use sparsegate::tensor::Tensor;

fn randomize_gates(net: &mut Network, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for layer in &mut net.layers {
        for g in layer.gates.values_mut().data_mut() {
            *g = rng.gen();
        }
    }
}

fn dense_matvec(a: &[f32], rows: usize, cols: usize, x: &[f32]) -> Vec<f64> {
    (0..rows)
        .map(|r| (0..cols).map(|c| a[r * cols + c] as f64 * x[c] as f64).sum())
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn csr_matvec_matches_dense(
        rows in 1usize..24,
        cols in 1usize..24,
        density in 0.0f64..1.0,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a: Vec<f32> = (0..rows * cols)
            .map(|_| if rng.gen::<f64>() < density { rng.gen_range(-1.0..1.0) } else { 0.0 })
            .collect();
        let x: Vec<f32> = (0..cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let csr = CsrMatrix::from_dense(rows, cols, &a).unwrap();
        prop_assert_eq!(csr.to_dense(), a.clone());
        let rebuilt = CsrMatrix::from_parts(
            rows, cols, csr.row_ptr().to_vec(), csr.col_idx().to_vec(), csr.values().to_vec(),
        ).unwrap();
        prop_assert_eq!(&rebuilt, &csr);
        let got = csr_matvec(&csr, &x).unwrap();
        for (g, w) in got.iter().zip(dense_matvec(&a, rows, cols, &x)) {
            prop_assert!((*g as f64 - w).abs() <= 1e-5);
        }
    }

    #[test]
    fn adversarial_row_ptr_is_rejected(
        ptr in prop::collection::vec(0u64..6, 4),
    ) {
        let nnz = ptr[3] as usize;
        let col_idx: Vec<u32> = (0..nnz as u32).map(|i| i % 3).collect();
        let values = vec![1.0f32; nnz];
        let valid = ptr[0] == 0
            && ptr.windows(2).all(|w| w[0] <= w[1])
            && ptr.windows(2).all(|w| {
                let row = &col_idx[w[0] as usize..w[1] as usize];
                row.windows(2).all(|p| p[0] < p[1])
            });
        prop_assert_eq!(CsrMatrix::from_parts(3, 3, ptr, col_idx, values).is_ok(), valid);
    }
}

#[test]
fn random_matvec_at_ninety_percent() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let a = sparsegate::infer::random_sparse_matrix(50, 40, 90.0, &mut rng);
    let x: Vec<f32> = (0..40).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let csr = CsrMatrix::from_dense(50, 40, &a).unwrap();
    assert_eq!(csr.nnz(), 200);
    for (g, w) in csr_matvec(&csr, &x).unwrap().iter().zip(dense_matvec(&a, 50, 40, &x)) {
        assert!((*g as f64 - w).abs() <= 1e-5);
    }
}

#[test]
fn densified_prune_equals_masked_weights() {
    for seed in 0..5 {
        let mut net = Network::mlp(&[30, 20, 4], seed).unwrap();
        randomize_gates(&mut net, seed + 100);
        let model = prune(&net);
        for (layer, sparse) in net.layers.iter().zip(&model.layers) {
            let oracle = apply_mask(&layer.weight, &draw_ml(&layer.gates)).unwrap();
            assert_eq!(sparse.dense_weight(), oracle);
        }
        let masks: Vec<_> = net.ml_masks();
        assert_eq!(storage_cost(&model).values_count, complexity(&masks));
    }
}

#[test]
fn conv_layers_keep_dense_kernel_and_bitmask() {
    let mut net = Network::lenet5(3);
    randomize_gates(&mut net, 8);
    let model = prune(&net);
    let LayerPayload::Conv { kernel, mask, shape, pool } = &model.layers[0].payload else {
        panic!("conv1 should stay dense")
    };
    assert_eq!(*shape, [20, 1, 5, 5]);
    assert!(*pool);
    assert_eq!(mask.len(), 500usize.div_ceil(8));
    let bits = sparsify::unpack_bits(mask, 500);
    let ml = draw_ml(&net.layers[0].gates);
    assert!(bits.iter().zip(ml.iter()).all(|(a, b)| *a == b));
    assert_eq!(kernel.as_slice(), apply_mask(&net.layers[0].weight, &ml).unwrap().data());
    assert!(matches!(model.layers[2].payload, LayerPayload::Dense(_)));
}

fn closed_form_size(model: &SparseModel) -> usize {
    let mut size = HEADER_BYTES + model.manifest_bytes().len();
    for layer in &model.layers {
        size += 4 * layer.bias.len();
        size += match &layer.payload {
            LayerPayload::Dense(csr) => 8 * (csr.rows() + 1) + 4 * csr.nnz() + 4 * csr.nnz(),
            LayerPayload::Conv { kernel, .. } => 4 * kernel.len() + kernel.len().div_ceil(8),
        };
    }
    size
}

#[test]
fn file_size_matches_byte_formula() {
    let dir = tempfile::tempdir().unwrap();
    for seed in 0..3 {
        let mut net = Network::mlp(&[64, 32, 10], seed).unwrap();
        randomize_gates(&mut net, seed);
        let model = prune(&net);
        let path = dir.path().join(format!("m{seed}.spnn"));
        sparsify::save(&model, &path).unwrap();
        let on_disk = std::fs::metadata(&path).unwrap().len() as usize;
        assert_eq!(on_disk, closed_form_size(&model));
        assert_eq!(storage_cost(&model).file_bytes, on_disk);
    }
}

#[test]
fn roundtrip_is_bitwise_and_decreasing_row_ptr_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.spnn");
    let mut net = Network::mlp(&[6, 5, 3], 1).unwrap();
    randomize_gates(&mut net, 2);
    let model = prune(&net);
    sparsify::save(&model, &path).unwrap();
    assert_eq!(sparsify::load(&path).unwrap(), model);

    let mut bytes = std::fs::read(&path).unwrap();
    let LayerPayload::Dense(csr) = &model.layers[0].payload else { panic!() };
    let start = HEADER_BYTES + model.manifest_bytes().len();
    // Make row_ptr[1] larger than row_ptr[2].
    let bumped = csr.row_ptr()[2] + 1;
    bytes[start + 8..start + 16].copy_from_slice(&bumped.to_le_bytes());
    assert!(matches!(sparsify::from_bytes(&bytes), Err(SparsifyError::CsrInvariant(_))));
}

#[test]
fn inference_matches_gated_forward() {
    let mut net = Network::mlp(&[20, 16, 5], 4).unwrap();
    randomize_gates(&mut net, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::from_fn(&[100, 20], |_| rng.gen_range(-1.0..1.0));
    let expected = net.forward(&x, ForwardMode::Eval).unwrap();
    let got = infer(&prune(&net), &x).unwrap();
    assert!(got.max_abs_diff(&expected) <= 1e-5);

    net.fill_gates(1.0);
    let dense = net.forward(&x, ForwardMode::Eval).unwrap();
    assert!(infer(&prune(&net), &x).unwrap().max_abs_diff(&dense) <= 1e-5);
}

#[test]
fn tables_agree_between_network_and_model() {
    let mut net = Network::lenet5(0);
    randomize_gates(&mut net, 1);
    let a = SparsityTable::from_network(&net);
    let b = SparsityTable::from_model(&prune(&net));
    assert_eq!(a, b);
    let total = a.total();
    assert_eq!(total.initial, a.rows[..4].iter().map(|r| r.initial).sum::<usize>());
    assert_eq!(total.remaining, a.rows[..4].iter().map(|r| r.remaining).sum::<usize>());
}
