//! Network-level checks: full finite-difference gradient validation across
//! all eight operation kinds, dead-path exactness, parameter accounting, and
//! forward-path contracts.

use csnas_core::contrastive::{Embedding, MemoryBank};
use csnas_core::data::{make_minibatch, AugmentPolicy, Image, SyntheticSpec};
use csnas_core::encoder::{EncoderConfig, MiniNetwork, ReductionPlacement};
use csnas_core::rng::{stream_rng, STREAM_BATCH_BASE};
use csnas_core::space::{CellEncoding, Genotype};
use ndarray::Array3;
use rand::Rng;

fn genotype(normal: &[u8], reduction: &[u8]) -> Genotype {
    Genotype::new(
        CellEncoding::new(2, normal.to_vec()).unwrap(),
        CellEncoding::new(2, reduction.to_vec()).unwrap(),
    )
    .unwrap()
}

fn tiny_config(channels: usize, views: usize, embed_dim: usize) -> EncoderConfig {
    EncoderConfig {
        layers: 3,
        channels,
        input_size: 8,
        embed_dim,
        views,
        reduction_placement: ReductionPlacement::Thirds,
    }
}

fn tiny_policy() -> AugmentPolicy {
    AugmentPolicy {
        pad: 1,
        crop: 8,
        center: false,
        p_hflip: 0.5,
        p_vflip: 0.5,
        p_gray: 0.2,
    }
}

fn tiny_data(count: usize) -> Vec<Image> {
    SyntheticSpec {
        count,
        size: 8,
        classes: 2,
        seed: 31,
    }
    .generate()
    .unwrap()
}

fn seeded_bank(dim: usize, n: usize, seed: u64) -> MemoryBank {
    let mut bank = MemoryBank::new(dim, 0.5).unwrap();
    let mut rng = stream_rng(seed, 0);
    for id in 0..n as u64 {
        let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        bank.update(id, &Embedding::new(v).unwrap()).unwrap();
    }
    bank
}

/// Every parameter gradient on a fixture covering all eight operations,
/// against central finite differences of the forward-only loss.
#[test]
fn full_gradient_check_covers_all_operation_kinds() {
    // Normal cell: sep3, sep5, dil3, dil5, max. Reduction: avg, identity,
    // zero, sep3, max. Together all 8 codes.
    let g = genotype(&[1, 2, 3, 4, 5], &[6, 7, 0, 1, 5]);
    let mut net = MiniNetwork::build(g, tiny_config(2, 1, 4), 2024).unwrap();
    let data = tiny_data(6);
    let policy = tiny_policy();
    let mut rng = stream_rng(7, STREAM_BATCH_BASE);
    let mb = make_minibatch(&data, 2, 1, &policy, &mut rng).unwrap();
    let bank = seeded_bank(4, 6, 40);
    let (tau, lambda) = (0.07, 0.5);

    let out = net.backward_batch(&mb, &bank, tau, lambda).unwrap();
    let (value, _) = net.loss_batch(&mb, &bank, tau, lambda).unwrap();
    assert!(
        csnas_testkit::rel_err(out.loss, value) < 1e-12,
        "gradient-path loss {} vs value-path loss {}",
        out.loss,
        value
    );

    let n = net.params().flat_len();
    let analytic: Vec<f64> = (0..n).map(|i| net.params().grad_flat(i)).collect();
    let eps = 1e-5;
    let mut worst = (0.0f64, usize::MAX);
    for i in 0..n {
        let orig = net.params().get_flat(i);
        net.params_mut().set_flat(i, orig + eps);
        let (plus, _) = net.loss_batch(&mb, &bank, tau, lambda).unwrap();
        net.params_mut().set_flat(i, orig - eps);
        let (minus, _) = net.loss_batch(&mb, &bank, tau, lambda).unwrap();
        net.params_mut().set_flat(i, orig);
        let fd = (plus - minus) / (2.0 * eps);
        let scale = fd.abs().max(analytic[i].abs());
        let err = (fd - analytic[i]).abs();
        let rel = if scale > 0.0 { err / scale } else { 0.0 };
        if err > 1e-7 && rel > worst.0 {
            worst = (rel, i);
        }
        assert!(
            err <= 1e-7 || rel <= 1e-4,
            "gradient mismatch at {} ({}): analytic {} vs fd {} (rel {rel})",
            i,
            net.params().flat_name(i),
            analytic[i],
            fd
        );
    }
    assert_eq!(n, analytic.len());
    // Sanity: the check saw real gradients, not a sea of zeros.
    assert!(analytic.iter().filter(|g| g.abs() > 1e-12).count() > n / 2);
    if worst.1 != usize::MAX {
        println!("worst relative gradient deviation: {:.3e}", worst.0);
    }
}

/// Parameters of an operation consuming a node with only zero-operation
/// inputs receive exactly zero gradient.
#[test]
fn dead_path_parameters_get_exactly_zero_gradient() {
    // Normal cell: node 2 has zero ops on both inputs; edge (2,3) is a
    // separable conv reading the dead node.
    let g = genotype(&[0, 0, 5, 5, 1], &[1, 1, 1, 1, 1]);
    let mut net = MiniNetwork::build(g, tiny_config(2, 1, 4), 11).unwrap();
    let data = tiny_data(5);
    let mut rng = stream_rng(3, STREAM_BATCH_BASE);
    let mb = make_minibatch(&data, 2, 1, &tiny_policy(), &mut rng).unwrap();
    let bank = seeded_bank(4, 5, 41);
    net.backward_batch(&mb, &bank, 0.07, 0.5).unwrap();

    let mut found = 0;
    for t in net.params().tensors() {
        if t.name.starts_with("cell0.edge2_3") {
            found += 1;
            assert!(
                t.grad.iter().all(|&g| g == 0.0),
                "{} has non-zero gradient on a dead path",
                t.name
            );
        }
    }
    assert_eq!(found, 2, "expected depthwise + pointwise tensors on the dead edge");
}

#[test]
fn parameter_count_matches_shape_arithmetic() {
    // All-sep3 normal cells, all-maxpool reduction cells, N=2, L=3, C=4,
    // M=2 views, p=4. Reductions at cells 1 and 2.
    let g = genotype(&[1, 1, 1, 1, 1], &[5, 5, 5, 5, 5]);
    let config = EncoderConfig {
        layers: 3,
        channels: 4,
        input_size: 8,
        embed_dim: 4,
        views: 2,
        reduction_placement: ReductionPlacement::Thirds,
    };
    let net = MiniNetwork::build(g, config, 0).unwrap();

    let sep = |c: usize| 9 * c + c * c; // depthwise 3x3 + pointwise
    let expected = 4 * 3 * 3 * 3                  // stem
        + (4 * 4 + 4 * 4 + 5 * sep(4))            // cell 0: pre0, pre1, 5 sep3 edges at c=4
        + (8 * 4 + 8 * 8)                         // cell 1 (reduction, c=8): pools are free
        + (16 * 8 + 16 * 16)                      // cell 2 (reduction, c=16)
        + (4 * 32 + 4)                            // g head over 2*16 concat features
        + (4 * 8 + 4); // l head over M*p
    assert_eq!(net.param_count(), expected);
    assert_eq!(net.feature_dim(), 32);
}

#[test]
fn same_seed_gives_identical_parameters() {
    let g = genotype(&[1, 2, 3, 4, 5], &[6, 7, 0, 1, 5]);
    let a = MiniNetwork::build(g.clone(), tiny_config(2, 2, 4), 99).unwrap();
    let b = MiniNetwork::build(g.clone(), tiny_config(2, 2, 4), 99).unwrap();
    for (x, y) in a.params().tensors().iter().zip(b.params().tensors()) {
        assert_eq!(x.name, y.name);
        for (u, v) in x.value.iter().zip(y.value.iter()) {
            assert_eq!(u.to_bits(), v.to_bits());
        }
    }
    let c = MiniNetwork::build(g, tiny_config(2, 2, 4), 100).unwrap();
    let equal = a
        .params()
        .tensors()
        .iter()
        .zip(c.params().tensors())
        .all(|(x, y)| x.value == y.value);
    assert!(!equal);
}

#[test]
fn all_zero_genotype_forward_is_finite_and_bias_only() {
    let g = genotype(&[0; 5], &[0; 5]);
    let net = MiniNetwork::build(g, tiny_config(3, 2, 5), 8).unwrap();
    let data = tiny_data(4);
    let mut rng = stream_rng(5, STREAM_BATCH_BASE);
    let mb = make_minibatch(&data, 2, 2, &tiny_policy(), &mut rng).unwrap();
    let fwd = net.forward_minibatch(&mb).unwrap();
    assert_eq!(fwd.z.dim(), (2, 5));
    assert_eq!(fwd.z_t.dim(), (2, 5));
    // Cells emit empty sums, so features vanish and z is the g-head bias.
    let g_b = net
        .params()
        .tensors()
        .iter()
        .find(|t| t.name == "g_head.b")
        .unwrap();
    for row in 0..2 {
        for (j, b) in g_b.value.iter().enumerate() {
            assert_eq!(fwd.z[[row, j]], *b);
        }
    }
}

#[test]
fn zero_images_through_identity_genotype_hit_the_bias_path() {
    let g = genotype(&[7; 5], &[7; 5]);
    let net = MiniNetwork::build(g, tiny_config(2, 1, 4), 3).unwrap();
    let zero_image = Image::new(Array3::zeros((3, 8, 8))).unwrap();
    let data = vec![zero_image.clone(), zero_image];
    let mut rng = stream_rng(1, STREAM_BATCH_BASE);
    let mb = make_minibatch(&data, 2, 1, &tiny_policy(), &mut rng).unwrap();
    let fwd = net.forward_minibatch(&mb).unwrap();
    let g_b = net
        .params()
        .tensors()
        .iter()
        .find(|t| t.name == "g_head.b")
        .unwrap();
    for row in 0..2 {
        for (j, b) in g_b.value.iter().enumerate() {
            assert_eq!(fwd.z[[row, j]], *b);
        }
    }
}

#[test]
fn doubling_the_g_head_doubles_z_exactly() {
    let g = genotype(&[1, 5, 6, 7, 2], &[3, 4, 5, 1, 7]);
    let mut net = MiniNetwork::build(g, tiny_config(2, 1, 4), 12).unwrap();
    let data = tiny_data(4);
    let mut rng = stream_rng(9, STREAM_BATCH_BASE);
    let mb = make_minibatch(&data, 2, 1, &tiny_policy(), &mut rng).unwrap();
    let before = net.forward_minibatch(&mb).unwrap().z;
    for i in 0..net.params().flat_len() {
        let name = net.params().flat_name(i);
        if name.starts_with("g_head.") {
            let v = net.params().get_flat(i);
            net.params_mut().set_flat(i, 2.0 * v);
        }
    }
    let after = net.forward_minibatch(&mb).unwrap().z;
    for (a, b) in before.iter().zip(after.iter()) {
        assert_eq!((2.0 * a).to_bits(), b.to_bits());
    }
}

#[test]
fn infeasible_shapes_are_rejected() {
    let g = genotype(&[1; 5], &[1; 5]);
    let mut cfg = tiny_config(2, 1, 4);
    cfg.input_size = 10; // not divisible by 4
    assert!(MiniNetwork::build(g.clone(), cfg, 0).is_err());
    let mut cfg = tiny_config(2, 1, 4);
    cfg.layers = 2;
    assert!(MiniNetwork::build(g, cfg, 0).is_err());
}

#[test]
fn parameter_checkpoint_round_trips_through_disk() {
    let g = genotype(&[1, 2, 3, 4, 5], &[6, 7, 0, 1, 5]);
    let a = MiniNetwork::build(g.clone(), tiny_config(2, 1, 4), 55).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("weights.csnet");
    a.save_params(&path).unwrap();
    let mut b = MiniNetwork::build(g, tiny_config(2, 1, 4), 56).unwrap();
    b.load_params(&path).unwrap();
    let data = tiny_data(4);
    let mut rng = stream_rng(2, STREAM_BATCH_BASE);
    let mb = make_minibatch(&data, 2, 1, &tiny_policy(), &mut rng).unwrap();
    let za = a.forward_minibatch(&mb).unwrap().z;
    let zb = b.forward_minibatch(&mb).unwrap().z;
    assert_eq!(za, zb);
}
