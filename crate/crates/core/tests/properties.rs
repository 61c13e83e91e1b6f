//! Property tests over the encoding, loss, density, and augmentation layers,
//! plus golden-file checks for the serialization surfaces.

use csnas_core::contrastive::{nce_estimator, Embedding, MemoryBank};
use csnas_core::data::{augment, AugmentPolicy, SyntheticSpec};
use csnas_core::rng::{stream_rng, STREAM_BATCH_BASE};
use csnas_core::space::{
    encoding_length, export_genotype, import_genotype, CellEncoding, ExportFormat, Genotype,
};
use csnas_core::tpe::{fit_density, split_history, CategoricalSpace, TrialHistory, TrialRecord, TrialStatus};
use proptest::prelude::*;
use rand::Rng as _;
use sha2::{Digest, Sha256};

fn arb_encoding() -> impl Strategy<Value = CellEncoding> {
    (1usize..=5).prop_flat_map(|n| {
        let len = encoding_length(n).unwrap();
        proptest::collection::vec(0u8..8, len)
            .prop_map(move |theta| CellEncoding::new(n, theta).unwrap())
    })
}

proptest! {
    #[test]
    fn decode_encode_round_trips(enc in arb_encoding()) {
        let graph = enc.decode();
        prop_assert_eq!(graph.encode(), enc.clone());
        let nonzero = enc.codes().iter().filter(|&&c| c != 0).count();
        prop_assert_eq!(graph.edges().len(), nonzero);
        prop_assert!(graph.edges().iter().all(|e| e.src < e.dst));
    }

    #[test]
    fn genotype_json_round_trips(normal in arb_encoding()) {
        let n = normal.n_intermediate();
        let reduction = CellEncoding::random(n, 1234).unwrap();
        let genotype = Genotype::new(normal, reduction).unwrap();
        let text = export_genotype(&genotype, ExportFormat::Json);
        prop_assert_eq!(import_genotype(&text).unwrap(), genotype);
    }

    #[test]
    fn estimator_is_invariant_under_positive_scaling(
        seed in 0u64..1000,
        scale_z in 0.01f64..100.0,
        scale_zt in 0.01f64..100.0,
        scale_neg in 0.01f64..100.0,
    ) {
        let mut rng = stream_rng(seed, 0);
        let dim = 5;
        let mut fresh = || {
            let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0f64..1.0) + 0.05).collect();
            Embedding::new(v).unwrap()
        };
        let z = fresh();
        let zt = fresh();
        let negs: Vec<Embedding> = (0..3).map(|_| fresh()).collect();
        let scaled = |e: &Embedding, s: f64| {
            Embedding::new(e.values().iter().map(|v| v * s).collect()).unwrap()
        };
        let base = nce_estimator(&z, &zt, &negs, 0.07).unwrap();
        let scaled_negs: Vec<Embedding> = negs.iter().map(|n| scaled(n, scale_neg)).collect();
        let other = nce_estimator(
            &scaled(&z, scale_z),
            &scaled(&zt, scale_zt),
            &scaled_negs,
            0.07,
        )
        .unwrap();
        prop_assert!((base - other).abs() < 1e-11, "{} vs {}", base, other);
    }

    #[test]
    fn bank_updates_stay_coordinatewise_between(
        momentum in 0.0f64..=1.0,
        r0 in proptest::collection::vec(-10.0f64..10.0, 4),
        z in proptest::collection::vec(-10.0f64..10.0, 4),
        k in 1usize..20,
    ) {
        let mut bank = MemoryBank::new(4, momentum).unwrap();
        bank.update(0, &Embedding::new(r0.clone()).unwrap()).unwrap();
        let z_emb = Embedding::new(z.clone()).unwrap();
        for _ in 0..k {
            bank.update(0, &z_emb).unwrap();
        }
        let mk = momentum.powi(k as i32);
        for (i, got) in bank.get(0).unwrap().iter().enumerate() {
            let expected = mk * r0[i] + (1.0 - mk) * z[i];
            prop_assert!((got - expected).abs() < 1e-9);
            let (lo, hi) = (r0[i].min(z[i]), r0[i].max(z[i]));
            prop_assert!(*got >= lo - 1e-12 && *got <= hi + 1e-12);
        }
    }

    #[test]
    fn densities_normalize_with_positive_floor(
        seed in 0u64..500,
        n_records in 0usize..40,
        prior_weight in 0.1f64..5.0,
    ) {
        let space = CategoricalSpace { dims: 6, cardinality: 8 };
        let mut rng = stream_rng(seed, 1);
        let thetas: Vec<Vec<u8>> = (0..n_records).map(|_| space.uniform_sample(&mut rng)).collect();
        let table = fit_density(thetas.iter().map(|t| t.as_slice()), space, prior_weight).unwrap();
        let floor = prior_weight / (n_records as f64 + prior_weight * 8.0);
        for row in &table {
            let sum: f64 = row.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&p| p >= floor * (1.0 - 1e-12)));
        }
    }

    #[test]
    fn history_split_matches_sort_oracle(
        seed in 0u64..500,
        n in 2usize..200,
        gamma in 0.05f64..0.95,
    ) {
        let mut rng = stream_rng(seed, 2);
        let mut history = TrialHistory::new();
        let losses: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0f64..5.0)).collect();
        for (i, &loss) in losses.iter().enumerate() {
            history.push(TrialRecord {
                index: i,
                status: TrialStatus::Ok,
                theta: vec![0, 0],
                loss: Some(loss),
                wall_seconds: 0.0,
                seed: 0,
                note: None,
            }).unwrap();
        }
        let (below, above, threshold) = split_history(&history, gamma).unwrap();
        let expected = ((gamma * n as f64).ceil() as usize).clamp(1, n);
        prop_assert_eq!(below.len(), expected);
        prop_assert_eq!(below.len() + above.len(), n);
        let max_below = below.iter().map(|r| r.loss.unwrap()).fold(f64::NEG_INFINITY, f64::max);
        prop_assert_eq!(threshold, max_below);
        for a in &above {
            prop_assert!(a.loss.unwrap() >= max_below);
        }
        let mut sorted = losses;
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        prop_assert_eq!(threshold, sorted[expected - 1]);
    }

    #[test]
    fn augmentation_stays_in_unit_range(
        seed in 0u64..200,
        pad in 0usize..3,
        center in any::<bool>(),
        p_h in 0.0f64..=1.0,
        p_v in 0.0f64..=1.0,
        p_g in 0.0f64..=1.0,
    ) {
        let image = SyntheticSpec { count: 1, size: 12, classes: 1, seed }
            .generate().unwrap().pop().unwrap();
        let policy = AugmentPolicy { pad, crop: 12, center, p_hflip: p_h, p_vflip: p_v, p_gray: p_g };
        let mut rng = stream_rng(seed, STREAM_BATCH_BASE);
        let out = augment(&image, &policy, &mut rng).unwrap();
        prop_assert!(out.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert_eq!((out.height(), out.width()), (12, 12));
    }
}

#[test]
fn genotype_json_golden_file_is_stable() {
    let text = include_str!("fixtures/genotype_n4.json");
    let genotype = import_genotype(text).unwrap();
    assert_eq!(export_genotype(&genotype, ExportFormat::Json), text);
}

#[test]
fn genotype_dot_golden_file_is_stable() {
    let json = include_str!("fixtures/genotype_n4.json");
    let dot = include_str!("fixtures/genotype_n4.dot");
    let genotype = import_genotype(json).unwrap();
    assert_eq!(export_genotype(&genotype, ExportFormat::Dot), dot);
}

/// Frozen digest of one augmented image: any change to the augmentation
/// arithmetic, the RNG derivation, or the synthetic generator shows up here.
#[test]
fn augmented_image_matches_golden_digest() {
    let image = SyntheticSpec {
        count: 1,
        size: 16,
        classes: 2,
        seed: 77,
    }
    .generate()
    .unwrap()
    .pop()
    .unwrap();
    let policy = AugmentPolicy {
        pad: 2,
        crop: 16,
        center: false,
        p_hflip: 0.5,
        p_vflip: 0.5,
        p_gray: 1.0,
    };
    let mut rng = stream_rng(4242, STREAM_BATCH_BASE);
    let out = augment(&image, &policy, &mut rng).unwrap();
    let mut hasher = Sha256::new();
    for v in out.pixels().iter() {
        hasher.update(v.to_le_bytes());
    }
    let digest = hasher
        .finalize()
        .iter()
        .fold(String::new(), |mut acc, b| {
            acc.push_str(&format!("{b:02x}"));
            acc
        });
    assert_eq!(
        digest,
        "8368cc41063dfd48fb1bab595059054dbfa639cbe237433e253048175fed914b"
    );
}
