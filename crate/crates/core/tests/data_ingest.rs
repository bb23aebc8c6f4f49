use std::collections::BTreeMap;
use std::io::Read;
use std::path::{Path, PathBuf};

use proptest::prelude::*;
use robustfed::data::{
    inspect_idx_header, load_idx, partition, partition_indices, synth_quadratic, PartitionPlan,
    PartitionScheme,
};
use robustfed::{LabeledDataset, Vector};

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn mnist_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist")
}

#[test]
fn four_sample_fixture_round_trips() {
    let d = load_idx(&fixture("four-images-idx3-ubyte"), &fixture("four-labels-idx1-ubyte")).unwrap();
    assert_eq!(d.num_samples(), 4);
    assert_eq!(d.dim(), 6);
    let row = |i: usize| -> Vec<f64> { d.features().row(i).iter().copied().collect() };
    let scaled = |v: &[u8]| -> Vec<f64> { v.iter().map(|&b| f64::from(b) / 255.0).collect() };
    assert_eq!(row(0), scaled(&[0, 255, 128, 0, 64, 32]));
    assert_eq!(row(1), scaled(&[1, 2, 3, 4, 5, 6]));
    assert_eq!(row(2), scaled(&[255, 255, 255, 0, 0, 0]));
    assert_eq!(row(3), scaled(&[10, 20, 30, 40, 50, 60]));
    assert_eq!(d.labels(), &[3.0, 1.0, 4.0, 1.0]);
}

#[test]
fn gzip_is_detected_by_suffix() {
    let plain = load_idx(&fixture("four-images-idx3-ubyte"), &fixture("four-labels-idx1-ubyte")).unwrap();
    let gz = load_idx(&fixture("four-images-idx3-ubyte"), &fixture("four-labels-idx1-ubyte.gz")).unwrap();
    assert_eq!(plain, gz);
    let h = inspect_idx_header(&fixture("four-images-idx3-ubyte")).unwrap();
    assert_eq!((h.magic, h.dims.clone(), h.header_bytes), (2051, vec![4, 2, 3], 16));
}

#[test]
fn full_mnist_training_set_byte_count() {
    let images = mnist_dir().join("train-images-idx3-ubyte.gz");
    if !images.exists() {
        eprintln!("skipped: {} not present (scripts/fetch_mnist.sh)", images.display());
        return;
    }
    let mut raw = Vec::new();
    flate2::read::GzDecoder::new(std::fs::File::open(&images).unwrap())
        .read_to_end(&mut raw)
        .unwrap();
    assert_eq!(raw.len(), 16 + 60000 * 784);
    let h = inspect_idx_header(&images).unwrap();
    assert_eq!(h.dims, vec![60000, 28, 28]);
    let d = load_idx(&images, &mnist_dir().join("train-labels-idx1-ubyte.gz")).unwrap();
    assert_eq!((d.num_samples(), d.dim()), (60000, 784));
}

#[test]
fn mnist_single_shard_users_are_nearly_pure() {
    let images = mnist_dir().join("train-images-idx3-ubyte.gz");
    if !images.exists() {
        eprintln!("skipped: MNIST not present");
        return;
    }
    let d = load_idx(&images, &mnist_dir().join("train-labels-idx1-ubyte.gz")).unwrap();
    let parts = partition_indices(d.labels(), &PartitionPlan::label_shard(10, 1, 7)).unwrap();
    // expected purity of each equal-width slice of the label-sorted order,
    // computed from the class counts alone
    let mut counts = [0usize; 10];
    for &l in d.labels() {
        counts[l as usize] += 1;
    }
    let width = d.num_samples() / 10;
    let mut expected: Vec<f64> = (0..10)
        .map(|s| {
            let (lo, hi) = (s * width, (s + 1) * width);
            let mut start = 0;
            let mut best = 0;
            for &c in &counts {
                best = best.max(hi.min(start + c).saturating_sub(lo.max(start)));
                start += c;
            }
            best as f64 / width as f64
        })
        .collect();
    let mut purity: Vec<f64> = parts
        .iter()
        .map(|user| {
            let mut hist = BTreeMap::new();
            for &i in user {
                *hist.entry(d.labels()[i] as u8).or_insert(0usize) += 1;
            }
            *hist.values().max().unwrap() as f64 / user.len() as f64
        })
        .collect();
    purity.sort_by(f64::total_cmp);
    expected.sort_by(f64::total_cmp);
    assert_eq!(purity, expected);
    let mean = purity.iter().sum::<f64>() / purity.len() as f64;
    assert!(mean >= 0.9, "{purity:?}");
    assert!(purity[0] > 0.85, "{purity:?}");
}

fn spearman(x: &[f64], y: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        for (rank, &i) in idx.iter().enumerate() {
            r[i] = rank as f64;
        }
        r
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let d2: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - b).powi(2)).sum();
    1.0 - 6.0 * d2 / (n * (n * n - 1.0))
}

#[test]
fn optimum_spread_grows_with_heterogeneity() {
    let levels: Vec<f64> = (0..9).map(|i| 0.25 * f64::from(i)).collect();
    for seed in 0..20 {
        let spread: Vec<f64> = levels
            .iter()
            .map(|&h| {
                let s = synth_quadratic(6, 4, h, seed).unwrap();
                let mean = s.user_optima.iter().fold(Vector::zeros(4), |acc, w| acc + w.as_vector())
                    / s.user_optima.len() as f64;
                s.user_optima.iter().map(|w| (w.as_vector() - &mean).norm_squared()).sum::<f64>()
            })
            .collect();
        let rho = spearman(&levels, &spread);
        assert!(rho > 0.9, "seed {seed}: ρ = {rho}, spreads {spread:?}");
    }
}

#[test]
fn partitions_are_deterministic() {
    let labels: Vec<f64> = (0..300).map(|i| f64::from(i % 7)).collect();
    for plan in [
        PartitionPlan::iid(9, 4),
        PartitionPlan::label_shard(9, 3, 4),
        PartitionPlan::dirichlet(9, 0.8, 4),
    ] {
        assert_eq!(partition_indices(&labels, &plan).unwrap(), partition_indices(&labels, &plan).unwrap());
    }
}

fn sorted_labels(parts: &[LabeledDataset]) -> Vec<f64> {
    let mut all: Vec<f64> = parts.iter().flat_map(|p| p.labels().to_vec()).collect();
    all.sort_by(f64::total_cmp);
    all
}

fn scheme() -> impl Strategy<Value = PartitionScheme> {
    prop_oneof![
        Just(PartitionScheme::IidUniform),
        Just(PartitionScheme::LabelShard),
        Just(PartitionScheme::Dirichlet),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn partition_is_a_disjoint_cover(
        labels in prop::collection::vec(0u8..6, 30..120),
        users in 1usize..8,
        shards in 1usize..4,
        scheme in scheme(),
        seed in any::<u64>(),
    ) {
        let plan = PartitionPlan {
            scheme,
            num_users: users,
            shards_per_user: shards,
            concentration: 2.0,
            seed,
        };
        let y: Vec<f64> = labels.iter().map(|&l| f64::from(l)).collect();
        let rows: Vec<Vec<f64>> = (0..y.len()).map(|i| vec![i as f64]).collect();
        let data = LabeledDataset::from_rows(&rows, y.clone()).unwrap();
        let parts = partition(&data, &plan).unwrap();
        prop_assert_eq!(parts.len(), users);
        prop_assert!(parts.iter().all(|p| p.num_samples() > 0));
        let mut ids: Vec<usize> = parts
            .iter()
            .flat_map(|p| p.features().column(0).iter().map(|&v| v as usize).collect::<Vec<_>>())
            .collect();
        ids.sort_unstable();
        prop_assert_eq!(ids, (0..y.len()).collect::<Vec<_>>());
        let mut expected = y;
        expected.sort_by(f64::total_cmp);
        prop_assert_eq!(sorted_labels(&parts), expected);
    }
}
