use std::path::PathBuf;

use deepebm::data_io::{gen_four_spin, gen_two_spiral, load_mnist_idx};
use deepebm::rng::{stream, Stream};
use deepebm::Tensor;
use proptest::prelude::*;
use rand::seq::SliceRandom;

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Two-sample energy statistic `2E|X-Y| - E|X-X'| - E|Y-Y'|` for the split
/// `in_a` of the pooled distance matrix.
fn energy_statistic(d: &[Vec<f64>], in_a: &[bool]) -> f64 {
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    let (mut nab, mut naa, mut nbb) = (0usize, 0usize, 0usize);
    for i in 0..d.len() {
        for j in 0..i {
            match (in_a[i], in_a[j]) {
                (true, true) => (aa += d[i][j], naa += 1),
                (false, false) => (bb += d[i][j], nbb += 1),
                _ => (ab += d[i][j], nab += 1),
            };
        }
    }
    2.0 * ab / nab as f64 - aa / naa as f64 - bb / nbb as f64
}

/// Permutation p-value of the energy statistic.
fn energy_test(a: &Tensor, b: &Tensor, permutations: usize, seed: u64) -> f64 {
    let pooled: Vec<&[f64]> = (0..a.rows()).map(|i| a.row(i)).chain((0..b.rows()).map(|i| b.row(i))).collect();
    let d: Vec<Vec<f64>> = pooled.iter().map(|p| pooled.iter().map(|q| dist(p, q)).collect()).collect();
    let mut labels: Vec<bool> = (0..pooled.len()).map(|i| i < a.rows()).collect();
    let observed = energy_statistic(&d, &labels);
    let mut rng = stream(seed, Stream::Eval);
    let mut at_least = 1;
    for _ in 0..permutations {
        labels.shuffle(&mut rng);
        if energy_statistic(&d, &labels) >= observed {
            at_least += 1;
        }
    }
    at_least as f64 / (permutations + 1) as f64
}

fn rotate_quarter_turn(x: &Tensor) -> Tensor {
    let rows: Vec<Vec<f64>> = (0..x.rows()).map(|i| vec![-x.get(i, 1), x.get(i, 0)]).collect();
    Tensor::from_rows(&rows).unwrap()
}

#[test]
fn quarter_turn_leaves_four_spin_distribution_unchanged() {
    let a = gen_four_spin(300, 0.02, &mut stream(1, Stream::Data)).unwrap().points;
    let b = gen_four_spin(300, 0.02, &mut stream(2, Stream::Data)).unwrap().points;
    let p = energy_test(&rotate_quarter_turn(&a), &b, 200, 3);
    assert!(p > 0.01, "p = {p}");

    // the test has power against a small shift
    let shifted = a.map(|v| v + 0.1);
    let p = energy_test(&shifted, &b, 200, 4);
    assert!(p <= 0.01, "p = {p}");
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 16, ..ProptestConfig::default() })]

    #[test]
    fn generators_depend_only_on_their_inputs(seed in any::<u64>(), n in 4usize..200, noise in 0.0f64..0.1) {
        let a = gen_four_spin(n, noise, &mut stream(seed, Stream::Data)).unwrap();
        let b = gen_four_spin(n, noise, &mut stream(seed, Stream::Data)).unwrap();
        prop_assert_eq!(a, b);
        let a = gen_two_spiral(n, noise, &mut stream(seed, Stream::Data)).unwrap();
        let b = gen_two_spiral(n, noise, &mut stream(seed, Stream::Data)).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn low_noise_spirals_stay_in_the_box(seed in any::<u64>()) {
        for d in [
            gen_two_spiral(500, 0.02, &mut stream(seed, Stream::Data)).unwrap(),
            gen_four_spin(500, 0.02, &mut stream(seed, Stream::Data)).unwrap(),
        ] {
            prop_assert!(d.points.data().iter().all(|v| v.abs() <= 1.2));
            prop_assert_eq!(d.labels.as_ref().map(Vec::len), Some(500));
        }
    }
}

/// Needs `MNIST_DIR` pointing at the standard training IDX files.
#[test]
#[ignore]
fn mnist_training_set_shape() {
    let dir = PathBuf::from(std::env::var("MNIST_DIR").expect("MNIST_DIR not set"));
    let d = load_mnist_idx(&dir.join("train-images-idx3-ubyte"), &dir.join("train-labels-idx1-ubyte")).unwrap();
    assert_eq!(d.points.shape(), &[60_000, 784]);
    assert!(d.points.data().iter().all(|v| (0.0..=1.0).contains(v)));
}
