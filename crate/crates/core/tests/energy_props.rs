use deepebm::autodiff::Tape;
use deepebm::energy_model::{
    log_partition_oracle, EnergyArch, EnergyFunction, EnergyModel, EnergySurface, QuadratureGrid,
};
use deepebm::experts::{logistic_energy, pot_energy, rbm_free_energy, ExpertBank, ExpertKind};
use deepebm::generator::{sample_prior, GeneratorArch, GeneratorModel};
use deepebm::layers::{Activation, Binding};
use deepebm::param::Parameter;
use deepebm::rng::{stream, Stream};
use deepebm::Tensor;
use proptest::prelude::*;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

fn normal(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = stream(seed, Stream::Data);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()).unwrap()
}

fn expert_values(kind: ExpertKind, x: &Tensor, bank: &ExpertBank) -> Vec<f64> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let b_vis = Parameter::new("b_vis", normal(&[x.cols()], 99));
    let e = match kind {
        ExpertKind::Pot => pot_energy(&mut tape, xv, bank, Binding::Frozen),
        ExpertKind::Logistic => logistic_energy(&mut tape, xv, bank, Binding::Frozen),
        ExpertKind::RbmFreeEnergy => rbm_free_energy(&mut tape, xv, bank, 1.3, &b_vis, Binding::Frozen),
    }
    .unwrap();
    tape.value(e).data().to_vec()
}

fn bank(kind: ExpertKind, seed: u64) -> ExpertBank {
    let mut b = ExpertBank::random(kind, 3, 5, 1.0, &mut stream(seed, Stream::Init));
    b.bias.value = normal(&[5], seed + 7);
    b
}

const KINDS: [ExpertKind; 3] = [ExpertKind::Pot, ExpertKind::Logistic, ExpertKind::RbmFreeEnergy];

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, ..ProptestConfig::default() })]

    #[test]
    fn expert_energies_are_row_wise(seed in 0u64..1_000_000) {
        let x = normal(&[6, 3], seed);
        let perm = [3, 0, 5, 1, 4, 2];
        for kind in KINDS {
            let b = bank(kind, seed);
            let e = expert_values(kind, &x, &b);
            let ep = expert_values(kind, &x.select_rows(&perm), &b);
            for (k, &p) in perm.iter().enumerate() {
                prop_assert_eq!(ep[k].to_bits(), e[p].to_bits());
            }
        }
    }

    #[test]
    fn pot_and_logistic_are_non_negative(seed in 0u64..1_000_000) {
        let x = normal(&[16, 3], seed).map(|v| 5.0 * v);
        for kind in [ExpertKind::Pot, ExpertKind::Logistic] {
            prop_assert!(expert_values(kind, &x, &bank(kind, seed)).iter().all(|&e| e >= 0.0));
        }
    }

    #[test]
    fn expert_gradients_match_finite_differences(seed in 0u64..1_000_000) {
        let x = normal(&[4, 3], seed);
        for kind in KINDS {
            let mut b = bank(kind, seed);
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let b_vis = Parameter::new("b_vis", Tensor::zeros(&[3]));
            let e = match kind {
                ExpertKind::Pot => pot_energy(&mut tape, xv, &b, Binding::Trainable),
                ExpertKind::Logistic => logistic_energy(&mut tape, xv, &b, Binding::Trainable),
                ExpertKind::RbmFreeEnergy => rbm_free_energy(&mut tape, xv, &b, 1.3, &b_vis, Binding::Trainable),
            }.unwrap();
            let root = tape.sum(e);
            let g = tape.backward(root).unwrap().param(&b.weight).unwrap().clone();
            let h = 1e-5;
            for j in 0..g.numel() {
                let orig = b.weight.value.data()[j];
                b.weight.value.data_mut()[j] = orig + h;
                let plus: f64 = expert_values(kind, &x, &b).iter().sum();
                b.weight.value.data_mut()[j] = orig - h;
                let minus: f64 = expert_values(kind, &x, &b).iter().sum();
                b.weight.value.data_mut()[j] = orig;
                let numeric = (plus - minus) / (2.0 * h);
                let a = g.data()[j];
                prop_assert!((a - numeric).abs() <= 1e-5 * a.abs().max(numeric.abs()).max(1.0), "{:?}[{}]: {} vs {}", kind, j, a, numeric);
            }
        }
    }
}

#[test]
fn rbm_energy_dominated_by_quadratic_far_out() {
    let b = bank(ExpertKind::RbmFreeEnergy, 3);
    for seed in 0..20 {
        let x = normal(&[1, 3], seed).map(|v| 20.0 * v);
        let e1 = expert_values(ExpertKind::RbmFreeEnergy, &x, &b)[0];
        let e10 = expert_values(ExpertKind::RbmFreeEnergy, &x.map(|v| 10.0 * v), &b)[0];
        assert!(e10 > e1, "seed {seed}: {e10} <= {e1}");
    }
}

fn toy_arch() -> EnergyArch {
    EnergyArch {
        input_dim: 2,
        hidden: vec![4, 2],
        n_experts: 3,
        hidden_activation: Activation::Tanh,
        feature_activation: Activation::Sigmoid,
        sigma: 1.0,
    }
}

#[test]
fn features_stay_in_sigmoid_range_on_wide_inputs() {
    let m = EnergyModel::new(EnergyArch::toy_2d(), &mut stream(1, Stream::Init)).unwrap();
    let mut rng = stream(2, Stream::Data);
    let x = Tensor::new(vec![10_000, 2], (0..20_000).map(|_| rng.random_range(-100.0..100.0)).collect()).unwrap();
    let f = m.features(&x).unwrap();
    assert!(f.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    let e = m.energy(&x).unwrap();
    assert!(e.all_finite());
}

#[test]
fn identical_rows_give_identical_energies() {
    let m = EnergyModel::new(EnergyArch::toy_2d(), &mut stream(5, Stream::Init)).unwrap();
    let x = Tensor::from_rows(&[vec![0.3, -0.2], vec![0.3, -0.2], vec![0.3, -0.2]]).unwrap();
    let e = m.energy(&x).unwrap();
    assert!(e.data().iter().all(|v| v.to_bits() == e.data()[0].to_bits()));
}

#[test]
fn energy_is_permutation_equivariant() {
    let m = EnergyModel::new(EnergyArch::toy_2d(), &mut stream(6, Stream::Init)).unwrap();
    let x = normal(&[5, 2], 6);
    let perm = [4, 2, 0, 3, 1];
    let e = m.energy(&x).unwrap();
    let ep = m.energy(&x.select_rows(&perm)).unwrap();
    for (k, &p) in perm.iter().enumerate() {
        assert_eq!(ep.data()[k], e.data()[p]);
    }
}

#[test]
fn zero_model_unit_step_costs_one() {
    let m = EnergyModel::zeros(EnergyArch::toy_2d()).unwrap();
    let e = m.energy(&Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap()).unwrap();
    assert!((e.data()[0] - e.data()[1] - 1.0).abs() < 1e-12);
    assert!((e.data()[1] + 4.0 * std::f64::consts::LN_2).abs() < 1e-12);
}

#[test]
fn unnormalized_density_integrates_stably() {
    let m = EnergyModel::new(EnergyArch::toy_2d(), &mut stream(8, Stream::Init)).unwrap();
    let b = [(-20.0, 20.0), (-20.0, 20.0)];
    let coarse = log_partition_oracle(&m, &b, 201).unwrap();
    let fine = log_partition_oracle(&m, &b, 401).unwrap();
    assert!(coarse.is_finite());
    // relative change of Z below 0.1%
    assert!((fine - coarse).exp_m1().abs() < 1e-3, "{coarse} vs {fine}");
}

/// `(1/σ²)xᵀx` exactly: zero weights and expert biases so negative that every
/// softplus term underflows to zero.
fn pure_quadratic() -> EnergyModel {
    let mut m = EnergyModel::zeros(EnergyArch { n_experts: 1, ..toy_arch() }).unwrap();
    m.experts.bias.value = Tensor::full(&[1], -1000.0);
    m
}

#[test]
fn partition_oracle_identities() {
    let m = pure_quadratic();
    let b = [(-6.0, 6.0), (-6.0, 6.0)];
    let lz = log_partition_oracle(&m, &b, 400).unwrap();
    assert!((lz - std::f64::consts::PI.ln()).abs() < 1e-3);
    let lz2 = log_partition_oracle(&m, &b, 800).unwrap();
    assert!((lz2 - lz).abs() < 1e-4);

    struct Shifted<'a>(&'a EnergyModel, f64);
    impl EnergySurface for Shifted<'_> {
        fn input_dim(&self) -> usize {
            2
        }
        fn energy_values(&self, x: &Tensor) -> deepebm::Result<Tensor> {
            Ok(self.0.energy_values(x)?.map(|e| e + self.1))
        }
    }
    let c = 3.25;
    let shifted = log_partition_oracle(&Shifted(&m, c), &b, 400).unwrap();
    assert!((shifted - (lz - c)).abs() < 1e-12);

    let grid = QuadratureGrid::new(&b, 400).unwrap();
    let e = m.energy(&grid.points).unwrap();
    let total: f64 = grid.log_weights.iter().zip(e.data()).map(|(lw, e)| (lw - e - lz).exp()).sum();
    assert!((total - 1.0).abs() < 1e-3);
}

fn fd_check_dem(m: &mut EnergyModel, x_pos: &Tensor, x_neg: &Tensor) {
    m.loss_gradient(x_pos, x_neg).unwrap();
    let analytic: Vec<Vec<f64>> = m.parameters().iter().map(|p| p.grad.data().to_vec()).collect();
    let h = 1e-5;
    for (pi, grads) in analytic.iter().enumerate() {
        for (j, &a) in grads.iter().enumerate() {
            let orig = m.parameters_mut()[pi].value.data()[j];
            m.parameters_mut()[pi].value.data_mut()[j] = orig + h;
            let plus = m.loss_gradient(x_pos, x_neg).unwrap().loss;
            m.parameters_mut()[pi].value.data_mut()[j] = orig - h;
            let minus = m.loss_gradient(x_pos, x_neg).unwrap().loss;
            m.parameters_mut()[pi].value.data_mut()[j] = orig;
            let n = (plus - minus) / (2.0 * h);
            assert!((a - n).abs() <= 1e-5 * a.abs().max(n.abs()).max(1e-3), "param {pi}[{j}]: {a} vs {n}");
        }
    }
}

#[test]
fn dem_gradient_matches_finite_differences() {
    for seed in 0..4 {
        let mut m = EnergyModel::new(toy_arch(), &mut stream(seed, Stream::Init)).unwrap();
        m.b_vis.value = normal(&[2], seed + 3);
        m.experts.bias.value = normal(&[3], seed + 4);
        fd_check_dem(&mut m, &normal(&[8, 2], seed + 1), &normal(&[8, 2], seed + 2));
    }
}

#[test]
fn one_step_lowers_positive_and_raises_negative_energy() {
    let mut m = EnergyModel::new(EnergyArch::toy_2d(), &mut stream(3, Stream::Init)).unwrap();
    // separated clusters keep the two phase gradients far from parallel
    let x_pos = normal(&[16, 2], 30).map(|v| 0.1 * v + 1.5);
    let x_neg = normal(&[16, 2], 31).map(|v| 0.1 * v - 1.5);
    let before = m.loss_gradient(&x_pos, &x_neg).unwrap();
    for p in m.parameters_mut() {
        let g = p.grad.clone();
        p.value.data_mut().iter_mut().zip(g.data()).for_each(|(v, g)| *v -= 1e-4 * g);
    }
    let after = m.loss_gradient(&x_pos, &x_neg).unwrap();
    assert!(after.loss < before.loss);
    assert!(after.pos_energy < before.pos_energy);
    assert!(after.neg_energy > before.neg_energy);
}

#[test]
fn dem_update_leaves_generator_untouched() {
    let mut gen = GeneratorModel::new(GeneratorArch::toy_2d(), &mut stream(1, Stream::Init)).unwrap();
    let mut dem = EnergyModel::new(EnergyArch::toy_2d(), &mut stream(2, Stream::Init)).unwrap();
    let x_neg = gen
        .generate(&sample_prior(8, 4, &mut stream(1, Stream::Prior)), deepebm::autodiff::BatchNormMode::Train)
        .unwrap();
    dem.loss_gradient(&normal(&[8, 2], 4), &x_neg).unwrap();
    assert!(gen.parameters().iter().all(|p| p.grad.data().iter().all(|&g| g == 0.0)));
}

/// The negative-phase term of the gradient, flattened over parameters.
fn negative_phase(m: &EnergyModel, x_neg: &Tensor) -> Vec<f64> {
    let mut tape = Tape::new();
    let xv = tape.constant(x_neg.clone());
    let e = m.energy_on_tape(&mut tape, xv, Binding::Trainable).unwrap();
    let root = tape.mean(e);
    let g = tape.backward(root).unwrap();
    m.parameters().iter().flat_map(|p| g.param(p).unwrap().data().to_vec()).collect()
}

#[test]
fn negative_phase_estimate_is_unbiased() {
    let dem = EnergyModel::new(EnergyArch::toy_2d(), &mut stream(1, Stream::Init)).unwrap();
    let gen = GeneratorModel::new(GeneratorArch::toy_2d(), &mut stream(2, Stream::Init)).unwrap();
    let mut prior = stream(3, Stream::Prior);
    let reference = negative_phase(&dem, &gen.generate_infer(&sample_prior(40_000, 4, &mut prior)).unwrap());
    let dist = |v: &[f64]| v.iter().zip(&reference).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();

    // error of the average of B batches of 16 should shrink like 1/sqrt(B)
    let err = |batches: usize, prior: &mut deepebm::rng::Rng| {
        let mut acc = vec![0.0; reference.len()];
        for _ in 0..batches {
            let g = negative_phase(&dem, &gen.generate_infer(&sample_prior(16, 4, prior)).unwrap());
            acc.iter_mut().zip(g).for_each(|(a, v)| *a += v / batches as f64);
        }
        dist(&acc)
    };
    let trials = 8;
    let mean_err = |b: usize, prior: &mut deepebm::rng::Rng| (0..trials).map(|_| err(b, prior)).sum::<f64>() / trials as f64;
    let e4 = mean_err(4, &mut prior);
    let e64 = mean_err(64, &mut prior);
    // sqrt(64/4) = 4; allow generous slack for the finite number of trials
    assert!(e64 < e4 / 2.0, "{e4} -> {e64}");
    assert!(e64 > e4 / 8.0, "{e4} -> {e64}");
}
