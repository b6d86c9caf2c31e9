use expo_core::engine::gradcheck::{check_gradient, GradCheckOptions, GradCheckReport};
use expo_core::engine::{
    loss_and_gradient, loss_terms, Batch, Differentiable, MlpModel, OutputKind, TrainConfig,
};
use expo_core::linalg::Matrix;
use expo_core::neighborhood::NeighborhoodSpec;
use expo_core::regularize::{
    expo_fidelity_1d_loss, expo_fidelity_loss, expo_stability_loss, lp_penalty, RegularizerKind,
};
use expo_core::rng::SeedStream;
use proptest::prelude::*;
use rand::Rng;

const KINDS: [RegularizerKind; 6] = [
    RegularizerKind::None,
    RegularizerKind::ExpoFidelity,
    RegularizerKind::ExpoFidelity1d,
    RegularizerKind::ExpoStability,
    RegularizerKind::L1,
    RegularizerKind::L2,
];

struct Instance {
    model: MlpModel,
    batch: Batch,
    config: TrainConfig,
    gamma: f64,
}

fn random_instance(seed: u64, kind: RegularizerKind, logits: bool) -> Instance {
    let mut rng = SeedStream::new(seed).child(77).rng();
    let d = rng.random_range(1..=5);
    let depth = rng.random_range(1..=2);
    let mut widths = vec![d];
    for _ in 0..depth {
        widths.push(rng.random_range(1..=8));
    }
    let outputs = if logits { rng.random_range(2..=3) } else { 1 };
    widths.push(outputs);
    let slope = if rng.random_bool(0.5) { 0.01 } else { 0.2 };
    let kind_out = if logits { OutputKind::Logits } else { OutputKind::Linear };
    let mut model = MlpModel::init(&widths, slope, kind_out, seed).unwrap();
    // non-zero biases so the check is not special-cased at b = 0
    let params: Vec<f64> = model
        .parameters()
        .iter()
        .map(|&p| p + 0.1 * rng.random_range(-1.0..1.0))
        .collect();
    model.set_parameters(&params).unwrap();
    let rows = rng.random_range(1..=4);
    let features: Vec<Vec<f64>> = (0..rows)
        .map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect())
        .collect();
    let targets = (0..rows)
        .map(|_| {
            if logits {
                rng.random_range(0..outputs) as f64
            } else {
                rng.random_range(-1.0..1.0)
            }
        })
        .collect();
    let config = TrainConfig {
        regularizer: kind,
        m: Some(d + 2 + rng.random_range(2..6)),
        neighborhood: NeighborhoodSpec::gaussian(0.5),
        ..TrainConfig::default()
    };
    Instance {
        model,
        batch: Batch::new(Matrix::from_rows(&features).unwrap(), targets).unwrap(),
        config,
        gamma: rng.random_range(0.1..2.0),
    }
}

fn check_instance(inst: &Instance, stream: SeedStream) -> GradCheckReport {
    let (_, grad) = loss_and_gradient(&inst.model, &inst.batch, &inst.config, inst.gamma, stream).unwrap();
    let mut probe = inst.model.clone();
    let f = |p: &[f64]| {
        probe.set_parameters(p).unwrap();
        let (l, r) = loss_terms(&probe, &inst.batch, &inst.config, stream)?;
        Ok(l + inst.gamma * r)
    };
    check_gradient(f, &inst.model.parameters(), &grad.flatten(), &GradCheckOptions::default()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn objective_gradient_matches_finite_differences(seed in 0u64..1_000_000, k in 0usize..6, logits in any::<bool>()) {
        let inst = random_instance(seed, KINDS[k], logits);
        let report = check_instance(&inst, SeedStream::new(seed ^ 0xabc));
        prop_assert!(report.passed(), "{:?} {:?}", KINDS[k], report.failures);
        prop_assert!(report.checked > 0);
    }

    #[test]
    fn input_gradient_matches_finite_differences(seed in 0u64..1_000_000) {
        let inst = random_instance(seed, RegularizerKind::None, false);
        let x = inst.batch.features.row(0).to_vec();
        let g = inst.model.gradient_at(&x, 0).unwrap();
        let f = |x: &[f64]| Ok(inst.model.predict(x).unwrap()[0]);
        let opts = GradCheckOptions { rel_tol: 1e-5, ..GradCheckOptions::default() };
        let report = check_gradient(f, &x, &g, &opts).unwrap();
        prop_assert!(report.passed(), "{:?}", report.failures);
    }
}

#[test]
fn standalone_regularizer_gradients() {
    let spec = NeighborhoodSpec::gaussian(0.5);
    let mut total = GradCheckReport::default();
    for seed in 0..20u64 {
        let inst = random_instance(seed, RegularizerKind::None, false);
        let d = inst.model.input_width();
        let x = inst.batch.features.row(0).to_vec();
        let m = d + 5;
        let params = inst.model.parameters();
        type Reg = fn(&MlpModel, &[f64], &NeighborhoodSpec, usize, u64) -> f64;
        let regs: [(Reg, Box<dyn Fn(&MlpModel) -> Vec<f64>>); 3] = [
            (
                |mo, x, s, m, seed| expo_fidelity_loss(mo, x, s, m, &mut SeedStream::new(seed).rng()).unwrap().value(),
                Box::new(|mo: &MlpModel| {
                    expo_fidelity_loss(mo, &x, &spec, m, &mut SeedStream::new(seed).rng()).unwrap().gradient.flatten()
                }),
            ),
            (
                |mo, x, s, m, seed| expo_fidelity_1d_loss(mo, x, s, m, &mut SeedStream::new(seed).rng()).unwrap().value(),
                Box::new(|mo: &MlpModel| {
                    expo_fidelity_1d_loss(mo, &x, &spec, m, &mut SeedStream::new(seed).rng()).unwrap().gradient.flatten()
                }),
            ),
            (
                |mo, x, s, m, seed| expo_stability_loss(mo, x, s, m, &mut SeedStream::new(seed).rng()).unwrap().value(),
                Box::new(|mo: &MlpModel| {
                    expo_stability_loss(mo, &x, &spec, m, &mut SeedStream::new(seed).rng()).unwrap().gradient.flatten()
                }),
            ),
        ];
        for (value, grad) in &regs {
            let analytic = grad(&inst.model);
            let mut probe = inst.model.clone();
            let f = |p: &[f64]| {
                probe.set_parameters(p).unwrap();
                Ok(value(&probe, &x, &spec, m, seed))
            };
            total.merge(check_gradient(f, &params, &analytic, &GradCheckOptions::default()).unwrap());
        }
    }
    assert!(total.passed(), "{:?}", total.failures);
    assert!(total.skipped_nonsmooth * 20 < total.checked, "{total:?}");
}

#[test]
fn l1_gradient_is_sign_of_weights() {
    let inst = random_instance(3, RegularizerKind::L1, false);
    let g = lp_penalty(&inst.model, 1).unwrap().gradient;
    for (gw, w) in g.weights.iter().zip(inst.model.weights()) {
        for (a, b) in gw.as_slice().iter().zip(w.as_slice()) {
            assert_eq!(*a, b.signum());
        }
    }
    assert!(g.biases.iter().flatten().all(|&b| b == 0.0));
    let g2 = lp_penalty(&inst.model, 2).unwrap().gradient;
    for (gw, w) in g2.weights.iter().zip(inst.model.weights()) {
        for (a, b) in gw.as_slice().iter().zip(w.as_slice()) {
            assert_eq!(*a, 2.0 * b);
        }
    }
}

#[test]
fn fully_linear_network_has_constant_input_gradient() {
    let model = MlpModel::init(&[4, 7, 5, 1], 1.0, OutputKind::Linear, 12).unwrap();
    let g0 = model.gradient_at(&[0.0; 4], 0).unwrap();
    let g1 = model.gradient_at(&[3.0, -1.0, 2.0, 0.5], 0).unwrap();
    for (a, b) in g0.iter().zip(&g1) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn single_layer_input_gradient_is_weights() {
    let model = MlpModel::affine(&[0.5, -1.5, 2.5], 0.3);
    assert_eq!(model.gradient_at(&[1.0, 2.0, 3.0], 0).unwrap(), vec![0.5, -1.5, 2.5]);
    assert!(model.gradient_at(&[1.0, 2.0, 3.0], 1).is_err());
}

