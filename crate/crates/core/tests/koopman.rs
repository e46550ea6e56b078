mod common;

use knr::controller::{knr_eval, predict_linear, PredictorKind};
use knr::koopman::{
    collect_snapshots, edmd_fit, read_model, to_continuous, write_model, CollectionConfig,
    FitOptions, LiftedLinearModel, SnapshotDataset,
};
use knr::linalg::{expm, input_integral, Matrix};
use knr::systems::{self, BasisDictionary};

use common::{random_matrix, rel_frob, rng, synthetic_dataset, synthetic_plant};

fn vdp_model(seed: u64) -> LiftedLinearModel {
    let cfg = CollectionConfig {
        seed,
        ..CollectionConfig::for_system("vdp").unwrap()
    };
    let data = collect_snapshots(&systems::vdp(), &cfg).unwrap();
    edmd_fit(&data, &systems::vdp_basis(), &FitOptions::default()).unwrap()
}

fn mean_sq_one_step(model: &LiftedLinearModel, data: &SnapshotDataset) -> f64 {
    let total: f64 = data
        .pairs
        .iter()
        .map(|p| {
            let z = model.basis.lift(&p.x, &p.u);
            let next = model.basis.lift(&p.x_next, &p.u);
            model
                .step(&z, &p.u)
                .iter()
                .zip(&next)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
        })
        .sum();
    total / data.len() as f64
}

#[test]
fn synthetic_plant_is_recovered() {
    let (a0, b0) = synthetic_plant(3, 4, 2);
    let data = synthetic_dataset(&a0, &b0, 500, 4);
    for normalize in [true, false] {
        let opts = FitOptions {
            normalize,
            ..FitOptions::default()
        };
        let model = edmd_fit(&data, &BasisDictionary::identity(4, 2), &opts).unwrap();
        assert!((&model.a - &a0).amax() <= 1e-8);
        assert!((&model.b - &b0).amax() <= 1e-8);
        assert!(model.diagnostics.residual <= 1e-16);
        assert!(!model.diagnostics.rank_deficient);
    }
}

#[test]
fn lifted_step_reproduces_the_synthetic_successor() {
    let (a0, b0) = synthetic_plant(5, 3, 1);
    let data = synthetic_dataset(&a0, &b0, 500, 6);
    let model = edmd_fit(
        &data,
        &BasisDictionary::identity(3, 1),
        &FitOptions::default(),
    )
    .unwrap();
    for p in &data.pairs {
        let next = model.step(&model.basis.lift(&p.x, &p.u), &p.u);
        for (a, b) in next.iter().zip(&p.x_next) {
            assert!((a - b).abs() <= 1e-6);
        }
    }
}

#[test]
fn knr_prediction_matches_continuous_truth() {
    let mut r = rng(9);
    let a_c = random_matrix(&mut r, 3, 3) - Matrix::identity(3, 3) * 1.5;
    let b_c = random_matrix(&mut r, 3, 2);
    let dt = 0.01;
    let a0 = expm(&(&a_c * dt)).unwrap();
    let b0 = input_integral(&a_c, dt).unwrap() * &b_c;
    let data = synthetic_dataset(&a0, &b0, 500, 10);
    let model = edmd_fit(
        &data,
        &BasisDictionary::identity(3, 2),
        &FitOptions::default(),
    )
    .unwrap();
    let rows = [0, 2];
    let c = systems::selection_matrix(&rows, 3);
    for (x, u) in [
        ([0.3, -0.2, 1.0], [0.5, -1.0]),
        ([1.0, 1.0, -1.0], [0.0, 2.0]),
    ] {
        let truth = predict_linear(&a_c, &b_c, &c, &x, &u, 0.15).unwrap();
        for kind in [
            PredictorKind::KoopmanDiscrete,
            PredictorKind::KoopmanContinuous,
        ] {
            let k = knr_eval(&model, &x, &u, 0.15, &rows, kind).unwrap();
            for (a, b) in k.g.iter().zip(&truth.g) {
                assert!((a - b).abs() <= 1e-6, "{kind:?}");
            }
            assert!((&k.dg_du - &truth.dg_du).amax() <= 1e-6, "{kind:?}");
        }
    }
}

#[test]
fn discrete_and_continuous_predictors_agree() {
    let model = vdp_model(1);
    let cont = to_continuous(&model).unwrap();
    assert!(cont.diagnostics.roundtrip_error.unwrap() <= 1e-8);
    for (x, u) in [
        ([0.1, -0.4], [0.3]),
        ([-0.8, 0.5], [-1.5]),
        ([0.0, 0.0], [0.0]),
    ] {
        let d = knr_eval(&model, &x, &u, 0.15, &[0], PredictorKind::KoopmanDiscrete).unwrap();
        let c = knr_eval(&model, &x, &u, 0.15, &[0], PredictorKind::KoopmanContinuous).unwrap();
        assert!((d.g[0] - c.g[0]).abs() <= 1e-6);
        assert!((&d.dg_du - &c.dg_du).amax() <= 1e-6);
    }
}

#[test]
fn held_out_error_generalizes() {
    // Training residual and held-out error are both mean squared one-step
    // errors of the lifted coordinates.
    for seed in [2, 3, 4] {
        let model = vdp_model(seed);
        let fresh = CollectionConfig {
            seed: seed + 1000,
            ..CollectionConfig::for_system("vdp").unwrap()
        };
        let held_out = collect_snapshots(&systems::vdp(), &fresh).unwrap();
        let err = mean_sq_one_step(&model, &held_out);
        assert!(
            err <= 2.0 * model.diagnostics.residual,
            "{err} vs {}",
            model.diagnostics.residual
        );
    }
}

#[test]
fn identical_seeds_give_identical_model_files() {
    let write = |m: &LiftedLinearModel| {
        let mut out = Vec::new();
        write_model(m, &mut out).unwrap();
        out
    };
    let a = write(&vdp_model(7));
    assert_eq!(a, write(&vdp_model(7)));
    assert_ne!(a, write(&vdp_model(8)));
    let back = read_model(a.as_slice()).unwrap();
    assert_eq!(write(&back), a);
}

#[test]
fn car_model_propagates_input_through_the_lift() {
    // Straight drive from heading 0: the input enters x only through the
    // input-dependent observables, so dg/du must not vanish.
    let cfg = CollectionConfig::for_system("car").unwrap();
    let car = systems::car(Default::default()).unwrap();
    let data = collect_snapshots(&car, &cfg).unwrap();
    let model = edmd_fit(&data, &systems::car_basis(), &FitOptions::default()).unwrap();
    let eval = knr_eval(
        &model,
        &[0.0, 0.0, 0.0],
        &[2.0, 2.0],
        0.5,
        &[0, 1],
        PredictorKind::KoopmanDiscrete,
    )
    .unwrap();
    let straight = Matrix::from_row_slice(2, 2, &[0.025, 0.025, 0.0, 0.0]);
    assert!(
        rel_frob(
            &eval.dg_du.rows(0, 1).into_owned(),
            &straight.rows(0, 1).into_owned()
        ) < 0.05
    );
    assert!((eval.g[0] - 0.1).abs() < 5e-3);
}
