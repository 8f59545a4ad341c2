use std::time::Instant;

use dcnet::gradcheck::{check_network, check_point, sample_point, DEFAULT_STEP, TOLERANCE};
use dcnet::im2col::ConvGeometry;
use dcnet::nn::{FullyConnected, LayerNode, Network, RegularizerSpec};
use dcnet::ops::{AngularKind, DecoupledConvLayer, MagnitudeKind, OperatorSpec, WeightingMode};
use dcnet::{Mode, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const POINTS: usize = 100;
const DIM: usize = 9;

fn all_specs() -> Vec<OperatorSpec> {
    let mut specs = Vec::new();
    for kind in MagnitudeKind::ALL {
        for angular in AngularKind::all() {
            for weighting in [WeightingMode::Unweighted, WeightingMode::LinearWeighted] {
                specs.push(OperatorSpec::preset(kind, angular).with_weighting(weighting));
            }
        }
    }
    for angular in AngularKind::all() {
        for weighting in [
            WeightingMode::NonlinearCoupled,
            WeightingMode::NonlinearSeparate,
        ] {
            specs
                .push(OperatorSpec::preset(MagnitudeKind::Tanh, angular).with_weighting(weighting));
        }
    }
    specs
}

fn label(spec: &OperatorSpec) -> String {
    format!(
        "{}/{}/{}",
        spec.magnitude.kind,
        spec.angular.name(),
        spec.weighting
    )
}

#[test]
fn every_operator_matches_central_differences() {
    let start = Instant::now();
    let specs = all_specs();
    assert_eq!(specs.len(), 7 * 4 * 2 + 4 * 2);
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut failures = Vec::new();
    for spec in &specs {
        let mut worst = 0.0f64;
        for _ in 0..POINTS {
            let (w, x, rho) = sample_point(DIM, &mut rng);
            let e = check_point(*spec, &w, &x, rho, DEFAULT_STEP).unwrap();
            assert_eq!(e.rho.is_some(), spec.rho_learnable, "{}", label(spec));
            worst = worst.max(e.combined);
        }
        if worst >= TOLERANCE {
            failures.push(format!("{}: {worst:.3e}", label(spec)));
        }
    }
    assert!(failures.is_empty(), "{failures:#?}");
    assert!(
        start.elapsed().as_secs() < 120,
        "took {:?}",
        start.elapsed()
    );
}

#[test]
fn fixed_radius_operators_also_match() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for kind in MagnitudeKind::ALL.into_iter().filter(|k| k.has_radius()) {
        let spec = OperatorSpec::preset(kind, AngularKind::Cosine).with_rho_learnable(false);
        for _ in 0..20 {
            let (w, x, rho) = sample_point(DIM, &mut rng);
            let e = check_point(spec, &w, &x, rho, DEFAULT_STEP).unwrap();
            assert!(e.rho.is_none());
            assert!(e.combined < TOLERANCE, "{kind}: {e:?}");
        }
    }
}

#[test]
fn radius_gradient_alone_away_from_saturation() {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    for kind in MagnitudeKind::ALL.into_iter().filter(|k| k.has_radius()) {
        for angular in AngularKind::all() {
            let spec = OperatorSpec::preset(kind, angular);
            let mut checked = 0;
            while checked < POINTS {
                let (w, x, rho) = sample_point(DIM, &mut rng);
                let ratio = x.iter().map(|v| v * v).sum::<f64>().sqrt() / rho;
                if !(0.2..3.0).contains(&ratio) {
                    continue;
                }
                let e = check_point(spec, &w, &x, rho, DEFAULT_STEP).unwrap();
                assert!(e.max() < TOLERANCE, "{}: {e:?}", label(&spec));
                checked += 1;
            }
        }
    }
}

fn tiny_net(spec: OperatorSpec, rng: &mut ChaCha8Rng) -> Network<f64> {
    let geom = ConvGeometry::square(3, 1).unwrap();
    let mut c1 = DecoupledConvLayer::new(2, 4, geom, spec, rng).unwrap();
    let mut c2 = DecoupledConvLayer::new(4, 4, geom, spec, rng).unwrap();
    for layer in [&mut c1, &mut c2] {
        if let Some(rho) = layer.rho.as_mut() {
            for r in rho.data_mut() {
                *r = rng.random_range(0.5..2.0);
            }
        }
    }
    let layers = vec![
        LayerNode::DecoupledConv(c1),
        LayerNode::DecoupledConv(c2),
        LayerNode::AvgPoolGlobal,
        LayerNode::FullyConnected(FullyConnected::new(4, 3, rng).unwrap()),
    ];
    Network::new(layers, RegularizerSpec::None).unwrap()
}

fn random_input(rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let data: Vec<f64> = (0..2 * 2 * 8 * 8)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    Tensor::new(&[2, 2, 8, 8], data).unwrap()
}

#[test]
fn tiny_network_gradients_per_operator() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut specs: Vec<OperatorSpec> = MagnitudeKind::ALL
        .into_iter()
        .map(|k| OperatorSpec::preset(k, AngularKind::Cosine))
        .collect();
    specs.extend(AngularKind::all().map(|a| OperatorSpec::preset(MagnitudeKind::Tanh, a)));
    specs.push(
        OperatorSpec::preset(MagnitudeKind::Tanh, AngularKind::Cosine)
            .with_weighting(WeightingMode::LinearWeighted),
    );
    specs.push(
        OperatorSpec::preset(MagnitudeKind::Tanh, AngularKind::Cosine)
            .with_weighting(WeightingMode::NonlinearCoupled),
    );
    specs.push(
        OperatorSpec::preset(MagnitudeKind::Tanh, AngularKind::Cosine)
            .with_weighting(WeightingMode::NonlinearSeparate),
    );
    for spec in specs {
        let mut net = tiny_net(spec, &mut rng);
        let x = random_input(&mut rng);
        let labels = [0, 2];
        net.forward(&x, Mode::Train).unwrap();
        let reports = check_network(&mut net, &x, &labels, DEFAULT_STEP).unwrap();
        for r in &reports {
            assert!(
                r.checked > 0,
                "{}: {} had nothing to check",
                label(&spec),
                r.name
            );
            assert!(r.passed(TOLERANCE), "{}: {r:?}", label(&spec));
        }
    }
}

#[test]
fn orthogonality_regularized_network_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let spec = OperatorSpec::preset(MagnitudeKind::Sphere, AngularKind::Cosine);
    for reg in [
        RegularizerSpec::Orthogonal(0.1),
        RegularizerSpec::Orthonormal(0.1),
    ] {
        let mut net = tiny_net(spec, &mut rng);
        net.regularizer = reg;
        let x = random_input(&mut rng);
        net.forward(&x, Mode::Train).unwrap();
        for r in check_network(&mut net, &x, &[1, 0], DEFAULT_STEP).unwrap() {
            assert!(r.passed(TOLERANCE), "{reg:?}: {r:?}");
        }
    }
}

#[test]
fn points_at_the_knee_are_excluded() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let spec = OperatorSpec::preset(MagnitudeKind::Segmented, AngularKind::Cosine)
        .with_rho_learnable(false);
    let geom = ConvGeometry::square(1, 0).unwrap();
    let mut layer = DecoupledConvLayer::new(3, 2, geom, spec, &mut rng).unwrap();
    layer.norm_ma = Some(1.0);
    let x = Tensor::new(&[1, 3, 1, 1], vec![0.6, 0.8, 0.0]).unwrap();
    let mut net = Network::new(
        vec![
            LayerNode::DecoupledConv(layer),
            LayerNode::Flatten,
            LayerNode::FullyConnected(FullyConnected::new(2, 2, &mut rng).unwrap()),
        ],
        RegularizerSpec::None,
    )
    .unwrap();
    let reports = check_network(&mut net, &x, &[1], DEFAULT_STEP).unwrap();
    let input = reports.iter().find(|r| r.name == "input").unwrap();
    assert!(input.excluded > 0, "{input:?}");
    assert!(input.passed(TOLERANCE), "{input:?}");
}
