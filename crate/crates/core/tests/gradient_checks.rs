//! Finite-difference cross-checks of every analytic gradient, and
//! perturbation probing of the receptive-field arithmetic.

use actmax_core::network::{NetworkGraph, NetworkSpec, UnitRef, APPEARANCE_INPUT, MOTION_INPUT};
use actmax_core::regularizers::{
    r_b_gradient, r_b_value, r_tv_gradient, r_tv_value, RegularizerConfig,
};
use actmax_core::tensor::{finite_difference_gradient, SpatiotemporalTensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_tensor(h: usize, w: usize, t: usize, c: usize, scale: f64, seed: u64) -> SpatiotemporalTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    SpatiotemporalTensor::from_fn(h, w, t, c, |_, _, _, _| rng.gen_range(-scale..scale)).unwrap()
}

/// Largest elementwise deviation, relative to the scale of the gradients.
fn max_rel_err(a: &SpatiotemporalTensor, b: &SpatiotemporalTensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    let scale = a.max_abs().max(b.max_abs()).max(1e-12);
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
        / scale
}

#[test]
fn energy_gradient_matches_finite_differences_on_20_seeds() {
    let cfg = RegularizerConfig {
        bound: 160.0,
        alpha: 3.0,
        kappa: 0.0,
        chi: 0.0,
        lambda_b: 0.0,
        lambda_tv: 0.0,
        tv_scale: 160.0 / 6.5,
    };
    for seed in 0..20 {
        let x = random_tensor(5, 4, 3, 2, 3.0, 900 + seed);
        let analytic = r_b_gradient(&x, &cfg).unwrap();
        let fd = finite_difference_gradient(|p| r_b_value(p, &cfg), &x, 1e-6).unwrap();
        let err = max_rel_err(&analytic, &fd);
        assert!(err <= 1e-6, "seed {seed}: energy gradient rel err {err}");
    }
}

#[test]
fn tv_gradient_matches_finite_differences_on_20_seeds() {
    for seed in 0..20 {
        let (kappa, chi) = match seed % 4 {
            0 => (1.0, 5.0),
            1 => (1.0, 0.0),
            2 => (0.7, 0.7),
            _ => (0.0, 2.0),
        };
        let x = random_tensor(6, 6, 4, 2, 2.0, 1700 + seed);
        let analytic = r_tv_gradient(&x, kappa, chi);
        let fd = finite_difference_gradient(|p| r_tv_value(p, kappa, chi), &x, 1e-5).unwrap();
        let err = max_rel_err(&analytic, &fd);
        assert!(err <= 1e-6, "seed {seed}: tv gradient rel err {err}");
    }
}

#[test]
fn tv_gradient_matches_fd_on_spec_shape() {
    // 6x6x3x2 at kappa = chi = 1: the finite-difference probe is the oracle
    // for the analytic adjoint.
    let x = random_tensor(6, 6, 3, 2, 2.0, 4242);
    let analytic = r_tv_gradient(&x, 1.0, 1.0);
    let fd = finite_difference_gradient(|p| r_tv_value(p, 1.0, 1.0), &x, 1e-5).unwrap();
    assert!(max_rel_err(&analytic, &fd) <= 1e-5);
}

struct StreamGrads {
    app: SpatiotemporalTensor,
    mot: SpatiotemporalTensor,
}

/// Finite-difference gradient of a unit's channel sum with respect to both
/// input streams, probing one stream while holding the other fixed.
fn fd_unit_gradient(
    net: &NetworkGraph,
    unit: &UnitRef,
    x_app: &SpatiotemporalTensor,
    x_mot: &SpatiotemporalTensor,
    step: f64,
) -> StreamGrads {
    let objective_app = |probe: &SpatiotemporalTensor| {
        let acts = net.forward(probe, x_mot).unwrap();
        acts[&unit.layer].channel_sum(unit.channel).unwrap()
    };
    let objective_mot = |probe: &SpatiotemporalTensor| {
        let acts = net.forward(x_app, probe).unwrap();
        acts[&unit.layer].channel_sum(unit.channel).unwrap()
    };
    StreamGrads {
        app: finite_difference_gradient(objective_app, x_app, step).unwrap(),
        mot: finite_difference_gradient(objective_mot, x_mot, step).unwrap(),
    }
}

fn check_all_units_against_fd(net: &NetworkGraph, seed: u64, tolerance: f64) {
    let (h, w, _, _) = net.appearance_shape();
    let t = net.frames();
    let x_app = random_tensor(h, w, 1, 3, 1.0, seed);
    let x_mot = random_tensor(h, w, t, 2, 1.0, seed + 1);
    for layer in net.layer_names().map(str::to_string).collect::<Vec<_>>() {
        let channels = net.output_channels(&layer).unwrap();
        // One representative channel per layer keeps the probe count sane.
        for channel in [0, channels - 1] {
            let unit = UnitRef::new(layer.clone(), channel);
            let (g_app, g_mot) = net.input_gradient(&unit, &x_app, &x_mot).unwrap();
            let fd = fd_unit_gradient(net, &unit, &x_app, &x_mot, 1e-5);
            let err_app = max_rel_err(&g_app, &fd.app);
            let err_mot = max_rel_err(&g_mot, &fd.mot);
            assert!(
                err_app <= tolerance && err_mot <= tolerance,
                "unit {unit}: rel err app {err_app}, mot {err_mot}"
            );
        }
    }
}

#[test]
fn conv_relu_net_gradient_matches_finite_differences() {
    let spec = NetworkSpec::new(6, 6, 2)
        .conv2d("c", APPEARANCE_INPUT, 3, 4, 3, 1, 1)
        .relu("r", "c");
    let net = NetworkGraph::seeded_init(&spec, 51).unwrap();
    check_all_units_against_fd(&net, 5100, 1e-5);
}

#[test]
fn every_layer_kind_gradient_matches_finite_differences() {
    let concat_spec = NetworkSpec::new(8, 8, 2)
        .conv2d("ac", APPEARANCE_INPUT, 3, 4, 3, 1, 1)
        .relu("ar", "ac")
        .maxpool2d("ap", "ar", 2, 2)
        .conv2d("mc", MOTION_INPUT, 4, 4, 3, 1, 1)
        .relu("mr", "mc")
        .maxpool2d("mp", "mr", 2, 2)
        .concat_fusion("cat", &["ap", "mp"])
        .fully_connected("fc", "cat", 5);
    let net = NetworkGraph::seeded_init(&concat_spec, 52).unwrap();
    check_all_units_against_fd(&net, 5200, 1e-5);

    let sum_spec = NetworkSpec::new(8, 8, 2)
        .conv2d("ac", APPEARANCE_INPUT, 3, 4, 3, 2, 1)
        .conv2d("mc", MOTION_INPUT, 4, 4, 3, 2, 1)
        .sum_fusion("add", &["ac", "mc"])
        .relu("r", "add");
    let net = NetworkGraph::seeded_init(&sum_spec, 53).unwrap();
    check_all_units_against_fd(&net, 5300, 1e-5);
}

/// Forward-probing helpers for receptive fields: positive weights and a
/// positive baseline keep every in-cone path strictly monotone, so a large
/// positive bump at an input pixel changes an output position iff the pixel
/// feeds it.
fn positive_conv_weights(
    rng: &mut ChaCha8Rng,
    in_c: usize,
    out_c: usize,
    k: usize,
) -> (Vec<f64>, Vec<f64>) {
    let weights = (0..out_c * in_c * k * k)
        .map(|_| rng.gen_range(0.1..1.0))
        .collect();
    (weights, vec![0.0; out_c])
}

fn probe_cone(
    net: &NetworkGraph,
    layer: &str,
    out_pos: (usize, usize),
) -> Vec<(usize, usize)> {
    let (h, w, _, _) = net.appearance_shape();
    let t = net.frames();
    let base_app = SpatiotemporalTensor::from_fn(h, w, 1, 3, |_, _, _, _| 0.5).unwrap();
    let x_mot = SpatiotemporalTensor::from_fn(h, w, t, 2, |_, _, _, _| 0.5).unwrap();
    let base_out = net.forward(&base_app, &x_mot).unwrap()[layer].clone();
    let mut cone = Vec::new();
    for py in 0..h {
        for px in 0..w {
            let mut bumped = base_app.clone();
            bumped.set(py, px, 0, 0, 0.5 + 1e3);
            let out = net.forward(&bumped, &x_mot).unwrap()[layer].clone();
            let changed = (0..out.channels())
                .any(|d| out.get(out_pos.0, out_pos.1, 0, d) != base_out.get(out_pos.0, out_pos.1, 0, d));
            if changed {
                cone.push((py, px));
            }
        }
    }
    cone
}

fn cone_extent(cone: &[(usize, usize)]) -> (usize, usize, usize, usize) {
    let min_y = cone.iter().map(|p| p.0).min().unwrap();
    let max_y = cone.iter().map(|p| p.0).max().unwrap();
    let min_x = cone.iter().map(|p| p.1).min().unwrap();
    let max_x = cone.iter().map(|p| p.1).max().unwrap();
    (min_y, max_y, min_x, max_x)
}

#[test]
fn receptive_field_matches_perturbation_probing() {
    // The worked example: conv3 -> pool2/2 -> conv3 has field 8, stride 2.
    let spec = NetworkSpec::new(20, 20, 1)
        .conv2d("c1", APPEARANCE_INPUT, 3, 2, 3, 1, 0)
        .maxpool2d("p", "c1", 2, 2)
        .conv2d("c2", "p", 2, 2, 3, 1, 0);
    let mut net = NetworkGraph::zero_init(&spec).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (w1, b1) = positive_conv_weights(&mut rng, 3, 2, 3);
    net.set_conv2d_weights("c1", w1, b1).unwrap();
    let (w2, b2) = positive_conv_weights(&mut rng, 2, 2, 3);
    net.set_conv2d_weights("c2", w2, b2).unwrap();

    assert_eq!(net.receptive_field("c2").unwrap(), 8);
    assert_eq!(net.layer_stride("c2").unwrap(), 2);

    let cone = probe_cone(&net, "c2", (2, 2));
    let (min_y, max_y, min_x, max_x) = cone_extent(&cone);
    assert_eq!(max_y - min_y + 1, 8);
    assert_eq!(max_x - min_x + 1, 8);

    // Probing the neighbouring output position shifts the cone by the
    // cumulative stride.
    let next = probe_cone(&net, "c2", (2, 3));
    let (_, _, next_min_x, _) = cone_extent(&next);
    assert_eq!(next_min_x - min_x, 2);
}

#[test]
fn receptive_field_of_fully_connected_is_global() {
    let spec = NetworkSpec::new(6, 6, 1)
        .conv2d("c", APPEARANCE_INPUT, 3, 2, 3, 1, 1)
        .fully_connected("fc", "c", 4);
    let mut net = NetworkGraph::zero_init(&spec).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (w, b) = positive_conv_weights(&mut rng, 3, 2, 3);
    net.set_conv2d_weights("c", w, b).unwrap();
    let dense_in = 6 * 6 * 2;
    let dense_w = (0..4 * dense_in).map(|_| rng.gen_range(0.1..1.0)).collect();
    net.set_fully_connected_weights("fc", dense_w, vec![0.0; 4])
        .unwrap();

    assert_eq!(net.receptive_field("fc").unwrap(), 6);
    let cone = probe_cone(&net, "fc", (0, 0));
    assert_eq!(cone.len(), 36, "every input pixel reaches the dense layer");
}
