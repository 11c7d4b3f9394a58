use super::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_tensor(h: usize, w: usize, t: usize, c: usize, seed: u64) -> SpatiotemporalTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    SpatiotemporalTensor::from_fn(h, w, t, c, |_, _, _, _| rng.gen_range(-1.0..1.0)).unwrap()
}

fn random_inputs(net: &NetworkGraph, seed: u64) -> (SpatiotemporalTensor, SpatiotemporalTensor) {
    let (h, w, _, _) = net.appearance_shape();
    let (_, _, t, _) = net.motion_shape();
    (
        random_tensor(h, w, 1, 3, seed),
        random_tensor(h, w, t, 2, seed.wrapping_add(1)),
    )
}

/// Independent cross-correlation: materializes the zero-padded input frame
/// and walks the kernel with explicitly nested index arithmetic. Never
/// shares code with the forward pass it checks.
#[allow(clippy::too_many_arguments)]
fn conv_oracle(
    x: &SpatiotemporalTensor,
    weights: &[f64],
    bias: &[f64],
    in_c: usize,
    out_c: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
) -> SpatiotemporalTensor {
    let (h, w, t, _) = x.shape();
    let ph = h + 2 * padding;
    let pw = w + 2 * padding;
    let mut padded = vec![0.0; ph * pw * t * in_c];
    for i in 0..h {
        for j in 0..w {
            for k in 0..t {
                for d in 0..in_c {
                    padded[(((i + padding) * pw + (j + padding)) * t + k) * in_c + d] =
                        x.get(i, j, k, d);
                }
            }
        }
    }
    let out_h = (ph - kh) / stride + 1;
    let out_w = (pw - kw) / stride + 1;
    let mut w4 = vec![vec![vec![vec![0.0; kw]; kh]; in_c]; out_c];
    let mut flat = 0;
    for oc in 0..out_c {
        for ic in 0..in_c {
            for ky in 0..kh {
                for kx in 0..kw {
                    w4[oc][ic][ky][kx] = weights[flat];
                    flat += 1;
                }
            }
        }
    }
    SpatiotemporalTensor::from_fn(out_h, out_w, t, out_c, |oy, ox, k, oc| {
        let mut acc = bias[oc];
        for ic in 0..in_c {
            for ky in 0..kh {
                for kx in 0..kw {
                    let iy = oy * stride + ky;
                    let ix = ox * stride + kx;
                    acc += w4[oc][ic][ky][kx] * padded[((iy * pw + ix) * t + k) * in_c + ic];
                }
            }
        }
        acc
    })
    .unwrap()
}

#[test]
fn identity_kernel_conv_is_identity() {
    let spec = NetworkSpec::new(4, 4, 1).conv2d("id", APPEARANCE_INPUT, 3, 3, 1, 1, 0);
    let mut net = NetworkGraph::zero_init(&spec).unwrap();
    // 1x1 kernel = 3x3 identity matrix over channels.
    let mut w = vec![0.0; 9];
    for d in 0..3 {
        w[d * 3 + d] = 1.0;
    }
    net.set_conv2d_weights("id", w, vec![0.0; 3]).unwrap();
    let (x_app, x_mot) = random_inputs(&net, 3);
    let acts = net.forward(&x_app, &x_mot).unwrap();
    assert_eq!(acts["id"], x_app);
}

#[test]
fn relu_of_all_negative_input_is_zero() {
    let spec = NetworkSpec::new(3, 3, 1).relu("r", APPEARANCE_INPUT);
    let net = NetworkGraph::zero_init(&spec).unwrap();
    let x_app = SpatiotemporalTensor::from_fn(3, 3, 1, 3, |_, _, _, _| -2.5).unwrap();
    let x_mot = SpatiotemporalTensor::zeros(3, 3, 1, 2).unwrap();
    let acts = net.forward(&x_app, &x_mot).unwrap();
    assert!(acts["r"].data().iter().all(|&v| v == 0.0));
}

#[test]
fn conv_forward_matches_brute_force_oracle() {
    for seed in [1u64, 2, 3] {
        for &(kernel, stride, padding) in &[(3usize, 1usize, 0usize), (3, 1, 1), (3, 2, 1), (1, 1, 0)] {
            let spec = NetworkSpec::new(8, 8, 1).conv2d(
                "c",
                APPEARANCE_INPUT,
                3,
                2,
                kernel,
                stride,
                padding,
            );
            let net = NetworkGraph::seeded_init(&spec, seed).unwrap();
            let (x_app, x_mot) = random_inputs(&net, seed + 100);
            let acts = net.forward(&x_app, &x_mot).unwrap();
            let LayerWeights::Conv { weights, bias } = &net.layers()[0].weights else {
                panic!("conv weights expected")
            };
            let expect = conv_oracle(&x_app, weights, bias, 3, 2, kernel, kernel, stride, padding);
            assert_eq!(acts["c"].shape(), expect.shape());
            for (a, b) in acts["c"].data().iter().zip(expect.data()) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b} (k={kernel} s={stride} p={padding})");
            }
        }
    }
}

#[test]
fn motion_input_is_stacked_frame_major() {
    // Identity 1x1 conv over the stacked motion channels exposes the
    // stacking order: channel 2k + d holds frame k, component d.
    let frames = 3;
    let spec = NetworkSpec::new(2, 2, frames).conv2d("id", MOTION_INPUT, 6, 6, 1, 1, 0);
    let mut net = NetworkGraph::zero_init(&spec).unwrap();
    let mut w = vec![0.0; 36];
    for d in 0..6 {
        w[d * 6 + d] = 1.0;
    }
    net.set_conv2d_weights("id", w, vec![0.0; 6]).unwrap();
    let x_app = SpatiotemporalTensor::zeros(2, 2, 1, 3).unwrap();
    let x_mot = random_tensor(2, 2, frames, 2, 9);
    let acts = net.forward(&x_app, &x_mot).unwrap();
    for i in 0..2 {
        for j in 0..2 {
            for k in 0..frames {
                for d in 0..2 {
                    assert_eq!(acts["id"].get(i, j, 0, 2 * k + d), x_mot.get(i, j, k, d));
                }
            }
        }
    }
}

#[test]
fn linear_conv_gradient_is_kernel_pattern_independent_of_input() {
    let spec = NetworkSpec::new(3, 3, 1).conv2d("c", APPEARANCE_INPUT, 3, 1, 3, 1, 0);
    let net = NetworkGraph::seeded_init(&spec, 5).unwrap();
    let unit = UnitRef::new("c", 0);
    let (xa1, xm1) = random_inputs(&net, 10);
    let (xa2, xm2) = random_inputs(&net, 20);
    let (g1, gm1) = net.input_gradient(&unit, &xa1, &xm1).unwrap();
    let (g2, _) = net.input_gradient(&unit, &xa2, &xm2).unwrap();
    assert_eq!(g1, g2);
    // Single output position, 3x3 input: the gradient IS the kernel.
    let LayerWeights::Conv { weights, .. } = &net.layers()[0].weights else {
        panic!()
    };
    for ky in 0..3 {
        for kx in 0..3 {
            for ic in 0..3 {
                let w = weights[kx + 3 * (ky + 3 * ic)];
                assert!((g1.get(ky, kx, 0, ic) - w).abs() < 1e-12);
            }
        }
    }
    // Motion never feeds this unit.
    assert!(gm1.data().iter().all(|&v| v == 0.0));
}

#[test]
fn appearance_only_unit_has_zero_motion_gradient() {
    let spec = NetworkSpec::new(6, 6, 2)
        .conv2d("app_c", APPEARANCE_INPUT, 3, 4, 3, 1, 1)
        .relu("app_r", "app_c")
        .conv2d("mot_c", MOTION_INPUT, 4, 4, 3, 1, 1)
        .concat_fusion("fuse", &["app_r", "mot_c"]);
    let net = NetworkGraph::seeded_init(&spec, 7).unwrap();
    let (x_app, x_mot) = random_inputs(&net, 30);
    let (_, g_mot) = net
        .input_gradient(&UnitRef::new("app_r", 2), &x_app, &x_mot)
        .unwrap();
    assert!(g_mot.data().iter().all(|&v| v == 0.0));
    // Through the fusion, a motion-side channel reaches the motion input.
    let (g_app2, g_mot2) = net
        .input_gradient(&UnitRef::new("fuse", 5), &x_app, &x_mot)
        .unwrap();
    assert!(g_mot2.data().iter().any(|&v| v != 0.0));
    assert!(g_app2.data().iter().all(|&v| v == 0.0));
}

#[test]
fn unknown_unit_is_rejected() {
    let spec = NetworkSpec::new(3, 3, 1).relu("r", APPEARANCE_INPUT);
    let net = NetworkGraph::zero_init(&spec).unwrap();
    let (x_app, x_mot) = random_inputs(&net, 1);
    assert!(matches!(
        net.input_gradient(&UnitRef::new("nope", 0), &x_app, &x_mot),
        Err(Error::UnknownUnit { .. })
    ));
    assert!(matches!(
        net.input_gradient(&UnitRef::new("r", 99), &x_app, &x_mot),
        Err(Error::UnknownUnit { .. })
    ));
}

#[test]
fn maxpool_routes_gradient_to_first_tied_maximum() {
    let spec = NetworkSpec::new(2, 2, 1).maxpool2d("p", APPEARANCE_INPUT, 2, 2);
    let net = NetworkGraph::zero_init(&spec).unwrap();
    // All four positions tie on channel 0.
    let x_app = SpatiotemporalTensor::from_fn(2, 2, 1, 3, |_, _, _, d| if d == 0 { 7.0 } else { 0.0 })
        .unwrap();
    let x_mot = SpatiotemporalTensor::zeros(2, 2, 1, 2).unwrap();
    let (g_app, _) = net
        .input_gradient(&UnitRef::new("p", 0), &x_app, &x_mot)
        .unwrap();
    assert_eq!(g_app.get(0, 0, 0, 0), 1.0);
    assert_eq!(g_app.get(0, 1, 0, 0), 0.0);
    assert_eq!(g_app.get(1, 0, 0, 0), 0.0);
    assert_eq!(g_app.get(1, 1, 0, 0), 0.0);
}

#[test]
fn receptive_field_examples() {
    let spec = NetworkSpec::new(32, 32, 1).conv2d("c", APPEARANCE_INPUT, 3, 2, 3, 1, 0);
    let net = NetworkGraph::zero_init(&spec).unwrap();
    assert_eq!(net.receptive_field("c").unwrap(), 3);
    assert_eq!(net.layer_stride("c").unwrap(), 1);

    let spec = NetworkSpec::new(32, 32, 1)
        .conv2d("c1", APPEARANCE_INPUT, 3, 2, 3, 1, 0)
        .maxpool2d("p", "c1", 2, 2)
        .conv2d("c2", "p", 2, 2, 3, 1, 0);
    let net = NetworkGraph::zero_init(&spec).unwrap();
    assert_eq!(net.receptive_field("c2").unwrap(), 8);
    assert_eq!(net.layer_stride("c2").unwrap(), 2);

    let spec = NetworkSpec::new(32, 32, 1)
        .maxpool2d("p1", APPEARANCE_INPUT, 2, 2)
        .maxpool2d("p2", "p1", 2, 2)
        .fully_connected("fc", "p2", 5);
    let net = NetworkGraph::zero_init(&spec).unwrap();
    assert_eq!(net.layer_stride("p2").unwrap(), 4);
    assert_eq!(net.receptive_field("fc").unwrap(), 32);
    assert_eq!(net.layer_stride("fc").unwrap(), 32);

    assert!(matches!(
        net.receptive_field("ghost"),
        Err(Error::UnknownLayer { .. })
    ));
}

#[test]
fn calibrate_flags_dead_units_on_zero_input() {
    let spec = NetworkSpec::new(3, 3, 1)
        .conv2d("c", APPEARANCE_INPUT, 3, 2, 3, 1, 1)
        .relu("r", "c");
    let net = NetworkGraph::seeded_init(&spec, 3).unwrap();
    let x_app = SpatiotemporalTensor::zeros(3, 3, 1, 3).unwrap();
    let x_mot = SpatiotemporalTensor::zeros(3, 3, 1, 2).unwrap();
    let table = net.calibrate([(&x_app, &x_mot)]).unwrap();
    assert_eq!(table.len(), 4);
    assert_eq!(table.flagged_count(), 4);
    for (unit, amax) in table.iter() {
        assert_eq!(amax, 1.0);
        assert!(table.is_flagged(unit));
    }
}

#[test]
fn calibrate_records_passthrough_maximum() {
    let spec = NetworkSpec::new(2, 2, 1).conv2d("id", APPEARANCE_INPUT, 3, 3, 1, 1, 0);
    let mut net = NetworkGraph::zero_init(&spec).unwrap();
    let mut w = vec![0.0; 9];
    for d in 0..3 {
        w[d * 3 + d] = 1.0;
    }
    net.set_conv2d_weights("id", w, vec![0.0; 3]).unwrap();
    let x_app = SpatiotemporalTensor::from_fn(2, 2, 1, 3, |i, j, _, d| {
        if (i, j, d) == (1, 0, 1) {
            7.25
        } else {
            0.5
        }
    })
    .unwrap();
    let x_mot = SpatiotemporalTensor::zeros(2, 2, 1, 2).unwrap();
    let table = net.calibrate([(&x_app, &x_mot)]).unwrap();
    assert_eq!(table.get(&UnitRef::new("id", 1)), Some(7.25));
    assert_eq!(table.get(&UnitRef::new("id", 0)), Some(0.5));
    assert!(!table.is_flagged(&UnitRef::new("id", 1)));
}

#[test]
fn calibrate_matches_exhaustive_forward_scan() {
    let spec = NetworkSpec::new(6, 6, 2)
        .conv2d("ac", APPEARANCE_INPUT, 3, 4, 3, 1, 1)
        .relu("ar", "ac")
        .conv2d("mc", MOTION_INPUT, 4, 4, 3, 1, 1)
        .relu("mr", "mc")
        .concat_fusion("fuse", &["ar", "mr"])
        .fully_connected("fc", "fuse", 3);
    let net = NetworkGraph::seeded_init(&spec, 11).unwrap();
    let pairs: Vec<(SpatiotemporalTensor, SpatiotemporalTensor)> = (0..50)
        .map(|s| {
            (
                random_tensor(6, 6, 1, 3, 1000 + s),
                random_tensor(6, 6, 2, 2, 2000 + s),
            )
        })
        .collect();
    let table = net
        .calibrate(pairs.iter().map(|(a, m)| (a, m)))
        .unwrap();
    // Recompute by scanning every recorded forward map directly.
    for layer in net.layer_names() {
        let channels = net.output_channels(layer).unwrap();
        for ch in 0..channels {
            let mut best = f64::NEG_INFINITY;
            for (a, m) in &pairs {
                let acts = net.forward(a, m).unwrap();
                let act = &acts[layer];
                for &v in act.data()[ch..].iter().step_by(act.channels()) {
                    best = best.max(v);
                }
            }
            let unit = UnitRef::new(layer, ch);
            if best > 0.0 {
                assert_eq!(table.get(&unit), Some(best), "unit {unit}");
                assert!(!table.is_flagged(&unit));
            } else {
                assert_eq!(table.get(&unit), Some(1.0), "unit {unit}");
                assert!(table.is_flagged(&unit));
            }
        }
    }
}

#[test]
fn calibrate_rejects_empty_input_sequence() {
    let spec = NetworkSpec::new(3, 3, 1).relu("r", APPEARANCE_INPUT);
    let net = NetworkGraph::zero_init(&spec).unwrap();
    let empty: Vec<(&SpatiotemporalTensor, &SpatiotemporalTensor)> = Vec::new();
    assert!(matches!(
        net.calibrate(empty),
        Err(Error::EmptyCalibrationSet)
    ));
}

#[test]
fn calibration_table_round_trips_through_kv() {
    let mut table = CalibrationTable::new("test inputs");
    table.insert(UnitRef::new("conv1", 0), 3.5, false);
    table.insert(UnitRef::new("conv1", 1), 1.0, true);
    table.insert(UnitRef::new("fc", 2), 0.125, false);
    let text = table.to_kv_text();
    let back = CalibrationTable::from_kv_text(&text, "mem").unwrap();
    assert_eq!(table, back);
}

#[test]
fn seeded_init_is_deterministic() {
    let spec = NetworkSpec::new(8, 8, 2)
        .conv2d("c", APPEARANCE_INPUT, 3, 4, 3, 1, 1)
        .fully_connected("fc", "c", 5);
    let a = NetworkGraph::seeded_init(&spec, 42).unwrap();
    let b = NetworkGraph::seeded_init(&spec, 42).unwrap();
    for (la, lb) in a.layers().iter().zip(b.layers()) {
        assert_eq!(la.weights, lb.weights);
    }
    let c = NetworkGraph::seeded_init(&spec, 43).unwrap();
    assert_ne!(a.layers()[0].weights, c.layers()[0].weights);
}

#[test]
fn weight_round_trip_preserves_forward_outputs() {
    let spec = NetworkSpec::new(8, 8, 2)
        .conv2d("ac", APPEARANCE_INPUT, 3, 4, 3, 1, 1)
        .relu("ar", "ac")
        .maxpool2d("ap", "ar", 2, 2)
        .conv2d("mc", MOTION_INPUT, 4, 4, 3, 2, 1)
        .sum_fusion("fuse", &["ap", "mc"])
        .fully_connected("fc", "fuse", 6);
    let net = NetworkGraph::seeded_init(&spec, 17).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_weights(&net, dir.path()).unwrap();
    let loaded = load_weights(dir.path()).unwrap();
    let (x_app, x_mot) = random_inputs(&net, 55);
    let a = net.forward(&x_app, &x_mot).unwrap();
    let b = loaded.forward(&x_app, &x_mot).unwrap();
    for name in net.layer_names() {
        assert_eq!(a[name], b[name], "layer {name}");
    }
}

#[test]
fn mismatched_channel_counts_are_rejected_with_layer_name() {
    let spec = NetworkSpec::new(8, 8, 1)
        .conv2d("first", APPEARANCE_INPUT, 3, 4, 3, 1, 1)
        .conv2d("second", "first", 7, 4, 3, 1, 1); // first produces 4, not 7
    match NetworkGraph::seeded_init(&spec, 1) {
        Err(Error::InvalidNetwork { layer, .. }) => assert_eq!(layer, "second"),
        other => panic!("expected validation error, got {other:?}"),
    }
}

#[test]
fn two_cross_stream_fusions_are_rejected() {
    let spec = NetworkSpec::new(8, 8, 1)
        .conv2d("ac", APPEARANCE_INPUT, 3, 2, 3, 1, 1)
        .conv2d("mc", MOTION_INPUT, 2, 2, 3, 1, 1)
        .sum_fusion("f1", &["ac", "mc"])
        .concat_fusion("f2", &["ac", "mc"]);
    assert!(matches!(
        NetworkGraph::zero_init(&spec),
        Err(Error::InvalidNetwork { .. })
    ));
}

#[test]
fn forward_rejects_wrong_input_shapes() {
    let spec = NetworkSpec::new(4, 4, 2).relu("r", APPEARANCE_INPUT);
    let net = NetworkGraph::zero_init(&spec).unwrap();
    let bad_app = SpatiotemporalTensor::zeros(5, 4, 1, 3).unwrap();
    let x_mot = SpatiotemporalTensor::zeros(4, 4, 2, 2).unwrap();
    assert!(matches!(
        net.forward(&bad_app, &x_mot),
        Err(Error::ShapeMismatch { .. })
    ));
}

#[test]
fn spec_kv_round_trip() {
    let spec = NetworkSpec::new(16, 16, 4)
        .conv2d("ac1", APPEARANCE_INPUT, 3, 8, 3, 1, 1)
        .relu("ar1", "ac1")
        .maxpool2d("ap1", "ar1", 2, 2)
        .conv2d("mc1", MOTION_INPUT, 8, 8, 3, 1, 1)
        .relu("mr1", "mc1")
        .maxpool2d("mp1", "mr1", 2, 2)
        .concat_fusion("fuse", &["ap1", "mp1"])
        .fully_connected("fc", "fuse", 10);
    let text = spec.to_kv_text();
    let back = io::spec_from_kv_text(&text, "mem").unwrap();
    assert_eq!(spec, back);
}

#[test]
fn forward_is_deterministic() {
    let spec = NetworkSpec::new(8, 8, 2)
        .conv2d("c", APPEARANCE_INPUT, 3, 4, 3, 1, 1)
        .relu("r", "c")
        .maxpool2d("p", "r", 2, 2);
    let net = NetworkGraph::seeded_init(&spec, 23).unwrap();
    let (x_app, x_mot) = random_inputs(&net, 77);
    let a = net.forward(&x_app, &x_mot).unwrap();
    let b = net.forward(&x_app, &x_mot).unwrap();
    for name in net.layer_names() {
        assert_eq!(a[name].data(), b[name].data());
    }
}
