//! Whole-pipeline gradient checks at 64-bit: analytic gradients from the
//! backward pass against central finite differences of the scalar loss,
//! plus structural checks that composition (shared branches, translation)
//! behaves like the primitives promise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ddcnet::flow::FlowField;
use ddcnet::net::{backward, forward, Activation, LayerSpec, NetworkSpec, ParamStore};
use ddcnet::tensor::{conv2d, conv2d_backward, relu, relu_backward, split_channels, Tensor4};
use ddcnet::train::{aee_loss, he_init, synth_pair_with_mode, SynthMode};

fn loss_of(
    net: &NetworkSpec,
    params: &ParamStore<f64>,
    f1: &Tensor4<f64>,
    f2: &Tensor4<f64>,
    gt: &[FlowField],
) -> f64 {
    let (out, _) = forward(net, params, f1, f2, false).unwrap();
    aee_loss(&out, gt).unwrap().0
}

/// End-to-end dL/dtheta for 50 randomly probed parameters of a tiny
/// trunk net must match central finite differences to 1e-4 relative.
#[test]
fn end_to_end_parameter_gradients_match_finite_differences() {
    let net = ddcnet::net::linear_schedule(3, 1, 4, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(71);
    let mut params = he_init::<f64>(&net, &mut rng).unwrap();
    let (f1, f2, _) = synth_pair_with_mode::<f64>(&mut rng, (16, 16), 2, SynthMode::Global).unwrap();
    // constant ground truth keeps every endpoint error away from the
    // AEE kink at zero, where finite differences are invalid
    let gt = vec![FlowField::constant(16, 16, 3.0, 2.0).unwrap()];

    let (out, cache) = forward(&net, &params, &f1, &f2, true).unwrap();
    let (_, grad_out) = aee_loss(&out, &gt).unwrap();
    let (grads, _, _) = backward(&net, &params, &cache, &grad_out).unwrap();

    let ids: Vec<u32> = params.kernels.keys().copied().collect();
    let eps = 1e-6;
    for probe in 0..50 {
        let id = ids[probe % ids.len()];
        let nw = params.kernels[&id].weights.len();
        let nb = params.kernels[&id].bias.len();
        let idx = rng.gen_range(0..nw + nb);
        let (read, write): (f64, &mut f64) = if idx < nw {
            (
                grads.grads[&id].0[idx],
                &mut params.kernels.get_mut(&id).unwrap().weights[idx],
            )
        } else {
            (
                grads.grads[&id].1[idx - nw],
                &mut params.kernels.get_mut(&id).unwrap().bias[idx - nw],
            )
        };
        let orig = *write;
        *write = orig + eps;
        let lp = loss_of(&net, &params, &f1, &f2, &gt);
        *params_slot(&mut params, id, idx) = orig - eps;
        let lm = loss_of(&net, &params, &f1, &f2, &gt);
        *params_slot(&mut params, id, idx) = orig;
        let fd = (lp - lm) / (2.0 * eps);
        let denom = fd.abs().max(read.abs()).max(1e-10);
        assert!(
            (fd - read).abs() / denom < 1e-4,
            "probe {probe} (layer {id}, slot {idx}): fd {fd} vs analytic {read}"
        );
    }
}

fn params_slot(params: &mut ParamStore<f64>, id: u32, idx: usize) -> &mut f64 {
    let k = params.kernels.get_mut(&id).unwrap();
    let nw = k.weights.len();
    if idx < nw {
        &mut k.weights[idx]
    } else {
        &mut k.bias[idx - nw]
    }
}

/// Gradients also flow back into both input frames correctly.
#[test]
fn end_to_end_input_gradients_match_finite_differences() {
    let net = ddcnet::net::linear_schedule(2, 1, 4, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(72);
    let params = he_init::<f64>(&net, &mut rng).unwrap();
    let (mut f1, mut f2, _) =
        synth_pair_with_mode::<f64>(&mut rng, (12, 12), 2, SynthMode::Global).unwrap();
    let gt = vec![FlowField::constant(12, 12, 2.0, 1.0).unwrap()];

    let (out, cache) = forward(&net, &params, &f1, &f2, true).unwrap();
    let (_, grad_out) = aee_loss(&out, &gt).unwrap();
    let (_, g1, g2) = backward(&net, &params, &cache, &grad_out).unwrap();

    let eps = 1e-6;
    for probe in 0..30 {
        let i = rng.gen_range(0..12);
        let j = rng.gen_range(0..12);
        let c = rng.gen_range(0..3);
        let (frame, analytic): (&mut Tensor4<f64>, f64) = if probe % 2 == 0 {
            (&mut f1, g1.at(0, i, j, c))
        } else {
            (&mut f2, g2.at(0, i, j, c))
        };
        let orig = frame.at(0, i, j, c);
        *frame.at_mut(0, i, j, c) = orig + eps;
        let lp = loss_of(&net, &params, &f1, &f2, &gt);
        let frame = if probe % 2 == 0 { &mut f1 } else { &mut f2 };
        *frame.at_mut(0, i, j, c) = orig - eps;
        let lm = loss_of(&net, &params, &f1, &f2, &gt);
        let frame = if probe % 2 == 0 { &mut f1 } else { &mut f2 };
        *frame.at_mut(0, i, j, c) = orig;
        let fd = (lp - lm) / (2.0 * eps);
        let denom = fd.abs().max(analytic.abs()).max(1e-10);
        assert!(
            (fd - analytic).abs() / denom < 1e-4,
            "probe {probe} at ({i},{j},{c}): fd {fd} vs analytic {analytic}"
        );
    }
}

/// A shared branch applied to both frames must accumulate the two
/// passes' weight gradients. The oracle composes the same primitives by
/// hand: out = head(relu(conv_t(concat(relu(conv_b(f1)), relu(conv_b(f2)))))).
#[test]
fn shared_branch_gradients_accumulate_both_passes() {
    let net = NetworkSpec {
        name: "two-headed".into(),
        input_channels: 3,
        branch: vec![LayerSpec::conv(1, 3, 4, 1, 1, Activation::Relu, Some("spatial"))],
        trunk: vec![
            LayerSpec::conv(2, 3, 4, 1, 1, Activation::Relu, None),
            LayerSpec::conv(3, 1, 2, 1, 1, Activation::Linear, None),
        ],
    };
    net.validate().unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(73);
    let params = he_init::<f64>(&net, &mut rng).unwrap();
    let f1 = Tensor4::<f64>::from_fn(1, 10, 10, 3, |_, _, _, _| rng.gen_range(-1.0..1.0)).unwrap();
    let f2 = Tensor4::<f64>::from_fn(1, 10, 10, 3, |_, _, _, _| rng.gen_range(-1.0..1.0)).unwrap();
    let grad_out =
        Tensor4::<f64>::from_fn(1, 10, 10, 2, |_, _, _, _| rng.gen_range(-1.0..1.0)).unwrap();

    let (net_out, cache) = forward(&net, &params, &f1, &f2, true).unwrap();
    let (net_grads, net_g1, net_g2) = backward(&net, &params, &cache, &grad_out).unwrap();

    // hand-composed forward with the same kernels
    let kb = &params.kernels[&1];
    let kt = &params.kernels[&2];
    let kh = &params.kernels[&3];
    let b1_pre = conv2d(&f1, kb).unwrap();
    let b2_pre = conv2d(&f2, kb).unwrap();
    let b1_act = relu(&b1_pre);
    let b2_act = relu(&b2_pre);
    let merged = ddcnet::tensor::concat_channels(&b1_act, &b2_act).unwrap();
    let t_pre = conv2d(&merged, kt).unwrap();
    let t_act = relu(&t_pre);
    let out = conv2d(&t_act, kh).unwrap();
    for (a, b) in out.data().iter().zip(net_out.data()) {
        assert!((a - b).abs() < 1e-12, "hand forward disagrees");
    }

    // hand backward
    let gh = conv2d_backward(&t_act, kh, &grad_out).unwrap();
    let g_t_act = relu_backward(&t_act, &gh.input).unwrap();
    let gt_ = conv2d_backward(&merged, kt, &g_t_act).unwrap();
    let (g_merged_1, g_merged_2) = split_channels(&gt_.input, 4).unwrap();
    let g_b1_pre = relu_backward(&b1_act, &g_merged_1).unwrap();
    let g_b2_pre = relu_backward(&b2_act, &g_merged_2).unwrap();
    let pass1 = conv2d_backward(&f1, kb, &g_b1_pre).unwrap();
    let pass2 = conv2d_backward(&f2, kb, &g_b2_pre).unwrap();

    // shared kernel: gradient is the sum over both passes
    let (got_w, got_b) = &net_grads.grads[&1];
    for (i, g) in got_w.iter().enumerate() {
        let want = pass1.weights[i] + pass2.weights[i];
        assert!(
            (g - want).abs() <= 1e-12 * (1.0 + want.abs()),
            "shared weight grad {i}: {g} vs two-pass sum {want}"
        );
    }
    for (i, g) in got_b.iter().enumerate() {
        let want = pass1.bias[i] + pass2.bias[i];
        assert!((g - want).abs() <= 1e-12 * (1.0 + want.abs()));
    }
    // frame gradients come from their own pass only
    for (a, b) in net_g1.data().iter().zip(pass1.input.data()) {
        assert!((a - b).abs() < 1e-12);
    }
    for (a, b) in net_g2.data().iter().zip(pass2.input.data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

/// Stride-1 zero-padded stacks are translation-equivariant away from the
/// borders: shifting both inputs shifts the output.
#[test]
fn stride_one_networks_commute_with_translation() {
    let net = ddcnet::net::linear_schedule(3, 1, 4, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(74);
    let params = he_init::<f64>(&net, &mut rng).unwrap();
    let (h, w) = (28, 28);
    let f1 = Tensor4::<f64>::from_fn(1, h, w, 3, |_, _, _, _| rng.gen_range(0.0..1.0)).unwrap();
    let f2 = Tensor4::<f64>::from_fn(1, h, w, 3, |_, _, _, _| rng.gen_range(0.0..1.0)).unwrap();
    let (di, dj) = (2usize, 3usize);
    let shift = |t: &Tensor4<f64>| {
        Tensor4::<f64>::from_fn(1, h, w, 3, |_, i, j, c| {
            if i >= di && j >= dj {
                t.at(0, i - di, j - dj, c)
            } else {
                0.0
            }
        })
        .unwrap()
    };
    let (out, _) = forward(&net, &params, &f1, &f2, false).unwrap();
    let (out_shifted, _) = forward(&net, &params, &shift(&f1), &shift(&f2), false).unwrap();
    // compare where both receptive fields stay inside the frame: the
    // trunk RF is 13, so keep a 13-pixel margin plus the shift
    let margin = 13 + di.max(dj);
    for i in margin..h - margin {
        for j in margin..w - margin {
            for c in 0..2 {
                let a = out.at(0, i, j, c);
                let b = out_shifted.at(0, i + di, j + dj, c);
                assert!(
                    (a - b).abs() <= 1e-12 * (1.0 + a.abs()),
                    "({i},{j},{c}): {a} vs shifted {b}"
                );
            }
        }
    }
}
