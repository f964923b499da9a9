//! Analytic input gradients against central differences, h = 1e-4.

use rfnns::decoder::{build_decoder, CapacityProfile};
use rfnns::image::Tensor;
use rfnns::keyed::{derive_stream, DeterministicStream};
use rfnns::layers::{
    instance_norm, instance_norm_backward, leaky_relu, leaky_relu_backward, sigmoid,
    sigmoid_backward, Conv3x3,
};

const H: f64 = 1e-4;
const TRIALS: u64 = 20;
const TOLERANCE: f64 = 1e-4;

fn uniform(s: &mut DeterministicStream, c: usize, h: usize, w: usize, lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(c, h, w, |_, _, _| lo + (hi - lo) * s.uniform())
}

fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Largest |fd - analytic| relative to the largest analytic component, over
/// the coordinates accepted by `check`.
fn relative_error(
    x: &Tensor,
    analytic: &Tensor,
    loss: impl Fn(&Tensor) -> f64,
    check: impl Fn(usize) -> bool,
) -> f64 {
    let scale = analytic.max_abs().max(1e-12);
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        if !check(i) {
            continue;
        }
        let mut p = x.clone();
        p.data_mut()[i] += H;
        let mut m = x.clone();
        m.data_mut()[i] -= H;
        let fd = (loss(&p) - loss(&m)) / (2.0 * H);
        worst = worst.max((fd - analytic.data()[i]).abs() / scale);
    }
    worst
}

fn random_conv(s: &mut DeterministicStream, out_ch: usize, in_ch: usize, stride: usize) -> Conv3x3 {
    Conv3x3 {
        out_channels: out_ch,
        in_channels: in_ch,
        stride,
        weights: (0..out_ch * in_ch * 9).map(|_| s.gaussian() * 0.3).collect(),
    }
}

#[test]
fn conv_input_gradient() {
    for t in 0..TRIALS {
        let mut s = derive_stream(t, "grad/conv");
        for stride in [1, 2] {
            let conv = random_conv(&mut s, 4, 3, stride);
            let x = uniform(&mut s, 3, 16, 16, -1.0, 1.0);
            let out = conv.forward(&x);
            let r = uniform(&mut s, out.channels(), out.height(), out.width(), -1.0, 1.0);
            let g = conv.backward_input(&r, 16, 16);
            let e = relative_error(&x, &g, |v| dot(&conv.forward(v), &r), |_| true);
            assert!(e < TOLERANCE, "trial {t} stride {stride}: {e}");
        }
    }
}

#[test]
fn instance_norm_input_gradient() {
    for t in 0..TRIALS {
        let mut s = derive_stream(t, "grad/norm");
        let x = uniform(&mut s, 4, 16, 16, -1.0, 1.0);
        let r = uniform(&mut s, 4, 16, 16, -1.0, 1.0);
        let g = instance_norm_backward(&instance_norm(&x), &r);
        let e = relative_error(&x, &g, |v| dot(&instance_norm(v).normalized, &r), |_| true);
        assert!(e < TOLERANCE, "trial {t}: {e}");
    }
}

#[test]
fn activation_input_gradients() {
    for t in 0..TRIALS {
        let mut s = derive_stream(t, "grad/act");
        let x = uniform(&mut s, 3, 16, 16, -3.0, 3.0);
        let r = uniform(&mut s, 3, 16, 16, -1.0, 1.0);

        let y = x.map(leaky_relu);
        let g = leaky_relu_backward(&y, &r);
        // The kink itself has no derivative.
        let e = relative_error(&x, &g, |v| dot(&v.map(leaky_relu), &r), |i| {
            x.data()[i].abs() > 2.0 * H
        });
        assert!(e < TOLERANCE, "leaky relu trial {t}: {e}");

        let y = x.map(sigmoid);
        let g = sigmoid_backward(&y, &r);
        let e = relative_error(&x, &g, |v| dot(&v.map(sigmoid), &r), |_| true);
        assert!(e < TOLERANCE, "sigmoid trial {t}: {e}");
    }
}

/// Sign pattern of every hidden pre-activation, recomputed from the public
/// layer list.
fn activation_signs(dec: &rfnns::decoder::FixedDecoder, x: &Tensor) -> Vec<bool> {
    let convs: Vec<&Conv3x3> = dec.layers().collect();
    let mut signs = Vec::new();
    let mut v = x.clone();
    for conv in &convs[..convs.len() - 1] {
        let z = instance_norm(&conv.forward(&v)).normalized;
        signs.extend(z.data().iter().map(|&a| a > 0.0));
        v = z.map(leaky_relu);
    }
    signs
}

#[test]
fn decoder_input_gradient() {
    let profiles = [
        CapacityProfile::new("s2", 16, 8, 4).unwrap(),
        CapacityProfile::new("s4", 16, 4, 6).unwrap(),
        CapacityProfile::new("resampled", 16, 12, 4).unwrap(),
    ];
    for t in 0..TRIALS {
        let p = &profiles[t as usize % profiles.len()];
        let dec = build_decoder(100 + t, p).unwrap();
        let mut s = derive_stream(t, "grad/decoder");
        let x = uniform(&mut s, 3, 16, 16, 0.0, 1.0);
        let (out, tape) = dec.forward(&x).unwrap();
        let r = uniform(&mut s, 3, out.height(), out.width(), -1.0, 1.0);
        let g = dec.input_gradient(tape, &r).unwrap();
        let loss = |v: &Tensor| dot(dec.decode(v).unwrap().tensor(), &r);

        // A stencil that straddles a LeakyReLU kink measures a secant, not
        // the derivative; those coordinates are skipped.
        let base = activation_signs(&dec, &x);
        let smooth: Vec<bool> = (0..x.len())
            .map(|i| {
                [H, -H].iter().all(|&d| {
                    let mut v = x.clone();
                    v.data_mut()[i] += d;
                    activation_signs(&dec, &v) == base
                })
            })
            .collect();
        let kept = smooth.iter().filter(|&&k| k).count();
        assert!(kept * 10 >= x.len() * 8, "trial {t}: only {kept} smooth coordinates");

        let e = relative_error(&x, &g, loss, |i| smooth[i]);
        assert!(e < TOLERANCE, "trial {t} ({}): {e}", p.name);
    }
}
