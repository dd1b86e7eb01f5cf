//! End-to-end acceptance checks, one line of output per criterion.

use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use uscnn::checkpoint::encode_checkpoint;
use uscnn::conv::conv2d_forward;
use uscnn::gradcheck::{
    check_loss_gradient, check_network_gradient, LOSS_TOLERANCE, NETWORK_TOLERANCE,
};
use uscnn::io::{decode_flo, encode_flo};
use uscnn::synthetic::{random_shifted_pair, shifted_pair, TextureParams};
use uscnn::{
    bilinear_warp, compute_metrics, estimate_flow, init_network, iteration_trace,
    median_filter_flow, photometric_loss, read_flo, spatiotemporal_derivatives, train, ConvLayer,
    EncoderDecoderNet, FlowField, Image, InferenceConfig, Tensor, TrainConfig,
};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

fn gradient_fidelity() -> Outcome {
    let t = Instant::now();
    let worst = check_loss_gradient(7, 100, 16, 16, 1e-3).unwrap();
    let took = t.elapsed();
    outcome(
        worst < LOSS_TOLERANCE && took < Duration::from_secs(10),
        format!("max rel {worst:.2e} (< {LOSS_TOLERANCE:.0e}), {:.2}s (< 10s)", secs(took)),
    )
}

fn end_to_end_backprop() -> Outcome {
    let t = Instant::now();
    let (worst, count) = check_network_gradient(11, false).unwrap();
    let took = t.elapsed();
    outcome(
        worst < NETWORK_TOLERANCE && took < Duration::from_secs(60),
        format!(
            "{count} parameters, max rel {worst:.2e} (< {NETWORK_TOLERANCE:.0e}), {:.2}s (< 60s)",
            secs(took)
        ),
    )
}

fn naive_conv(input: &Tensor<f64>, layer: &ConvLayer<f64>) -> Vec<f64> {
    let (c, h, w) = input.dims3().unwrap();
    let (k, s, p) = (layer.kernel_size(), layer.stride(), layer.padding() as isize);
    let (oh, ow) = layer.output_extents(h, w);
    let wt = layer.weights().data();
    let mut out = vec![0.0; layer.out_channels() * oh * ow];
    for o in 0..layer.out_channels() {
        for y in 0..oh {
            for x in 0..ow {
                let mut acc = layer.bias().data()[o];
                for ci in 0..c {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (y * s + ky) as isize - p;
                            let ix = (x * s + kx) as isize - p;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            acc += wt[((o * c + ci) * k + ky) * k + kx]
                                * input.data()[(ci * h + iy as usize) * w + ix as usize];
                        }
                    }
                }
                if layer.has_activation() && acc < 0.0 {
                    acc *= 0.1;
                }
                out[(o * oh + y) * ow + x] = acc;
            }
        }
    }
    out
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}

fn primitive_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut conv_worst = 0.0f64;
    let (mut median_ok, mut deriv_worst, mut warp_ok) = (true, 0.0f64, true);
    for _ in 0..20 {
        let k = [1, 3, 5, 7][rng.gen_range(0..4)];
        let (cin, cout) = (rng.gen_range(1..5), rng.gen_range(1..5));
        let (h, w) = (rng.gen_range(4..20), rng.gen_range(4..20));
        let stride = rng.gen_range(1..=2);
        let weights = Tensor::from_fn(&[cout, cin, k, k], |_| rng.gen_range(-1.0..1.0));
        let bias = Tensor::from_fn(&[cout], |_| rng.gen_range(-1.0..1.0));
        let layer = ConvLayer::new(weights, bias, stride, rng.gen()).unwrap();
        let input = Tensor::from_fn(&[cin, h, w], |_| rng.gen_range(-1.0..1.0));
        let fast = conv2d_forward(&input, &layer).unwrap();
        for (a, b) in fast.data().iter().zip(naive_conv(&input, &layer)) {
            conv_worst = conv_worst.max(rel(*a, b));
        }
    }
    for _ in 0..20 {
        let (h, w) = (rng.gen_range(3..16), rng.gen_range(3..16));
        let r = rng.gen_range(1..4);
        let flow = FlowField::from_components(
            h,
            w,
            (0..h * w).map(|_| rng.gen_range(-5.0..5.0)).collect(),
            (0..h * w).map(|_| rng.gen_range(-5.0..5.0)).collect(),
        )
        .unwrap();
        let filtered = median_filter_flow(&flow, r).unwrap();
        for (src, dst) in [(&flow.u, &filtered.u), (&flow.v, &filtered.v)] {
            for y in 0..h {
                for x in 0..w {
                    let mut window = Vec::new();
                    for dy in -(r as isize)..=r as isize {
                        for dx in -(r as isize)..=r as isize {
                            let yy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                            let xx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                            window.push(src.data()[yy * w + xx]);
                        }
                    }
                    window.sort_by(|a, b| a.partial_cmp(b).unwrap());
                    median_ok &= window[window.len() / 2] == dst.data()[y * w + x];
                }
            }
        }
    }
    for _ in 0..20 {
        let (h, w) = (rng.gen_range(2..16), rng.gen_range(2..16));
        let f1 = Image::from_fn(h, w, |_, _| rng.gen());
        let f2 = Image::from_fn(h, w, |_, _| rng.gen());
        let d = spatiotemporal_derivatives(&f1, &f2).unwrap();
        for y in 0..h {
            for x in 0..w {
                let at = |f: &Image, dy: usize, dx: usize| {
                    f.at((y + dy).min(h - 1), (x + dx).min(w - 1)) as f64
                };
                let (mut ix, mut iy, mut it) = (0.0, 0.0, 0.0);
                for f in [&f1, &f2] {
                    for o in 0..2 {
                        ix += at(f, o, 1) - at(f, o, 0);
                        iy += at(f, 1, o) - at(f, 0, o);
                    }
                }
                for dy in 0..2 {
                    for dx in 0..2 {
                        it += at(&f2, dy, dx) - at(&f1, dy, dx);
                    }
                }
                let i = y * w + x;
                for (got, want) in [(d.ix.data()[i], ix), (d.iy.data()[i], iy), (d.it.data()[i], it)] {
                    let want = (want / 4.0) as f32;
                    deriv_worst = deriv_worst.max(rel(got as f64, want as f64));
                }
            }
        }
    }
    for _ in 0..20 {
        let (h, w) = (rng.gen_range(2..16), rng.gen_range(2..16));
        let img = Image::from_fn(h, w, |_, _| rng.gen());
        let (us, vs): (Vec<i32>, Vec<i32>) = (0..h * w)
            .map(|_| (rng.gen_range(-4..=4), rng.gen_range(-4..=4)))
            .unzip();
        let flow = FlowField::from_components(
            h,
            w,
            us.iter().map(|&u| u as f32).collect(),
            vs.iter().map(|&v| v as f32).collect(),
        )
        .unwrap();
        let warped = bilinear_warp(&img, &flow).unwrap();
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let want = img.at_clamped(y as isize + vs[i] as isize, x as isize + us[i] as isize);
                warp_ok &= warped.at(y, x) == want;
            }
        }
    }
    outcome(
        conv_worst < 1e-6 && median_ok && deriv_worst < 1e-6 && warp_ok,
        format!(
            "conv max rel {conv_worst:.1e}, median exact {median_ok}, \
             derivatives max rel {deriv_worst:.1e}, integer warp exact {warp_ok}"
        ),
    )
}

/// Frames for the synthetic training and evaluation sets.
const FRAME_SIDE: usize = 96;
const CROP_SIDE: usize = 64;
const MAX_SHIFT: f32 = 2.0;

fn training_config() -> TrainConfig {
    TrainConfig {
        learning_rate: 3e-4,
        batch_size: 4,
        epochs: 44,
        crop_size: (CROP_SIDE, CROP_SIDE),
        seed: 5,
        ..TrainConfig::default()
    }
}

fn train_synthetic(net: &mut EncoderDecoderNet) -> (Duration, usize, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let pairs: Vec<_> = (0..500)
        .map(|_| {
            let p = random_shifted_pair(FRAME_SIDE, FRAME_SIDE, MAX_SHIFT, TextureParams::default(), &mut rng);
            (p.frame1, p.frame2)
        })
        .collect();
    let t = Instant::now();
    let trace = train(net, pairs.as_slice(), &training_config(), |_| {}).unwrap();
    let tail = &trace[trace.len() - 50..];
    (t.elapsed(), trace.len(), tail.iter().map(|r| r.loss).sum::<f64>() / 50.0)
}

fn synthetic_training(net: &mut EncoderDecoderNet) -> Outcome {
    let (took, steps, final_loss) = train_synthetic(net);
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let cfg = InferenceConfig::default();
    let mut epe = 0.0;
    for _ in 0..50 {
        let p = random_shifted_pair(CROP_SIDE, CROP_SIDE, MAX_SHIFT, TextureParams::default(), &mut rng);
        let est = estimate_flow(net, &p.frame1, &p.frame2, &cfg).unwrap();
        epe += compute_metrics(&est, &p.truth).unwrap().aee_tot;
    }
    epe /= 50.0;
    outcome(
        epe < 0.5 && took <= Duration::from_secs(600),
        format!(
            "held-out EPE {epe:.3} px (< 0.5), {steps} steps in {:.0}s (<= 600s), final loss {final_loss:.4}",
            secs(took)
        ),
    )
}

fn coarse_to_fine(net: &EncoderDecoderNet) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let cfg = InferenceConfig {
        num_scales: 3,
        ..InferenceConfig::default()
    };
    let (mut median_hits, mut decreasing, mut improved) = (0, 0, 0);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let p = shifted_pair(128, 128, 3.0, 0.0, TextureParams::default(), &mut rng);
        let (flow, trace) = iteration_trace(net, &p.frame1, &p.frame2, &cfg).unwrap();
        let (mu, mv) = flow.median();
        let err = ((mu - 3.0) as f64).hypot(mv as f64);
        worst = worst.max(err);
        median_hits += usize::from(err < 0.5);
        let (first, last) = (trace[0].photometric_loss, trace[trace.len() - 1].photometric_loss);
        decreasing += usize::from(last < first);
        // Same comparison at a single resolution: the unwarped pair against the final warp.
        let unwarped = photometric_loss(&p.frame1, &p.frame2).unwrap();
        improved += usize::from(last < unwarped);
    }
    outcome(
        median_hits == 50 && decreasing >= 48,
        format!(
            "median within 0.5 px in {median_hits}/50 (worst {worst:.3}), \
             final trace value below first in {decreasing}/50 (>= 48 required); \
             final below unwarped full-resolution loss in {improved}/50"
        ),
    )
}

fn flo_round_trip() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut exact = true;
    for _ in 0..20 {
        let (h, w) = (rng.gen_range(1..30), rng.gen_range(1..30));
        let flow = FlowField::from_components(
            h,
            w,
            (0..h * w).map(|_| f32::from_bits(rng.gen())).collect(),
            (0..h * w).map(|_| f32::from_bits(rng.gen())).collect(),
        )
        .unwrap();
        let bytes = encode_flo(&flow);
        let back = decode_flo(&bytes, Path::new("memory")).unwrap();
        exact &= encode_flo(&back) == bytes;
    }
    let fixture = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/constant_1_-2.flo");
    let reference = read_flo(&fixture).unwrap();
    let parsed = reference == FlowField::constant(3, 4, 1.0, -2.0);
    outcome(
        exact && parsed,
        format!("20 random fields bit-exact {exact}, reference 3x4 (1,-2) field parsed {parsed}"),
    )
}

fn metric_closed_forms() -> Outcome {
    let m = compute_metrics(&FlowField::zeros(1, 1), &FlowField::constant(1, 1, 1.0, 0.0)).unwrap();
    let closed = m.aee_tot == 1.0 && (m.aae_tot - 45.0).abs() < 1e-12;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let n = 200;
        let mut field = || (0..n).map(|_| rng.gen_range(-8.0f32..8.0)).collect::<Vec<_>>();
        let truth = FlowField::from_components(10, 20, field(), field()).unwrap();
        let est = FlowField::from_components(10, 20, field(), field()).unwrap();
        let m = compute_metrics(&est, &truth).unwrap();
        let (a, b) = (m.count_lt5 as f64, m.count_ge5 as f64);
        worst = worst
            .max(((a * m.aee_lt5 + b * m.aee_ge5) / (a + b) - m.aee_tot).abs())
            .max(((a * m.aae_lt5 + b * m.aae_ge5) / (a + b) - m.aae_tot).abs());
    }
    outcome(
        closed && worst < 1e-6,
        format!(
            "EPE {} AAE {}, bucket-weighted mean deviation {worst:.1e} (< 1e-6)",
            m.aee_tot, m.aae_tot
        ),
    )
}

fn determinism() -> Outcome {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let pairs: Vec<_> = (0..16)
            .map(|_| {
                let p = random_shifted_pair(48, 48, 2.0, TextureParams::default(), &mut rng);
                (p.frame1, p.frame2)
            })
            .collect();
        let cfg = TrainConfig {
            learning_rate: 1e-3,
            batch_size: 4,
            epochs: 3,
            crop_size: (32, 32),
            seed: 21,
            ..TrainConfig::default()
        };
        let mut net = init_network(21);
        let trace = train(&mut net, pairs.as_slice(), &cfg, |_| {}).unwrap();
        let losses: Vec<u64> = trace.iter().map(|r| r.loss.to_bits()).collect();
        (encode_checkpoint(&net), losses)
    };
    let (a, b) = (run(), run());
    outcome(
        a == b,
        format!(
            "checkpoints identical {}, {} loss values identical {}",
            a.0 == b.0,
            a.1.len(),
            a.1 == b.1
        ),
    )
}

fn main() -> ExitCode {
    let mut failed = 0;
    let mut report = |name: &str, o: Outcome| {
        println!("{} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failed += usize::from(!o.pass);
    };
    report("gradient fidelity", gradient_fidelity());
    report("end-to-end backprop", end_to_end_backprop());
    report("primitive oracles", primitive_oracles());
    let mut net = init_network(0);
    report("synthetic training", synthetic_training(&mut net));
    report("coarse-to-fine inference", coarse_to_fine(&net));
    report(".flo round trip", flo_round_trip());
    report("metric closed forms", metric_closed_forms());
    report("determinism", determinism());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
