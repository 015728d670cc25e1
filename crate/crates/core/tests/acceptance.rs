//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! the test fails if any criterion does.

mod common;

use std::time::Instant;

use common::{jacobian, log_abs_det, max_abs_diff, random_plane, randomized_model};
use probcodec::codec::synth::synthetic_images;
use probcodec::codec::{self, Container, Image};
use probcodec::entropy::{coeff_probability, escape_code, escape_value, symbol_bits, symbol_table, MixtureParams};
use probcodec::lifting::TransformMode;
use probcodec::model::{Group, Model, ModelConfig};
use probcodec::nn::testing::gradient_relative_error;
use probcodec::nn::{AdamState, Eval as Forward};
use probcodec::pyramid::Plane;
use probcodec::rangecoder::{Decoder, Encoder};
use probcodec::sampler::{SampleSpec, DEFAULT_ALPHAS};
use probcodec::train::{objective, Checkpoint, SampleObjective, TrainConfig, TrainSample, Trainer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const IMAGES: usize = 200;
const HELD_OUT: usize = 10;
const SIZE: usize = 64;
const DATA_SEED: u64 = 7;
const MODEL_SEED: u64 = 1;
const WARM_STEPS: usize = 1000;
const WARM_LR: f64 = 1e-3;
const JOINT_STEPS: usize = 500;
const JOINT_LR: f64 = 1e-4;
const CHECKPOINT_EVERY: usize = 250;
const SEEDS: usize = 8;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn invertibility() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    let mut worst: f64 = 0.0;
    for case in 0..200u64 {
        let levels = 1 + (case % 4) as usize;
        let (wk, hk) = (rng.random_range(1..=3), rng.random_range(1..=3));
        let m = randomized_model(levels, case, 0.3);
        let x = random_plane(wk << levels, hk << levels, 128.0, case + 1000);
        let back = m.inverse_transform(&m.forward_transform(&x).unwrap()).unwrap();
        worst = worst.max(max_abs_diff(&back.data, &x.data));
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(worst <= 1e-9 && secs <= 60.0, format!("max error {worst:.2e}, {secs:.1} s"))
}

fn zero_log_determinant() -> Outcome {
    let mut worst: f64 = 0.0;
    for seed in 0..20 {
        let m = randomized_model(2, 500 + seed, 0.3);
        let x = random_plane(4, 4, 100.0, seed);
        let f = |v: &[f64]| {
            let p = Plane::from_vec(4, 4, v.to_vec()).unwrap();
            m.forward_transform(&p).unwrap().iter().collect::<Vec<f64>>()
        };
        worst = worst.max(log_abs_det(jacobian(f, &x.data, 1e-3)).abs());
    }
    outcome(worst <= 1e-6, format!("max |log det| {worst:.2e}"))
}

fn draw<R: Rng>(m: &MixtureParams, rng: &mut R) -> i32 {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut n = m.weights.len() - 1;
    for (i, w) in m.weights.iter().enumerate() {
        acc += w;
        if u < acc {
            n = i;
            break;
        }
    }
    let (a, b): (f64, f64) = (rng.random::<f64>().max(1e-300), rng.random());
    let z = (-2.0 * a.ln()).sqrt() * (std::f64::consts::TAU * b).cos();
    (m.means[n] + m.scales[n] * z).round().clamp(-32768.0, 32767.0) as i32
}

fn coder_round_trip() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let (mut exact, mut within) = (0, 0);
    let mut worst_ratio: f64 = 0.0;
    for _ in 0..1000 {
        let len = rng.random_range(1..=200);
        let mixtures: Vec<MixtureParams> = (0..len).map(|_| MixtureParams::random(&mut rng)).collect();
        let values: Vec<i32> = mixtures.iter().map(|m| draw(m, &mut rng)).collect();
        let mut enc = Encoder::new();
        let mut estimate = 0.0;
        for (m, &v) in mixtures.iter().zip(&values) {
            let t = symbol_table(m).unwrap();
            let s = t.symbol(v);
            enc.encode(s, &t.cdf);
            if s == t.escape() {
                enc.encode_raw16(escape_code(v));
            }
            estimate += symbol_bits(v, m);
        }
        let bytes = enc.finish();
        let measured = 8.0 * bytes.len() as f64;
        within += usize::from(measured <= estimate * 1.02 + 64.0);
        worst_ratio = worst_ratio.max((measured - 64.0) / estimate);
        let mut dec = Decoder::new(&bytes).unwrap();
        let decoded: Vec<i32> = mixtures
            .iter()
            .map(|m| {
                let t = symbol_table(m).unwrap();
                let s = dec.decode(&t.cdf).unwrap();
                if s == t.escape() {
                    escape_value(dec.decode_raw16().unwrap())
                } else {
                    t.low + s as i32
                }
            })
            .collect();
        exact += usize::from(decoded == values);
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        exact == 1000 && within == 1000 && secs <= 120.0,
        format!("{exact}/1000 exact, {within}/1000 within budget, worst (bits-64)/estimate {worst_ratio:.4}, {secs:.1} s"),
    )
}

fn mixture_normalization() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4040);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let m = MixtureParams::random(&mut rng);
        let lo = m.means.iter().zip(&m.scales).map(|(u, s)| u - 12.0 * s).fold(f64::INFINITY, f64::min);
        let hi = m.means.iter().zip(&m.scales).map(|(u, s)| u + 12.0 * s).fold(f64::NEG_INFINITY, f64::max);
        let (lo, hi) = (lo.floor().max(-32768.0) as i32, hi.ceil().min(32767.0) as i32);
        let total: f64 = (lo..=hi).map(|v| coeff_probability(v, &m)).sum();
        worst = worst.max((total - 1.0).abs());
    }
    outcome(worst <= 1e-6, format!("max |sum - 1| {worst:.2e}"))
}

fn gradient_fidelity() -> Outcome {
    let mut worst: f64 = 0.0;
    let x = synthetic_images(3, 1, 16, 16)[0].plane(0).map(|v| v - 128.0);
    for levels in [2, 4] {
        let m = randomized_model(levels, 21, 0.05);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let sample = TrainSample::new(x.clone(), levels, &mut rng).unwrap();
        let f = SampleObjective { model: &m, sample: &sample, lambda: 8.0, mode: TransformMode::Learned };
        for group in [Group::Lifting, Group::Posterior, Group::Context] {
            let err = gradient_relative_error(&m.store, &f, &m.group_ids(group), 1e-5, 8).unwrap();
            worst = worst.max(err);
        }
    }
    outcome(worst <= 1e-3, format!("max relative error {worst:.2e}"))
}

struct Eval {
    psnr: f64,
    bpp: f64,
    scale: f64,
}

fn evaluate(m: &Model, held: &[Image]) -> Eval {
    let (mut psnr, mut bpp, mut scale) = (0.0, 0.0, 0.0);
    for img in held {
        let c = codec::encode(img, m).unwrap();
        let out = codec::decode(&c, m, &[SampleSpec::new(0.0, 0, 1).unwrap()]).unwrap();
        psnr += codec::psnr(codec::mse(img, &out[0]).unwrap());
        bpp += c.bpp();
        scale += codec::decode_fields(&c, m).unwrap().iter().map(|f| f.mean_scale()).sum::<f64>();
    }
    let n = held.len() as f64;
    Eval { psnr: psnr / n, bpp: bpp / n, scale: scale / n }
}

fn train(trainer: &mut Trainer, label: &str, start: Instant) -> Vec<Checkpoint> {
    trainer
        .run(
            |_| Ok(()),
            |_, c| {
                eprintln!("  {label} step {} trailing loss {:.4} ({:.0} s)", c.step, c.trailing_loss, start.elapsed().as_secs_f64());
                Ok(())
            },
        )
        .unwrap()
}

struct Trained {
    held: Vec<Image>,
    low_lambda: Model,
    report: [Outcome; 4],
}

/// Rate of held-out images under the noise surrogate against the coded
/// estimate after hard rounding.
fn rate_gap(m: &Model, held: &[Image]) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let (mut noisy, mut hard) = (0.0, 0.0);
    for img in held {
        let x = img.plane(0).map(|v| v - codec::PIXEL_OFFSET);
        for _ in 0..4 {
            let sample = TrainSample::new(x.clone(), m.levels(), &mut rng).unwrap();
            let mut g = Forward::new(&m.store);
            let terms = objective(&mut g, m, &sample, 8.0, m.transform_mode()).unwrap();
            noisy += terms.rate.item() / std::f64::consts::LN_2 / 4.0;
        }
        hard += m.rate_estimate(&codec::analyze(img, m).unwrap()[0]).unwrap();
    }
    let gap = (noisy - hard).abs() / hard;
    outcome(gap <= 0.05, format!("noise rate {:.0} bits, rounded rate {:.0} bits, gap {:.2}%", noisy, hard, 100.0 * gap))
}

fn desk_training() -> Trained {
    let start = Instant::now();
    let images = synthetic_images(DATA_SEED, IMAGES, SIZE, SIZE);
    let (train_set, held) = images.split_at(IMAGES - HELD_OUT);
    let data: Vec<Plane<f64>> = train_set.iter().map(|i| i.plane(0).map(|v| v - codec::PIXEL_OFFSET)).collect();
    let init = Model::new(ModelConfig::default(), MODEL_SEED).unwrap();
    let before = evaluate(&init, held);

    let warm = TrainConfig {
        lambda: 8.0,
        steps: WARM_STEPS,
        warmstart_steps: WARM_STEPS,
        patch: SIZE,
        lr: WARM_LR,
        checkpoint_every: CHECKPOINT_EVERY,
        ..TrainConfig::default()
    };
    let mut t = Trainer::new(init, warm.clone(), data.clone()).unwrap();
    let mut checkpoints = train(&mut t, "warm start", start);
    let (warm_model, warm_adam): (Model, AdamState) = (t.model.clone(), t.adam.clone());

    let joint = |lambda: f64| TrainConfig { lambda, steps: WARM_STEPS + JOINT_STEPS, lr: JOINT_LR, ..warm.clone() };
    let fork = |lambda: f64, label: &str| {
        let mut t = Trainer::resume(warm_model.clone(), warm_adam.clone(), joint(lambda), data.clone()).unwrap();
        let cps = train(&mut t, label, start);
        (t.model, cps)
    };
    let (main, cps) = fork(8.0, "lambda 8");
    checkpoints.extend(cps);
    let after = evaluate(&main, held);
    let losses: Vec<f64> = checkpoints.iter().map(|c| c.trailing_loss).collect();
    let monotone = losses.windows(2).all(|w| w[1] < w[0]);
    let secs = start.elapsed().as_secs_f64();
    let sanity = outcome(
        monotone && after.psnr > before.psnr && after.bpp <= before.bpp && secs <= 4.0 * 3600.0,
        format!(
            "trailing losses {:?}; PSNR {:.3} -> {:.3} dB at {:.3} -> {:.3} bpp",
            losses.iter().map(|l| (l * 1000.0).round() / 1000.0).collect::<Vec<_>>(),
            before.psnr,
            after.psnr,
            before.bpp,
            after.bpp
        ),
    );

    let gap = rate_gap(&main, held);
    let (low, _) = fork(4.0, "lambda 4");
    let (high, _) = fork(16.0, "lambda 16");
    let (e_low, e_high) = (evaluate(&low, held), evaluate(&high, held));
    let rate = outcome(e_high.bpp < e_low.bpp, format!("bpp {:.4} at lambda 16, {:.4} at lambda 4", e_high.bpp, e_low.bpp));
    let variance = outcome(
        e_high.scale > e_low.scale,
        format!("mean scale {:.4} at lambda 16, {:.4} at lambda 4", e_high.scale, e_low.scale),
    );
    eprintln!("  training finished in {:.0} s", start.elapsed().as_secs_f64());
    Trained { held: held.to_vec(), low_lambda: low, report: [sanity, rate, variance, gap] }
}

fn diversity(m: &Model, held: &[Image]) -> [Outcome; 2] {
    let n = DEFAULT_ALPHAS.len();
    let (mut mse, mut energy, mut energy_8bit) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    let mut identical = true;
    for img in held {
        let bytes = codec::encode(img, m).unwrap().to_bytes();
        let hash = codec::sha256_hex(&bytes);
        for (k, &alpha) in DEFAULT_ALPHAS.iter().enumerate() {
            let again = codec::encode(img, m).unwrap().to_bytes();
            identical &= codec::sha256_hex(&again) == hash;
            let c = Container::from_bytes(&bytes).unwrap();
            let fields = codec::decode_fields(&c, m).unwrap();
            for seed in 0..SEEDS as u64 {
                let planes = codec::reconstruct_planes(&fields, m, alpha, seed, img.width, img.height).unwrap();
                let out = Image::from_planes(&planes.iter().map(codec::to_pixels).collect::<Vec<_>>()).unwrap();
                mse[k] += codec::mse(img, &out).unwrap();
                energy[k] += codec::plane_high_frequency_energy(&planes);
                energy_8bit[k] += codec::high_frequency_energy(&out);
            }
        }
    }
    let count = (held.len() * SEEDS) as f64;
    let mean = |v: &[f64]| v.iter().map(|x| x / count).collect::<Vec<f64>>();
    let (mse, energy, energy_8bit) = (mean(&mse), mean(&energy), mean(&energy_8bit));
    let rises = |v: &[f64]| v.windows(2).all(|w| w[1] >= w[0]);
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(", ");
    [
        outcome(
            rises(&mse) && rises(&energy),
            format!(
                "MSE [{}], high-frequency energy [{}] (after 8-bit rounding [{}])",
                fmt(&mse),
                fmt(&energy),
                fmt(&energy_8bit)
            ),
        ),
        outcome(identical, format!("{} containers re-encoded per alpha, hashes identical", held.len())),
    ]
}

#[test]
fn acceptance_criteria() {
    let mut results = vec![
        (1, "exact invertibility", invertibility()),
        (2, "zero log-determinant", zero_log_determinant()),
        (3, "coder round trip", coder_round_trip()),
        (4, "mixture normalization", mixture_normalization()),
        (5, "gradient fidelity", gradient_fidelity()),
    ];
    let trained = desk_training();
    let [sanity, rate, variance, gap] = trained.report;
    results.push((6, "desk-scale training", sanity));
    results.push((7, "rate falls with lambda", rate));
    results.push((8, "scale grows as rate falls", variance));
    let [trend, single] = diversity(&trained.low_lambda, &trained.held);
    results.push((9, "diversity trend", trend));
    results.push((10, "single-bitstream diversity", single));

    for (n, name, o) in &results {
        println!("criterion {n:>2} {}: {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    println!("property    {}: noise/rounding rate gap: {}", if gap.pass { "PASS" } else { "FAIL" }, gap.detail);
    let failed: Vec<_> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    assert!(failed.is_empty() && gap.pass, "failed criteria: {failed:?}, rate gap pass: {}", gap.pass);
}
