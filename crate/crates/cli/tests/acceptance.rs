//! Acceptance suite: one test per shipping criterion, each printing a single
//! `acceptance criterion N (...): PASS` or `... FAIL` line (visible with
//! `--nocapture`). Every check runs at desk scale on synthetic audio and is
//! independent of the unit suites: oracles here are written directly against
//! the definitions, not against the implementations under test.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::Rng;

use ser_core::audio::{synth_clip, synth_corpus, AudioClip, ClassBalance, EmotionClass};
use ser_core::autograd::{grad_check, Graph, GradCheckReport, Tensor};
use ser_core::dsp::{
    dct2_ortho, featurize, stft_magnitude, FeatureKind, FeatureStore, StftConfig,
};
use ser_core::model::{Model, ModelConfig, Variant};
use ser_core::rng::derive_rng;
use ser_core::train::{
    compute_metrics, cross_validate, evaluate, fit, make_fold_plans, split_for_fold, train_model,
    AdadeltaState, TrainOptions,
};

macro_rules! check {
    ($cond:expr, $($arg:tt)+) => {
        if !$cond {
            return Err(format!($($arg)+));
        }
    };
}

fn criterion(n: usize, name: &str, body: impl FnOnce() -> Result<(), String>) {
    match body() {
        Ok(()) => println!("acceptance criterion {n} ({name}): PASS"),
        Err(msg) => {
            println!("acceptance criterion {n} ({name}): FAIL");
            panic!("acceptance criterion {n} ({name}): {msg}");
        }
    }
}

// ---------------------------------------------------------------- criterion 1

/// Rebuilds the graph from scratch per evaluation so finite differences see
/// a pure function of the probed tensor.
fn fd_check<F>(x0: &[f64], shape: &[usize], build: F) -> GradCheckReport
where
    F: Fn(&mut Graph, Tensor) -> Tensor,
{
    let mut g = Graph::new();
    let x = g.leaf(x0.to_vec(), shape.to_vec(), true).unwrap();
    let loss = build(&mut g, x);
    g.backward(loss).unwrap();
    let analytic = g.grad(x).unwrap().to_vec();
    grad_check(
        |v| {
            let mut g = Graph::new();
            let x = g.leaf(v.to_vec(), shape.to_vec(), true).unwrap();
            let loss = build(&mut g, x);
            g.scalar_value(loss).unwrap()
        },
        &analytic,
        x0,
        1e-5,
    )
}

/// Distinctly-weighted sum readout; conditions losses that would otherwise
/// be invariant to the probe (batch norm) or have symmetric gradients.
fn weighted_sum(g: &mut Graph, t: Tensor, tag: &str) -> Tensor {
    let n = g.values(t).len();
    let shape = g.shape(t).to_vec();
    let mut rng = derive_rng(0xACC0, tag);
    let w: Vec<f64> = (0..n).map(|_| rng.gen_range(0.25..1.75)).collect();
    let wl = g.leaf(w, shape, false).unwrap();
    let p = g.mul(t, wl).unwrap();
    g.sum(p).unwrap()
}

fn seeded(tag: &str, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    let mut rng = derive_rng(0xACC1, tag);
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

#[test]
fn c01_gradient_checks() {
    criterion(1, "analytic gradients match finite differences", || {
        let started = Instant::now();
        let mut worst: (f64, &str) = (0.0, "none");
        let mut run = |name: &'static str, report: GradCheckReport| -> Result<(), String> {
            check!(report.checked > 0, "{name}: every coordinate was skipped");
            check!(
                report.max_rel_err < 1e-4,
                "{name}: max relative error {} over {} coords",
                report.max_rel_err,
                report.checked
            );
            if report.max_rel_err > worst.0 {
                worst = (report.max_rel_err, name);
            }
            Ok(())
        };

        let x6 = seeded("x6", 6, -1.0, 1.0);
        run("add", fd_check(&x6, &[2, 3], |g, x| {
            let c = g.leaf(seeded("addc", 6, -1.0, 1.0), vec![2, 3], false).unwrap();
            let y = g.add(x, c).unwrap();
            weighted_sum(g, y, "add")
        }))?;
        run("sub", fd_check(&x6, &[2, 3], |g, x| {
            let c = g.leaf(seeded("subc", 6, -1.0, 1.0), vec![2, 3], false).unwrap();
            let y = g.sub(c, x).unwrap();
            weighted_sum(g, y, "sub")
        }))?;
        run("mul", fd_check(&x6, &[2, 3], |g, x| {
            let c = g.leaf(seeded("mulc", 6, 0.5, 2.0), vec![2, 3], false).unwrap();
            let y = g.mul(x, c).unwrap();
            weighted_sum(g, y, "mul")
        }))?;
        run("scale", fd_check(&x6, &[6], |g, x| {
            let y = g.scale(x, -1.7).unwrap();
            weighted_sum(g, y, "scale")
        }))?;
        run("sum", fd_check(&x6, &[6], |g, x| {
            let s = g.sum(x).unwrap();
            g.scale(s, 1.3).unwrap()
        }))?;

        // kinked and saturating activations; x kept away from the kink,
        // anything near it is skipped by the slope test
        let xsign: Vec<f64> = seeded("xsign", 8, 0.2, 1.2)
            .into_iter()
            .enumerate()
            .map(|(i, v)| if i % 2 == 0 { v } else { -v })
            .collect();
        run("abs", fd_check(&xsign, &[8], |g, x| {
            let y = g.abs(x).unwrap();
            weighted_sum(g, y, "abs")
        }))?;
        run("relu", fd_check(&xsign, &[8], |g, x| {
            let y = g.relu(x).unwrap();
            weighted_sum(g, y, "relu")
        }))?;
        run("sigmoid", fd_check(&xsign, &[8], |g, x| {
            let y = g.sigmoid(x).unwrap();
            weighted_sum(g, y, "sigmoid")
        }))?;

        let lx = seeded("lx", 12, -1.0, 1.0);
        let lw = seeded("lw", 8, -0.8, 0.8);
        let lb = seeded("lb", 2, -0.5, 0.5);
        run("linear/x", fd_check(&lx, &[3, 4], |g, x| {
            let w = g.leaf(lw.clone(), vec![2, 4], false).unwrap();
            let b = g.leaf(lb.clone(), vec![2], false).unwrap();
            let y = g.linear(x, w, b).unwrap();
            weighted_sum(g, y, "linear")
        }))?;
        run("linear/w", fd_check(&lw, &[2, 4], |g, w| {
            let x = g.leaf(lx.clone(), vec![3, 4], false).unwrap();
            let b = g.leaf(lb.clone(), vec![2], false).unwrap();
            let y = g.linear(x, w, b).unwrap();
            weighted_sum(g, y, "linear")
        }))?;
        run("linear/b", fd_check(&lb, &[2], |g, b| {
            let x = g.leaf(lx.clone(), vec![3, 4], false).unwrap();
            let w = g.leaf(lw.clone(), vec![2, 4], false).unwrap();
            let y = g.linear(x, w, b).unwrap();
            weighted_sum(g, y, "linear")
        }))?;

        let cx = seeded("cx", 2 * 3 * 4, -1.0, 1.0);
        let cw = seeded("cw", 2 * 2 * 2, -0.7, 0.7);
        let cb = seeded("cb", 2, -0.3, 0.3);
        run("conv2d/x", fd_check(&cx, &[2, 3, 4], |g, x| {
            let w = g.leaf(cw.clone(), vec![2, 2, 2], false).unwrap();
            let b = g.leaf(cb.clone(), vec![2], false).unwrap();
            let y = g.conv2d(x, w, b).unwrap();
            weighted_sum(g, y, "conv")
        }))?;
        run("conv2d/w", fd_check(&cw, &[2, 2, 2], |g, w| {
            let x = g.leaf(cx.clone(), vec![2, 3, 4], false).unwrap();
            let b = g.leaf(cb.clone(), vec![2], false).unwrap();
            let y = g.conv2d(x, w, b).unwrap();
            weighted_sum(g, y, "conv")
        }))?;
        run("conv2d/b", fd_check(&cb, &[2], |g, b| {
            let x = g.leaf(cx.clone(), vec![2, 3, 4], false).unwrap();
            let w = g.leaf(cw.clone(), vec![2, 2, 2], false).unwrap();
            let y = g.conv2d(x, w, b).unwrap();
            weighted_sum(g, y, "conv")
        }))?;

        // distinct values so the argmax is stable under the probe
        let px: Vec<f64> = (0..32).map(|i| ((i * 13) % 32) as f64 * 0.11).collect();
        run("max_pool", fd_check(&px, &[1, 2, 4, 4], |g, x| {
            let y = g.max_pool(x, 2, 2).unwrap();
            weighted_sum(g, y, "pool")
        }))?;

        let bx = seeded("bx", 4 * 3, -1.5, 1.5);
        let bgamma = seeded("bgamma", 3, 0.5, 1.5);
        let bbeta = seeded("bbeta", 3, -0.4, 0.4);
        run("batch_norm_train/x", fd_check(&bx, &[4, 3], |g, x| {
            let ga = g.leaf(bgamma.clone(), vec![3], false).unwrap();
            let be = g.leaf(bbeta.clone(), vec![3], false).unwrap();
            let (y, _, _) = g.batch_norm_train(x, ga, be, 1e-5).unwrap();
            weighted_sum(g, y, "bn")
        }))?;
        run("batch_norm_train/gamma", fd_check(&bgamma, &[3], |g, ga| {
            let x = g.leaf(bx.clone(), vec![4, 3], false).unwrap();
            let be = g.leaf(bbeta.clone(), vec![3], false).unwrap();
            let (y, _, _) = g.batch_norm_train(x, ga, be, 1e-5).unwrap();
            weighted_sum(g, y, "bn")
        }))?;
        run("batch_norm_train/beta", fd_check(&bbeta, &[3], |g, be| {
            let x = g.leaf(bx.clone(), vec![4, 3], false).unwrap();
            let ga = g.leaf(bgamma.clone(), vec![3], false).unwrap();
            let (y, _, _) = g.batch_norm_train(x, ga, be, 1e-5).unwrap();
            weighted_sum(g, y, "bn")
        }))?;
        let rmean = seeded("rmean", 3, -0.2, 0.2);
        let rvar = seeded("rvar", 3, 0.5, 1.5);
        run("batch_norm_eval/x", fd_check(&bx, &[4, 3], |g, x| {
            let ga = g.leaf(bgamma.clone(), vec![3], false).unwrap();
            let be = g.leaf(bbeta.clone(), vec![3], false).unwrap();
            let y = g.batch_norm_eval(x, ga, be, &rmean, &rvar, 1e-5).unwrap();
            weighted_sum(g, y, "bn")
        }))?;

        // the mask is a fixed linear map because the stream is re-derived
        // identically on every rebuild
        run("dropout", fd_check(&x6, &[2, 3], |g, x| {
            let mut rng = derive_rng(0xACC2, "dropout-mask");
            let y = g.dropout(x, 0.5, &mut rng).unwrap();
            weighted_sum(g, y, "dropout")
        }))?;

        run("concat_flatten", fd_check(&x6, &[2, 3], |g, x| {
            let other = g
                .leaf(seeded("cat2", 8, -1.0, 1.0), vec![2, 2, 2], false)
                .unwrap();
            let y = g.concat_flatten(&[x, other]).unwrap();
            weighted_sum(g, y, "cat")
        }))?;

        run("gather_rows", fd_check(&x6, &[3, 2], |g, x| {
            let y = g.gather_rows(x, &[2, 0, 2, 1]).unwrap();
            weighted_sum(g, y, "gather")
        }))?;

        let logits = seeded("logits", 12, -2.0, 2.0);
        run("softmax_xent", fd_check(&logits, &[3, 4], |g, x| {
            g.softmax_xent(x, &[0, 2, 3]).unwrap()
        }))?;

        let pred = seeded("pred", 10, -1.0, 1.0);
        let target = seeded("target", 10, -1.0, 1.0);
        run("mse", fd_check(&pred, &[2, 5], |g, x| {
            g.mse(x, &target).unwrap()
        }))?;

        // end to end: every parameter of a shrunken joint model (full kernel
        // count and embedding width 8, tiny input), training mode, all three
        // loss terms live
        let config = ModelConfig {
            input: FeatureKind::Mfcc,
            variant: Variant::SoftmaxReconCenter,
            kernels_per_path: 8,
            kernel_sizes: [(2, 2), (2, 3), (3, 2), (3, 3)],
            fc_width: 8,
            dropout: 0.5,
            lambda_center: 4.0,
            lambda_recon: 1.0,
            decoder_hidden: vec![8],
            custom_input_dims: Some((10, 12)),
            ..ModelConfig::default()
        };
        let model = Model::build(config, 0xE2E).unwrap();
        let mut rng = derive_rng(0xE2E, "batch");
        let batch: Vec<ser_core::dsp::FeatureMatrix> = (0..3)
            .map(|_| {
                let values = (0..120).map(|_| rng.gen::<f64>()).collect();
                ser_core::dsp::FeatureMatrix::new(FeatureKind::Mfcc, 10, 12, values).unwrap()
            })
            .collect();
        let labels = [0usize, 2, 3];

        let names: Vec<String> = model.params().keys().cloned().collect();
        let flat0: Vec<f64> = names
            .iter()
            .flat_map(|n| model.params()[n].values.iter().copied())
            .collect();
        let joint = |flat: &[f64]| -> f64 {
            let mut m = model.clone();
            let mut at = 0;
            for n in &names {
                let p = m.param_values_mut(n).unwrap();
                let len = p.len();
                p.copy_from_slice(&flat[at..at + len]);
                at += len;
            }
            let refs: Vec<&ser_core::dsp::FeatureMatrix> = batch.iter().collect();
            let mut streams = ser_core::model::DropoutStreams::new(0xD0);
            let mut fwd = m.forward_train(&refs, &mut streams).unwrap();
            m.joint_loss(&mut fwd, &labels).unwrap().total
        };
        let analytic: Vec<f64> = {
            let mut m = model.clone();
            let refs: Vec<&ser_core::dsp::FeatureMatrix> = batch.iter().collect();
            let mut streams = ser_core::model::DropoutStreams::new(0xD0);
            let mut fwd = m.forward_train(&refs, &mut streams).unwrap();
            let bundle = m.joint_loss(&mut fwd, &labels).unwrap();
            fwd.graph.backward(bundle.tensor).unwrap();
            let grads = fwd.param_grads();
            names.iter().flat_map(|n| grads[n].iter().copied()).collect()
        };
        // independent per-coordinate central differences. The loss is O(10),
        // so each evaluation carries a few 1e-9 of rounding scatter; a step
        // of 1e-3 keeps the slope noise near 1e-6 and the 1e-5 absolute term
        // absorbs it on near-inert coordinates (biases cancelled by batch
        // norm, relu-dead units) without exempting them from the check.
        // Asymmetric one-sided slopes mark a kink inside the probe interval
        // (a relu input can sit exactly at zero when a dropped-out row meets
        // a zero-initialized bias); central differences are invalid there.
        let h = 1e-3;
        let f0 = joint(&flat0);
        let mut probe = flat0.clone();
        let (mut checked, mut kinks) = (0usize, 0usize);
        for i in 0..flat0.len() {
            probe[i] = flat0[i] + h;
            let fp = joint(&probe);
            probe[i] = flat0[i] - h;
            let fm = joint(&probe);
            probe[i] = flat0[i];
            let (sl, sr) = ((fp - f0) / h, (f0 - fm) / h);
            if (sl - sr).abs() > 0.1 * sl.abs().max(sr.abs()) + 1e-5 {
                kinks += 1;
                continue;
            }
            checked += 1;
            let n = (fp - fm) / (2.0 * h);
            let a = analytic[i];
            check!(
                (a - n).abs() < 1e-5 + 1e-3 * a.abs().max(n.abs()),
                "end-to-end: coordinate {i} disagrees \
                 (analytic {a}, finite difference {n})"
            );
        }
        check!(
            checked >= flat0.len() * 3 / 4,
            "end-to-end: only {checked} of {} coordinates away from kinks \
             ({kinks} skipped)",
            flat0.len()
        );

        let elapsed = started.elapsed();
        check!(
            elapsed.as_secs() < 120,
            "gradient checks took {elapsed:?}, budget is two minutes"
        );
        Ok(())
    });
}

// ---------------------------------------------------------------- criterion 2

#[test]
fn c02_dsp_oracles() {
    criterion(2, "transforms match naive-definition oracles", || {
        // short clip so the O(n^2) direct transform stays affordable
        let full = synth_clip(EmotionClass::Anger, 0xD5F);
        let clip = AudioClip::new(full.samples[..3500].to_vec());
        let cfg = StftConfig::default();
        let got = stft_magnitude(&clip, &cfg).map_err(|e| e.to_string())?;

        let n = 2048usize;
        let hop = 512usize;
        let window: Vec<f64> = (0..n)
            .map(|k| 0.5 * (1.0 - (2.0 * PI * k as f64 / n as f64).cos()))
            .collect();
        let last = clip.samples.len() as isize - 1;
        let mirror = |mut i: isize| -> f64 {
            loop {
                if i < 0 {
                    i = -i;
                } else if i > last {
                    i = 2 * last - i;
                } else {
                    return clip.samples[i as usize];
                }
            }
        };
        let frames = 1 + clip.samples.len() / hop;
        check!(
            got.rows == n / 2 + 1 && got.cols == frames,
            "stft grid is {}x{}, expected {}x{frames}",
            got.rows,
            got.cols,
            n / 2 + 1
        );
        let mut max_diff = 0.0f64;
        for f in 0..frames {
            let start = f as isize * hop as isize - (n / 2) as isize;
            let frame: Vec<f64> = (0..n)
                .map(|k| mirror(start + k as isize) * window[k])
                .collect();
            for b in 0..=n / 2 {
                let (mut re, mut im) = (0.0, 0.0);
                for (k, v) in frame.iter().enumerate() {
                    let ang = -2.0 * PI * (b * k) as f64 / n as f64;
                    re += v * ang.cos();
                    im += v * ang.sin();
                }
                let mag = (re * re + im * im).sqrt();
                max_diff = max_diff.max((mag - got.get(b, f)).abs());
            }
        }
        check!(
            max_diff < 1e-6,
            "stft deviates from direct dft by {max_diff}"
        );

        // orthonormal DCT-II against the straight cosine sum
        let x = seeded("dct-in", 128, -1.0, 1.0);
        let got = dct2_ortho(&x, 40).map_err(|e| e.to_string())?;
        let nn = x.len() as f64;
        let mut max_dct = 0.0f64;
        for (k, g) in got.iter().enumerate() {
            let sum: f64 = x
                .iter()
                .enumerate()
                .map(|(i, v)| v * (PI / nn * (i as f64 + 0.5) * k as f64).cos())
                .sum();
            let scale = if k == 0 { (1.0 / nn).sqrt() } else { (2.0 / nn).sqrt() };
            max_dct = max_dct.max((g - scale * sum).abs());
        }
        check!(max_dct < 1e-8, "dct deviates from cosine sum by {max_dct}");
        Ok(())
    });
}

// ---------------------------------------------------------------- criterion 3

#[test]
fn c03_shape_contract() {
    criterion(3, "every path pools to 2x2 and concatenates to 3200", || {
        let cases = [
            (
                FeatureKind::MelSpectrogram,
                (128, 188),
                [(125, 183), (123, 181), (121, 179), (119, 177)],
                [(62, 91), (61, 90), (60, 89), (59, 88)],
            ),
            (
                FeatureKind::Mfcc,
                (40, 188),
                [(37, 183), (35, 181), (33, 179), (31, 177)],
                [(18, 91), (17, 90), (16, 89), (15, 88)],
            ),
        ];
        for (kind, input, conv, pool) in cases {
            let config = ModelConfig {
                input: kind,
                ..ModelConfig::default()
            };
            let model = Model::build(config, 1).map_err(|e| e.to_string())?;
            let dims = model.dims();
            check!(dims.input == input, "{kind}: input dims {:?}", dims.input);
            check!(
                dims.conv == conv,
                "{kind}: conv dims {:?}, expected {conv:?}",
                dims.conv
            );
            check!(
                dims.pool == pool,
                "{kind}: pool windows {:?}, expected {pool:?}",
                dims.pool
            );
            for i in 0..4 {
                let (ch, cw) = dims.conv[i];
                let (ph, pw) = dims.pool[i];
                check!(
                    ch / ph == 2 && cw / pw == 2,
                    "{kind}: path {i} pools to {}x{}",
                    ch / ph,
                    cw / pw
                );
            }
            check!(
                dims.concat_width == 3200,
                "{kind}: concat width {}",
                dims.concat_width
            );
        }

        // a geometry that cannot pool to 2x2 must be rejected up front
        let bad = ModelConfig {
            custom_input_dims: Some((6, 8)),
            kernel_sizes: [(4, 6), (4, 6), (4, 6), (4, 6)],
            ..ModelConfig::default()
        };
        match Model::build(bad, 1) {
            Err(ser_core::model::ModelError::ShapeContract(_)) => {}
            other => check!(
                false,
                "expected a shape-contract rejection, got {other:?}"
            ),
        }
        Ok(())
    });
}

// ---------------------------------------------------------------- criterion 4

#[test]
fn c04_parameter_budget() {
    criterion(4, "classifier holds 260,452 parameters", || {
        for kind in [FeatureKind::MelSpectrogram, FeatureKind::Mfcc] {
            for variant in Variant::ALL {
                let config = ModelConfig {
                    input: kind,
                    variant,
                    ..ModelConfig::default()
                };
                let model = Model::build(config, 2).map_err(|e| e.to_string())?;
                let count = model.param_count();
                check!(
                    count == 260_452,
                    "{kind}/{variant}: {count} classifier parameters"
                );
            }
        }
        // roughly 62% smaller than the 0.69M reference budget
        let reduction = 1.0 - 260_452.0 / 690_000.0_f64;
        check!(
            (reduction - 0.62).abs() < 0.01,
            "reduction vs reference is {reduction:.4}"
        );
        Ok(())
    });
}

// ---------------------------------------------------------------- criterion 5

#[test]
fn c05_adadelta_reference() {
    criterion(5, "optimizer reproduces the update recurrence", || {
        let mut st = AdadeltaState::new();
        let mut x = vec![0.0];
        st.apply("p", &mut x, &[1.0]).map_err(|e| e.to_string())?;
        check!(
            (x[0] - (-0.0044721)).abs() < 1e-7,
            "first step moved to {}, expected about -0.0044721",
            x[0]
        );

        // hundred steps on a quadratic bowl, against an independent scalar
        // recurrence carrying its own accumulators
        let mut st = AdadeltaState::new();
        let mut x = vec![0.8];
        let (mut ox, mut eg2, mut edx2) = (0.8f64, 0.0f64, 0.0f64);
        for step in 0..100 {
            let g = 2.0 * x[0];
            st.apply("p", &mut x, &[g]).map_err(|e| e.to_string())?;

            let og = 2.0 * ox;
            eg2 = 0.95 * eg2 + 0.05 * og * og;
            let dx = -((edx2 + 1e-6).sqrt() / (eg2 + 1e-6).sqrt()) * og;
            edx2 = 0.95 * edx2 + 0.05 * dx * dx;
            ox += dx;
            check!(
                (x[0] - ox).abs() < 1e-12,
                "trajectories diverged to {} vs {ox} at step {step}",
                x[0]
            );
        }
        check!(ox.abs() < 0.8, "optimizer failed to descend the bowl");
        Ok(())
    });
}

// ---------------------------------------------------------------- criterion 6

#[test]
fn c06_overfit_small_corpus() {
    criterion(6, "overfits 32 clips to 95% within 200 epochs", || {
        let started = Instant::now();
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let manifest = synth_corpus(dir.path(), &ClassBalance::Balanced { per_class: 8 }, 1, 0x0F)
            .map_err(|e| e.to_string())?;
        let feat_dir = dir.path().join("features");
        featurize(&manifest, FeatureKind::Mfcc, &feat_dir).map_err(|e| e.to_string())?;
        let store = FeatureStore::load_for_manifest(&feat_dir, &manifest, FeatureKind::Mfcc)
            .map_err(|e| e.to_string())?;

        let config = ModelConfig {
            input: FeatureKind::Mfcc,
            variant: Variant::Softmax,
            kernels_per_path: 8,
            fc_width: 16,
            dropout: 0.25,
            ..ModelConfig::default()
        };
        let mut model = Model::build(config, 0x0F).map_err(|e| e.to_string())?;
        // no early stopping: adadelta needs a long warm-up before its step
        // size adapts, and the budget is a fixed epoch count anyway
        let opts = TrainOptions {
            epochs: 200,
            batch_size: 16,
            seed: 0x0F,
            patience: None,
        };
        let log = train_model(&mut model, &manifest.entries, None, &store, &opts)
            .map_err(|e| e.to_string())?;
        let report = evaluate(&model, &manifest.entries, &store).map_err(|e| e.to_string())?;
        check!(
            report.metrics.overall >= 0.95,
            "training accuracy {} after {} epochs (first-epoch loss {:.4}, \
             last {:.4})",
            report.metrics.overall,
            log.epochs_run,
            log.curve.first().map(|p| p.total).unwrap_or(f64::NAN),
            log.curve.last().map(|p| p.total).unwrap_or(f64::NAN)
        );
        check!(log.epochs_run <= 200, "ran {} epochs", log.epochs_run);
        let elapsed = started.elapsed();
        check!(
            elapsed.as_secs() < 300,
            "overfit run took {elapsed:?}, budget is five minutes"
        );
        Ok(())
    });
}

// ---------------------------------------------------------------- criterion 7

#[test]
fn c07_center_loss_compacts_embeddings() {
    criterion(7, "center loss tightens held-out class clusters on every seed", || {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let manifest = synth_corpus(dir.path(), &ClassBalance::Balanced { per_class: 40 }, 3, 37)
            .map_err(|e| e.to_string())?;
        for (class, &n) in EmotionClass::ALL.iter().zip(&manifest.class_counts) {
            check!(n >= 40, "{class} has only {n} clips");
        }
        let feat_dir = dir.path().join("features");
        featurize(&manifest, FeatureKind::Mfcc, &feat_dir).map_err(|e| e.to_string())?;
        let store = FeatureStore::load_for_manifest(&feat_dir, &manifest, FeatureKind::Mfcc)
            .map_err(|e| e.to_string())?;

        // the embedded set is the whole first session — two voices the model
        // never trains on; with no validation set and no early stopping the
        // held-out clips cannot influence training
        let train: Vec<_> = manifest
            .entries
            .iter()
            .filter(|e| e.session != 1)
            .cloned()
            .collect();
        let held: Vec<_> = manifest
            .entries
            .iter()
            .filter(|e| e.session == 1)
            .cloned()
            .collect();

        let run = |variant: Variant, seed: u64| -> Result<f64, String> {
            let config = ModelConfig {
                input: FeatureKind::Mfcc,
                variant,
                kernels_per_path: 2,
                fc_width: 16,
                dropout: 0.25,
                lambda_center: 0.001,
                ..ModelConfig::default()
            };
            let mut model = Model::build(config, seed).map_err(|e| e.to_string())?;
            let opts = TrainOptions {
                epochs: 300,
                batch_size: 16,
                seed,
                patience: None,
            };
            train_model(&mut model, &train, None, &store, &opts).map_err(|e| e.to_string())?;
            let set = ser_core::analyze::export_embeddings(&model, &held, &store, None, seed)
                .map_err(|e| e.to_string())?;
            ser_core::analyze::compaction_ratio(&set).map_err(|e| e.to_string())
        };

        for seed in [11u64, 12, 13] {
            let plain = run(Variant::Softmax, seed)?;
            let centered = run(Variant::SoftmaxCenter, seed)?;
            check!(
                centered < plain,
                "seed {seed}: compaction {centered:.4} (with centers) vs {plain:.4} (without)"
            );
        }
        Ok(())
    });
}

// ---------------------------------------------------------------- criterion 8

#[test]
fn c08_zero_weights_reproduce_plain_softmax() {
    criterion(8, "zero-weighted joint variant is bit-identical to softmax", || {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let manifest = synth_corpus(dir.path(), &ClassBalance::Balanced { per_class: 4 }, 1, 0xC8)
            .map_err(|e| e.to_string())?;
        let feat_dir = dir.path().join("features");
        featurize(&manifest, FeatureKind::Mfcc, &feat_dir).map_err(|e| e.to_string())?;
        let store = FeatureStore::load_for_manifest(&feat_dir, &manifest, FeatureKind::Mfcc)
            .map_err(|e| e.to_string())?;

        let run = |variant: Variant| -> Result<Model, String> {
            let config = ModelConfig {
                input: FeatureKind::Mfcc,
                variant,
                kernels_per_path: 2,
                fc_width: 6,
                dropout: 0.5,
                lambda_center: 0.0,
                lambda_recon: 0.0,
                decoder_hidden: vec![8],
                ..ModelConfig::default()
            };
            let mut model = Model::build(config, 0xC8).map_err(|e| e.to_string())?;
            let opts = TrainOptions {
                epochs: 4,
                batch_size: 4,
                seed: 0xC8,
                patience: None,
            };
            train_model(&mut model, &manifest.entries, None, &store, &opts)
                .map_err(|e| e.to_string())?;
            Ok(model)
        };

        let plain = run(Variant::Softmax)?;
        let joint = run(Variant::SoftmaxReconCenter)?;
        for (name, p) in plain.params() {
            let q = &joint.params()[name];
            for (i, (a, b)) in p.values.iter().zip(&q.values).enumerate() {
                check!(
                    a.to_bits() == b.to_bits(),
                    "{name}[{i}] differs: {a:e} vs {b:e}"
                );
            }
        }
        for (layer, stat) in plain.running_stats() {
            let other = &joint.running_stats()[layer];
            check!(
                stat.mean
                    .iter()
                    .zip(&other.mean)
                    .all(|(a, b)| a.to_bits() == b.to_bits())
                    && stat
                        .var
                        .iter()
                        .zip(&other.var)
                        .all(|(a, b)| a.to_bits() == b.to_bits()),
                "running stats of {layer} differ"
            );
        }
        Ok(())
    });
}

// ---------------------------------------------------------------- criterion 9

#[test]
fn c09_no_leakage_across_splits() {
    criterion(9, "held-out speakers and sessions never reach training", || {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let manifest =
            synth_corpus(dir.path(), &ClassBalance::Balanced { per_class: 10 }, 5, 0xC9)
                .map_err(|e| e.to_string())?;
        let plans = make_fold_plans(&manifest).map_err(|e| e.to_string())?;
        check!(plans.len() == 5, "{} folds for 5 sessions", plans.len());

        let all_paths: BTreeSet<&str> =
            manifest.entries.iter().map(|e| e.clip_path.as_str()).collect();
        for plan in &plans {
            let (train, val, test) = split_for_fold(&manifest, plan);
            check!(!val.is_empty() && !test.is_empty(), "empty held-out split");
            check!(
                train.iter().all(|e| e.session != plan.held_out_session),
                "training data from the held-out session in fold {}",
                plan.label()
            );
            check!(
                val.iter().all(|e| e.session == plan.held_out_session)
                    && test.iter().all(|e| e.session == plan.held_out_session),
                "held-out split leaked across sessions in fold {}",
                plan.label()
            );
            check!(
                val.iter().all(|e| e.speaker == plan.val_speaker)
                    && test.iter().all(|e| e.speaker == plan.test_speaker)
                    && plan.val_speaker != plan.test_speaker,
                "speaker mixing in fold {}",
                plan.label()
            );
            let split_paths: BTreeSet<&str> = train
                .iter()
                .chain(&val)
                .chain(&test)
                .map(|e| e.clip_path.as_str())
                .collect();
            check!(
                split_paths == all_paths
                    && train.len() + val.len() + test.len() == manifest.entries.len(),
                "fold {} is not a partition of the corpus",
                plan.label()
            );
        }

        // audit an actual five-fold run: every batch of every fold
        let feat_dir = dir.path().join("features");
        featurize(&manifest, FeatureKind::Mfcc, &feat_dir).map_err(|e| e.to_string())?;
        let store = FeatureStore::load_for_manifest(&feat_dir, &manifest, FeatureKind::Mfcc)
            .map_err(|e| e.to_string())?;
        let config = ModelConfig {
            input: FeatureKind::Mfcc,
            variant: Variant::Softmax,
            kernels_per_path: 2,
            fc_width: 6,
            dropout: 0.25,
            ..ModelConfig::default()
        };
        let opts = TrainOptions {
            epochs: 2,
            batch_size: 16,
            seed: 0xC9,
            patience: Some(10),
        };
        let (report, outcomes) =
            cross_validate(&config, &manifest, &store, &opts).map_err(|e| e.to_string())?;
        check!(report.folds.len() == 5, "{} folds trained", report.folds.len());
        for outcome in &outcomes {
            let (train, val, test) = split_for_fold(&manifest, &outcome.plan);
            let train_paths: BTreeSet<&str> =
                train.iter().map(|e| e.clip_path.as_str()).collect();
            for e in val.iter().chain(&test) {
                check!(
                    !outcome.log.seen_paths.contains(&e.clip_path),
                    "{} was trained on in fold {} but belongs to a held-out split",
                    e.clip_path,
                    outcome.plan.label()
                );
            }
            check!(
                outcome
                    .log
                    .seen_paths
                    .iter()
                    .all(|p| train_paths.contains(p.as_str())),
                "fold {} training touched paths outside its split",
                outcome.plan.label()
            );
        }
        Ok(())
    });
}

// --------------------------------------------------------------- criterion 10

#[test]
fn c10_metric_arithmetic() {
    criterion(10, "accuracy metrics are exact on known confusions", || {
        // constant-Neutral predictor over the imbalanced reference profile
        let mut pairs = Vec::new();
        for (label, count) in [(0usize, 488usize), (1, 123), (2, 269), (3, 120)] {
            pairs.extend(std::iter::repeat((label, 0)).take(count));
        }
        let m = compute_metrics(&pairs).map_err(|e| e.to_string())?;
        check!(m.overall == 0.488, "overall accuracy {} != 0.488", m.overall);
        check!(m.class_mean == 0.25, "class accuracy {} != 0.25", m.class_mean);
        check!(
            m.confusion[0][0] == 488
                && m.confusion[1][0] == 123
                && m.confusion[2][0] == 269
                && m.confusion[3][0] == 120,
            "confusion matrix miscounted: {:?}",
            m.confusion
        );

        // mean recall over present classes only
        let m = compute_metrics(&[(0, 0), (0, 1), (1, 1), (1, 1), (3, 3)])
            .map_err(|e| e.to_string())?;
        check!(m.overall == 0.8, "overall {} != 0.8", m.overall);
        check!(
            m.class_mean == (0.5 + 1.0 + 1.0) / 3.0,
            "class mean {} over present classes",
            m.class_mean
        );

        // perfect and worst cases pin the range
        let m = compute_metrics(&[(2, 2), (1, 1)]).map_err(|e| e.to_string())?;
        check!(m.overall == 1.0 && m.class_mean == 1.0, "perfect case broke");
        let m = compute_metrics(&[(2, 1), (1, 2)]).map_err(|e| e.to_string())?;
        check!(m.overall == 0.0 && m.class_mean == 0.0, "worst case broke");
        Ok(())
    });
}

// --------------------------------------------------------------- criterion 11

fn ser(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_ser"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.code() != Some(0) {
        return Err(format!(
            "ser {:?} exited {:?}: {}",
            args,
            out.status.code(),
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    Ok(())
}

fn cli_pipeline(root: &Path) -> Result<(), String> {
    let corpus = root.join("corpus");
    let features = root.join("features");
    let s = |p: &Path| p.to_str().unwrap().to_string();
    ser(&[
        "synth", "--out-dir", &s(&corpus), "--per-class", "3", "--sessions", "2", "--seed", "41",
    ])?;
    ser(&[
        "featurize",
        "--manifest",
        &s(&corpus.join("manifest.csv")),
        "--input",
        "mfcc",
        "--features-dir",
        &s(&features),
    ])?;
    ser(&[
        "train",
        "--manifest",
        &s(&corpus.join("manifest.csv")),
        "--features-dir",
        &s(&features),
        "--fold",
        "1",
        "--variant",
        "s+a+c",
        "--kernels-per-path",
        "2",
        "--fc-width",
        "8",
        "--decoder-hidden",
        "12",
        "--dropout",
        "0.3",
        "--epochs",
        "2",
        "--batch-size",
        "4",
        "--patience",
        "0",
        "--seed",
        "41",
        "--model-out",
        &s(&root.join("model.serc")),
        "--curve-out",
        &s(&root.join("curve.csv")),
        "--metrics-out",
        &s(&root.join("metrics.csv")),
    ])?;
    ser(&[
        "embed",
        "--model",
        &s(&root.join("model.serc")),
        "--manifest",
        &s(&corpus.join("manifest.csv")),
        "--features-dir",
        &s(&features),
        "--out",
        &s(&root.join("embeddings.csv")),
        "--seed",
        "41",
    ])?;
    ser(&[
        "tsne",
        "--embeddings",
        &s(&root.join("embeddings.csv")),
        "--perplexity",
        "3",
        "--iters",
        "50",
        "--out",
        &s(&root.join("tsne.csv")),
        "--seed",
        "41",
    ])?;
    Ok(())
}

#[test]
fn c11_cli_reruns_are_byte_identical() {
    criterion(11, "identical commands produce identical bytes", || {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let a = dir.path().join("a");
        let b = dir.path().join("b");
        cli_pipeline(&a)?;
        cli_pipeline(&b)?;
        for file in [
            "corpus/manifest.csv",
            "model.serc",
            "model.serc.json",
            "curve.csv",
            "metrics.csv",
            "embeddings.csv",
            "tsne.csv",
        ] {
            let x = std::fs::read(a.join(file)).map_err(|e| format!("{file}: {e}"))?;
            let y = std::fs::read(b.join(file)).map_err(|e| format!("{file}: {e}"))?;
            check!(
                x == y,
                "{file} differs between identical invocations ({} vs {} bytes)",
                x.len(),
                y.len()
            );
        }
        // every feature cache file, byte for byte
        let mut caches = 0usize;
        for entry in std::fs::read_dir(a.join("features")).map_err(|e| e.to_string())? {
            let entry = entry.map_err(|e| e.to_string())?;
            let name = entry.file_name();
            let name = name.to_str().ok_or("non-utf8 cache name")?;
            check!(name.ends_with(".serf"), "unexpected file {name} in features dir");
            let x = std::fs::read(entry.path()).map_err(|e| e.to_string())?;
            let y = std::fs::read(b.join("features").join(name))
                .map_err(|e| format!("{name}: {e}"))?;
            check!(x == y, "feature cache {name} differs between identical invocations");
            caches += 1;
        }
        check!(caches == 12, "expected 12 feature caches, found {caches}");
        // clip synthesis itself is part of the contract
        let wav_a = std::fs::read_dir(a.join("corpus/clips"))
            .map_err(|e| e.to_string())?
            .count();
        check!(wav_a == 12, "expected 12 clips, found {wav_a}");
        Ok(())
    });
}
