//! Scratch calibration for the compaction comparison (held-out protocol).

use ser_core::analyze::{compaction_ratio, export_embeddings};
use ser_core::audio::{synth_corpus, ClassBalance};
use ser_core::dsp::{featurize, FeatureKind, FeatureStore};
use ser_core::model::{ModelConfig, Variant};
use ser_core::train::{fit, make_fold_plans, TrainOptions};

#[test]
#[ignore]
fn sweep() {
    let dir = tempfile::tempdir().expect("tempdir");
    let manifest = synth_corpus(dir.path(), &ClassBalance::Balanced { per_class: 40 }, 3, 37)
        .expect("corpus");
    let feat_dir = dir.path().join("features");
    featurize(&manifest, FeatureKind::Mfcc, &feat_dir).expect("featurize");
    let store = FeatureStore::load_for_manifest(&feat_dir, &manifest, FeatureKind::Mfcc)
        .expect("store");
    let plans = make_fold_plans(&manifest).expect("plans");
    let plan = &plans[0];

    for &seed in &[11u64, 12, 13] {
        for &(variant, lam, dropout, epochs) in &[
            (Variant::Softmax, 0.0, 0.25, 300usize),
            (Variant::SoftmaxCenter, 0.001, 0.25, 300usize),
            (Variant::SoftmaxCenter, 0.002, 0.25, 300usize),
        ] {
            let config = ModelConfig {
                input: FeatureKind::Mfcc,
                variant,
                kernels_per_path: 2,
                fc_width: 16,
                dropout,
                lambda_center: lam,
                ..ModelConfig::default()
            };
            let options = TrainOptions {
                epochs,
                batch_size: 16,
                seed,
                patience: None,
            };
            let t0 = std::time::Instant::now();
            let outcome = fit(&config, &manifest, &store, plan, &options).expect("fit");
            let (_, val, test) = ser_core::train::split_for_fold(&manifest, plan);
            let mut held = val;
            held.extend(test);
            let set = export_embeddings(&outcome.model, &held, &store, None, seed)
                .expect("embed");
            let ratio = match compaction_ratio(&set) {
                Ok(r) => format!("{r:.4}"),
                Err(e) => format!("err({e})"),
            };
            let first = outcome.log.curve.first().expect("curve");
            let last = outcome.log.curve.last().expect("curve");
            eprintln!(
                "seed {seed} {variant:?}/{lam} d{dropout} ep{epochs}: ratio {ratio} test_acc {:.3} loss {:.3}->{:.3} ({:.0?})",
                outcome.test.metrics.overall,
                first.total,
                last.total,
                t0.elapsed(),
            );

            // end-state geometry
            let model = &outcome.model;
            let gamma = &model.params()["cls/bn/gamma"].values;
            let beta = &model.params()["cls/bn/beta"].values;
            let mg: f64 = gamma.iter().map(|g| g.abs()).sum::<f64>() / gamma.len() as f64;
            let mb: f64 = beta.iter().map(|b| b.abs()).sum::<f64>() / beta.len() as f64;
            let dim = model.config().fc_width;
            // per-class test centroids, numerator and denominator pieces
            let mut cent = vec![vec![0.0f64; dim]; 4];
            let mut count = [0usize; 4];
            for (i, l) in set.labels.iter().enumerate() {
                for (s, v) in cent[l.index()].iter_mut().zip(set.row(i)) {
                    *s += v;
                }
                count[l.index()] += 1;
            }
            for (c, n) in cent.iter_mut().zip(count) {
                for v in c.iter_mut() {
                    *v /= n as f64;
                }
            }
            let mut intra = 0.0;
            for (i, l) in set.labels.iter().enumerate() {
                let c = &cent[l.index()];
                let d2: f64 =
                    set.row(i).iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum();
                intra += d2.sqrt();
            }
            intra /= set.labels.len() as f64;
            let mut spread = 0.0;
            let mut pairs = 0;
            for a in 0..4 {
                for b in a + 1..4 {
                    let d2: f64 = cent[a]
                        .iter()
                        .zip(&cent[b])
                        .map(|(x, y)| (x - y) * (x - y))
                        .sum();
                    spread += d2.sqrt();
                    pairs += 1;
                }
            }
            spread /= pairs as f64;
            let mut cmsg = String::new();
            if let Some(cs) = model.params().get("centers") {
                for cl in 0..4 {
                    let n2: f64 = cs.values[cl * dim..(cl + 1) * dim]
                        .iter()
                        .map(|v| v * v)
                        .sum();
                    cmsg.push_str(&format!(" |c{cl}|={:.3}", n2.sqrt()));
                }
            }
            eprintln!(
                "  gamma|.|={mg:.3} beta|.|={mb:.3} intra={intra:.3} spread={spread:.3}{cmsg}"
            );
        }
    }
}
