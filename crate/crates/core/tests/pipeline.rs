//! Invariants that need a trained recognizer: the dataset gate, training
//! trend, PMT descent and metric reductions.

use std::sync::OnceLock;

use pmt_core::data::{gen_identity, make_pairs, render_face, AugmentMode, VerificationPair};
use pmt_core::metrics::{self, cos_sim, UpParams};
use pmt_core::model::DEFAULT_SPLIT;
use pmt_core::pmt::{init_obfuscation, pmt_protect, InitMode, KernelSpec, PmtConfig};
use pmt_core::train::{train_recognizer, TrainConfig, Trained};
use pmt_core::{Image, ModelSpec};

const IDS: u64 = 8;

fn train_set() -> Vec<(Image, usize)> {
    (0..IDS)
        .flat_map(|i| {
            let p = gen_identity(1000 + i);
            (0..12).map(move |v| (render_face(&p, v), i as usize))
        })
        .collect()
}

fn held_out_pairs(n: usize) -> Vec<VerificationPair> {
    let ids: Vec<u64> = (0..IDS).map(|i| 1000 + i).collect();
    make_pairs(&ids, &(50..56).collect::<Vec<_>>(), n, 3).unwrap()
}

fn trained() -> &'static Trained {
    static MODEL: OnceLock<Trained> = OnceLock::new();
    MODEL.get_or_init(|| {
        let cfg = TrainConfig { epochs: 15, seed: 4, ..TrainConfig::default() };
        train_recognizer(&ModelSpec::toy_recognizer(Some(IDS as usize)), &train_set(), &cfg).unwrap()
    })
}

#[test]
fn recognizer_passes_the_accuracy_gate() {
    let acc = metrics::clean_accuracy(&trained().model, &held_out_pairs(40), metrics::DEFAULT_KAPPA).unwrap();
    assert!(acc >= 0.9, "held-out verification accuracy {acc}");
}

#[test]
fn epoch_losses_trend_down() {
    let losses = &trained().epoch_losses;
    for w in losses.windows(2) {
        assert!(w[1] <= w[0] * 1.02, "epoch loss rose: {losses:?}");
    }
    assert!(losses.last().unwrap() < &(0.5 * losses[0]));
}

#[test]
fn embeddings_are_unit_norm() {
    for (x, _) in train_set().iter().take(10) {
        let e = trained().model.embed(x).unwrap();
        assert!((e.l2_norm() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn identity_transform_reduces_to_pair_accuracy() {
    let model = &trained().model;
    let pairs = held_out_pairs(20);
    for kappa in [0.2, 0.5, 0.9] {
        let mut hits = 0;
        for p in &pairs {
            let c = cos_sim(&model.embed(&p.first).unwrap(), &model.embed(&p.second).unwrap()).unwrap();
            hits += ((c > kappa) == p.same) as usize;
        }
        let direct = hits as f64 / pairs.len() as f64;
        assert_eq!(metrics::clean_accuracy(model, &pairs, kappa).unwrap(), direct);
    }
}

#[test]
fn pmt_loss_mostly_descends_with_small_steps() {
    // The step is a mean per-pixel length, so 0.001 moves the image by far
    // more than an unscaled unit-L1 step of 0.01 would.
    let shallow = trained().model.split(DEFAULT_SPLIT).unwrap().shallow;
    let x = render_face(&gen_identity(1001), 60);
    let cfg =
        PmtConfig { iterations: 60, step: 0.001, augment: AugmentMode::None, kernel: KernelSpec::None, seed: 8, ..PmtConfig::default() };
    let obf = pmt_protect(&x, &shallow, &cfg).unwrap();
    let trace = &obf.loss_trace;
    let down = trace.windows(2).filter(|w| w[1] <= w[0]).count();
    assert!(down as f64 >= 0.95 * (trace.len() - 1) as f64, "{down} of {} steps descend", trace.len() - 1);
    assert!(trace.last().unwrap() < &trace[0]);

    let again = pmt_protect(&x, &shallow, &cfg).unwrap();
    assert!(again.image.bit_eq(&obf.image));
    assert!(obf.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn default_pmt_keeps_identity_and_hides_appearance() {
    let model = &trained().model;
    let shallow = model.split(DEFAULT_SPLIT).unwrap().shallow;
    let x = render_face(&gen_identity(1002), 61);
    let obf = pmt_protect(&x, &shallow, &PmtConfig { seed: 2, ..PmtConfig::default() }).unwrap();
    let cos = cos_sim(&model.embed(&obf.image).unwrap(), &model.embed(&x).unwrap()).unwrap();
    assert!(cos > 0.5, "embedding cosine {cos}");
    assert!(metrics::ssim(&obf.image, &x).unwrap() < 0.4);
}

#[test]
fn permute_init_keeps_the_pixel_multiset() {
    let x = render_face(&gen_identity(3), 0);
    let y = init_obfuscation(&x, InitMode::RandomPermute, 9).unwrap();
    let sorted = |t: &Image| {
        let mut v = t.data().to_vec();
        v.sort_by(f64::total_cmp);
        v
    };
    assert_eq!(sorted(&x), sorted(&y));
    assert!(!x.bit_eq(&y));
}

#[test]
fn up_utility_non_increasing_in_kappa() {
    let model = &trained().model;
    let originals: Vec<Image> = (0..4).map(|i| render_face(&gen_identity(1000 + i), 70)).collect();
    let protected: Vec<Image> =
        originals.iter().enumerate().map(|(i, x)| init_obfuscation(x, InitMode::GaussianBlur, i as u64).unwrap()).collect();
    let mut last = f64::INFINITY;
    for kappa in [-0.5, 0.0, 0.3, 0.6, 0.9, 0.99] {
        let params = UpParams { kappa, trials: 3, seed: 5, ..UpParams::default() };
        let a = metrics::up_metric(&originals, &protected, model, &params).unwrap();
        let b = metrics::up_metric(&originals, &protected, model, &params).unwrap();
        assert_eq!(a, b);
        assert!(a.utility <= last);
        last = a.utility;
    }
}
