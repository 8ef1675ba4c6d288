use std::sync::Arc;

use rand::{seq::SliceRandom, Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::backend::Architecture;
use crate::resample::{blur_resample, resample};
use crate::synthetic;

fn backend(arch: Architecture, seed: u64) -> Arc<FeatureBackend> {
    let width = match arch {
        Architecture::Vgg16 => 0.0625,
        _ => 0.125,
    };
    Arc::new(FeatureBackend::random(arch, width, seed).unwrap())
}

/// Scene squeezed into [0.1, 0.9] so finite-difference probes stay in range,
/// with a little noise so flat regions do not produce exact max-pool ties.
fn interior_scene(seed: u64, w: usize, h: usize) -> Image {
    let s = synthetic::scene(seed, w, h);
    let n = synthetic::noise(seed, w, h);
    let data = s.data().iter().zip(n.data()).map(|(v, e)| 0.1 + 0.78 * v + 0.02 * e).collect();
    Image::from_planar(format!("scene-{seed}"), w, h, data).unwrap()
}

fn random_tensor(r: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> ActivationTensor {
    ActivationTensor::new(c, h, w, (0..c * h * w).map(|_| r.gen::<f64>() * 3.0).collect()).unwrap()
}

/// Direct double loop over positions and bins.
fn histogram_oracle(t: &ActivationTensor, centers: &[f64], sigma: f64, m: f64) -> Vec<Vec<f64>> {
    let mut out = vec![vec![0.0; centers.len()]; t.channels()];
    for (c, row) in out.iter_mut().enumerate() {
        for y in 0..t.height() {
            for x in 0..t.width() {
                let a = t.get(c, y, x) / m;
                for (k, b) in centers.iter().enumerate() {
                    row[k] += (-(a - b).powi(2) / (2.0 * sigma * sigma)).exp();
                }
            }
        }
    }
    out
}

#[test]
fn soft_histogram_matches_brute_force() {
    let mut r = ChaCha8Rng::seed_from_u64(11);
    let t = random_tensor(&mut r, 2, 3, 3);
    let spec = HistogramSpec::default();
    let m = t.max();
    let fast = soft_histogram(&t, &spec, m).unwrap();
    let slow = histogram_oracle(&t, &spec.bin_centers, spec.sigma, m);
    for c in 0..2 {
        for k in 0..spec.bins() {
            assert!((fast[c * spec.bins() + k] - slow[c][k]).abs() < 1e-6);
        }
    }
}

#[test]
fn tensor_loss_cases() {
    let mut r = ChaCha8Rng::seed_from_u64(12);
    let t = random_tensor(&mut r, 3, 2, 2);
    assert_eq!(tensor_loss(&t, &t).unwrap(), 0.0);

    let delta = 0.37;
    let mut d = t.data().to_vec();
    d[5] += delta;
    let x = ActivationTensor::new(3, 2, 2, d).unwrap();
    let m = t.max();
    let want = delta * delta / (m * m * 12.0);
    assert!((tensor_loss(&x, &t).unwrap() - want).abs() < 1e-12);

    let x = random_tensor(&mut r, 3, 2, 2);
    let mut brute = 0.0;
    for c in 0..3 {
        for y in 0..2 {
            for xx in 0..2 {
                brute += (x.get(c, y, xx) / m - t.get(c, y, xx) / m).powi(2);
            }
        }
    }
    brute /= 12.0;
    assert!((tensor_loss(&x, &t).unwrap() - brute).abs() < 1e-9);

    let zero = ActivationTensor::new(3, 2, 2, vec![0.0; 12]).unwrap();
    assert!(matches!(tensor_loss(&x, &zero), Err(Error::DegenerateTarget(_))));
    let other = ActivationTensor::new(3, 1, 4, vec![1.0; 12]).unwrap();
    assert!(matches!(tensor_loss(&other, &t), Err(Error::ShapeMismatch(_))));
}

#[test]
fn histogram_loss_matches_oracle() {
    let mut r = ChaCha8Rng::seed_from_u64(13);
    let spec = HistogramSpec::default();
    for _ in 0..5 {
        let x = random_tensor(&mut r, 4, 3, 2);
        let t = random_tensor(&mut r, 4, 3, 2);
        let m = t.max();
        let ux = histogram_oracle(&x, &spec.bin_centers, spec.sigma, m);
        let ut = histogram_oracle(&t, &spec.bin_centers, spec.sigma, m);
        let n = 6.0;
        let want: f64 = ux
            .iter()
            .zip(&ut)
            .map(|(a, b)| a.iter().zip(b).map(|(p, q)| ((p - q) / n).powi(2)).sum::<f64>().sqrt())
            .sum::<f64>()
            / 4.0;
        assert!((histogram_loss(&x, &t, &spec).unwrap() - want).abs() < 1e-6);

        let mut raw = spec.clone();
        raw.normalize_counts = false;
        let want_raw: f64 = ux
            .iter()
            .zip(&ut)
            .map(|(a, b)| a.iter().zip(b).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt())
            .sum::<f64>()
            / 4.0;
        assert!((histogram_loss(&x, &t, &raw).unwrap() - want_raw).abs() < 1e-6);
    }
}

fn permuted(t: &ActivationTensor, r: &mut ChaCha8Rng) -> ActivationTensor {
    let s = t.spatial();
    let mut data = Vec::with_capacity(t.len());
    for c in 0..t.channels() {
        let mut ch = t.channel(c).to_vec();
        ch.shuffle(r);
        data.extend(ch);
        debug_assert_eq!(data.len(), (c + 1) * s);
    }
    ActivationTensor::new(t.channels(), t.height(), t.width(), data).unwrap()
}

#[test]
fn implication_chain_tensor_hist_desc() {
    let mut r = ChaCha8Rng::seed_from_u64(14);
    let spec = HistogramSpec::default();
    let t = random_tensor(&mut r, 5, 4, 3);
    let pairs = vec![
        (t.clone(), t.clone()),
        (permuted(&t, &mut r), t.clone()),
        (random_tensor(&mut r, 5, 4, 3), t.clone()),
    ];
    let mut hist_zero = 0;
    for (x, tt) in &pairs {
        let lt = tensor_loss(x, tt).unwrap();
        let lh = histogram_loss(x, tt, &spec).unwrap();
        if lt == 0.0 {
            assert!(lh < 1e-12);
        }
        if lh < 1e-12 {
            hist_zero += 1;
            for p in [PoolingKind::Mac, PoolingKind::Spoc, PoolingKind::gem()] {
                assert!(descriptor_loss(x, tt, p).unwrap() < 1e-12, "{p}");
            }
        }
    }
    // identical and permuted pairs both reach the histogram premise
    assert_eq!(hist_zero, 2);
}

#[test]
fn image_losses_vanish_on_identical_inputs() {
    let a = backend(Architecture::AlexNet, 1);
    let x = interior_scene(1, 96, 72);
    for p in PoolingKind::all() {
        assert!(loss_desc(&x, &x, &a, p).unwrap().abs() < 1e-12);
    }
    assert_eq!(loss_tensor(&x, &x, &a).unwrap(), 0.0);
    assert!(loss_hist(&x, &x, &a, &HistogramSpec::default()).unwrap() < 1e-12);
    assert!(loss_pool_ensemble(&x, &x, &a, &PoolingKind::all()).unwrap() < 1e-12);
    let spec = PerformanceLossSpec::new(
        PerformanceLossKind::Hist(HistogramSpec::default()),
        ResolutionSet::new([72, 96], true).unwrap(),
        vec![a.clone()],
    )
    .unwrap();
    assert!(loss_multiresolution(&x, &x, &spec).unwrap() < 1e-12);
    assert_eq!(total_loss(&x, &x, &x, &spec, 3.0).unwrap(), loss_multiresolution(&x, &x, &spec).unwrap());
}

#[test]
fn desc_loss_matches_direct_pooling() {
    let a = backend(Architecture::AlexNet, 2);
    let x = interior_scene(2, 96, 72);
    let t = interior_scene(3, 96, 72);
    for p in PoolingKind::all() {
        let hx = pool(&a.forward(&x).unwrap(), p).unwrap();
        let ht = pool(&a.forward(&t).unwrap(), p).unwrap();
        let want = 1.0 - hx.dot(&ht);
        assert!((loss_desc(&x, &t, &a, p).unwrap() - want).abs() < 1e-12, "{p}");
    }
}

#[test]
fn ensembles_are_member_means() {
    let a = backend(Architecture::AlexNet, 3);
    let x = interior_scene(4, 96, 72);
    let t = interior_scene(5, 96, 72);
    let gem = loss_desc(&x, &t, &a, PoolingKind::gem()).unwrap();
    assert_eq!(loss_pool_ensemble(&x, &t, &a, &[PoolingKind::gem()]).unwrap(), gem);

    let set = [PoolingKind::Mac, PoolingKind::Spoc, PoolingKind::gem()];
    let mean = set.iter().map(|p| loss_desc(&x, &t, &a, *p).unwrap()).sum::<f64>() / 3.0;
    assert!((loss_pool_ensemble(&x, &t, &a, &set).unwrap() - mean).abs() < 1e-9);

    let r = backend(Architecture::ResNet18, 4);
    let spec = PerformanceLossSpec::new(
        PerformanceLossKind::Tensor,
        ResolutionSet::single(96).unwrap(),
        vec![a.clone(), r.clone()],
    )
    .unwrap();
    let mean = (loss_tensor(&x, &t, &a).unwrap() + loss_tensor(&x, &t, &r).unwrap()) / 2.0;
    assert!((loss_multiresolution(&x, &t, &spec).unwrap() - mean).abs() < 1e-9);
}

#[test]
fn multiresolution_is_mean_of_resampled_terms() {
    let a = backend(Architecture::AlexNet, 5);
    let x = interior_scene(6, 128, 96);
    let t = interior_scene(7, 128, 96);
    let spec = HistogramSpec::default();

    let single = PerformanceLossSpec::new(
        PerformanceLossKind::Hist(spec.clone()),
        ResolutionSet::single(128).unwrap(),
        vec![a.clone()],
    )
    .unwrap();
    assert_eq!(
        loss_multiresolution(&x, &t, &single).unwrap(),
        loss_hist(&x, &t, &a, &spec).unwrap()
    );

    for blur in [false, true] {
        let multi = PerformanceLossSpec::new(
            PerformanceLossKind::Hist(spec.clone()),
            ResolutionSet::new([80, 112], blur).unwrap(),
            vec![a.clone()],
        )
        .unwrap();
        let mut want = 0.0;
        for s in [80, 112] {
            let view = |img: &Image| if blur { blur_resample(img, s) } else { resample(img, s) };
            let xs = view(&x).unwrap();
            let ts = view(&t).unwrap();
            want += loss_hist(&xs, &ts, &a, &spec).unwrap() / 2.0;
        }
        assert!((loss_multiresolution(&x, &t, &multi).unwrap() - want).abs() < 1e-9, "blur={blur}");
    }
}

#[test]
fn distortion_and_total() {
    let c = interior_scene(8, 64, 64);
    assert_eq!(distortion(&c, &c).unwrap(), 0.0);
    let shifted = Image::from_planar("s", 64, 64, c.data().iter().map(|v| v + 0.1).collect()).unwrap();
    assert!((distortion(&shifted, &c).unwrap() - 0.01).abs() < 1e-12);

    let a = backend(Architecture::AlexNet, 6);
    let x = interior_scene(9, 96, 72);
    let t = interior_scene(10, 96, 72);
    let xc = interior_scene(11, 96, 72);
    let spec = PerformanceLossSpec::new(
        PerformanceLossKind::Desc(PoolingKind::gem()),
        ResolutionSet::single(96).unwrap(),
        vec![a.clone()],
    )
    .unwrap();
    let perf = loss_desc(&x, &t, &a, PoolingKind::gem()).unwrap();
    let mut dist = 0.0;
    for (p, q) in x.data().iter().zip(xc.data()) {
        dist += (p - q) * (p - q);
    }
    dist /= (3 * 96 * 72) as f64;
    assert_eq!(total_loss(&x, &t, &xc, &spec, 0.0).unwrap(), perf);
    assert!((total_loss(&x, &t, &xc, &spec, 2.0).unwrap() - (perf + 2.0 * dist)).abs() < 1e-9);
}

#[test]
fn nontargeted_cases() {
    let a = backend(Architecture::AlexNet, 7);
    let c = interior_scene(12, 96, 72);
    assert!((loss_nontargeted(&c, &c, &a, PoolingKind::gem(), 0.0).unwrap() - 1.0).abs() < 1e-12);
    let x = interior_scene(13, 96, 72);
    let hx = pool(&a.forward(&x).unwrap(), PoolingKind::gem()).unwrap();
    let hc = pool(&a.forward(&c).unwrap(), PoolingKind::gem()).unwrap();
    let want = hx.dot(&hc) + distortion(&x, &c).unwrap();
    assert!((loss_nontargeted(&x, &c, &a, PoolingKind::gem(), 1.0).unwrap() - want).abs() < 1e-9);
}

/// Relative error `‖fd − an‖ / max(‖fd‖, ‖an‖)` over `n` random coordinates,
/// with central differences of step `h`. Coordinates whose probe interval
/// contains a kink (central differences at `h` and `h / 10` disagree) are
/// replaced by fresh ones; the choice never looks at the analytic gradient.
fn gradient_error(f: impl Fn(&Image) -> f64, x: &Image, grad: &[f64], n: usize, seed: u64) -> f64 {
    let h = 1e-3;
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let (mut num, mut den_fd, mut den_an) = (0.0, 0.0, 0.0);
    let mut used = 0;
    for _ in 0..20 * n {
        if used == n {
            break;
        }
        let i = r.gen_range(0..x.len());
        let central = |step: f64| {
            let probe = |delta: f64| {
                let mut d = x.data().to_vec();
                d[i] += delta;
                f(&Image::from_planar("p", x.width(), x.height(), d).unwrap())
            };
            (probe(step) - probe(-step)) / (2.0 * step)
        };
        let fd = central(h);
        let fine = central(h / 10.0);
        if (fd - fine).abs() > 1e-3 * fd.abs().max(fine.abs()) + 1e-9 {
            continue;
        }
        used += 1;
        num += (fd - grad[i]).powi(2);
        den_fd += fd * fd;
        den_an += grad[i] * grad[i];
    }
    assert_eq!(used, n, "too few smooth coordinates");
    num.sqrt() / den_fd.sqrt().max(den_an.sqrt()).max(1e-300)
}

#[test]
fn objective_gradients_match_finite_differences() {
    let a = backend(Architecture::AlexNet, 8);
    let r = backend(Architecture::ResNet18, 9);
    let x = interior_scene(14, 96, 72);
    let t = interior_scene(15, 96, 72);
    let mut kinds: Vec<PerformanceLossKind> = PoolingKind::all().into_iter().map(PerformanceLossKind::Desc).collect();
    kinds.push(PerformanceLossKind::Tensor);
    kinds.push(PerformanceLossKind::Hist(HistogramSpec::default()));
    kinds.push(PerformanceLossKind::PoolEnsemble(PoolingKind::all().to_vec()));
    for (k, kind) in kinds.into_iter().enumerate() {
        for (set, backends) in [
            (ResolutionSet::single(96).unwrap(), vec![a.clone()]),
            (ResolutionSet::new([72, 96], true).unwrap(), vec![a.clone(), r.clone()]),
        ] {
            let spec = PerformanceLossSpec::new(kind.clone(), set, backends).unwrap();
            let obj = TargetedObjective::new(&t, &spec).unwrap();
            let (v, g) = obj.value_and_gradient(&x).unwrap();
            assert_eq!(v, obj.value(&x).unwrap());
            let err = gradient_error(|y| obj.value(y).unwrap(), &x, &g, 20, k as u64);
            assert!(err < 1e-2, "{}: relative error {err}", spec.label());
        }
    }
}

#[test]
fn distortion_and_nontargeted_gradients() {
    let a = backend(Architecture::AlexNet, 10);
    let x = interior_scene(16, 96, 72);
    let c = interior_scene(17, 96, 72);
    let g = distortion_gradient(&x, &c).unwrap();
    assert!(gradient_error(|y| distortion(y, &c).unwrap(), &x, &g, 20, 1) < 1e-6);
    for p in PoolingKind::all() {
        let (v, g) = loss_nontargeted_with_gradient(&x, &c, &a, p, 0.5).unwrap();
        assert!((v - loss_nontargeted(&x, &c, &a, p, 0.5).unwrap()).abs() < 1e-12);
        let err = gradient_error(|y| loss_nontargeted(y, &c, &a, p, 0.5).unwrap(), &x, &g, 20, 2);
        assert!(err < 1e-2, "{p}: {err}");
    }
}

#[test]
fn objective_rejects_other_sizes() {
    let a = backend(Architecture::AlexNet, 11);
    let t = interior_scene(18, 96, 72);
    let spec = PerformanceLossSpec::new(
        PerformanceLossKind::Desc(PoolingKind::Mac),
        ResolutionSet::single(96).unwrap(),
        vec![a],
    )
    .unwrap();
    let obj = TargetedObjective::new(&t, &spec).unwrap();
    assert!(matches!(obj.value(&interior_scene(1, 72, 96)), Err(Error::ShapeMismatch(_))));
}

mod properties {
    use super::*;
    use proptest::prelude::*;

    fn tensor_strategy() -> impl Strategy<Value = ActivationTensor> {
        (1usize..4, 1usize..4, 1usize..4).prop_flat_map(|(c, h, w)| {
            prop::collection::vec(0.0f64..4.0, c * h * w)
                .prop_map(move |d| ActivationTensor::new(c, h, w, d).unwrap())
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn losses_nonnegative_and_zero_on_self(t in tensor_strategy(), seed in any::<u64>()) {
            prop_assume!(t.max() > 0.0);
            let spec = HistogramSpec::default();
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let x = permuted(&t, &mut r);
            prop_assert!(tensor_loss(&x, &t).unwrap() >= 0.0);
            prop_assert_eq!(tensor_loss(&t, &t).unwrap(), 0.0);
            prop_assert!(histogram_loss(&t, &t, &spec).unwrap().abs() < 1e-12);
            // any spatial permutation within channels leaves the histogram loss at zero
            prop_assert!(histogram_loss(&x, &t, &spec).unwrap() < 1e-9);
            for p in [PoolingKind::Mac, PoolingKind::Spoc, PoolingKind::gem()] {
                if let Ok(v) = descriptor_loss(&x, &t, p) {
                    prop_assert!(v >= 0.0);
                }
            }
        }
    }
}

