//! Module invariants as property checks. Each runs `CASES` random cases on a
//! deterministic generator and reports the first counterexample.

use dull::data::{InputShape, InputStore, TrainingSet};
use dull::forge::{
    build_longtail, class_rank, empirical_transition_matrix, imbalance_factor, inject_t2h_noise,
    LabeledDataset,
};
use dull::harness::{
    evaluate, read_record, run_experiment, write_record, DataSpec, ExperimentConfig, SourceSpec,
};
use dull::ifd::{
    ifd_head, lsm_metric, om_metric, orthogonality_grad, orthogonality_penalty, sparsity_grad,
    sparsity_penalty, IfdConfig, SparsityNorm,
};
use dull::ifpu::{ifpu_head, instance_mask, unlearn_finetune, IfpuConfig, IfpuTarget};
use dull::mixer::{
    mixup, multilabel_distribution, select_pairs, similarity_matrix, smooth_labels, MixerConfig,
};
use dull::net::{project_g, Classifier, CorrelationMatrix, ModelBundle, ModelConfig};
use dull::nn::BackboneConfig;
use dull::plots::emit_plots;
use dull::relabel::{build_multilabel, fused_confidence, jsd, label_count, RelabelConfig};
use dull::rng::seeded;
use dull::synth::BlobConfig;
use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestCaseError, TestRng, TestRunner};

pub const CASES: u32 = 1000;

pub type Property = fn() -> Result<(), String>;

fn check<S: Strategy>(
    strategy: S,
    test: impl Fn(S::Value) -> Result<(), TestCaseError>,
) -> Result<(), String> {
    let config = Config {
        cases: CASES,
        failure_persistence: None,
        ..Config::default()
    };
    let mut runner =
        TestRunner::new_with_rng(config, TestRng::deterministic_rng(RngAlgorithm::ChaCha));
    runner.run(&strategy, test).map_err(|e| e.to_string())
}

fn simplex(c: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..1.0, c).prop_map(|v| {
        let v: Vec<f64> = v.iter().map(|x| x + 1e-3).collect();
        let s: f64 = v.iter().sum();
        v.iter().map(|x| x / s).collect()
    })
}

fn g_matrix(k: usize, c: usize) -> impl Strategy<Value = CorrelationMatrix> {
    prop::collection::vec(prop_oneof![Just(0.0), Just(1.0), 0.0f64..1.0], k * c)
        .prop_map(move |v| CorrelationMatrix::new(k, c, v).unwrap())
}

/// (class count, imbalance factor, noise ratio, seed) over small long-tailed sets.
fn forge_case() -> impl Strategy<Value = (usize, usize, f64, f64, u64)> {
    (
        2usize..12,
        20usize..120,
        1.0f64..20.0,
        0.0f64..0.95,
        any::<u64>(),
    )
}

fn forged(
    c: usize,
    per: usize,
    factor: f64,
    r: f64,
    seed: u64,
) -> Option<(LabeledDataset, dull::forge::NoisyDataset)> {
    let source = LabeledDataset::balanced(c, per).ok()?;
    let lt = build_longtail(&source, factor, seed).ok()?;
    let noisy = inject_t2h_noise(&lt, r, seed).ok()?;
    Some((lt, noisy))
}

pub fn forge_unidirectional() -> Result<(), String> {
    check(forge_case(), |(c, per, factor, r, seed)| {
        let Some((_, noisy)) = forged(c, per, factor, r, seed) else {
            return Ok(());
        };
        for i in &noisy.instances {
            prop_assert!(
                i.observed_label <= i.true_label,
                "{i:?} moved to a smaller-index class"
            );
            if i.true_label == 0 {
                prop_assert_eq!(i.observed_label, 0);
            }
        }
        Ok(())
    })
}

pub fn forge_noise_ratio_fidelity() -> Result<(), String> {
    check((0.0f64..0.95, any::<u64>(), 3usize..8), |(r, seed, c)| {
        // |S| ≥ 10⁴ transferable instances
        let per = 10_000 / (c - 1) + 1;
        let source = LabeledDataset::balanced(c, per).unwrap();
        let noisy = inject_t2h_noise(&source, r, seed).unwrap();
        let transferable = noisy.instances.iter().filter(|i| i.true_label != 0).count();
        prop_assert!(transferable >= 10_000);
        let frac = noisy.flip_count() as f64 / transferable as f64;
        prop_assert!((frac - r).abs() < 0.01, "flip fraction {frac} for r = {r}");
        Ok(())
    })
}

pub fn forge_monotone_aggravation() -> Result<(), String> {
    check(forge_case(), |(c, per, factor, r, seed)| {
        let Some((lt, noisy)) = forged(c, per, factor, r, seed) else {
            return Ok(());
        };
        let before = imbalance_factor(&lt.class_sizes()).unwrap();
        let sizes = noisy.observed_class_counts();
        let original = lt.class_sizes();
        prop_assert!(sizes[0] >= original[0]);
        let last = c - 1;
        prop_assert!(sizes[last] <= original[last]);
        if let Ok(after) = imbalance_factor(&sizes) {
            prop_assert!(after >= before - 1e-12, "IF {before} -> {after}");
        }
        Ok(())
    })
}

pub fn forge_deterministic() -> Result<(), String> {
    check(forge_case(), |(c, per, factor, r, seed)| {
        let a = forged(c, per, factor, r, seed);
        let b = forged(c, per, factor, r, seed);
        prop_assert_eq!(
            a.map(|x| serde_json::to_vec(&x.1).unwrap()),
            b.map(|x| serde_json::to_vec(&x.1).unwrap())
        );
        Ok(())
    })
}

pub fn forge_transition_oracle() -> Result<(), String> {
    check(forge_case(), |(c, per, factor, r, seed)| {
        let Some((_, noisy)) = forged(c, per, factor, r, seed) else {
            return Ok(());
        };
        let t = empirical_transition_matrix(&noisy);
        for tc in 0..c {
            let members: Vec<_> = noisy
                .instances
                .iter()
                .filter(|i| i.true_label == tc)
                .collect();
            for h in 0..c {
                let n = members.iter().filter(|i| i.observed_label == h).count();
                prop_assert_eq!(t.count(tc, h), n);
                let expected = if members.is_empty() {
                    if tc == h {
                        1.0
                    } else {
                        0.0
                    }
                } else {
                    n as f64 / members.len() as f64
                };
                prop_assert_eq!(t.get(tc, h), expected);
            }
        }
        Ok(())
    })
}

fn classifier_case() -> impl Strategy<Value = (usize, usize, u64, Vec<f64>)> {
    (1usize..9, 2usize..6, any::<u64>()).prop_flat_map(|(k, c, seed)| {
        (
            Just(k),
            Just(c),
            Just(seed),
            prop::collection::vec(-3.0f64..3.0, k),
        )
    })
}

fn bundle_with(k: usize, c: usize, seed: u64) -> ModelBundle {
    let config = ModelConfig {
        backbone: BackboneConfig::Mlp { widths: vec![k] },
    };
    ModelBundle::new(&config, InputShape::vector(3), c, seed).unwrap()
}

pub fn net_identity_mask() -> Result<(), String> {
    check(classifier_case(), |(k, c, seed, f)| {
        let b = bundle_with(k, c, seed);
        let masked = b.masked_forward(&f, &vec![1.0; k]).unwrap();
        prop_assert_eq!(masked, b.classifier.logits(&f));
        Ok(())
    })
}

pub fn net_logit_gradient_wrt_g() -> Result<(), String> {
    let case = classifier_case().prop_flat_map(|(k, c, seed, f)| {
        (
            Just(k),
            Just(c),
            Just(seed),
            Just(f),
            prop::collection::vec(0.05f64..0.95, k * c),
            0..c,
        )
    });
    check(case, |(k, c, seed, f, gv, y)| {
        let b = bundle_with(k, c, seed);
        let g = CorrelationMatrix::new(k, c, gv).unwrap();
        let h = 1e-6;
        for out in 0..c {
            let mut e = vec![0.0; c];
            e[out] = 1.0;
            let dmask = b.classifier.input_grad(&e);
            for ch in 0..k {
                let analytic = dmask[ch] * f[ch];
                let mut plus = g.column(y);
                let mut minus = g.column(y);
                plus[ch] += h;
                minus[ch] -= h;
                let numeric = (b.masked_forward(&f, &plus).unwrap()[out]
                    - b.masked_forward(&f, &minus).unwrap()[out])
                    / (2.0 * h);
                let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3);
                prop_assert!(err < 1e-4, "∂z{out}/∂G[{ch},{y}]: {analytic} vs {numeric}");
            }
        }
        Ok(())
    })
}

pub fn net_projection_idempotent() -> Result<(), String> {
    check(prop::collection::vec(-3.0f64..3.0, 0..40), |mut v| {
        project_g(&mut v);
        prop_assert!(v.iter().all(|x| (0.0..=1.0).contains(x)));
        let once = v.clone();
        project_g(&mut v);
        prop_assert_eq!(v, once);
        Ok(())
    })
}

fn fd_check(
    g: &CorrelationMatrix,
    analytic: &[f64],
    f: impl Fn(&CorrelationMatrix) -> f64,
) -> Result<(), TestCaseError> {
    let h = 1e-6;
    for idx in 0..analytic.len() {
        let mut plus = g.clone();
        let mut minus = g.clone();
        plus.values.value[idx] += h;
        minus.values.value[idx] -= h;
        let numeric = (f(&plus) - f(&minus)) / (2.0 * h);
        let err =
            (analytic[idx] - numeric).abs() / analytic[idx].abs().max(numeric.abs()).max(1e-3);
        prop_assert!(
            err < 1e-4,
            "entry {idx}: analytic {} numeric {numeric}",
            analytic[idx]
        );
    }
    Ok(())
}

fn interior_g() -> impl Strategy<Value = CorrelationMatrix> {
    (1usize..7, 1usize..5).prop_flat_map(|(k, c)| {
        prop::collection::vec(0.01f64..0.99, k * c)
            .prop_map(move |v| CorrelationMatrix::new(k, c, v).unwrap())
    })
}

pub fn ifd_penalty_gradients() -> Result<(), String> {
    check((interior_g(), 0.001f64..2.0), |(g, beta)| {
        fd_check(&g, &orthogonality_grad(&g, beta), |m| {
            orthogonality_penalty(m, beta)
        })?;
        for norm in [SparsityNorm::L1, SparsityNorm::L2] {
            fd_check(&g, &sparsity_grad(&g, norm), |m| sparsity_penalty(m, norm))?;
        }
        Ok(())
    })
}

/// Orthonormal nonnegative columns: disjoint channel supports, unit norm.
fn orthonormal_g() -> impl Strategy<Value = CorrelationMatrix> {
    (1usize..5, 0usize..4, any::<u64>()).prop_flat_map(|(c, extra, seed)| {
        let k = c + extra;
        prop::collection::vec(0..c, k).prop_map(move |mut owner| {
            // every class owns at least one channel
            for (class, slot) in owner.iter_mut().take(c).enumerate() {
                *slot = class;
            }
            let mut v = vec![0.0; k * c];
            let mut rng = seeded(seed);
            for (ch, &class) in owner.iter().enumerate() {
                v[ch * c + class] = rand::Rng::random_range(&mut rng, 0.2..1.0);
            }
            for class in 0..c {
                let norm: f64 = (0..k)
                    .map(|ch| v[ch * c + class] * v[ch * c + class])
                    .sum::<f64>()
                    .sqrt();
                (0..k).for_each(|ch| v[ch * c + class] /= norm);
            }
            CorrelationMatrix::new(k, c, v).unwrap()
        })
    })
}

pub fn ifd_orthogonality_zero_iff_orthonormal() -> Result<(), String> {
    check(orthonormal_g(), |g| {
        prop_assert!(orthogonality_penalty(&g, 1.0) < 1e-20);
        Ok(())
    })?;
    check(interior_g(), |g| {
        let c = g.classes;
        let mut orthonormal = true;
        for a in 0..c {
            for b in 0..c {
                let dot: f64 = (0..g.channels).map(|k| g.get(k, a) * g.get(k, b)).sum();
                let target = if a == b { 1.0 } else { 0.0 };
                orthonormal &= (dot - target).abs() < 1e-9;
            }
        }
        let p = orthogonality_penalty(&g, 1.0);
        prop_assert_eq!(p < 1e-18, orthonormal);
        Ok(())
    })
}

pub fn ifd_om_scale_invariant() -> Result<(), String> {
    let case =
        (2usize..7, 2usize..6).prop_flat_map(|(k, c)| (g_matrix(k, c), 0..c, 0.01f64..100.0));
    check(case, |(g, col, s)| {
        let mut scaled = g.clone();
        for k in 0..g.channels {
            scaled.set(k, col, g.get(k, col) * s);
        }
        let (a, b) = (om_metric(&g), om_metric(&scaled));
        prop_assert!((a - b).abs() < 1e-9 * a.max(1.0), "{a} vs {b}");
        Ok(())
    })
}

pub fn ifd_lsm_range() -> Result<(), String> {
    let any_g = (1usize..9, 1usize..9).prop_flat_map(|(k, c)| g_matrix(k, c));
    check(any_g, |g| {
        let lsm = lsm_metric(&g);
        prop_assert!((0.0..=1.0).contains(&lsm));
        Ok(())
    })?;
    let one_hot = (1usize..6).prop_flat_map(|c| (Just(c), prop::collection::vec(0..c, 1..20)));
    check(one_hot, |(c, owner)| {
        let k = owner.len();
        let mut v = vec![0.0; k * c];
        for (ch, &class) in owner.iter().enumerate() {
            v[ch * c + class] = 1.0;
        }
        let g = CorrelationMatrix::new(k, c, v).unwrap();
        prop_assert_eq!(lsm_metric(&g), 1.0 / c as f64);
        Ok(())
    })
}

pub fn ifd_loss_decomposition() -> Result<(), String> {
    let case = classifier_case().prop_flat_map(|(k, c, seed, _)| {
        (
            Just(k),
            Just(c),
            Just(seed),
            prop::collection::vec(-2.0f64..2.0, k * 4),
            prop::collection::vec(0..c, 4),
            g_matrix(k, c),
            0.0f64..1.0,
        )
    });
    check(case, |(k, c, seed, feats, labels, mut g, beta)| {
        let mut cls = Classifier::new(k, c, &mut seeded(seed));
        for norm in [SparsityNorm::L1, SparsityNorm::L2] {
            let (loss, _) = ifd_head(&mut cls, &mut g, &feats, &labels, beta, norm);
            prop_assert!((loss.total - (loss.l0 + loss.l1 + loss.sparsity)).abs() < 1e-9);
        }
        Ok(())
    })
}

pub fn relabel_jsd_symmetric_bounded() -> Result<(), String> {
    let case = (1usize..12).prop_flat_map(|c| (simplex(c), simplex(c)));
    check(case, |(a, b)| {
        let (ab, ba) = (jsd(&a, &b), jsd(&b, &a));
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert!(jsd(&a, &a).abs() < 1e-12);
        Ok(())
    })
}

pub fn relabel_label_sets_well_formed() -> Result<(), String> {
    let case = (2usize..12).prop_flat_map(|c| (simplex(c), 0..c, 0.0f64..=1.0, any::<bool>()));
    check(case, |(p, y, d, clean)| {
        let c = p.len();
        let q = label_count(d, c);
        prop_assert!(q >= 1 && q <= c);
        let labels = build_multilabel(&p, y, q, clean);
        prop_assert!(!labels.is_empty());
        prop_assert!(labels.iter().all(|&l| l < c));
        let mut unique = labels.clone();
        unique.sort_unstable();
        unique.dedup();
        prop_assert_eq!(unique.len(), labels.len());
        if clean {
            prop_assert_eq!(labels.len(), q);
        } else {
            prop_assert!(!labels.contains(&y));
            prop_assert_eq!(labels.len(), q.min(c - 1));
        }
        Ok(())
    })
}

pub fn relabel_fused_simplex() -> Result<(), String> {
    let case = (1usize..12).prop_flat_map(|c| (simplex(c), simplex(c), 0.0f64..=1.0));
    check(case, |(w, s, gamma)| {
        let p = fused_confidence(&w, &s, gamma).unwrap();
        prop_assert!(p.iter().all(|&v| v >= 0.0));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        Ok(())
    })
}

/// Repeated arg-max selection, lowest index first on ties.
pub fn multilabel_oracle(p: &[f64], y: usize, q: usize, clean: bool) -> Vec<usize> {
    let mut taken = vec![false; p.len()];
    if !clean {
        taken[y] = true;
    }
    let mut out = Vec::new();
    while out.len() < q.max(1) {
        let mut best: Option<usize> = None;
        for c in 0..p.len() {
            if !taken[c] && best.is_none_or(|b| p[c] > p[b]) {
                best = Some(c);
            }
        }
        let Some(b) = best else { break };
        taken[b] = true;
        out.push(b);
    }
    out
}

pub fn relabel_multilabel_matches_oracle() -> Result<(), String> {
    let grid = prop_oneof![Just(0.0), Just(0.25), Just(0.5), 0.0f64..1.0];
    let case = (1usize..=8).prop_flat_map(move |c| {
        (
            prop::collection::vec(grid.clone(), c),
            0..c,
            1..=c,
            any::<bool>(),
        )
    });
    check(case, |(p, y, q, clean)| {
        prop_assert_eq!(
            build_multilabel(&p, y, q, clean),
            multilabel_oracle(&p, y, q, clean)
        );
        Ok(())
    })
}

pub fn mask_oracle(labels: &[usize], g: &CorrelationMatrix) -> Vec<f64> {
    let mut m = vec![0.0; g.channels];
    for (k, slot) in m.iter_mut().enumerate() {
        let mut total = 0.0;
        for &j in labels {
            total += g.get(k, j);
        }
        if total > 1e-8 {
            *slot = 1.0;
        }
    }
    m
}

fn mask_case() -> impl Strategy<Value = (CorrelationMatrix, Vec<usize>, usize)> {
    (1usize..9, 1usize..6).prop_flat_map(|(k, c)| {
        (
            g_matrix(k, c),
            prop::collection::btree_set(0..c, 1..=c),
            0..c,
        )
            .prop_map(|(g, set, extra)| (g, set.into_iter().collect(), extra))
    })
}

pub fn ifpu_mask_matches_oracle() -> Result<(), String> {
    check(mask_case(), |(g, labels, _)| {
        let m = instance_mask(&labels, &g).unwrap();
        prop_assert_eq!(&m, &mask_oracle(&labels, &g));
        if labels
            .iter()
            .any(|&j| (0..g.channels).any(|k| g.get(k, j) > 1e-8))
        {
            prop_assert!(m.contains(&1.0));
        }
        Ok(())
    })
}

pub fn ifpu_mask_monotone() -> Result<(), String> {
    check(mask_case(), |(g, labels, extra)| {
        let small = instance_mask(&labels, &g).unwrap();
        let mut bigger = labels.clone();
        if !bigger.contains(&extra) {
            bigger.push(extra);
        }
        let big = instance_mask(&bigger, &g).unwrap();
        for (s, b) in small.iter().zip(&big) {
            prop_assert!(!(*s == 1.0 && *b == 0.0));
        }
        Ok(())
    })
}

pub fn ifpu_loss_nonnegative_zero_iff_equal() -> Result<(), String> {
    let case = classifier_case().prop_flat_map(|(k, c, seed, _)| {
        (
            Just(k),
            Just(c),
            Just(seed),
            prop::collection::vec(-2.0f64..2.0, k * 3),
            prop::collection::vec(prop_oneof![Just(0.0), Just(1.0)], k * 3),
        )
    });
    check(case, |(k, c, seed, feats, masks)| {
        let mut cls = Classifier::new(k, c, &mut seeded(seed));
        let (loss, _) = ifpu_head(&mut cls, &feats, &masks, 1.0);
        prop_assert!(loss >= 0.0);
        let coincide = (0..3).all(|i| {
            let f = &feats[i * k..(i + 1) * k];
            let masked: Vec<f64> = f
                .iter()
                .zip(&masks[i * k..(i + 1) * k])
                .map(|(a, b)| a * b)
                .collect();
            cls.logits(f) == cls.logits(&masked)
        });
        prop_assert_eq!(loss == 0.0, coincide);
        Ok(())
    })
}

fn tiny_store(n: usize, dim: usize, seed: u64) -> InputStore {
    let mut rng = seeded(seed);
    let data = (0..n * dim)
        .map(|_| rand::Rng::random_range(&mut rng, -1.0f32..1.0))
        .collect();
    InputStore::new(InputShape::vector(dim), data).unwrap()
}

pub fn ifpu_original_frozen() -> Result<(), String> {
    let case = (2usize..4, any::<u64>(), any::<bool>()).prop_flat_map(|(c, seed, teacher)| {
        (
            Just(c),
            Just(seed),
            Just(teacher),
            prop::collection::vec(0..c, 8),
        )
    });
    check(case, |(c, seed, teacher, labels)| {
        let store = tiny_store(8, 3, seed);
        let ids: Vec<usize> = (0..8).collect();
        let set = TrainingSet::new(&store, &ids, &labels, c).unwrap();
        let original = bundle_with(4, c, seed);
        let before = original.parameter_snapshot();
        let config = IfpuConfig {
            epochs: 1,
            batch_size: 8,
            seed,
            augment: None,
            target: if teacher {
                IfpuTarget::OriginalMasked
            } else {
                IfpuTarget::SelfMasked
            },
            relabel: RelabelConfig {
                batch_size: 8,
                ..RelabelConfig::default()
            },
            ..IfpuConfig::default()
        };
        let (unlearned, _) =
            unlearn_finetune(&original, &set, &config, &MixerConfig::default(), None).unwrap();
        prop_assert_eq!(original.parameter_snapshot(), before);
        prop_assert_eq!(unlearned.g.as_slice(), original.g.as_slice());
        Ok(())
    })
}

fn batch_case() -> impl Strategy<Value = (usize, Vec<f64>, Vec<usize>, Vec<usize>)> {
    (1usize..9, 1usize..5, 2usize..6).prop_flat_map(|(n, k, c)| {
        (
            Just(k),
            prop::collection::vec(prop_oneof![Just(0.0), 0.0f64..2.0], n * k),
            prop::collection::vec(0..c, n),
            prop::collection::vec(1usize..50, c),
        )
    })
}

pub fn mixer_no_forward_transfer() -> Result<(), String> {
    check(batch_case(), |(k, feats, labels, sizes)| {
        let rank = class_rank(&sizes);
        let m = similarity_matrix(&feats, k, &labels, &rank).unwrap();
        for p in select_pairs(&m, labels.len() * labels.len()) {
            prop_assert!(
                rank[labels[p.j]] > rank[labels[p.i]],
                "pair {p:?} moves toward a larger class"
            );
        }
        Ok(())
    })
}

pub fn mixer_labels_on_simplex() -> Result<(), String> {
    let case = (2usize..10).prop_flat_map(|c| {
        (
            0..c,
            0..c,
            prop::collection::btree_set(0..c, 1..=c),
            prop::collection::btree_set(0..c, 1..=c),
            0.0f64..=1.0,
            0.0f64..=1.0,
            Just(c),
        )
    });
    check(case, |(ya, yb, sa, sb, alpha, lambda, c)| {
        let la: Vec<usize> = sa.into_iter().collect();
        let lb: Vec<usize> = sb.into_iter().collect();
        let ta = smooth_labels(ya, &multilabel_distribution(&la, c), alpha);
        let tb = smooth_labels(yb, &multilabel_distribution(&lb, c), alpha);
        let (_, y) = mixup(&[0.0], &[1.0], &ta, &tb, lambda).unwrap();
        for t in [&ta, &tb, &y] {
            prop_assert!(t.iter().all(|&v| v >= 0.0));
            prop_assert!((t.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        Ok(())
    })
}

pub fn mixer_deterministic() -> Result<(), String> {
    check(batch_case(), |(k, feats, labels, sizes)| {
        let rank = class_rank(&sizes);
        let a = select_pairs(&similarity_matrix(&feats, k, &labels, &rank).unwrap(), 4);
        let b = select_pairs(&similarity_matrix(&feats, k, &labels, &rank).unwrap(), 4);
        prop_assert_eq!(a, b);
        Ok(())
    })
}

/// Repeated scan for the largest positive entry, lowest (i, j) first on ties.
pub fn pairs_oracle(m: &dull::mixer::SimilarityMatrix, count: usize) -> Vec<(usize, usize)> {
    let mut taken = vec![false; m.n * m.n];
    let mut out = Vec::new();
    while out.len() < count {
        let mut best: Option<(usize, usize)> = None;
        for i in 0..m.n {
            for j in 0..m.n {
                let v = m.get(i, j);
                if taken[i * m.n + j] || v <= 0.0 {
                    continue;
                }
                if best.is_none_or(|(bi, bj)| v > m.get(bi, bj)) {
                    best = Some((i, j));
                }
            }
        }
        let Some((i, j)) = best else { break };
        taken[i * m.n + j] = true;
        out.push((i, j));
    }
    out
}

pub fn mixer_select_pairs_matches_oracle() -> Result<(), String> {
    let case = (1usize..=8).prop_flat_map(|n| {
        (
            Just(n),
            prop::collection::vec(prop_oneof![Just(0.0), Just(0.5), 0.0f64..1.0], n * n),
            0..=n * n,
        )
    });
    check(case, |(n, values, count)| {
        let m = dull::mixer::SimilarityMatrix { n, values };
        let got: Vec<(usize, usize)> = select_pairs(&m, count).iter().map(|p| (p.i, p.j)).collect();
        prop_assert_eq!(got, pairs_oracle(&m, count));
        Ok(())
    })
}

pub fn harness_terciles_aggregate() -> Result<(), String> {
    let case = (3usize..9, any::<u64>()).prop_flat_map(|(c, seed)| {
        (
            Just(c),
            Just(seed),
            prop::collection::vec(0..c, 1..40),
            prop::collection::vec(1usize..100, c),
        )
    });
    check(case, |(c, seed, labels, sizes)| {
        let store = tiny_store(labels.len(), 3, seed);
        let test = LabeledDataset::from_labels(c, &labels).unwrap();
        let bundle = bundle_with(4, c, seed);
        let m = evaluate(&bundle, &store, &test, &sizes, 7).unwrap();
        let count =
            |classes: &[usize]| labels.iter().filter(|l| classes.contains(l)).count() as f64;
        let total = count(&m.head_classes) + count(&m.middle_classes) + count(&m.tail_classes);
        prop_assert_eq!(total as usize, labels.len());
        let weighted = (m.head * count(&m.head_classes)
            + m.middle * count(&m.middle_classes)
            + m.tail * count(&m.tail_classes))
            / total;
        prop_assert!((weighted - m.overall).abs() < 1e-6);
        let mut all: Vec<usize> = [m.head_classes, m.middle_classes, m.tail_classes].concat();
        all.sort_unstable();
        prop_assert_eq!(all, (0..c).collect::<Vec<_>>());
        Ok(())
    })
}

pub fn tiny_experiment(seed: u64, r: f64) -> ExperimentConfig {
    ExperimentConfig {
        name: format!("tiny-{seed}"),
        data: DataSpec {
            source: SourceSpec::Blobs(BlobConfig {
                classes: 3,
                dim: 4,
                train_per_class: 8,
                test_per_class: 3,
                seed,
                ..BlobConfig::default()
            }),
            imbalance_factor: 2.0,
            noise_ratio: r,
            seed,
            train_per_class: None,
            test_per_class: None,
            downsample: 1,
        },
        ifd: IfdConfig {
            epochs: 1,
            batch_size: 8,
            seed,
            augment: None,
            model: ModelConfig {
                backbone: BackboneConfig::Mlp { widths: vec![4] },
            },
            ..IfdConfig::default()
        },
        ifpu: IfpuConfig {
            epochs: 1,
            batch_size: 8,
            seed,
            augment: None,
            ..IfpuConfig::default()
        },
        mixer: MixerConfig::default(),
        eval: Default::default(),
        output: Default::default(),
    }
}

pub fn harness_reproducible() -> Result<(), String> {
    check((any::<u64>(), 0.0f64..0.6), |(seed, r)| {
        let config = tiny_experiment(seed, r);
        let a = run_experiment(&config);
        let b = run_experiment(&config);
        prop_assert!(a.succeeded(), "{:?}", a.failure);
        prop_assert_eq!(a, b);
        Ok(())
    })
}

pub fn harness_records_rerender() -> Result<(), String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let records: Vec<_> = (0..4)
        .map(|s| run_experiment(&tiny_experiment(s, 0.3)))
        .collect();
    check((0..records.len(), any::<u16>()), |(pick, tag)| {
        let mut record = records[pick].clone();
        record.name = format!("r{tag}");
        let path = write_record(dir.path(), &record).unwrap();
        let back = read_record(&path).unwrap();
        prop_assert_eq!(&back, &record);
        let out = dir.path().join(format!("plots-{tag}"));
        let files = emit_plots(&[back], &out).unwrap();
        prop_assert!(files
            .iter()
            .all(|f| std::fs::metadata(f).map(|m| m.len() > 0).unwrap_or(false)));
        std::fs::remove_dir_all(&out).ok();
        Ok(())
    })
}

pub const ALL: &[(&str, Property)] = &[
    ("forge: unidirectional flips", forge_unidirectional),
    ("forge: noise-ratio fidelity", forge_noise_ratio_fidelity),
    ("forge: monotone aggravation", forge_monotone_aggravation),
    ("forge: determinism", forge_deterministic),
    ("forge: transition matrix oracle", forge_transition_oracle),
    ("net: identity mask", net_identity_mask),
    ("net: logit gradient through G", net_logit_gradient_wrt_g),
    ("net: projection idempotent", net_projection_idempotent),
    ("ifd: penalty gradients", ifd_penalty_gradients),
    (
        "ifd: orthogonality zero iff orthonormal",
        ifd_orthogonality_zero_iff_orthonormal,
    ),
    ("ifd: OM scale invariance", ifd_om_scale_invariant),
    ("ifd: LSM range and one-hot value", ifd_lsm_range),
    ("ifd: loss decomposition", ifd_loss_decomposition),
    (
        "relabel: jsd symmetric and bounded",
        relabel_jsd_symmetric_bounded,
    ),
    (
        "relabel: label sets well formed",
        relabel_label_sets_well_formed,
    ),
    ("relabel: fused simplex", relabel_fused_simplex),
    (
        "relabel: multilabel oracle",
        relabel_multilabel_matches_oracle,
    ),
    ("ifpu: mask oracle", ifpu_mask_matches_oracle),
    ("ifpu: monotone mask", ifpu_mask_monotone),
    (
        "ifpu: loss sign and zero set",
        ifpu_loss_nonnegative_zero_iff_equal,
    ),
    ("ifpu: original frozen", ifpu_original_frozen),
    ("mixer: no forward transfer", mixer_no_forward_transfer),
    ("mixer: labels on simplex", mixer_labels_on_simplex),
    ("mixer: determinism", mixer_deterministic),
    (
        "mixer: select_pairs oracle",
        mixer_select_pairs_matches_oracle,
    ),
    ("harness: terciles aggregate", harness_terciles_aggregate),
    ("harness: reproducibility", harness_reproducible),
    (
        "harness: records reload and render",
        harness_records_rerender,
    ),
];
