//! Exhaustive brute-force oracles on small instances, and finite-difference
//! gradient checks.

use dull::data::{Batch, InputShape};
use dull::forge::class_rank;
use dull::ifd::{
    ifd_head, orthogonality_grad, orthogonality_penalty, sparsity_grad, sparsity_penalty,
    SparsityNorm,
};
use dull::ifpu::{ifpu_loss, instance_mask};
use dull::mixer::{select_pairs, similarity_matrix, SimilarityMatrix};
use dull::net::{Classifier, CorrelationMatrix, ModelBundle, ModelConfig};
use dull::nn::BackboneConfig;
use dull::relabel::{build_multilabel, jsd};
use dull::rng::seeded;
use rand::Rng;

pub type Oracle = fn() -> Result<(), String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

/// All vectors of length `len` over `0..base`.
fn tuples(base: usize, len: usize) -> impl Iterator<Item = Vec<usize>> {
    (0..base.pow(len as u32)).map(move |mut code| {
        (0..len)
            .map(|_| {
                let d = code % base;
                code /= base;
                d
            })
            .collect()
    })
}

fn permutations(items: &mut Vec<usize>, k: usize, out: &mut Vec<Vec<usize>>) {
    if k == items.len() {
        out.push(items.clone());
        return;
    }
    for i in k..items.len() {
        items.swap(k, i);
        permutations(items, k + 1, out);
        items.swap(k, i);
    }
}

fn entropy_bits(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| v * v.ln())
        .sum::<f64>()
        / std::f64::consts::LN_2
}

/// H(M) − (H(a) + H(b)) / 2.
fn jsd_oracle(a: &[f64], b: &[f64]) -> f64 {
    let m: Vec<f64> = a.iter().zip(b).map(|(x, y)| (x + y) / 2.0).collect();
    entropy_bits(&m) - (entropy_bits(a) + entropy_bits(b)) / 2.0
}

/// Every simplex point with coordinates in multiples of 1/4, C ≤ 4, paired exhaustively.
pub fn jsd_exhaustive() -> Result<(), String> {
    for c in 1..=4 {
        let points: Vec<Vec<f64>> = tuples(5, c)
            .filter(|t| t.iter().sum::<usize>() == 4)
            .map(|t| t.iter().map(|&v| v as f64 / 4.0).collect())
            .collect();
        for a in &points {
            for b in &points {
                let (got, want) = (jsd(a, b), jsd_oracle(a, b));
                ensure((got - want).abs() < 1e-12, || {
                    format!("jsd({a:?}, {b:?}) = {got}, oracle {want}")
                })?;
            }
        }
    }
    let one_hot = [1.0, 0.0, 0.0, 0.0];
    ensure(
        (jsd(&one_hot, &[0.0, 1.0, 0.0, 0.0]) - 1.0).abs() < 1e-12,
        || "disjoint one-hots".into(),
    )?;
    ensure(jsd(&one_hot, &one_hot) == 0.0, || {
        "identical one-hots".into()
    })
}

/// Every binary G with K·C ≤ 16 against every nonempty label set.
pub fn instance_mask_exhaustive() -> Result<(), String> {
    for c in 1..=4usize {
        for k in 1..=(16 / c).min(8) {
            let sets: Vec<Vec<usize>> = (1..1usize << c)
                .map(|bits| (0..c).filter(|j| bits >> j & 1 == 1).collect())
                .collect();
            for code in 0..1u64 << (k * c) {
                let values: Vec<f64> = (0..k * c).map(|b| (code >> b & 1) as f64).collect();
                let g = CorrelationMatrix::new(k, c, values.clone()).unwrap();
                for set in &sets {
                    let got = instance_mask(set, &g).unwrap();
                    for ch in 0..k {
                        let active = set.iter().any(|&j| values[ch * c + j] == 1.0);
                        ensure(got[ch] == if active { 1.0 } else { 0.0 }, || {
                            format!("K={k} C={c} G={values:?} set={set:?}: channel {ch}")
                        })?;
                    }
                }
            }
        }
    }
    let g = CorrelationMatrix::new(4, 2, vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0]).unwrap();
    ensure(
        instance_mask(&[0], &g).unwrap() == [1.0, 1.0, 0.0, 0.0],
        || "worked example".into(),
    )?;
    let dust = CorrelationMatrix::new(1, 1, vec![1e-9]).unwrap();
    ensure(instance_mask(&[0], &dust).unwrap() == [0.0], || {
        "float dust below threshold".into()
    })
}

/// Selection oracle: take the highest remaining candidate, lowest index on ties.
fn multilabel_selection(p: &[f64], y: usize, q: usize, clean: bool) -> Vec<usize> {
    let mut candidates: Vec<usize> = (0..p.len()).filter(|&c| clean || c != y).collect();
    let mut out = Vec::new();
    while out.len() < q && !candidates.is_empty() {
        let mut best = 0;
        for (pos, &c) in candidates.iter().enumerate() {
            if p[c] > p[candidates[best]] {
                best = pos;
            }
        }
        out.push(candidates.remove(best));
    }
    out
}

fn check_multilabel(p: &[f64]) -> Result<(), String> {
    let c = p.len();
    for y in 0..c {
        for q in 1..=c {
            for clean in [true, false] {
                let got = build_multilabel(p, y, q, clean);
                let want = multilabel_selection(p, y, q, clean);
                ensure(got == want, || {
                    format!("p={p:?} y={y} q={q} clean={clean}: {got:?} vs {want:?}")
                })?;
            }
        }
    }
    Ok(())
}

/// All tie patterns over a 4-level grid for C ≤ 6, all strict orders for C = 7, 8.
pub fn build_multilabel_exhaustive() -> Result<(), String> {
    for c in 1..=6 {
        for t in tuples(4, c) {
            let p: Vec<f64> = t.iter().map(|&v| v as f64).collect();
            check_multilabel(&p)?;
        }
    }
    for c in [7, 8] {
        let mut perms = Vec::new();
        permutations(&mut (0..c).collect(), 0, &mut perms);
        for perm in perms {
            let p: Vec<f64> = perm.iter().map(|&v| v as f64 / c as f64).collect();
            let y = perm[0];
            for q in [1, c / 2, c] {
                for clean in [true, false] {
                    let got = build_multilabel(&p, y, q, clean);
                    let want = multilabel_selection(&p, y, q, clean);
                    ensure(got == want, || {
                        format!("p={p:?} q={q}: {got:?} vs {want:?}")
                    })?;
                }
            }
        }
    }
    Ok(())
}

fn pairs_selection(m: &SimilarityMatrix, count: usize) -> Vec<(usize, usize)> {
    let mut pool: Vec<(usize, usize, f64)> = Vec::new();
    for i in 0..m.n {
        for j in 0..m.n {
            if m.get(i, j) > 0.0 {
                pool.push((i, j, m.get(i, j)));
            }
        }
    }
    let mut out = Vec::new();
    while out.len() < count && !pool.is_empty() {
        let mut best = 0;
        for (pos, e) in pool.iter().enumerate() {
            if e.2 > pool[best].2 {
                best = pos;
            }
        }
        let (i, j, _) = pool.remove(best);
        out.push((i, j));
    }
    out
}

fn similarity_oracle(features: &[Vec<f64>], labels: &[usize], rank: &[usize]) -> SimilarityMatrix {
    let n = labels.len();
    let mut values = vec![0.0; n * n];
    for i in 0..n {
        let allowed: Vec<usize> = (0..n)
            .filter(|&j| rank[labels[j]] > rank[labels[i]])
            .collect();
        let raw: Vec<f64> = allowed
            .iter()
            .map(|&j| {
                features[i]
                    .iter()
                    .zip(&features[j])
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
                    .max(0.0)
            })
            .collect();
        let total: f64 = raw.iter().sum();
        for (&j, &r) in allowed.iter().zip(&raw) {
            values[i * n + j] = if total > 0.0 { r / total } else { r };
        }
    }
    SimilarityMatrix { n, values }
}

/// Every 3-level matrix up to 3×3 with every count, plus every label
/// assignment of 4-instance batches over 3 classes through the similarity step.
pub fn select_pairs_exhaustive() -> Result<(), String> {
    for n in 1..=3usize {
        for t in tuples(3, n * n) {
            let m = SimilarityMatrix {
                n,
                values: t.iter().map(|&v| v as f64 / 2.0).collect(),
            };
            for count in 0..=n * n + 1 {
                let got: Vec<(usize, usize)> =
                    select_pairs(&m, count).iter().map(|p| (p.i, p.j)).collect();
                let want = pairs_selection(&m, count);
                ensure(got == want, || {
                    format!("{:?} count {count}: {got:?} vs {want:?}", m.values)
                })?;
            }
        }
    }
    let mut rng = seeded(7);
    let features: Vec<Vec<f64>> = (0..4)
        .map(|_| (0..3).map(|_| rng.random_range(0.0..1.0)).collect())
        .collect();
    let flat: Vec<f64> = features.concat();
    for sizes in [[30, 20, 10], [10, 20, 30], [20, 20, 5]] {
        let rank = class_rank(&sizes);
        for labels in tuples(3, 4) {
            let m = similarity_matrix(&flat, 3, &labels, &rank).unwrap();
            let o = similarity_oracle(&features, &labels, &rank);
            for (a, b) in m.values.iter().zip(&o.values) {
                ensure((a - b).abs() < 1e-12, || {
                    format!("similarity for labels {labels:?}")
                })?;
            }
            let got: Vec<(usize, usize)> =
                select_pairs(&m, 16).iter().map(|p| (p.i, p.j)).collect();
            ensure(got == pairs_selection(&o, 16), || {
                format!("pairs for labels {labels:?}")
            })?;
        }
    }
    Ok(())
}

fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

fn fd_gradient(
    g: &CorrelationMatrix,
    analytic: &[f64],
    f: impl Fn(&CorrelationMatrix) -> f64,
    what: &str,
) -> Result<(), String> {
    let h = 1e-6;
    for idx in 0..analytic.len() {
        let mut plus = g.clone();
        let mut minus = g.clone();
        plus.values.value[idx] += h;
        minus.values.value[idx] -= h;
        let numeric = (f(&plus) - f(&minus)) / (2.0 * h);
        let err = relative_error(analytic[idx], numeric);
        ensure(err < 1e-4, || {
            format!(
                "{what}: entry {idx} analytic {} numeric {numeric} (rel {err:e})",
                analytic[idx]
            )
        })?;
    }
    Ok(())
}

fn random_g(k: usize, c: usize, seed: u64) -> CorrelationMatrix {
    let mut rng = seeded(seed);
    CorrelationMatrix::new(
        k,
        c,
        (0..k * c).map(|_| rng.random_range(0.05..0.95)).collect(),
    )
    .unwrap()
}

/// Orthogonality and sparsity penalties, masked logits and the full IFD head,
/// all with respect to G.
pub fn gradient_checks() -> Result<(), String> {
    for seed in 0..20 {
        let (k, c) = (3 + seed as usize % 6, 2 + seed as usize % 4);
        let g = random_g(k, c, seed);
        for beta in [1.0, 0.01, 0.001] {
            fd_gradient(
                &g,
                &orthogonality_grad(&g, beta),
                |m| orthogonality_penalty(m, beta),
                "L1",
            )?;
        }
        for norm in [SparsityNorm::L1, SparsityNorm::L2] {
            fd_gradient(
                &g,
                &sparsity_grad(&g, norm),
                |m| sparsity_penalty(m, norm),
                "sparsity",
            )?;
        }

        let bundle = ModelBundle::new(
            &ModelConfig {
                backbone: BackboneConfig::Mlp { widths: vec![k] },
            },
            InputShape::vector(2),
            c,
            seed,
        )
        .unwrap();
        let mut rng = seeded(seed + 100);
        let f: Vec<f64> = (0..k).map(|_| rng.random_range(-2.0..2.0)).collect();
        for y in 0..c {
            for out in 0..c {
                let mut e = vec![0.0; c];
                e[out] = 1.0;
                let through = bundle.classifier.input_grad(&e);
                let analytic: Vec<f64> = (0..k * c)
                    .map(|idx| {
                        if idx % c == y {
                            through[idx / c] * f[idx / c]
                        } else {
                            0.0
                        }
                    })
                    .collect();
                fd_gradient(
                    &g,
                    &analytic,
                    |m| bundle.masked_forward(&f, &m.column(y)).unwrap()[out],
                    "masked_forward",
                )?;
            }
        }

        let n = 5;
        let feats: Vec<f64> = (0..n * k).map(|_| rng.random_range(-2.0..2.0)).collect();
        let labels: Vec<usize> = (0..n).map(|i| i % c).collect();
        let total = |m: &CorrelationMatrix| {
            let mut cls: Classifier = bundle.classifier.clone();
            let mut g = m.clone();
            ifd_head(&mut cls, &mut g, &feats, &labels, 0.01, SparsityNorm::L1)
                .0
                .total
        };
        let mut cls = bundle.classifier.clone();
        let mut gg = g.clone();
        gg.values.zero_grad();
        ifd_head(&mut cls, &mut gg, &feats, &labels, 0.01, SparsityNorm::L1);
        fd_gradient(&g, &gg.values.grad, total, "IFD objective")?;
    }
    Ok(())
}

/// L_IFPU on a two-class toy against a hand-written MSE over logits.
pub fn ifpu_loss_oracle() -> Result<(), String> {
    let config = ModelConfig {
        backbone: BackboneConfig::Mlp { widths: vec![4] },
    };
    let mut original = ModelBundle::new(&config, InputShape::vector(3), 2, 5).unwrap();
    original.g =
        CorrelationMatrix::new(4, 2, vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
    let unlearned = original.unlearned_copy();
    let x = Batch::new(
        InputShape::vector(3),
        3,
        vec![0.5, -1.0, 2.0, 1.0, 1.0, 1.0, -0.3, 0.2, 0.9],
    )
    .unwrap();
    let sets = vec![vec![0], vec![1], vec![0, 1]];
    let got = ifpu_loss(&original, &unlearned, &x, &sets).unwrap();

    let feats = unlearned.forward(&x).unwrap().features;
    let masks = [
        [1.0, 1.0, 0.0, 0.0],
        [0.0, 0.0, 1.0, 0.0],
        [1.0, 1.0, 1.0, 0.0],
    ];
    let w = &unlearned.classifier.weight.value;
    let mut sum = 0.0;
    for (i, m) in masks.iter().enumerate() {
        let f = &feats[i * 4..(i + 1) * 4];
        for class in 0..2 {
            let row = &w[class * 4..class * 4 + 4];
            let full: f64 = (0..4).map(|j| row[j] * f[j]).sum();
            let masked: f64 = (0..4).map(|j| row[j] * f[j] * m[j]).sum();
            sum += (full - masked).powi(2);
        }
    }
    let want = sum / 6.0;
    ensure((got - want).abs() < 1e-12, || {
        format!("ifpu_loss {got} vs oracle {want}")
    })?;

    let single = Batch::new(InputShape::vector(3), 1, vec![0.5, -1.0, 2.0]).unwrap();
    let twice = Batch::new(
        InputShape::vector(3),
        2,
        vec![0.5, -1.0, 2.0, 0.5, -1.0, 2.0],
    )
    .unwrap();
    let a = ifpu_loss(&original, &unlearned, &single, &[vec![0]]).unwrap();
    let b = ifpu_loss(&original, &unlearned, &twice, &[vec![0], vec![0]]).unwrap();
    ensure((a - b).abs() < 1e-12, || {
        format!("duplicated batch {b} vs single {a}")
    })
}

pub const ALL: &[(&str, Oracle)] = &[
    ("jsd", jsd_exhaustive),
    ("instance_mask", instance_mask_exhaustive),
    ("build_multilabel", build_multilabel_exhaustive),
    ("select_pairs", select_pairs_exhaustive),
    ("gradients", gradient_checks),
    ("ifpu_loss", ifpu_loss_oracle),
];
