//! Small interactive explorers over the core crate, exported to the browser.
//!
//! Every export returns a JSON string; the native functions underneath are
//! ordinary Rust and are tested without a browser.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use dull::error::{Error, Result};
use dull::forge::{
    build_longtail, empirical_transition_matrix, imbalance_factor, inject_t2h_noise, LabeledDataset,
};
use dull::ifd::{lsm_metric, om_metric, orthogonality_grad, sparsity_grad, SparsityNorm};
use dull::ifpu::instance_mask;
use dull::net::CorrelationMatrix;
use dull::relabel::{build_multilabel, fused_confidence, jsd, label_count};
use dull::rng::stream;

#[derive(Debug, Serialize)]
pub struct NoiseView {
    pub true_sizes: Vec<usize>,
    pub observed_sizes: Vec<usize>,
    pub original_if: f64,
    pub observed_if: f64,
    pub flipped: usize,
    pub transferable: usize,
    /// Row-major C×C.
    pub transition: Vec<f64>,
}

pub fn explore_noise(
    classes: usize,
    head: usize,
    factor: f64,
    noise_ratio: f64,
    seed: u64,
) -> Result<NoiseView> {
    if !(2..=100).contains(&classes) {
        return Err(Error::InvalidArgument(
            "pick between 2 and 100 classes".into(),
        ));
    }
    let source = LabeledDataset::balanced(classes, head)?;
    let lt = build_longtail(&source, factor, seed)?;
    let noisy = inject_t2h_noise(&lt, noise_ratio, seed)?;
    let t = empirical_transition_matrix(&noisy);
    let true_sizes = noisy.true_class_counts();
    Ok(NoiseView {
        original_if: imbalance_factor(&true_sizes)?,
        observed_if: noisy.observed_imbalance_factor()?,
        observed_sizes: noisy.observed_class_counts(),
        flipped: noisy.flip_count(),
        transferable: noisy.len() - true_sizes[0],
        true_sizes,
        transition: t.rows,
    })
}

#[derive(Debug, Serialize)]
pub struct LabelView {
    pub fused: Vec<f64>,
    pub divergence: f64,
    pub clean: bool,
    pub q: usize,
    pub labels: Vec<usize>,
}

fn normalized(v: &[f64]) -> Result<Vec<f64>> {
    let sum: f64 = v.iter().sum();
    if v.is_empty() || v.iter().any(|x| !x.is_finite() || *x < 0.0) || sum <= 0.0 {
        return Err(Error::InvalidArgument(
            "confidences must be nonnegative with a positive sum".into(),
        ));
    }
    Ok(v.iter().map(|x| x / sum).collect())
}

/// One instance through the multi-labeling rule. `threshold` stands in for
/// the batch mean of the divergence scores.
pub fn explore_labels(
    weak: &[f64],
    strong: &[f64],
    gamma: f64,
    observed: usize,
    threshold: f64,
) -> Result<LabelView> {
    let fused = fused_confidence(&normalized(weak)?, &normalized(strong)?, gamma)?;
    let c = fused.len();
    if observed >= c {
        return Err(Error::InvalidArgument(format!(
            "observed label {observed} outside [0, {c})"
        )));
    }
    let mut onehot = vec![0.0; c];
    onehot[observed] = 1.0;
    let divergence = jsd(&onehot, &fused);
    let clean = divergence <= threshold;
    let labels = build_multilabel(&fused, observed, label_count(divergence, c), clean);
    Ok(LabelView {
        q: labels.len(),
        fused,
        divergence,
        clean,
        labels,
    })
}

#[derive(Debug, Serialize)]
pub struct MatrixView {
    pub channels: usize,
    pub classes: usize,
    pub om: Vec<f64>,
    pub lsm: Vec<f64>,
    /// Final G, row-major K×C.
    pub g: Vec<f64>,
}

/// Projected gradient descent on the two regularizers alone, from the
/// uniform initialization.
pub fn explore_matrix(
    channels: usize,
    classes: usize,
    beta: f64,
    lr: f64,
    steps: usize,
    seed: u64,
) -> Result<MatrixView> {
    if channels == 0 || classes == 0 || channels * classes > 4096 || steps > 5000 {
        return Err(Error::InvalidArgument(
            "keep K·C ≤ 4096 and steps ≤ 5000".into(),
        ));
    }
    let mut g = CorrelationMatrix::random(channels, classes, &mut stream(seed, 900, 0));
    let scale = 1.0 / (channels * classes) as f64;
    let mut om = vec![om_metric(&g)];
    let mut lsm = vec![lsm_metric(&g)];
    for _ in 0..steps {
        let orth = orthogonality_grad(&g, beta);
        let sparse = sparsity_grad(&g, SparsityNorm::L1);
        for ((v, a), b) in g.values.value.iter_mut().zip(&orth).zip(&sparse) {
            *v -= lr * (a + scale * b);
        }
        g.project();
        om.push(om_metric(&g));
        lsm.push(lsm_metric(&g));
    }
    Ok(MatrixView {
        channels,
        classes,
        om,
        lsm,
        g: g.as_slice().to_vec(),
    })
}

/// The channel mask a label set keeps under `g`.
pub fn explore_mask(
    g: &[f64],
    channels: usize,
    classes: usize,
    labels: &[usize],
) -> Result<Vec<f64>> {
    let g = CorrelationMatrix::new(channels, classes, g.to_vec())?;
    instance_mask(labels, &g)
}

fn js<T: Serialize>(r: Result<T>) -> std::result::Result<String, JsError> {
    let v = r.map_err(|e| JsError::new(&e.to_string()))?;
    serde_json::to_string(&v).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen(js_name = exploreNoise)]
pub fn explore_noise_js(
    classes: usize,
    head: usize,
    factor: f64,
    noise_ratio: f64,
    seed: u32,
) -> std::result::Result<String, JsError> {
    js(explore_noise(
        classes,
        head,
        factor,
        noise_ratio,
        seed as u64,
    ))
}

#[wasm_bindgen(js_name = exploreLabels)]
pub fn explore_labels_js(
    weak: Vec<f64>,
    strong: Vec<f64>,
    gamma: f64,
    observed: usize,
    threshold: f64,
) -> std::result::Result<String, JsError> {
    js(explore_labels(&weak, &strong, gamma, observed, threshold))
}

#[wasm_bindgen(js_name = exploreMatrix)]
pub fn explore_matrix_js(
    channels: usize,
    classes: usize,
    beta: f64,
    lr: f64,
    steps: usize,
    seed: u32,
) -> std::result::Result<String, JsError> {
    js(explore_matrix(
        channels,
        classes,
        beta,
        lr,
        steps,
        seed as u64,
    ))
}

#[wasm_bindgen(js_name = exploreMask)]
pub fn explore_mask_js(
    g: Vec<f64>,
    channels: usize,
    classes: usize,
    labels: Vec<usize>,
) -> std::result::Result<String, JsError> {
    js(explore_mask(&g, channels, classes, &labels))
}
