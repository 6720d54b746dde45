//! Desk-scale evaluation: Fréchet-style feature distance, pairwise
//! diversity, mask agreement, and a downstream segmentation harness
//! comparing baseline against augmented training.

use crate::autodiff::{Graph, Var};
use crate::data::DefectSample;
use crate::error::{Error, Result};
use crate::maskgen::BinaryMask;
use crate::params::{Adam, ParamId, ParamStore};
use crate::{Image, Mask};
use nalgebra::DMatrix;
use ndarray::{Array1, Array2, ArrayD, Axis, IxDyn};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Feature dimension of the frozen extractor.
pub const FEATURE_DIM: usize = 64;

/// Frozen randomly-initialized conv net standing in for a pretrained
/// backbone; absolute values are proxies, only comparisons matter.
pub struct FeatureExtractor {
    layers: Vec<Array2<f64>>, // (out_ch, in_ch*9) per stride-2 stage
    channels: Vec<usize>,
}

impl FeatureExtractor {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let channels = vec![3usize, 16, 32, FEATURE_DIM];
        let layers = channels
            .windows(2)
            .map(|w| {
                let (ci, co) = (w[0], w[1]);
                let std = 1.0 / ((ci * 9) as f64).sqrt();
                Array2::from_shape_fn((co, ci * 9), |_| {
                    std * rng.sample::<f64, _>(rand_distr::StandardNormal)
                })
            })
            .collect();
        Self { layers, channels }
    }

    /// One image to an F-dim feature vector: three stride-2 convs with
    /// ReLU, then global average pooling.
    pub fn features(&self, img: &Image) -> Array1<f64> {
        let mut x = img.clone();
        for (li, w) in self.layers.iter().enumerate() {
            let cols = im2col_plain(&x, 3, 2);
            let mut y = w.dot(&cols); // (out_ch, oh*ow)
            if li + 1 < self.layers.len() {
                y.mapv_inplace(|v| v.max(0.0));
            }
            let (_, h, wd) = x.dim();
            let (oh, ow) = (h.div_ceil(2), wd.div_ceil(2));
            x = y
                .into_shape_with_order((self.channels[li + 1], oh, ow))
                .expect("conv output reshape");
        }
        x.mean_axis(Axis(2))
            .and_then(|m| m.mean_axis(Axis(1)))
            .expect("pool over nonempty map")
    }
}

/// Features for an image set with a seeded extractor, one row per image.
pub fn extract_features(images: &[Image], extractor_seed: u64) -> Result<Array2<f64>> {
    if images.is_empty() {
        return Err(Error::EmptyInput("feature extraction needs images".into()));
    }
    let net = FeatureExtractor::new(extractor_seed);
    let rows: Vec<Array1<f64>> = images.par_iter().map(|img| net.features(img)).collect();
    let mut out = Array2::zeros((rows.len(), FEATURE_DIM));
    for (i, r) in rows.iter().enumerate() {
        out.row_mut(i).assign(r);
    }
    Ok(out)
}

/// Forward-only convolution columns matching the autodiff layout:
/// replicate padding, kernel k, given stride.
fn im2col_plain(x: &Image, k: usize, stride: usize) -> Array2<f64> {
    let (c, h, w) = x.dim();
    let pad = k / 2;
    let (oh, ow) = (h.div_ceil(stride), w.div_ceil(stride));
    let mut out = Array2::zeros((c * k * k, oh * ow));
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = ci * k * k + ky * k + kx;
                for oy in 0..oh {
                    let sy = (oy * stride + ky).saturating_sub(pad).min(h - 1);
                    for ox in 0..ow {
                        let sx = (ox * stride + kx).saturating_sub(pad).min(w - 1);
                        out[[row, oy * ow + ox]] = x[[ci, sy, sx]];
                    }
                }
            }
        }
    }
    out
}

/// Mean and sample covariance of a feature set.
#[derive(Debug, Clone)]
pub struct FeatureStats {
    pub mean: Array1<f64>,
    pub cov: Array2<f64>,
    pub count: usize,
}

impl FeatureStats {
    pub fn from_features(feats: &Array2<f64>) -> Result<Self> {
        let n = feats.nrows();
        if n < 2 {
            return Err(Error::EmptyInput(format!(
                "covariance needs at least 2 samples, got {n}"
            )));
        }
        let f = feats.ncols();
        let mean = feats.mean_axis(Axis(0)).expect("nonempty rows");
        let centered = feats - &mean.clone().insert_axis(Axis(0));
        let cov = centered.t().dot(&centered) / (n - 1) as f64;
        debug_assert!((0..f).all(|i| (0..f).all(|j| (cov[[i, j]] - cov[[j, i]]).abs() < 1e-12)));
        Ok(Self { mean, cov, count: n })
    }
}

fn to_dmatrix(a: &Array2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

/// Symmetric PSD square root via eigen-decomposition; small negative
/// eigenvalues clip to zero, large ones are an error.
fn sym_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sym = nalgebra::SymmetricEigen::new(m.clone());
    let scale = sym
        .eigenvalues
        .iter()
        .fold(1.0f64, |acc, &v| acc.max(v.abs()));
    let mut roots = sym.eigenvalues.clone();
    for v in roots.iter_mut() {
        if *v < -1e-6 * scale {
            return Err(Error::Degenerate(format!(
                "covariance eigenvalue {v} is negative beyond tolerance"
            )));
        }
        *v = v.max(0.0).sqrt();
    }
    let d = DMatrix::from_diagonal(&roots);
    Ok(&sym.eigenvectors * d * sym.eigenvectors.transpose())
}

/// Fréchet distance between Gaussian fits:
/// ||mu_a - mu_b||^2 + tr(Sa + Sb - 2 (Sa Sb)^(1/2)).
pub fn frechet_distance(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    if a.mean.len() != b.mean.len() {
        return Err(Error::shape(a.mean.len(), b.mean.len()));
    }
    let diff = &a.mean - &b.mean;
    let mean_term: f64 = diff.iter().map(|v| v * v).sum();
    let sa = to_dmatrix(&a.cov);
    let sb = to_dmatrix(&b.cov);
    // tr sqrt(Sa Sb) computed on the symmetric form sqrt(Sa) Sb sqrt(Sa)
    let ra = sym_sqrt(&sa)?;
    let inner = &ra * &sb * &ra;
    let sym = nalgebra::SymmetricEigen::new((&inner + inner.transpose()) * 0.5);
    let tr_sqrt: f64 = sym.eigenvalues.iter().map(|&v| v.max(0.0).sqrt()).sum();
    Ok(mean_term + sa.trace() + sb.trace() - 2.0 * tr_sqrt)
}

/// Mean L2 distance over unordered image pairs in feature space,
/// normalized by the feature dimension.
pub fn pairwise_diversity(images: &[Image], extractor_seed: u64) -> Result<f64> {
    if images.len() < 2 {
        return Err(Error::EmptyInput("diversity needs at least 2 images".into()));
    }
    let feats = extract_features(images, extractor_seed)?;
    let n = feats.nrows();
    let mut total = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            let d: f64 = feats
                .row(i)
                .iter()
                .zip(feats.row(j).iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            total += d.sqrt();
        }
    }
    let pairs = (n * (n - 1) / 2) as f64;
    Ok(total / pairs / FEATURE_DIM as f64)
}

/// Intersection over union of two binary masks; both-empty is 1.0.
pub fn mask_iou(pred: &BinaryMask, truth: &BinaryMask) -> Result<f64> {
    if pred.0.dim() != truth.0.dim() {
        return Err(Error::shape(truth.0.dim(), pred.0.dim()));
    }
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&p, &t) in pred.0.iter().zip(truth.0.iter()) {
        let (p, t) = (p == 255, t == 255);
        inter += (p && t) as usize;
        union += (p || t) as usize;
    }
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

/// Pixel-level segmentation quality on raw scores and 0.5-thresholded
/// predictions.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SegMetrics {
    pub miou: f64,
    pub f1: f64,
    pub map: f64,
    pub auroc: f64,
}

/// Two-class mean IoU at threshold 0.5 over aggregated pixels.
fn miou_from_scores(scores: &[f64], labels: &[bool]) -> f64 {
    let mut fg_i = 0usize;
    let mut fg_u = 0usize;
    let mut bg_i = 0usize;
    let mut bg_u = 0usize;
    for (&s, &y) in scores.iter().zip(labels) {
        let p = s >= 0.5;
        fg_i += (p && y) as usize;
        fg_u += (p || y) as usize;
        bg_i += (!p && !y) as usize;
        bg_u += (!p || !y) as usize;
    }
    let fg = if fg_u == 0 { 1.0 } else { fg_i as f64 / fg_u as f64 };
    let bg = if bg_u == 0 { 1.0 } else { bg_i as f64 / bg_u as f64 };
    (fg + bg) / 2.0
}

fn f1_from_scores(scores: &[f64], labels: &[bool]) -> f64 {
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fne = 0usize;
    for (&s, &y) in scores.iter().zip(labels) {
        let p = s >= 0.5;
        tp += (p && y) as usize;
        fp += (p && !y) as usize;
        fne += (!p && y) as usize;
    }
    if 2 * tp + fp + fne == 0 {
        return 1.0;
    }
    2.0 * tp as f64 / (2 * tp + fp + fne) as f64
}

/// Average precision of ranked pixel scores (mean precision at each
/// positive, descending scores; ties broken by original order).
pub fn average_precision(scores: &[f64], labels: &[bool]) -> f64 {
    let positives = labels.iter().filter(|&&y| y).count();
    if positives == 0 {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("finite scores"));
    let mut tp = 0usize;
    let mut ap = 0.0;
    for (k, &i) in order.iter().enumerate() {
        if labels[i] {
            tp += 1;
            ap += tp as f64 / (k + 1) as f64;
        }
    }
    ap / positives as f64
}

/// Rank-based AUROC with midrank tie handling; degenerate sets give 0.5.
pub fn auroc(scores: &[f64], labels: &[bool]) -> f64 {
    let pos = labels.iter().filter(|&&y| y).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return 0.5;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            if labels[idx] {
                rank_sum_pos += midrank;
            }
        }
        i = j + 1;
    }
    (rank_sum_pos - pos as f64 * (pos as f64 + 1.0) / 2.0) / (pos as f64 * neg as f64)
}

/// Budget and seeds for the downstream harness.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DownstreamConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    /// Defect-pixel loss weight against class imbalance.
    pub pos_weight: f64,
    /// Generated samples kept per product, as a multiple of real count.
    pub augment_ratio: f64,
}

impl Default for DownstreamConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch: 4,
            lr: 1e-2,
            seed: 0,
            pos_weight: 4.0,
            augment_ratio: 2.0,
        }
    }
}

/// Three-level encoder-decoder segmenter emitting per-pixel logits.
pub struct Segmenter {
    store: ParamStore,
    ids: Vec<(ParamId, ParamId)>, // (weight, bias) per conv
    widths: Vec<usize>,
}

const SEG_PLAN: [(usize, usize, usize); 7] = [
    // (in_ch, out_ch, stride); decoder convs follow a 2x upsample
    (3, 16, 1),
    (16, 32, 2),
    (32, 64, 2),
    (64, 64, 1),
    (64, 32, 1),
    (32, 16, 1),
    (16, 1, 1),
];

impl Segmenter {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut ids = Vec::new();
        let mut widths = Vec::new();
        for (i, (ci, co, _)) in SEG_PLAN.iter().enumerate() {
            let std = 1.0 / ((ci * 9) as f64).sqrt();
            let w = store.add_normal(&format!("seg.conv{i}.w"), &[*co, ci * 9], std, &mut rng);
            let b = store.add_zeros(&format!("seg.conv{i}.b"), &[1, *co]);
            ids.push((w, b));
            widths.push(*co);
        }
        Self { store, ids, widths }
    }

    pub fn parameter_count(&self) -> usize {
        self.store.scalar_count()
    }

    fn conv(
        g: &mut Graph,
        params: &[Var],
        ids: (ParamId, ParamId),
        x: Var,
        out_ch: usize,
        stride: usize,
    ) -> Var {
        let shape = g.value(x).shape().to_vec();
        let (h, w) = (shape[1], shape[2]);
        let cols = g.im2col(x, 3, stride);
        let y = g.matmul(params[ids.0 .0], cols); // (out_ch, oh*ow)
        let yt = g.permute(y, &[1, 0]);
        let yt = g.add_row(yt, params[ids.1 .0]);
        let y = g.permute(yt, &[1, 0]);
        g.reshape(y, &[out_ch, h.div_ceil(stride), w.div_ceil(stride)])
    }

    /// Logit map for one image; `params` comes from `register_all`.
    fn logits_graph(&self, g: &mut Graph, params: &[Var], img: &Image) -> Var {
        let x = g.input(img.clone().into_dyn());
        let mut h = Self::conv(g, params, self.ids[0], x, self.widths[0], 1);
        h = g.relu(h);
        h = Self::conv(g, params, self.ids[1], h, self.widths[1], 2);
        h = g.relu(h);
        h = Self::conv(g, params, self.ids[2], h, self.widths[2], 2);
        h = g.relu(h);
        h = Self::conv(g, params, self.ids[3], h, self.widths[3], 1);
        h = g.relu(h);
        h = g.upsample2(h);
        h = Self::conv(g, params, self.ids[4], h, self.widths[4], 1);
        h = g.relu(h);
        h = g.upsample2(h);
        h = Self::conv(g, params, self.ids[5], h, self.widths[5], 1);
        h = g.relu(h);
        Self::conv(g, params, self.ids[6], h, self.widths[6], 1)
    }

    /// Per-pixel probabilities for one image.
    pub fn predict(&self, img: &Image) -> Array2<f64> {
        let (_, h, w) = img.dim();
        let mut g = Graph::new();
        let params = self.store.register_all(&mut g);
        let z = self.logits_graph(&mut g, &params, img);
        let v = g.value(z);
        Array2::from_shape_fn((h, w), |(y, x)| sigmoid(v[[0, y, x]]))
    }

    /// Weighted binary cross-entropy with logits against a {0,1} mask.
    fn loss_graph(&self, g: &mut Graph, params: &[Var], img: &Image, mask: &Mask, pos_weight: f64) -> Var {
        let z = self.logits_graph(g, params, img);
        let (h, w) = mask.dim();
        let z = g.reshape(z, &[h * w]);
        let y = g.constant(
            ArrayD::from_shape_vec(IxDyn(&[h * w]), mask.iter().cloned().collect()).unwrap(),
        );
        // bce = softplus(z) - y*z, weighted (1 + (pw-1)*y) per pixel
        let sp = g.softplus(z);
        let yz = g.mul(y, z);
        let bce = g.sub(sp, yz);
        let weights: Vec<f64> = mask
            .iter()
            .map(|&m| 1.0 + (pos_weight - 1.0) * m)
            .collect();
        let wsum: f64 = weights.iter().sum();
        let wv = g.constant(ArrayD::from_shape_vec(IxDyn(&[h * w]), weights).unwrap());
        let weighted = g.mul(bce, wv);
        let total = g.sum_all(weighted);
        g.mul_scalar(total, 1.0 / wsum)
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Train a segmenter on image/mask pairs under a fixed budget.
pub fn train_segmenter(samples: &[DefectSample], cfg: &DownstreamConfig) -> Result<Segmenter> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("segmenter training set is empty".into()));
    }
    let (_, h, w) = samples[0].image.dim();
    if h % 4 != 0 || w % 4 != 0 {
        return Err(Error::InvalidConfig(format!(
            "segmenter needs sides divisible by 4, got {h}x{w}"
        )));
    }
    let seg = Segmenter::new(cfg.seed);
    let mut seg = seg;
    let mut opt = Adam::new(&seg.store, cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    for _step in 0..cfg.steps {
        let batch: Vec<usize> = (0..cfg.batch)
            .map(|_| rng.random_range(0..samples.len()))
            .collect();
        let per_sample: Vec<Vec<Option<ArrayD<f64>>>> = batch
            .par_iter()
            .map(|&i| {
                let mut g = Graph::new();
                let params = seg.store.register_all(&mut g);
                let loss =
                    seg.loss_graph(&mut g, &params, &samples[i].image, &samples[i].mask, cfg.pos_weight);
                let grads = g.backward(loss);
                params
                    .iter()
                    .map(|v| grads.get(*v).cloned())
                    .collect::<Vec<_>>()
            })
            .collect();
        let n = seg.store.len();
        let mut avg: Vec<Option<ArrayD<f64>>> = vec![None; n];
        for gset in &per_sample {
            for (slot, g) in avg.iter_mut().zip(gset) {
                if let Some(g) = g {
                    match slot {
                        Some(acc) => *acc += g,
                        None => *slot = Some(g.clone()),
                    }
                }
            }
        }
        for slot in avg.iter_mut().flatten() {
            slot.mapv_inplace(|v| v / cfg.batch as f64);
        }
        opt.step(&mut seg.store, &avg, Some(1.0));
    }
    Ok(seg)
}

/// Score a segmenter on a test set, aggregating pixels across images.
pub fn evaluate_segmenter(seg: &Segmenter, test: &[DefectSample]) -> Result<SegMetrics> {
    if test.is_empty() {
        return Err(Error::EmptyInput("segmenter test set is empty".into()));
    }
    let predictions: Vec<Array2<f64>> =
        test.par_iter().map(|s| seg.predict(&s.image)).collect();
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for (s, p) in test.iter().zip(&predictions) {
        if p.dim() != s.mask.dim() {
            return Err(Error::shape(s.mask.dim(), p.dim()));
        }
        for (&sc, &m) in p.iter().zip(s.mask.iter()) {
            scores.push(sc);
            labels.push(m == 1.0);
        }
    }
    Ok(SegMetrics {
        miou: miou_from_scores(&scores, &labels),
        f1: f1_from_scores(&scores, &labels),
        map: average_precision(&scores, &labels),
        auroc: auroc(&scores, &labels),
    })
}

/// Cap generated samples at `ratio` times the per-product real count,
/// keeping input order.
fn cap_generated(
    real: &[DefectSample],
    generated: &[DefectSample],
    ratio: f64,
) -> Vec<DefectSample> {
    let mut real_counts: std::collections::HashMap<&str, usize> = Default::default();
    for s in real {
        *real_counts.entry(s.product.as_str()).or_default() += 1;
    }
    let mut taken: std::collections::HashMap<&str, usize> = Default::default();
    let mut out = Vec::new();
    for s in generated {
        let cap = (real_counts.get(s.product.as_str()).copied().unwrap_or(0) as f64 * ratio)
            .floor() as usize;
        let t = taken.entry(s.product.as_str()).or_default();
        if *t < cap {
            *t += 1;
            out.push(s.clone());
        }
    }
    out
}

/// Train twice (real only; real plus capped generated) with identical
/// seeds and budget, and score both on the test set.
pub fn run_downstream(
    train_real: &[DefectSample],
    train_generated: &[DefectSample],
    test: &[DefectSample],
    cfg: &DownstreamConfig,
) -> Result<(SegMetrics, SegMetrics)> {
    if train_real.is_empty() || test.is_empty() {
        return Err(Error::EmptyInput("downstream needs real train and test sets".into()));
    }
    let baseline_seg = train_segmenter(train_real, cfg)?;
    let baseline = evaluate_segmenter(&baseline_seg, test)?;

    let mut augmented_set: Vec<DefectSample> = train_real.to_vec();
    augmented_set.extend(cap_generated(train_real, train_generated, cfg.augment_ratio));
    let augmented_seg = train_segmenter(&augmented_set, cfg)?;
    let augmented = evaluate_segmenter(&augmented_seg, test)?;
    Ok((baseline, augmented))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_sample, sample_seed};
    use crate::GOOD_LABEL;

    #[test]
    fn extractor_is_deterministic_and_separates_black_white() {
        let black = Image::zeros((3, 32, 32));
        let white = Image::from_elem((3, 32, 32), 1.0);
        let f1 = extract_features(&[black.clone(), black.clone(), white.clone()], 0).unwrap();
        let f2 = extract_features(&[black.clone(), black, white], 0).unwrap();
        assert_eq!(f1, f2);
        assert_eq!(f1.row(0), f1.row(1));
        let d: f64 = f1
            .row(0)
            .iter()
            .zip(f1.row(2).iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        assert!(d.sqrt() > 0.0, "black and white collapse");
        assert!(extract_features(&[], 0).is_err());
    }

    #[test]
    fn frechet_self_distance_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let feats = Array2::from_shape_fn((12, FEATURE_DIM), |_| rng.random::<f64>());
        let s = FeatureStats::from_features(&feats).unwrap();
        let d = frechet_distance(&s, &s).unwrap();
        assert!(d.abs() < 1e-6, "self distance {d}");
    }

    #[test]
    fn frechet_equal_cov_unit_mean_shift_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let feats = Array2::from_shape_fn((20, 8), |_| rng.random::<f64>());
        let a = FeatureStats::from_features(&feats).unwrap();
        let mut b = a.clone();
        b.mean[0] += 1.0;
        let d = frechet_distance(&a, &b).unwrap();
        assert!((d - 1.0).abs() < 1e-8, "got {d}");
    }

    #[test]
    fn frechet_matches_scalar_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let (m1, m2) = (rng.random::<f64>() * 4.0 - 2.0, rng.random::<f64>() * 4.0 - 2.0);
            let (s1, s2) = (rng.random::<f64>() + 0.1, rng.random::<f64>() + 0.1);
            let a = FeatureStats {
                mean: ndarray::arr1(&[m1]),
                cov: ndarray::arr2(&[[s1 * s1]]),
                count: 2,
            };
            let b = FeatureStats {
                mean: ndarray::arr1(&[m2]),
                cov: ndarray::arr2(&[[s2 * s2]]),
                count: 2,
            };
            let want = (m1 - m2).powi(2) + (s1 - s2).powi(2);
            let got = frechet_distance(&a, &b).unwrap();
            assert!((got - want).abs() < 1e-6, "got {got}, want {want}");
        }
    }

    #[test]
    fn frechet_is_symmetric_and_nonnegative() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let fa = Array2::from_shape_fn((10, 6), |_| rng.random::<f64>());
            let fb = Array2::from_shape_fn((14, 6), |_| rng.random::<f64>() + 0.3);
            let a = FeatureStats::from_features(&fa).unwrap();
            let b = FeatureStats::from_features(&fb).unwrap();
            let ab = frechet_distance(&a, &b).unwrap();
            let ba = frechet_distance(&b, &a).unwrap();
            assert!((ab - ba).abs() < 1e-8);
            assert!(ab > -1e-10);
        }
        let a = FeatureStats {
            mean: ndarray::arr1(&[0.0]),
            cov: ndarray::arr2(&[[1.0]]),
            count: 2,
        };
        let b = FeatureStats {
            mean: ndarray::arr1(&[0.0, 1.0]),
            cov: ndarray::arr2(&[[1.0, 0.0], [0.0, 1.0]]),
            count: 2,
        };
        assert!(frechet_distance(&a, &b).is_err());
    }

    #[test]
    fn stats_require_two_samples() {
        let feats = Array2::zeros((1, 4));
        assert!(FeatureStats::from_features(&feats).is_err());
    }

    #[test]
    fn diversity_zero_for_identical_and_positive_for_distinct() {
        let img = generate_sample("striped", GOOD_LABEL, 32, 1).unwrap().image;
        let d = pairwise_diversity(&[img.clone(), img.clone(), img.clone()], 0).unwrap();
        assert_eq!(d, 0.0);
        let other = generate_sample("disc", GOOD_LABEL, 32, 2).unwrap().image;
        let d = pairwise_diversity(&[img, other], 0).unwrap();
        assert!(d > 0.0);
        let lone = generate_sample("disc", GOOD_LABEL, 32, 3).unwrap().image;
        assert!(pairwise_diversity(&[lone], 0).is_err());
    }

    #[test]
    fn diversity_duplication_follows_pair_combinatorics() {
        // duplicating every image scales the mean by 2(n-1)/(2n-1):
        // original pairs appear 4 times, plus n zero-distance twin pairs
        let a = generate_sample("striped", GOOD_LABEL, 32, 10).unwrap().image;
        let b = generate_sample("checker", GOOD_LABEL, 32, 11).unwrap().image;
        let base = pairwise_diversity(&[a.clone(), b.clone()], 0).unwrap();
        let doubled = pairwise_diversity(&[a.clone(), b.clone(), a, b], 0).unwrap();
        let expect = base * 2.0 * (2.0 - 1.0) / (2.0 * 2.0 - 1.0);
        assert!((doubled - expect).abs() < 1e-9, "got {doubled}, want {expect}");
    }

    fn bmask(pixels: &[(usize, usize)]) -> BinaryMask {
        let mut m = Array2::<u8>::zeros((4, 4));
        for &(y, x) in pixels {
            m[[y, x]] = 255;
        }
        BinaryMask(m)
    }

    #[test]
    fn mask_iou_hand_cases() {
        let a = bmask(&[(0, 0), (0, 1)]);
        assert_eq!(mask_iou(&a, &a).unwrap(), 1.0);
        let b = bmask(&[(2, 2), (2, 3)]);
        assert_eq!(mask_iou(&a, &b).unwrap(), 0.0);
        // equal areas overlapping in one pixel: 1 / 3
        let c = bmask(&[(0, 1), (0, 2)]);
        assert!((mask_iou(&a, &c).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        let empty = bmask(&[]);
        assert_eq!(mask_iou(&empty, &empty).unwrap(), 1.0);
        assert_eq!(mask_iou(&a, &empty).unwrap(), 0.0);
        // symmetry and shape check
        assert_eq!(mask_iou(&a, &c).unwrap(), mask_iou(&c, &a).unwrap());
        let tall = BinaryMask(Array2::zeros((2, 4)));
        assert!(mask_iou(&a, &tall).is_err());
    }

    #[test]
    fn ranked_metrics_match_hand_oracles() {
        let scores = [0.9, 0.8, 0.3, 0.2];
        let labels = [true, false, true, false];
        // positives ranked 1 and 3: AP = (1/1 + 2/3) / 2
        let ap = average_precision(&scores, &labels);
        assert!((ap - 5.0 / 6.0).abs() < 1e-12, "ap {ap}");
        // pos-neg win count 3 of 4 pairs
        let auc = auroc(&scores, &labels);
        assert!((auc - 0.75).abs() < 1e-12, "auc {auc}");
        // ties get midranks: all-equal scores give chance level
        let auc = auroc(&[0.5, 0.5, 0.5, 0.5], &labels);
        assert!((auc - 0.5).abs() < 1e-12);
        assert_eq!(average_precision(&scores, &[false; 4]), 0.0);
    }

    #[test]
    fn threshold_metrics_match_hand_oracles() {
        let scores = [0.9, 0.6, 0.4, 0.1];
        let labels = [true, false, true, false];
        // fg: tp=1 fp=1 fn=1 -> iou 1/3; bg: tp=1 fn=1 fp=1 -> iou 1/3
        let miou = miou_from_scores(&scores, &labels);
        assert!((miou - 1.0 / 3.0).abs() < 1e-12, "miou {miou}");
        let f1 = f1_from_scores(&scores, &labels);
        assert!((f1 - 0.5).abs() < 1e-12, "f1 {f1}");
        // empty prediction and truth
        assert_eq!(miou_from_scores(&[0.1], &[false]), 1.0);
        assert_eq!(f1_from_scores(&[0.1], &[false]), 1.0);
    }

    fn tiny_set(products: &[&str], defect: &str, count: usize, tag: u64) -> Vec<DefectSample> {
        let mut out = Vec::new();
        for p in products {
            for i in 0..count {
                let seed = sample_seed(tag, p, defect, i);
                out.push(generate_sample(p, defect, 16, seed).unwrap());
            }
        }
        out
    }

    #[test]
    fn downstream_control_reproduces_baseline_bitwise() {
        let real = tiny_set(&["striped"], "spot", 3, 1);
        let test = tiny_set(&["striped"], "spot", 2, 2);
        let cfg = DownstreamConfig {
            steps: 8,
            batch: 2,
            ..Default::default()
        };
        let (base, aug) = run_downstream(&real, &[], &test, &cfg).unwrap();
        assert_eq!(base.miou.to_bits(), aug.miou.to_bits());
        assert_eq!(base.f1.to_bits(), aug.f1.to_bits());
        assert_eq!(base.map.to_bits(), aug.map.to_bits());
        assert_eq!(base.auroc.to_bits(), aug.auroc.to_bits());
    }

    #[test]
    fn downstream_is_deterministic_across_runs() {
        let real = tiny_set(&["checker"], "scratch", 2, 3);
        let test = tiny_set(&["checker"], "scratch", 2, 4);
        let cfg = DownstreamConfig {
            steps: 6,
            batch: 2,
            ..Default::default()
        };
        let (b1, a1) = run_downstream(&real, &real, &test, &cfg).unwrap();
        let (b2, a2) = run_downstream(&real, &real, &test, &cfg).unwrap();
        assert_eq!(b1.miou.to_bits(), b2.miou.to_bits());
        assert_eq!(a1.miou.to_bits(), a2.miou.to_bits());
        assert_eq!(a1.auroc.to_bits(), a2.auroc.to_bits());
    }

    #[test]
    fn augment_cap_limits_per_product() {
        let real = tiny_set(&["striped", "checker"], "spot", 2, 5);
        let generated = tiny_set(&["striped"], "spot", 10, 6);
        let capped = cap_generated(&real, &generated, 2.0);
        // 2 real striped samples allow at most 4 generated
        assert_eq!(capped.len(), 4);
        assert!(capped.iter().all(|s| s.product == "striped"));
        // unknown product contributes nothing
        let foreign = tiny_set(&["disc"], "spot", 3, 7);
        assert!(cap_generated(&real, &foreign, 2.0).is_empty());
    }

    #[test]
    fn segmenter_overfits_one_sample() {
        let sample = generate_sample("striped", "spot", 16, sample_seed(9, "striped", "spot", 0))
            .unwrap();
        let train = vec![sample.clone(), sample.clone()];
        let cfg = DownstreamConfig {
            steps: 120,
            batch: 2,
            lr: 2e-2,
            ..Default::default()
        };
        let seg = train_segmenter(&train, &cfg).unwrap();
        let m = evaluate_segmenter(&seg, &[sample]).unwrap();
        assert!(m.auroc > 0.95, "auroc {}", m.auroc);
        assert!(m.miou > 0.55, "miou {}", m.miou);
        for v in [m.miou, m.f1, m.map, m.auroc] {
            assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn segmenter_parameter_budget() {
        let seg = Segmenter::new(0);
        let n = seg.parameter_count();
        assert!(n > 50_000 && n < 150_000, "got {n}");
    }
}
