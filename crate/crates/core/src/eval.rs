//! Metrics: crop faithfulness, Fréchet feature distance, attribute
//! classifier accuracy, and the variant ablation harness.
//!
//! All three metrics embed images with [`FixedEmbedder`], a frozen
//! seed-determined random convolutional network: three stride-2 4×4
//! convolutions (3→16→32→64, leaky ReLU 0.2) followed by a spatial mean,
//! giving a 64-dimensional feature. Faithfulness crops are standardized
//! per channel before embedding, so skin tint and brightness (per-channel
//! affine changes) do not register as attribute differences.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{Adam, AdamConfig, Graph, ParamSet, Var};
use crate::error::{Error, Result};
use crate::landmarks::LandmarkSet;
use crate::losses::cls_loss;
use crate::networks::{Networks, Variant};
use crate::synthdata::{hflip_augment, Attribute, Dataset, Sample, Split};
use crate::tensor::{Shape, Tensor};
use crate::training::{train_loop, NoHooks, TrainConfig, TrainData, TrainHooks, TrainState};
use crate::warpblend::{sample, taps};

/// Seed of the frozen embedder weights.
pub const EMBEDDER_SEED: u64 = 0x0067_656f_666c_6f77;
pub const EMBED_DIM: usize = 64;
/// Side length every attribute crop is resampled to.
pub const CROP_SIZE: usize = 32;
/// Crop margin as a fraction of the inter-ocular distance.
pub const CROP_MARGIN: f64 = 0.15;

const CHUNK: usize = 32;

fn uniform_tensor(rng: &mut ChaCha8Rng, shape: Shape, bound: f64) -> Tensor<f32> {
    Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound) as f32)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixedEmbedder {
    weights: Vec<Tensor<f32>>,
    biases: Vec<Tensor<f32>>,
}

impl Default for FixedEmbedder {
    fn default() -> Self {
        Self::new(EMBEDDER_SEED)
    }
}

impl FixedEmbedder {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let widths = [3, 16, 32, EMBED_DIM];
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for l in 0..3 {
            let (ci, co) = (widths[l], widths[l + 1]);
            let bound = (6.0 / (ci * 16) as f64).sqrt();
            weights.push(uniform_tensor(&mut rng, Shape::new(co, ci, 4, 4), bound));
            biases.push(uniform_tensor(&mut rng, Shape::new(1, co, 1, 1), 0.1));
        }
        FixedEmbedder { weights, biases }
    }

    /// N×3×H×W (H, W ≥ 8) → N feature vectors.
    pub fn embed(&self, images: &Tensor<f32>) -> Result<Vec<Vec<f64>>> {
        let n = images.shape().n();
        let mut out = Vec::with_capacity(n);
        for start in (0..n).step_by(CHUNK) {
            let len = CHUNK.min(n - start);
            let mut g = Graph::<f32>::new();
            let x = g.input(slice_batch(images, start, len));
            let mut h = x;
            for (w, b) in self.weights.iter().zip(&self.biases) {
                let (w, b) = (g.input(w.clone()), g.input(b.clone()));
                let y = g.conv2d(h, w, b, 2, 1)?;
                h = g.leaky_relu(y, 0.2);
            }
            let f = g.mean_spatial(h);
            let v = g.value(f);
            for k in 0..len {
                out.push((0..EMBED_DIM).map(|c| v.at(k, c, 0, 0) as f64).collect());
            }
        }
        Ok(out)
    }
}

fn slice_batch(t: &Tensor<f32>, start: usize, len: usize) -> Tensor<f32> {
    let s = t.shape();
    let per = s.numel() / s.n();
    Tensor::from_vec(s.with_n(len), t.data()[start * per..(start + len) * per].to_vec()).expect("sized slice")
}

/// Crop box `(x0, y0, x1, y1)` of an attribute: bounding box of its
/// landmark subset grown by `CROP_MARGIN` × inter-ocular distance.
pub fn crop_box(lm: &LandmarkSet, attribute: Attribute) -> Result<(f64, f64, f64, f64)> {
    if lm.len() != crate::synthdata::NUM_LANDMARKS {
        return Err(Error::Metric(format!(
            "crop rules need the 12-point landmark scheme, got {} points",
            lm.len()
        )));
    }
    let p = &lm.points;
    let eye = |a: usize, b: usize| ((p[a].x + p[b].x) / 2.0, (p[a].y + p[b].y) / 2.0);
    let (l, r) = (eye(4, 5), eye(6, 7));
    let margin = CROP_MARGIN * (l.0 - r.0).hypot(l.1 - r.1);
    let (x0, y0, x1, y1) = lm.bounds_of(attribute.crop_landmarks()).expect("indices in range");
    Ok((x0 - margin, y0 - margin, x1 + margin, y1 + margin))
}

/// Resamples the box of image `k` to a `CROP_SIZE`² patch (corner-aligned
/// bilinear, border clamped).
pub fn extract_crop(image: &Tensor<f32>, k: usize, bx: (f64, f64, f64, f64)) -> Result<Tensor<f32>> {
    let (x0, y0, x1, y1) = bx;
    if !(x1 - x0 > 0.0 && y1 - y0 > 0.0) {
        return Err(Error::Metric(format!(
            "degenerate crop box ({x0:.2}, {y0:.2})–({x1:.2}, {y1:.2})"
        )));
    }
    let s = image.shape();
    let (h, w) = (s.h(), s.w());
    let step = |lo: f64, hi: f64, i: usize| lo + (hi - lo) * i as f64 / (CROP_SIZE - 1) as f64;
    let mut out = Tensor::zeros(Shape::new(1, s.c(), CROP_SIZE, CROP_SIZE));
    for c in 0..s.c() {
        let off = image.index(k, c, 0, 0);
        let plane = &image.data()[off..off + h * w];
        for i in 0..CROP_SIZE {
            let ty = taps(step(y0, y1, i), h);
            for j in 0..CROP_SIZE {
                let tx = taps(step(x0, x1, j), w);
                out.set(0, c, i, j, sample(plane, w, tx, ty).0);
            }
        }
    }
    Ok(out)
}

/// Zero mean, unit variance per channel (the variance floored at 1e-6).
fn standardized(mut crop: Tensor<f32>) -> Tensor<f32> {
    let s = crop.shape();
    let hw = s.h() * s.w();
    for plane in crop.data_mut().chunks_mut(hw) {
        let m = plane.iter().map(|&v| v as f64).sum::<f64>() / hw as f64;
        let var = plane.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / hw as f64;
        let sd = var.max(1e-6).sqrt();
        for v in plane {
            *v = ((*v as f64 - m) / sd) as f32;
        }
    }
    crop
}

fn normalized(f: &[f64]) -> Result<Vec<f64>> {
    let norm = f.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(norm > 0.0 && norm.is_finite()) {
        return Err(Error::Metric(format!("feature norm {norm} cannot be normalized")));
    }
    Ok(f.iter().map(|v| v / norm).collect())
}

/// `‖f_a/‖f_a‖ − f_b/‖f_b‖‖` of two normalized features, in [0, 2].
pub fn feature_distance(fa: &[f64], fb: &[f64]) -> Result<f64> {
    let (a, b) = (normalized(fa)?, normalized(fb)?);
    Ok(a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt())
}

/// Distance between the attribute crops of `result` (at `lm_result`) and
/// `source` (at `lm_source`); lower means the attribute instance was kept.
pub fn faithfulness_score(
    embedder: &FixedEmbedder,
    result: &Tensor<f32>,
    source: &Tensor<f32>,
    lm_result: &LandmarkSet,
    lm_source: &LandmarkSet,
    attribute: Attribute,
) -> Result<f64> {
    let ca = standardized(extract_crop(result, 0, crop_box(lm_result, attribute)?)?);
    let cb = standardized(extract_crop(source, 0, crop_box(lm_source, attribute)?)?);
    let f = embedder.embed(&Tensor::stack(&[ca, cb])?)?;
    feature_distance(&f[0], &f[1])
}

/// Batched faithfulness over paired N-image tensors.
pub fn faithfulness_scores(
    embedder: &FixedEmbedder,
    results: &Tensor<f32>,
    sources: &Tensor<f32>,
    lm_results: &[LandmarkSet],
    lm_sources: &[LandmarkSet],
    attribute: Attribute,
) -> Result<Vec<f64>> {
    let n = results.shape().n();
    let mut crops = Vec::with_capacity(2 * n);
    for k in 0..n {
        crops.push(standardized(extract_crop(results, k, crop_box(&lm_results[k], attribute)?)?));
    }
    for k in 0..n {
        crops.push(standardized(extract_crop(sources, k, crop_box(&lm_sources[k], attribute)?)?));
    }
    let f = embedder.embed(&Tensor::stack(&crops)?)?;
    (0..n).map(|k| feature_distance(&f[k], &f[n + k])).collect()
}

/// Fréchet distance between Gaussian fits of two feature sets.
pub fn frechet_from_features(x: &[Vec<f64>], y: &[Vec<f64>]) -> Result<f64> {
    if x.len() < 2 || y.len() < 2 {
        return Err(Error::Metric(format!(
            "Fréchet distance needs ≥ 2 samples per set, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    let d = x[0].len();
    if x.iter().chain(y).any(|f| f.len() != d) {
        return Err(Error::Metric("feature dimensions differ".into()));
    }
    let stats = |set: &[Vec<f64>]| {
        let n = set.len() as f64;
        let mut mu = DVector::<f64>::zeros(d);
        for f in set {
            mu += DVector::from_column_slice(f);
        }
        mu /= n;
        let mut cov = DMatrix::<f64>::zeros(d, d);
        for f in set {
            let c = DVector::from_column_slice(f) - &mu;
            cov += &c * c.transpose();
        }
        cov /= n - 1.0;
        cov += DMatrix::identity(d, d) * 1e-6;
        (mu, cov)
    };
    let (mx, sx) = stats(x);
    let (my, sy) = stats(y);
    let sqrt_sym = |m: &DMatrix<f64>| {
        let e = SymmetricEigen::new(m.clone());
        let vals = e.eigenvalues.map(|v| v.max(0.0).sqrt());
        &e.eigenvectors * DMatrix::from_diagonal(&vals) * e.eigenvectors.transpose()
    };
    // Tr((Σx Σy)^½) = Tr((√Σx Σy √Σx)^½), the latter symmetric
    let r = sqrt_sym(&sx);
    let m = &r * &sy * &r;
    let m = (&m + m.transpose()) * 0.5;
    let tr_sqrt: f64 = SymmetricEigen::new(m).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let mean_term = (&mx - &my).norm_squared();
    Ok((mean_term + sx.trace() + sy.trace() - 2.0 * tr_sqrt).max(0.0))
}

pub fn frechet_distance(embedder: &FixedEmbedder, x: &Tensor<f32>, y: &Tensor<f32>) -> Result<f64> {
    frechet_from_features(&embedder.embed(x)?, &embedder.embed(y)?)
}

/// Small convolutional attribute classifier (3 stride-2 convolutions of
/// width 8/16/32, a 3×3 logit head and a spatial mean).
#[derive(Debug, Clone, PartialEq)]
pub struct AttributeClassifier {
    pub params: ParamSet<f32>,
    pub val_accuracy: f64,
}

/// Minimum validation accuracy before a classifier may score anything.
pub const CLASSIFIER_BAR: f64 = 0.95;

impl AttributeClassifier {
    fn init(seed: u64) -> ParamSet<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamSet::new();
        let layers = [(3, 8, 4), (8, 16, 4), (16, 32, 4), (32, 1, 3)];
        for (l, (ci, co, k)) in layers.into_iter().enumerate() {
            let bound = (6.0 / (ci * k * k) as f64).sqrt();
            p.add(format!("cls{l}.weight"), uniform_tensor(&mut rng, Shape::new(co, ci, k, k), bound));
            p.add(format!("cls{l}.bias"), Tensor::zeros(Shape::new(1, co, 1, 1)));
        }
        p
    }

    fn forward(params: &ParamSet<f32>, g: &mut Graph<f32>, trainable: bool, x: Var) -> Result<Var> {
        let b = params.bind(g, trainable);
        let v = b.vars();
        let mut h = x;
        for l in 0..3 {
            let y = g.conv2d(h, v[2 * l], v[2 * l + 1], 2, 1)?;
            h = g.leaky_relu(y, 0.2);
        }
        let y = g.conv2d(h, v[6], v[7], 1, 1)?;
        Ok(g.mean_spatial(y))
    }

    /// Raw logits, positive meaning "has the attribute".
    pub fn logits(&self, images: &Tensor<f32>) -> Result<Vec<f64>> {
        let n = images.shape().n();
        let mut out = Vec::with_capacity(n);
        for start in (0..n).step_by(CHUNK) {
            let len = CHUNK.min(n - start);
            let mut g = Graph::new();
            let x = g.input(slice_batch(images, start, len));
            let l = Self::forward(&self.params, &mut g, false, x)?;
            out.extend(g.value(l).data().iter().map(|&v| v as f64));
        }
        Ok(out)
    }

    /// Fraction of images whose predicted label matches `labels`.
    pub fn accuracy(&self, images: &Tensor<f32>, labels: &[u8]) -> Result<f64> {
        if self.val_accuracy < CLASSIFIER_BAR {
            return Err(Error::Metric(format!(
                "classifier validation accuracy {:.3} is below the {CLASSIFIER_BAR} bar",
                self.val_accuracy
            )));
        }
        let logits = self.logits(images)?;
        if logits.len() != labels.len() || logits.is_empty() {
            return Err(Error::Metric(format!("{} images but {} labels", logits.len(), labels.len())));
        }
        let correct = logits.iter().zip(labels).filter(|(l, &y)| (**l > 0.0) == (y == 1)).count();
        Ok(correct as f64 / labels.len() as f64)
    }
}

pub fn stack_images(samples: &[Sample]) -> Result<Tensor<f32>> {
    let imgs: Vec<Tensor<f32>> = samples.iter().map(|s| s.image.clone()).collect();
    Tensor::stack(&imgs)
}

/// Trains on the train split of both domains and measures the validation
/// split. The train and validation splits never overlap.
pub fn train_attribute_classifier(data: &Dataset, steps: usize, seed: u64) -> Result<AttributeClassifier> {
    let (ta, tb) = (data.split(0, Split::Train), data.split(1, Split::Train));
    if ta.is_empty() || tb.is_empty() {
        return Err(Error::Metric("classifier needs training samples in both domains".into()));
    }
    let mut params = AttributeClassifier::init(seed);
    let mut opt = Adam::new(AdamConfig::default(), &params);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x00c1_a551);
    let half = 8;
    for _ in 0..steps {
        let mut imgs = Vec::with_capacity(2 * half);
        for pool in [ta, tb] {
            for _ in 0..half {
                let s = &pool[rng.gen_range(0..pool.len())];
                imgs.push(if rng.gen_bool(0.5) { hflip_augment(s).image } else { s.image.clone() });
            }
        }
        let mut g = Graph::new();
        let x = g.input(Tensor::stack(&imgs)?);
        let b = params.bind(&mut g, true);
        let logits = {
            let v = b.vars();
            let mut h = x;
            for l in 0..3 {
                let y = g.conv2d(h, v[2 * l], v[2 * l + 1], 2, 1)?;
                h = g.leaky_relu(y, 0.2);
            }
            let y = g.conv2d(h, v[6], v[7], 1, 1)?;
            g.mean_spatial(y)
        };
        let neg = g.slice_batch(logits, 0, half)?;
        let pos = g.slice_batch(logits, half, half)?;
        let l0 = cls_loss(&mut g, neg, 0);
        let l1 = cls_loss(&mut g, pos, 1);
        let loss = g.add(l0, l1)?;
        g.backward(loss)?;
        params.collect_grads(&mut g, &b);
        opt.step(&mut params)?;
    }
    let mut clf = AttributeClassifier {
        params,
        val_accuracy: 1.0,
    };
    let (va, vb) = (data.split(0, Split::Val), data.split(1, Split::Val));
    let val: Vec<Sample> = va.iter().chain(vb).cloned().collect();
    let labels: Vec<u8> = val.iter().map(|s| s.label).collect();
    clf.val_accuracy = clf.accuracy(&stack_images(&val)?, &labels)?;
    Ok(clf)
}

/// Outputs of G and F on paired batches, computed without gradients.
#[derive(Debug, Clone)]
pub struct Inference {
    pub transferred: Tensor<f32>,
    pub warped: Tensor<f32>,
    pub mask: Tensor<f32>,
    pub residual: Tensor<f32>,
    pub flow: Tensor<f32>,
    /// `F(G(a, b_y))`.
    pub cycled: Tensor<f32>,
}

pub fn run_transfer(nets: &Networks<f32>, a: &Tensor<f32>, b_y: &Tensor<f32>) -> Result<Inference> {
    let n = a.shape().n();
    let mut parts: [Vec<Tensor<f32>>; 6] = Default::default();
    for start in (0..n).step_by(CHUNK) {
        let len = CHUNK.min(n - start);
        let mut g = Graph::new();
        let gp = nets.transfer.params.bind(&mut g, false);
        let fp = nets.removal.params.bind(&mut g, false);
        let av = g.input(slice_batch(a, start, len));
        let bv = g.input(slice_batch(b_y, start, len));
        let out = nets.transfer.forward(&mut g, &gp, av, bv)?;
        let cyc = nets.removal.forward(&mut g, &fp, out.output)?;
        for (k, v) in [out.output, out.warped, out.mask, out.residual, out.flow, cyc].into_iter().enumerate() {
            parts[k].push(g.value(v).clone());
        }
    }
    let [t, w, m, r, f, c] = parts.map(|p| Tensor::stack(&p).expect("same shapes"));
    Ok(Inference {
        transferred: t,
        warped: w,
        mask: m,
        residual: r,
        flow: f,
        cycled: c,
    })
}

pub fn run_removal(nets: &Networks<f32>, b_y: &Tensor<f32>) -> Result<Tensor<f32>> {
    let n = b_y.shape().n();
    let mut parts = Vec::new();
    for start in (0..n).step_by(CHUNK) {
        let len = CHUNK.min(n - start);
        let mut g = Graph::new();
        let fp = nets.removal.params.bind(&mut g, false);
        let bv = g.input(slice_batch(b_y, start, len));
        let out = nets.removal.forward(&mut g, &fp, bv)?;
        parts.push(g.value(out).clone());
    }
    Tensor::stack(&parts)
}

pub fn mean_abs_diff(x: &Tensor<f32>, y: &Tensor<f32>) -> f64 {
    let s: f64 = x.data().iter().zip(y.data()).map(|(a, b)| (a - b).abs() as f64).sum();
    s / x.len() as f64
}

/// Pairs `(a_i, b_j)` from two pools whose skin tints differ by at least
/// `min_gap`; each `a_i` takes the next unused-in-order `b_j` that qualifies.
pub fn appearance_shifted_pairs(a: &[Sample], b: &[Sample], min_gap: f64) -> Vec<(usize, usize)> {
    let mut j = 0;
    let mut pairs = Vec::new();
    for (i, sa) in a.iter().enumerate() {
        for _ in 0..b.len() {
            let cand = j % b.len();
            j += 1;
            if sa.spec.tint_gap(&b[cand].spec) >= min_gap {
                pairs.push((i, cand));
                break;
            }
        }
    }
    pairs
}

/// Metrics of one trained model on a fixed pair set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct VariantMetrics {
    /// Fréchet distance of transferred images to real domain-B images.
    pub fid: f64,
    pub faithfulness: f64,
    pub accuracy: f64,
    pub cycle_l1: f64,
}

/// Evaluates G/F on `pairs` of (target from `a`, source from `b`).
pub fn evaluate_pairs(
    nets: &Networks<f32>,
    a: &[Sample],
    b: &[Sample],
    pairs: &[(usize, usize)],
    reference_b: &Tensor<f32>,
    classifier: &AttributeClassifier,
    embedder: &FixedEmbedder,
    attribute: Attribute,
) -> Result<VariantMetrics> {
    let ta: Vec<Sample> = pairs.iter().map(|&(i, _)| a[i].clone()).collect();
    let tb: Vec<Sample> = pairs.iter().map(|&(_, j)| b[j].clone()).collect();
    let (ia, ib) = (stack_images(&ta)?, stack_images(&tb)?);
    let inf = run_transfer(nets, &ia, &ib)?;
    let lm_a: Vec<LandmarkSet> = ta.iter().map(|s| s.landmarks.clone()).collect();
    let lm_b: Vec<LandmarkSet> = tb.iter().map(|s| s.landmarks.clone()).collect();
    let faith = faithfulness_scores(embedder, &inf.transferred, &ib, &lm_a, &lm_b, attribute)?;
    Ok(VariantMetrics {
        fid: frechet_distance(embedder, &inf.transferred, reference_b)?,
        faithfulness: faith.iter().sum::<f64>() / faith.len() as f64,
        accuracy: classifier.accuracy(&inf.transferred, &vec![1; pairs.len()])?,
        cycle_l1: mean_abs_diff(&inf.cycled, &ia),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub seed: u64,
    #[serde(flatten)]
    pub metrics: VariantMetrics,
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationSummary {
    pub variant: String,
    pub runs: usize,
    pub fid_mean: f64,
    pub fid_std: f64,
    pub faithfulness_mean: f64,
    pub faithfulness_std: f64,
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationReport {
    pub format: String,
    pub attribute: String,
    pub pairs: usize,
    pub min_tint_gap: f64,
    pub classifier_val_accuracy: f64,
    pub rows: Vec<AblationRow>,
    pub summary: Vec<AblationSummary>,
}

/// Report column order (format version 1).
pub const REPORT_COLUMNS: [&str; 6] = ["variant", "seed", "fid", "faithfulness", "accuracy", "cycle_l1"];

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (m, var.sqrt())
}

impl AblationReport {
    pub fn new(attribute: Attribute, pairs: usize, min_tint_gap: f64, clf: f64, rows: Vec<AblationRow>) -> Self {
        let mut names: Vec<String> = Vec::new();
        for r in &rows {
            if !names.contains(&r.variant) {
                names.push(r.variant.clone());
            }
        }
        let summary = names
            .into_iter()
            .map(|name| {
                let sel: Vec<&VariantMetrics> = rows.iter().filter(|r| r.variant == name).map(|r| &r.metrics).collect();
                let col = |f: fn(&VariantMetrics) -> f64| mean_std(&sel.iter().map(|m| f(m)).collect::<Vec<_>>());
                let (fm, fs) = col(|m| m.fid);
                let (hm, hs) = col(|m| m.faithfulness);
                let (am, as_) = col(|m| m.accuracy);
                AblationSummary {
                    variant: name,
                    runs: sel.len(),
                    fid_mean: fm,
                    fid_std: fs,
                    faithfulness_mean: hm,
                    faithfulness_std: hs,
                    accuracy_mean: am,
                    accuracy_std: as_,
                }
            })
            .collect();
        AblationReport {
            format: "geoflow-ablation v1".into(),
            attribute: attribute.name().into(),
            pairs,
            min_tint_gap,
            classifier_val_accuracy: clf,
            rows,
            summary,
        }
    }

    pub fn summary_of(&self, variant: Variant) -> Option<&AblationSummary> {
        self.summary.iter().find(|s| s.variant == variant.name())
    }

    pub fn to_tsv(&self) -> String {
        let mut out = REPORT_COLUMNS.join("\t");
        out.push('\n');
        for r in &self.rows {
            let m = r.metrics;
            out.push_str(&format!(
                "{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\n",
                r.variant, r.seed, m.fid, m.faithfulness, m.accuracy, m.cycle_l1
            ));
        }
        out
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("report fields serialize")
    }
}

/// Settings shared by every run of an ablation.
#[derive(Debug, Clone)]
pub struct AblationConfig {
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    pub variants: Vec<Variant>,
    pub attribute: Attribute,
    pub min_tint_gap: f64,
}

/// Trains every (variant, seed) on the same dataset and scores each on the
/// same appearance-shifted test pairs. `hooks` builds per-run callbacks.
pub fn run_ablation(
    cfg: &AblationConfig,
    data: &Dataset,
    classifier: &AttributeClassifier,
    hooks: &mut dyn FnMut(Variant, u64) -> Box<dyn TrainHooks>,
) -> Result<AblationReport> {
    let embedder = FixedEmbedder::default();
    let (test_a, test_b) = (data.split(0, Split::Test), data.split(1, Split::Test));
    let pairs = appearance_shifted_pairs(test_a, test_b, cfg.min_tint_gap);
    if pairs.is_empty() {
        return Err(Error::Metric(format!("no test pairs with tint gap ≥ {}", cfg.min_tint_gap)));
    }
    let reference = stack_images(test_b)?;
    let train = TrainData {
        a: data.split(0, Split::Train),
        b: data.split(1, Split::Train),
    };
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        for &variant in &cfg.variants {
            let tc = TrainConfig {
                seed,
                variant,
                ..cfg.train.clone()
            };
            let mut state = TrainState::new(tc)?;
            let mut h = hooks(variant, seed);
            train_loop(&mut state, &train, h.as_mut())?;
            let metrics = evaluate_pairs(
                &state.nets,
                test_a,
                test_b,
                &pairs,
                &reference,
                classifier,
                &embedder,
                cfg.attribute,
            )?;
            rows.push(AblationRow {
                variant: variant.name().into(),
                seed,
                metrics,
            });
        }
    }
    Ok(AblationReport::new(
        cfg.attribute,
        pairs.len(),
        cfg.min_tint_gap,
        classifier.val_accuracy,
        rows,
    ))
}

/// Hook factory that discards everything.
pub fn no_hooks(_: Variant, _: u64) -> Box<dyn TrainHooks> {
    Box::new(NoHooks)
}
