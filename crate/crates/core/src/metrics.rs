//! Layout tokens, bigram perplexity, diversity statistics and the downstream
//! classification harness.

use std::collections::{BTreeMap, BTreeSet};

use layoutgen_numeric::{ParamStore, Rng, Tape, Tensor};
use serde::{Deserialize, Serialize};

use crate::io::sig17;
use crate::layout::{canonical_reading_order, jitter_bbox, ElementType, LayoutDocument, LayoutElement};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenizerConfig {
    /// Cells per side of the position grid.
    pub grid: usize,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self { grid: 8 }
    }
}

impl TokenizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid == 0 {
            return Err(Error::Config("tokenizer.grid must be ≥ 1".into()));
        }
        Ok(())
    }

    /// One token per (type, cell) plus the end-of-document token.
    pub fn vocab_size(&self) -> usize {
        ElementType::COUNT * self.grid * self.grid + 1
    }

    pub fn eod(&self) -> usize {
        ElementType::COUNT * self.grid * self.grid
    }
}

fn cell(v: f64, g: usize) -> usize {
    ((v * g as f64).floor().max(0.0) as usize).min(g - 1)
}

/// Elements in reading order as `type·G² + row·G + col` of their centers,
/// then the end-of-document token.
pub fn tokenize_layout(doc: &LayoutDocument, cfg: &TokenizerConfig) -> Vec<usize> {
    let g = cfg.grid;
    let mut out: Vec<usize> = canonical_reading_order(doc)
        .into_iter()
        .map(|i| {
            let e = &doc.elements[i];
            e.element_type.index() * g * g + cell(e.bbox.cy(), g) * g + cell(e.bbox.cx(), g)
        })
        .collect();
    out.push(cfg.eod());
    out
}

/// Add-alpha smoothed bigram counts. Every sequence starts from the
/// end-of-document state, taken to be the last vocabulary entry.
#[derive(Debug, Clone, PartialEq)]
pub struct BigramModel {
    pub vocab: usize,
    pub alpha: f64,
    counts: Vec<u64>,
    row_sums: Vec<u64>,
    pub sequences: usize,
}

impl BigramModel {
    /// A model with no observations.
    pub fn new(vocab: usize, alpha: f64) -> Result<Self> {
        if vocab == 0 {
            return Err(Error::Metrics("vocabulary is empty".into()));
        }
        if !(alpha.is_finite() && alpha >= 0.0) {
            return Err(Error::Metrics(format!("alpha must be ≥ 0, got {alpha}")));
        }
        Ok(Self {
            vocab,
            alpha,
            counts: vec![0; vocab * vocab],
            row_sums: vec![0; vocab],
            sequences: 0,
        })
    }

    pub fn start(&self) -> usize {
        self.vocab - 1
    }

    pub fn count(&self, prev: usize, next: usize) -> u64 {
        self.counts[prev * self.vocab + next]
    }

    /// `P(next | prev)`; 0 for an unseen context without smoothing.
    pub fn prob(&self, prev: usize, next: usize) -> f64 {
        let den = self.row_sums[prev] as f64 + self.alpha * self.vocab as f64;
        if den == 0.0 {
            0.0
        } else {
            (self.count(prev, next) as f64 + self.alpha) / den
        }
    }

    fn observe(&mut self, seq: &[usize]) -> Result<()> {
        let mut prev = self.start();
        for &t in seq {
            if t >= self.vocab {
                return Err(Error::Metrics(format!("token {t} outside vocabulary of {}", self.vocab)));
            }
            self.counts[prev * self.vocab + t] += 1;
            self.row_sums[prev] += 1;
            prev = t;
        }
        self.sequences += 1;
        Ok(())
    }
}

pub fn fit_bigram(sequences: &[Vec<usize>], vocab: usize, alpha: f64) -> Result<BigramModel> {
    if sequences.is_empty() {
        return Err(Error::EmptyCorpus("bigram fit".into()));
    }
    let mut model = BigramModel::new(vocab, alpha)?;
    for s in sequences {
        model.observe(s)?;
    }
    Ok(model)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PerplexityReport {
    #[serde(serialize_with = "sig17::serialize")]
    pub perplexity: f64,
    pub tokens: usize,
    pub fit_size: usize,
    pub eval_size: usize,
    pub grid: Option<usize>,
    #[serde(serialize_with = "sig17::serialize")]
    pub alpha: f64,
}

/// `exp` of the mean negative log-likelihood per token of `eval`.
pub fn perplexity(model: &BigramModel, eval: &[Vec<usize>]) -> Result<PerplexityReport> {
    if eval.is_empty() {
        return Err(Error::EmptyCorpus("perplexity evaluation".into()));
    }
    let mut nll = 0.0;
    let mut tokens = 0;
    for seq in eval {
        let mut prev = model.start();
        for &t in seq {
            if t >= model.vocab {
                return Err(Error::Metrics(format!("token {t} outside vocabulary of {}", model.vocab)));
            }
            let p = model.prob(prev, t);
            if p <= 0.0 {
                return Err(Error::Metrics("infinite perplexity; use smoothing".into()));
            }
            nll -= p.ln();
            tokens += 1;
            prev = t;
        }
    }
    if tokens == 0 {
        return Err(Error::Metrics("evaluation sequences hold no tokens".into()));
    }
    Ok(PerplexityReport {
        perplexity: (nll / tokens as f64).exp(),
        tokens,
        fit_size: model.sequences,
        eval_size: eval.len(),
        grid: None,
        alpha: model.alpha,
    })
}

/// Perplexity of `eval` documents under a bigram fitted to `fit` documents.
pub fn layout_perplexity(
    fit: &[LayoutDocument],
    eval: &[LayoutDocument],
    cfg: &TokenizerConfig,
    alpha: f64,
) -> Result<PerplexityReport> {
    cfg.validate()?;
    let tok = |docs: &[LayoutDocument]| docs.iter().map(|d| tokenize_layout(d, cfg)).collect::<Vec<_>>();
    let model = fit_bigram(&tok(fit), cfg.vocab_size(), alpha)?;
    let mut report = perplexity(&model, &tok(eval))?;
    report.grid = Some(cfg.grid);
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiversityStats {
    pub layouts: usize,
    pub elements: usize,
    /// Element count per type name, all eight listed.
    pub type_histogram: BTreeMap<String, usize>,
    /// Number of layouts per element count.
    pub count_histogram: BTreeMap<usize, usize>,
    pub distinct_token_multisets: usize,
}

pub fn diversity_stats(layouts: &[LayoutDocument], cfg: &TokenizerConfig) -> Result<DiversityStats> {
    if layouts.is_empty() {
        return Err(Error::EmptyCorpus("diversity".into()));
    }
    let mut type_histogram: BTreeMap<String, usize> = ElementType::ALL.iter().map(|t| (t.name().to_string(), 0)).collect();
    let mut count_histogram = BTreeMap::new();
    let mut multisets = BTreeSet::new();
    for d in layouts {
        for e in &d.elements {
            *type_histogram.get_mut(e.element_type.name()).expect("all types listed") += 1;
        }
        *count_histogram.entry(d.elements.len()).or_insert(0) += 1;
        let mut toks = tokenize_layout(d, cfg);
        toks.sort_unstable();
        multisets.insert(toks);
    }
    Ok(DiversityStats {
        layouts: layouts.len(),
        elements: layouts.iter().map(|d| d.elements.len()).sum(),
        type_histogram,
        count_histogram,
        distinct_token_multisets: multisets.len(),
    })
}

/// Token counts of `doc`, one entry per vocabulary item.
pub fn bag_of_tokens(doc: &LayoutDocument, cfg: &TokenizerConfig) -> Vec<f64> {
    let mut v = vec![0.0; cfg.vocab_size()];
    for t in tokenize_layout(doc, cfg) {
        v[t] += 1.0;
    }
    v
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierConfig {
    pub iterations: usize,
    pub lr: f64,
    pub seed: u64,
    /// Standard deviation of the initial weights.
    pub init_scale: f64,
    pub tokenizer: TokenizerConfig,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            iterations: 500,
            lr: 0.1,
            seed: 0,
            init_scale: 0.01,
            tokenizer: TokenizerConfig::default(),
        }
    }
}

/// Multinomial logistic regression over bag-of-token counts.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    /// Sorted class names.
    pub classes: Vec<String>,
    pub tokenizer: TokenizerConfig,
    params: ParamStore,
}

const W: &str = "w";
const B: &str = "b";

/// Trains on `docs` with per-document `weights`, by full-batch gradient
/// descent on the weighted mean cross-entropy.
///
/// Identical (label, features) examples are merged and the rest sorted, so
/// neither list order nor duplication versus weighting changes the result.
pub fn train_classifier_weighted(
    docs: &[LayoutDocument],
    labels: &[String],
    weights: &[f64],
    cfg: &ClassifierConfig,
) -> Result<Classifier> {
    assert_eq!(docs.len(), labels.len(), "one label per document");
    assert_eq!(docs.len(), weights.len(), "one weight per document");
    cfg.tokenizer.validate()?;
    let classes: Vec<String> = labels.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
    if classes.len() < 2 {
        return Err(Error::Metrics(format!(
            "classifier needs at least 2 classes, got {}",
            classes.len()
        )));
    }
    let mut merged: BTreeMap<(usize, Vec<u64>), f64> = BTreeMap::new();
    for ((d, l), &w) in docs.iter().zip(labels).zip(weights) {
        if !(w.is_finite() && w > 0.0) {
            return Err(Error::Metrics(format!("sample weight must be > 0, got {w}")));
        }
        let c = classes.binary_search(l).expect("label collected above");
        let key: Vec<u64> = bag_of_tokens(d, &cfg.tokenizer).iter().map(|v| v.to_bits()).collect();
        *merged.entry((c, key)).or_insert(0.0) += w;
    }
    let (v, k, n) = (cfg.tokenizer.vocab_size(), classes.len(), merged.len());
    let total: f64 = merged.values().sum();
    let mut x = Vec::with_capacity(n * v);
    let mut target = vec![0.0; n * k];
    for (row, ((c, key), w)) in merged.iter().enumerate() {
        x.extend(key.iter().map(|&b| f64::from_bits(b)));
        target[row * k + c] = w / total;
    }
    let x = Tensor::new(vec![n, v], x)?;
    let target = Tensor::new(vec![n, k], target)?;

    let mut rng = Rng::new(cfg.seed);
    let mut params = ParamStore::new();
    params.insert(W, rng.normal_tensor(&[v, k]).map(|w| w * cfg.init_scale))?;
    params.insert(B, Tensor::zeros(&[k]))?;
    for _ in 0..cfg.iterations {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let w = tape.param(&params, W)?;
        let b = tape.param(&params, B)?;
        let logits = tape.affine(xv, w, b)?;
        let probs = tape.softmax_rows(logits);
        let loss = tape.cross_entropy(probs, &target)?;
        params.zero_grads();
        tape.backward(loss, &mut params)?;
        for (_, p) in params.iter_mut() {
            for (v, g) in p.value.data_mut().iter_mut().zip(p.grad.data()) {
                *v -= cfg.lr * g;
            }
        }
        if !params.iter().all(|(_, p)| p.value.all_finite()) {
            return Err(Error::NumericFailure("classifier weights diverged".into()));
        }
    }
    Ok(Classifier {
        classes,
        tokenizer: cfg.tokenizer,
        params,
    })
}

pub fn train_classifier(docs: &[LayoutDocument], labels: &[String], cfg: &ClassifierConfig) -> Result<Classifier> {
    train_classifier_weighted(docs, labels, &vec![1.0; docs.len()], cfg)
}

impl Classifier {
    /// Class scores before the softmax.
    pub fn logits(&self, doc: &LayoutDocument) -> Vec<f64> {
        let x = bag_of_tokens(doc, &self.tokenizer);
        let w = &self.params.get(W).expect("weights").value;
        let b = self.params.get(B).expect("bias").value.data();
        (0..self.classes.len())
            .map(|c| b[c] + x.iter().enumerate().map(|(i, xi)| xi * w.get(i, c)).sum::<f64>())
            .collect()
    }

    /// Most likely class; ties go to the earlier class.
    pub fn classify(&self, doc: &LayoutDocument) -> &str {
        let s = self.logits(doc);
        let best = (0..s.len()).reduce(|a, b| if s[b] > s[a] { b } else { a }).unwrap_or(0);
        &self.classes[best]
    }

    /// Fraction of `docs` whose label is predicted.
    pub fn accuracy(&self, docs: &[LayoutDocument]) -> Result<f64> {
        if docs.is_empty() {
            return Err(Error::EmptyCorpus("test".into()));
        }
        let hits = docs
            .iter()
            .filter(|d| d.label.as_deref() == Some(self.classify(d)))
            .count();
        Ok(hits as f64 / docs.len() as f64)
    }
}

fn labels_of(docs: &[LayoutDocument], what: &str) -> Result<Vec<String>> {
    docs.iter()
        .map(|d| {
            d.label
                .clone()
                .ok_or_else(|| Error::invalid(&d.id, "label", format!("{what} documents need labels")))
        })
        .collect()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Labels each unlabelled document with the class whose summed token
/// histogram over `reference` is closest in cosine similarity. Classes are
/// taken in sorted order and ties go to the earlier one.
pub fn label_by_prototype(
    docs: &[LayoutDocument],
    reference: &[LayoutDocument],
    cfg: &TokenizerConfig,
) -> Result<Vec<LayoutDocument>> {
    let labels = labels_of(reference, "reference")?;
    let mut protos: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for (d, l) in reference.iter().zip(&labels) {
        let p = protos.entry(l).or_insert_with(|| vec![0.0; cfg.vocab_size()]);
        for (acc, v) in p.iter_mut().zip(bag_of_tokens(d, cfg)) {
            *acc += v;
        }
    }
    if protos.is_empty() && docs.iter().any(|d| d.label.is_none()) {
        return Err(Error::EmptyCorpus("reference".into()));
    }
    Ok(docs
        .iter()
        .map(|d| {
            let mut d = d.clone();
            if d.label.is_none() {
                let x = bag_of_tokens(&d, cfg);
                let mut best: Option<(&str, f64)> = None;
                for (name, p) in &protos {
                    let s = cosine(&x, p);
                    if best.is_none_or(|(_, b)| s > b) {
                        best = Some((name, s));
                    }
                }
                d.label = best.map(|(name, _)| name.to_string());
            }
            d
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConditionResult {
    pub name: String,
    pub train_size: usize,
    /// Test accuracy per seed, in seed order.
    #[serde(serialize_with = "sig17::vec::serialize")]
    pub accuracies: Vec<f64>,
    #[serde(serialize_with = "sig17::serialize")]
    pub mean: f64,
    /// Sample standard deviation over seeds; 0 for a single seed.
    #[serde(serialize_with = "sig17::serialize")]
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub seeds: Vec<u64>,
    pub test_size: usize,
    pub conditions: Vec<ConditionResult>,
}

impl EvalReport {
    pub fn condition(&self, name: &str) -> Option<&ConditionResult> {
        self.conditions.iter().find(|c| c.name == name)
    }
}

pub const REAL_ONLY: &str = "real_only";
pub const REAL_PLUS_SYNTHETIC: &str = "real_plus_synthetic";

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Test accuracy of a classifier trained on `real_train` alone against one
/// trained on `real_train` plus `synthetic`, once per seed. Unlabelled
/// synthetic documents are labelled with [`label_by_prototype`] against
/// `real_train`.
pub fn compare_augmentation(
    real_train: &[LayoutDocument],
    synthetic: &[LayoutDocument],
    test: &[LayoutDocument],
    seeds: &[u64],
    cfg: &ClassifierConfig,
) -> Result<EvalReport> {
    if test.is_empty() {
        return Err(Error::EmptyCorpus("test".into()));
    }
    if seeds.is_empty() {
        return Err(Error::Config("at least one seed is required".into()));
    }
    labels_of(test, "test")?;
    let real_labels = labels_of(real_train, "training")?;
    let synthetic = label_by_prototype(synthetic, real_train, &cfg.tokenizer)?;
    let mut both: Vec<LayoutDocument> = real_train.to_vec();
    both.extend(synthetic);
    let both_labels = labels_of(&both, "synthetic")?;

    let mut runs = [(REAL_ONLY, real_train, &real_labels, Vec::new()), (REAL_PLUS_SYNTHETIC, &both, &both_labels, Vec::new())];
    for &seed in seeds {
        let cfg = ClassifierConfig { seed, ..cfg.clone() };
        for (_, docs, labels, accs) in runs.iter_mut() {
            let clf = train_classifier(docs, labels, &cfg)?;
            accs.push(clf.accuracy(test)?);
        }
    }
    Ok(EvalReport {
        seeds: seeds.to_vec(),
        test_size: test.len(),
        conditions: runs
            .into_iter()
            .map(|(name, docs, _, accuracies)| {
                let (mean, std) = mean_std(&accuracies);
                ConditionResult {
                    name: name.to_string(),
                    train_size: docs.len(),
                    accuracies,
                    mean,
                    std,
                }
            })
            .collect(),
    })
}

/// `n` copies of uniformly drawn `real` documents with every coordinate
/// jittered by up to `magnitude`, labels kept.
pub fn jitter_baseline(real: &[LayoutDocument], magnitude: f64, n: usize, seed: u64) -> Result<Vec<LayoutDocument>> {
    if !(magnitude.is_finite() && magnitude >= 0.0) {
        return Err(Error::Config(format!("jitter magnitude must be ≥ 0, got {magnitude}")));
    }
    if real.is_empty() && n > 0 {
        return Err(Error::EmptyCorpus("jitter source".into()));
    }
    let mut rng = Rng::new(seed);
    Ok((0..n)
        .map(|k| {
            let src = &real[rng.below(real.len())];
            let elements = src
                .elements
                .iter()
                .map(|e| LayoutElement {
                    bbox: jitter_bbox(e.bbox, magnitude, &mut rng),
                    ..e.clone()
                })
                .collect();
            LayoutDocument {
                id: format!("jitter-{seed}-{k}"),
                elements,
                ..src.clone()
            }
        })
        .collect())
}
