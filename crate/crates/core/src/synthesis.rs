//! Turning decoder output into documents, rule-based validation, rejection
//! sampling and SVG previews.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use layoutgen_numeric::Rng;
use serde::{Deserialize, Serialize};

use crate::io::sig17;
use crate::layout::{canonical_reading_order, BBox, ElementType, LayoutDocument, LayoutElement};
use crate::model::{ModelCheckpoint, SoftGraph};
use crate::{Error, Result};

/// Slots at or above this presence become elements.
pub const PRESENCE_THRESHOLD: f64 = 0.5;

/// Discretizes decoder output. Slots with presence ≥ 0.5 become elements in
/// slot order (the most present slot if none qualify), typed by their most
/// likely class. No explicit reading order is attached.
pub fn harden(s: &SoftGraph, id: &str) -> LayoutDocument {
    let mut keep: Vec<usize> = (0..s.n_max()).filter(|&k| s.presence[k] >= PRESENCE_THRESHOLD).collect();
    if keep.is_empty() {
        let best = (0..s.n_max())
            .reduce(|a, b| if s.presence[b] > s.presence[a] { b } else { a })
            .unwrap_or(0);
        keep.push(best);
    }
    let elements = keep
        .into_iter()
        .map(|k| {
            let probs = s.type_probs.row(k);
            let t = (0..ElementType::COUNT)
                .reduce(|a, b| if probs[b] > probs[a] { b } else { a })
                .unwrap_or(0);
            let row = s.bbox.row(k);
            let mut bbox = BBox::new(row[0], row[1], row[2], row[3]);
            if bbox.violation().is_some() {
                bbox = bbox.clamped();
            }
            LayoutElement::new(ElementType::from_index(t).expect("type index < 8"), bbox)
        })
        .collect();
    LayoutDocument::new(id, elements)
}

/// A generated document with where it came from.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SyntheticLayout {
    pub document: LayoutDocument,
    pub checkpoint_id: String,
    pub latent_seed: u64,
    /// Position of the latent draw in the seeded stream.
    pub draw: usize,
    /// `None` until validated.
    pub valid: Option<bool>,
}

fn draw_layout(ckpt: &ModelCheckpoint, rng: &mut Rng, seed: u64, k: usize, ckpt_id: &str) -> Result<SyntheticLayout> {
    let z = rng.normal_tensor(&[ckpt.training.d_latent]);
    let soft = ckpt.decode(&z)?;
    Ok(SyntheticLayout {
        document: harden(&soft, &format!("synth-{seed}-{k}")),
        checkpoint_id: ckpt_id.to_string(),
        latent_seed: seed,
        draw: k,
        valid: None,
    })
}

/// Decodes `n` standard-normal latent draws from a stream seeded by `seed`.
pub fn sample_layouts(ckpt: &ModelCheckpoint, n: usize, seed: u64) -> Result<Vec<SyntheticLayout>> {
    let id = ckpt.id();
    let mut rng = Rng::new(seed);
    (0..n).map(|k| draw_layout(ckpt, &mut rng, seed, k, &id)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Rule {
    /// Every caption has an image nearby.
    R1,
    /// Every title or heading is followed by body content.
    R2,
    /// No two elements overlap too much.
    R3,
    /// Boxes are well formed and on the page.
    R4,
}

impl Rule {
    pub const ALL: [Rule; 4] = [Rule::R1, Rule::R2, Rule::R3, Rule::R4];

    pub fn name(self) -> &'static str {
        match self {
            Rule::R1 => "R1",
            Rule::R2 => "R2",
            Rule::R3 => "R3",
            Rule::R4 => "R4",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ValidationRuleConfig {
    pub enabled: Vec<Rule>,
    pub iou_max: f64,
    pub tau_cap: f64,
}

impl Default for ValidationRuleConfig {
    fn default() -> Self {
        Self {
            enabled: Rule::ALL.to_vec(),
            iou_max: 0.15,
            tau_cap: 0.10,
        }
    }
}

impl ValidationRuleConfig {
    pub fn none() -> Self {
        Self {
            enabled: Vec::new(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.iou_max) {
            return Err(Error::Config(format!("validation.iou_max must be in [0, 1], got {}", self.iou_max)));
        }
        if !(self.tau_cap.is_finite() && self.tau_cap > 0.0) {
            return Err(Error::Config(format!("validation.tau_cap must be > 0, got {}", self.tau_cap)));
        }
        Ok(())
    }

    /// Enabled rules, sorted and deduplicated.
    pub fn rules(&self) -> Vec<Rule> {
        let mut r = self.enabled.clone();
        r.sort();
        r.dedup();
        r
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RuleResult {
    pub rule: Rule,
    pub passed: bool,
    pub detail: String,
}

/// Checks each enabled rule on `doc`. Elements are named by their position
/// in canonical reading order, so results do not depend on list order.
pub fn validate_layout(doc: &LayoutDocument, rules: &ValidationRuleConfig) -> Vec<RuleResult> {
    let order = canonical_reading_order(doc);
    let els: Vec<&LayoutElement> = order.iter().map(|&i| &doc.elements[i]).collect();
    let name = |p: usize| format!("{} #{p}", els[p].element_type);
    rules
        .rules()
        .into_iter()
        .map(|rule| {
            let failures: Vec<String> = match rule {
                Rule::R1 => (0..els.len())
                    .filter(|&p| els[p].element_type == ElementType::Caption)
                    .filter(|&p| {
                        !els.iter().any(|e| {
                            e.element_type == ElementType::Image && e.bbox.gap_distance(&els[p].bbox) <= rules.tau_cap
                        })
                    })
                    .map(|p| format!("{} has no image within {}", name(p), rules.tau_cap))
                    .collect(),
                Rule::R2 => (0..els.len())
                    .filter(|&p| els[p].element_type.is_heading_like())
                    .filter_map(|p| match els.get(p + 1).map(|e| e.element_type) {
                        Some(ElementType::TextBlock | ElementType::Table | ElementType::Image) => None,
                        Some(t) => Some(format!("{} is followed by {t}", name(p))),
                        None => Some(format!("{} is the last element", name(p))),
                    })
                    .collect(),
                Rule::R3 => {
                    let mut out = Vec::new();
                    for a in 0..els.len() {
                        for b in a + 1..els.len() {
                            let iou = els[a].bbox.iou(&els[b].bbox);
                            if iou > rules.iou_max {
                                out.push(format!("{} and {} overlap with IoU {iou:.3}", name(a), name(b)));
                            }
                        }
                    }
                    out
                }
                Rule::R4 => (0..els.len())
                    .filter_map(|p| els[p].bbox.violation().map(|v| format!("{}: {v}", name(p))))
                    .collect(),
            };
            RuleResult {
                rule,
                passed: failures.is_empty(),
                detail: if failures.is_empty() {
                    "ok".to_string()
                } else {
                    failures.join("; ")
                },
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DocumentValidation {
    pub id: String,
    pub passed: bool,
    pub results: Vec<RuleResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationAggregate {
    pub documents: usize,
    /// Fraction of documents passing each enabled rule.
    #[serde(serialize_with = "sig17::map::serialize")]
    pub rule_pass_rate: BTreeMap<String, f64>,
    /// Fraction of documents passing every enabled rule.
    #[serde(serialize_with = "sig17::serialize")]
    pub overall_pass_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub per_document: Vec<DocumentValidation>,
    pub aggregate: ValidationAggregate,
}

/// Rates are 1 for an empty corpus.
pub fn validate_corpus(docs: &[LayoutDocument], rules: &ValidationRuleConfig) -> ValidationReport {
    let per_document: Vec<DocumentValidation> = docs
        .iter()
        .map(|d| {
            let results = validate_layout(d, rules);
            DocumentValidation {
                id: d.id.clone(),
                passed: results.iter().all(|r| r.passed),
                results,
            }
        })
        .collect();
    let n = per_document.len();
    let rate = |count: usize| if n == 0 { 1.0 } else { count as f64 / n as f64 };
    let rule_pass_rate = rules
        .rules()
        .into_iter()
        .map(|rule| {
            let passed = per_document
                .iter()
                .filter(|d| d.results.iter().any(|r| r.rule == rule && r.passed))
                .count();
            (rule.name().to_string(), rate(passed))
        })
        .collect();
    let overall_pass_rate = rate(per_document.iter().filter(|d| d.passed).count());
    ValidationReport {
        per_document,
        aggregate: ValidationAggregate {
            documents: n,
            rule_pass_rate,
            overall_pass_rate,
        },
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RejectionStats {
    pub draws: usize,
    pub accepted: usize,
    /// `accepted / draws`, 1 when nothing was drawn.
    #[serde(serialize_with = "sig17::serialize")]
    pub acceptance_rate: f64,
    /// Failed draws per enabled rule; a draw can fail several rules.
    pub rule_failures: BTreeMap<String, usize>,
    /// How many short of the target the budget left us.
    pub shortfall: usize,
}

/// Draws layouts from the `seed` stream until `n_target` pass every enabled
/// rule or `max_draws` have been made.
pub fn rejection_sample(
    ckpt: &ModelCheckpoint,
    n_target: usize,
    rules: &ValidationRuleConfig,
    seed: u64,
    max_draws: usize,
) -> Result<(Vec<SyntheticLayout>, RejectionStats)> {
    if max_draws < n_target {
        return Err(Error::Config(format!(
            "max_draws ({max_draws}) must be at least n_target ({n_target})"
        )));
    }
    rules.validate()?;
    let id = ckpt.id();
    let mut rng = Rng::new(seed);
    let mut rule_failures: BTreeMap<String, usize> = rules.rules().iter().map(|r| (r.name().to_string(), 0)).collect();
    let mut accepted = Vec::with_capacity(n_target);
    let mut draws = 0;
    while accepted.len() < n_target && draws < max_draws {
        let mut layout = draw_layout(ckpt, &mut rng, seed, draws, &id)?;
        draws += 1;
        let results = validate_layout(&layout.document, rules);
        for r in results.iter().filter(|r| !r.passed) {
            *rule_failures.entry(r.rule.name().to_string()).or_default() += 1;
        }
        let ok = results.iter().all(|r| r.passed);
        layout.valid = Some(ok);
        if ok {
            accepted.push(layout);
        }
    }
    let stats = RejectionStats {
        draws,
        accepted: accepted.len(),
        acceptance_rate: if draws == 0 { 1.0 } else { accepted.len() as f64 / draws as f64 },
        rule_failures,
        shortfall: n_target - accepted.len(),
    };
    Ok((accepted, stats))
}

pub const SVG_WIDTH: f64 = 800.0;
pub const SVG_HEIGHT: f64 = 1035.0;

/// Fill color per element type.
pub fn palette(t: ElementType) -> &'static str {
    match t {
        ElementType::Title => "#d62728",
        ElementType::Heading => "#ff7f0e",
        ElementType::TextBlock => "#1f77b4",
        ElementType::Image => "#2ca02c",
        ElementType::Table => "#9467bd",
        ElementType::Caption => "#8c564b",
        ElementType::Header => "#7f7f7f",
        ElementType::Footer => "#bcbd22",
    }
}

fn num(x: f64) -> String {
    let s = format!("{x:.3}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" {
        "0".to_string()
    } else {
        s.to_string()
    }
}

/// One labelled rectangle per element on an A4-proportioned canvas.
pub fn render_svg(doc: &LayoutDocument) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {w} {h}" width="{w}" height="{h}">"#,
        w = num(SVG_WIDTH),
        h = num(SVG_HEIGHT)
    );
    for el in &doc.elements {
        let b = el.bbox;
        let (x, y) = (b.x0 * SVG_WIDTH, b.y0 * SVG_HEIGHT);
        let _ = writeln!(
            out,
            r#"  <rect x="{}" y="{}" width="{}" height="{}" fill="{}" fill-opacity="0.35" stroke="{}"/>"#,
            num(x),
            num(y),
            num(b.width() * SVG_WIDTH),
            num(b.height() * SVG_HEIGHT),
            palette(el.element_type),
            palette(el.element_type),
        );
        let _ = writeln!(
            out,
            r#"  <text x="{}" y="{}" font-family="sans-serif" font-size="12">{}</text>"#,
            num(x + 4.0),
            num(y + 14.0),
            el.element_type
        );
    }
    out.push_str("</svg>\n");
    out
}
