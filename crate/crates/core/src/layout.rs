//! Layout documents, corpus files, reading order and the toy corpus generator.
//!
//! All geometry is page-normalized: `(0, 0)` is the top-left corner and
//! `(1, 1)` the bottom-right.

use std::fmt;
use std::path::Path;

use layoutgen_numeric::Rng;
use serde::{Deserialize, Serialize};

use crate::{io, Error, Result};

/// Rows in reading order merge when vertical centers are at most this far apart.
pub const DEFAULT_ROW_TOLERANCE: f64 = 0.02;

/// Smallest width/height a clamped box is allowed to keep.
pub const MIN_EXTENT: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ElementType {
    Title,
    Heading,
    TextBlock,
    Image,
    Table,
    Caption,
    Header,
    Footer,
}

impl ElementType {
    pub const COUNT: usize = 8;

    pub const ALL: [ElementType; 8] = [
        ElementType::Title,
        ElementType::Heading,
        ElementType::TextBlock,
        ElementType::Image,
        ElementType::Table,
        ElementType::Caption,
        ElementType::Header,
        ElementType::Footer,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ElementType::Title => "title",
            ElementType::Heading => "heading",
            ElementType::TextBlock => "text_block",
            ElementType::Image => "image",
            ElementType::Table => "table",
            ElementType::Caption => "caption",
            ElementType::Header => "header",
            ElementType::Footer => "footer",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.name() == name)
    }

    pub fn is_heading_like(self) -> bool {
        matches!(self, ElementType::Title | ElementType::Heading)
    }
}

impl fmt::Display for ElementType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Axis-aligned box `(x0, y0, x1, y1)`; serialized as a 4-element array.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl From<[f64; 4]> for BBox {
    fn from([x0, y0, x1, y1]: [f64; 4]) -> Self {
        Self { x0, y0, x1, y1 }
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.to_array()
    }
}

impl BBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x0, self.y0, self.x1, self.y1]
    }

    pub fn cx(&self) -> f64 {
        0.5 * (self.x0 + self.x1)
    }

    pub fn cy(&self) -> f64 {
        0.5 * (self.y0 + self.y1)
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    /// Euclidean length of the axis gaps between two boxes; 0 when they touch or overlap.
    pub fn gap_distance(&self, other: &BBox) -> f64 {
        let gap_x = (self.x0.max(other.x0) - self.x1.min(other.x1)).max(0.0);
        let gap_y = (self.y0.max(other.y0) - self.y1.min(other.y1)).max(0.0);
        (gap_x * gap_x + gap_y * gap_y).sqrt()
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let w = (self.x1.min(other.x1) - self.x0.max(other.x0)).max(0.0);
        let h = (self.y1.min(other.y1) - self.y0.max(other.y0)).max(0.0);
        let inter = w * h;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    /// First violated box invariant, if any.
    pub fn violation(&self) -> Option<String> {
        let coords = self.to_array();
        if coords.iter().any(|v| !v.is_finite()) {
            return Some("non-finite coordinate".into());
        }
        if coords.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Some(format!("coordinates {coords:?} outside [0, 1]"));
        }
        if self.x0 >= self.x1 {
            return Some(format!("x0 ≥ x1 ({} ≥ {})", self.x0, self.x1));
        }
        if self.y0 >= self.y1 {
            return Some(format!("y0 ≥ y1 ({} ≥ {})", self.y0, self.y1));
        }
        None
    }

    /// Forces the box back inside the page with positive extent.
    pub fn clamped(self) -> BBox {
        let fix = |lo: f64, hi: f64| {
            let lo = lo.clamp(0.0, 1.0 - MIN_EXTENT);
            let hi = hi.clamp(0.0, 1.0);
            let hi = if hi < lo + MIN_EXTENT { lo + MIN_EXTENT } else { hi };
            (lo, hi)
        };
        let (x0, x1) = fix(self.x0, self.x1);
        let (y0, y1) = fix(self.y0, self.y1);
        BBox { x0, y0, x1, y1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayoutElement {
    #[serde(rename = "type")]
    pub element_type: ElementType,
    pub bbox: BBox,
    pub font_size: Option<f64>,
    pub order: Option<usize>,
}

impl LayoutElement {
    pub fn new(element_type: ElementType, bbox: BBox) -> Self {
        Self {
            element_type,
            bbox,
            font_size: None,
            order: None,
        }
    }

    pub fn with_font_size(mut self, font_size: f64) -> Self {
        self.font_size = Some(font_size);
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Page {
    pub width: f64,
    pub height: f64,
}

impl Default for Page {
    /// A4 portrait in points.
    fn default() -> Self {
        Self {
            width: 595.0,
            height: 842.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayoutDocument {
    pub id: String,
    pub label: Option<String>,
    pub page: Page,
    pub elements: Vec<LayoutElement>,
}

impl LayoutDocument {
    pub fn new(id: impl Into<String>, elements: Vec<LayoutElement>) -> Self {
        Self {
            id: id.into(),
            label: None,
            page: Page::default(),
            elements,
        }
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = Some(label.into());
        self
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    /// Checks every document and element invariant.
    pub fn validate(&self) -> Result<()> {
        let id = &self.id;
        for (name, v) in [("page.width", self.page.width), ("page.height", self.page.height)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid(id, name, format!("must be a positive real, got {v}")));
            }
        }
        for (i, el) in self.elements.iter().enumerate() {
            if let Some(msg) = el.bbox.violation() {
                return Err(Error::invalid(id, format!("elements[{i}].bbox"), msg));
            }
            if let Some(fs) = el.font_size {
                if !(fs.is_finite() && fs > 0.0 && fs <= 1.0) {
                    return Err(Error::invalid(
                        id,
                        format!("elements[{i}].font_size"),
                        format!("must be in (0, 1], got {fs}"),
                    ));
                }
            }
        }
        let explicit = self.elements.iter().filter(|e| e.order.is_some()).count();
        if explicit > 0 {
            if explicit != self.elements.len() {
                return Err(Error::invalid(
                    id,
                    "elements.order",
                    "either every element has an explicit order or none does",
                ));
            }
            let mut seen = vec![false; self.elements.len()];
            for (i, el) in self.elements.iter().enumerate() {
                let o = el.order.expect("counted above");
                if o >= seen.len() || std::mem::replace(&mut seen[o], true) {
                    return Err(Error::invalid(
                        id,
                        format!("elements[{i}].order"),
                        format!("orders must be a permutation of 0..{}", seen.len()),
                    ));
                }
            }
        }
        Ok(())
    }
}

// Parsing goes through a loose mirror of the file schema so that errors can
// name the document and field instead of a serde position.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDocument {
    id: String,
    label: Option<String>,
    page: Page,
    elements: Vec<RawElement>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawElement {
    #[serde(rename = "type")]
    element_type: String,
    bbox: Vec<f64>,
    font_size: Option<f64>,
    order: Option<i64>,
}

impl RawDocument {
    fn into_document(self) -> Result<LayoutDocument> {
        let id = self.id;
        let mut elements = Vec::with_capacity(self.elements.len());
        for (i, raw) in self.elements.into_iter().enumerate() {
            let element_type = ElementType::from_name(&raw.element_type).ok_or_else(|| {
                Error::invalid(
                    &id,
                    format!("elements[{i}].type"),
                    format!("unknown element type `{}`", raw.element_type),
                )
            })?;
            let bbox: [f64; 4] = raw.bbox.as_slice().try_into().map_err(|_| {
                Error::invalid(
                    &id,
                    format!("elements[{i}].bbox"),
                    format!("expected 4 numbers, got {}", raw.bbox.len()),
                )
            })?;
            let order = match raw.order {
                None => None,
                Some(o) if o >= 0 => Some(o as usize),
                Some(o) => {
                    return Err(Error::invalid(
                        &id,
                        format!("elements[{i}].order"),
                        format!("must be non-negative, got {o}"),
                    ))
                }
            };
            elements.push(LayoutElement {
                element_type,
                bbox: bbox.into(),
                font_size: raw.font_size,
                order,
            });
        }
        let doc = LayoutDocument {
            id,
            label: self.label,
            page: self.page,
            elements,
        };
        doc.validate()?;
        Ok(doc)
    }
}

/// Parses JSON Lines corpus text. Blank lines are skipped.
pub fn parse_corpus_str(text: &str) -> Result<Vec<LayoutDocument>> {
    let mut docs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawDocument = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        docs.push(raw.into_document()?);
    }
    Ok(docs)
}

pub fn parse_corpus(path: &Path) -> Result<Vec<LayoutDocument>> {
    parse_corpus_str(&io::read_to_string(path)?)
}

pub fn corpus_to_string(docs: &[LayoutDocument]) -> String {
    let mut out = String::new();
    for doc in docs {
        out.push_str(&serde_json::to_string(doc).expect("documents always serialize"));
        out.push('\n');
    }
    out
}

/// Writes one document per line, atomically.
pub fn write_corpus(docs: &[LayoutDocument], path: &Path) -> Result<()> {
    for doc in docs {
        doc.validate()?;
    }
    io::write_atomic(path, corpus_to_string(docs).as_bytes())
}

/// Element indices in canonical reading order.
pub fn canonical_reading_order(doc: &LayoutDocument) -> Vec<usize> {
    reading_order_with_tolerance(doc, DEFAULT_ROW_TOLERANCE)
}

/// Explicit orders when present; otherwise rows top to bottom, left to right
/// within a row. Rows are chains of elements whose consecutive vertical
/// centers differ by at most `row_tolerance`. Ties fall back to list index.
pub fn reading_order_with_tolerance(doc: &LayoutDocument, row_tolerance: f64) -> Vec<usize> {
    let n = doc.elements.len();
    if n > 0 && doc.elements.iter().all(|e| e.order.is_some()) {
        let mut order = vec![0; n];
        for (i, el) in doc.elements.iter().enumerate() {
            order[el.order.expect("checked")] = i;
        }
        return order;
    }

    let cy = |i: usize| doc.elements[i].bbox.cy();
    let mut by_center: Vec<usize> = (0..n).collect();
    by_center.sort_by(|&a, &b| cy(a).total_cmp(&cy(b)).then(a.cmp(&b)));

    let mut rows: Vec<Vec<usize>> = Vec::new();
    for i in by_center {
        match rows.last_mut() {
            Some(row) if cy(i) - cy(*row.last().expect("rows are non-empty")) <= row_tolerance => {
                row.push(i)
            }
            _ => rows.push(vec![i]),
        }
    }
    let mean_cy = |row: &[usize]| row.iter().map(|&i| cy(i)).sum::<f64>() / row.len() as f64;
    rows.sort_by(|a, b| mean_cy(a).total_cmp(&mean_cy(b)).then(a[0].cmp(&b[0])));

    let mut order = Vec::with_capacity(n);
    for mut row in rows {
        row.sort_by(|&a, &b| {
            doc.elements[a]
                .bbox
                .x0
                .total_cmp(&doc.elements[b].bbox.x0)
                .then(a.cmp(&b))
        });
        order.extend(row);
    }
    order
}

/// A class template: the element list every document of the class starts from.
#[derive(Debug, Clone, PartialEq)]
pub struct Template {
    pub name: String,
    pub elements: Vec<LayoutElement>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyCorpusSpec {
    pub classes: Vec<Template>,
    pub per_class: usize,
    /// Maximum absolute perturbation of each coordinate.
    pub jitter: f64,
    pub seed: u64,
}

pub const DEFAULT_TOY_JITTER: f64 = 0.01;

impl ToyCorpusSpec {
    /// The built-in letter / invoice / report templates.
    pub fn with_default_templates(per_class: usize, jitter: f64, seed: u64) -> Self {
        Self {
            classes: default_templates(),
            per_class,
            jitter,
            seed,
        }
    }
}

fn el(t: ElementType, b: [f64; 4], font: Option<f64>) -> LayoutElement {
    LayoutElement {
        element_type: t,
        bbox: b.into(),
        font_size: font,
        order: None,
    }
}

pub fn default_templates() -> Vec<Template> {
    use ElementType::*;
    // Every element center sits at least 0.03 inside a cell of the 8 × 8
    // token grid, so the default jitter never changes a document's tokens.
    let letter = vec![
        el(Header, [0.08, 0.03, 0.84, 0.07], Some(0.010)),
        el(Title, [0.08, 0.15, 0.58, 0.22], Some(0.030)),
        el(TextBlock, [0.08, 0.27, 0.84, 0.36], Some(0.012)),
        el(TextBlock, [0.08, 0.40, 0.84, 0.48], Some(0.012)),
        el(TextBlock, [0.08, 0.52, 0.84, 0.62], Some(0.012)),
        el(Footer, [0.08, 0.92, 0.84, 0.96], Some(0.010)),
    ];
    let invoice = vec![
        el(Header, [0.06, 0.03, 0.88, 0.07], Some(0.012)),
        el(Table, [0.06, 0.10, 0.88, 0.30], None),
        el(TextBlock, [0.06, 0.37, 0.56, 0.45], Some(0.012)),
        el(Table, [0.06, 0.52, 0.88, 0.84], None),
        el(Footer, [0.06, 0.92, 0.88, 0.96], Some(0.010)),
    ];
    // The first text block sits beside the title, so reading order runs
    // title → text block → heading → image → caption → heading → text block.
    let report = vec![
        el(Title, [0.08, 0.04, 0.52, 0.10], Some(0.032)),
        el(Heading, [0.08, 0.15, 0.84, 0.20], Some(0.020)),
        el(TextBlock, [0.64, 0.04, 0.96, 0.10], Some(0.011)),
        el(Image, [0.15, 0.26, 0.79, 0.56], None),
        el(Caption, [0.15, 0.57, 0.79, 0.60], Some(0.009)),
        el(Heading, [0.08, 0.65, 0.84, 0.69], Some(0.020)),
        el(TextBlock, [0.08, 0.73, 0.84, 0.86], Some(0.012)),
    ];
    vec![
        Template {
            name: "letter".into(),
            elements: letter,
        },
        Template {
            name: "invoice".into(),
            elements: invoice,
        },
        Template {
            name: "report".into(),
            elements: report,
        },
    ]
}

/// Adds uniform noise in `[-magnitude, magnitude]` to every coordinate, then clamps.
pub fn jitter_bbox(b: BBox, magnitude: f64, rng: &mut Rng) -> BBox {
    if magnitude == 0.0 {
        return b;
    }
    let mut c = b.to_array();
    for v in &mut c {
        *v += rng.uniform_range(-magnitude, magnitude);
    }
    BBox::from(c).clamped()
}

/// Deterministic corpus of jittered template copies.
///
/// Documents are interleaved by class (`letter-0, invoice-0, report-0,
/// letter-1, ...`), so any prefix of the corpus stays class-balanced.
pub fn generate_toy_corpus(spec: &ToyCorpusSpec) -> Result<Vec<LayoutDocument>> {
    if spec.per_class == 0 {
        return Err(Error::Config("per_class must be at least 1".into()));
    }
    if !(spec.jitter.is_finite() && spec.jitter >= 0.0) {
        return Err(Error::Config(format!("jitter must be ≥ 0, got {}", spec.jitter)));
    }
    for t in &spec.classes {
        LayoutDocument::new(t.name.clone(), t.elements.clone()).validate()?;
        if t.elements.is_empty() {
            return Err(Error::EmptyDocument(t.name.clone()));
        }
    }
    let mut rng = Rng::new(spec.seed);
    let mut docs = Vec::with_capacity(spec.per_class * spec.classes.len());
    for k in 0..spec.per_class {
        for t in &spec.classes {
            let elements = t
                .elements
                .iter()
                .map(|e| LayoutElement {
                    bbox: jitter_bbox(e.bbox, spec.jitter, &mut rng),
                    ..e.clone()
                })
                .collect();
            docs.push(LayoutDocument::new(format!("{}-{k}", t.name), elements).with_label(t.name.clone()));
        }
    }
    Ok(docs)
}
