use layoutgen_core::graph::GraphConfig;
use layoutgen_core::layout::*;
use layoutgen_core::model::{train, ModelCheckpoint, SoftGraph, TrainingConfig};
use layoutgen_core::synthesis::*;
use layoutgen_numeric::{Rng, Tensor};

fn small(seed: u64) -> TrainingConfig {
    TrainingConfig {
        d_hidden: 8,
        d_latent: 4,
        n_max: 8,
        batch_size: 4,
        seed,
        ..TrainingConfig::default()
    }
}

fn el(t: ElementType, b: [f64; 4]) -> LayoutElement {
    LayoutElement::new(t, BBox::new(b[0], b[1], b[2], b[3]))
}

fn soft(presence: &[f64]) -> SoftGraph {
    let n = presence.len();
    let mut types = vec![0.02; n * 8];
    for k in 0..n {
        types[k * 8 + (k + 2) % 8] = 1.0 - 7.0 * 0.02;
    }
    let mut bbox = Vec::new();
    for k in 0..n {
        let y = 0.05 + 0.3 * k as f64;
        bbox.extend([0.1, y, 0.8, y + 0.2]);
    }
    SoftGraph {
        presence: presence.to_vec(),
        type_probs: Tensor::new(vec![n, 8], types).unwrap(),
        bbox: Tensor::new(vec![n, 4], bbox).unwrap(),
        edge_probs: vec![0.5; n * (n - 1) / 2],
    }
}

#[test]
fn hardening_examples() {
    let d = harden(&soft(&[0.9, 0.9, 0.1]), "x");
    assert_eq!(d.elements.len(), 2);
    assert_eq!(d.elements[0].element_type, ElementType::TextBlock);
    assert_eq!(d.elements[1].element_type, ElementType::Image);
    assert!(d.elements.iter().all(|e| e.order.is_none()));

    let d = harden(&soft(&[0.2, 0.4, 0.1]), "y");
    assert_eq!(d.elements.len(), 1);
    assert_eq!(d.elements[0].bbox, BBox::new(0.1, 0.35, 0.8, 0.55));

    // Exactly at the threshold counts as present.
    assert_eq!(harden(&soft(&[0.5, 0.49]), "z").elements.len(), 1);
}

#[test]
fn random_latents_harden_into_valid_documents() {
    for seed in 0..4 {
        let ckpt = ModelCheckpoint::init(TrainingConfig { seed, ..TrainingConfig::default() }, GraphConfig::default()).unwrap();
        let mut rng = Rng::new(100 + seed);
        for k in 0..250 {
            let scale = [0.5, 1.0, 3.0, 10.0][k % 4];
            let z = rng.normal_tensor(&[8]).map(|v| v * scale);
            let doc = harden(&ckpt.decode(&z).unwrap(), "h");
            assert!(!doc.elements.is_empty());
            doc.validate().unwrap();
        }
    }
}

#[test]
fn sampling_is_seeded() {
    let ckpt = ModelCheckpoint::init(small(1), GraphConfig::default()).unwrap();
    let a = sample_layouts(&ckpt, 7, 42).unwrap();
    assert_eq!(a, sample_layouts(&ckpt, 7, 42).unwrap());
    assert_ne!(a, sample_layouts(&ckpt, 7, 43).unwrap());
    assert!(sample_layouts(&ckpt, 0, 42).unwrap().is_empty());
    for (k, s) in a.iter().enumerate() {
        assert_eq!(s.document.id, format!("synth-42-{k}"));
        assert_eq!(s.checkpoint_id, ckpt.id());
        assert_eq!((s.latent_seed, s.draw, s.valid), (42, k, None));
    }
    // A prefix of a longer draw is the shorter draw.
    assert_eq!(sample_layouts(&ckpt, 3, 42).unwrap(), a[..3].to_vec());
}

#[test]
fn trained_samples_use_several_types() {
    let docs = generate_toy_corpus(&ToyCorpusSpec::with_default_templates(5, 0.01, 2)).unwrap();
    let ckpt = train(&docs, &GraphConfig::default(), &TrainingConfig { epochs: 40, ..small(3) }).unwrap();
    let layouts = sample_layouts(&ckpt, 50, 9).unwrap();
    let mut types: Vec<ElementType> = layouts.iter().flat_map(|s| s.document.elements.iter().map(|e| e.element_type)).collect();
    types.sort_by_key(|t| t.index());
    types.dedup();
    assert!(types.len() >= 2, "{types:?}");
}

fn result(doc: &LayoutDocument, rule: Rule) -> RuleResult {
    validate_layout(doc, &ValidationRuleConfig::default())
        .into_iter()
        .find(|r| r.rule == rule)
        .unwrap()
}

#[test]
fn rule_examples() {
    let lone = LayoutDocument::new("lone", vec![el(ElementType::Caption, [0.1, 0.1, 0.5, 0.15])]);
    let r1 = result(&lone, Rule::R1);
    assert!(!r1.passed);
    assert!(r1.detail.contains("caption #0"), "{}", r1.detail);

    let near = LayoutDocument::new(
        "near",
        vec![el(ElementType::Image, [0.1, 0.1, 0.5, 0.4]), el(ElementType::Caption, [0.1, 0.45, 0.5, 0.5])],
    );
    assert!(result(&near, Rule::R1).passed);
    let far = LayoutDocument::new(
        "far",
        vec![el(ElementType::Image, [0.1, 0.1, 0.5, 0.4]), el(ElementType::Caption, [0.1, 0.55, 0.5, 0.6])],
    );
    assert!(!result(&far, Rule::R1).passed);

    let twins = LayoutDocument::new(
        "twins",
        vec![el(ElementType::Table, [0.2, 0.2, 0.6, 0.6]), el(ElementType::Table, [0.2, 0.2, 0.6, 0.6])],
    );
    let r3 = result(&twins, Rule::R3);
    assert!(!r3.passed);
    assert!(r3.detail.contains("IoU 1.000"), "{}", r3.detail);

    let dangling = LayoutDocument::new(
        "dangling",
        vec![el(ElementType::TextBlock, [0.1, 0.1, 0.9, 0.3]), el(ElementType::Heading, [0.1, 0.5, 0.9, 0.55])],
    );
    assert!(!result(&dangling, Rule::R2).passed);
    let wrong = LayoutDocument::new(
        "wrong",
        vec![el(ElementType::Title, [0.1, 0.1, 0.9, 0.15]), el(ElementType::Caption, [0.1, 0.2, 0.9, 0.25])],
    );
    let r2 = result(&wrong, Rule::R2);
    assert!(!r2.passed && r2.detail.contains("title #0 is followed by caption"), "{}", r2.detail);
    let fine = LayoutDocument::new(
        "fine",
        vec![el(ElementType::Title, [0.1, 0.1, 0.9, 0.15]), el(ElementType::Table, [0.1, 0.2, 0.9, 0.5])],
    );
    assert!(result(&fine, Rule::R2).passed);

    let bad = LayoutDocument::new("bad", vec![el(ElementType::Image, [0.5, 0.1, 0.4, 1.2])]);
    assert!(!result(&bad, Rule::R4).passed);
}

#[test]
fn templates_pass_every_rule() {
    let docs = generate_toy_corpus(&ToyCorpusSpec::with_default_templates(1, 0.0, 0)).unwrap();
    for d in &docs {
        for r in validate_layout(d, &ValidationRuleConfig::default()) {
            assert!(r.passed, "{} {:?}: {}", d.id, r.rule, r.detail);
        }
    }
    // And under the default training jitter.
    let jittered = generate_toy_corpus(&ToyCorpusSpec::with_default_templates(100, DEFAULT_TOY_JITTER, 7)).unwrap();
    let report = validate_corpus(&jittered, &ValidationRuleConfig::default());
    assert_eq!(report.aggregate.overall_pass_rate, 1.0);
}

#[test]
fn validation_ignores_element_order() {
    let mut rng = Rng::new(8);
    let rules = ValidationRuleConfig::default();
    for _ in 0..200 {
        let n = 1 + rng.below(7);
        let elements: Vec<LayoutElement> = (0..n)
            .map(|_| {
                let (x, y) = (rng.uniform() * 0.6, rng.uniform() * 0.6);
                let t = ElementType::from_index(rng.below(8)).unwrap();
                el(t, [x, y, x + 0.05 + rng.uniform() * 0.3, y + 0.05 + rng.uniform() * 0.3])
            })
            .collect();
        let doc = LayoutDocument::new("r", elements);
        let mut shuffled = doc.clone();
        rng.shuffle(&mut shuffled.elements);
        assert_eq!(validate_layout(&doc, &rules), validate_layout(&shuffled, &rules));
    }
}

#[test]
fn report_aggregates_agree_with_entries() {
    let mut docs = generate_toy_corpus(&ToyCorpusSpec::with_default_templates(2, 0.0, 0)).unwrap();
    docs.push(LayoutDocument::new("lone", vec![el(ElementType::Caption, [0.1, 0.1, 0.5, 0.15])]));
    docs.push(LayoutDocument::new(
        "twins",
        vec![el(ElementType::Table, [0.2, 0.2, 0.6, 0.6]), el(ElementType::Table, [0.2, 0.2, 0.6, 0.6])],
    ));
    let rules = ValidationRuleConfig {
        enabled: vec![Rule::R3, Rule::R1, Rule::R3],
        ..ValidationRuleConfig::default()
    };
    let report = validate_corpus(&docs, &rules);
    let agg = &report.aggregate;
    assert_eq!(agg.documents, 8);
    assert_eq!(agg.rule_pass_rate.keys().collect::<Vec<_>>(), vec!["R1", "R3"]);
    assert_eq!(agg.rule_pass_rate["R1"], 7.0 / 8.0);
    assert_eq!(agg.rule_pass_rate["R3"], 7.0 / 8.0);
    assert_eq!(agg.overall_pass_rate, 6.0 / 8.0);
    for d in &report.per_document {
        assert_eq!(d.results.len(), 2);
        assert_eq!(d.passed, d.results.iter().all(|r| r.passed));
    }

    let json: serde_json::Value = serde_json::to_value(&report).unwrap();
    assert_eq!(json["per_document"].as_array().unwrap().len(), 8);
    assert_eq!(json["aggregate"]["overall_pass_rate"].as_f64(), Some(0.75));

    let empty = validate_corpus(&[], &rules);
    assert_eq!(empty.aggregate.overall_pass_rate, 1.0);
}

#[test]
fn rule_config_bounds() {
    assert!(ValidationRuleConfig { iou_max: 1.5, ..Default::default() }.validate().is_err());
    assert!(ValidationRuleConfig { tau_cap: 0.0, ..Default::default() }.validate().is_err());
    assert!(ValidationRuleConfig::default().validate().is_ok());
    let parsed: ValidationRuleConfig = serde_json::from_str(r#"{"enabled": ["R2"]}"#).unwrap();
    assert_eq!(parsed.rules(), vec![Rule::R2]);
    assert_eq!(parsed.iou_max, 0.15);
    assert!(serde_json::from_str::<ValidationRuleConfig>(r#"{"iou": 0.2}"#).is_err());
}

#[test]
fn rejection_sampling() {
    let ckpt = ModelCheckpoint::init(small(2), GraphConfig::default()).unwrap();

    let (all, stats) = rejection_sample(&ckpt, 10, &ValidationRuleConfig::none(), 5, 10).unwrap();
    assert_eq!((all.len(), stats.draws, stats.acceptance_rate, stats.shortfall), (10, 10, 1.0, 0));
    assert!(all.iter().all(|s| s.valid == Some(true)));
    let plain = sample_layouts(&ckpt, 10, 5).unwrap();
    for (a, p) in all.iter().zip(&plain) {
        assert_eq!(a.document, p.document);
    }

    let strict = ValidationRuleConfig {
        iou_max: 0.0,
        ..ValidationRuleConfig::default()
    };
    let (got, stats) = rejection_sample(&ckpt, 20, &strict, 5, 20).unwrap();
    assert_eq!(stats.draws, 20);
    assert_eq!(stats.accepted, got.len());
    assert_eq!(stats.shortfall, 20 - got.len());
    assert_eq!(stats.acceptance_rate, got.len() as f64 / 20.0);
    let failed = 20 - got.len();
    assert!(failed > 0);
    assert!(stats.rule_failures.values().sum::<usize>() >= failed);

    // Accepted layouts are the passing draws of the plain stream, in order.
    let stream = sample_layouts(&ckpt, 20, 5).unwrap();
    let passing: Vec<&LayoutDocument> = stream
        .iter()
        .map(|s| &s.document)
        .filter(|d| validate_layout(d, &strict).iter().all(|r| r.passed))
        .collect();
    assert_eq!(got.iter().map(|s| &s.document).collect::<Vec<_>>(), passing);

    assert_eq!(rejection_sample(&ckpt, 20, &strict, 5, 20).unwrap(), (got, stats));
    assert!(rejection_sample(&ckpt, 5, &strict, 5, 4).is_err());
}

fn rects(svg: &str) -> Vec<(f64, f64, f64, f64, String)> {
    let xml = roxmltree::Document::parse(svg).unwrap();
    xml.descendants()
        .filter(|n| n.has_tag_name("rect"))
        .map(|n| {
            let f = |k: &str| n.attribute(k).unwrap().parse::<f64>().unwrap();
            (f("x"), f("y"), f("width"), f("height"), n.attribute("fill").unwrap().to_string())
        })
        .collect()
}

#[test]
fn svg_examples() {
    let one = LayoutDocument::new("one", vec![el(ElementType::Image, [0.0, 0.0, 1.0, 1.0])]);
    let svg = render_svg(&one);
    let xml = roxmltree::Document::parse(&svg).unwrap();
    let root = xml.root_element();
    assert_eq!(root.attribute("viewBox"), Some("0 0 800 1035"));
    let texts: Vec<_> = xml.descendants().filter(|n| n.has_tag_name("text")).collect();
    assert_eq!(texts.len(), 1);
    assert_eq!(texts[0].text(), Some("image"));
    assert_eq!(rects(&svg), vec![(0.0, 0.0, 800.0, 1035.0, palette(ElementType::Image).to_string())]);
}

#[test]
fn svg_is_well_formed_for_random_documents() {
    let mut rng = Rng::new(31);
    for _ in 0..100 {
        let n = 1 + rng.below(12);
        let elements: Vec<LayoutElement> = (0..n)
            .map(|_| {
                let (x, y) = (rng.uniform() * 0.9, rng.uniform() * 0.9);
                let t = ElementType::from_index(rng.below(8)).unwrap();
                el(t, [x, y, x + 0.001 + rng.uniform() * (0.999 - x), y + 0.001 + rng.uniform() * (0.999 - y)])
            })
            .collect();
        let doc = LayoutDocument::new("svg", elements);
        let got = rects(&render_svg(&doc));
        assert_eq!(got.len(), n);
        for ((x, y, w, h, fill), e) in got.iter().zip(&doc.elements) {
            assert!((x - e.bbox.x0 * 800.0).abs() <= 5e-4);
            assert!((y - e.bbox.y0 * 1035.0).abs() <= 5e-4);
            assert!((w - e.bbox.width() * 800.0).abs() <= 5e-4);
            assert!((h - e.bbox.height() * 1035.0).abs() <= 5e-4);
            assert_eq!(fill, palette(e.element_type));
        }
    }
}

#[test]
fn palette_is_distinct() {
    let mut colors: Vec<&str> = ElementType::ALL.iter().map(|&t| palette(t)).collect();
    colors.sort();
    colors.dedup();
    assert_eq!(colors.len(), 8);
}
