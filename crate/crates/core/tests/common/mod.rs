#![allow(dead_code)]

use std::collections::BTreeMap;

use layoutgen_core::graph::*;
use layoutgen_core::layout::*;
use layoutgen_numeric::Rng;
use proptest::prelude::*;

// Coordinates on a 0.05 lattice so that alignment ties and touching boxes
// come up often.
pub fn element() -> impl Strategy<Value = LayoutElement> {
    (0usize..8, 0u32..19, 0u32..19, 1u32..8, 1u32..8, proptest::option::of(1u32..100)).prop_map(
        |(t, x, y, w, h, font)| {
            let x0 = x as f64 * 0.05;
            let y0 = y as f64 * 0.05;
            let x1 = ((x + w).min(20)) as f64 * 0.05;
            let y1 = ((y + h).min(20)) as f64 * 0.05;
            LayoutElement {
                element_type: ElementType::from_index(t).unwrap(),
                bbox: BBox::new(x0, y0, x1, y1),
                font_size: font.map(|f| f as f64 / 100.0),
                order: None,
            }
        },
    )
}

pub fn document(max: usize) -> impl Strategy<Value = LayoutDocument> {
    (
        proptest::collection::vec(element(), 1..=max),
        proptest::option::of("[a-z]{1,6}"),
        any::<bool>(),
        any::<u64>(),
    )
        .prop_map(|(mut elements, label, explicit, seed)| {
            if explicit {
                let mut perm: Vec<usize> = (0..elements.len()).collect();
                Rng::new(seed).shuffle(&mut perm);
                for (e, o) in elements.iter_mut().zip(perm) {
                    e.order = Some(o);
                }
            }
            LayoutDocument {
                id: format!("doc-{seed}"),
                label,
                page: Page::default(),
                elements,
            }
        })
}

// Key: (lower element index, higher element index, kind), directed kinds keep
// (src, dst). Value: how many times the relation appears.
pub type Relations = BTreeMap<(usize, usize, &'static str), usize>;

pub fn oracle(doc: &LayoutDocument, order: &[usize], cfg: &GraphConfig) -> Relations {
    let els = &doc.elements;
    let n = els.len();
    let mut out = Relations::new();
    let mut add = |a: usize, b: usize, kind: &'static str| *out.entry((a, b, kind)).or_insert(0) += 1;
    let gap = |a: &BBox, b: &BBox| {
        let gx = (a.x0.max(b.x0) - a.x1.min(b.x1)).max(0.0);
        let gy = (a.y0.max(b.y0) - a.y1.min(b.y1)).max(0.0);
        (gx * gx + gy * gy).sqrt()
    };
    // Rank of j among i's proximity candidates, by (distance, reading position).
    let pos: Vec<usize> = {
        let mut p = vec![0; n];
        for (k, &e) in order.iter().enumerate() {
            p[e] = k;
        }
        p
    };
    let near = |i: usize, j: usize| gap(&els[i].bbox, &els[j].bbox) <= cfg.tau_prox;
    let rank = |i: usize, j: usize| {
        let d = gap(&els[i].bbox, &els[j].bbox);
        (0..n)
            .filter(|&k| k != i && near(i, k))
            .filter(|&k| {
                let dk = gap(&els[i].bbox, &els[k].bbox);
                dk < d || (dk == d && pos[k] < pos[j])
            })
            .count()
    };
    for i in 0..n {
        for j in i + 1..n {
            let (a, b) = (&els[i].bbox, &els[j].bbox);
            let t = cfg.tau_align;
            let tests = [
                ("align_left", (a.x0 - b.x0).abs() <= t),
                ("align_right", (a.x1 - b.x1).abs() <= t),
                ("align_center_x", ((a.x0 + a.x1) / 2.0 - (b.x0 + b.x1) / 2.0).abs() <= t),
                ("align_top", (a.y0 - b.y0).abs() <= t),
                ("align_bottom", (a.y1 - b.y1).abs() <= t),
                ("align_center_y", ((a.y0 + a.y1) / 2.0 - (b.y0 + b.y1) / 2.0).abs() <= t),
            ];
            for (kind, hit) in tests {
                if hit {
                    add(i, j, kind);
                }
            }
            if near(i, j) && (rank(i, j) < cfg.k_nn || rank(j, i) < cfg.k_nn) {
                add(i, j, "proximity");
            }
        }
    }
    for k in 0..n {
        let e = &els[order[k]];
        let heading = matches!(e.element_type, ElementType::Title | ElementType::Heading);
        if heading && k + 1 < n {
            add(order[k], order[k + 1], "hierarchy");
        }
        if e.element_type == ElementType::Caption {
            let mut best: Option<(f64, usize)> = None;
            for (kk, &img) in order.iter().enumerate() {
                if els[img].element_type == ElementType::Image {
                    let d = gap(&els[img].bbox, &e.bbox);
                    if best.is_none_or(|(bd, _)| d < bd) {
                        best = Some((d, kk));
                    }
                }
            }
            if let Some((d, kk)) = best {
                if d <= cfg.tau_cap {
                    add(order[kk], order[k], "hierarchy");
                }
            }
        }
        if cfg.self_loop {
            add(order[k], order[k], "proximity");
        }
    }
    out
}

pub fn relations(g: &LayoutGraph) -> Relations {
    let mut out = Relations::new();
    for e in &g.edges {
        let (a, b) = (g.order[e.src], g.order[e.dst]);
        let key = if e.kind.is_directed() { (a, b) } else { (a.min(b), a.max(b)) };
        *out.entry((key.0, key.1, e.kind.name())).or_insert(0) += 1;
    }
    out
}
