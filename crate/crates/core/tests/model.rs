use layoutgen_core::graph::{build_graph, GraphConfig, LayoutGraph};
use layoutgen_core::layout::{generate_toy_corpus, BBox, ElementType, LayoutDocument, LayoutElement, ToyCorpusSpec};
use layoutgen_core::model::*;
use layoutgen_numeric::{bce_scalar, kl_diag_gaussian, sigmoid, ParamStore, Rng, Tape, Tensor};

fn small() -> TrainingConfig {
    TrainingConfig {
        d_hidden: 8,
        d_latent: 4,
        n_max: 8,
        batch_size: 4,
        epochs: 3,
        seed: 5,
        ..TrainingConfig::default()
    }
}

fn corpus() -> Vec<LayoutDocument> {
    generate_toy_corpus(&ToyCorpusSpec::with_default_templates(4, 0.01, 3)).unwrap()
}

fn graph(doc: &LayoutDocument) -> LayoutGraph {
    build_graph(doc, &GraphConfig::default()).unwrap()
}

fn el(t: ElementType, b: [f64; 4]) -> LayoutElement {
    LayoutElement::new(t, BBox::new(b[0], b[1], b[2], b[3]))
}

fn random_soft(rng: &mut Rng, n: usize) -> SoftGraph {
    let mut types = Vec::new();
    for _ in 0..n {
        let raw: Vec<f64> = (0..8).map(|_| rng.uniform() + 1e-3).collect();
        let s: f64 = raw.iter().sum();
        types.extend(raw.iter().map(|v| v / s));
    }
    let mut bbox = Vec::new();
    for _ in 0..n {
        let (a, b) = (rng.uniform() * 0.5, rng.uniform() * 0.5);
        bbox.extend([a, b, a + 0.3, b + 0.3]);
    }
    SoftGraph {
        presence: (0..n).map(|_| rng.uniform()).collect(),
        type_probs: Tensor::new(vec![n, 8], types).unwrap(),
        bbox: Tensor::new(vec![n, 4], bbox).unwrap(),
        edge_probs: (0..num_pairs(n)).map(|_| rng.uniform()).collect(),
    }
}

#[test]
fn pooled_embedding_is_pinned() {
    let ckpt = ModelCheckpoint::init(TrainingConfig::default(), GraphConfig::default()).unwrap();
    let pooled = ckpt.encode(&grad_check_fixture()).unwrap();
    assert_eq!(pooled.shape(), &[1, 32]);
    // First four entries, frozen from the first verified run.
    let pinned = [0.06467667447929837, 0.0, 0.3366833999401642, 0.23527789208140676];
    for (got, want) in pooled.data().iter().zip(pinned) {
        assert_eq!(got.to_bits(), f64::to_bits(want), "{got} vs {want}");
    }
}

#[test]
fn pooled_embedding_ignores_element_order() {
    let ckpt = ModelCheckpoint::init(small(), GraphConfig::default()).unwrap();
    let mut rng = Rng::new(9);
    for doc in corpus() {
        let base = ckpt.encode(&graph(&doc)).unwrap();
        let mut shuffled = doc.clone();
        rng.shuffle(&mut shuffled.elements);
        assert_eq!(ckpt.encode(&graph(&shuffled)).unwrap(), base, "{}", doc.id);
    }
}

#[test]
fn message_passing_is_permutation_equivariant() {
    let mut rng = Rng::new(2);
    let mut tape = Tape::new();
    let h0 = rng.normal_tensor(&[4, 3]);
    let e0 = rng.normal_tensor(&[5, 2]);
    let w = tape.constant(rng.normal_tensor(&[8, 6]));
    let b = tape.constant(rng.normal_tensor(&[6]));
    let (snd, rcv) = ([0, 1, 2, 3, 3], [1, 0, 3, 2, 0]);
    let h = tape.constant(h0.clone());
    let e = tape.constant(e0.clone());
    let msgs = Messages { senders: &snd, receivers: &rcv, features: Some(e), weights: None };
    let out = message_passing_layer(&mut tape, h, &msgs, w, b).unwrap();
    let out = tape.value(out).clone();

    // New index of old node k is perm[k].
    let perm = [2, 0, 3, 1];
    let mut rows = vec![vec![]; 4];
    for k in 0..4 {
        rows[perm[k]] = h0.row(k).to_vec();
    }
    let hp = tape.constant(Tensor::from_rows(&rows).unwrap());
    let snd_p: Vec<usize> = snd.iter().map(|&k| perm[k]).collect();
    let rcv_p: Vec<usize> = rcv.iter().map(|&k| perm[k]).collect();
    let e = tape.constant(e0);
    let msgs = Messages { senders: &snd_p, receivers: &rcv_p, features: Some(e), weights: None };
    let outp = message_passing_layer(&mut tape, hp, &msgs, w, b).unwrap();
    let outp = tape.value(outp);
    for k in 0..4 {
        for (a, b) in out.row(k).iter().zip(outp.row(perm[k])) {
            assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }
    }
}

#[test]
fn single_node_pools_to_itself() {
    let ckpt = ModelCheckpoint::init(small(), GraphConfig::default()).unwrap();
    let doc = LayoutDocument::new("one", vec![el(ElementType::Image, [0.2, 0.2, 0.6, 0.5])]);
    let g = graph(&doc);
    let mut tape = Tape::new();
    let p = Bound::all_frozen(&mut tape, &ckpt.params).unwrap();
    let (nodes, pooled) = encode_graph(&mut tape, &g, &p, 2).unwrap();
    assert_eq!(tape.value(nodes).data(), tape.value(pooled).data());
}

#[test]
fn reparameterize_examples() {
    let mut s = ParamStore::new();
    s.insert("mu", Tensor::new(vec![1, 3], vec![0.5, -1.0, 2.0]).unwrap()).unwrap();
    s.insert("lv", Tensor::new(vec![1, 3], vec![0.3, -0.2, 1.0]).unwrap()).unwrap();

    let mut tape = Tape::new();
    let mu = tape.param(&s, "mu").unwrap();
    let lv = tape.param(&s, "lv").unwrap();
    let z = reparameterize(&mut tape, mu, lv, &Tensor::zeros(&[1, 3])).unwrap();
    assert_eq!(tape.value(z), tape.value(mu));

    let tiny = tape.constant(Tensor::filled(&[1, 3], -80.0));
    let z = reparameterize(&mut tape, mu, tiny, &Tensor::filled(&[1, 3], 3.0)).unwrap();
    for (a, b) in tape.value(z).data().iter().zip(tape.value(mu).data()) {
        assert!((a - b).abs() < 1e-15);
    }

    let eps = Tensor::new(vec![1, 3], vec![0.7, -1.1, 0.2]).unwrap();
    let z = reparameterize(&mut tape, mu, lv, &eps).unwrap();
    let total = tape.sum(z);
    tape.backward(total, &mut s).unwrap();
    assert_eq!(s.grad("mu").unwrap().data(), &[1.0, 1.0, 1.0]);
    let want: Vec<f64> = [0.3f64, -0.2, 1.0]
        .iter()
        .zip(eps.data())
        .map(|(l, e)| 0.5 * (0.5 * l).exp() * e)
        .collect();
    for (g, w) in s.grad("lv").unwrap().data().iter().zip(want) {
        assert!((g - w).abs() < 1e-15);
    }
}

#[test]
fn decoded_graphs_are_well_formed() {
    let ckpt = ModelCheckpoint::init(TrainingConfig::default(), GraphConfig::default()).unwrap();
    let mut rng = Rng::new(4);
    for _ in 0..200 {
        let z = rng.normal_tensor(&[8]).map(|v| v * 3.0);
        let s = ckpt.decode(&z).unwrap();
        assert!(s.violations().is_empty(), "{:?}", s.violations());
        for k in 0..s.n_max() {
            let b = s.bbox.row(k);
            assert!(b[0] < b[2] && b[1] < b[3], "{b:?}");
        }
        assert_eq!(ckpt.decode(&z).unwrap(), s);
    }
}

#[test]
fn saturated_decoder_still_orders_boxes() {
    let mut ckpt = ModelCheckpoint::init(small(), GraphConfig::default()).unwrap();
    for v in ckpt.params.get_mut(names::DEC_OUT_B).unwrap().value.data_mut() {
        *v = 60.0;
    }
    let s = ckpt.decode(&Tensor::zeros(&[4])).unwrap();
    for k in 0..s.n_max() {
        let b = s.bbox.row(k);
        assert!(b[0] < b[2] && b[1] < b[3] && b[2] <= 1.0, "{b:?}");
    }
}

fn recon(s: &SoftGraph, g: &LayoutGraph) -> f64 {
    let mut tape = Tape::new();
    let v = SoftVars::constant(&mut tape, s).unwrap();
    let l = reconstruction_loss(&mut tape, &v, g).unwrap();
    tape.value(l).item()
}

#[test]
fn self_reconstruction_is_near_zero() {
    for doc in corpus() {
        let g = graph(&doc);
        let s = SoftGraph::from_graph(&g, 12).unwrap();
        let floor = bce_scalar(1e-7, 0.0);
        let bound = (2 * 12 + num_pairs(12)) as f64 * floor * (1.0 + 1e-6);
        let l = recon(&s, &g);
        assert!(l <= bound, "{}: {l} > {bound}", doc.id);
    }
}

#[test]
fn edge_term_of_an_empty_adjacency() {
    // Far apart and unaligned, no self-loops: no edges at all.
    let doc = LayoutDocument::new(
        "sparse",
        vec![
            el(ElementType::TextBlock, [0.05, 0.05, 0.25, 0.15]),
            el(ElementType::Image, [0.42, 0.43, 0.58, 0.57]),
            el(ElementType::Table, [0.73, 0.81, 0.93, 0.94]),
        ],
    );
    let cfg = GraphConfig {
        self_loop: false,
        ..GraphConfig::default()
    };
    let g = build_graph(&doc, &cfg).unwrap();
    assert!(g.edges.is_empty());
    let mut s = SoftGraph::from_graph(&g, 6).unwrap();
    let zero = recon(&s, &g);
    s.edge_probs = vec![0.5; num_pairs(6)];
    let half = recon(&s, &g);
    let pairs = num_pairs(6) as f64;
    let want = pairs * std::f64::consts::LN_2 - pairs * bce_scalar(0.0, 0.0);
    assert!(((half - zero) - want).abs() < 1e-12, "{} vs {want}", half - zero);
}

#[test]
fn too_many_nodes_is_a_capacity_error() {
    let doc = &corpus()[2];
    let g = graph(doc);
    assert!(SoftGraph::from_graph(&g, 3).is_err());
    let s = SoftGraph::from_graph(&g, 12).unwrap();
    let s3 = SoftGraph {
        presence: s.presence[..3].to_vec(),
        type_probs: Tensor::filled(&[3, 8], 0.125),
        bbox: Tensor::filled(&[3, 4], 0.5),
        edge_probs: vec![0.5; 3],
    };
    let mut tape = Tape::new();
    let v = SoftVars::constant(&mut tape, &s3).unwrap();
    assert!(reconstruction_loss(&mut tape, &v, &g).is_err());
}

fn vae_pieces(beta: f64, mu: &[f64], lv: &[f64]) -> (f64, f64) {
    let ckpt = ModelCheckpoint::init(small(), GraphConfig::default()).unwrap();
    let g = graph(&corpus()[0]);
    let s = ckpt.decode(&Tensor::vector(mu.to_vec())).unwrap();
    let mut tape = Tape::new();
    let v = SoftVars::constant(&mut tape, &s).unwrap();
    let m = tape.constant(Tensor::vector(mu.to_vec()));
    let l = tape.constant(Tensor::vector(lv.to_vec()));
    let total = vae_loss(&mut tape, &v, &g, m, l, beta).unwrap();
    (tape.value(total).item(), recon(&s, &g))
}

#[test]
fn vae_loss_structure() {
    let mut rng = Rng::new(13);
    for _ in 0..50 {
        let mu: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
        let lv: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
        let (zero, r) = vae_pieces(0.0, &mu, &lv);
        assert_eq!(zero.to_bits(), r.to_bits());
        let (one, _) = vae_pieces(1.0, &mu, &lv);
        let (two, _) = vae_pieces(2.0, &mu, &lv);
        let kl = kl_diag_gaussian(&mu, &lv);
        assert!(((two - one) - kl).abs() <= 4.0 * f64::EPSILON * two.abs(), "{} vs {kl}", two - one);
    }
}

#[test]
fn adversarial_values() {
    let mut tape = Tape::new();
    let half = tape.constant(Tensor::scalar(0.5));
    let v = gan_value(&mut tape, half, half).unwrap();
    assert!((tape.value(v).item() + 1.3863).abs() < 1e-4);
    assert!((tape.value(v).item() - 2.0 * 0.5f64.ln()).abs() < 1e-15);

    let ns = generator_adversarial_loss(&mut tape, half, GenObjective::NonSaturating).unwrap();
    assert!((tape.value(ns).item() - std::f64::consts::LN_2).abs() < 1e-15);
    let mm = generator_adversarial_loss(&mut tape, half, GenObjective::Minimax).unwrap();
    assert!((tape.value(mm).item() + std::f64::consts::LN_2).abs() < 1e-15);

    let one = tape.constant(Tensor::scalar(1.0));
    let zero = tape.constant(Tensor::scalar(0.0));
    let best = gan_value(&mut tape, one, zero).unwrap();
    let best = tape.value(best).item();
    assert!(best < 0.0 && best > -1e-6, "{best}");
}

fn generator_loss(store: &ParamStore, cfg: &TrainingConfig) -> (f64, f64) {
    let docs = corpus();
    let graphs: Vec<LayoutGraph> = docs[..3].iter().map(graph).collect();
    let refs: Vec<&LayoutGraph> = graphs.iter().collect();
    let mut rng = Rng::new(1);
    let eps: Vec<Tensor> = refs.iter().map(|_| rng.normal_tensor(&[1, cfg.d_latent])).collect();
    let mut tape = Tape::new();
    let p = Bound::all_frozen(&mut tape, store).unwrap();
    let t = total_generator_loss(&mut tape, &p, GeneratorBatch { graphs: &refs, eps: &eps }, cfg).unwrap();
    (tape.value(t.total).item(), t.mean_reconstruction)
}

#[test]
fn degenerate_weights_leave_reconstruction() {
    let cfg = TrainingConfig { beta: 0.0, lambda: 0.0, gamma: 0.0, ..small() };
    let ckpt = ModelCheckpoint::init(cfg.clone(), GraphConfig::default()).unwrap();
    let (total, recon) = generator_loss(&ckpt.params, &cfg);
    assert!((total - recon).abs() <= 1e-12 * recon);
}

#[test]
fn penalty_is_lambda_times_generator_norm() {
    let base = TrainingConfig { lambda: 0.0, ..small() };
    let ckpt = ModelCheckpoint::init(base.clone(), GraphConfig::default()).unwrap();
    let norm = ckpt.params.sum_squares(&names::GENERATOR);
    assert!(norm > 0.0);
    let (without, _) = generator_loss(&ckpt.params, &base);
    for lambda in [1e-4, 0.5, 3.0] {
        let (with, _) = generator_loss(&ckpt.params, &TrainingConfig { lambda, ..base.clone() });
        assert!(((with - without) - lambda * norm).abs() <= 1e-12 * with.abs(), "{lambda}");
    }
}

#[test]
fn discriminator_outputs_probabilities() {
    let ckpt = ModelCheckpoint::init(TrainingConfig::default(), GraphConfig::default()).unwrap();
    let mut rng = Rng::new(21);
    for _ in 0..50 {
        let s = random_soft(&mut rng, 12);
        let d = ckpt.discriminate(&s).unwrap();
        assert!(d > 0.0 && d < 1.0);
        assert_eq!(ckpt.discriminate(&s).unwrap().to_bits(), d.to_bits());
    }
}

#[test]
fn lifting_is_exact() {
    let ckpt = ModelCheckpoint::init(TrainingConfig::default(), GraphConfig::default()).unwrap();
    for doc in corpus() {
        let g = graph(&doc);
        let s = SoftGraph::from_graph(&g, 12).unwrap();
        let n = g.num_nodes();
        let adj = g.adjacency();
        for k in 0..12 {
            assert_eq!(s.presence[k], if k < n { 1.0 } else { 0.0 });
            if k < n {
                let e = &doc.elements[g.order[k]];
                assert_eq!(s.bbox.row(k), &e.bbox.to_array());
                let t = e.element_type.index();
                for c in 0..8 {
                    assert_eq!(s.type_probs.get(k, c), if c == t { 1.0 } else { 0.0 });
                }
            }
        }
        for (idx, (a, b)) in slot_pairs(12).into_iter().enumerate() {
            let want = a < n && b < n && adj[a][b];
            assert_eq!(s.edge_probs[idx], if want { 1.0 } else { 0.0 });
        }
        // The hard graph's only path into the discriminator is the lift.
        let d = ckpt.discriminate(&s).unwrap();
        assert!(d > 0.0 && d < 1.0);
        let again = SoftGraph::from_graph(&graph(&doc), 12).unwrap();
        assert_eq!(ckpt.discriminate(&again).unwrap().to_bits(), d.to_bits());
    }
}

#[test]
fn discriminator_learns_a_separable_set() {
    let cfg = small();
    let mut ckpt = ModelCheckpoint::init(cfg.clone(), GraphConfig::default()).unwrap();
    let frozen = ckpt.params.clone();
    let real: Vec<SoftGraph> = corpus().iter().map(|d| SoftGraph::from_graph(&graph(d), 8).unwrap()).collect();
    let mut rng = Rng::new(3);
    let fake: Vec<SoftGraph> = real.iter().map(|_| ckpt.decode(&rng.normal_tensor(&[4])).unwrap()).collect();
    let refs: Vec<&SoftGraph> = real.iter().collect();
    let first = ckpt.discriminator_step(&refs, &fake).unwrap();
    let mut last = first;
    for _ in 0..100 {
        last = ckpt.discriminator_step(&refs, &fake).unwrap();
    }
    assert!(last < first, "{first} -> {last}");
    for (name, p) in ckpt.params.iter() {
        if names::is_generator(name) {
            assert_eq!(p.value, frozen.value(name).unwrap().clone(), "{name}");
        } else {
            assert!(p.value.data().iter().all(|v| v.abs() <= cfg.disc_clip), "{name}");
        }
    }
}

#[test]
fn clipping_bounds_only_the_discriminator() {
    let mut ckpt = ModelCheckpoint::init(TrainingConfig::default(), GraphConfig::default()).unwrap();
    let before = ckpt.params.clone();
    clip_discriminator(&mut ckpt.params, 0.01);
    for (name, p) in ckpt.params.iter() {
        let old = before.value(name).unwrap();
        for (a, b) in p.value.data().iter().zip(old.data()) {
            if names::is_discriminator(name) {
                assert_eq!(*a, b.clamp(-0.01, 0.01));
            } else {
                assert_eq!(a, b);
            }
        }
    }
    let mut off = before.clone();
    clip_discriminator(&mut off, 0.0);
    assert_eq!(off, before);
}

#[test]
fn composite_gradients_match_small_model() {
    for seed in [1, 2] {
        let report = run_grad_check(&small(), seed).unwrap();
        assert!(report.max_rel_error < 1e-4, "seed {seed}: {report:?}");
        assert_eq!(report.coordinates, small().param_shapes().iter().map(|(_, s)| s.iter().product::<usize>()).sum::<usize>());
    }
}

#[test]
fn zero_epochs_is_initialization() {
    let cfg = TrainingConfig { epochs: 0, ..small() };
    let trained = train(&corpus(), &GraphConfig::default(), &cfg).unwrap();
    let init = ModelCheckpoint::init(cfg, GraphConfig::default()).unwrap();
    assert_eq!(checkpoint_to_string(&trained), checkpoint_to_string(&init));
    assert!(trained.loss_trace.is_empty());
}

#[test]
fn training_is_deterministic_and_finite() {
    let a = train(&corpus(), &GraphConfig::default(), &small()).unwrap();
    let b = train(&corpus(), &GraphConfig::default(), &small()).unwrap();
    assert_eq!(checkpoint_to_string(&a), checkpoint_to_string(&b));
    assert_eq!(a.loss_trace.len(), 3);
    assert_eq!(a.training.epochs, 3);
    for e in &a.loss_trace {
        assert!(e.generator.is_finite() && e.discriminator.is_finite() && e.reconstruction.is_finite());
    }
    let other = train(&corpus(), &GraphConfig::default(), &TrainingConfig { seed: 6, ..small() }).unwrap();
    assert_ne!(checkpoint_to_string(&a), checkpoint_to_string(&other));
}

#[test]
fn resume_matches_uninterrupted_training() {
    let docs = corpus();
    let full = train(&docs, &GraphConfig::default(), &TrainingConfig { epochs: 5, ..small() }).unwrap();
    let head = train(&docs, &GraphConfig::default(), &TrainingConfig { epochs: 2, ..small() }).unwrap();
    let overrides = FineTuneOverrides { epochs: 3, ..Default::default() };
    let resumed = fine_tune(&head, &docs, &overrides, |_| {}).unwrap();
    assert_eq!(checkpoint_to_string(&resumed), checkpoint_to_string(&full));

    // Through a file as well.
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("head.json");
    save_checkpoint(&head, &path).unwrap();
    let resumed = fine_tune(&load_checkpoint(&path).unwrap(), &docs, &overrides, |_| {}).unwrap();
    assert_eq!(checkpoint_to_string(&resumed), checkpoint_to_string(&full));
}

#[test]
fn fine_tune_rules() {
    let docs = corpus();
    let ckpt = train(&docs, &GraphConfig::default(), &small()).unwrap();
    let same = fine_tune(&ckpt, &docs, &FineTuneOverrides::default(), |_| {}).unwrap();
    assert_eq!(same.params, ckpt.params);
    let bad = FineTuneOverrides { d_hidden: Some(16), ..Default::default() };
    let err = fine_tune(&ckpt, &docs, &bad, |_| {}).unwrap_err().to_string();
    assert!(err.contains("d_hidden"), "{err}");
    let ok = FineTuneOverrides { d_hidden: Some(8), lr: Some(5e-4), epochs: 1, ..Default::default() };
    let next = fine_tune(&ckpt, &docs, &ok, |_| {}).unwrap();
    assert_eq!(next.training.lr, 5e-4);
    assert_eq!(next.training.epochs, 4);
}

#[test]
fn fine_tune_adapts_to_shifted_layouts() {
    let docs = corpus();
    let ckpt = train(&docs, &GraphConfig::default(), &TrainingConfig { epochs: 20, ..small() }).unwrap();
    let shifted_templates = layoutgen_core::layout::default_templates()
        .into_iter()
        .map(|mut t| {
            for e in &mut t.elements {
                let b = e.bbox.to_array();
                e.bbox = BBox::new(b[0] * 0.8 + 0.15, b[1] * 0.9, b[2] * 0.8 + 0.15, b[3] * 0.9);
            }
            t
        })
        .collect();
    let shifted = generate_toy_corpus(&ToyCorpusSpec {
        classes: shifted_templates,
        per_class: 4,
        jitter: 0.01,
        seed: 8,
    })
    .unwrap();
    let graphs: Vec<LayoutGraph> = shifted.iter().map(graph).collect();
    let before = ckpt.mean_reconstruction(&graphs).unwrap();
    let tuned = fine_tune(&ckpt, &shifted, &FineTuneOverrides { epochs: 20, ..Default::default() }, |_| {}).unwrap();
    let after = tuned.mean_reconstruction(&graphs).unwrap();
    assert!(after < before, "{before} -> {after}");
}

#[test]
fn capacity_is_checked_before_training() {
    let cfg = TrainingConfig { n_max: 5, ..small() };
    let err = train(&corpus(), &GraphConfig::default(), &cfg).unwrap_err().to_string();
    assert!(err.contains("at most 5"), "{err}");
    assert!(train(&[], &GraphConfig::default(), &small()).is_err());
}

#[test]
fn checkpoint_round_trip() {
    let ckpt = train(&corpus(), &GraphConfig::default(), &small()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.json");
    let b = dir.path().join("b.json");
    save_checkpoint(&ckpt, &a).unwrap();
    let loaded = load_checkpoint(&a).unwrap();
    assert_eq!(loaded, ckpt);
    save_checkpoint(&loaded, &b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let fixture = grad_check_fixture();
    assert_eq!(loaded.encode(&fixture).unwrap(), ckpt.encode(&fixture).unwrap());
    let z = Tensor::vector(vec![0.3, -0.2, 1.1, 0.0]);
    assert_eq!(loaded.decode(&z).unwrap(), ckpt.decode(&z).unwrap());
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let ckpt = ModelCheckpoint::init(small(), GraphConfig::default()).unwrap();
    let text = checkpoint_to_string(&ckpt);
    let err = |t: &str| checkpoint_from_str(t).unwrap_err().to_string();

    assert!(err(&text[..text.len() / 2]).contains("malformed"));
    assert!(err(&text.replacen("\"version\": 1", "\"version\": 2", 1)).contains("unsupported version 2"));

    let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
    v["params"]["dec.out.b"]["data_b64"] = "!!!".into();
    assert!(err(&v.to_string()).contains("base64"));

    let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
    v["params"]["dec.out.b"]["shape"] = serde_json::json!([3]);
    assert!(err(&v.to_string()).contains("dec.out.b"));

    let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
    v["params"].as_object_mut().unwrap().remove("enc.proj.w");
    assert!(err(&v.to_string()).contains("missing parameter `enc.proj.w`"));

    let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
    v["params"]["extra"] = v["params"]["dec.out.b"].clone();
    assert!(err(&v.to_string()).contains("unexpected parameter `extra`"));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cut.json");
    std::fs::write(&path, &text[..100]).unwrap();
    assert!(load_checkpoint(&path).is_err());
}

#[test]
fn sigmoid_of_saturated_presence_is_in_range() {
    assert_eq!(sigmoid(0.0), 0.5);
    assert!(sigmoid(800.0) <= 1.0 && sigmoid(-800.0) >= 0.0);
}
