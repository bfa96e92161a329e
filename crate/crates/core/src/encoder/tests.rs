use super::*;
use crate::graph::{DatasetSplit, GraphBuilder, KnowledgeGraph, SplitMode};
use crate::text::build_vocabulary;

fn toy_graph(n_entities: usize) -> KnowledgeGraph {
    let mut b = GraphBuilder::new();
    for i in 0..n_entities.max(2) - 1 {
        b.add_triple(&format!("e{i}"), "links", &format!("e{}", i + 1));
    }
    let words = ["red apple fruit", "blue ocean water", "green forest tree", "yellow sun star", "black night sky"];
    for i in 0..n_entities {
        b.describe(&format!("e{i}"), words[i % words.len()]);
    }
    b.build().unwrap()
}

fn setup(n_entities: usize, dim: usize, seed: u64) -> (KnowledgeGraph, Vocabulary, EncoderModel) {
    let g = toy_graph(n_entities);
    let v = build_vocabulary(&g, 1, 16)
        .unwrap()
        .expand_entities(g.num_entities())
        .unwrap();
    let cfg = EncoderConfig::for_vocab(&v, dim, 1, 2).unwrap();
    let m = EncoderModel::new(cfg, vec![true; g.num_entities()], seed).unwrap();
    (g, v, m)
}

fn all_train(g: &KnowledgeGraph) -> DatasetSplit {
    DatasetSplit {
        train: g.triples().to_vec(),
        valid: vec![],
        test: vec![],
        mode: SplitMode::Transductive,
        held_out: vec![],
    }
}

#[test]
fn encode_shape_and_determinism() {
    let (_, v, m) = setup(3, 8, 1);
    let s = v.tail_query(EntityId(0), "red apple", "links").unwrap();
    let a = m.encode(&s).unwrap();
    assert_eq!(a.vector.len(), 8);
    assert!(a.vector.iter().all(|x| x.is_finite()));
    let b = m.encode(&s).unwrap();
    assert_eq!(a, b);
    let with_target = s.clone().with_target(EntityId(2));
    assert_eq!(m.encode(&with_target).unwrap(), a);
}

#[test]
fn encode_rejects_bad_tokens() {
    let (_, v, m) = setup(3, 8, 1);
    let mut s = v.tail_query(EntityId(0), "", "links").unwrap();
    s.ids[2] = v.len() as u32;
    assert!(matches!(m.encode(&s), Err(Error::TokenIndex { .. })));
}

#[test]
fn mem_distribution_normalized() {
    let (_, v, m) = setup(5, 8, 2);
    for e in 0..5 {
        let s = v.tail_query(EntityId(e), "blue water", "links").unwrap();
        let p = m.mem_distribution(&s).unwrap();
        assert_eq!(p.len(), 5);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn single_entity_graph() {
    let mut b = GraphBuilder::new();
    b.add_triple("solo", "self", "solo");
    b.describe("solo", "alone");
    let g = b.build().unwrap();
    let v = build_vocabulary(&g, 1, 16).unwrap().expand_entities(1).unwrap();
    let m = EncoderModel::new(EncoderConfig::for_vocab(&v, 8, 1, 1).unwrap(), vec![true], 0).unwrap();
    let s = v.description_input(EntityId(0), "alone").unwrap();
    assert_eq!(m.mem_distribution(&s).unwrap(), vec![1.0]);
}

#[test]
fn masked_entities_get_zero() {
    let (_, v, mut m) = setup(4, 8, 3);
    m.mem_mask[2] = false;
    let s = v.tail_query(EntityId(0), "", "links").unwrap();
    let p = m.mem_distribution(&s).unwrap();
    assert_eq!(p[2], 0.0);
    assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn uniform_losses() {
    let (g, v, mut m) = setup(4, 8, 4);
    let off = m.config.entity_offset;
    m.params.tok.slice_mut(s![off.., ..]).fill(0.0);
    let batch: Vec<_> = g
        .entities()
        .map(|e| v.description_input(e, g.description(e)).unwrap())
        .collect();
    assert!((m.expansion_loss(&batch).unwrap() - 4f64.ln()).abs() < 1e-12);

    let (g, v, mut m) = setup(10, 8, 4);
    let off = m.config.entity_offset;
    m.params.tok.slice_mut(s![off.., ..]).fill(0.0);
    let queries = train::query_inputs(&g, &v, &all_train(&g)).unwrap();
    assert!((m.mem_loss(&queries).unwrap() - 10f64.ln()).abs() < 1e-12);
}

#[test]
fn perfect_fit_has_zero_loss() {
    let (g, v, mut m) = setup(3, 8, 5);
    let seq = v.description_input(EntityId(1), g.description(EntityId(1))).unwrap();
    let anchor = m.encode(&seq).unwrap().vector;
    let off = m.config.entity_offset;
    for (j, x) in anchor.iter().enumerate() {
        m.params.tok[[off + 1, j]] = 1e3 * x;
    }
    assert_eq!(m.expansion_loss(&[seq]).unwrap(), 0.0);
}

#[test]
fn loss_arguments_are_checked() {
    let (g, v, m) = setup(3, 8, 6);
    let no_target = v.tail_query(EntityId(0), "", "links").unwrap();
    assert!(m.mem_loss(std::slice::from_ref(&no_target)).is_err());
    assert!(m.expansion_loss(&[no_target.with_target(EntityId(1))]).is_err());
    let d = v.description_input(EntityId(0), g.description(EntityId(0))).unwrap();
    assert!(m.mem_loss(&[d]).is_err());
}

fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-6)
}

#[test]
fn mem_gradient_matches_finite_differences() {
    let (g, v, mut m) = setup(4, 8, 7);
    // unit-scale embeddings keep layer norm curvature small enough for central differences
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    m.params = Params::random(&m.config, &mut rng);
    m.params.tok *= 50.0;
    m.params.pos *= 50.0;
    let batch = train::query_inputs(&g, &v, &all_train(&g)).unwrap();
    let mut grad = Params::zeros(&m.config);
    m.mem_loss_grad(&batch, &mut grad).unwrap();
    let h = 1e-4;
    let n_tensors = m.params.tensors().len();
    for ti in 0..n_tensors {
        let len = m.params.tensors()[ti].1.len();
        let mut numeric = vec![0.0; len];
        for i in 0..len {
            let orig = m.params.tensors()[ti].1[i];
            m.params.tensors_mut()[ti].1[i] = orig + h;
            let lp = m.mem_loss(&batch).unwrap();
            m.params.tensors_mut()[ti].1[i] = orig - h;
            let lm = m.mem_loss(&batch).unwrap();
            m.params.tensors_mut()[ti].1[i] = orig;
            numeric[i] = (lp - lm) / (2.0 * h);
        }
        let (name, analytic) = &grad.tensors()[ti];
        let err = max_rel_err(analytic, &numeric);
        assert!(err < 1e-4, "{name}: relative error {err}");
    }
}

#[test]
fn expansion_fast_path_matches_generic_gradient() {
    let (g, v, mut m) = setup(5, 8, 8);
    let inputs = train::description_inputs(&m, &g, &v).unwrap();
    let mut grad = Params::zeros(&m.config);
    m.expansion_loss_grad(&inputs, &mut grad).unwrap();
    let before = m.params.clone();
    let cfg = TrainConfig {
        epochs: 1,
        lr: 1.0,
        ..TrainConfig::expansion_default(0)
    };
    train_expansion(&mut m, &g, &v, &cfg).unwrap();
    let off = m.config.entity_offset;
    let step = &before.tok.slice(s![off.., ..]) - &m.params.tok.slice(s![off.., ..]);
    let expected = grad.tok.slice(s![off.., ..]);
    for (a, b) in step.iter().zip(expected.iter()) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

#[test]
fn expansion_freezes_backbone_and_fits_toy() {
    let (g, v, mut m) = setup(3, 16, 9);
    let before = m.params.clone();
    let logs = train_expansion(&mut m, &g, &v, &TrainConfig::expansion_default(9)).unwrap();
    assert_eq!(logs.len(), 200);
    for w in logs.windows(2) {
        assert!(w[1].loss <= w[0].loss, "loss increased: {} -> {}", w[0].loss, w[1].loss);
    }
    let off = m.config.entity_offset;
    assert_eq!(before.tok.slice(s![..off, ..]), m.params.tok.slice(s![..off, ..]));
    assert_eq!(before.pos, m.params.pos);
    assert_eq!(before.blocks, m.params.blocks);
    assert_eq!(before.lnf_g, m.params.lnf_g);
    assert_eq!(before.lnf_b, m.params.lnf_b);

    for e in g.entities() {
        let s = v.description_input(e, g.description(e)).unwrap();
        let p = m.mem_distribution(&s).unwrap();
        let best = (0..p.len()).max_by(|&a, &b| p[a].total_cmp(&p[b])).unwrap();
        assert_eq!(best, e.index());
    }

    let (g2, v2, mut m2) = setup(3, 16, 9);
    train_expansion(&mut m2, &g2, &v2, &TrainConfig::expansion_default(9)).unwrap();
    assert_eq!(m, m2);
}

#[test]
fn mem_training_reduces_loss_and_is_deterministic() {
    let (g, v, m0) = setup(30, 16, 10);
    let split = all_train(&g);
    let queries = train::query_inputs(&g, &v, &split).unwrap();
    assert_eq!(queries.len(), 2 * split.train.len());
    let cfg = TrainConfig {
        epochs: 5,
        ..TrainConfig::mem_default(10)
    };
    let mut m = m0.clone();
    let logs = train_mem(&mut m, &g, &v, &split, &cfg).unwrap();
    for w in logs.windows(2) {
        assert!(w[1].loss < w[0].loss);
    }
    let mut again = m0.clone();
    train_mem(&mut again, &g, &v, &split, &cfg).unwrap();
    assert_eq!(m, again);
}

#[test]
fn divergence_is_reported() {
    let (g, v, mut m) = setup(5, 8, 11);
    let split = all_train(&g);
    let cfg = TrainConfig {
        lr: 1e12,
        epochs: 20,
        optimizer: Optimizer::Sgd,
        ..TrainConfig::mem_default(1)
    };
    match train_mem(&mut m, &g, &v, &split, &cfg) {
        Err(Error::Divergence { .. }) => {}
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn weight_tying_and_permutation() {
    let (g, v, mut m) = setup(4, 8, 12);
    let s = v.description_input(EntityId(0), g.description(EntityId(0))).unwrap();
    let p = m.mem_distribution(&s).unwrap();

    // tying: editing the token embedding edits the MEM head
    let off = m.config.entity_offset;
    let anchor = m.encode(&s).unwrap().vector;
    for (j, x) in anchor.iter().enumerate() {
        m.params.tok[[off + 3, j]] += x;
    }
    assert_eq!(m.entity_row(EntityId(3)), m.params.tok.row(off + 3));
    let q = m.mem_distribution(&s).unwrap();
    assert!(q[3] > p[3]);

    // permuting MEM rows permutes the distribution
    let perm = [2usize, 0, 3, 1];
    let mut permuted = m.clone();
    for (e, &pe) in perm.iter().enumerate() {
        permuted
            .params
            .tok
            .row_mut(off + pe)
            .assign(&m.params.tok.row(off + e));
    }
    let r = permuted.mem_distribution(&s).unwrap();
    for (e, &pe) in perm.iter().enumerate() {
        assert!((r[pe] - q[e]).abs() < 1e-15);
    }
}

#[test]
fn checkpoint_round_trip() {
    let (_, _, mut m) = setup(4, 8, 13);
    m.mem_mask[1] = false;
    let mut buf = Vec::new();
    m.save(&mut buf).unwrap();
    let back = EncoderModel::load(&buf[..]).unwrap();
    assert_eq!(m, back);
    let mut again = Vec::new();
    back.save(&mut again).unwrap();
    assert_eq!(buf, again);
    assert!(EncoderModel::load(&buf[..buf.len() - 3]).is_err());
    assert!(EncoderModel::load(&b"NOPE\n"[..]).is_err());
}
