use approx::assert_relative_eq;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use ffsv_core::backend::{self, cosine_score, plda_train, Embedding, PldaConfig};
use ffsv_core::embed_net::{Model, NetworkConfig};
use ffsv_core::eval::{self, DcfParams, EmbeddingIndex, Fusion, Label, ScoreRecord, Scorer, Trial};
use ffsv_core::features::{FeatureConfig, FeatureMatrix};
use ffsv_core::synth::{self, CorpusConfig};
use ffsv_core::FeatureKind;

/// Score sets with at least one trial of each class.
fn scored() -> impl Strategy<Value = Vec<(f64, bool)>> {
    (
        prop::collection::vec(-5.0f64..5.0, 1..30),
        prop::collection::vec(-5.0f64..5.0, 1..30),
    )
        .prop_map(|(t, n)| {
            t.into_iter()
                .map(|s| (s, true))
                .chain(n.into_iter().map(|s| (s, false)))
                .collect()
        })
}

/// Brute force: the miss / false-alarm pair at every threshold, EER where
/// the two rates cross.
fn eer_oracle(s: &[(f64, bool)]) -> f64 {
    let nt = s.iter().filter(|x| x.1).count() as f64;
    let nn = s.len() as f64 - nt;
    let mut th: Vec<f64> = s.iter().map(|x| x.0).collect();
    th.sort_by(f64::total_cmp);
    th.dedup();
    let mut pts = vec![(0.0, 1.0)];
    for &t in &th {
        let miss = s.iter().filter(|x| x.1 && x.0 < t).count() as f64 / nt;
        let fa = s.iter().filter(|x| !x.1 && x.0 >= t).count() as f64 / nn;
        pts.push((miss, fa));
    }
    pts.push((1.0, 0.0));
    for w in pts.windows(2) {
        let ((m0, f0), (m1, f1)) = (w[0], w[1]);
        if m0 <= f0 && m1 >= f1 {
            let denom = (m1 - m0) - (f1 - f0);
            if denom == 0.0 {
                return m0;
            }
            return (f0 * m1 - m0 * f1) / denom;
        }
    }
    unreachable!("rates always cross")
}

proptest! {
    #[test]
    fn eer_matches_brute_force(s in scored()) {
        assert_relative_eq!(eval::compute_eer(&s).unwrap(), eer_oracle(&s), epsilon = 1e-12);
    }

    #[test]
    fn eer_invariant_under_monotone_maps(s in scored(), a in 0.1f64..10.0, b in -3.0f64..3.0) {
        let base = eval::compute_eer(&s).unwrap();
        let affine: Vec<_> = s.iter().map(|&(x, l)| (a * x + b, l)).collect();
        let squashed: Vec<_> = s.iter().map(|&(x, l)| (x.tanh(), l)).collect();
        prop_assert!((eval::compute_eer(&affine).unwrap() - base).abs() < 1e-12);
        prop_assert!((eval::compute_eer(&squashed).unwrap() - base).abs() < 1e-12);
    }

    #[test]
    fn metrics_are_bounded(s in scored()) {
        let m = eval::compute_metrics(&s, &DcfParams::default()).unwrap();
        prop_assert!((0.0..=1.0).contains(&m.eer));
        prop_assert!((0.0..=1.0).contains(&m.min_dcf));
    }

    #[test]
    fn flipping_labels_and_scores_keeps_eer(s in scored()) {
        let flipped: Vec<_> = s.iter().map(|&(x, l)| (-x, !l)).collect();
        let (a, b) = (eval::compute_eer(&s).unwrap(), eval::compute_eer(&flipped).unwrap());
        prop_assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }

    #[test]
    fn cosine_symmetric_scale_free_bounded(
        a in prop::collection::vec(-3.0f64..3.0, 6),
        b in prop::collection::vec(-3.0f64..3.0, 6),
        k in 0.01f64..100.0,
    ) {
        prop_assume!(a.iter().any(|x| x.abs() > 1e-3) && b.iter().any(|x| x.abs() > 1e-3));
        let s = cosine_score(&a, &b).unwrap();
        let scaled: Vec<f64> = a.iter().map(|x| x * k).collect();
        prop_assert!((s - cosine_score(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert!((s - cosine_score(&scaled, &b).unwrap()).abs() < 1e-12);
        prop_assert!(s.abs() <= 1.0 + 1e-12);
    }

    #[test]
    fn trial_and_score_files_round_trip(
        n in 1usize..12,
        labels in prop::collection::vec(prop::bool::ANY, 12),
        scores in prop::collection::vec(-1.0e3f64..1.0e3, 12),
    ) {
        let trials: Vec<Trial> = (0..n)
            .map(|i| Trial {
                enroll_id: format!("e{}", i % 3),
                test_ids: (0..1 + i % 4).map(|k| format!("t{i}_{k}")).collect(),
                label: if labels[i] { Label::Target } else { Label::Nontarget },
            })
            .collect();
        prop_assert_eq!(&eval::parse_trials(&eval::format_trials(&trials)).unwrap(), &trials);
        let recs: Vec<ScoreRecord> = trials
            .iter()
            .zip(&scores)
            .map(|(t, &s)| ScoreRecord { enroll_id: t.enroll_id.clone(), test_ids: t.test_ids.clone(), score: s })
            .collect();
        let back = eval::parse_scores(&eval::format_scores(&recs)).unwrap();
        prop_assert_eq!(back.len(), recs.len());
        for (x, y) in back.iter().zip(&recs) {
            prop_assert_eq!(&x.test_ids, &y.test_ids);
            prop_assert!((x.score - y.score).abs() <= 5e-7);
        }
    }

    #[test]
    fn embedding_file_round_trips_at_f32(
        vs in prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 5), 1..8),
    ) {
        let embs: Vec<Embedding> = vs
            .iter()
            .enumerate()
            .map(|(i, v)| Embedding::new(format!("u{i}/ch{}", i % 2), v.clone()))
            .collect();
        let mut buf = Vec::new();
        backend::write_embeddings(&mut buf, &embs).unwrap();
        let back = backend::read_embeddings(&mut buf.as_slice()).unwrap();
        prop_assert_eq!(back.len(), embs.len());
        for (a, b) in back.iter().zip(&embs) {
            prop_assert_eq!(&a.id, &b.id);
            for (x, y) in a.vector.iter().zip(&b.vector) {
                prop_assert_eq!(*x, *y as f32 as f64);
            }
        }
    }

    #[test]
    fn fusion_modes_agree_on_mono_items(
        vs in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 4), 4),
    ) {
        let ids = ["e", "t1", "t2", "t3"];
        let index = EmbeddingIndex::new(ids.iter().zip(&vs).map(|(i, v)| (*i, v.as_slice())));
        let trials: Vec<Trial> = ["t1", "t2", "t3"]
            .iter()
            .map(|t| Trial { enroll_id: "e".into(), test_ids: vec![t.to_string()], label: Label::Unknown })
            .collect();
        prop_assume!(vs.iter().all(|v| v.iter().any(|x| x.abs() > 1e-3)));
        let multi = eval::score_trials(&trials, &index, &Scorer::Cosine, Fusion::Multi, None).unwrap();
        let single = eval::score_trials(&trials, &index, &Scorer::Cosine, Fusion::Single(0), None).unwrap();
        prop_assert_eq!(multi, single);
    }
}

#[test]
fn fusion_names_round_trip() {
    for f in [Fusion::Multi, Fusion::Single(0), Fusion::Single(3)] {
        assert_eq!(f.to_string().parse::<Fusion>().unwrap(), f);
    }
    assert!("single=x".parse::<Fusion>().is_err());
}

#[test]
fn plda_scores_are_symmetric() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut data = Vec::new();
    for s in 0..30 {
        let centre: Vec<f64> = (0..4)
            .map(|_| 2.0 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
            .collect();
        for _ in 0..5 {
            let x: Vec<f64> = centre
                .iter()
                .map(|c| c + <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
                .collect();
            data.push((format!("s{s}"), x));
        }
    }
    let m = plda_train(&data, &PldaConfig::default()).unwrap().model;
    for i in 0..20 {
        let (a, b) = (&data[i].1, &data[(i * 7 + 3) % data.len()].1);
        assert_relative_eq!(m.score(a, b).unwrap(), m.score(b, a).unwrap(), max_relative = 1e-10);
    }
    let same = m.score(&data[0].1, &data[1].1).unwrap();
    let diff = m.score(&data[0].1, &data[100].1).unwrap();
    assert!(same > diff, "same-speaker {same} <= different-speaker {diff}");
}

#[test]
fn model_survives_save_and_load() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cfg = NetworkConfig::resnet34(5)
        .with_width(0.125)
        .with_blocks([1, 1, 1, 1])
        .with_embedding_dim(6);
    let model = Model::new(cfg, &mut rng).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.bin");
    model.save(&p).unwrap();
    let back = Model::load(&p).unwrap();
    let corpus = synth::generate_corpus(&CorpusConfig {
        seed: 1,
        n_speakers: 1,
        utts_per_speaker: 1,
        ..CorpusConfig::default()
    })
    .unwrap();
    let f: FeatureMatrix = FeatureConfig::default().extract(&corpus[0].waveform).unwrap();
    assert_eq!(f.kind, FeatureKind::LogMel);
    // Weights are stored at f32 precision; a second save is byte-identical.
    for (a, b) in model.embed(&f).unwrap().iter().zip(back.embed(&f).unwrap()) {
        assert_relative_eq!(*a, b, max_relative = 1e-4);
    }
    let p2 = dir.path().join("m2.bin");
    back.save(&p2).unwrap();
    assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&p2).unwrap());
}
