mod common;

use std::collections::BTreeMap;

use graphreg::dataset::{balance, generate_synthetic, split_indices, AugmentParams, Origin, SyntheticConfig};
use graphreg::diffcore::{Container, Tensor};
use graphreg::graph::{cosine_similarity, graph_from_container, graph_stats, graph_to_container};
use graphreg::metrics::{confusion_matrix, panel_from_matrix, ConfusionMatrix};
use graphreg::rng::{stream, Stream};
use graphreg::train::{neighbor_loss, sample_epoch, Distance};
use proptest::prelude::*;

fn matrix(classes: usize) -> impl Strategy<Value = Vec<Vec<u64>>> {
    prop::collection::vec(prop::collection::vec(0u64..50, classes), classes)
        .prop_filter("non-empty", |m| m.iter().flatten().sum::<u64>() > 0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn panel_rates_are_complementary(m in (2usize..6).prop_flat_map(matrix)) {
        let cm = ConfusionMatrix::from_counts(m).unwrap();
        for p in panel_from_matrix(&cm).unwrap() {
            prop_assert!((p.acc + p.er - 1.0).abs() < 1e-12);
            prop_assert!((p.recall + p.miss_rate - 1.0).abs() < 1e-12);
            prop_assert!((p.specificity + p.fall_out - 1.0).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&p.f1));
        }
    }

    #[test]
    fn confusion_counts_every_prediction(pairs in prop::collection::vec((0usize..4, 0usize..4), 1..200)) {
        let (preds, labels): (Vec<_>, Vec<_>) = pairs.iter().copied().unzip();
        let cm = confusion_matrix(&preds, &labels, 4).unwrap();
        prop_assert_eq!(cm.total(), pairs.len() as u64);
        let hits = pairs.iter().filter(|(p, l)| p == l).count();
        prop_assert!((cm.accuracy() - hits as f64 / pairs.len() as f64).abs() < 1e-12);
    }

    #[test]
    fn cosine_is_bounded_and_symmetric(
        a in prop::collection::vec(-5.0f64..5.0, 4),
        b in prop::collection::vec(-5.0f64..5.0, 4),
    ) {
        prop_assume!(a.iter().any(|v| v.abs() > 1e-3) && b.iter().any(|v| v.abs() > 1e-3));
        let s = cosine_similarity(&a, &b).unwrap();
        prop_assert!((-1.0..=1.0).contains(&s));
        prop_assert_eq!(s, cosine_similarity(&b, &a).unwrap());
    }

    #[test]
    fn squared_l2_neighbor_loss_is_symmetric_and_nonnegative(
        a in prop::collection::vec(-3.0f64..3.0, 5),
        b in prop::collection::vec(-3.0f64..3.0, 5),
        w in 0.0f64..1.0,
    ) {
        let ab = neighbor_loss(&a, std::slice::from_ref(&b), &[w], Distance::SquaredL2).unwrap();
        let ba = neighbor_loss(&b, std::slice::from_ref(&a), &[w], Distance::SquaredL2).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert_eq!(neighbor_loss(&a, std::slice::from_ref(&a), &[w], Distance::SquaredL2).unwrap(), 0.0);
    }

    #[test]
    fn tensor_container_roundtrip(data in prop::collection::vec(-1e6f64..1e6, 1..40)) {
        let t = Tensor::new(vec![data.len()], data).unwrap();
        let mut c = Container::new("test", serde_json::json!({"k": 1})).unwrap();
        c.push("t", t.clone());
        let back = Container::from_bytes(&c.to_bytes().unwrap()).unwrap();
        prop_assert_eq!(back.tensor("t").unwrap(), &t);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn graph_structure(
        seed in 0u64..1000,
        sizes in prop::collection::vec(2usize..12, 1..4),
        k in 1usize..4,
        threshold in 0.0f64..0.95,
    ) {
        let (g, tables, assigns) = common::random_graph(seed, &sizes, 4, k, threshold);
        g.validate().unwrap();
        let mut emb_of = BTreeMap::new();
        let mut cluster_of = BTreeMap::new();
        for (t, a) in tables.iter().zip(&assigns) {
            for (r, &img) in t.indices().iter().enumerate() {
                emb_of.insert(img, t.row(r).to_vec());
                cluster_of.insert(img, a.labels[r]);
            }
        }
        for e in &g.edges {
            let (u, v) = (&g.nodes[e.u], &g.nodes[e.v]);
            prop_assert!(e.u < e.v);
            if let (Some(iu), Some(iv)) = (u.image, v.image) {
                prop_assert!(e.weight >= threshold);
                prop_assert_eq!(u.class, v.class);
                prop_assert_eq!(cluster_of[&iu], cluster_of[&iv]);
                let s = cosine_similarity(&emb_of[&iu], &emb_of[&iv]).unwrap();
                prop_assert!((s - e.weight).abs() < 1e-12);
            }
        }
        // every retained image has a same-cluster neighbor
        let adj = g.adjacency();
        for n in g.seed_nodes() {
            prop_assert!(adj[n.id].iter().any(|&(v, _)| !g.nodes[v].is_mean()));
        }
        let stats = graph_stats(&g, 5);
        prop_assert_eq!(stats.snc + stats.filtered, sizes.iter().sum::<usize>());
        let back = graph_from_container(graph_to_container(&g).unwrap()).unwrap();
        prop_assert_eq!(back, g);
    }

    #[test]
    fn sampler_covers_seeds(seed in 0u64..1000, sizes in prop::collection::vec(3usize..10, 1..3), n in 1usize..7) {
        let (g, _, _) = common::random_graph(seed, &sizes, 3, 2, 0.3);
        let map = g.node_image_map();
        let mut rng = stream(seed, Stream::Sampler);
        let mut expect: Vec<usize> = g.seed_nodes().map(|s| s.id).collect();
        expect.sort();
        for _ in 0..3 {
            let batches = sample_epoch(&g, &map, n, &mut rng);
            let mut got: Vec<usize> = batches.iter().map(|b| b.seed_node.unwrap()).collect();
            got.sort();
            prop_assert_eq!(&got, &expect);
            for b in &batches {
                prop_assert!(b.neighbor_images.len() <= n);
                prop_assert!(b.weights.windows(2).all(|w| w[0] >= w[1]));
                prop_assert!(b.neighbor_nodes.iter().all(|&v| g.nodes[v].class == b.label));
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn balance_equalizes_and_traces_sources(
        counts in prop::collection::vec(1usize..12, 2..4),
        seed in 0u64..100,
    ) {
        let cfg = SyntheticConfig { classes: counts.len(), counts: counts.clone(), side: 8, seed };
        let ds = generate_synthetic(&cfg).unwrap();
        let b = balance(&ds, &AugmentParams::default(), seed).unwrap();
        let max = *counts.iter().max().unwrap();
        prop_assert!(b.counts().iter().all(|&c| c == max));
        let by_id: BTreeMap<usize, _> = ds.images().iter().map(|i| (i.id, i)).collect();
        for img in b.images().iter().filter(|i| i.origin == Origin::Augmented) {
            let src = by_id[&img.source_id.unwrap()];
            prop_assert_eq!(src.label, img.label);
            prop_assert_eq!(src.origin, Origin::Original);
        }
    }

    #[test]
    fn split_partitions_every_class(
        counts in prop::collection::vec(2usize..15, 2..4),
        fraction in 0.1f64..0.9,
        seed in 0u64..100,
    ) {
        let cfg = SyntheticConfig { classes: counts.len(), counts: counts.clone(), side: 8, seed };
        let ds = generate_synthetic(&cfg).unwrap();
        let (train, test) = split_indices(&ds, fraction, seed).unwrap();
        let mut all: Vec<usize> = train.iter().chain(&test).copied().collect();
        all.sort();
        prop_assert_eq!(all, ds.all_indices());
        for c in 0..counts.len() {
            prop_assert!(train.iter().any(|&i| ds.get(i).label == c));
            prop_assert!(test.iter().any(|&i| ds.get(i).label == c));
        }
    }
}
