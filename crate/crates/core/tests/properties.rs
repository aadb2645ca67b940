use newscap_core::autograd::{Graph, Tensor};
use newscap_core::corpus::{build_vocab, detokenize, split, tokenize, Vocabulary, UNK};
use newscap_core::decoder::mix;
use newscap_core::metrics::{bleu4, lcs_len};
use newscap_core::nee::{nep_probability, sample_negatives, text_vector, JointEmbeddingTable, KnowledgeBase};
use newscap_core::taxonomy::{class_distribution, ComponentVector};
use proptest::prelude::*;

fn strings(xs: &[&str]) -> Vec<String> {
    xs.iter().map(|s| s.to_string()).collect()
}

/// Longest common subsequence by enumerating every subsequence of `a`.
fn brute_lcs(a: &[String], b: &[String]) -> usize {
    let is_subseq = |sub: &[&String]| {
        let mut it = b.iter();
        sub.iter().all(|x| it.any(|y| y == *x))
    };
    (0u32..1 << a.len())
        .filter_map(|mask| {
            let sub: Vec<&String> = a.iter().enumerate().filter(|(i, _)| mask >> i & 1 == 1).map(|(_, x)| x).collect();
            is_subseq(&sub).then_some(sub.len())
        })
        .max()
        .unwrap_or(0)
}

fn table(words: &[String], entities: &[String], dim: usize, values: &[f64]) -> JointEmbeddingTable {
    let mut t = JointEmbeddingTable::new(words.to_vec(), entities.to_vec(), dim).unwrap();
    let mut it = values.iter().cycle();
    for v in t.word_vectors.iter_mut().chain(t.entity_vectors.iter_mut()).chain(t.nep_weight.iter_mut()) {
        *v = *it.next().unwrap();
    }
    t.reindex().unwrap();
    t
}

proptest! {
    #[test]
    fn tokenization_is_stable_under_detokenize(words in prop::collection::vec("[A-Za-z0-9.,!?]{1,6}", 0..12)) {
        let tokens = tokenize(&words.join(" "));
        prop_assert_eq!(tokenize(&detokenize(&tokens)), tokens);
    }

    #[test]
    fn vocabulary_round_trips_up_to_unknown(
        known in prop::collection::btree_set("[a-e]{1,2}", 1..10),
        text in prop::collection::vec("[a-f]{1,2}", 50),
    ) {
        let corpus = [known.iter().cloned().collect::<Vec<_>>()];
        let vocab = build_vocab(corpus.iter().map(Vec::as_slice), 1).unwrap();
        let decoded = vocab.decode(&vocab.encode(&text)).unwrap();
        for (d, t) in decoded.iter().zip(&text) {
            if known.contains(t) {
                prop_assert_eq!(d, t);
            } else {
                prop_assert_eq!(d.as_str(), UNK);
                prop_assert_eq!(vocab.id(t), None);
            }
        }
        prop_assert!(vocab.encode(&text).iter().all(|&i| i != Vocabulary::PAD_ID));
    }

    #[test]
    fn split_is_a_partition(n in 0usize..120, w in (0u32..10, 0u32..10, 1u32..10), seed in any::<u64>()) {
        let total = f64::from(w.0 + w.1 + w.2);
        let ratios = [f64::from(w.0) / total, f64::from(w.1) / total, f64::from(w.2) / total];
        let items: Vec<usize> = (0..n).collect();
        let (a, b, c) = split(&items, ratios, seed).unwrap();
        let mut all: Vec<usize> = a.iter().chain(&b).chain(&c).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(&all, &items);
        prop_assert_eq!(split(&items, ratios, seed).unwrap(), (a, b, c));
    }

    #[test]
    fn softmax_rows_sum_to_one(values in prop::collection::vec(-30.0f64..30.0, 12)) {
        let mut g = Graph::new();
        let x = g.constant(&Tensor::new(vec![3, 4], values).unwrap());
        let s = g.softmax(x, 1).unwrap();
        for row in g.value(s).chunks(4) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|p| *p >= 0.0));
        }
    }

    #[test]
    fn mixing_is_linear_in_alpha(
        outs in prop::collection::vec(-3.0f64..3.0, 30),
        a in prop::array::uniform5(0.0f64..1.0),
        b in prop::array::uniform5(0.0f64..1.0),
        lambda in 0.0f64..1.0,
    ) {
        let mut g = Graph::new();
        let us: Vec<_> = outs.chunks(6).map(|c| g.constant(&Tensor::new(vec![2, 3], c.to_vec()).unwrap())).collect();
        let combined: [f64; 5] = std::array::from_fn(|i| lambda * a[i] + (1.0 - lambda) * b[i]);
        let ma = mix(&mut g, &us, &ComponentVector(a)).unwrap();
        let mb = mix(&mut g, &us, &ComponentVector(b)).unwrap();
        let mc = mix(&mut g, &us, &ComponentVector(combined)).unwrap();
        for ((x, y), z) in g.value(ma).iter().zip(g.value(mb)).zip(g.value(mc)) {
            prop_assert!((lambda * x + (1.0 - lambda) * y - z).abs() < 1e-9);
        }
    }

    #[test]
    fn lcs_matches_subsequence_enumeration(
        a in prop::collection::vec("[abc]", 0..=8),
        b in prop::collection::vec("[abc]", 0..=8),
    ) {
        prop_assert_eq!(lcs_len(&a, &b), brute_lcs(&a, &b));
        prop_assert_eq!(lcs_len(&a, &b), lcs_len(&b, &a));
    }

    #[test]
    fn candidate_probabilities_sum_to_one(values in prop::collection::vec(-1.0f64..1.0, 40), pick in prop::collection::vec(0usize..5, 1..6)) {
        let words = strings(&["w0", "w1", "w2", "w3", "w4"]);
        let entities = strings(&["E0", "E1", "E2", "E3", "E4", "E5"]);
        let t = table(&words, &entities, 3, &values);
        let context: Vec<String> = pick.iter().map(|&i| words[i].clone()).collect();
        let total: f64 = entities
            .iter()
            .map(|e| {
                let negatives: Vec<String> = entities.iter().filter(|x| *x != e).cloned().collect();
                nep_probability(e, &context, &negatives, &t).unwrap()
            })
            .sum();
        prop_assert!((total - 1.0).abs() < 1e-9, "{total}");
    }

    #[test]
    fn negatives_avoid_the_context_entities(n in 3usize..40, k in 1usize..3, seed in any::<u64>()) {
        let entities: Vec<String> = (0..n).map(|i| format!("E{i}")).collect();
        let kb = KnowledgeBase { entities: entities.clone(), ..Default::default() };
        let excluded = &entities[..k.min(n - 1)];
        let n_neg = n - excluded.len();
        let neg = sample_negatives(&kb, excluded, n_neg, seed).unwrap();
        prop_assert_eq!(neg.len(), n_neg);
        prop_assert!(neg.iter().all(|e| !excluded.contains(e)));
        let mut distinct = neg.clone();
        distinct.sort();
        distinct.dedup();
        prop_assert_eq!(distinct.len(), n_neg);
        prop_assert!(sample_negatives(&kb, excluded, n_neg + 1, seed).is_err());
    }

    #[test]
    fn text_vector_ignores_token_order(values in prop::collection::vec(-1.0f64..1.0, 40), order in Just(()).prop_perturb(|_, mut rng| {
        let mut idx: Vec<usize> = (0..6).collect();
        for i in (1..idx.len()).rev() {
            idx.swap(i, rng.random_range(0..=i));
        }
        idx
    })) {
        let words = strings(&["w0", "w1", "w2", "w3", "w4"]);
        let t = table(&words, &strings(&["E0"]), 4, &values);
        let tokens = strings(&["w0", "w3", "oov", "w3", "w1", "w4"]);
        let shuffled: Vec<String> = order.iter().map(|&i| tokens[i].clone()).collect();
        let a = text_vector(&tokens, &t).unwrap();
        let b = text_vector(&shuffled, &t).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn class_shares_sum_to_one_hundred(flags in prop::collection::vec(prop::array::uniform5(any::<bool>()), 1..60)) {
        let vectors: Vec<ComponentVector> = flags.into_iter().map(ComponentVector::from_flags).collect();
        let d = class_distribution(&vectors).unwrap();
        prop_assert_eq!(d.classes.len(), 32);
        prop_assert!((d.classes.iter().map(|c| c.percent).sum::<f64>() - 100.0).abs() < 1e-9);
        prop_assert_eq!(d.classes.iter().map(|c| c.count).sum::<usize>(), vectors.len());
    }

    #[test]
    fn self_bleu_is_one(sentences in prop::collection::vec(prop::collection::vec("[a-h]{1,3}", 4..10), 1..5)) {
        let refs: Vec<Vec<Vec<String>>> = sentences.iter().map(|s| vec![s.clone()]).collect();
        prop_assert!((bleu4(&sentences, &refs).unwrap() - 1.0).abs() < 1e-12);
    }
}
