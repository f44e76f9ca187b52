use std::collections::HashSet;

use proptest::prelude::*;
use proto_align::synth::{
    generate_corpus, load_corpus, parse_sentence, split, write_corpus, Meaning, Parsed, SceneSpec,
    CHANNELS, GRID, IMAGE_LEN, IMAGE_SIZE,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn same_seed_same_corpus() {
    let a = generate_corpus(40, 9, 0.1).unwrap();
    let b = generate_corpus(40, 9, 0.1).unwrap();
    assert_eq!(a, b);
    let c = generate_corpus(40, 10, 0.1).unwrap();
    assert_ne!(a, c);
}

#[test]
fn records_do_not_depend_on_corpus_size() {
    let short = generate_corpus(10, 4, 0.1).unwrap();
    let long = generate_corpus(30, 4, 0.1).unwrap();
    assert_eq!(short[..], long[..10]);
}

#[test]
fn jsonl_round_trip() {
    let pairs = generate_corpus(25, 2, 0.1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("corpus.jsonl");
    write_corpus(&path, &pairs).unwrap();
    assert_eq!(load_corpus(&path).unwrap(), pairs);
}

#[test]
fn malformed_records_are_rejected_with_their_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.jsonl");
    let mut pairs = generate_corpus(3, 2, 0.1).unwrap();
    pairs[1].image.pop();
    write_corpus(&path, &pairs).unwrap();
    let err = load_corpus(&path).unwrap_err().to_string();
    assert!(err.contains('1'), "{err}");

    std::fs::write(&path, "{not json\n").unwrap();
    assert!(load_corpus(&path).is_err());
    std::fs::write(&path, "\n").unwrap();
    assert!(load_corpus(&path).is_err());
}

#[test]
fn noise_seed_changes_pixels_but_not_text() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let spec = SceneSpec::sample(&mut rng, 0.5);
    let mut other = spec.clone();
    other.noise_seed = spec.noise_seed.wrapping_add(1);
    let a = spec.render(0).canonical();
    let b = other.render(0).canonical();
    assert_eq!(a.sentences, b.sentences);
    assert_eq!(a.gt_alignment, b.gt_alignment);
    assert_eq!(a.labels, b.labels);
    assert_ne!(a.image, b.image);
}

#[test]
fn distractor_rate_is_respected() {
    let pairs = generate_corpus(4000, 5, 0.25).unwrap();
    let with = pairs
        .iter()
        .filter(|p| {
            p.sentences
                .iter()
                .any(|s| parse_sentence(s) == Some(Parsed::Distractor))
        })
        .count();
    let frac = with as f64 / pairs.len() as f64;
    assert!((frac - 0.25).abs() < 0.02, "{frac}");
    let none = generate_corpus(500, 5, 0.0).unwrap();
    assert!(none
        .iter()
        .all(|p| p.gt_alignment.iter().all(|a| !a.is_empty())));
    assert!(generate_corpus(5, 5, 1.0).is_err());
    assert!(generate_corpus(0, 5, 0.1).is_err());
}

#[test]
fn every_meaning_occurs_in_a_modest_corpus() {
    let pairs = generate_corpus(1000, 0, 0.1).unwrap();
    let seen: HashSet<Meaning> = pairs
        .iter()
        .flat_map(|p| p.sentences.iter())
        .filter_map(|s| match parse_sentence(s) {
            Some(Parsed::Finding(m, _)) => Some(m),
            _ => None,
        })
        .collect();
    assert_eq!(seen.len(), Meaning::all().len());
}

#[test]
fn split_holds_out_the_tail() {
    let pairs = generate_corpus(10, 1, 0.1).unwrap();
    let (train, test) = split(&pairs, 0.2);
    assert_eq!(train.len(), 8);
    assert_eq!(test[0].id, 8);
    let (train, test) = split(&pairs[..1], 0.5);
    assert_eq!((train.len(), test.len()), (1, 0));
}

fn brightness(image: &[f64], region: usize) -> f64 {
    let cell = IMAGE_SIZE / GRID;
    let (r0, c0) = ((region / GRID) * cell, (region % GRID) * cell);
    let mut s = 0.0;
    for y in r0..r0 + cell {
        for x in c0..c0 + cell {
            s += image[(y * IMAGE_SIZE + x) * CHANNELS];
        }
    }
    s
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn records_agree_with_their_parse(seed in any::<u64>(), i in 0usize..8) {
        let pairs = generate_corpus(8, seed, 0.3).unwrap();
        let p = &pairs[i];
        prop_assert_eq!(p.image.len(), IMAGE_LEN);
        prop_assert!(p.image.iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert_eq!(p.sentences.len(), p.gt_alignment.len());
        let mut labels = vec![0u8; 4];
        let mut quads = HashSet::new();
        let mut lit = HashSet::new();
        for (s, a) in p.sentences.iter().zip(&p.gt_alignment) {
            match parse_sentence(s) {
                Some(Parsed::Finding(m, _)) => {
                    prop_assert_eq!(a, &m.quadrant.regions());
                    prop_assert!(quads.insert(m.quadrant));
                    labels[m.shape.index()] = 1;
                    lit.extend(a.iter().copied());
                }
                Some(Parsed::Distractor) => prop_assert!(a.is_empty()),
                None => prop_assert!(false, "unparseable sentence {:?}", s),
            }
        }
        prop_assert!(!quads.is_empty() && quads.len() <= 4);
        prop_assert_eq!(&p.labels, &labels);
        // Quadrants without a finding hold only pixel noise.
        let best_empty = (0..GRID * GRID).filter(|r| !lit.contains(r)).map(|r| brightness(&p.image, r)).fold(0.0, f64::max);
        let best_lit = lit.iter().map(|&r| brightness(&p.image, r)).fold(0.0, f64::max);
        prop_assert!(best_lit > best_empty);
    }

    #[test]
    fn canonical_order_is_a_sorted_permutation(seed in any::<u64>()) {
        let p = &generate_corpus(1, seed, 0.5).unwrap()[0];
        let c = p.canonical();
        let mut before: Vec<_> = p.sentences.iter().cloned().zip(p.gt_alignment.iter().cloned()).collect();
        before.sort();
        let after: Vec<_> = c.sentences.iter().cloned().zip(c.gt_alignment.iter().cloned()).collect();
        prop_assert_eq!(before, after);
        prop_assert_eq!(c.canonical(), c);
    }
}
