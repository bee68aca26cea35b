use hiergnn_core::corpus::{
    example_from_text, generate_synthetic, hash_features, split_sentences, tokenize, SynthSpec, Vocabulary, EOS,
    UNK,
};
use hiergnn_core::metrics::fusion_sources;

#[test]
fn news_paragraph_matches_hand_split() {
    let got = split_sentences(include_str!("fixtures/news.txt"));
    let want = [
        "Heavy rain swept across the region on Tuesday.",
        "Dr. Alana Reyes, who leads the county flood office, said crews worked overnight.",
        "\"We expected worse,\" she added.",
        "Mr. Chen's bakery on Main St. reopened by noon!",
        "Officials in the U.S. capital sent extra pumps, e.g. two trailer units.",
        "Will the river crest again?",
        "Forecasters say it is unlikely.",
    ];
    assert_eq!(got, want);
}

#[test]
fn short_texts_split_as_expected() {
    assert_eq!(split_sentences("A cat sat. It slept."), ["A cat sat.", "It slept."]);
    assert_eq!(split_sentences("Dr. Smith left."), ["Dr. Smith left."]);
    assert!(split_sentences("   ").is_empty());
}

#[test]
fn default_corpus_shape() {
    let docs = generate_synthetic(&SynthSpec::default(), 20).unwrap();
    assert_eq!(docs.len(), 20);
    for d in &docs {
        assert_eq!(d.sentences.len(), 8);
        let tree = d.true_tree.as_ref().unwrap();
        assert_eq!(tree.iter().filter(|p| p.is_none()).count(), 1);
        assert_eq!(d.connector_indices().unwrap().len(), 2);
        assert_eq!(*d.summary.last().unwrap(), EOS);
        let support: Vec<usize> = d.tokens().collect();
        assert!(d.summary[..d.summary.len() - 1].iter().all(|t| support.contains(t)));
    }
}

#[test]
fn summaries_need_several_sentences() {
    let docs = generate_synthetic(&SynthSpec::default(), 50).unwrap();
    for d in &docs {
        let words = |ids: &[usize]| -> Vec<String> { ids.iter().map(|i| format!("w{i}")).collect() };
        let article: Vec<Vec<String>> = d.sentences.iter().map(|s| words(s)).collect();
        let summary = words(&d.summary[..d.summary.len() - 1]);
        assert!(fusion_sources(&article, &summary) >= 2, "{}", d.doc_id);
    }
}

#[test]
fn seeds_control_the_corpus() {
    let spec = SynthSpec::default();
    assert_eq!(generate_synthetic(&spec, 5).unwrap(), generate_synthetic(&spec, 5).unwrap());
    let other = SynthSpec { seed: 8, ..spec.clone() };
    assert_ne!(generate_synthetic(&spec, 5).unwrap(), generate_synthetic(&other, 5).unwrap());
}

#[test]
fn text_examples_use_the_vocabulary() {
    let texts = [tokenize("the cat sat on the mat"), tokenize("the dog ran")];
    let vocab = Vocabulary::build(texts.iter().map(Vec::as_slice), 100);
    let ex = example_from_text("x", "The cat sat. A zebra ran.", "The cat ran.", &vocab);
    assert_eq!(ex.sentences.len(), 2);
    assert_eq!(ex.sentences[1][1], UNK);
    assert_eq!(*ex.summary.last().unwrap(), EOS);
    assert_eq!(vocab.word(vocab.id("cat")), "cat");
}

#[test]
fn hashing_is_a_normalized_bag() {
    let ab = hash_features(&tokenize("a b"), 16, 3);
    assert_eq!(ab, hash_features(&tokenize("b a"), 16, 3));
    assert!((ab.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
    assert!(hash_features(&[], 16, 3).iter().all(|&x| x == 0.0));
}
