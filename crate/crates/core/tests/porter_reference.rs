//! Stemmer against the published vocabulary/output pair.

use zsvqa::textproc::porter::stem;
use zsvqa::textproc::{build_stem_map, porter_stem, tokenize};

const VOC: &str = include_str!("data/porter_voc.txt");
const OUT: &str = include_str!("data/porter_output.txt");

fn pairs() -> impl Iterator<Item = (&'static str, &'static str)> {
    VOC.lines().zip(OUT.lines())
}

#[test]
fn reference_lists_align() {
    assert_eq!(VOC.lines().count(), OUT.lines().count());
    assert!(VOC.lines().count() > 20_000);
}

#[test]
fn every_reference_word_agrees() {
    let wrong: Vec<String> = pairs()
        .filter(|(w, want)| stem(w) != *want)
        .map(|(w, want)| format!("{w}: got {} want {want}", stem(w)))
        .collect();
    assert!(wrong.is_empty(), "{} mismatches, first: {:?}", wrong.len(), &wrong[..wrong.len().min(10)]);
}

#[test]
fn token_entry_point_matches() {
    for (w, want) in pairs().step_by(97) {
        let t = tokenize(w);
        assert_eq!(porter_stem(&t[0]), want);
    }
}

#[test]
fn algorithm_is_not_idempotent() {
    assert_eq!(stem("abase"), "abas");
    assert_eq!(stem("abas"), "aba");
    assert_eq!(stem("agreed"), "agre");
    assert_eq!(stem("agre"), "agr");
}

#[test]
fn stem_map_keys_are_idempotent_on_reference_vocabulary() {
    let vocab: Vec<&str> = VOC.lines().collect();
    let map = build_stem_map(&vocab, "porter").unwrap();
    for w in &vocab {
        let k = map.key(w);
        assert_eq!(map.key(&k), k, "{w}");
    }
    assert_eq!(map.key("abase"), "abas");
    assert_eq!(map.key("abas"), "abas");
}
