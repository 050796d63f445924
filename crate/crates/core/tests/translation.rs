mod common;

use stacktrans::disasm::parse_disassembly;
use stacktrans::pipeline::{prepare_records, translate_disassembly};
use stacktrans::ruleset::RuleSet;

#[test]
fn verbose_listing_parses_both_methods() {
    let methods = parse_disassembly(&common::fixture("sum_for.javap")).unwrap();
    assert_eq!(methods.len(), 2);
    assert!(methods[0].is_default_constructor());
    let sum = &methods[1];
    assert_eq!(sum.instructions.len(), 18);
    assert_eq!(sum.max_stack, Some(3));
    assert_eq!(sum.variable_table.len(), 4);
}

#[test]
fn loop_forms_translate_identically_up_to_names() {
    let rules = RuleSet::shipped();
    let a = translate_disassembly(&common::fixture("sum_for.javap"), &rules).unwrap();
    let b = translate_disassembly(&common::fixture("sum_while.javap"), &rules).unwrap();
    let map = [("result", "sum"), ("pos", "i"), ("data", "array")];
    let renamed: Vec<(u32, String)> = b[0]
        .sentences
        .iter()
        .map(|(i, s)| (*i, common::rename_words(s, &map)))
        .collect();
    assert_eq!(a[0].sentences, renamed);
    assert_eq!(a[0].dependency_graph, b[0].dependency_graph);
}

#[test]
fn sum_method_matches_transcript_and_graph() {
    let rules = RuleSet::shipped();
    let t = translate_disassembly(&common::fixture("sum_for.javap"), &rules)
        .unwrap()
        .remove(0);
    let expected: Vec<(u32, String)> = common::SUM_TRANSCRIPT
        .iter()
        .map(|(i, s)| (*i, s.to_string()))
        .collect();
    assert_eq!(t.sentences, expected);
    assert_eq!(t.final_stack_depth, 0);
    let g = &t.dependency_graph;
    assert!(g.control_edges.contains(&(7, 22)));
    assert!(g.control_edges.contains(&(19, 4)));
    // iaload consumes the array reference and the index
    assert!(g.data_edges.contains(&(13, 11)) && g.data_edges.contains(&(13, 12)));
    assert!(g.data_edges.iter().all(|(consumer, producer)| producer < consumer));
}

#[test]
fn every_toy_record_translates_to_an_empty_stack() {
    let rules = RuleSet::shipped();
    let corpus = common::toy_corpus(300, 1);
    for r in &corpus {
        let ts = translate_disassembly(r.disassembly.as_deref().unwrap(), &rules)
            .unwrap_or_else(|e| panic!("{}: {e}\n{}", r.id, r.disassembly.as_deref().unwrap()));
        assert_eq!(ts.len(), 1);
        assert_eq!(ts[0].final_stack_depth, 0, "{}", r.id);
        assert!(ts[0].sentences.iter().all(|(_, s)| !s.contains('[')), "{}", r.id);
    }
    let (prepared, skips) = prepare_records(&corpus, &rules, None).unwrap();
    assert_eq!(prepared.len(), corpus.len());
    assert_eq!(skips.total(), 0);
}

#[test]
fn toy_corpus_is_deterministic_and_distinct() {
    let a = common::toy_corpus(100, 9);
    assert_eq!(a, common::toy_corpus(100, 9));
    assert_ne!(a, common::toy_corpus(100, 10));
    let docs: std::collections::HashSet<&str> = a.iter().map(|r| r.comment.as_str()).collect();
    assert_eq!(docs.len(), a.len());
}
