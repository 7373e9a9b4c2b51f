//! Boolean evaluation must agree with a brute-force oracle that tests each
//! document's term set against the query AST directly.

use embr_engine::{evaluate_boolean, Document, Index, QueryNode, Term};
use proptest::prelude::*;
use std::collections::BTreeSet;

const NAMESPACES: [&str; 3] = ["text", "loc", "tag"];
const VALUES: [&str; 5] = ["alpha", "bravo", "charlie", "delta", "missing"];

fn term_strategy() -> impl Strategy<Value = QueryNode> {
    (0..NAMESPACES.len(), 0..VALUES.len()).prop_map(|(n, v)| QueryNode::Term {
        namespace: NAMESPACES[n].to_string(),
        value: VALUES[v].to_string(),
    })
}

fn query_strategy() -> impl Strategy<Value = QueryNode> {
    term_strategy().prop_recursive(3, 24, 4, |inner| {
        prop_oneof![
            prop::collection::vec(inner.clone(), 1..4).prop_map(QueryNode::And),
            prop::collection::vec(inner, 1..4).prop_map(QueryNode::Or),
        ]
    })
}

/// Each document is a subset of the namespace/value cross product, skewed
/// so terms overlap across documents. "missing" is never indexed.
fn corpus_strategy() -> impl Strategy<Value = Vec<Vec<(usize, usize)>>> {
    prop::collection::vec(
        prop::collection::btree_set((0..NAMESPACES.len(), 0..VALUES.len() - 1), 0..6)
            .prop_map(|s| s.into_iter().collect()),
        1..14,
    )
}

fn doc_matches(node: &QueryNode, terms: &BTreeSet<(String, String)>) -> bool {
    match node {
        QueryNode::And(children) => children.iter().all(|c| doc_matches(c, terms)),
        QueryNode::Or(children) => children.iter().any(|c| doc_matches(c, terms)),
        QueryNode::Term { namespace, value } => {
            terms.contains(&(namespace.clone(), value.clone()))
        }
        QueryNode::Nn { .. } => unreachable!("strategy never generates nn"),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1024))]

    #[test]
    fn boolean_evaluation_matches_per_document_oracle(
        corpus in corpus_strategy(),
        query in query_strategy(),
    ) {
        let index = Index::new();
        let mut term_sets = Vec::new();
        for (i, picks) in corpus.iter().enumerate() {
            let mut doc = Document::new(format!("d{i:03}"));
            let mut set = BTreeSet::new();
            for &(n, v) in picks {
                doc.terms.insert(Term::new(NAMESPACES[n], VALUES[v]), None);
                set.insert((NAMESPACES[n].to_string(), VALUES[v].to_string()));
            }
            index.add_document(doc).unwrap();
            term_sets.push(set);
        }
        let snapshot = index.snapshot();

        let got = evaluate_boolean(&query, &snapshot).unwrap();
        let want: BTreeSet<String> = term_sets
            .iter()
            .enumerate()
            .filter(|(_, terms)| doc_matches(&query, terms))
            .map(|(i, _)| format!("d{i:03}"))
            .collect();
        prop_assert_eq!(got, want);
    }

    #[test]
    fn boolean_evaluation_ignores_tombstoned_documents(
        corpus in corpus_strategy(),
        query in query_strategy(),
        removals in prop::collection::btree_set(0usize..14, 0..5),
    ) {
        let index = Index::new();
        let mut term_sets = Vec::new();
        for (i, picks) in corpus.iter().enumerate() {
            let mut doc = Document::new(format!("d{i:03}"));
            let mut set = BTreeSet::new();
            for &(n, v) in picks {
                doc.terms.insert(Term::new(NAMESPACES[n], VALUES[v]), None);
                set.insert((NAMESPACES[n].to_string(), VALUES[v].to_string()));
            }
            index.add_document(doc).unwrap();
            term_sets.push(set);
        }
        let removed: BTreeSet<usize> =
            removals.into_iter().filter(|&i| i < corpus.len()).collect();
        for &i in &removed {
            index.remove_document(&format!("d{i:03}")).unwrap();
        }
        let snapshot = index.snapshot();

        let got = evaluate_boolean(&query, &snapshot).unwrap();
        let want: BTreeSet<String> = term_sets
            .iter()
            .enumerate()
            .filter(|(i, terms)| !removed.contains(i) && doc_matches(&query, terms))
            .map(|(i, _)| format!("d{i:03}"))
            .collect();
        prop_assert_eq!(got, want);
    }
}
