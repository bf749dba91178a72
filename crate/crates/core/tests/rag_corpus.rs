//! Index over the corpus tree: the chunk count equals the count obtained by
//! applying the chunking rule independently.

mod common;

use std::path::Path;

use regex::Regex;

use dgf_core::rag::{collect_files, HashEmbedder, IndexBase};

/// Definition lines of the corpus style: return type and name at column 0,
/// parameter list closed and the body opened on the same line.
fn definition_lines(text: &str) -> Vec<u32> {
    let re = Regex::new(r"^[A-Za-z_][A-Za-z0-9_ \t\*]*\b[A-Za-z_][A-Za-z0-9_]*\s*\([^;{}]*\)\s*\{\s*$").unwrap();
    text.lines().enumerate().filter(|(_, l)| re.is_match(l)).map(|(i, _)| i as u32 + 1).collect()
}

/// Number of chunks: greedy windows of `w` lines, each cut short so that the
/// last definition inside it starts the next chunk instead.
fn oracle_chunks(n: u32, defs: &[u32], w: u32) -> u32 {
    if n == 0 {
        return 0;
    }
    fn count(from: u32, n: u32, defs: &[u32], w: u32) -> u32 {
        if from > n {
            return 0;
        }
        let window_end = (from + w - 1).min(n);
        let next = defs.iter().rev().find(|&&d| d > from && d <= window_end).copied().unwrap_or(window_end + 1);
        1 + count(next, n, defs, w)
    }
    count(1, n, defs, w)
}

fn oracle_total(root: &Path, w: u32) -> u32 {
    collect_files(root)
        .unwrap()
        .iter()
        .map(|rel| {
            let text = std::fs::read_to_string(root.join(rel)).unwrap();
            oracle_chunks(text.lines().count() as u32, &definition_lines(&text), w)
        })
        .sum()
}

#[test]
fn chunk_count_matches_the_independent_rule() {
    let root = common::fixture("corpus");
    let files = collect_files(&root).unwrap();
    assert_eq!(files.len(), 13);
    for w in [5, 12, 40] {
        let index = IndexBase::build(&root, &files, &HashEmbedder::default(), w).unwrap();
        assert_eq!(index.chunks.len() as u32, oracle_total(&root, w), "window {w}");
        assert!(index.chunks.iter().all(|c| c.span.1 - c.span.0 < w));
    }
}

#[test]
fn oracle_counts_definitions_in_the_corpus() {
    let text = std::fs::read_to_string(common::corpus("magic_gate").join("gate.c")).unwrap();
    assert_eq!(definition_lines(&text), vec![13, 17, 21, 30, 39, 45]);
}
