//! Turns retrieval results into the context sequence appended to the input.

use std::collections::HashSet;

use crate::error::{Error, Result};
use crate::retrieval::RetrievalResult;
use crate::text_index::tokenize;

/// Surface form of the mark separating the input from its retrieved context.
pub const CONTEXT_MARK: &str = "[X]";

pub const DEFAULT_BUDGET: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Input,
    Context,
}

/// `x` tokens, then (when any context fits) the mark and the context tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedInput {
    pub tokens: Vec<String>,
    /// Length of the input prefix.
    pub n: usize,
    /// Length of the context suffix, mark included.
    pub m: usize,
}

impl AugmentedInput {
    /// The input alone, without context.
    pub fn bare(x_tokens: &[String]) -> Self {
        AugmentedInput {
            tokens: x_tokens.to_vec(),
            n: x_tokens.len(),
            m: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn input(&self) -> &[String] {
        &self.tokens[..self.n]
    }

    pub fn source(&self, i: usize) -> Source {
        if i < self.n {
            Source::Input
        } else {
            Source::Context
        }
    }

    pub fn source_tags(&self) -> Vec<Source> {
        (0..self.len()).map(|i| self.source(i)).collect()
    }
}

/// Up to `k` values in rank order, exact duplicates dropped (first kept).
pub fn assemble_context(results: &RetrievalResult, k: usize) -> Vec<String> {
    let mut seen = HashSet::new();
    results
        .values()
        .take(k)
        .filter(|v| seen.insert(*v))
        .map(str::to_string)
        .collect()
}

/// Appends `[X]` and the tokenized blocks to `x`, truncating the context so
/// the total length stays within `budget`. The input is never truncated.
pub fn concat_and_chunk(x_tokens: &[String], blocks: &[String], budget: usize) -> Result<AugmentedInput> {
    let n = x_tokens.len();
    if n > budget {
        return Err(Error::InvalidInput(format!("input of {n} tokens exceeds the budget of {budget}")));
    }
    let room = budget - n;
    let mut tokens = x_tokens.to_vec();
    if room >= 2 {
        let z: Vec<String> = blocks.iter().flat_map(|b| tokenize(b)).take(room - 1).collect();
        if !z.is_empty() {
            tokens.push(CONTEXT_MARK.to_string());
            tokens.extend(z);
        }
    }
    let m = tokens.len() - n;
    Ok(AugmentedInput { tokens, n, m })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::retrieval::RetrievedItem;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    fn result(values: &[&str]) -> RetrievalResult {
        RetrievalResult {
            items: values
                .iter()
                .enumerate()
                .map(|(i, v)| RetrievedItem {
                    entry_id: i as u64,
                    score: 10.0 - i as f64,
                    value: v.to_string(),
                })
                .collect(),
            k_requested: values.len(),
        }
    }

    #[test]
    fn duplicates_collapse() {
        assert_eq!(assemble_context(&result(&["p", "q", "p"]), 10), vec!["p", "q"]);
        assert!(assemble_context(&RetrievalResult::empty(3), 3).is_empty());
    }

    #[test]
    fn top_ten_in_rank_order() {
        let vals: Vec<String> = (0..12).map(|i| format!("para {i}")).collect();
        let refs: Vec<&str> = vals.iter().map(String::as_str).collect();
        let blocks = assemble_context(&result(&refs), 10);
        assert_eq!(blocks, vals[..10].to_vec());
    }

    #[test]
    fn budget_equal_to_input_leaves_no_context() {
        let x = toks("a b c");
        let out = concat_and_chunk(&x, &["lots of words".into()], 3).unwrap();
        assert_eq!(out.m, 0);
        assert_eq!(out.tokens, x);
        // a mark alone is never emitted
        assert_eq!(concat_and_chunk(&x, &["w".into()], 4).unwrap().m, 0);
    }

    #[test]
    fn length_arithmetic() {
        let x = toks("a b c");
        let block: String = (0..20).map(|i| format!("w{i} ")).collect();
        let out = concat_and_chunk(&x, &[block], 3 + 1 + 5).unwrap();
        assert_eq!(out.m, 6);
        assert_eq!(out.tokens[3], CONTEXT_MARK);
        assert_eq!(out.tokens[4..], toks("w0 w1 w2 w3 w4")[..]);
    }

    #[test]
    fn huge_budget_keeps_everything() {
        let x = toks("a");
        let out = concat_and_chunk(&x, &["B c.".into(), "d".into()], 10_000).unwrap();
        assert_eq!(out.tokens, toks("a [X] b c d"));
        assert_eq!(out.source_tags()[..2], [Source::Input, Source::Context]);
    }

    #[test]
    fn oversized_input_is_an_error() {
        assert!(concat_and_chunk(&toks("a b c"), &[], 2).is_err());
    }
}
