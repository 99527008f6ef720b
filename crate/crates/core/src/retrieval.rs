use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievedItem {
    pub entry_id: u64,
    pub score: f64,
    pub value: String,
}

/// Ranked retrieval output: scores non-increasing, ties by ascending entry id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub items: Vec<RetrievedItem>,
    pub k_requested: usize,
}

impl RetrievalResult {
    pub fn empty(k_requested: usize) -> Self {
        RetrievalResult {
            items: Vec::new(),
            k_requested,
        }
    }

    pub fn values(&self) -> impl Iterator<Item = &str> {
        self.items.iter().map(|i| i.value.as_str())
    }
}

/// Orders `(row, entry_id, score)` candidates by score descending then entry id
/// ascending and keeps the first `k`.
pub(crate) fn top_k(mut scored: Vec<(usize, u64, f64)>, k: usize) -> Vec<(usize, u64, f64)> {
    let cmp = |a: &(usize, u64, f64), b: &(usize, u64, f64)| b.2.total_cmp(&a.2).then(a.1.cmp(&b.1));
    if k < scored.len() {
        scored.select_nth_unstable_by(k, cmp);
        scored.truncate(k);
    }
    scored.sort_unstable_by(cmp);
    scored
}
