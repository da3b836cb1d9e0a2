//! Recall@K, subset Recall@K and truncated mAP@K over ranked runs.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::io::BufRead;
use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::maxsim::RankedList;

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
pub struct EvalAnnotation {
    pub query_id: String,
    pub relevant_ids: BTreeSet<String>,
    #[serde(default)]
    pub subset_ids: Option<BTreeSet<String>>,
}

impl EvalAnnotation {
    pub fn new<I, S>(query_id: impl Into<String>, relevant: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            query_id: query_id.into(),
            relevant_ids: relevant.into_iter().map(Into::into).collect(),
            subset_ids: None,
        }
    }

    pub fn with_subset<I, S>(mut self, subset: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.subset_ids = Some(subset.into_iter().map(Into::into).collect());
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.relevant_ids.is_empty() {
            return Err(Error::InvalidAnnotation(format!(
                "query {} has no relevant ids",
                self.query_id
            )));
        }
        if let Some(subset) = &self.subset_ids {
            if self.relevant_ids.is_disjoint(subset) {
                return Err(Error::InvalidAnnotation(format!(
                    "query {}: subset contains no relevant id",
                    self.query_id
                )));
            }
        }
        Ok(())
    }
}

fn hit_in<'a>(ids: impl Iterator<Item = &'a str>, ann: &EvalAnnotation, k: usize) -> f64 {
    if ids.take(k).any(|id| ann.relevant_ids.contains(id)) {
        1.0
    } else {
        0.0
    }
}

/// 1 when a relevant id is in the top `k`, else 0.
pub fn recall_at_k(ranking: &RankedList, ann: &EvalAnnotation, k: usize) -> f64 {
    hit_in(ranking.ids(), ann, k)
}

/// Recall@K after restricting the ranking to the annotation's subset.
pub fn recall_subset_at_k(ranking: &RankedList, ann: &EvalAnnotation, k: usize) -> Result<f64> {
    let subset = ann.subset_ids.as_ref().ok_or_else(|| Error::MissingSubset {
        query_id: ann.query_id.clone(),
    })?;
    let ranked: BTreeSet<&str> = ranking.ids().collect();
    if let Some(missing) = subset.iter().find(|id| !ranked.contains(id.as_str())) {
        return Err(Error::InvalidAnnotation(format!(
            "query {}: subset member {missing} is not ranked",
            ann.query_id
        )));
    }
    Ok(hit_in(ranking.ids().filter(|id| subset.contains(*id)), ann, k))
}

/// `(1/min(K, |rel|)) Σ_{r ≤ K} Precision@r · rel(r)`.
pub fn average_precision_at_k(ranking: &RankedList, ann: &EvalAnnotation, k: usize) -> f64 {
    let denom = k.min(ann.relevant_ids.len());
    if denom == 0 {
        return 0.0;
    }
    let mut hits = 0usize;
    let mut total = 0.0;
    for (r, id) in ranking.ids().take(k).enumerate() {
        if ann.relevant_ids.contains(id) {
            hits += 1;
            total += hits as f64 / (r + 1) as f64;
        }
    }
    total / denom as f64
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsReport {
    pub recall_at: BTreeMap<usize, f64>,
    pub recall_subset_at: BTreeMap<usize, f64>,
    pub map_at: BTreeMap<usize, f64>,
    pub avg_r5_rsub1: Option<f64>,
    pub query_count: usize,
}

impl MetricsReport {
    /// Report JSON with fixed key order and 6-decimal values.
    pub fn to_json(&self) -> String {
        fn map(out: &mut String, name: &str, m: &BTreeMap<usize, f64>) {
            let body: Vec<String> = m.iter().map(|(k, v)| format!("\"{k}\": {v:.6}")).collect();
            let _ = writeln!(out, "  \"{name}\": {{{}}},", body.join(", "));
        }
        let mut out = String::from("{\n");
        map(&mut out, "recall_at", &self.recall_at);
        map(&mut out, "recall_subset_at", &self.recall_subset_at);
        map(&mut out, "map_at", &self.map_at);
        match self.avg_r5_rsub1 {
            Some(v) => {
                let _ = writeln!(out, "  \"avg_r5_rsub1\": {v:.6},");
            }
            None => out.push_str("  \"avg_r5_rsub1\": null,\n"),
        }
        let _ = writeln!(out, "  \"query_count\": {}", self.query_count);
        out.push_str("}\n");
        out
    }
}

/// Aggregates all metrics over the annotated queries, unweighted.
///
/// Sums run in ascending `query_id` order. Subset recall averages over the
/// annotations that declare a subset and is left empty when none do.
pub fn evaluate(run: &HashMap<String, RankedList>, anns: &[EvalAnnotation], ks: &[usize]) -> Result<MetricsReport> {
    let mut ks: Vec<usize> = ks.to_vec();
    ks.sort_unstable();
    ks.dedup();
    if ks.contains(&0) {
        return Err(Error::InvalidConfig("cutoffs must be positive".into()));
    }

    let mut sorted: Vec<&EvalAnnotation> = anns.iter().collect();
    sorted.sort_by(|a, b| a.query_id.cmp(&b.query_id));
    if let Some(w) = sorted.windows(2).find(|w| w[0].query_id == w[1].query_id) {
        return Err(Error::InvalidAnnotation(format!("duplicate query {}", w[0].query_id)));
    }

    let mut recall = vec![0.0; ks.len()];
    let mut subset = vec![0.0; ks.len()];
    let mut ap = vec![0.0; ks.len()];
    let mut subset_count = 0usize;
    for ann in &sorted {
        ann.validate()?;
        let ranking = run.get(&ann.query_id).ok_or_else(|| Error::MissingQuery {
            query_id: ann.query_id.clone(),
        })?;
        if ann.subset_ids.is_some() {
            subset_count += 1;
        }
        for (slot, &k) in ks.iter().enumerate() {
            recall[slot] += recall_at_k(ranking, ann, k);
            ap[slot] += average_precision_at_k(ranking, ann, k);
            if ann.subset_ids.is_some() {
                subset[slot] += recall_subset_at_k(ranking, ann, k)?;
            }
        }
    }

    let n = sorted.len();
    let mean = |sums: &[f64], count: usize| -> BTreeMap<usize, f64> {
        if count == 0 {
            return BTreeMap::new();
        }
        ks.iter().zip(sums).map(|(&k, s)| (k, s / count as f64)).collect()
    };
    let recall_at = mean(&recall, n);
    let recall_subset_at = mean(&subset, subset_count);
    let map_at = mean(&ap, n);
    let avg_r5_rsub1 = match (recall_at.get(&5), recall_subset_at.get(&1)) {
        (Some(r5), Some(s1)) => Some((r5 + s1) / 2.0),
        _ => None,
    };
    Ok(MetricsReport {
        recall_at,
        recall_subset_at,
        map_at,
        avg_r5_rsub1,
        query_count: n,
    })
}

/// Parses annotation JSONL; blank lines are skipped.
pub fn read_annotations<R: BufRead>(input: R, path: &Path) -> Result<Vec<EvalAnnotation>> {
    let mut out = Vec::new();
    for (line_no, line) in input.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let ann: EvalAnnotation =
            serde_json::from_str(&line).map_err(|e| Error::format(path, format!("line {}: {e}", line_no + 1)))?;
        ann.validate()?;
        out.push(ann);
    }
    Ok(out)
}

pub fn load_annotations(path: impl AsRef<Path>) -> Result<Vec<EvalAnnotation>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_annotations(std::io::BufReader::new(file), path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ranking(q: &str, ids: &[&str]) -> RankedList {
        let n = ids.len() as f64;
        RankedList::from_scores(q, ids.iter().enumerate().map(|(i, id)| (*id, n - i as f64)))
    }

    fn pool(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("c{i:02}")).collect()
    }

    /// Ranking of `pool(n)` with `target` placed at 1-based `rank`.
    fn with_target_at(q: &str, n: usize, target: &str, rank: usize) -> RankedList {
        let mut ids: Vec<String> = pool(n).into_iter().filter(|c| c != target).collect();
        ids.insert(rank - 1, target.to_string());
        ranking(q, &ids.iter().map(String::as_str).collect::<Vec<_>>())
    }

    #[test]
    fn recall_hits_and_misses() {
        let ann = EvalAnnotation::new("q", ["c05"]);
        assert_eq!(recall_at_k(&with_target_at("q", 20, "c05", 1), &ann, 1), 1.0);
        assert_eq!(recall_at_k(&with_target_at("q", 20, "c05", 11), &ann, 10), 0.0);
        assert_eq!(recall_at_k(&with_target_at("q", 20, "c05", 10), &ann, 10), 1.0);
    }

    #[test]
    fn three_query_recall_mean() {
        let mut run = HashMap::new();
        let mut anns = Vec::new();
        for (q, rank) in [("q1", 1), ("q2", 7), ("q3", 30)] {
            run.insert(q.to_string(), with_target_at(q, 40, "c03", rank));
            anns.push(EvalAnnotation::new(q, ["c03"]));
        }
        let r = evaluate(&run, &anns, &[10]).unwrap();
        assert!((r.recall_at[&10] - 2.0 / 3.0).abs() < 1e-12);
        assert!(r.to_json().contains("\"10\": 0.666667"));
    }

    #[test]
    fn subset_restriction_changes_rank() {
        let rk = ranking("q", &["a", "b", "c", "t", "d", "e", "f", "g"]);
        let ann = EvalAnnotation::new("q", ["t"]).with_subset(["t", "d", "e", "f", "g", "x"]);
        // "x" is not ranked.
        assert!(recall_subset_at_k(&rk, &ann, 1).is_err());
        let ann = EvalAnnotation::new("q", ["t"]).with_subset(["t", "d", "e", "f", "g", "a"]);
        assert_eq!(recall_subset_at_k(&rk, &ann, 1).unwrap(), 0.0);
        let ann = EvalAnnotation::new("q", ["t"]).with_subset(["t", "d", "e", "f", "g", "h"]);
        let rk = ranking("q", &["a", "b", "c", "t", "d", "e", "f", "g", "h"]);
        assert_eq!(recall_subset_at_k(&rk, &ann, 1).unwrap(), 1.0);
        let last = ranking("q", &["a", "d", "e", "f", "g", "h", "t"]);
        assert_eq!(recall_subset_at_k(&last, &ann, 3).unwrap(), 0.0);
    }

    #[test]
    fn subset_is_required() {
        let ann = EvalAnnotation::new("q", ["a"]);
        assert!(matches!(
            recall_subset_at_k(&ranking("q", &["a"]), &ann, 1),
            Err(Error::MissingSubset { .. })
        ));
    }

    #[test]
    fn average_precision_worked_example() {
        let ann = EvalAnnotation::new("q", ["a", "b"]);
        let rk = ranking("q", &["a", "x", "b", "y", "z", "w"]);
        let ap = average_precision_at_k(&rk, &ann, 5);
        assert!((ap - 0.5 * (1.0 + 2.0 / 3.0)).abs() < 1e-12);
        let single = EvalAnnotation::new("q", ["x"]);
        let top = ranking("q", &["x", "a"]);
        for k in 1..4 {
            assert_eq!(average_precision_at_k(&top, &single, k), 1.0);
        }
        assert_eq!(average_precision_at_k(&rk, &EvalAnnotation::new("q", ["w"]), 5), 0.0);
    }

    #[test]
    fn evaluate_matches_hand_computation() {
        let mut run = HashMap::new();
        run.insert("q1".to_string(), ranking("q1", &["a", "b", "c", "d", "e", "f"]));
        run.insert("q2".to_string(), ranking("q2", &["f", "e", "d", "c", "b", "a"]));
        let anns = vec![
            EvalAnnotation::new("q2", ["a"]).with_subset(["a", "b"]),
            EvalAnnotation::new("q1", ["b", "d"]).with_subset(["c", "d", "e"]),
        ];
        let r = evaluate(&run, &anns, &[5, 1, 5]).unwrap();
        assert_eq!(r.query_count, 2);
        assert_eq!(r.recall_at.keys().copied().collect::<Vec<_>>(), vec![1, 5]);
        // q1: R@1 0, R@5 1; q2: R@1 0, R@5 0 (a is sixth).
        assert_eq!(r.recall_at[&1], 0.0);
        assert_eq!(r.recall_at[&5], 0.5);
        // Subset q1 [c, d, e] -> d second; q2 [b, a] -> a second.
        assert_eq!(r.recall_subset_at[&1], 0.0);
        assert_eq!(r.recall_subset_at[&5], 1.0);
        // AP@5 q1 = (1/2)(1/2 + 2/4) = 0.5; q2 = 0.
        assert!((r.map_at[&5] - 0.25).abs() < 1e-12);
        assert_eq!(r.avg_r5_rsub1, Some(0.25));
    }

    #[test]
    fn empty_cutoffs_and_missing_queries() {
        let mut run = HashMap::new();
        run.insert("q".to_string(), ranking("q", &["a"]));
        let r = evaluate(&run, &[EvalAnnotation::new("q", ["a"])], &[]).unwrap();
        assert!(r.recall_at.is_empty() && r.map_at.is_empty() && r.recall_subset_at.is_empty());
        assert_eq!(r.query_count, 1);
        assert_eq!(r.avg_r5_rsub1, None);
        let err = evaluate(&run, &[EvalAnnotation::new("other", ["a"])], &[1]).unwrap_err();
        assert!(matches!(err, Error::MissingQuery { .. }));
    }

    #[test]
    fn annotation_jsonl() {
        let text = "{\"query_id\":\"q\",\"relevant_ids\":[\"a\"],\"subset_ids\":[\"a\",\"b\"]}\n\n{\"query_id\":\"r\",\"relevant_ids\":[\"b\",\"c\"]}\n";
        let anns = read_annotations(text.as_bytes(), Path::new("mem")).unwrap();
        assert_eq!(anns.len(), 2);
        assert!(anns[1].subset_ids.is_none());
        let bad = "{\"query_id\":\"q\",\"relevant_ids\":[]}\n";
        assert!(matches!(
            read_annotations(bad.as_bytes(), Path::new("mem")),
            Err(Error::InvalidAnnotation(_))
        ));
        assert!(matches!(
            read_annotations("{".as_bytes(), Path::new("mem")),
            Err(Error::Format { .. })
        ));
    }

    fn naive_recall(scores: &[(String, f64)], rel: &BTreeSet<String>, k: usize) -> f64 {
        let mut v = scores.to_vec();
        v.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        if v.iter().take(k).any(|(id, _)| rel.contains(id)) {
            1.0
        } else {
            0.0
        }
    }

    proptest! {
        #[test]
        fn oracle_and_monotone(scores in prop::collection::vec(0u8..6, 2..20), rel_mask in any::<u32>(), sub_mask in any::<u32>()) {
            let ids = pool(scores.len());
            let scored: Vec<(String, f64)> = ids.iter().cloned().zip(scores.iter().map(|&s| s as f64)).collect();
            let rk = RankedList::from_scores("q", scored.clone());
            let mut rel: BTreeSet<String> = ids.iter().enumerate().filter(|(i, _)| rel_mask >> i & 1 == 1).map(|(_, id)| id.clone()).collect();
            if rel.is_empty() { rel.insert(ids[0].clone()); }
            let mut subset: BTreeSet<String> = ids.iter().enumerate().filter(|(i, _)| sub_mask >> i & 1 == 1).map(|(_, id)| id.clone()).collect();
            subset.insert(rel.iter().next().unwrap().clone());
            let ann = EvalAnnotation { query_id: "q".into(), relevant_ids: rel.clone(), subset_ids: Some(subset.clone()) };
            let full = EvalAnnotation { subset_ids: Some(ids.iter().cloned().collect()), ..ann.clone() };
            let restricted: Vec<(String, f64)> = scored.iter().filter(|(id, _)| subset.contains(id)).cloned().collect();
            let mut prev = (0.0, 0.0);
            for k in 1..=scores.len() {
                let r = recall_at_k(&rk, &ann, k);
                prop_assert_eq!(r, naive_recall(&scored, &rel, k));
                prop_assert_eq!(recall_subset_at_k(&rk, &ann, k).unwrap(), naive_recall(&restricted, &rel, k));
                prop_assert_eq!(recall_subset_at_k(&rk, &full, k).unwrap(), r);
                let ap = average_precision_at_k(&rk, &ann, k);
                prop_assert!((0.0..=1.0).contains(&ap));
                prop_assert!(r >= prev.0);
                // The min(K, |rel|) denominator grows with K until K = |rel|.
                if k > rel.len() {
                    prop_assert!(ap >= prev.1 - 1e-12);
                }
                prev = (r, ap);
            }
        }
    }
}
