//! Reduction of scored supervision to binary preference pairs, and the union
//! of all sources into one homogeneous pair list.
//!
//! Scored records are grouped by normalized prompt. Each group's responses are
//! ordered by the source's quality label (numerical to ordinal), then the best
//! and worst responses become the chosen/rejected pair (ordinal to binary). The
//! group's quality is the spread of the label across its responses.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{
    normalize_prompt, BinaryPreferenceRecord, FilterPolicy, LabelDirection, LoadedSource,
    ScoreVector, ScoredResponseRecord, SourceDescriptor, SourceRecords,
};

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredResponse {
    pub text: String,
    pub scores: ScoreVector,
}

/// All responses to one prompt, in input order.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptGroup {
    /// Prompt text as it first appeared in the source.
    pub prompt: String,
    pub responses: Vec<ScoredResponse>,
    pub source_id: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Grouping {
    pub groups: Vec<PromptGroup>,
    pub single_response_prompts: usize,
}

/// Element of the homogenized dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnifiedPair {
    pub pair_id: String,
    pub prompt: String,
    pub chosen: String,
    pub rejected: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quality: Option<f64>,
    pub source_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cluster_id: Option<usize>,
}

/// Per-source counts of prompts that did not become pairs, or became weak ones.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscardReport {
    pub source_id: String,
    pub single_response_prompts: usize,
    /// Groups whose label spread is zero. These are kept and rank last.
    pub zero_variance_groups: usize,
    /// Groups whose best and worst responses have the same text. These are dropped.
    pub identical_endpoint_groups: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceCount {
    pub source_id: String,
    pub pairs: usize,
}

pub fn pair_id(source_id: &str, ordinal: usize) -> String {
    format!("{source_id}/{ordinal:06}")
}

/// Groups records by normalized prompt, in order of first appearance. Prompts
/// with a single response are dropped and counted.
pub fn group_by_prompt(records: &[ScoredResponseRecord]) -> Grouping {
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut groups: Vec<PromptGroup> = Vec::new();
    for record in records {
        let key = normalize_prompt(&record.prompt);
        let slot = *index.entry(key).or_insert_with(|| {
            groups.push(PromptGroup {
                prompt: record.prompt.clone(),
                responses: Vec::new(),
                source_id: record.source_id.clone(),
            });
            groups.len() - 1
        });
        groups[slot].responses.push(ScoredResponse {
            text: record.response.clone(),
            scores: record.scores.clone(),
        });
    }
    let before = groups.len();
    groups.retain(|g| g.responses.len() >= 2);
    Grouping {
        single_response_prompts: before - groups.len(),
        groups,
    }
}

fn label_values(group: &PromptGroup, label: &str) -> Result<Vec<f64>> {
    group
        .responses
        .iter()
        .enumerate()
        .map(|(index, r)| {
            r.scores.get(label).ok_or_else(|| Error::MissingLabel {
                index,
                label: label.to_owned(),
            })
        })
        .collect()
}

/// Orders a group's responses best first. Ties keep input order.
pub fn numerical_to_ordinal<'a>(
    group: &'a PromptGroup,
    label: &str,
    direction: LabelDirection,
) -> Result<Vec<&'a ScoredResponse>> {
    let values = label_values(group, label)?;
    let mut order: Vec<usize> = (0..values.len()).collect();
    match direction {
        LabelDirection::LowerIsBetter => order.sort_by(|&a, &b| values[a].total_cmp(&values[b])),
        LabelDirection::HigherIsBetter => order.sort_by(|&a, &b| values[b].total_cmp(&values[a])),
    }
    Ok(order.into_iter().map(|i| &group.responses[i]).collect())
}

/// Best and worst of an ordered list, as `(chosen, rejected)`.
pub fn ordinal_to_binary<T: Clone>(ordered: &[T]) -> Result<(T, T)> {
    match ordered {
        [first, .., last] => Ok((first.clone(), last.clone())),
        _ => Err(Error::TooFewResponses {
            found: ordered.len(),
        }),
    }
}

/// Spread of `label` across the group: `max - min`.
pub fn quality_score(group: &PromptGroup, label: &str) -> Result<f64> {
    let values = label_values(group, label)?;
    if values.is_empty() {
        return Ok(0.0);
    }
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    Ok(hi - lo)
}

/// Sorts pairs by descending quality, keeping input order among ties.
pub fn rank_pairs(pairs: &[UnifiedPair]) -> Result<Vec<UnifiedPair>> {
    let mut keyed = pairs
        .iter()
        .map(|p| {
            p.quality
                .map(|q| (q, p))
                .ok_or_else(|| Error::MissingQuality {
                    pair_id: p.pair_id.clone(),
                })
        })
        .collect::<Result<Vec<_>>>()?;
    keyed.sort_by(|a, b| b.0.total_cmp(&a.0));
    Ok(keyed.into_iter().map(|(_, p)| p.clone()).collect())
}

pub fn convert_binary_source(
    desc: &SourceDescriptor,
    records: &[BinaryPreferenceRecord],
) -> Vec<UnifiedPair> {
    records
        .iter()
        .enumerate()
        .map(|(i, r)| UnifiedPair {
            pair_id: pair_id(&desc.source_id, i),
            prompt: r.prompt.clone(),
            chosen: r.chosen.clone(),
            rejected: r.rejected.clone(),
            quality: None,
            source_id: desc.source_id.clone(),
            cluster_id: None,
        })
        .collect()
}

pub fn convert_scored_source(
    desc: &SourceDescriptor,
    records: &[ScoredResponseRecord],
) -> Result<(Vec<UnifiedPair>, DiscardReport)> {
    let label = desc.quality_label.as_deref().ok_or_else(|| {
        Error::Config(format!("scored source '{}' has no quality_label", desc.source_id))
    })?;
    let grouping = group_by_prompt(records);
    let mut report = DiscardReport {
        source_id: desc.source_id.clone(),
        single_response_prompts: grouping.single_response_prompts,
        ..Default::default()
    };
    let mut pairs = Vec::with_capacity(grouping.groups.len());
    for group in &grouping.groups {
        let ordered = numerical_to_ordinal(group, label, desc.label_direction)?;
        let (chosen, rejected) = ordinal_to_binary(&ordered)?;
        if normalize_prompt(&chosen.text) == normalize_prompt(&rejected.text) {
            report.identical_endpoint_groups += 1;
            continue;
        }
        let quality = quality_score(group, label)?;
        if quality == 0.0 {
            report.zero_variance_groups += 1;
        }
        pairs.push(UnifiedPair {
            pair_id: pair_id(&desc.source_id, pairs.len()),
            prompt: group.prompt.clone(),
            chosen: chosen.text.clone(),
            rejected: rejected.text.clone(),
            quality: (desc.filter_policy == FilterPolicy::Quality).then_some(quality),
            source_id: desc.source_id.clone(),
            cluster_id: None,
        });
    }
    Ok((pairs, report))
}

/// Converts any loaded source into pairs. Binary sources produce no discards.
pub fn convert_source(source: &LoadedSource) -> Result<(Vec<UnifiedPair>, DiscardReport)> {
    match &source.records {
        SourceRecords::Binary(records) => Ok((
            convert_binary_source(&source.descriptor, records),
            DiscardReport {
                source_id: source.descriptor.source_id.clone(),
                ..Default::default()
            },
        )),
        SourceRecords::Scored(records) => convert_scored_source(&source.descriptor, records),
    }
}

/// Concatenates per-source pairs in declaration order.
pub fn union(
    sources: Vec<(SourceDescriptor, Vec<UnifiedPair>)>,
) -> Result<(Vec<UnifiedPair>, Vec<SourceCount>)> {
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(sources.iter().map(|(_, p)| p.len()).sum());
    let mut counts = Vec::with_capacity(sources.len());
    for (desc, pairs) in sources {
        counts.push(SourceCount {
            source_id: desc.source_id.clone(),
            pairs: pairs.len(),
        });
        for pair in pairs {
            if !seen.insert(pair.pair_id.clone()) {
                return Err(Error::DuplicatePairId(pair.pair_id));
            }
            out.push(pair);
        }
    }
    Ok((out, counts))
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use proptest::prelude::*;

    use super::*;
    use crate::ingest::Supervision;

    fn scores(toxicity: f64) -> ScoreVector {
        ScoreVector::new(BTreeMap::from([("toxicity".to_owned(), toxicity)])).unwrap()
    }

    fn group(toxicities: &[f64]) -> PromptGroup {
        PromptGroup {
            prompt: "p".into(),
            responses: toxicities
                .iter()
                .enumerate()
                .map(|(i, &t)| ScoredResponse {
                    text: format!("r{i}"),
                    scores: scores(t),
                })
                .collect(),
            source_id: "s".into(),
        }
    }

    fn record(prompt: &str, response: &str, toxicity: f64) -> ScoredResponseRecord {
        ScoredResponseRecord {
            prompt: prompt.into(),
            response: response.into(),
            scores: scores(toxicity),
            source_id: "oasst".into(),
        }
    }

    fn scored_desc(policy: FilterPolicy) -> SourceDescriptor {
        SourceDescriptor {
            source_id: "oasst".into(),
            supervision: Supervision::Scored,
            quality_label: Some("toxicity".into()),
            label_direction: LabelDirection::LowerIsBetter,
            filter_policy: policy,
        }
    }

    fn texts(ordered: &[&ScoredResponse]) -> Vec<String> {
        ordered.iter().map(|r| r.text.clone()).collect()
    }

    #[test]
    fn groups_by_normalized_prompt() {
        let records = vec![
            record("Which affordable GPU?", "a", 0.1),
            record("solo", "x", 0.1),
            record(" Which affordable GPU?\n", "b", 0.2),
            record("Which affordable GPU?", "c", 0.3),
        ];
        let grouping = group_by_prompt(&records);
        assert_eq!(grouping.groups.len(), 1);
        assert_eq!(grouping.groups[0].responses.len(), 3);
        assert_eq!(grouping.groups[0].prompt, "Which affordable GPU?");
        assert_eq!(grouping.single_response_prompts, 1);
        assert!(group_by_prompt(&[]).groups.is_empty());
    }

    #[test]
    fn groups_keep_first_appearance_order() {
        let records = vec![
            record("b", "1", 0.1),
            record("a", "1", 0.1),
            record("a", "2", 0.1),
            record("b", "2", 0.1),
        ];
        let prompts: Vec<_> = group_by_prompt(&records).groups.into_iter().map(|g| g.prompt).collect();
        assert_eq!(prompts, ["b", "a"]);
    }

    #[test]
    fn ordinal_sorts_lower_first() {
        let g = group(&[0.5, 0.1, 0.9]);
        let ordered = numerical_to_ordinal(&g, "toxicity", LabelDirection::LowerIsBetter).unwrap();
        assert_eq!(texts(&ordered), ["r1", "r0", "r2"]);
        let ordered = numerical_to_ordinal(&g, "toxicity", LabelDirection::HigherIsBetter).unwrap();
        assert_eq!(texts(&ordered), ["r2", "r0", "r1"]);
    }

    #[test]
    fn ordinal_ties_keep_input_order() {
        let g = group(&[0.3, 0.3, 0.3]);
        for dir in [LabelDirection::LowerIsBetter, LabelDirection::HigherIsBetter] {
            let ordered = numerical_to_ordinal(&g, "toxicity", dir).unwrap();
            assert_eq!(texts(&ordered), ["r0", "r1", "r2"]);
        }
    }

    #[test]
    fn ordinal_small_toxicity() {
        let g = group(&[0.00038284, 0.3]);
        let ordered = numerical_to_ordinal(&g, "toxicity", LabelDirection::LowerIsBetter).unwrap();
        assert_eq!(ordered[0].scores.get("toxicity"), Some(0.00038284));
        assert_eq!(ordered[1].scores.get("toxicity"), Some(0.3));
    }

    #[test]
    fn ordinal_missing_label_names_index() {
        let mut g = group(&[0.1, 0.2]);
        g.responses[1].scores =
            ScoreVector::new(BTreeMap::from([("spam".to_owned(), 0.0)])).unwrap();
        match numerical_to_ordinal(&g, "toxicity", LabelDirection::LowerIsBetter) {
            Err(Error::MissingLabel { index, .. }) => assert_eq!(index, 1),
            other => panic!("unexpected {other:?}"),
        }
        assert!(quality_score(&g, "toxicity").is_err());
    }

    #[test]
    fn binary_from_endpoints() {
        assert_eq!(ordinal_to_binary(&["A", "B", "C"]).unwrap(), ("A", "C"));
        assert_eq!(ordinal_to_binary(&["A", "B"]).unwrap(), ("A", "B"));
        assert!(matches!(
            ordinal_to_binary(&["A"]),
            Err(Error::TooFewResponses { found: 1 })
        ));
        assert!(ordinal_to_binary::<&str>(&[]).is_err());
    }

    #[test]
    fn least_toxic_is_chosen() {
        let g = PromptGroup {
            prompt: "Which affordable GPU would you recommend to train a language model?".into(),
            responses: vec![
                ScoredResponse {
                    text: "It heavily depends on the size...".into(),
                    scores: scores(0.00038284),
                },
                ScoredResponse {
                    text: "It is difficult to say...".into(),
                    scores: scores(0.0001),
                },
            ],
            source_id: "oasst".into(),
        };
        let ordered = numerical_to_ordinal(&g, "toxicity", LabelDirection::LowerIsBetter).unwrap();
        let (chosen, rejected) = ordinal_to_binary(&ordered).unwrap();
        assert_eq!(chosen.text, "It is difficult to say...");
        assert_eq!(rejected.text, "It heavily depends on the size...");
    }

    #[test]
    fn quality_examples() {
        assert!((quality_score(&group(&[0.1, 0.9]), "toxicity").unwrap() - 0.8).abs() < 1e-12);
        assert_eq!(quality_score(&group(&[0.4, 0.4, 0.4]), "toxicity").unwrap(), 0.0);

        let toxicities: [f64; 3] = [0.05, 0.40, 0.75];
        let mut best = 0.0f64;
        for i in 0..toxicities.len() {
            for j in 0..toxicities.len() {
                best = best.max((toxicities[i] - toxicities[j]).abs());
            }
        }
        let q = quality_score(&group(&toxicities), "toxicity").unwrap();
        assert_eq!(q, best);
        assert!((q - 0.70).abs() < 1e-12);
    }

    fn with_quality(id: &str, q: Option<f64>) -> UnifiedPair {
        UnifiedPair {
            pair_id: id.into(),
            prompt: format!("prompt {id}"),
            chosen: "a".into(),
            rejected: "b".into(),
            quality: q,
            source_id: "s".into(),
            cluster_id: None,
        }
    }

    fn ids(pairs: &[UnifiedPair]) -> Vec<&str> {
        pairs.iter().map(|p| p.pair_id.as_str()).collect()
    }

    #[test]
    fn ranking() {
        let pairs = vec![
            with_quality("a", Some(0.2)),
            with_quality("b", Some(0.8)),
            with_quality("c", Some(0.5)),
        ];
        assert_eq!(ids(&rank_pairs(&pairs).unwrap()), ["b", "c", "a"]);

        let pairs = vec![
            with_quality("a", Some(0.5)),
            with_quality("b", Some(0.9)),
            with_quality("c", Some(0.5)),
        ];
        assert_eq!(ids(&rank_pairs(&pairs).unwrap()), ["b", "a", "c"]);

        let pairs = vec![with_quality("a", Some(0.0)), with_quality("b", Some(0.0))];
        assert_eq!(ids(&rank_pairs(&pairs).unwrap()), ["a", "b"]);

        let pairs = vec![with_quality("a", Some(0.0)), with_quality("b", None)];
        assert!(matches!(rank_pairs(&pairs), Err(Error::MissingQuality { pair_id }) if pair_id == "b"));
    }

    #[test]
    fn scored_conversion_report() {
        let records = vec![
            record("p1", "a", 0.5),
            record("p1", "b", 0.1),
            record("p1", "c", 0.9),
            record("p2", "only", 0.2),
            record("p3", "x", 0.3),
            record("p3", "y", 0.3),
        ];
        let (pairs, report) = convert_scored_source(&scored_desc(FilterPolicy::Quality), &records).unwrap();
        assert_eq!(pairs.len(), 2);
        assert_eq!((pairs[0].chosen.as_str(), pairs[0].rejected.as_str()), ("b", "c"));
        assert!((pairs[0].quality.unwrap() - 0.8).abs() < 1e-12);
        assert_eq!((pairs[1].chosen.as_str(), pairs[1].rejected.as_str()), ("x", "y"));
        assert_eq!(pairs[1].quality, Some(0.0));
        assert_eq!(pairs[1].pair_id, "oasst/000001");
        assert_eq!(report.single_response_prompts, 1);
        assert_eq!(report.zero_variance_groups, 1);

        let (pairs, _) = convert_scored_source(&scored_desc(FilterPolicy::Random), &records).unwrap();
        assert!(pairs.iter().all(|p| p.quality.is_none()));
    }

    #[test]
    fn identical_endpoint_text_dropped() {
        let records = vec![record("p", "same", 0.1), record("p", "same", 0.9)];
        let (pairs, report) = convert_scored_source(&scored_desc(FilterPolicy::Quality), &records).unwrap();
        assert!(pairs.is_empty());
        assert_eq!(report.identical_endpoint_groups, 1);
    }

    fn binary_desc(id: &str) -> SourceDescriptor {
        SourceDescriptor {
            source_id: id.into(),
            supervision: Supervision::Binary,
            quality_label: None,
            label_direction: LabelDirection::LowerIsBetter,
            filter_policy: FilterPolicy::Passthrough,
        }
    }

    fn binary_pairs(id: &str, n: usize) -> Vec<UnifiedPair> {
        let records: Vec<_> = (0..n)
            .map(|i| BinaryPreferenceRecord {
                prompt: format!("{id} prompt {i}"),
                chosen: "yes".into(),
                rejected: "no".into(),
                source_id: id.into(),
            })
            .collect();
        convert_binary_source(&binary_desc(id), &records)
    }

    #[test]
    fn union_counts() {
        let (all, counts) = union(vec![
            (binary_desc("A"), binary_pairs("A", 120)),
            (binary_desc("B"), binary_pairs("B", 80)),
        ])
        .unwrap();
        assert_eq!(all.len(), 200);
        assert_eq!(all.iter().filter(|p| p.source_id == "A").count(), 120);
        assert_eq!(counts[1], SourceCount { source_id: "B".into(), pairs: 80 });
        assert!(all[..120].iter().all(|p| p.source_id == "A"));
    }

    #[test]
    fn union_with_empty_is_identity() {
        let a = binary_pairs("A", 5);
        let (all, _) = union(vec![(binary_desc("A"), a.clone()), (binary_desc("B"), vec![])]).unwrap();
        assert_eq!(all, a);
    }

    #[test]
    fn union_rejects_duplicate_ids() {
        let a = binary_pairs("A", 2);
        let err = union(vec![(binary_desc("A"), a.clone()), (binary_desc("A2"), a)]).unwrap_err();
        assert!(matches!(err, Error::DuplicatePairId(id) if id == "A/000000"));
    }

    proptest! {
        #[test]
        fn conversion_picks_extremes(toxicities in prop::collection::vec(0.0f64..1.0, 2..8)) {
            let g = group(&toxicities);
            let ordered = numerical_to_ordinal(&g, "toxicity", LabelDirection::LowerIsBetter).unwrap();
            let (chosen, rejected) = ordinal_to_binary(&ordered).unwrap();
            let lo = chosen.scores.get("toxicity").unwrap();
            let hi = rejected.scores.get("toxicity").unwrap();
            let q = quality_score(&g, "toxicity").unwrap();
            prop_assert_eq!(q, hi - lo);
            for &a in &toxicities {
                prop_assert!(lo <= a && a <= hi);
                for &b in &toxicities {
                    prop_assert!((a - b).abs() <= q);
                }
            }
        }

        #[test]
        fn union_preserves_sizes(sizes in prop::collection::vec(0usize..20, 0..5)) {
            let sources: Vec<_> = sizes
                .iter()
                .enumerate()
                .map(|(i, &n)| {
                    let id = format!("s{i}");
                    (binary_desc(&id), binary_pairs(&id, n))
                })
                .collect();
            let (all, counts) = union(sources).unwrap();
            prop_assert_eq!(all.len(), sizes.iter().sum::<usize>());
            prop_assert_eq!(counts.iter().map(|c| c.pairs).collect::<Vec<_>>(), sizes);
        }
    }
}
