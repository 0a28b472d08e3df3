//! Partition agreement and synthetic-scene scoring.

use std::collections::BTreeMap;

use ograph_core::cgsm::InstanceMap;
use ograph_core::ingest::Segment;

use crate::synth::GroundTruth;

fn choose2(n: u64) -> f64 {
    (n as f64) * (n.saturating_sub(1) as f64) / 2.0
}

/// Adjusted Rand Index of two labelings of the same items. Identical
/// partitions (including the all-singleton and single-cluster cases) score
/// 1.
pub fn adjusted_rand_index<A: Ord + Copy, B: Ord + Copy>(a: &[A], b: &[B]) -> f64 {
    assert_eq!(a.len(), b.len(), "labelings must cover the same items");
    let n = a.len() as u64;
    if n < 2 {
        return 1.0;
    }
    let mut table: BTreeMap<(A, B), u64> = BTreeMap::new();
    let mut rows: BTreeMap<A, u64> = BTreeMap::new();
    let mut cols: BTreeMap<B, u64> = BTreeMap::new();
    for (x, y) in a.iter().zip(b) {
        *table.entry((*x, *y)).or_default() += 1;
        *rows.entry(*x).or_default() += 1;
        *cols.entry(*y).or_default() += 1;
    }
    let index: f64 = table.values().map(|c| choose2(*c)).sum();
    let sum_a: f64 = rows.values().map(|c| choose2(*c)).sum();
    let sum_b: f64 = cols.values().map(|c| choose2(*c)).sum();
    let expected = sum_a * sum_b / choose2(n);
    let max = (sum_a + sum_b) / 2.0;
    if max == expected {
        return 1.0;
    }
    (index - expected) / (max - expected)
}

/// How a merge run compares with the generator's ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct MergeScore {
    /// ARI over surviving segments that cover exactly one object.
    pub ari: f64,
    pub planted: usize,
    pub planted_removed: usize,
    /// Regular segments wrongly discarded as under-segments.
    pub false_removals: usize,
}

impl MergeScore {
    pub fn removal_rate(&self) -> f64 {
        if self.planted == 0 {
            1.0
        } else {
            self.planted_removed as f64 / self.planted as f64
        }
    }
}

pub fn score_merge(segments: &[Segment], map: &InstanceMap, truth: &GroundTruth) -> MergeScore {
    let instance_of: BTreeMap<u32, usize> = map.source_to_instance().into_iter().collect();
    let removed: std::collections::BTreeSet<u32> = map.removed_sources.iter().copied().collect();
    let mut predicted = Vec::new();
    let mut actual = Vec::new();
    let (mut planted, mut planted_removed, mut false_removals) = (0, 0, 0);
    for s in segments {
        let Some(gt) = truth.segment(s.t, s.index) else { continue };
        if gt.under_segment {
            planted += 1;
            if removed.contains(&s.id) {
                planted_removed += 1;
            }
            continue;
        }
        if removed.contains(&s.id) {
            false_removals += 1;
            continue;
        }
        if let Some(k) = instance_of.get(&s.id) {
            predicted.push(*k);
            actual.push(gt.objects[0]);
        }
    }
    MergeScore {
        ari: adjusted_rand_index(&predicted, &actual),
        planted,
        planted_removed,
        false_removals,
    }
}
