//! Greedy merging of confusable classes and re-scoring under the merged labels.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::infer::{argmax, evaluate_mapped, ConfusionMatrix, Dataset, EvalResult, Network};

/// A partition of class indices into groups. Groups are ordered by their
/// smallest member and members are sorted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassGrouping {
    groups: Vec<Vec<usize>>,
    mapping: Vec<usize>,
}

impl ClassGrouping {
    pub fn identity(num_classes: usize) -> Result<Self> {
        ClassGrouping::from_groups((0..num_classes).map(|c| vec![c]).collect(), num_classes)
    }

    /// Validates that `groups` partitions `0..num_classes` into at least two groups.
    pub fn from_groups(mut groups: Vec<Vec<usize>>, num_classes: usize) -> Result<Self> {
        let mut mapping = vec![usize::MAX; num_classes];
        for g in groups.iter_mut() {
            if g.is_empty() {
                return Err(Error::Validation("empty class group".into()));
            }
            g.sort_unstable();
        }
        groups.sort_by_key(|g| g[0]);
        for (gi, g) in groups.iter().enumerate() {
            for &c in g {
                let slot = mapping.get_mut(c).ok_or_else(|| {
                    Error::Validation(format!("class {c} outside [0, {num_classes})"))
                })?;
                if *slot != usize::MAX {
                    return Err(Error::Validation(format!(
                        "class {c} appears in two groups"
                    )));
                }
                *slot = gi;
            }
        }
        if let Some(c) = mapping.iter().position(|&g| g == usize::MAX) {
            return Err(Error::Validation(format!("class {c} is not in any group")));
        }
        if groups.len() < 2 {
            return Err(Error::Validation(
                "a grouping must keep at least two groups".into(),
            ));
        }
        Ok(ClassGrouping { groups, mapping })
    }

    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }

    pub fn num_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn num_classes(&self) -> usize {
        self.mapping.len()
    }

    pub fn group_of(&self, class: usize) -> usize {
        self.mapping[class]
    }

    /// Member names joined with `+`.
    pub fn group_names(&self, class_names: &[String]) -> Vec<String> {
        self.groups
            .iter()
            .map(|g| {
                g.iter()
                    .map(|&c| class_names[c].as_str())
                    .collect::<Vec<_>>()
                    .join("+")
            })
            .collect()
    }

    /// One line per group, comma-separated class names.
    pub fn to_text(&self, class_names: &[String]) -> String {
        let mut out = String::new();
        for g in &self.groups {
            let names: Vec<&str> = g.iter().map(|&c| class_names[c].as_str()).collect();
            out.push_str(&names.join(","));
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str, class_names: &[String]) -> Result<Self> {
        let groups = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(|line| {
                line.split(',')
                    .map(|n| {
                        let n = n.trim();
                        class_names
                            .iter()
                            .position(|c| c == n)
                            .ok_or_else(|| Error::Validation(format!("unknown class '{n}'")))
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        ClassGrouping::from_groups(groups, class_names.len())
    }
}

/// Merge score of two groups as an exact fraction: symmetrized confusion mass
/// between them over their combined sample count.
fn merge_score(counts: &[Vec<u64>], rows: &[u64], a: &[usize], b: &[usize]) -> (u128, u128) {
    let mut mass = 0u128;
    for &i in a {
        for &j in b {
            mass += counts[i][j] as u128 + counts[j][i] as u128;
        }
    }
    let n: u128 = a.iter().chain(b).map(|&c| rows[c] as u128).sum();
    if n == 0 {
        (0, 1)
    } else {
        (mass, n)
    }
}

fn cmp_fraction(x: (u128, u128), y: (u128, u128)) -> Ordering {
    (x.0 * y.1).cmp(&(y.0 * x.1))
}

/// Merges the highest-scoring pair of groups `k_merges` times. Ties go to the
/// lexicographically smallest `(i, j)` group-index pair; with no off-diagonal
/// mass at all that is the first two groups.
pub fn propose_merge(confusion: &ConfusionMatrix, k_merges: usize) -> Result<ClassGrouping> {
    let k = confusion.num_classes();
    if k < 2 || k_merges >= k - 1 {
        return Err(Error::Argument(format!(
            "{k_merges} merges on {k} classes would leave fewer than two groups"
        )));
    }
    let rows = confusion.row_sums();
    let mut groups: Vec<Vec<usize>> = (0..k).map(|c| vec![c]).collect();
    for _ in 0..k_merges {
        let mut best = (0, 1);
        let mut best_score = merge_score(&confusion.counts, &rows, &groups[0], &groups[1]);
        for i in 0..groups.len() {
            for j in i + 1..groups.len() {
                let s = merge_score(&confusion.counts, &rows, &groups[i], &groups[j]);
                if cmp_fraction(s, best_score) == Ordering::Greater {
                    best = (i, j);
                    best_score = s;
                }
            }
        }
        let absorbed = groups.remove(best.1);
        groups[best.0].extend(absorbed);
        groups[best.0].sort_unstable();
    }
    ClassGrouping::from_groups(groups, k)
}

/// Group-level confusion `P C P^T`.
pub fn group_confusion(confusion: &ConfusionMatrix, grouping: &ClassGrouping) -> ConfusionMatrix {
    let mut out = ConfusionMatrix::new(grouping.group_names(&confusion.class_names));
    for (i, row) in confusion.counts.iter().enumerate() {
        for (j, &c) in row.iter().enumerate() {
            out.counts[grouping.group_of(i)][grouping.group_of(j)] += c;
        }
    }
    out
}

/// Re-scores an evaluation with predictions and labels mapped through `grouping`.
pub fn regroup(result: &EvalResult, grouping: &ClassGrouping) -> Result<EvalResult> {
    if grouping.num_classes() != result.confusion.num_classes() {
        return Err(Error::Argument(format!(
            "grouping covers {} classes, result has {}",
            grouping.num_classes(),
            result.confusion.num_classes()
        )));
    }
    let confusion = group_confusion(&result.confusion, grouping);
    Ok(EvalResult {
        accuracy: confusion.accuracy(),
        sample_count: result.sample_count,
        predictions: result
            .predictions
            .iter()
            .map(|&p| grouping.group_of(p))
            .collect(),
        confusion,
    })
}

/// How a grouped prediction is formed from the network output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GroupScoring {
    /// Argmax over classes, then map the winner to its group.
    #[default]
    RemapArgmax,
    /// Sum the outputs of each group's members, then argmax over groups.
    SumOutputs,
}

pub fn evaluate_grouped(
    net: &Network,
    dataset: &Dataset,
    grouping: &ClassGrouping,
    scoring: GroupScoring,
) -> Result<EvalResult> {
    if grouping.num_classes() != dataset.num_classes {
        return Err(Error::Argument(format!(
            "grouping covers {} classes, dataset has {}",
            grouping.num_classes(),
            dataset.num_classes
        )));
    }
    let names = grouping.group_names(&dataset.class_names());
    let map_label = |l: u32| grouping.group_of(l as usize);
    match scoring {
        GroupScoring::RemapArgmax => {
            evaluate_mapped(net, dataset, names, &map_label, &|out: &[f32]| {
                grouping.group_of(argmax(out))
            })
        }
        GroupScoring::SumOutputs => {
            evaluate_mapped(net, dataset, names, &map_label, &|out: &[f32]| {
                let sums: Vec<f32> = grouping
                    .groups()
                    .iter()
                    .map(|g| g.iter().map(|&c| out[c]).sum())
                    .collect();
                argmax(&sums)
            })
        }
    }
}
