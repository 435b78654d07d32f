use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::Label;
use crate::seeds;

pub const DEFAULT_RATIOS: [f64; 3] = [0.8, 0.1, 0.1];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
    pub ratios: [f64; 3],
    pub seed: u64,
}

/// Largest-remainder allocation of `n` items over `ratios`; ties in the
/// fractional part go to the earlier part.
pub fn allocate(n: usize, ratios: &[f64; 3]) -> [usize; 3] {
    let quotas = ratios.map(|r| n as f64 * r);
    // tolerate representation error such as 505 × 0.1 = 50.500000000000007
    let mut counts = quotas.map(|q| (q + 1e-9).floor() as usize);
    let mut frac: Vec<(usize, f64)> = quotas
        .iter()
        .zip(&counts)
        .map(|(q, &c)| (q - c as f64).max(0.0))
        .enumerate()
        .collect();
    frac.sort_by(|a, b| {
        let d = b.1 - a.1;
        if d.abs() <= 1e-9 {
            a.0.cmp(&b.0)
        } else {
            b.1.total_cmp(&a.1)
        }
    });
    let assigned: usize = counts.iter().sum();
    for &(part, _) in frac.iter().take(n.saturating_sub(assigned)) {
        counts[part] += 1;
    }
    counts
}

fn validate_ratios(ratios: &[f64; 3]) -> Result<()> {
    if ratios.iter().any(|r| !(r.is_finite() && *r > 0.0)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split ratios must be positive and sum to 1, got {ratios:?}")));
    }
    Ok(())
}

/// Per-class largest-remainder split, shuffled within class.
///
/// Subject lists in each part keep their input order.
pub fn stratified_split(subjects: &[(String, Label)], ratios: [f64; 3], seed: u64) -> Result<SplitAssignment> {
    validate_ratios(&ratios)?;
    let mut by_class: BTreeMap<Label, Vec<usize>> = BTreeMap::new();
    for (i, (_, label)) in subjects.iter().enumerate() {
        by_class.entry(*label).or_default().push(i);
    }
    if by_class.len() < 2 {
        return Err(Error::Data("stratified split needs both classes".into()));
    }
    let mut rng = seeds::stream(seed, seeds::SPLIT);
    let mut part_of = vec![0usize; subjects.len()];
    for (label, mut members) in by_class {
        if members.len() < 3 {
            return Err(Error::Data(format!(
                "class {} has {} subjects, fewer than the 3 split parts",
                label.index(),
                members.len()
            )));
        }
        let counts = allocate(members.len(), &ratios);
        members.shuffle(&mut rng);
        let mut it = members.into_iter();
        for (part, &c) in counts.iter().enumerate() {
            for i in it.by_ref().take(c) {
                part_of[i] = part;
            }
        }
    }
    let mut parts: [Vec<String>; 3] = Default::default();
    for (i, (id, _)) in subjects.iter().enumerate() {
        parts[part_of[i]].push(id.clone());
    }
    let [train, validation, test] = parts;
    Ok(SplitAssignment { train, validation, test, ratios, seed })
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;

    use proptest::prelude::*;

    use super::*;

    fn cohort(n_pos: usize, n_neg: usize) -> Vec<(String, Label)> {
        (0..n_pos)
            .map(|i| (format!("p{i}"), Label::Asd))
            .chain((0..n_neg).map(|i| (format!("n{i}"), Label::Control)))
            .collect()
    }

    fn class_count(ids: &[String], prefix: char) -> usize {
        ids.iter().filter(|s| s.starts_with(prefix)).count()
    }

    #[test]
    fn balanced_hundred() {
        let s = stratified_split(&cohort(50, 50), DEFAULT_RATIOS, 3).unwrap();
        for (part, want) in [(&s.train, 40), (&s.validation, 5), (&s.test, 5)] {
            assert_eq!(class_count(part, 'p'), want);
            assert_eq!(class_count(part, 'n'), want);
        }
        assert_eq!(stratified_split(&cohort(50, 50), DEFAULT_RATIOS, 3).unwrap(), s);
        assert_ne!(stratified_split(&cohort(50, 50), DEFAULT_RATIOS, 4).unwrap(), s);
    }

    #[test]
    fn benchmark_cohort_test_size() {
        let s = stratified_split(&cohort(505, 530), DEFAULT_RATIOS, 0).unwrap();
        assert_eq!(allocate(505, &DEFAULT_RATIOS), [404, 51, 50]);
        assert_eq!(allocate(530, &DEFAULT_RATIOS), [424, 53, 53]);
        assert_eq!(s.test.len(), 103);
        let share = class_count(&s.test, 'p') as f64 / s.test.len() as f64;
        assert!((share - 505.0 / 1035.0).abs() * s.test.len() as f64 <= 1.0);
    }

    #[test]
    fn invalid_inputs() {
        assert!(stratified_split(&cohort(2, 10), DEFAULT_RATIOS, 0).is_err());
        assert!(stratified_split(&cohort(0, 10), DEFAULT_RATIOS, 0).is_err());
        assert!(stratified_split(&cohort(10, 10), [0.5, 0.3, 0.3], 0).is_err());
        assert!(stratified_split(&cohort(10, 10), [1.0, 0.0, 0.0], 0).is_err());
    }

    proptest! {
        #[test]
        fn split_is_a_stratified_partition(n_pos in 3usize..80, n_neg in 3usize..80, seed in 0u64..1000) {
            let subjects = cohort(n_pos, n_neg);
            let s = stratified_split(&subjects, DEFAULT_RATIOS, seed).unwrap();
            let all: Vec<&String> = s.train.iter().chain(&s.validation).chain(&s.test).collect();
            prop_assert_eq!(all.len(), subjects.len());
            prop_assert_eq!(all.iter().collect::<HashSet<_>>().len(), subjects.len());
            for (prefix, n) in [('p', n_pos), ('n', n_neg)] {
                for (part, r) in [(&s.train, 0.8), (&s.validation, 0.1), (&s.test, 0.1)] {
                    let got = class_count(part, prefix) as f64;
                    prop_assert!((got - r * n as f64).abs() < 1.0 + 1e-9);
                }
            }
        }
    }
}
