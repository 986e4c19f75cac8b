use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Sex, SubjectRecord};

pub const MIN_COHORT: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    Train,
    Val,
    Test,
}

/// Identity and demographics of one subject, without its volumes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubjectInfo {
    pub subject_id: String,
    pub age_days: u32,
    pub sex: Sex,
}

impl From<&SubjectRecord> for SubjectInfo {
    fn from(r: &SubjectRecord) -> Self {
        SubjectInfo {
            subject_id: r.subject_id.clone(),
            age_days: r.age_days,
            sex: r.sex,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub assignment: BTreeMap<String, Partition>,
}

impl SplitAssignment {
    /// Subject ids of one partition, sorted.
    pub fn ids(&self, p: Partition) -> Vec<String> {
        self.assignment.iter().filter(|(_, &q)| q == p).map(|(k, _)| k.clone()).collect()
    }

    pub fn counts(&self) -> [usize; 3] {
        [Partition::Train, Partition::Val, Partition::Test].map(|p| self.assignment.values().filter(|&&q| q == p).count())
    }
}

/// Largest-remainder apportionment of `round(fraction · n)` over strata.
fn apportion(sizes: &[usize], fraction: f64, caps: &[usize]) -> Vec<usize> {
    let n: usize = sizes.iter().sum();
    let total = (fraction * n as f64).round() as usize;
    let quotas: Vec<f64> = sizes.iter().map(|&s| fraction * s as f64).collect();
    let mut out: Vec<usize> = quotas.iter().zip(caps).map(|(q, &c)| (q.floor() as usize).min(c)).collect();
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    // larger remainder first; earlier stratum on ties
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let mut left = total.saturating_sub(out.iter().sum());
    while left > 0 {
        let before = left;
        for &s in &order {
            if left > 0 && out[s] < caps[s] {
                out[s] += 1;
                left -= 1;
            }
        }
        if left == before {
            break;
        }
    }
    out
}

/// Age- and sex-balanced split.
///
/// Subjects are stratified by sex × age tercile (terciles by age rank over
/// the cohort). The validation and test totals are `round(fraction · n)`,
/// spread over strata in proportion to their size by largest remainders;
/// each stratum is shuffled with `seed` before assignment.
pub fn split_dataset(cohort: &[SubjectInfo], fractions: [f64; 3], seed: u64) -> Result<SplitAssignment> {
    let n = cohort.len();
    if n < MIN_COHORT {
        return Err(Error::Argument(format!("cohort of {n} is below the minimum of {MIN_COHORT}")));
    }
    if fractions.iter().any(|f| !(f.is_finite() && *f >= 0.0)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Argument(format!("split fractions {fractions:?} must sum to 1")));
    }
    let mut ids: Vec<&SubjectInfo> = cohort.iter().collect();
    ids.sort_by(|a, b| a.subject_id.cmp(&b.subject_id));
    if ids.windows(2).any(|w| w[0].subject_id == w[1].subject_id) {
        return Err(Error::Argument("duplicate subject ids in cohort".into()));
    }
    let mut by_age = ids.clone();
    by_age.sort_by(|a, b| a.age_days.cmp(&b.age_days).then(a.subject_id.cmp(&b.subject_id)));
    let tercile: BTreeMap<&str, usize> = by_age
        .iter()
        .enumerate()
        .map(|(rank, s)| (s.subject_id.as_str(), 3 * rank / n))
        .collect();
    let mut strata: Vec<Vec<&SubjectInfo>> = vec![Vec::new(); 6];
    for s in &ids {
        let sex = usize::from(s.sex == Sex::F);
        strata[sex * 3 + tercile[s.subject_id.as_str()]].push(s);
    }
    let sizes: Vec<usize> = strata.iter().map(Vec::len).collect();
    let n_test = apportion(&sizes, fractions[2], &sizes);
    let room: Vec<usize> = sizes.iter().zip(&n_test).map(|(s, t)| s - t).collect();
    let n_val = apportion(&sizes, fractions[1], &room);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignment = BTreeMap::new();
    for (k, stratum) in strata.iter_mut().enumerate() {
        stratum.shuffle(&mut rng);
        for (i, s) in stratum.iter().enumerate() {
            let p = if i < n_test[k] {
                Partition::Test
            } else if i < n_test[k] + n_val[k] {
                Partition::Val
            } else {
                Partition::Train
            };
            assignment.insert(s.subject_id.clone(), p);
        }
    }
    Ok(SplitAssignment { assignment })
}

/// Atlas subject: `explicit` when given, otherwise the youngest subject
/// (ties go to the lexicographically smallest id).
pub fn select_atlas_id(cohort: &[SubjectInfo], explicit: Option<&str>) -> Result<String> {
    if let Some(id) = explicit {
        return cohort
            .iter()
            .find(|s| s.subject_id == id)
            .map(|s| s.subject_id.clone())
            .ok_or_else(|| Error::Argument(format!("atlas subject '{id}' is not in the cohort")));
    }
    cohort
        .iter()
        .min_by(|a, b| a.age_days.cmp(&b.age_days).then(a.subject_id.cmp(&b.subject_id)))
        .map(|s| s.subject_id.clone())
        .ok_or_else(|| Error::Argument("cannot select an atlas from an empty cohort".into()))
}

/// Atlas labels and reference CT of the selected subject.
pub fn select_atlas(
    cohort: &[SubjectRecord],
    explicit: Option<&str>,
) -> Result<(crate::volume::LabelMap, crate::volume::Volume)> {
    let infos: Vec<SubjectInfo> = cohort.iter().map(SubjectInfo::from).collect();
    let id = select_atlas_id(&infos, explicit)?;
    let r = cohort.iter().find(|r| r.subject_id == id).expect("selected from this cohort");
    Ok((r.bones_sutures.clone(), r.ct.clone()))
}
