//! Seeded index samplers. Every shuffle draws from a fresh
//! `Rng::new(seed, Stream::Sampling)`, so "shuffle with seed s" means the
//! same thing wherever it appears.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};
use crate::rng::{Rng, Stream};

fn seeded_shuffle<X>(items: &mut [X], seed: u64) {
    Rng::new(seed, Stream::Sampling).shuffle(items);
}

/// Members of `class` in index order, then shuffled with `seed`.
pub(crate) fn shuffled_class_members(ds: &Dataset, class: usize, seed: u64) -> Vec<usize> {
    let mut members: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels[i] == class).collect();
    seeded_shuffle(&mut members, seed);
    members
}

/// Per class: stable filter, seeded shuffle, first `n`; then concatenate in
/// class order and shuffle once more with the same seed.
pub fn nshot_sample(ds: &Dataset, n_per_class: usize, seed: u64) -> Result<Vec<usize>> {
    if n_per_class == 0 {
        return Err(Error::config("n-shot sampling needs at least one example per class"));
    }
    let mut picked = Vec::with_capacity(ds.num_classes * n_per_class);
    for class in 0..ds.num_classes {
        let members = shuffled_class_members(ds, class, seed);
        if members.len() < n_per_class {
            return Err(Error::InsufficientClass {
                class,
                available: members.len(),
                requested: n_per_class,
            });
        }
        picked.extend_from_slice(&members[..n_per_class]);
    }
    seeded_shuffle(&mut picked, seed);
    Ok(picked)
}

/// First `n` of a seeded permutation of all indices; no class balance.
pub fn random_sample(ds: &Dataset, n: usize, seed: u64) -> Result<Vec<usize>> {
    if n > ds.len() {
        return Err(Error::config(format!("cannot sample {n} of {} examples", ds.len())));
    }
    let mut idx: Vec<usize> = (0..ds.len()).collect();
    seeded_shuffle(&mut idx, seed);
    idx.truncate(n);
    Ok(idx)
}

/// The evaluation subset: first `size` of a seeded permutation.
pub fn fixed_test_subset(ds: &Dataset, size: usize, seed: u64) -> Result<Vec<usize>> {
    if size > ds.len() {
        return Err(Error::config(format!(
            "test subset of {size} requested from {} examples",
            ds.len()
        )));
    }
    random_sample(ds, size, seed)
}

/// How the defense training set is assembled.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum SamplerMode {
    /// `n` random training examples, attacked.
    OneAdv,
    /// `OneAdv` plus the same originals, clean.
    OneAdvOneClean,
    /// `k * n` random training examples, attacked.
    KAdv(usize),
    /// `n / K` examples per class via the n-shot sampler, attacked.
    OneAdvBalanced,
}

impl fmt::Display for SamplerMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SamplerMode::OneAdv => f.write_str("1adv"),
            SamplerMode::OneAdvOneClean => f.write_str("1adv-1clean"),
            SamplerMode::KAdv(k) => write!(f, "{k}adv"),
            SamplerMode::OneAdvBalanced => f.write_str("1adv-balanced"),
        }
    }
}

impl FromStr for SamplerMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "1adv" => Ok(SamplerMode::OneAdv),
            "1adv-1clean" => Ok(SamplerMode::OneAdvOneClean),
            "1adv-balanced" => Ok(SamplerMode::OneAdvBalanced),
            _ => s
                .strip_suffix("adv")
                .and_then(|k| k.parse::<usize>().ok())
                .filter(|&k| k >= 1)
                .map(SamplerMode::KAdv)
                .ok_or_else(|| Error::config(format!("unknown sampler mode {s:?}"))),
        }
    }
}

impl TryFrom<String> for SamplerMode {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<SamplerMode> for String {
    fn from(m: SamplerMode) -> String {
        m.to_string()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub mode: SamplerMode,
    pub seed: u64,
    /// Base set size; `None` means one per class.
    pub shots: Option<usize>,
    /// Re-draw examples whose attack failed instead of keeping them flagged.
    pub strict: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            mode: SamplerMode::OneAdv,
            seed: 42,
            shots: None,
            strict: false,
        }
    }
}

impl SamplerConfig {
    pub fn base_size(&self, num_classes: usize) -> usize {
        self.shots.unwrap_or(num_classes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::RngCore;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy(labels: Vec<usize>, k: usize) -> Dataset {
        let n = labels.len();
        Dataset::new("toy", Tensor::zeros(&[n, 1, 1, 1]), labels, k).unwrap()
    }

    /// Independent Fisher-Yates over raw ChaCha8 output.
    fn trace_shuffle(items: &mut [usize], seed: u64) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        r.set_stream(2 << 48);
        for i in (1..items.len()).rev() {
            let j = ((r.next_u64() as u128 * (i as u128 + 1)) >> 64) as usize;
            items.swap(i, j);
        }
    }

    #[test]
    fn one_shot_is_balanced() {
        let ds = toy((0..50).map(|i| i % 10).collect(), 10);
        let idx = nshot_sample(&ds, 1, 3).unwrap();
        assert_eq!(idx.len(), 10);
        let mut classes: Vec<usize> = idx.iter().map(|&i| ds.labels[i]).collect();
        classes.sort();
        assert_eq!(classes, (0..10).collect::<Vec<_>>());
        assert_eq!(idx, nshot_sample(&ds, 1, 3).unwrap());
    }

    #[test]
    fn nshot_matches_trace_oracle() {
        let labels = vec![2, 0, 1, 1, 2, 0, 0, 2, 1, 0, 2, 1];
        let ds = toy(labels.clone(), 3);
        let seed = 1234;
        let mut expect = Vec::new();
        for c in 0..3 {
            let mut m: Vec<usize> = (0..12).filter(|&i| labels[i] == c).collect();
            trace_shuffle(&mut m, seed);
            expect.extend_from_slice(&m[..2]);
        }
        trace_shuffle(&mut expect, seed);
        assert_eq!(nshot_sample(&ds, 2, seed).unwrap(), expect);
    }

    #[test]
    fn insufficient_class_names_it() {
        let ds = toy(vec![0, 0, 1, 0], 2);
        match nshot_sample(&ds, 2, 0) {
            Err(Error::InsufficientClass { class, available, .. }) => assert_eq!((class, available), (1, 1)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn random_sample_full_is_permutation() {
        let ds = toy(vec![0; 17], 1);
        let mut idx = random_sample(&ds, 17, 9).unwrap();
        idx.sort();
        assert_eq!(idx, (0..17).collect::<Vec<_>>());
        assert!(random_sample(&ds, 18, 9).is_err());
        assert!(fixed_test_subset(&ds, 18, 9).is_err());
    }

    #[test]
    fn random_pairs_same_class_half_the_time() {
        let ds = toy((0..100).map(|i| i % 2).collect(), 2);
        let same = (0..1000u64)
            .filter(|&s| {
                let idx = random_sample(&ds, 2, s).unwrap();
                ds.labels[idx[0]] == ds.labels[idx[1]]
            })
            .count();
        let freq = same as f64 / 1000.0;
        // exact expectation 49/99
        assert!((freq - 0.5).abs() <= 0.05, "{freq}");
    }

    #[test]
    fn mode_strings_round_trip() {
        for m in [
            SamplerMode::OneAdv,
            SamplerMode::OneAdvOneClean,
            SamplerMode::KAdv(4),
            SamplerMode::OneAdvBalanced,
        ] {
            assert_eq!(m.to_string().parse::<SamplerMode>().unwrap(), m);
        }
        assert!("0adv".parse::<SamplerMode>().is_err());
        assert!("bogus".parse::<SamplerMode>().is_err());
    }
}
