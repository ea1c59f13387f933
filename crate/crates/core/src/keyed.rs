//! Keyed policy families: `k` independent policies, one per key, with a
//! policy drawn per mini-batch during training.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use crate::dfs::{make_policy, DfsConfig, DfsPolicy};
use crate::error::{Error, Result};
use crate::rng::SplitMix64;

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyFamily {
    pub cfg: DfsConfig,
    pub keys: Vec<u64>,
    pub policies: Vec<DfsPolicy>,
}

impl PolicyFamily {
    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn policy(&self, index: usize) -> &DfsPolicy {
        &self.policies[index]
    }

    /// Index of the policy created from `key`, if it belongs to the family.
    pub fn index_of(&self, key: u64) -> Option<usize> {
        self.keys.iter().position(|&k| k == key)
    }
}

/// Materialises one policy per key. Policy ids follow key order.
pub fn family_create(keys: &[u64], cfg: &DfsConfig, shape: (usize, usize, usize)) -> Result<PolicyFamily> {
    if keys.is_empty() {
        return Err(Error::Config("policy family needs at least one key".into()));
    }
    let mut seen = HashSet::new();
    for &k in keys {
        if !seen.insert(k) {
            return Err(Error::DuplicateKey(k));
        }
    }
    let policies = keys
        .iter()
        .enumerate()
        .map(|(i, &k)| {
            let mut p = make_policy(k, cfg, shape)?;
            p.policy_id = i as u32;
            Ok(p)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PolicyFamily { cfg: cfg.clone(), keys: keys.to_vec(), policies })
}

/// Uniform policy index for the next mini-batch.
pub fn sample_policy(family: &PolicyFamily, rng: &mut SplitMix64) -> usize {
    if family.len() == 1 {
        return 0;
    }
    rng.below(family.len())
}

pub fn format_keys(keys: &[u64]) -> String {
    let mut s = String::new();
    for k in keys {
        writeln!(s, "{k:016x}").unwrap();
    }
    s
}

/// Parses a key file: one 16-hex-digit key per line. Blank lines and `#`
/// comments are ignored.
pub fn parse_keys(text: &str) -> Result<Vec<u64>> {
    let mut keys = Vec::new();
    let mut offset = 0u64;
    for line in text.lines() {
        let t = line.trim();
        if !(t.is_empty() || t.starts_with('#')) {
            if t.len() != 16 {
                return Err(Error::Format { offset, reason: format!("key {t:?} is not 16 hex digits") });
            }
            let k = u64::from_str_radix(t, 16)
                .map_err(|e| Error::Format { offset, reason: format!("key {t:?}: {e}") })?;
            keys.push(k);
        }
        offset += line.len() as u64 + 1;
    }
    Ok(keys)
}

pub fn read_keys(path: &Path) -> Result<Vec<u64>> {
    parse_keys(&std::fs::read_to_string(path)?)
}

pub fn write_keys(path: &Path, keys: &[u64]) -> Result<()> {
    Ok(std::fs::write(path, format_keys(keys))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    const SHAPE: (usize, usize, usize) = (6, 16, 16);

    #[test]
    fn rejects_duplicates_and_empty() {
        let cfg = DfsConfig::default();
        assert!(matches!(family_create(&[1, 2, 1], &cfg, SHAPE), Err(Error::DuplicateKey(1))));
        assert!(family_create(&[], &cfg, SHAPE).is_err());
    }

    #[test]
    fn single_key_family_is_the_base_policy() {
        let cfg = DfsConfig::default();
        let fam = family_create(&[42], &cfg, SHAPE).unwrap();
        assert_eq!(fam.policies[0], make_policy(42, &cfg, SHAPE).unwrap());
        let mut rng = SplitMix64::new(0);
        assert!((0..100).all(|_| sample_policy(&fam, &mut rng) == 0));
    }

    #[test]
    fn family_is_deterministic_and_diverse() {
        let cfg = DfsConfig::default();
        let keys = [11, 22, 33, 44];
        let a = family_create(&keys, &cfg, SHAPE).unwrap();
        let b = family_create(&keys, &cfg, SHAPE).unwrap();
        assert_eq!(a, b);
        for (i, p) in a.policies.iter().enumerate() {
            assert_eq!(p.policy_id, i as u32);
            for q in &a.policies[i + 1..] {
                assert!(p.chan_perms != q.chan_perms || p.patch_shifts != q.patch_shifts);
            }
        }
    }

    #[test]
    fn sampling_is_uniform() {
        let fam = family_create(&[1, 2, 3, 4], &DfsConfig::default(), SHAPE).unwrap();
        let mut rng = SplitMix64::new(9);
        let mut hist = [0usize; 4];
        for _ in 0..100_000 {
            hist[sample_policy(&fam, &mut rng)] += 1;
        }
        for h in hist {
            assert!((h as f64 / 1e5 - 0.25).abs() < 0.01);
        }
    }

    #[test]
    fn key_file_round_trip() {
        let keys = [0u64, 0xdead_beef_0123_4567, u64::MAX];
        let text = format_keys(&keys);
        assert!(text.lines().all(|l| l.len() == 16));
        assert_eq!(parse_keys(&text).unwrap(), keys);
        assert!(parse_keys("abc\n").is_err());
        assert!(parse_keys("zzzzzzzzzzzzzzzz\n").is_err());
    }
}
