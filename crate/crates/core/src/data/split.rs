//! Scenario splits into train / support / test.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::types::CsiSample;
use crate::config::{defaults, Scenario, ScenarioConfig};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Splits {
    pub train: Vec<CsiSample>,
    pub support: Vec<CsiSample>,
    pub test: Vec<CsiSample>,
}

impl Splits {
    pub fn len(&self) -> usize {
        self.train.len() + self.support.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Target domains named by the config, or the highest domain id present.
pub fn resolve_target_domains(samples: &[CsiSample], config: &ScenarioConfig) -> BTreeSet<usize> {
    if !config.target_domains.is_empty() {
        return config.target_domains.iter().copied().collect();
    }
    samples.iter().map(|s| s.domain).max().into_iter().collect()
}

/// Held-out class for the new-class scenario.
pub fn resolve_new_class(samples: &[CsiSample], config: &ScenarioConfig) -> Option<usize> {
    config
        .new_class
        .or_else(|| samples.iter().map(|s| s.label).max())
}

/// Groups sample indices by key, each group in chronological order.
fn chronological_groups<K: Ord>(
    samples: &[CsiSample],
    idx: impl Iterator<Item = usize>,
    key: impl Fn(&CsiSample) -> K,
) -> BTreeMap<K, Vec<usize>> {
    let mut groups: BTreeMap<K, Vec<usize>> = BTreeMap::new();
    for i in idx {
        groups.entry(key(&samples[i])).or_default().push(i);
    }
    for g in groups.values_mut() {
        g.sort_by_key(|&i| (samples[i].session, samples[i].start_ms, i));
    }
    groups
}

fn chronological_split(group: &[usize], train: &mut Vec<usize>, test: &mut Vec<usize>) {
    let cut = (group.len() as f64 * defaults::TRAIN_FRACTION).floor() as usize;
    train.extend_from_slice(&group[..cut]);
    test.extend_from_slice(&group[cut..]);
}

/// Draws `k` support samples per class (seeded), the remainder going to test.
fn shots(
    samples: &[CsiSample],
    idx: impl Iterator<Item = usize>,
    k: usize,
    classes: &BTreeSet<usize>,
    rng: &mut ChaCha8Rng,
    support: &mut Vec<usize>,
    test: &mut Vec<usize>,
) -> Result<()> {
    let groups = chronological_groups(samples, idx, |s| s.label);
    for &class in classes {
        let group = groups.get(&class).map(Vec::as_slice).unwrap_or(&[]);
        if group.len() < k {
            return Err(Error::InsufficientSupport {
                class,
                available: group.len(),
                required: k,
            });
        }
        let mut shuffled = group.to_vec();
        shuffled.shuffle(rng);
        let chosen: BTreeSet<usize> = shuffled[..k].iter().copied().collect();
        for &i in group {
            if chosen.contains(&i) {
                support.push(i);
            } else {
                test.push(i);
            }
        }
    }
    Ok(())
}

/// Partitions samples for a scenario.
///
/// * in-domain: per (domain, class) the first 90% by time train, the rest test.
/// * k-shot: non-target domains train; per target class `k` seeded draws support, rest test.
/// * zero-shot: non-target domains train, target domains test.
/// * new-class: held-out class goes to test except `k` support draws; other classes 90/10.
pub fn split_scenario(samples: &[CsiSample], config: &ScenarioConfig) -> Result<Splits> {
    if config.scenario.needs_shots() && config.k == 0 {
        return Err(Error::config("k", "must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_5017);
    let (mut train, mut support, mut test) = (Vec::new(), Vec::new(), Vec::new());
    let all = 0..samples.len();
    let classes: BTreeSet<usize> = samples.iter().map(|s| s.label).collect();
    match config.scenario {
        Scenario::InDomain => {
            for g in chronological_groups(samples, all, |s| (s.domain, s.label)).values() {
                chronological_split(g, &mut train, &mut test);
            }
        }
        Scenario::KShot | Scenario::ZeroShot => {
            let targets = resolve_target_domains(samples, config);
            let (tgt, src): (Vec<usize>, Vec<usize>) =
                all.partition(|&i| targets.contains(&samples[i].domain));
            if src.is_empty() {
                return Err(Error::config("target_domains", "no source-domain samples remain"));
            }
            if tgt.is_empty() {
                return Err(Error::config("target_domains", "no samples in the target domains"));
            }
            train = src;
            if config.scenario == Scenario::KShot {
                let tgt_classes: BTreeSet<usize> = classes.clone();
                shots(
                    samples,
                    tgt.into_iter(),
                    config.k,
                    &tgt_classes,
                    &mut rng,
                    &mut support,
                    &mut test,
                )?;
            } else {
                test = tgt;
            }
        }
        Scenario::NewClass => {
            let held = resolve_new_class(samples, config)
                .ok_or_else(|| Error::config("new_class", "no samples"))?;
            if !classes.contains(&held) {
                return Err(Error::config("new_class", format!("class {held} has no samples")));
            }
            let (new, old): (Vec<usize>, Vec<usize>) = all.partition(|&i| samples[i].label == held);
            for g in chronological_groups(samples, old.into_iter(), |s| (s.domain, s.label)).values() {
                chronological_split(g, &mut train, &mut test);
            }
            let only: BTreeSet<usize> = [held].into_iter().collect();
            shots(samples, new.into_iter(), config.k, &only, &mut rng, &mut support, &mut test)?;
        }
    }
    let take = |idx: Vec<usize>| idx.into_iter().map(|i| samples[i].clone()).collect();
    Ok(Splits {
        train: take(train),
        support: take(support),
        test: take(test),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::types::SampleShape;
    use proptest::prelude::*;

    fn samples(per: &[(usize, usize, usize)]) -> Vec<CsiSample> {
        // (domain, label, count)
        let mut out = Vec::new();
        for (sess, &(domain, label, n)) in per.iter().enumerate() {
            for i in 0..n {
                out.push(CsiSample {
                    data: vec![out.len() as f64; 2],
                    shape: SampleShape::new(1, 1),
                    label,
                    domain,
                    session: sess,
                    start_ms: i as u64 * 10,
                });
            }
        }
        out
    }

    fn cfg(scenario: Scenario, k: usize) -> ScenarioConfig {
        ScenarioConfig {
            scenario,
            k,
            ..Default::default()
        }
    }

    #[test]
    fn in_domain_is_chronological_90_10() {
        let s = samples(&[(0, 0, 100), (0, 1, 100)]);
        let sp = split_scenario(&s, &cfg(Scenario::InDomain, 1)).unwrap();
        assert_eq!(sp.train.len(), 180);
        assert_eq!(sp.test.len(), 20);
        assert!(sp.support.is_empty());
        for class in 0..2 {
            let last_train = sp.train.iter().filter(|x| x.label == class).map(|x| x.start_ms).max();
            let first_test = sp.test.iter().filter(|x| x.label == class).map(|x| x.start_ms).min();
            assert!(last_train < first_test);
        }
    }

    #[test]
    fn one_shot_support_has_one_per_class() {
        let s = samples(&[(0, 0, 10), (0, 1, 10), (0, 2, 10), (1, 0, 10), (1, 1, 10), (1, 2, 10)]);
        let sp = split_scenario(&s, &cfg(Scenario::KShot, 1)).unwrap();
        assert_eq!(sp.support.len(), 3);
        assert!(sp.support.iter().all(|x| x.domain == 1));
        assert_eq!(sp.train.len(), 30);
        assert!(sp.train.iter().all(|x| x.domain == 0));
        assert_eq!(sp.test.len(), 27);
    }

    #[test]
    fn zero_shot_support_is_empty() {
        let s = samples(&[(0, 0, 10), (1, 0, 10)]);
        let sp = split_scenario(&s, &cfg(Scenario::ZeroShot, 1)).unwrap();
        assert!(sp.support.is_empty());
        assert_eq!(sp.test.len(), 10);
    }

    #[test]
    fn insufficient_support_is_reported() {
        let s = samples(&[(0, 0, 10), (0, 1, 10), (1, 0, 10), (1, 1, 2)]);
        let err = split_scenario(&s, &cfg(Scenario::KShot, 3)).unwrap_err();
        assert!(matches!(err, Error::InsufficientSupport { class: 1, available: 2, required: 3 }));
    }

    #[test]
    fn new_class_holds_out_one_class() {
        let s = samples(&[(0, 0, 20), (0, 1, 20), (0, 2, 20)]);
        let sp = split_scenario(&s, &cfg(Scenario::NewClass, 2)).unwrap();
        assert!(sp.train.iter().all(|x| x.label != 2));
        assert_eq!(sp.support.len(), 2);
        assert!(sp.support.iter().all(|x| x.label == 2));
        assert_eq!(sp.test.iter().filter(|x| x.label == 2).count(), 18);
    }

    #[test]
    fn seeded_support_draw_is_deterministic() {
        let s = samples(&[(0, 0, 10), (1, 0, 30)]);
        let a = split_scenario(&s, &cfg(Scenario::KShot, 3)).unwrap();
        let b = split_scenario(&s, &cfg(Scenario::KShot, 3)).unwrap();
        assert_eq!(a, b);
    }

    proptest! {
        #[test]
        fn splits_partition_all_samples(
            counts in proptest::collection::vec(3usize..15, 4),
            scenario in prop_oneof![
                Just(Scenario::InDomain), Just(Scenario::KShot),
                Just(Scenario::ZeroShot), Just(Scenario::NewClass)
            ],
            k in 1usize..3,
            seed in 0u64..50,
        ) {
            let s = samples(&[(0, 0, counts[0]), (0, 1, counts[1]), (1, 0, counts[2]), (1, 1, counts[3])]);
            let mut c = cfg(scenario, k);
            c.seed = seed;
            let sp = split_scenario(&s, &c).unwrap();
            let mut ids: Vec<usize> = sp.train.iter().chain(&sp.support).chain(&sp.test)
                .map(|x| x.data[0] as usize).collect();
            ids.sort_unstable();
            prop_assert_eq!(ids, (0..s.len()).collect::<Vec<_>>());
        }
    }
}
