use std::collections::BTreeMap;

use p2es::groupfinder::{by_subject, permutation_accuracy, GroupFinder, GroupFinderConfig};
use p2es::signals::synth::{split_by_subject, synth_cohort, CohortSpec};

#[test]
fn separable_cohort_clusters_and_assigns() {
    let cohort = synth_cohort(&CohortSpec::default(), 7).unwrap();
    let (train, test) = split_by_subject(&cohort, 0.8, 7);
    let gf = GroupFinder::fit(&train, &GroupFinderConfig::default(), 7).unwrap();
    eprintln!("silhouette by K: {:?}", gf.clusters.silhouette_by_k);
    assert_eq!(gf.clusters.k, 3);

    let subjects = by_subject(&train);
    let truth: Vec<usize> = subjects.iter().map(|(_, r)| r[0].truth.as_ref().unwrap().group).collect();
    assert_eq!(permutation_accuracy(&gf.clusters.labels, &truth), 1.0);

    let mut votes: BTreeMap<usize, BTreeMap<usize, usize>> = BTreeMap::new();
    for (l, t) in gf.clusters.labels.iter().zip(&truth) {
        *votes.entry(*l).or_default().entry(*t).or_default() += 1;
    }
    let to_group: BTreeMap<usize, usize> =
        votes.iter().map(|(k, v)| (*k, *v.iter().max_by_key(|(_, c)| **c).unwrap().0)).collect();
    let hits = test
        .iter()
        .filter(|r| {
            let a = gf.assign(&r.ppg).unwrap();
            to_group[&a.k] == r.truth.as_ref().unwrap().group
        })
        .count();
    let acc = hits as f64 / test.len() as f64;
    assert!(acc >= 0.95, "held-out accuracy {acc} ({hits}/{})", test.len());
}
