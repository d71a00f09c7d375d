//! Gaussian-cluster classification tasks.
//!
//! Every task draws inputs around the same set of cluster centers (fixed by
//! `world_seed`); tasks differ only in how clusters map to classes.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::search::Split;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        SplitSizes {
            train: 512,
            val: 256,
            test: 256,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticTaskSpec {
    /// Drives the cluster-to-class map and the samples.
    pub seed: u64,
    /// Drives the cluster centers shared by all tasks.
    pub world_seed: u64,
    pub num_clusters: usize,
    pub in_dim: usize,
    pub num_classes: usize,
    pub samples_per_split: SplitSizes,
    pub cluster_spread: f32,
    /// Clusters per class the task actually samples from; 0 means all of them.
    pub clusters_per_class: usize,
    /// Groups the clusters are arranged in (cluster `c` sits in group
    /// `c % num_groups`); 0 places every cluster independently.
    pub num_groups: usize,
    /// Distance scale of clusters around their group center.
    pub group_spread: f32,
    /// Label by group rather than by cluster.
    pub coarse: bool,
    /// Output head the task is read from.
    pub head: usize,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        SyntheticTaskSpec {
            seed: 0,
            world_seed: 0,
            num_clusters: 16,
            in_dim: 16,
            num_classes: 4,
            samples_per_split: SplitSizes::default(),
            cluster_spread: 0.5,
            clusters_per_class: 0,
            num_groups: 0,
            group_spread: 0.3,
            coarse: false,
            head: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitData {
    /// Row-major `len x in_dim`.
    pub x: Vec<f32>,
    pub y: Vec<usize>,
    pub in_dim: usize,
}

impl SplitData {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.x[i * self.in_dim..(i + 1) * self.in_dim]
    }

    pub fn class_counts(&self, num_classes: usize) -> Vec<usize> {
        let mut counts = vec![0; num_classes];
        for &y in &self.y {
            counts[y] += 1;
        }
        counts
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: SyntheticTaskSpec,
    /// `label_map[cluster] = class`.
    pub label_map: Vec<usize>,
    pub train: SplitData,
    pub val: SplitData,
    pub test: SplitData,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &SplitData {
        match split {
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn head(&self) -> usize {
        self.spec.head
    }
}

/// SplitMix64 finalizer, used to derive independent sub-seeds.
pub(crate) fn mix_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn cluster_centers(spec: &SyntheticTaskSpec) -> Vec<Vec<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.world_seed, 0xC3));
    let mut draw = |scale: f32| -> Vec<f32> {
        (0..spec.in_dim)
            .map(|_| scale * rng.sample::<f32, _>(StandardNormal))
            .collect()
    };
    if spec.num_groups == 0 {
        return (0..spec.num_clusters).map(|_| draw(1.0)).collect();
    }
    let groups: Vec<Vec<f32>> = (0..spec.num_groups).map(|_| draw(1.0)).collect();
    (0..spec.num_clusters)
        .map(|c| {
            let offset = draw(spec.group_spread);
            groups[c % spec.num_groups].iter().zip(offset).map(|(g, o)| g + o).collect()
        })
        .collect()
}

/// Balanced map: every class owns `num_clusters / num_classes` clusters (the
/// remainder spread over the first classes).
fn label_map(spec: &SyntheticTaskSpec) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, 0x1A));
    let units = match spec.coarse && spec.num_groups > 0 {
        true => spec.num_groups,
        false => spec.num_clusters,
    };
    let mut order: Vec<usize> = (0..units).collect();
    order.shuffle(&mut rng);
    let mut unit_class = vec![0; units];
    for (rank, unit) in order.into_iter().enumerate() {
        unit_class[unit] = rank % spec.num_classes;
    }
    (0..spec.num_clusters).map(|c| unit_class[c % units]).collect()
}

fn sample_split(
    spec: &SyntheticTaskSpec,
    centers: &[Vec<f32>],
    by_class: &[Vec<usize>],
    n: usize,
    tag: u64,
) -> SplitData {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, tag));
    let c = spec.num_classes;
    let mut labels: Vec<usize> = (0..n).map(|i| i % c).collect();
    labels.shuffle(&mut rng);
    let mut x = Vec::with_capacity(n * spec.in_dim);
    for &class in &labels {
        let cluster = *by_class[class].choose(&mut rng).expect("every class owns a cluster");
        for &mu in &centers[cluster] {
            let noise: f32 = rng.sample(StandardNormal);
            x.push(mu + spec.cluster_spread * noise);
        }
    }
    SplitData {
        x,
        y: labels,
        in_dim: spec.in_dim,
    }
}

/// Generate all three splits. Identical specs give identical data.
pub fn generate_task(spec: &SyntheticTaskSpec) -> Dataset {
    assert!(
        spec.num_classes >= 1 && spec.num_clusters >= spec.num_classes,
        "need at least one cluster per class"
    );
    assert!(
        !spec.coarse || spec.num_groups >= spec.num_classes,
        "coarse labels need at least one group per class"
    );
    let centers = cluster_centers(spec);
    let map = label_map(spec);
    let mut by_class = vec![Vec::new(); spec.num_classes];
    for (cluster, &class) in map.iter().enumerate() {
        by_class[class].push(cluster);
    }
    if spec.clusters_per_class > 0 {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, 0x5C));
        for clusters in &mut by_class {
            clusters.shuffle(&mut rng);
            clusters.truncate(spec.clusters_per_class);
            clusters.sort_unstable();
        }
    }
    let sizes = spec.samples_per_split;
    Dataset {
        train: sample_split(spec, &centers, &by_class, sizes.train, 0x71),
        val: sample_split(spec, &centers, &by_class, sizes.val, 0x72),
        test: sample_split(spec, &centers, &by_class, sizes.test, 0x73),
        label_map: map,
        spec: spec.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bits(d: &SplitData) -> Vec<u32> {
        d.x.iter().map(|v| v.to_bits()).collect()
    }

    #[test]
    fn deterministic() {
        let spec = SyntheticTaskSpec {
            seed: 5,
            ..Default::default()
        };
        let a = generate_task(&spec);
        let b = generate_task(&spec);
        assert_eq!(bits(&a.train), bits(&b.train));
        assert_eq!(a.test.y, b.test.y);
        assert_eq!(a, b);
    }

    #[test]
    fn seeds_change_label_maps_not_centers() {
        let a = generate_task(&SyntheticTaskSpec {
            seed: 1,
            ..Default::default()
        });
        let b = generate_task(&SyntheticTaskSpec {
            seed: 2,
            ..Default::default()
        });
        assert_ne!(a.label_map, b.label_map);
        let spec = &a.spec;
        assert_eq!(cluster_centers(spec), cluster_centers(&b.spec));
    }

    #[test]
    fn priors_are_stratified() {
        let d = generate_task(&SyntheticTaskSpec::default());
        for split in [&d.train, &d.val, &d.test] {
            let counts = split.class_counts(4);
            let expect = split.len() as f64 / 4.0;
            for c in counts {
                assert!((c as f64 - expect).abs() <= 0.05 * expect, "{c} vs {expect}");
            }
        }
    }

    #[test]
    fn splits_differ() {
        let d = generate_task(&SyntheticTaskSpec::default());
        assert_ne!(bits(&d.val), bits(&d.test));
        assert_ne!(d.val.x[..16], d.train.x[..16]);
    }

    #[test]
    fn restricted_tasks_sample_few_clusters() {
        let spec = SyntheticTaskSpec {
            cluster_spread: 0.0,
            clusters_per_class: 1,
            ..Default::default()
        };
        let d = generate_task(&spec);
        let mut seen: Vec<Vec<u32>> = (0..d.train.len()).map(|i| d.train.row(i).iter().map(|v| v.to_bits()).collect()).collect();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 4);
    }

    #[test]
    fn label_map_is_balanced() {
        let d = generate_task(&SyntheticTaskSpec::default());
        let mut counts = [0; 4];
        for &c in &d.label_map {
            counts[c] += 1;
        }
        assert_eq!(counts, [4, 4, 4, 4]);
    }
}
