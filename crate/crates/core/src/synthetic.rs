//! Synthetic multimodal data: isotropic Gaussian clusters as normal data plus
//! planted anomalies, either local (between two clusters) or global (far
//! from every cluster).

use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::{LabeledDataset, RawData};
use crate::error::{Error, Result};
use crate::kv::{join_list, render, KvFile};
use crate::seed::{stream_rng, Stream};

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterSpec {
    pub center: Vec<f64>,
    /// Per-coordinate standard deviation.
    pub scale: f64,
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum AnomalyPlacement {
    /// On the segment between two random cluster centers, at a fraction drawn
    /// uniformly from `segment`, plus isotropic noise of std `jitter`.
    BetweenClusters { segment: (f64, f64), jitter: f64 },
    /// At distance `radius` (times a uniform factor in `[1, 1.5]`) from the
    /// mean of the cluster centers, in a uniformly random direction.
    GlobalOutskirts { radius: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub dim: usize,
    pub clusters: Vec<ClusterSpec>,
    pub placement: AnomalyPlacement,
    pub anomalies: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    /// Two unit-variance clusters whose centers lie `separation` apart on
    /// the diagonal `(1, …, 1) / √dim`, symmetric about the origin, with
    /// `anomalies` points planted on the middle of the segment between them.
    pub fn two_clusters_with_local_anomalies(
        dim: usize,
        cluster_size: usize,
        anomalies: usize,
        separation: f64,
        seed: u64,
    ) -> Self {
        let c = 0.5 * separation / (dim.max(1) as f64).sqrt();
        Self {
            dim,
            clusters: [-c, c]
                .iter()
                .map(|&c| ClusterSpec {
                    center: vec![c; dim],
                    scale: 1.0,
                    size: cluster_size,
                })
                .collect(),
            placement: AnomalyPlacement::BetweenClusters {
                segment: (0.3, 0.7),
                jitter: 0.3,
            },
            anomalies,
            seed,
        }
    }

    pub fn rows(&self) -> usize {
        self.clusters.iter().map(|c| c.size).sum::<usize>() + self.anomalies
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.dim == 0 {
            return bad("dimension must be positive".into());
        }
        if self.clusters.is_empty() {
            return bad("at least one cluster is required".into());
        }
        if self.anomalies == 0 {
            return bad("anomaly count must be at least 1".into());
        }
        for (i, c) in self.clusters.iter().enumerate() {
            if c.size < 2 {
                return bad(format!("cluster {i} has fewer than 2 points"));
            }
            if c.center.len() != self.dim {
                return bad(format!(
                    "cluster {i} center has {} coordinates, dimension is {}",
                    c.center.len(),
                    self.dim
                ));
            }
            if !(c.scale > 0.0 && c.scale.is_finite()) || c.center.iter().any(|v| !v.is_finite()) {
                return bad(format!("cluster {i} has an invalid center or scale"));
            }
        }
        match self.placement {
            AnomalyPlacement::BetweenClusters { segment: (lo, hi), jitter } => {
                if self.clusters.len() < 2 {
                    return bad("between-cluster anomalies need at least two clusters".into());
                }
                if !(0.0 <= lo && lo <= hi && hi <= 1.0) || !(jitter >= 0.0) {
                    return bad(format!("invalid segment ({lo}, {hi}) or jitter {jitter}"));
                }
            }
            AnomalyPlacement::GlobalOutskirts { radius } => {
                if !(radius > 0.0 && radius.is_finite()) {
                    return bad(format!("invalid outskirts radius {radius}"));
                }
            }
        }
        Ok(())
    }

    pub fn from_kv(kv: &KvFile) -> Result<Self> {
        let dim: usize = kv.require("dim")?;
        let n: usize = kv.require("clusters")?;
        let mut allowed: Vec<String> = ["dim", "clusters", "anomalies", "placement", "seed", "segment", "jitter", "radius"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let mut clusters = Vec::with_capacity(n);
        for i in 0..n {
            let key = |f: &str| format!("cluster.{i}.{f}");
            allowed.extend(["center", "scale", "size"].iter().map(|f| key(f)));
            clusters.push(ClusterSpec {
                center: kv
                    .get_list(&key("center"))?
                    .ok_or_else(|| Error::Config(format!("missing `{}`", key("center"))))?,
                scale: kv.get(&key("scale"))?.unwrap_or(1.0),
                size: kv.require(&key("size"))?,
            });
        }
        let allowed_refs: Vec<&str> = allowed.iter().map(String::as_str).collect();
        kv.reject_unknown(&allowed_refs)?;
        let placement = match kv.raw("placement").unwrap_or("between") {
            "between" => {
                let seg: Vec<f64> = kv.get_list("segment")?.unwrap_or_else(|| vec![0.3, 0.7]);
                if seg.len() != 2 {
                    return Err(Error::Config("`segment` needs two values".into()));
                }
                AnomalyPlacement::BetweenClusters {
                    segment: (seg[0], seg[1]),
                    jitter: kv.get("jitter")?.unwrap_or(0.3),
                }
            }
            "outskirts" => AnomalyPlacement::GlobalOutskirts {
                radius: kv.require("radius")?,
            },
            other => return Err(Error::Config(format!("unknown placement `{other}`"))),
        };
        let spec = Self {
            dim,
            clusters,
            placement,
            anomalies: kv.require("anomalies")?,
            seed: kv.get("seed")?.unwrap_or(0),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_kv(&KvFile::read(path)?)
    }

    pub fn to_kv_string(&self) -> String {
        let mut pairs = vec![
            ("dim".to_string(), self.dim.to_string()),
            ("seed".into(), self.seed.to_string()),
            ("anomalies".into(), self.anomalies.to_string()),
            ("clusters".into(), self.clusters.len().to_string()),
        ];
        for (i, c) in self.clusters.iter().enumerate() {
            pairs.push((format!("cluster.{i}.center"), join_list(&c.center)));
            pairs.push((format!("cluster.{i}.scale"), c.scale.to_string()));
            pairs.push((format!("cluster.{i}.size"), c.size.to_string()));
        }
        match self.placement {
            AnomalyPlacement::BetweenClusters { segment, jitter } => {
                pairs.push(("placement".into(), "between".into()));
                pairs.push(("segment".into(), format!("{},{}", segment.0, segment.1)));
                pairs.push(("jitter".into(), jitter.to_string()));
            }
            AnomalyPlacement::GlobalOutskirts { radius } => {
                pairs.push(("placement".into(), "outskirts".into()));
                pairs.push(("radius".into(), radius.to_string()));
            }
        }
        render(pairs)
    }
}

/// Draws the raw (unstandardized) sample: cluster points first, then the
/// anomalies.
pub fn sample(spec: &SyntheticSpec) -> Result<RawData> {
    spec.validate()?;
    let mut rng = stream_rng(spec.seed, Stream::Synthetic);
    let d = spec.dim;
    let mut features = Array2::zeros((spec.rows(), d));
    let mut labels = Vec::with_capacity(spec.rows());
    let mut row = 0;
    let gauss = |rng: &mut rand_chacha::ChaCha8Rng| -> f64 { StandardNormal.sample(rng) };
    for c in &spec.clusters {
        for _ in 0..c.size {
            for j in 0..d {
                features[[row, j]] = c.center[j] + c.scale * gauss(&mut rng);
            }
            labels.push(0);
            row += 1;
        }
    }
    let k = spec.clusters.len();
    let centroid: Vec<f64> = (0..d)
        .map(|j| spec.clusters.iter().map(|c| c.center[j]).sum::<f64>() / k as f64)
        .collect();
    for _ in 0..spec.anomalies {
        match spec.placement {
            AnomalyPlacement::BetweenClusters { segment, jitter } => {
                let a = rng.random_range(0..k);
                let mut b = rng.random_range(0..k - 1);
                if b >= a {
                    b += 1;
                }
                let t = if segment.1 > segment.0 {
                    rng.random_range(segment.0..segment.1)
                } else {
                    segment.0
                };
                let (ca, cb) = (&spec.clusters[a].center, &spec.clusters[b].center);
                for j in 0..d {
                    features[[row, j]] = ca[j] + t * (cb[j] - ca[j]) + jitter * gauss(&mut rng);
                }
            }
            AnomalyPlacement::GlobalOutskirts { radius } => {
                let dir: Vec<f64> = (0..d).map(|_| gauss(&mut rng)).collect();
                let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                let r = radius * rng.random_range(1.0..1.5);
                for j in 0..d {
                    features[[row, j]] = centroid[j] + r * dir[j] / norm;
                }
            }
        }
        labels.push(1);
        row += 1;
    }
    Ok(RawData { features, labels })
}

/// Samples, standardizes and splits a synthetic dataset; the split reuses
/// the spec's seed.
pub fn make_synthetic(spec: &SyntheticSpec, label_ratio: f64) -> Result<LabeledDataset> {
    let raw = sample(spec)?;
    LabeledDataset::prepare(&raw, label_ratio, spec.seed, format!("synthetic:{}", spec.seed))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_d(seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            dim: 2,
            clusters: vec![
                ClusterSpec {
                    center: vec![-5.0, 0.0],
                    scale: 1.0,
                    size: 100,
                },
                ClusterSpec {
                    center: vec![5.0, 0.0],
                    scale: 1.0,
                    size: 100,
                },
            ],
            placement: AnomalyPlacement::BetweenClusters {
                segment: (0.4, 0.6),
                jitter: 0.3,
            },
            anomalies: 20,
            seed,
        }
    }

    #[test]
    fn counts_rows() {
        let raw = sample(&two_d(1)).unwrap();
        assert_eq!(raw.rows(), 220);
        assert_eq!(raw.anomalies(), 20);
    }

    #[test]
    fn fixed_seed_is_reproducible() {
        assert_eq!(sample(&two_d(3)).unwrap(), sample(&two_d(3)).unwrap());
        assert_ne!(sample(&two_d(3)).unwrap(), sample(&two_d(4)).unwrap());
    }

    #[test]
    fn between_cluster_anomalies_are_not_global_outliers() {
        // Distance from the overall centroid: planted points sit inside the
        // bulk of the data, so none of them exceeds the 95th percentile of
        // the normal points' distances.
        let raw = sample(&two_d(5)).unwrap();
        let dist = |i: usize| raw.features.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut normal: Vec<f64> = (0..200).map(dist).collect();
        normal.sort_by(f64::total_cmp);
        let p95 = normal[(0.95 * normal.len() as f64) as usize];
        assert!(!(200..220).any(|i| dist(i) > p95));
    }

    #[test]
    fn outskirts_are_far() {
        let mut spec = two_d(6);
        spec.placement = AnomalyPlacement::GlobalOutskirts { radius: 20.0 };
        let raw = sample(&spec).unwrap();
        for i in 200..220 {
            let r = raw.features.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((20.0..=30.0).contains(&r));
        }
    }

    #[test]
    fn validation() {
        let mut spec = two_d(0);
        spec.clusters.truncate(1);
        assert!(spec.validate().is_err());
        let mut spec = two_d(0);
        spec.clusters[0].size = 1;
        assert!(spec.validate().is_err());
        let mut spec = two_d(0);
        spec.anomalies = 0;
        assert!(spec.validate().is_err());
        let mut spec = two_d(0);
        spec.clusters[1].center.push(1.0);
        assert!(spec.validate().is_err());
    }

    #[test]
    fn spec_file_round_trip() {
        let spec = two_d(9);
        let kv = KvFile::parse(&spec.to_kv_string(), "spec").unwrap();
        assert_eq!(SyntheticSpec::from_kv(&kv).unwrap(), spec);
        let mut out = spec.clone();
        out.placement = AnomalyPlacement::GlobalOutskirts { radius: 7.5 };
        let kv = KvFile::parse(&out.to_kv_string(), "spec").unwrap();
        assert_eq!(SyntheticSpec::from_kv(&kv).unwrap(), out);
    }
}
