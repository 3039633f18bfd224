//! Cluster validity of test embeddings as adaptation proceeds.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::engine::{
    derive_seed, run_stream, ttt_episode, EpisodeConfig, EpisodeMode, EpisodeResources,
};
use crate::error::{Error, Result};
use crate::network::{Mode, SplitNetworkState};
use crate::tensor::Tensor;

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Davies–Bouldin index of `features` grouped by `labels`.
///
/// Classes with a single point are excluded. Coincident centroids give
/// an infinite index.
pub fn davies_bouldin(features: &Tensor, labels: &[usize]) -> Result<f64> {
    if features.rows() != labels.len() {
        return Err(Error::input("one label per feature row required"));
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        groups.entry(l).or_default().push(i);
    }
    groups.retain(|class, members| {
        if members.len() < 2 {
            log::warn!("class {class} has a single point; excluded from the index");
            false
        } else {
            true
        }
    });
    if groups.len() < 2 {
        return Err(Error::input(
            "need at least two classes with two points each",
        ));
    }
    let d = features.row_len();
    let mut centroids = Vec::with_capacity(groups.len());
    let mut spreads = Vec::with_capacity(groups.len());
    for members in groups.values() {
        let mut c = vec![0.0; d];
        for &i in members {
            for (a, v) in c.iter_mut().zip(features.row(i)) {
                *a += v;
            }
        }
        c.iter_mut().for_each(|a| *a /= members.len() as f64);
        let s = members
            .iter()
            .map(|&i| dist(features.row(i), &c))
            .sum::<f64>()
            / members.len() as f64;
        centroids.push(c);
        spreads.push(s);
    }
    let k = centroids.len();
    let mut total = 0.0;
    for i in 0..k {
        let mut worst: f64 = 0.0;
        for j in (0..k).filter(|&j| j != i) {
            let dij = dist(&centroids[i], &centroids[j]);
            let r = if dij == 0.0 {
                f64::INFINITY
            } else {
                (spreads[i] + spreads[j]) / dij
            };
            worst = worst.max(r);
        }
        total += worst;
    }
    Ok(total / k as f64)
}

/// Top-two principal-component coordinates. Each component's sign is fixed
/// so its largest-magnitude loading is positive.
pub fn project_2d(features: &Tensor) -> Result<Vec<[f64; 2]>> {
    let (n, d) = (features.rows(), features.row_len());
    if n == 0 || d == 0 {
        return Err(Error::input("empty feature matrix"));
    }
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(features.row(i)) {
            *m += v / n as f64;
        }
    }
    let centered = DMatrix::from_fn(n, d, |i, j| features.row(i)[j] - mean[j]);
    let cov = centered.transpose() * &centered / n as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .total_cmp(&eig.eigenvalues[a])
            .then(a.cmp(&b))
    });
    let mut axes = Vec::new();
    for &o in order.iter().take(2) {
        let mut v: Vec<f64> = eig.eigenvectors.column(o).iter().copied().collect();
        let lead = v.iter().enumerate().fold(
            0,
            |best, (i, x)| if x.abs() > v[best].abs() { i } else { best },
        );
        if v[lead] < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        axes.push(v);
    }
    Ok((0..n)
        .map(|i| {
            let row = centered.row(i);
            let mut p = [0.0; 2];
            for (k, axis) in axes.iter().enumerate() {
                p[k] = row.iter().zip(axis).map(|(a, b)| a * b).sum();
            }
            p
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct DriftReport {
    pub checkpoints: Vec<usize>,
    pub db_index: Vec<f64>,
    #[serde(skip)]
    pub projections: Vec<Vec<[f64; 2]>>,
    #[serde(skip)]
    pub labels: Vec<usize>,
}

impl DriftReport {
    /// Index at the last checkpoint minus the first.
    pub fn delta(&self) -> f64 {
        self.db_index.last().copied().unwrap_or(f64::NAN)
            - self.db_index.first().copied().unwrap_or(f64::NAN)
    }

    pub fn to_csv(&self, config_hash: &str) -> String {
        let mut s = format!("# config_hash={config_hash}\nstep,davies_bouldin\n");
        for (c, v) in self.checkpoints.iter().zip(&self.db_index) {
            s.push_str(&format!("{c},{v}\n"));
        }
        s
    }

    pub fn projection_csv(&self, config_hash: &str) -> String {
        let mut s = format!("# config_hash={config_hash}\nid,label,pc1,pc2,step\n");
        for (c, proj) in self.checkpoints.iter().zip(&self.projections) {
            for (i, p) in proj.iter().enumerate() {
                s.push_str(&format!("{i},{},{},{},{c}\n", self.labels[i], p[0], p[1]));
            }
        }
        s
    }
}

/// Index and projection for each `(step, features)` snapshot.
pub fn drift_analysis(snapshots: &[(usize, Tensor)], labels: &[usize]) -> Result<DriftReport> {
    if snapshots.windows(2).any(|w| w[0].0 >= w[1].0) {
        return Err(Error::input("checkpoint steps must be strictly ascending"));
    }
    let mut report = DriftReport {
        checkpoints: Vec::new(),
        db_index: Vec::new(),
        projections: Vec::new(),
        labels: labels.to_vec(),
    };
    for (step, f) in snapshots {
        report.checkpoints.push(*step);
        report.db_index.push(davies_bouldin(f, labels)?);
        report.projections.push(project_2d(f)?);
    }
    Ok(report)
}

fn embed(state: &SplitNetworkState, test: &Tensor, mode: Mode) -> Result<Tensor> {
    let idx: Vec<usize> = (0..test.rows()).collect();
    let parts = idx
        .chunks(256)
        .map(|c| Ok(state.forward_features(&test.select_rows(c), mode)?.features))
        .collect::<Result<Vec<_>>>()?;
    Tensor::concat_rows(&parts.iter().collect::<Vec<_>>())
}

/// Embeds `test` at each of `cfg.checkpoints` while adapting.
///
/// With [`EpisodeMode::SingleReset`] every sample runs its own episode and
/// contributes its own features at each checkpoint. With
/// [`EpisodeMode::BatchOnline`] one shared copy of `state` takes one update per
/// test batch (cycling through `test`) and all of `test` is embedded at each
/// checkpoint; `cfg.steps` is then the number of updates.
pub fn drift_experiment(
    state: &SplitNetworkState,
    test: &Tensor,
    labels: &[usize],
    cfg: &EpisodeConfig,
    res: EpisodeResources<'_>,
) -> Result<DriftReport> {
    cfg.validate()?;
    if cfg.checkpoints.windows(2).any(|w| w[0] >= w[1]) || cfg.checkpoints.is_empty() {
        return Err(Error::config(
            "checkpoints must be non-empty and strictly ascending",
        ));
    }
    let mode = cfg.task.norm_mode();
    let batch_size = match cfg.mode {
        EpisodeMode::SingleReset => {
            let run = run_stream(state, test, cfg, res)?;
            let mut snaps = Vec::with_capacity(cfg.checkpoints.len());
            for (k, &step) in cfg.checkpoints.iter().enumerate() {
                let rows: Vec<&Tensor> = run
                    .episodes
                    .iter()
                    .map(|e| &e.feature_snapshots[k].1)
                    .collect();
                snaps.push((step, Tensor::concat_rows(&rows)?));
            }
            return drift_analysis(&snaps, labels);
        }
        EpisodeMode::BatchOnline { batch_size, .. } => batch_size,
    };
    let n = test.rows();
    if batch_size > n {
        return Err(Error::config("batch_size exceeds the test set"));
    }
    let mut s = state.clone();
    let mut one = cfg.clone();
    one.steps = 1;
    one.checkpoints.clear();
    let mut snaps = Vec::new();
    for u in 0..=cfg.steps {
        if cfg.checkpoints.contains(&u) {
            snaps.push((u, embed(&s, test, mode)?));
        }
        if u == cfg.steps {
            break;
        }
        let rows: Vec<usize> = (0..batch_size).map(|k| (u * batch_size + k) % n).collect();
        one.seed = derive_seed(cfg.seed, u as u64);
        ttt_episode(&mut s, &test.select_rows(&rows), &one, res)?;
    }
    drift_analysis(&snaps, labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[[f64; 2]]) -> Tensor {
        Tensor::new(
            vec![rows.len(), 2],
            rows.iter().flatten().copied().collect(),
        )
        .unwrap()
    }

    #[test]
    fn hand_built_two_clusters() {
        // spread 1 around (0,0) and (4,0)
        let f = t(&[[0.0, 1.0], [0.0, -1.0], [4.0, 1.0], [4.0, -1.0]]);
        let db = davies_bouldin(&f, &[0, 0, 1, 1]).unwrap();
        assert!((db - 0.5).abs() < 1e-12);
    }

    #[test]
    fn zero_variance_clusters_give_zero() {
        let f = t(&[[1.0, 1.0], [1.0, 1.0], [3.0, 0.0], [3.0, 0.0]]);
        assert_eq!(davies_bouldin(&f, &[0, 0, 1, 1]).unwrap(), 0.0);
    }

    #[test]
    fn duplication_and_singletons() {
        let f = t(&[[0.0, 1.0], [0.0, -1.0], [4.0, 1.0], [4.0, -1.0], [9.0, 9.0]]);
        let base = davies_bouldin(&f, &[0, 0, 1, 1, 2]).unwrap();
        assert!((base - 0.5).abs() < 1e-12);
        let dup = Tensor::concat_rows(&[&f, &f]).unwrap();
        let labels = [0, 0, 1, 1, 3, 0, 0, 1, 1, 4];
        assert!((davies_bouldin(&dup, &labels).unwrap() - base).abs() < 1e-12);
        assert!(davies_bouldin(&f, &[0, 0, 1, 2, 3]).is_err());
    }

    #[test]
    fn coincident_centroids_are_infinite() {
        let f = t(&[[0.0, 0.0]; 4]);
        assert!(davies_bouldin(&f, &[0, 0, 1, 1]).unwrap().is_infinite());
    }

    #[test]
    fn projection_of_rank_one_data() {
        let f = t(&[[1.0, 2.0], [2.0, 4.0], [-1.0, -2.0], [3.0, 6.0]]);
        let p = project_2d(&f).unwrap();
        for q in &p {
            assert!(q[1].abs() < 1e-9);
        }
        assert_eq!(p, project_2d(&f).unwrap());
    }

    #[test]
    fn projection_preserves_2d_variance() {
        let f = t(&[
            [1.0, 0.3],
            [-0.5, 2.0],
            [0.2, -1.0],
            [3.0, 0.1],
            [-2.0, -0.4],
        ]);
        let p = project_2d(&f).unwrap();
        let var = |v: Vec<f64>| {
            let m = v.iter().sum::<f64>() / v.len() as f64;
            v.iter().map(|x| (x - m) * (x - m)).sum::<f64>()
        };
        let before =
            var((0..5).map(|i| f.row(i)[0]).collect()) + var((0..5).map(|i| f.row(i)[1]).collect());
        let after = var(p.iter().map(|q| q[0]).collect()) + var(p.iter().map(|q| q[1]).collect());
        assert!((before - after).abs() < 1e-9);
    }

    #[test]
    fn checkpoints_must_ascend() {
        let f = t(&[[0.0, 1.0], [0.0, -1.0], [4.0, 1.0], [4.0, -1.0]]);
        assert!(drift_analysis(&[(10, f.clone()), (0, f)], &[0, 0, 1, 1]).is_err());
    }
}
