//! Dataset ingestion, k-NN graph construction, and the synthetic tree
//! generator.
//!
//! On-disk directory format:
//! - `features.bin`: magic `HYPF`, u32 N, u32 d (little-endian), then
//!   N*d little-endian f32 values row-major (`features.csv` with
//!   comma-separated rows is accepted as a fallback);
//! - `labels.csv`: one integer per line;
//! - `edges.csv`: `src,dst` per line, 0-indexed (optional);
//! - `splits.json`: object with arrays `train`, `val`, `test`.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

const FEATURES_MAGIC: &[u8; 4] = b"HYPF";

/// Train/val/test node index lists.
#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq, Eq)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Splits {
    pub fn get(&self, name: &str) -> Option<&[usize]> {
        match name {
            "train" => Some(&self.train),
            "val" => Some(&self.val),
            "test" => Some(&self.test),
            _ => None,
        }
    }
}

/// Node features, labels, edges, and splits for one classification task.
#[derive(Clone, Debug)]
pub struct GraphDataset {
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    pub edges: Vec<(usize, usize)>,
    pub splits: Splits,
    pub num_classes: usize,
}

impl GraphDataset {
    pub fn num_nodes(&self) -> usize {
        self.features.nrows()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    /// Check every structural invariant; returns a coded error on the
    /// first violation.
    pub fn validate(&self) -> Result<()> {
        let n = self.num_nodes();
        if self.labels.len() != n {
            return Err(Error::DatasetInvalid {
                code: "label-count",
                detail: format!("{} labels for {} nodes", self.labels.len(), n),
            });
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= self.num_classes) {
            return Err(Error::DatasetInvalid {
                code: "label-range",
                detail: format!("label {bad} >= num_classes {}", self.num_classes),
            });
        }
        for &(s, d) in &self.edges {
            if s >= n || d >= n {
                return Err(Error::DatasetInvalid {
                    code: "edge-endpoint",
                    detail: format!("edge ({s}, {d}) out of range for {n} nodes"),
                });
            }
        }
        let mut seen = vec![0u8; n];
        for (name, part, bit) in [
            ("train", &self.splits.train, 1u8),
            ("val", &self.splits.val, 2),
            ("test", &self.splits.test, 4),
        ] {
            for &i in part {
                if i >= n {
                    return Err(Error::DatasetInvalid {
                        code: "split-index",
                        detail: format!("{name} index {i} out of range for {n} nodes"),
                    });
                }
                if seen[i] != 0 {
                    return Err(Error::DatasetInvalid {
                        code: "split-overlap",
                        detail: format!("node {i} appears in more than one split"),
                    });
                }
                seen[i] |= bit;
            }
        }
        let mut train_classes = vec![false; self.num_classes];
        for &i in &self.splits.train {
            train_classes[self.labels[i]] = true;
        }
        if let Some(missing) = train_classes.iter().position(|&p| !p) {
            return Err(Error::DatasetInvalid {
                code: "class-missing-train",
                detail: format!("class {missing} has no training node"),
            });
        }
        Ok(())
    }
}

fn parse_err(file: &Path, line: usize, detail: impl Into<String>) -> Error {
    Error::Parse {
        file: file.display().to_string(),
        line,
        detail: detail.into(),
    }
}

fn read_features_bin(path: &Path) -> Result<Array2<f64>> {
    let mut f = fs::File::open(path)?;
    let mut header = [0u8; 12];
    f.read_exact(&mut header)
        .map_err(|e| parse_err(path, 0, format!("short header: {e}")))?;
    if &header[0..4] != FEATURES_MAGIC {
        return Err(parse_err(path, 0, "bad magic, expected HYPF"));
    }
    let n = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    let mut buf = vec![0u8; n * d * 4];
    f.read_exact(&mut buf)
        .map_err(|e| parse_err(path, 0, format!("expected {n}x{d} f32 payload: {e}")))?;
    let mut vals = Vec::with_capacity(n * d);
    for chunk in buf.chunks_exact(4) {
        vals.push(f32::from_le_bytes(chunk.try_into().unwrap()) as f64);
    }
    Array2::from_shape_vec((n, d), vals)
        .map_err(|e| parse_err(path, 0, format!("shape error: {e}")))
}

fn read_features_csv(path: &Path) -> Result<Array2<f64>> {
    let text = fs::read_to_string(path)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: Vec<f64> = line
            .split(',')
            .map(|tok| {
                tok.trim()
                    .parse::<f64>()
                    .map_err(|e| parse_err(path, lineno + 1, format!("bad float `{tok}`: {e}")))
            })
            .collect::<Result<_>>()?;
        if let Some(first) = rows.first() {
            if row.len() != first.len() {
                return Err(parse_err(
                    path,
                    lineno + 1,
                    format!("row has {} columns, expected {}", row.len(), first.len()),
                ));
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(parse_err(path, 0, "no feature rows"));
    }
    let (n, d) = (rows.len(), rows[0].len());
    Array2::from_shape_vec((n, d), rows.into_iter().flatten().collect())
        .map_err(|e| parse_err(path, 0, format!("shape error: {e}")))
}

/// Load a dataset directory; a missing `edges.csv` yields an empty edge
/// list, everything else is required. The result is validated.
pub fn load_dataset(dir: &Path) -> Result<GraphDataset> {
    let bin = dir.join("features.bin");
    let csv = dir.join("features.csv");
    let features = if bin.exists() {
        read_features_bin(&bin)?
    } else if csv.exists() {
        read_features_csv(&csv)?
    } else {
        return Err(Error::DatasetInvalid {
            code: "missing-features",
            detail: format!("neither features.bin nor features.csv in {}", dir.display()),
        });
    };

    let labels_path = dir.join("labels.csv");
    let text = fs::read_to_string(&labels_path)
        .map_err(|e| parse_err(&labels_path, 0, format!("cannot read: {e}")))?;
    let mut labels = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        labels.push(line.trim().parse::<usize>().map_err(|e| {
            parse_err(&labels_path, lineno + 1, format!("bad label `{line}`: {e}"))
        })?);
    }

    let edges_path = dir.join("edges.csv");
    let mut edges = Vec::new();
    if edges_path.exists() {
        let text = fs::read_to_string(&edges_path)?;
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split(',');
            let bad = |e: String| parse_err(&edges_path, lineno + 1, e);
            let src = parts
                .next()
                .ok_or_else(|| bad("missing src".into()))?
                .trim()
                .parse::<usize>()
                .map_err(|e| bad(format!("bad src: {e}")))?;
            let dst = parts
                .next()
                .ok_or_else(|| bad("missing dst".into()))?
                .trim()
                .parse::<usize>()
                .map_err(|e| bad(format!("bad dst: {e}")))?;
            if parts.next().is_some() {
                return Err(bad("expected exactly `src,dst`".into()));
            }
            edges.push((src, dst));
        }
    }

    let splits_path = dir.join("splits.json");
    let text = fs::read_to_string(&splits_path)
        .map_err(|e| parse_err(&splits_path, 0, format!("cannot read: {e}")))?;
    let splits: Splits = serde_json::from_str(&text)
        .map_err(|e| parse_err(&splits_path, e.line(), e.to_string()))?;

    let num_classes = labels.iter().max().map_or(0, |m| m + 1);
    let ds = GraphDataset {
        features,
        labels,
        edges,
        splits,
        num_classes,
    };
    ds.validate()?;
    Ok(ds)
}

/// Write a dataset in the directory format (features as f32).
pub fn save_dataset(dir: &Path, ds: &GraphDataset) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut bin = Vec::with_capacity(12 + ds.features.len() * 4);
    bin.extend_from_slice(FEATURES_MAGIC);
    bin.extend_from_slice(&(ds.num_nodes() as u32).to_le_bytes());
    bin.extend_from_slice(&(ds.feature_dim() as u32).to_le_bytes());
    for &v in ds.features.iter() {
        bin.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::File::create(dir.join("features.bin"))?.write_all(&bin)?;

    let labels: String = ds
        .labels
        .iter()
        .map(|l| format!("{l}\n"))
        .collect();
    fs::write(dir.join("labels.csv"), labels)?;

    let edges: String = ds
        .edges
        .iter()
        .map(|(s, d)| format!("{s},{d}\n"))
        .collect();
    fs::write(dir.join("edges.csv"), edges)?;

    fs::write(
        dir.join("splits.json"),
        serde_json::to_string_pretty(&ds.splits)?,
    )?;
    Ok(())
}

/// Directed k-nearest-neighbour edges under Euclidean distance on the raw
/// features, ties broken by lower index, symmetrized by union with the
/// reversed edges. The result is sorted.
pub fn knn_graph(features: &Array2<f64>, k: usize) -> Result<Vec<(usize, usize)>> {
    let n = features.nrows();
    if k == 0 || k >= n {
        return Err(Error::Domain {
            op: "knn_graph",
            detail: format!("k = {k} must satisfy 1 <= k < N = {n}"),
        });
    }
    let mut edges = BTreeSet::new();
    for i in 0..n {
        let mut cand: Vec<(f64, usize)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| {
                let d2 = features
                    .row(i)
                    .iter()
                    .zip(features.row(j).iter())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>();
                (d2, j)
            })
            .collect();
        cand.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
        for &(_, j) in cand.iter().take(k) {
            edges.insert((i, j));
            edges.insert((j, i));
        }
    }
    Ok(edges.into_iter().collect())
}

/// Normalization mode for [`normalize_features`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalizeMode {
    None,
    RowwiseL2,
    Standardize,
}

/// Feature normalization; rowwise L2 leaves zero rows unchanged, and
/// standardize guards zero-variance columns.
pub fn normalize_features(features: &Array2<f64>, mode: NormalizeMode) -> Array2<f64> {
    match mode {
        NormalizeMode::None => features.clone(),
        NormalizeMode::RowwiseL2 => {
            let mut out = features.clone();
            for mut row in out.rows_mut() {
                let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm > 1e-12 {
                    row.mapv_inplace(|x| x / norm);
                }
            }
            out
        }
        NormalizeMode::Standardize => {
            let n = features.nrows() as f64;
            let mut out = features.clone();
            for mut col in out.columns_mut() {
                let mean = col.sum() / n;
                let var = col.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
                let sd = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
                col.mapv_inplace(|x| (x - mean) / sd);
            }
            out
        }
    }
}

/// Balanced B-ary tree dataset: the label of a node is the index of its
/// depth-1 ancestor (the root belongs to class 0), features follow a
/// random walk down the tree (class centroid plus per-level noise scaled
/// by sigma), edges are the parent->child tree edges, and splits are a
/// 50/25/25 stratified partition.
///
/// Topology and splits depend only on the shape parameters and seed order;
/// features alone change with `noise`.
pub fn gen_tree(
    depth: usize,
    branching: usize,
    feature_dim: usize,
    noise: f64,
    seed: u64,
) -> Result<GraphDataset> {
    if depth < 2 || branching < 2 {
        return Err(Error::Domain {
            op: "gen_tree",
            detail: format!("need depth >= 2 and branching >= 2, got {depth}, {branching}"),
        });
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);

    // Class centroids: random unit vectors ("orthogonal-ish" for d >= B).
    let centroids: Vec<Vec<f64>> = (0..branching)
        .map(|_| {
            let mut v: Vec<f64> = (0..feature_dim)
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.iter_mut().for_each(|x| *x /= norm);
            v
        })
        .collect();

    // Breadth-first layout: root 0, then each level in order.
    let mut num_nodes = 1usize;
    let mut level_size = 1usize;
    for _ in 0..depth {
        level_size *= branching;
        num_nodes += level_size;
    }

    let mut parents = vec![usize::MAX; num_nodes];
    let mut labels = vec![0usize; num_nodes];
    let mut features = Array2::zeros((num_nodes, feature_dim));
    let mut edges = Vec::with_capacity(num_nodes - 1);

    let mut next_id = 1usize;
    let mut frontier = vec![0usize];
    for level in 0..depth {
        let mut next_frontier = Vec::with_capacity(frontier.len() * branching);
        for &p in &frontier {
            for c in 0..branching {
                let id = next_id;
                next_id += 1;
                parents[id] = p;
                labels[id] = if level == 0 { c } else { labels[p] };
                edges.push((p, id));
                next_frontier.push(id);
            }
        }
        frontier = next_frontier;
    }

    // Random walk features, quantized to f32 so the on-disk format
    // round-trips exactly.
    for id in 1..num_nodes {
        let parent = parents[id];
        let base: Vec<f64> = if parent == 0 {
            centroids[labels[id]].clone()
        } else {
            features.row(parent).to_vec()
        };
        for j in 0..feature_dim {
            let g: f64 = rng.sample(StandardNormal);
            let offset = if parent == 0 { 0.0 } else { noise * g };
            features[(id, j)] = ((base[j] + offset) as f32) as f64;
        }
    }

    // Stratified 50/25/25 splits per class.
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); branching];
    for (id, &label) in labels.iter().enumerate() {
        by_class[label].push(id);
    }
    let mut splits = Splits::default();
    for members in &mut by_class {
        members.shuffle(&mut rng);
        let n = members.len();
        let mut n_train = (n / 2).max(1);
        let mut n_val = (n / 4).max(1);
        while n_train + n_val > n.saturating_sub(1) && n_val > 1 {
            n_val -= 1;
        }
        while n_train + n_val > n.saturating_sub(1) && n_train > 1 {
            n_train -= 1;
        }
        splits.train.extend(&members[..n_train]);
        splits.val.extend(&members[n_train..n_train + n_val]);
        splits.test.extend(&members[n_train + n_val..]);
    }
    splits.train.sort_unstable();
    splits.val.sort_unstable();
    splits.test.sort_unstable();

    let ds = GraphDataset {
        features,
        labels,
        edges,
        splits,
        num_classes: branching,
    };
    ds.validate()?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::array;

    fn tiny_dataset() -> GraphDataset {
        GraphDataset {
            features: array![[0.5, 1.0], [1.5, -0.25], [2.0, 0.0]],
            labels: vec![0, 1, 0],
            edges: vec![(0, 1), (1, 2)],
            splits: Splits {
                train: vec![0, 1],
                val: vec![2],
                test: vec![],
            },
            num_classes: 2,
        }
    }

    #[test]
    fn minimal_fixture_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny_dataset();
        save_dataset(dir.path(), &ds).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded.num_nodes(), 3);
        assert_eq!(loaded.features, ds.features);
        assert_eq!(loaded.labels, ds.labels);
        assert_eq!(loaded.edges, ds.edges);
        assert_eq!(loaded.splits, ds.splits);

        // Saving the loaded dataset again is byte-identical.
        let dir2 = tempfile::tempdir().unwrap();
        save_dataset(dir2.path(), &loaded).unwrap();
        let a = std::fs::read(dir.path().join("features.bin")).unwrap();
        let b = std::fs::read(dir2.path().join("features.bin")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn missing_edges_file_gives_empty_edges() {
        let dir = tempfile::tempdir().unwrap();
        let mut ds = tiny_dataset();
        ds.edges.clear();
        save_dataset(dir.path(), &ds).unwrap();
        std::fs::remove_file(dir.path().join("edges.csv")).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert!(loaded.edges.is_empty());
    }

    #[test]
    fn overlapping_splits_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut ds = tiny_dataset();
        ds.splits.val = vec![0];
        save_dataset(dir.path(), &ds).unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(matches!(
            err,
            Error::DatasetInvalid {
                code: "split-overlap",
                ..
            }
        ));
    }

    #[test]
    fn csv_fallback_and_parse_errors() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny_dataset();
        save_dataset(dir.path(), &ds).unwrap();
        std::fs::remove_file(dir.path().join("features.bin")).unwrap();
        std::fs::write(dir.path().join("features.csv"), "0.5,1.0\n1.5,-0.25\n2.0,0.0\n")
            .unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded.features, ds.features);

        std::fs::write(dir.path().join("features.csv"), "0.5,oops\n").unwrap();
        match load_dataset(dir.path()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn knn_collinear_hand_case() {
        let feats = array![[0.0], [1.0], [10.0]];
        let edges = knn_graph(&feats, 1).unwrap();
        assert_eq!(edges, vec![(0, 1), (1, 0), (1, 2), (2, 1)]);
    }

    #[test]
    fn knn_complete_graph_when_k_is_n_minus_1() {
        let feats = array![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]];
        let edges = knn_graph(&feats, 3).unwrap();
        assert_eq!(edges.len(), 12);
        assert!(knn_graph(&feats, 4).is_err());
        assert!(knn_graph(&feats, 0).is_err());
    }

    #[test]
    fn knn_matches_counting_oracle() {
        // Independent O(N^3) route: j is among i's k nearest iff fewer
        // than k candidates compare strictly smaller under the
        // (distance, index) order.
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(2);
        let n = 50;
        let feats = Array2::from_shape_fn((n, 3), |_| rng.gen_range(-1.0..1.0));
        let k = 5;
        let d2 = |i: usize, j: usize| -> f64 {
            feats
                .row(i)
                .iter()
                .zip(feats.row(j).iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum()
        };
        let mut expected = BTreeSet::new();
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let mut closer = 0;
                for l in 0..n {
                    if l == i || l == j {
                        continue;
                    }
                    if (d2(i, l), l) < (d2(i, j), j) {
                        closer += 1;
                    }
                }
                if closer < k {
                    expected.insert((i, j));
                    expected.insert((j, i));
                }
            }
        }
        let got: BTreeSet<(usize, usize)> = knn_graph(&feats, k).unwrap().into_iter().collect();
        assert_eq!(got, expected);
    }

    #[test]
    fn gen_tree_counts_and_balance() {
        let ds = gen_tree(2, 2, 4, 0.1, 0).unwrap();
        assert_eq!(ds.num_nodes(), 7);
        assert_eq!(ds.edges.len(), 6);
        assert_eq!(ds.num_classes, 2);

        // Recursive subtree counter oracle: each class owns the subtree
        // of one depth-1 child, (B^D - 1)/(B - 1) nodes; the root adds one
        // node to class 0.
        fn subtree(depth_left: usize, b: usize) -> usize {
            if depth_left == 0 {
                1
            } else {
                1 + b * subtree(depth_left - 1, b)
            }
        }
        for (d, b) in [(2usize, 2usize), (3, 2), (2, 3), (4, 3)] {
            let ds = gen_tree(d, b, 8, 0.2, 1).unwrap();
            let mut counts = vec![0usize; b];
            for &l in &ds.labels {
                counts[l] += 1;
            }
            let per_class = subtree(d - 1, b);
            assert_eq!(counts[0], per_class + 1, "class 0 holds the root");
            for &c in &counts[1..] {
                assert_eq!(c, per_class);
            }
        }

        assert!(gen_tree(1, 2, 4, 0.0, 0).is_err());
        assert!(gen_tree(3, 1, 4, 0.0, 0).is_err());
    }

    #[test]
    fn gen_tree_zero_noise_collapses_classes_to_centroids() {
        let ds = gen_tree(3, 3, 8, 0.0, 7).unwrap();
        for id in 1..ds.num_nodes() {
            let label = ds.labels[id];
            // all members of a class share the depth-1 ancestor's feature
            let anchor = 1 + label;
            let diff: f64 = ds
                .features
                .row(id)
                .iter()
                .zip(ds.features.row(anchor).iter())
                .map(|(a, b)| (a - b).abs())
                .sum();
            assert!(diff < 1e-12, "node {id} deviates from its centroid");
        }
    }

    #[test]
    fn gen_tree_determinism_and_seed_independence_of_topology() {
        let a = gen_tree(3, 2, 4, 0.3, 5).unwrap();
        let b = gen_tree(3, 2, 4, 0.3, 5).unwrap();
        assert_eq!(a.features, b.features);
        assert_eq!(a.edges, b.edges);
        assert_eq!(a.splits, b.splits);

        let c = gen_tree(3, 2, 4, 0.3, 6).unwrap();
        assert_eq!(a.edges, c.edges, "topology must not depend on the seed");
        assert_eq!(a.labels, c.labels);
        assert_ne!(a.features, c.features, "features must depend on the seed");
    }

    #[test]
    fn gen_tree_splits_are_stratified_and_nonempty() {
        let ds = gen_tree(4, 3, 16, 0.5, 0).unwrap();
        assert!(!ds.splits.train.is_empty());
        assert!(!ds.splits.val.is_empty());
        assert!(!ds.splits.test.is_empty());
        let n = ds.num_nodes();
        assert_eq!(
            ds.splits.train.len() + ds.splits.val.len() + ds.splits.test.len(),
            n
        );
        // roughly 50/25/25
        let frac = ds.splits.train.len() as f64 / n as f64;
        assert!((0.4..0.6).contains(&frac), "train fraction {frac}");
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(64))]

        #[test]
        fn prop_rowwise_l2_normalizes_or_leaves_zero_rows(
            vals in proptest::collection::vec(-5.0f64..5.0, 12),
        ) {
            let feats = Array2::from_shape_vec((4, 3), vals).unwrap();
            let out = normalize_features(&feats, NormalizeMode::RowwiseL2);
            for (orig, row) in feats.rows().into_iter().zip(out.rows()) {
                let in_norm = orig.iter().map(|x| x * x).sum::<f64>().sqrt();
                let out_norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
                if in_norm > 1e-12 {
                    proptest::prop_assert!((out_norm - 1.0).abs() < 1e-10);
                } else {
                    proptest::prop_assert_eq!(row, orig);
                }
            }
        }

        #[test]
        fn prop_knn_union_is_symmetric_with_min_degree(
            vals in proptest::collection::vec(-1.0f64..1.0, 20),
            k in 1usize..5,
        ) {
            let feats = Array2::from_shape_vec((10, 2), vals).unwrap();
            let edges = knn_graph(&feats, k).unwrap();
            let set: BTreeSet<(usize, usize)> = edges.iter().copied().collect();
            for &(s, d) in &edges {
                proptest::prop_assert!(set.contains(&(d, s)), "missing reverse of ({s},{d})");
                proptest::prop_assert!(s != d);
            }
            // union with the reversed edges gives out-degree >= k
            for i in 0..10 {
                let deg = edges.iter().filter(|(s, _)| *s == i).count();
                proptest::prop_assert!(deg >= k, "node {} has degree {} < {}", i, deg, k);
            }
        }
    }

    #[test]
    fn normalize_modes() {
        let feats = array![[3.0, 4.0], [0.0, 0.0]];
        let same = normalize_features(&feats, NormalizeMode::None);
        assert_eq!(same, feats);

        let l2 = normalize_features(&feats, NormalizeMode::RowwiseL2);
        assert_relative_eq!(l2[(0, 0)], 0.6, epsilon = 1e-12);
        assert_relative_eq!(l2[(0, 1)], 0.8, epsilon = 1e-12);
        assert_eq!(l2[(1, 0)], 0.0, "zero rows unchanged");

        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(3);
        let feats = Array2::from_shape_fn((40, 5), |_| rng.gen_range(-2.0..5.0));
        let std = normalize_features(&feats, NormalizeMode::Standardize);
        for col in std.columns() {
            let n = col.len() as f64;
            let mean = col.sum() / n;
            let var = col.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
            assert!(mean.abs() < 1e-10);
            assert_relative_eq!(var, 1.0, epsilon = 1e-10);
        }
    }
}
