//! Dataset manifests, loaders, split generation and on-disk formats.
//!
//! Formats:
//! - edges: one `u v` pair per line, 0-indexed, undirected. Duplicate and
//!   reversed-duplicate pairs are merged, self-loops dropped.
//! - dense features: CSV, one row per node, no header.
//! - sparse features: `node feature value` per line.
//! - labels: one class id per line, line `i` for node `i`.
//! - sparse matrices: header `n_rows n_cols nnz`, then `row col value`
//!   per line in row-major order.
//!
//! Blank lines and lines starting with `#` are ignored in every text format
//! except the sparse-matrix files, which are written and read verbatim.

use std::collections::BTreeSet;
use std::env;
use std::fs;
use std::path::{Path, PathBuf};

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::{
    DiffusionFilterParams, FilterMode, FilterSpec, FilterStats, GraphFilter, HopPowerSet,
};
use crate::graph::{GraphDataset, Splits};
use crate::sparse::SparseMatrix;
use crate::tensor::Tensor;

/// Environment variable naming the directory that holds dataset folders.
pub const DATA_ROOT_ENV: &str = "NCGNN_DATA_ROOT";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureKind {
    DenseCsv,
    SparseTriplet,
}

/// JSON manifest. Relative paths resolve against the manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub name: String,
    pub edges: PathBuf,
    pub features: PathBuf,
    pub labels: PathBuf,
    pub n_nodes: usize,
    pub n_features: usize,
    pub n_classes: usize,
    pub feature_kind: FeatureKind,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: Self = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        m.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(m)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }
}

/// Finds a manifest from a CLI-style argument: a manifest file, a directory
/// containing `manifest.json`, or a dataset name under `$NCGNN_DATA_ROOT`.
pub fn locate_manifest(arg: &str) -> Result<PathBuf> {
    let direct = PathBuf::from(arg);
    let mut candidates = vec![direct.clone(), direct.join("manifest.json")];
    if let Ok(root) = env::var(DATA_ROOT_ENV) {
        let root = PathBuf::from(root);
        candidates.push(root.join(arg).join("manifest.json"));
        candidates.push(root.join(arg));
    }
    candidates
        .into_iter()
        .find(|p| p.is_file())
        .ok_or_else(|| {
            Error::io(
                direct,
                std::io::Error::new(std::io::ErrorKind::NotFound, "dataset manifest not found"),
            )
        })
}

fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn parse_field<T: std::str::FromStr>(path: &Path, line: usize, what: &str, s: Option<&str>) -> Result<T> {
    let s = s.ok_or_else(|| parse_err(path, line, format!("missing {what}")))?;
    s.parse()
        .map_err(|_| parse_err(path, line, format!("invalid {what} {s:?}")))
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Symmetric binary adjacency from an undirected edge list.
pub fn read_edges(path: &Path, n_nodes: usize) -> Result<SparseMatrix> {
    let text = read(path)?;
    let mut pairs = BTreeSet::new();
    let (mut duplicates, mut loops, mut listed) = (0usize, 0usize, 0usize);
    for (line, l) in content_lines(&text) {
        let mut it = l.split_whitespace();
        let u: usize = parse_field(path, line, "source node", it.next())?;
        let v: usize = parse_field(path, line, "target node", it.next())?;
        if it.next().is_some() {
            return Err(parse_err(path, line, "expected exactly two node ids"));
        }
        for node in [u, v] {
            if node >= n_nodes {
                return Err(Error::DanglingEdge { line, node, n_nodes });
            }
        }
        if u == v {
            loops += 1;
            continue;
        }
        listed += 1;
        if !pairs.insert((u.min(v), u.max(v))) {
            duplicates += 1;
        }
    }
    if duplicates > 0 {
        warn!("{}: merged {duplicates} duplicate edges", path.display());
    }
    if loops > 0 {
        warn!("{}: dropped {loops} self-loops", path.display());
    }
    debug_assert_eq!(listed - duplicates, pairs.len());
    let mut trip = Vec::with_capacity(2 * pairs.len());
    for (u, v) in pairs {
        trip.push((u, v, 1.0));
        trip.push((v, u, 1.0));
    }
    SparseMatrix::from_triplets(n_nodes, n_nodes, &trip)
}

pub fn read_dense_features(path: &Path, n_nodes: usize, n_features: usize) -> Result<Tensor> {
    let text = read(path)?;
    let mut data = Vec::with_capacity(n_nodes * n_features);
    let mut rows = 0;
    for (line, l) in content_lines(&text) {
        let before = data.len();
        for field in l.split(',') {
            data.push(parse_field::<f64>(path, line, "feature value", Some(field.trim()))?);
        }
        let cols = data.len() - before;
        if cols != n_features {
            return Err(Error::CountMismatch {
                what: "features",
                declared: n_features,
                found: cols,
            });
        }
        rows += 1;
    }
    if rows != n_nodes {
        return Err(Error::CountMismatch {
            what: "feature rows",
            declared: n_nodes,
            found: rows,
        });
    }
    Tensor::matrix(n_nodes, n_features, data)
}

pub fn read_sparse_features(path: &Path, n_nodes: usize, n_features: usize) -> Result<Tensor> {
    let text = read(path)?;
    let mut out = Tensor::zeros(&[n_nodes, n_features]);
    for (line, l) in content_lines(&text) {
        let mut it = l.split_whitespace();
        let node: usize = parse_field(path, line, "node", it.next())?;
        let feat: usize = parse_field(path, line, "feature index", it.next())?;
        let value: f64 = parse_field(path, line, "feature value", it.next())?;
        if node >= n_nodes {
            return Err(parse_err(path, line, format!("node {node} outside [0, {n_nodes})")));
        }
        if feat >= n_features {
            return Err(Error::CountMismatch {
                what: "features",
                declared: n_features,
                found: feat + 1,
            });
        }
        out.set2(node, feat, value);
    }
    Ok(out)
}

pub fn read_labels(path: &Path, n_nodes: usize, n_classes: usize) -> Result<Vec<usize>> {
    let text = read(path)?;
    let mut labels = Vec::with_capacity(n_nodes);
    for (line, l) in content_lines(&text) {
        let label: usize = parse_field(path, line, "label", Some(l))?;
        if label >= n_classes {
            return Err(Error::LabelOutOfRange {
                node: labels.len(),
                label,
                n_classes,
            });
        }
        labels.push(label);
    }
    if labels.len() != n_nodes {
        return Err(Error::CountMismatch {
            what: "labels",
            declared: n_nodes,
            found: labels.len(),
        });
    }
    Ok(labels)
}

pub fn load_dataset(manifest: &DatasetManifest) -> Result<GraphDataset> {
    let n = manifest.n_nodes;
    let adjacency = read_edges(&manifest.resolve(&manifest.edges), n)?;
    let fpath = manifest.resolve(&manifest.features);
    let features = match manifest.feature_kind {
        FeatureKind::DenseCsv => read_dense_features(&fpath, n, manifest.n_features)?,
        FeatureKind::SparseTriplet => read_sparse_features(&fpath, n, manifest.n_features)?,
    };
    let labels = read_labels(&manifest.resolve(&manifest.labels), n, manifest.n_classes)?;
    GraphDataset::new(manifest.name.clone(), adjacency, features, labels, manifest.n_classes)
}

/// Writes `dataset` as a dense-CSV manifest plus data files into `dir`.
pub fn write_dataset(dataset: &GraphDataset, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut edges = String::new();
    for r in 0..dataset.n_nodes {
        for (c, _) in dataset.adjacency.row(r) {
            if r < c {
                edges.push_str(&format!("{r} {c}\n"));
            }
        }
    }
    let mut feats = String::new();
    for r in 0..dataset.n_nodes {
        let row: Vec<String> = dataset.features.row(r).iter().map(|v| v.to_string()).collect();
        feats.push_str(&row.join(","));
        feats.push('\n');
    }
    let labels: String = dataset.labels.iter().map(|l| format!("{l}\n")).collect();
    let manifest = DatasetManifest {
        name: dataset.name.clone(),
        edges: "edges.txt".into(),
        features: "features.csv".into(),
        labels: "labels.txt".into(),
        n_nodes: dataset.n_nodes,
        n_features: dataset.n_features(),
        n_classes: dataset.n_classes,
        feature_kind: FeatureKind::DenseCsv,
        base_dir: dir.to_path_buf(),
    };
    let files = [
        ("edges.txt", edges),
        ("features.csv", feats),
        ("labels.txt", labels),
        (
            "manifest.json",
            serde_json::to_string_pretty(&manifest).expect("manifests serialize") + "\n",
        ),
    ];
    for (name, body) in files {
        let p = dir.join(name);
        fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
    }
    Ok(dir.join("manifest.json"))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub per_class_train: usize,
    pub val_size: usize,
    pub split_seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            per_class_train: 20,
            val_size: 500,
            split_seed: 0,
        }
    }
}

/// `per_class_train` nodes of every class for training, `val_size` of the
/// remainder for validation, the rest for testing.
pub fn generate_split(dataset: &GraphDataset, spec: &SplitSpec) -> Result<Splits> {
    let n = dataset.n_nodes;
    let needed = spec.per_class_train * dataset.n_classes + spec.val_size;
    if needed > n {
        return Err(Error::Validation(format!(
            "split needs {needed} nodes, dataset has {n}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.split_seed);
    let mut splits = Splits::empty(n);
    for class in 0..dataset.n_classes {
        let mut members: Vec<usize> = (0..n).filter(|&i| dataset.labels[i] == class).collect();
        if members.len() < spec.per_class_train {
            return Err(Error::InsufficientClass {
                class,
                available: members.len(),
                required: spec.per_class_train,
            });
        }
        members.shuffle(&mut rng);
        for &i in &members[..spec.per_class_train] {
            splits.train[i] = true;
        }
    }
    let mut rest: Vec<usize> = (0..n).filter(|&i| !splits.train[i]).collect();
    rest.shuffle(&mut rng);
    for (pos, &i) in rest.iter().enumerate() {
        if pos < spec.val_size {
            splits.val[i] = true;
        } else {
            splits.test[i] = true;
        }
    }
    Ok(splits)
}

pub fn sparse_to_string(m: &SparseMatrix) -> String {
    let mut out = format!("{} {} {}\n", m.n_rows(), m.n_cols(), m.nnz());
    for r in 0..m.n_rows() {
        for (c, v) in m.row(r) {
            out.push_str(&format!("{r} {c} {v:?}\n"));
        }
    }
    out
}

pub fn export_sparse(m: &SparseMatrix, path: &Path) -> Result<()> {
    fs::write(path, sparse_to_string(m)).map_err(|e| Error::io(path, e))
}

pub fn import_sparse(path: &Path) -> Result<SparseMatrix> {
    let text = read(path)?;
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (hline, header) = lines.next().ok_or_else(|| parse_err(path, 1, "missing header"))?;
    let mut h = header.split_whitespace();
    let n_rows: usize = parse_field(path, hline, "row count", h.next())?;
    let n_cols: usize = parse_field(path, hline, "column count", h.next())?;
    let nnz: usize = parse_field(path, hline, "nnz", h.next())?;
    if h.next().is_some() {
        return Err(parse_err(path, hline, "header must be `n_rows n_cols nnz`"));
    }
    let mut trip = Vec::with_capacity(nnz);
    let mut last: Option<(usize, usize)> = None;
    for (line, l) in lines {
        if l.trim().is_empty() {
            continue;
        }
        let mut it = l.split_whitespace();
        let r: usize = parse_field(path, line, "row", it.next())?;
        let c: usize = parse_field(path, line, "column", it.next())?;
        let v: f64 = parse_field(path, line, "value", it.next())?;
        if it.next().is_some() {
            return Err(parse_err(path, line, "expected `row col value`"));
        }
        if r >= n_rows || c >= n_cols {
            return Err(parse_err(
                path,
                line,
                format!("entry ({r}, {c}) outside {n_rows}x{n_cols}"),
            ));
        }
        if last.is_some_and(|p| p >= (r, c)) {
            return Err(parse_err(path, line, "entries must be in ascending row-major order"));
        }
        last = Some((r, c));
        trip.push((r, c, v));
    }
    if trip.len() != nnz {
        return Err(parse_err(
            path,
            hline,
            format!("header declares {nnz} entries, file has {}", trip.len()),
        ));
    }
    SparseMatrix::from_triplets(n_rows, n_cols, &trip)
}

/// Metadata written next to cached filter matrices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterCacheMeta {
    pub key: String,
    pub spec: FilterSpec,
    pub files: Vec<String>,
    pub stats: FilterStats,
    pub hop_stats: Vec<FilterStats>,
}

pub fn filter_cache_dir(root: &Path, key: &str) -> PathBuf {
    root.join(format!("filter-{key}"))
}

/// Writes per-hop matrices (attention) or the diffusion matrix into `dir`.
pub fn save_filter(filter: &GraphFilter, spec: &FilterSpec, key: &str, dir: &Path) -> Result<FilterCacheMeta> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    let mut hop_stats = Vec::new();
    match filter {
        GraphFilter::Attention { powers, .. } => {
            for (hop, m) in powers.hops().iter().zip(powers.matrices()) {
                let name = format!("hop{hop}.txt");
                export_sparse(m, &dir.join(&name))?;
                files.push(name);
                hop_stats.push(FilterStats::of(m));
            }
        }
        GraphFilter::Diffusion { matrix, .. } => {
            let name = "ppr.txt".to_string();
            export_sparse(matrix, &dir.join(&name))?;
            files.push(name);
            hop_stats.push(FilterStats::of(matrix));
        }
    }
    let meta = FilterCacheMeta {
        key: key.to_string(),
        spec: *spec,
        files,
        stats: filter.stats(),
        hop_stats,
    };
    let p = dir.join("meta.json");
    let body = serde_json::to_string_pretty(&meta).expect("metadata serializes") + "\n";
    fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
    Ok(meta)
}

/// Loads a cached filter if `dir` holds one for exactly `key`.
pub fn load_filter(dir: &Path, key: &str) -> Result<Option<GraphFilter>> {
    let meta_path = dir.join("meta.json");
    if !meta_path.is_file() {
        return Ok(None);
    }
    let meta: FilterCacheMeta =
        serde_json::from_str(&read(&meta_path)?).map_err(|e| Error::json(&meta_path, e))?;
    if meta.key != key {
        return Ok(None);
    }
    let matrices = meta
        .files
        .iter()
        .map(|f| import_sparse(&dir.join(f)))
        .collect::<Result<Vec<_>>>()?;
    let filter = match meta.spec.mode {
        FilterMode::Attention { max_hop } => {
            let powers = HopPowerSet::new((1..=max_hop).collect(), matrices)?;
            GraphFilter::from_powers(powers)?
        }
        FilterMode::Ppr { alpha, truncation } => {
            let matrix = matrices
                .into_iter()
                .next()
                .ok_or_else(|| Error::Validation("diffusion cache holds no matrix".into()))?;
            GraphFilter::Diffusion {
                matrix: matrix.into(),
                params: DiffusionFilterParams { alpha, truncation },
            }
        }
    };
    Ok(Some(filter))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::normalize_adjacency;

    fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
        let p = dir.join(name);
        fs::write(&p, body).unwrap();
        p
    }

    fn toy_dir(edges: &str, feats: &str, labels: &str) -> tempfile::TempDir {
        let d = tempfile::tempdir().unwrap();
        write(d.path(), "edges.txt", edges);
        write(d.path(), "features.csv", feats);
        write(d.path(), "labels.txt", labels);
        write(
            d.path(),
            "manifest.json",
            r#"{"name":"toy","edges":"edges.txt","features":"features.csv","labels":"labels.txt",
                "n_nodes":3,"n_features":2,"n_classes":2,"feature_kind":"dense-csv"}"#,
        );
        d
    }

    fn load(d: &tempfile::TempDir) -> Result<GraphDataset> {
        load_dataset(&DatasetManifest::load(&d.path().join("manifest.json")).unwrap())
    }

    #[test]
    fn loads_and_merges_duplicates() {
        let d = toy_dir("0 1\n1 0\n# c\n1 2\n2 2\n", "1,0\n0,1\n1,1\n", "0\n1\n1\n");
        let ds = load(&d).unwrap();
        assert_eq!(ds.n_edges(), 2);
        assert!(ds.adjacency.get(2, 2).is_none());
        assert_eq!(ds.labels, vec![0, 1, 1]);
        assert_eq!(ds.features.row(2), &[1.0, 1.0]);
    }

    #[test]
    fn distinct_load_errors() {
        let d = toy_dir("0 3\n", "1,0\n0,1\n1,1\n", "0\n1\n1\n");
        assert!(matches!(load(&d), Err(Error::DanglingEdge { line: 1, node: 3, .. })));
        let d = toy_dir("0 1\n", "1,0\n0,1\n1,1\n", "0\n1\n2\n");
        assert!(matches!(load(&d), Err(Error::LabelOutOfRange { node: 2, label: 2, .. })));
        let d = toy_dir("0 1\n", "1,0\n0,1\n", "0\n1\n1\n");
        assert!(matches!(load(&d), Err(Error::CountMismatch { what: "feature rows", .. })));
        let d = toy_dir("0 1\n", "1,0\n0,1\n1,1\n", "0\n1\n");
        assert!(matches!(load(&d), Err(Error::CountMismatch { what: "labels", .. })));
        let d = toy_dir("0 x\n", "1,0\n0,1\n1,1\n", "0\n1\n1\n");
        assert!(matches!(load(&d), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn writer_round_trips() {
        let d = toy_dir("0 1\n1 2\n", "1.5,0\n0,1e-3\n1,1\n", "0\n1\n1\n");
        let ds = load(&d).unwrap();
        let out = tempfile::tempdir().unwrap();
        let m = write_dataset(&ds, out.path()).unwrap();
        let back = load_dataset(&DatasetManifest::load(&m).unwrap()).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn split_counts_and_determinism() {
        let d = toy_dir("0 1\n1 2\n", "1,0\n0,1\n1,1\n", "0\n1\n1\n");
        let ds = load(&d).unwrap();
        let spec = SplitSpec {
            per_class_train: 1,
            val_size: 1,
            split_seed: 4,
        };
        let s = generate_split(&ds, &spec).unwrap();
        let count = |m: &[bool]| m.iter().filter(|&&b| b).count();
        assert_eq!((count(&s.train), count(&s.val), count(&s.test)), (2, 1, 0));
        s.validate(3).unwrap();
        assert_eq!(s, generate_split(&ds, &spec).unwrap());
        let too_many = SplitSpec {
            per_class_train: 2,
            val_size: 0,
            split_seed: 0,
        };
        assert!(matches!(generate_split(&ds, &too_many), Err(Error::Validation(_))));
        let skewed = GraphDataset::new(
            "skewed",
            SparseMatrix::zeros(5, 5),
            Tensor::zeros(&[5, 1]),
            vec![0, 1, 1, 1, 1],
            2,
        )
        .unwrap();
        assert!(matches!(
            generate_split(&skewed, &too_many),
            Err(Error::InsufficientClass { class: 0, available: 1, required: 2 })
        ));
    }

    #[test]
    fn sparse_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let a = SparseMatrix::from_triplets(2, 2, &[(0, 1, 1.0), (1, 0, 1.0)]).unwrap();
        let t = normalize_adjacency(&a).unwrap();
        let p = dir.path().join("t.txt");
        export_sparse(&t, &p).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().count(), 5);
        assert_eq!(import_sparse(&p).unwrap(), t);
        let third = SparseMatrix::from_triplets(1, 3, &[(0, 2, 1.0 / 3.0)]).unwrap();
        export_sparse(&third, &p).unwrap();
        assert_eq!(import_sparse(&p).unwrap(), third);
        let empty = SparseMatrix::zeros(3, 4);
        export_sparse(&empty, &p).unwrap();
        assert_eq!(import_sparse(&p).unwrap(), empty);
    }

    #[test]
    fn sparse_import_reports_lines() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "bad.txt", "2 2 2\n0 0 1.0\n1 one 2.0\n");
        assert!(matches!(import_sparse(&p), Err(Error::Parse { line: 3, .. })));
        let p = write(dir.path(), "short.txt", "2 2 3\n0 0 1.0\n");
        assert!(matches!(import_sparse(&p), Err(Error::Parse { line: 1, .. })));
        let p = write(dir.path(), "order.txt", "2 2 2\n1 0 1.0\n0 0 1.0\n");
        assert!(matches!(import_sparse(&p), Err(Error::Parse { line: 3, .. })));
    }

    #[test]
    fn filter_cache_round_trip() {
        let a = SparseMatrix::from_triplets(
            4,
            4,
            &[(0, 1, 1.0), (1, 0, 1.0), (1, 2, 1.0), (2, 1, 1.0), (2, 3, 1.0), (3, 2, 1.0)],
        )
        .unwrap();
        let t = normalize_adjacency(&a).unwrap();
        let dir = tempfile::tempdir().unwrap();
        for spec in [
            FilterSpec::default(),
            FilterSpec {
                mode: FilterMode::Ppr {
                    alpha: 0.1,
                    truncation: Some(10),
                },
                ..FilterSpec::default()
            },
        ] {
            let f = GraphFilter::build(&t, &spec).unwrap();
            let key = spec.cache_key(&a);
            let sub = filter_cache_dir(dir.path(), &key);
            save_filter(&f, &spec, &key, &sub).unwrap();
            let back = load_filter(&sub, &key).unwrap().unwrap();
            assert_eq!(back.materialize(Some(&[0.0, 0.0])).unwrap(), f.materialize(Some(&[0.0, 0.0])).unwrap());
            assert!(load_filter(&sub, "other").unwrap().is_none());
        }
    }
}
