//! Side feature vectors standing in for image features: loading, pseudo
//! generation, and projection into the width the models expect.
//!
//! Grid features are fixed 49x2048 spatial maps; pooled features are
//! single vectors of configurable width (classifier logits by default).

use std::collections::HashMap;
use std::path::Path;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Graph, NodeId, Result as TensorResult};
use crate::text::{fnv1a64, sample_normal};

pub const GRID_ROWS: usize = 49;
pub const GRID_COLS: usize = 2048;
/// Default pooled width: the classifier logit vector of the upstream CNN.
pub const DEFAULT_POOLED_DIM: usize = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    Grid,
    Pooled,
}

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("cannot open {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {source}")]
    Parse {
        path: String,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("feature {key}: expected {expected} values, got {got}")]
    WrongLength { key: String, expected: usize, got: usize },
    #[error("feature {key}: contains a non-finite value")]
    NonFinite { key: String },
    #[error("grid feature file must start with a {{\"kind\",\"rows\",\"cols\"}} header")]
    MissingHeader,
    #[error("header kind {got:?} does not match requested {want:?}")]
    KindMismatch { want: FeatureKind, got: FeatureKind },
    #[error("header declares {rows}x{cols}, grid features are {GRID_ROWS}x{GRID_COLS}")]
    BadGridShape { rows: usize, cols: usize },
}

/// Immutable feature table keyed by `feature_ref`.
#[derive(Clone, Debug)]
pub enum FeatureSet {
    Grid { vectors: HashMap<String, Vec<f32>> },
    /// `dim` is zero only for an empty table.
    Pooled { dim: usize, vectors: HashMap<String, Vec<f32>> },
}

impl FeatureSet {
    pub fn kind(&self) -> FeatureKind {
        match self {
            FeatureSet::Grid { .. } => FeatureKind::Grid,
            FeatureSet::Pooled { .. } => FeatureKind::Pooled,
        }
    }

    pub fn get(&self, feature_ref: &str) -> Option<&[f32]> {
        match self {
            FeatureSet::Grid { vectors } | FeatureSet::Pooled { vectors, .. } => {
                vectors.get(feature_ref).map(Vec::as_slice)
            }
        }
    }

    pub fn len(&self) -> usize {
        match self {
            FeatureSet::Grid { vectors } | FeatureSet::Pooled { vectors, .. } => vectors.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Width of one record: 49*2048 for grids, `dim` for pooled.
    pub fn record_len(&self) -> usize {
        match self {
            FeatureSet::Grid { .. } => GRID_ROWS * GRID_COLS,
            FeatureSet::Pooled { dim, .. } => *dim,
        }
    }

    pub fn from_pooled(vectors: HashMap<String, Vec<f32>>) -> FeatureSet {
        let dim = vectors.values().next().map_or(0, Vec::len);
        FeatureSet::Pooled { dim, vectors }
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: FeatureKind,
    #[serde(default)]
    rows: usize,
    #[serde(default)]
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct Record {
    feature_ref: String,
    values: Vec<f32>,
}

/// Load a JSON-lines feature file. Grid files carry a header line; pooled
/// files may omit it, in which case the first record fixes the width.
pub fn load_features(path: &Path, kind: FeatureKind) -> Result<FeatureSet, FeatureError> {
    let display = path.display().to_string();
    let text = std::fs::read_to_string(path)
        .map_err(|source| FeatureError::Io { path: display.clone(), source })?;
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .peekable();

    let mut expected: Option<usize> = None;
    if let Some(&(i, first)) = lines.peek() {
        if let Ok(header) = serde_json::from_str::<Header>(first) {
            let _ = i;
            lines.next();
            if header.kind != kind {
                return Err(FeatureError::KindMismatch { want: kind, got: header.kind });
            }
            match kind {
                FeatureKind::Grid => {
                    if header.rows != GRID_ROWS || header.cols != GRID_COLS {
                        return Err(FeatureError::BadGridShape {
                            rows: header.rows,
                            cols: header.cols,
                        });
                    }
                }
                FeatureKind::Pooled => {
                    if header.cols > 0 {
                        expected = Some(header.cols);
                    }
                }
            }
        } else if kind == FeatureKind::Grid {
            return Err(FeatureError::MissingHeader);
        }
    } else if kind == FeatureKind::Grid && !text.trim().is_empty() {
        return Err(FeatureError::MissingHeader);
    }
    if kind == FeatureKind::Grid {
        expected = Some(GRID_ROWS * GRID_COLS);
    }

    let mut vectors = HashMap::new();
    for (i, line) in lines {
        let record: Record = serde_json::from_str(line).map_err(|source| FeatureError::Parse {
            path: display.clone(),
            line: i + 1,
            source,
        })?;
        let want = *expected.get_or_insert(record.values.len());
        if record.values.len() != want {
            return Err(FeatureError::WrongLength {
                key: record.feature_ref,
                expected: want,
                got: record.values.len(),
            });
        }
        if record.values.iter().any(|v| !v.is_finite()) {
            return Err(FeatureError::NonFinite { key: record.feature_ref });
        }
        vectors.insert(record.feature_ref, record.values);
    }

    Ok(match kind {
        FeatureKind::Grid => FeatureSet::Grid { vectors },
        FeatureKind::Pooled => FeatureSet::Pooled { dim: expected.unwrap_or(0), vectors },
    })
}

/// Write a feature table, keys sorted for reproducible bytes. Grid files
/// get the mandatory header.
pub fn save_features(path: &Path, set: &FeatureSet) -> Result<(), FeatureError> {
    use std::io::Write;
    let display = path.display().to_string();
    let file = std::fs::File::create(path)
        .map_err(|source| FeatureError::Io { path: display.clone(), source })?;
    let mut w = std::io::BufWriter::new(file);
    let mut emit = |line: String| -> Result<(), FeatureError> {
        writeln!(w, "{line}").map_err(|source| FeatureError::Io { path: display.clone(), source })
    };
    let vectors = match set {
        FeatureSet::Grid { vectors } => {
            emit(serde_json::to_string(&Header {
                kind: FeatureKind::Grid,
                rows: GRID_ROWS,
                cols: GRID_COLS,
            })
            .unwrap())?;
            vectors
        }
        FeatureSet::Pooled { vectors, .. } => vectors,
    };
    let mut keys: Vec<&String> = vectors.keys().collect();
    keys.sort();
    for key in keys {
        emit(
            serde_json::to_string(&Record {
                feature_ref: key.clone(),
                values: vectors[key].clone(),
            })
            .unwrap(),
        )?;
    }
    Ok(())
}

/// Deterministic unit-norm pseudo feature: a hash of the ref mixed with
/// the seed drives the draw, so the same inputs always give the same
/// vector and distinct refs give near-orthogonal ones.
pub fn pseudo_features(feature_ref: &str, dim: usize, seed: u64) -> Vec<f32> {
    assert!(dim > 0, "feature dimension must be positive");
    let mix = fnv1a64(feature_ref) ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    let mut rng = ChaCha8Rng::seed_from_u64(mix);
    let mut v: Vec<f32> = (0..dim).map(|_| sample_normal(&mut rng)).collect();
    let norm = v.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt() as f32;
    if norm > 0.0 {
        for x in v.iter_mut() {
            *x /= norm;
        }
    } else {
        v[0] = 1.0;
    }
    v
}

/// Affine projection `v W + b` of a pooled feature into the conditioning
/// width, recorded on the graph so gradients reach W and b.
pub fn project_feature(
    graph: &mut Graph,
    v: NodeId,
    w: NodeId,
    b: NodeId,
) -> TensorResult<NodeId> {
    let prod = graph.matmul(v, w)?;
    graph.add(prod, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Graph;

    fn write_lines(lines: &[&str]) -> tempfile::NamedTempFile {
        use std::io::Write;
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f
    }

    #[test]
    fn loads_single_grid_record() {
        let values: Vec<String> = vec!["0.5".to_string(); GRID_ROWS * GRID_COLS];
        let record = format!(
            "{{\"feature_ref\":\"img-1\",\"values\":[{}]}}",
            values.join(",")
        );
        let f = write_lines(&[
            "{\"kind\":\"grid\",\"rows\":49,\"cols\":2048}",
            &record,
        ]);
        let set = load_features(f.path(), FeatureKind::Grid).unwrap();
        assert_eq!(set.len(), 1);
        assert_eq!(set.get("img-1").unwrap().len(), GRID_ROWS * GRID_COLS);
    }

    #[test]
    fn rejects_wrong_length_naming_key() {
        let f = write_lines(&[
            "{\"feature_ref\":\"a\",\"values\":[1.0,2.0]}",
            "{\"feature_ref\":\"bad\",\"values\":[1.0]}",
        ]);
        let err = load_features(f.path(), FeatureKind::Pooled).unwrap_err();
        match err {
            FeatureError::WrongLength { key, expected, got } => {
                assert_eq!(key, "bad");
                assert_eq!((expected, got), (2, 1));
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn empty_file_is_valid_pooled() {
        let f = write_lines(&[]);
        let set = load_features(f.path(), FeatureKind::Pooled).unwrap();
        assert!(set.is_empty());
    }

    #[test]
    fn missing_file_is_rejected() {
        let err = load_features(Path::new("/nonexistent/features.jsonl"), FeatureKind::Pooled)
            .unwrap_err();
        assert!(matches!(err, FeatureError::Io { .. }));
    }

    #[test]
    fn grid_without_header_is_rejected() {
        let f = write_lines(&["{\"feature_ref\":\"a\",\"values\":[1.0]}"]);
        let err = load_features(f.path(), FeatureKind::Grid).unwrap_err();
        assert!(matches!(err, FeatureError::MissingHeader));
    }

    #[test]
    fn save_load_round_trip() {
        let mut vectors = HashMap::new();
        vectors.insert("r1".to_string(), vec![1.0, 2.0, 3.0]);
        vectors.insert("r0".to_string(), vec![-1.0, 0.5, 0.25]);
        let set = FeatureSet::from_pooled(vectors);
        let f = tempfile::NamedTempFile::new().unwrap();
        save_features(f.path(), &set).unwrap();
        let back = load_features(f.path(), FeatureKind::Pooled).unwrap();
        assert_eq!(back.get("r0").unwrap(), &[-1.0, 0.5, 0.25]);
        assert_eq!(back.get("r1").unwrap(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn pseudo_features_deterministic_unit_norm() {
        let a = pseudo_features("img-1", 256, 7);
        let b = pseudo_features("img-1", 256, 7);
        assert_eq!(a, b);
        let norm: f32 = a.iter().map(|x| x * x).sum::<f32>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6, "norm {norm}");
        assert_ne!(a, pseudo_features("img-1", 256, 8));
    }

    #[test]
    fn pseudo_features_mostly_dissimilar() {
        // Monte Carlo: distinct refs should be near-orthogonal at dim 256.
        let mut below = 0usize;
        let n = 1000usize;
        for i in 0..n {
            let a = pseudo_features(&format!("a-{i}"), 256, 1);
            let b = pseudo_features(&format!("b-{i}"), 256, 1);
            let cos: f32 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
            if cos.abs() < 0.5 {
                below += 1;
            }
        }
        assert!(below >= 990, "only {below}/{n} pairs below 0.5 cosine");
    }

    #[test]
    fn projection_matches_direct_arithmetic() {
        let mut g = Graph::new();
        let v_data = vec![0.5, -1.0, 2.0];
        let w_data = vec![0.1, 0.2, 0.3, 0.4, -0.5, 0.6]; // 3x2
        let b_data = vec![0.05, -0.05];
        let v = g.constant(v_data.clone(), vec![1, 3]).unwrap();
        let w = g.constant(w_data.clone(), vec![3, 2]).unwrap();
        let b = g.constant(b_data.clone(), vec![2]).unwrap();
        let out = project_feature(&mut g, v, w, b).unwrap();
        // Independent scalar-loop evaluation.
        let mut want = b_data.clone();
        for (j, w_col) in want.iter_mut().enumerate() {
            for i in 0..3 {
                *w_col += v_data[i] * w_data[i * 2 + j];
            }
        }
        for (got, want) in g.values(out).iter().zip(&want) {
            assert!((got - want).abs() < 1e-6);
        }
    }

    #[test]
    fn projection_zero_weights_give_zero() {
        let mut g = Graph::new();
        let v = g.constant(vec![3.0, 4.0], vec![1, 2]).unwrap();
        let w = g.constant(vec![0.0; 8], vec![2, 4]).unwrap();
        let b = g.constant(vec![0.0; 4], vec![4]).unwrap();
        let out = project_feature(&mut g, v, w, b).unwrap();
        assert_eq!(g.values(out), &[0.0; 4]);
    }

    #[test]
    fn projection_is_linear_without_bias() {
        let mut g = Graph::new();
        let v_data = vec![0.3, -0.7, 1.1, 0.2];
        let w_data: Vec<f32> = (0..12).map(|i| (i as f32) * 0.17 - 1.0).collect();
        let alpha = 2.5f32;
        let v = g.constant(v_data.clone(), vec![1, 4]).unwrap();
        let scaled: Vec<f32> = v_data.iter().map(|x| alpha * x).collect();
        let v2 = g.constant(scaled, vec![1, 4]).unwrap();
        let w = g.constant(w_data, vec![4, 3]).unwrap();
        let b = g.constant(vec![0.0; 3], vec![3]).unwrap();
        let p1 = project_feature(&mut g, v, w, b).unwrap();
        let p2 = project_feature(&mut g, v2, w, b).unwrap();
        for (a, b) in g.values(p1).to_vec().iter().zip(g.values(p2)) {
            assert!((alpha * a - b).abs() < 1e-6);
        }
    }
}
