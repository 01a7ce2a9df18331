//! Line-delimited dataset files: one JSON header record followed by one
//! JSON graph record per line. Streamable, diffable, and trivially
//! producible by external featurization scripts.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::graph::{validate_graph, Dataset, Graph, LabelSet, Split};
use crate::numerics::Mat;
use crate::train::SplitIndices;

use super::IoError;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    tasks: usize,
    node_feat_width: usize,
    edge_feat_width: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Record {
    num_nodes: usize,
    edges: Vec<(usize, usize)>,
    node_feats: Vec<Vec<f64>>,
    edge_feats: Vec<Vec<f64>>,
    /// One entry per task; `null` marks a missing label.
    labels: Vec<Option<f64>>,
    #[serde(default = "default_split")]
    split: Split,
}

fn default_split() -> Split {
    Split::Train
}

/// Serialize a dataset. The header precedes the records; record order is
/// the dataset order.
pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<(), IoError> {
    let mut out = String::new();
    let header = Header {
        format_version: FORMAT_VERSION,
        tasks: ds.num_tasks(),
        node_feat_width: ds.graphs.first().map_or(0, |g| g.node_feats().cols()),
        edge_feat_width: ds.graphs.first().map_or(0, |g| g.edge_feats().cols()),
    };
    out.push_str(&serde_json::to_string(&header).expect("header serializes"));
    out.push('\n');
    for (i, g) in ds.graphs.iter().enumerate() {
        let record = Record {
            num_nodes: g.num_nodes(),
            edges: g.edges().to_vec(),
            node_feats: (0..g.node_feats().rows())
                .map(|r| g.node_feats().row(r).to_vec())
                .collect(),
            edge_feats: (0..g.edge_feats().rows())
                .map(|r| g.edge_feats().row(r).to_vec())
                .collect(),
            labels: (0..ds.num_tasks()).map(|t| ds.labels.get(i, t)).collect(),
            split: ds.split[i],
        };
        out.push_str(&serde_json::to_string(&record).expect("record serializes"));
        out.push('\n');
    }
    super::write_atomic(path, out.as_bytes())
}

/// Load and fully validate a dataset. The first malformed or invariant-
/// violating record aborts the load with its line number.
pub fn load_dataset(path: &Path) -> Result<Dataset, IoError> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let (_, header_line) = lines.next().ok_or(IoError::Malformed {
        line: 1,
        message: "empty file: missing header".to_string(),
    })?;
    let header: Header = serde_json::from_str(header_line).map_err(|e| IoError::Malformed {
        line: 1,
        message: format!("bad header: {e}"),
    })?;
    if header.format_version != FORMAT_VERSION {
        return Err(IoError::VersionMismatch {
            found: header.format_version,
            expected: FORMAT_VERSION,
        });
    }
    if header.tasks == 0 {
        return Err(IoError::Malformed {
            line: 1,
            message: "header declares zero tasks".to_string(),
        });
    }

    let mut graphs = Vec::new();
    let mut labels: Vec<Vec<Option<f64>>> = Vec::new();
    let mut split = Vec::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let record: Record = serde_json::from_str(line).map_err(|e| IoError::Malformed {
            line: line_no,
            message: format!("bad record: {e}"),
        })?;
        if record.labels.len() != header.tasks {
            return Err(IoError::Malformed {
                line: line_no,
                message: format!(
                    "record has {} labels, header declares {} tasks",
                    record.labels.len(),
                    header.tasks
                ),
            });
        }
        let node_feats = mat_from_rows(&record.node_feats, header.node_feat_width)
            .map_err(|m| IoError::Malformed { line: line_no, message: m })?;
        let edge_feats = mat_from_rows(&record.edge_feats, header.edge_feat_width)
            .map_err(|m| IoError::Malformed { line: line_no, message: m })?;
        let g = Graph::new(record.num_nodes, record.edges, node_feats, edge_feats);
        let report = validate_graph(&g);
        if !report.is_ok() {
            return Err(IoError::Malformed {
                line: line_no,
                message: format!("invalid graph: {}", report.violations.join("; ")),
            });
        }
        graphs.push(g);
        labels.push(record.labels);
        split.push(record.split);
    }
    let labels = LabelSet::from_options(&labels).map_err(|e| IoError::Dataset(e.to_string()))?;
    Dataset::new(graphs, labels, split).map_err(|e| IoError::Dataset(e.to_string()))
}

fn mat_from_rows(rows: &[Vec<f64>], width: usize) -> Result<Mat, String> {
    for (i, row) in rows.iter().enumerate() {
        if row.len() != width {
            return Err(format!(
                "feature row {} has width {}, expected {}",
                i,
                row.len(),
                width
            ));
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(format!("feature row {i} has a non-finite entry"));
        }
    }
    if rows.is_empty() {
        return Ok(Mat::zeros(0, width));
    }
    Mat::from_rows(rows).map_err(|e| e.to_string())
}

/// External split-index file: a JSON object with `train`, `valid`, and
/// `test` index arrays (for example a scaffold split computed upstream).
pub fn load_split_file(path: &Path) -> Result<SplitIndices, IoError> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| IoError::Malformed {
        line: 1,
        message: format!("bad split file: {e}"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_dataset() -> Dataset {
        let g1 = Graph::undirected(
            3,
            &[(0, 1), (1, 2)],
            Mat::from_rows(&[vec![1.0, 0.5], vec![0.0, -1.0], vec![0.25, 0.75]]).unwrap(),
            &Mat::from_rows(&[vec![1.0], vec![2.0]]).unwrap(),
        );
        let g2 = Graph::undirected(
            2,
            &[(0, 1)],
            Mat::from_rows(&[vec![0.1, 0.2], vec![0.3, 0.4]]).unwrap(),
            &Mat::from_rows(&[vec![-1.0]]).unwrap(),
        );
        let labels = LabelSet::from_options(&[
            vec![Some(1.0), None],
            vec![Some(0.0), Some(1.0)],
        ])
        .unwrap();
        Dataset::new(vec![g1, g2], labels, vec![Split::Train, Split::Test]).unwrap()
    }

    #[test]
    fn roundtrip_preserves_everything() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.jsonl");
        let ds = sample_dataset();
        save_dataset(&ds, &path).unwrap();
        let loaded = load_dataset(&path).unwrap();
        assert_eq!(ds, loaded);
    }

    #[test]
    fn null_label_becomes_mask() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.jsonl");
        save_dataset(&sample_dataset(), &path).unwrap();
        let loaded = load_dataset(&path).unwrap();
        assert_eq!(loaded.labels.get(0, 1), None);
        assert_eq!(loaded.labels.get(0, 0), Some(1.0));
    }

    #[test]
    fn truncated_record_names_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.jsonl");
        save_dataset(&sample_dataset(), &path).unwrap();
        let mut text = std::fs::read_to_string(&path).unwrap();
        let keep = text.lines().next().unwrap().len() + 1 + 30;
        text.truncate(keep);
        std::fs::write(&path, text).unwrap();
        match load_dataset(&path) {
            Err(IoError::Malformed { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected malformed at line 2, got {other:?}"),
        }
    }

    #[test]
    fn invalid_graph_is_rejected_with_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.jsonl");
        let header = r#"{"format_version":1,"tasks":1,"node_feat_width":1,"edge_feat_width":1}"#;
        // Edge endpoint 9 is out of range.
        let bad = r#"{"num_nodes":2,"edges":[[0,9],[9,0]],"node_feats":[[1.0],[2.0]],"edge_feats":[[0.0],[0.0]],"labels":[1.0]}"#;
        std::fs::write(&path, format!("{header}\n{bad}\n")).unwrap();
        match load_dataset(&path) {
            Err(IoError::Malformed { line, message }) => {
                assert_eq!(line, 2);
                assert!(message.contains("endpoint out of range"), "{message}");
            }
            other => panic!("unexpected: {other:?}"),
        }
    }

    #[test]
    fn wrong_version_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.jsonl");
        std::fs::write(
            &path,
            r#"{"format_version":9,"tasks":1,"node_feat_width":1,"edge_feat_width":1}"#,
        )
        .unwrap();
        assert!(matches!(
            load_dataset(&path),
            Err(IoError::VersionMismatch { found: 9, .. })
        ));
    }

    #[test]
    fn split_file_parses() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("split.json");
        std::fs::write(&path, r#"{"train":[0,1],"valid":[2],"test":[3]}"#).unwrap();
        let idx = load_split_file(&path).unwrap();
        assert_eq!(idx.train, vec![0, 1]);
        assert_eq!(idx.valid, vec![2]);
        assert_eq!(idx.test, vec![3]);
    }
}
