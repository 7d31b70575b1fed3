//! On-disk formats: the canonical JSON graph container and CSV edge-list conversion.
//!
//! Container layout (keys sorted, `format_version` 1):
//!
//! ```text
//! {"feature_dim":..,"format_version":1,"graphs":[{"edges":[[s,d],..],"features":[[..],..],
//!   "graph_label"?:..,"node_labels"?:[..],"num_nodes":..,"undirected":..}],"kind":"node_task",
//!   "num_classes":..,"splits"?:{"test":[..],"train":[..],"val":[..]}}
//! ```

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{symmetrize, Graph, GraphSet, Splits, TaskKind};
use crate::tensor::{SparseAdj, Tensor};

pub const FORMAT_VERSION: u64 = 1;

/// Serializes with sorted object keys (compact, newline-terminated).
pub fn to_canonical_json<T: Serialize>(value: &T) -> Result<String> {
    let v = serde_json::to_value(value).map_err(|e| Error::Data(e.to_string()))?;
    let mut s = serde_json::to_string(&v).map_err(|e| Error::Data(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

/// Same as [`to_canonical_json`] but indented.
pub fn to_canonical_json_pretty<T: Serialize>(value: &T) -> Result<String> {
    let v = serde_json::to_value(value).map_err(|e| Error::Data(e.to_string()))?;
    let mut s = serde_json::to_string_pretty(&v).map_err(|e| Error::Data(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let mut off = 0;
    for (i, l) in text.split_inclusive('\n').enumerate() {
        if i + 1 == line {
            return (off + column.saturating_sub(1)).min(text.len());
        }
        off += l.len();
    }
    text.len()
}

/// Parses `text` as JSON, then decodes it into `T` with field-path error reporting.
pub fn parse_json<T: DeserializeOwned>(text: &str) -> Result<T> {
    let value: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::Parse {
        offset: byte_offset(text, e.line(), e.column()),
        detail: e.to_string(),
    })?;
    serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        Error::schema(path, e.into_inner().to_string())
    })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ContainerFile {
    format_version: u64,
    kind: TaskKind,
    num_classes: usize,
    feature_dim: usize,
    graphs: Vec<GraphRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    splits: Option<Splits>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GraphRecord {
    num_nodes: usize,
    features: Vec<Vec<f64>>,
    edges: Vec<[i64; 2]>,
    undirected: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    node_labels: Option<Vec<i64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    graph_label: Option<i64>,
}

fn label(v: i64, path: String, classes: usize) -> Result<usize> {
    if v < 0 || v as usize >= classes {
        return Err(Error::schema(
            path,
            format!("label {v} outside [0, {classes})"),
        ));
    }
    Ok(v as usize)
}

fn decode(file: ContainerFile) -> Result<GraphSet> {
    if file.format_version != FORMAT_VERSION {
        return Err(Error::Version {
            found: file.format_version,
            expected: FORMAT_VERSION,
        });
    }
    let mut graphs = Vec::with_capacity(file.graphs.len());
    for (gi, rec) in file.graphs.into_iter().enumerate() {
        let path = format!("graphs[{gi}]");
        let n = rec.num_nodes;
        if rec.features.len() != n {
            return Err(Error::schema(
                format!("{path}.features"),
                format!("{} rows for num_nodes {n}", rec.features.len()),
            ));
        }
        let mut data = Vec::with_capacity(n * file.feature_dim);
        for (r, row) in rec.features.iter().enumerate() {
            if row.len() != file.feature_dim {
                return Err(Error::schema(
                    format!("{path}.features[{r}]"),
                    format!("{} values, feature_dim {}", row.len(), file.feature_dim),
                ));
            }
            data.extend_from_slice(row);
        }
        let mut edges = Vec::with_capacity(rec.edges.len());
        for (k, &[s, d]) in rec.edges.iter().enumerate() {
            if s < 0 || d < 0 || s as usize >= n || d as usize >= n {
                return Err(Error::schema(
                    format!("{path}.edges[{k}]"),
                    format!("dangling edge ({s},{d}) in a {n}-node graph"),
                ));
            }
            edges.push((s as usize, d as usize));
        }
        let adj = SparseAdj::unweighted(n, edges, rec.undirected)
            .map_err(|e| Error::schema(format!("{path}.edges"), e.to_string()))?;
        let mut g = Graph::new(Tensor::new(vec![n, file.feature_dim], data)?, adj)?;
        if let Some(ls) = rec.node_labels {
            g.node_labels = Some(
                ls.into_iter()
                    .enumerate()
                    .map(|(i, v)| label(v, format!("{path}.node_labels[{i}]"), file.num_classes))
                    .collect::<Result<_>>()?,
            );
        }
        if let Some(v) = rec.graph_label {
            g.graph_label = Some(label(v, format!("{path}.graph_label"), file.num_classes)?);
        }
        graphs.push(g);
    }
    let set = GraphSet {
        kind: file.kind,
        graphs,
        num_classes: file.num_classes,
        feature_dim: file.feature_dim,
        splits: file.splits,
    };
    set.validate()?;
    Ok(set)
}

fn encode(set: &GraphSet) -> ContainerFile {
    ContainerFile {
        format_version: FORMAT_VERSION,
        kind: set.kind,
        num_classes: set.num_classes,
        feature_dim: set.feature_dim,
        graphs: set
            .graphs
            .iter()
            .map(|g| GraphRecord {
                num_nodes: g.num_nodes(),
                features: (0..g.num_nodes())
                    .map(|r| g.features.row(r).to_vec())
                    .collect(),
                edges: g
                    .adj
                    .edges()
                    .iter()
                    .map(|&(s, d)| [s as i64, d as i64])
                    .collect(),
                undirected: g.adj.is_undirected(),
                node_labels: g
                    .node_labels
                    .as_ref()
                    .map(|l| l.iter().map(|&v| v as i64).collect()),
                graph_label: g.graph_label.map(|v| v as i64),
            })
            .collect(),
        splits: set.splits.clone(),
    }
}

pub fn container_from_str(text: &str) -> Result<GraphSet> {
    decode(parse_json(text)?)
}

pub fn container_to_string(set: &GraphSet) -> Result<String> {
    to_canonical_json(&encode(set))
}

pub fn load_container(path: impl AsRef<Path>) -> Result<GraphSet> {
    container_from_str(&fs::read_to_string(path)?)
}

pub fn save_container(set: &GraphSet, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, container_to_string(set)?)?;
    Ok(())
}

fn csv_reader(text: &str) -> csv::Reader<&[u8]> {
    csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes())
}

fn csv_err(what: &str, e: csv::Error) -> Error {
    Error::Data(format!("{what}: {e}"))
}

/// Builds a single-graph container from CSV text: `src,dst` edge lines,
/// one feature row per node, one integer label per node.
pub fn convert_edgelist(
    edges_csv: &str,
    features_csv: &str,
    labels_csv: &str,
    kind: TaskKind,
) -> Result<GraphSet> {
    if !kind.splits_nodes() {
        return Err(Error::Config(format!(
            "edge-list conversion produces a single graph; {} needs many",
            kind.as_str()
        )));
    }
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, rec) in csv_reader(features_csv).records().enumerate() {
        let rec = rec.map_err(|e| csv_err("features", e))?;
        let row = rec
            .iter()
            .map(|f| {
                f.parse::<f64>()
                    .map_err(|_| Error::Data(format!("features line {}: bad number {f:?}", i + 1)))
            })
            .collect::<Result<Vec<_>>>()?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(Error::Data(format!(
                    "features line {}: ragged row ({} values, expected {})",
                    i + 1,
                    row.len(),
                    first.len()
                )));
            }
        }
        rows.push(row);
    }
    let n = rows.len();
    if n == 0 {
        return Err(Error::Data("features file has no rows".into()));
    }
    let d = rows[0].len();

    let mut labels = Vec::with_capacity(n);
    for (i, rec) in csv_reader(labels_csv).records().enumerate() {
        let rec = rec.map_err(|e| csv_err("labels", e))?;
        let f = rec.get(0).unwrap_or("");
        let v: usize = f
            .parse()
            .map_err(|_| Error::Data(format!("labels line {}: non-integer label {f:?}", i + 1)))?;
        labels.push(v);
    }
    if labels.len() != n {
        return Err(Error::Data(format!(
            "{} labels for {n} feature rows",
            labels.len()
        )));
    }

    let mut pairs = Vec::new();
    for (i, rec) in csv_reader(edges_csv).records().enumerate() {
        let rec = rec.map_err(|e| csv_err("edges", e))?;
        if rec.len() != 2 {
            return Err(Error::Data(format!(
                "edges line {}: expected src,dst",
                i + 1
            )));
        }
        let parse = |f: &str| -> Result<usize> {
            f.parse()
                .map_err(|_| Error::Data(format!("edges line {}: bad index {f:?}", i + 1)))
        };
        let (s, t) = (parse(&rec[0])?, parse(&rec[1])?);
        if s >= n || t >= n {
            return Err(Error::Index(format!(
                "edges line {}: ({s},{t}) out of range for {n} nodes",
                i + 1
            )));
        }
        pairs.push((s, t));
    }

    let features = Tensor::new(vec![n, d], rows.into_iter().flatten().collect())?;
    let adj = SparseAdj::unweighted(n, symmetrize(&pairs), true)?;
    let mut g = Graph::new(features, adj)?;
    let num_classes = labels.iter().max().map_or(1, |m| m + 1).max(2);
    g.node_labels = Some(labels);
    let set = GraphSet {
        kind,
        graphs: vec![g],
        num_classes,
        feature_dim: d,
        splits: None,
    };
    set.validate()?;
    Ok(set)
}

pub fn convert_edgelist_files(
    edges: impl AsRef<Path>,
    features: impl AsRef<Path>,
    labels: impl AsRef<Path>,
    kind: TaskKind,
) -> Result<GraphSet> {
    convert_edgelist(
        &fs::read_to_string(edges)?,
        &fs::read_to_string(features)?,
        &fs::read_to_string(labels)?,
        kind,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{"feature_dim":2,"format_version":1,"graphs":[{"edges":[[0,1],[1,0]],"features":[[1.0,0.0],[0.0,1.0],[0.5,0.5]],"node_labels":[0,1,1],"num_nodes":3,"undirected":true}],"kind":"node_task","num_classes":2}
"#;

    #[test]
    fn minimal_node_container() {
        let set = container_from_str(MINIMAL).unwrap();
        assert_eq!(set.graphs.len(), 1);
        assert_eq!(set.graphs[0].num_nodes(), 3);
        assert_eq!(container_to_string(&set).unwrap(), MINIMAL);
    }

    #[test]
    fn dangling_edge_names_path() {
        let bad = MINIMAL.replace("[[0,1],[1,0]]", "[[5,0]]");
        let err = container_from_str(&bad).unwrap_err();
        match err {
            Error::Schema { path, .. } => assert_eq!(path, "graphs[0].edges[0]"),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn label_out_of_range() {
        let bad = MINIMAL.replace("[0,1,1]", "[0,1,2]");
        let err = container_from_str(&bad).unwrap_err().to_string();
        assert!(err.contains("graphs[0].node_labels[2]"), "{err}");
    }

    #[test]
    fn schema_error_has_field_path() {
        let bad = MINIMAL.replace("\"undirected\":true", "\"undirected\":3");
        let err = container_from_str(&bad).unwrap_err().to_string();
        assert!(err.contains("graphs[0].undirected"), "{err}");
    }

    #[test]
    fn wrong_version() {
        let bad = MINIMAL.replace("\"format_version\":1", "\"format_version\":2");
        assert!(matches!(
            container_from_str(&bad),
            Err(Error::Version { found: 2, .. })
        ));
    }

    #[test]
    fn truncated_reports_offset() {
        let cut = &MINIMAL[..40];
        match container_from_str(cut) {
            Err(Error::Parse { offset, .. }) => assert!(offset <= 40),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn csv_dedups_reverse_edges() {
        let set =
            convert_edgelist("0,1\n1,0\n", "1,0\n0,1\n", "0\n1\n", TaskKind::NodeTask).unwrap();
        assert_eq!(set.graphs[0].adj.edges(), &[(0, 1), (1, 0)]);
        assert_eq!(set.graphs[0].undirected_pairs(), vec![(0, 1)]);
    }

    #[test]
    fn csv_empty_edges() {
        let set = convert_edgelist("", "1\n2\n3\n", "0\n1\n0\n", TaskKind::NodeTask).unwrap();
        assert_eq!(set.graphs[0].num_nodes(), 3);
        assert_eq!(set.graphs[0].adj.num_edges(), 0);
    }

    #[test]
    fn csv_ragged_and_bad_labels() {
        assert!(convert_edgelist("", "1,2\n3\n", "0\n1\n", TaskKind::NodeTask).is_err());
        assert!(convert_edgelist("", "1\n2\n", "0\nx\n", TaskKind::NodeTask).is_err());
        assert!(convert_edgelist("", "1\n2\n", "0\n1.5\n", TaskKind::NodeTask).is_err());
    }
}
