//! Adapters turning public traffic CSV dumps (a T x N speed matrix plus an
//! N x N static adjacency matrix) into the standard panel and edges formats.

use crate::data::graph::{DynamicGraph, EdgeInterval};
use crate::data::panel::SeriesPanel;
use crate::error::{RadflowError, Result};
use serde::Serialize;
use std::io::{BufRead, BufReader};
use std::path::Path;

#[derive(Debug, Clone, Serialize)]
pub struct IngestReport {
    pub nodes: usize,
    pub steps: usize,
    pub dim: usize,
    pub edges: usize,
    pub missing_rate: f64,
}

fn read_matrix(path: &Path) -> Result<Vec<Vec<f64>>> {
    let fmt = |line_no: usize, reason: String| RadflowError::Format {
        path: path.display().to_string(),
        reason: format!("line {line_no}: {reason}"),
    };
    let r = BufReader::new(std::fs::File::open(path)?);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let parsed: std::result::Result<Vec<f64>, _> =
            line.split(',').map(|f| f.trim().parse::<f64>()).collect();
        match parsed {
            Ok(row) => {
                if let Some(first) = rows.first() {
                    if row.len() != first.len() {
                        return Err(fmt(
                            i + 1,
                            format!("{} columns where {} expected", row.len(), first.len()),
                        ));
                    }
                }
                rows.push(row);
            }
            // A non-numeric first line is a header; anywhere else it is an error.
            Err(e) if rows.is_empty() => {
                let _ = e;
                continue;
            }
            Err(e) => return Err(fmt(i + 1, e.to_string())),
        }
    }
    if rows.is_empty() {
        return Err(RadflowError::Format {
            path: path.display().to_string(),
            reason: "no data rows".into(),
        });
    }
    Ok(rows)
}

/// Reads a T x N speed matrix and an N x N adjacency matrix. Rows of the
/// speed file are time steps; nonzero adjacency entries become directed
/// edges active over the whole panel. Zero speed readings are marked
/// missing when `zeros_missing` is set (sensor dropouts).
pub fn ingest_traffic(
    speed_path: &Path,
    adjacency_path: &Path,
    zeros_missing: bool,
) -> Result<(SeriesPanel, DynamicGraph, IngestReport)> {
    let speeds = read_matrix(speed_path)?;
    let adj = read_matrix(adjacency_path)?;
    let t = speeds.len();
    let n = speeds[0].len();
    if adj.len() != n || adj.iter().any(|row| row.len() != n) {
        return Err(RadflowError::Data(format!(
            "adjacency is {}x{} but the speed matrix has {n} columns",
            adj.len(),
            adj.first().map_or(0, |r| r.len()),
        )));
    }

    let mut panel = SeriesPanel::new(n, t, 1);
    for (s, row) in speeds.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            panel.set_value(j, s, 0, v);
            if zeros_missing && v == 0.0 {
                panel.set_missing(j, s, true);
            }
        }
    }

    let mut edges = Vec::new();
    for (src, row) in adj.iter().enumerate() {
        for (dst, &w) in row.iter().enumerate() {
            if src != dst && w != 0.0 {
                edges.push(EdgeInterval {
                    src,
                    dst,
                    start: 0,
                    end: t,
                });
            }
        }
    }
    let n_edges = edges.len();
    let graph = DynamicGraph::new(n, t, &edges)?;

    let report = IngestReport {
        nodes: n,
        steps: t,
        dim: 1,
        edges: n_edges,
        missing_rate: panel.missing_rate(),
    };
    Ok((panel, graph, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &std::path::Path, name: &str, content: &str) -> std::path::PathBuf {
        let path = dir.join(name);
        std::fs::write(&path, content).unwrap();
        path
    }

    #[test]
    fn small_matrices_ingest() {
        let dir = tempfile::tempdir().unwrap();
        let speeds = write(
            dir.path(),
            "speeds.csv",
            "sensor_a,sensor_b,sensor_c\n10,0,30\n11,21,31\n12,22,0\n13,23,33\n",
        );
        let adj = write(dir.path(), "adj.csv", "0,1,0\n0,0,0.5\n1,0,0\n");
        let (panel, graph, report) = ingest_traffic(&speeds, &adj, true).unwrap();
        assert_eq!((report.nodes, report.steps, report.dim), (3, 4, 1));
        assert_eq!(report.edges, 3);
        assert_eq!(panel.value(0, 0, 0), 10.0);
        assert_eq!(panel.value(2, 1, 0), 31.0);
        assert!(panel.is_missing(1, 0));
        assert!(panel.is_missing(2, 2));
        assert_eq!(report.missing_rate, 2.0 / 12.0);
        assert_eq!(graph.neighbors_at(1, 0), vec![0]);
        assert_eq!(graph.neighbors_at(2, 3), vec![1]);
        assert_eq!(graph.neighbors_at(0, 0), vec![2]);

        // zeros kept as observations
        let (panel2, _, report2) = ingest_traffic(&speeds, &adj, false).unwrap();
        assert_eq!(report2.missing_rate, 0.0);
        assert!(!panel2.is_missing(1, 0));
    }

    #[test]
    fn ingest_is_idempotent_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let speeds = write(dir.path(), "speeds.csv", "1,2\n3,4\n");
        let adj = write(dir.path(), "adj.csv", "0,1\n1,0\n");
        let (panel, graph, _) = ingest_traffic(&speeds, &adj, true).unwrap();
        let p1 = dir.path().join("a.panel");
        let p2 = dir.path().join("b.panel");
        panel.save(&p1).unwrap();
        let (panel_b, graph_b, _) = ingest_traffic(&speeds, &adj, true).unwrap();
        panel_b.save(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        let e1 = dir.path().join("a.edges");
        let e2 = dir.path().join("b.edges");
        graph.save_edges(&e1).unwrap();
        graph_b.save_edges(&e2).unwrap();
        assert_eq!(std::fs::read(&e1).unwrap(), std::fs::read(&e2).unwrap());
    }

    #[test]
    fn malformed_inputs_are_errors() {
        let dir = tempfile::tempdir().unwrap();
        let adj = write(dir.path(), "adj.csv", "0,1\n1,0\n");

        // Non-numeric row past the header
        let bad = write(dir.path(), "bad.csv", "1,2\n3,oops\n");
        assert!(matches!(
            ingest_traffic(&bad, &adj, false),
            Err(RadflowError::Format { .. })
        ));

        // Ragged rows
        let ragged = write(dir.path(), "ragged.csv", "1,2\n3\n");
        assert!(matches!(
            ingest_traffic(&ragged, &adj, false),
            Err(RadflowError::Format { .. })
        ));

        // Empty file
        let empty = write(dir.path(), "empty.csv", "");
        assert!(matches!(
            ingest_traffic(&empty, &adj, false),
            Err(RadflowError::Format { .. })
        ));

        // Adjacency shape mismatch
        let speeds = write(dir.path(), "speeds.csv", "1,2,3\n4,5,6\n");
        assert!(matches!(
            ingest_traffic(&speeds, &adj, false),
            Err(RadflowError::Data(_))
        ));
    }
}
