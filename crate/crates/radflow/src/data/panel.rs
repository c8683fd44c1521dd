//! The series panel: an N x T x D array of raw observations with a
//! missing-value mask and node metadata, plus its on-disk format.
//!
//! File layout: a 16-byte magic+version header, then N, T, D as unsigned
//! 64-bit little-endian, values as row-major 32-bit floats, the mask as
//! packed bits (LSB first), and a length-prefixed UTF-8 metadata block.

use crate::error::{RadflowError, Result};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::Path;

pub const PANEL_MAGIC: &[u8; 16] = b"RADFLOW-PANEL\0\0\x01";

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct NodeMeta {
    pub name: String,
    pub category: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeriesPanel {
    n: usize,
    t: usize,
    d: usize,
    /// Raw-scale observations, node-major then time then dim.
    values: Vec<f32>,
    /// True marks a missing observation (per node and step, all dims).
    mask: Vec<bool>,
    meta: Vec<NodeMeta>,
}

impl SeriesPanel {
    pub fn new(n: usize, t: usize, d: usize) -> Self {
        SeriesPanel {
            n,
            t,
            d,
            values: vec![0.0; n * t * d],
            mask: vec![false; n * t],
            meta: (0..n)
                .map(|j| NodeMeta {
                    name: format!("node{j}"),
                    category: None,
                })
                .collect(),
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.n
    }

    pub fn n_steps(&self) -> usize {
        self.t
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn value(&self, node: usize, step: usize, dim: usize) -> f64 {
        self.values[(node * self.t + step) * self.d + dim] as f64
    }

    pub fn set_value(&mut self, node: usize, step: usize, dim: usize, v: f64) {
        self.values[(node * self.t + step) * self.d + dim] = v as f32;
    }

    pub fn is_missing(&self, node: usize, step: usize) -> bool {
        self.mask[node * self.t + step]
    }

    pub fn set_missing(&mut self, node: usize, step: usize, missing: bool) {
        self.mask[node * self.t + step] = missing;
    }

    pub fn missing_rate(&self) -> f64 {
        if self.mask.is_empty() {
            return 0.0;
        }
        self.mask.iter().filter(|&&m| m).count() as f64 / self.mask.len() as f64
    }

    pub fn meta(&self, node: usize) -> &NodeMeta {
        &self.meta[node]
    }

    pub fn set_meta(&mut self, node: usize, meta: NodeMeta) {
        self.meta[node] = meta;
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut w = BufWriter::new(File::create(&tmp)?);
            w.write_all(PANEL_MAGIC)?;
            for v in [self.n, self.t, self.d] {
                w.write_all(&(v as u64).to_le_bytes())?;
            }
            for v in &self.values {
                w.write_all(&v.to_le_bytes())?;
            }
            let mut bits = vec![0u8; self.mask.len().div_ceil(8)];
            for (i, &m) in self.mask.iter().enumerate() {
                if m {
                    bits[i / 8] |= 1 << (i % 8);
                }
            }
            w.write_all(&bits)?;
            let text = self
                .meta
                .iter()
                .map(|m| format!("{}\t{}", m.name, m.category.as_deref().unwrap_or("")))
                .collect::<Vec<_>>()
                .join("\n");
            w.write_all(&(text.len() as u64).to_le_bytes())?;
            w.write_all(text.as_bytes())?;
            w.flush()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let fmt = |reason: &str| RadflowError::Format {
            path: path.display().to_string(),
            reason: reason.into(),
        };
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 16];
        r.read_exact(&mut magic).map_err(|_| fmt("truncated header"))?;
        if &magic != PANEL_MAGIC {
            return Err(fmt("bad magic bytes"));
        }
        let mut dims = [0usize; 3];
        for v in &mut dims {
            let mut buf = [0u8; 8];
            r.read_exact(&mut buf).map_err(|_| fmt("truncated descriptor"))?;
            *v = u64::from_le_bytes(buf) as usize;
        }
        let [n, t, d] = dims;
        let mut values = vec![0.0f32; n * t * d];
        let mut buf = vec![0u8; n * t * d * 4];
        r.read_exact(&mut buf).map_err(|_| fmt("truncated values"))?;
        for (i, chunk) in buf.chunks_exact(4).enumerate() {
            values[i] = f32::from_le_bytes(chunk.try_into().unwrap());
        }
        let mut bits = vec![0u8; (n * t).div_ceil(8)];
        r.read_exact(&mut bits).map_err(|_| fmt("truncated mask"))?;
        let mask = (0..n * t).map(|i| bits[i / 8] >> (i % 8) & 1 == 1).collect();
        let mut lenbuf = [0u8; 8];
        r.read_exact(&mut lenbuf).map_err(|_| fmt("truncated metadata length"))?;
        let len = u64::from_le_bytes(lenbuf) as usize;
        let mut text = vec![0u8; len];
        r.read_exact(&mut text).map_err(|_| fmt("truncated metadata"))?;
        let text = String::from_utf8(text).map_err(|_| fmt("metadata not UTF-8"))?;
        let meta = if text.is_empty() {
            (0..n).map(|_| NodeMeta::default()).collect::<Vec<_>>()
        } else {
            text.lines()
                .map(|line| {
                    let (name, cat) = line.split_once('\t').unwrap_or((line, ""));
                    NodeMeta {
                        name: name.to_string(),
                        category: (!cat.is_empty()).then(|| cat.to_string()),
                    }
                })
                .collect()
        };
        if meta.len() != n {
            return Err(fmt("metadata row count mismatch"));
        }
        Ok(SeriesPanel {
            n,
            t,
            d,
            values,
            mask,
            meta,
        })
    }

    /// Random-access read of one node's [t0, t1) window straight from disk,
    /// without loading the rest of the panel. Returns (values, mask) in the
    /// same layout a full load would give for that slice.
    pub fn read_node_window(
        path: &Path,
        node: usize,
        t0: usize,
        t1: usize,
    ) -> Result<(Vec<f32>, Vec<bool>)> {
        let fmt = |reason: &str| RadflowError::Format {
            path: path.display().to_string(),
            reason: reason.into(),
        };
        let mut f = File::open(path)?;
        let mut header = [0u8; 16 + 24];
        f.read_exact(&mut header).map_err(|_| fmt("truncated header"))?;
        if &header[..16] != PANEL_MAGIC {
            return Err(fmt("bad magic bytes"));
        }
        let word = |i: usize| {
            u64::from_le_bytes(header[16 + i * 8..16 + (i + 1) * 8].try_into().unwrap()) as usize
        };
        let (n, t, d) = (word(0), word(1), word(2));
        if node >= n || t0 >= t1 || t1 > t {
            return Err(RadflowError::Data(format!(
                "window [{t0}, {t1}) of node {node} out of {n} x {t} panel"
            )));
        }
        let base = 16 + 24;
        let offset = base + (node * t + t0) * d * 4;
        f.seek(SeekFrom::Start(offset as u64))?;
        let mut buf = vec![0u8; (t1 - t0) * d * 4];
        f.read_exact(&mut buf).map_err(|_| fmt("truncated values"))?;
        let values = buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let mask_base = base + n * t * d * 4;
        let first_bit = node * t + t0;
        let byte0 = first_bit / 8;
        let byte1 = (node * t + t1 - 1) / 8 + 1;
        f.seek(SeekFrom::Start((mask_base + byte0) as u64))?;
        let mut bits = vec![0u8; byte1 - byte0];
        f.read_exact(&mut bits).map_err(|_| fmt("truncated mask"))?;
        let mask = (first_bit..node * t + t1)
            .map(|i| bits[i / 8 - byte0] >> (i % 8) & 1 == 1)
            .collect();
        Ok((values, mask))
    }
}

/// Replace each missing entry with the most recent valid value; leading
/// missing entries fill with zero.
pub fn forward_fill(series: &[Vec<f64>], mask: &[bool]) -> Vec<Vec<f64>> {
    let dim = series.first().map_or(0, |v| v.len());
    let mut last: Option<Vec<f64>> = None;
    let mut out = Vec::with_capacity(series.len());
    for (t, row) in series.iter().enumerate() {
        if mask.get(t).copied().unwrap_or(false) {
            out.push(last.clone().unwrap_or_else(|| vec![0.0; dim]));
        } else {
            last = Some(row.clone());
            out.push(row.clone());
        }
    }
    out
}

/// A panel with forward-fill applied once, kept in both raw and log scale
/// for repeated window reads during training and evaluation.
#[derive(Debug, Clone)]
pub struct FilledPanel {
    n: usize,
    t: usize,
    d: usize,
    raw: Vec<f64>,
    log: Vec<f64>,
}

impl FilledPanel {
    pub fn from_panel(panel: &SeriesPanel) -> Self {
        let (n, t, d) = (panel.n_nodes(), panel.n_steps(), panel.dim());
        let mut raw = vec![0.0; n * t * d];
        for node in 0..n {
            let series: Vec<Vec<f64>> = (0..t)
                .map(|s| (0..d).map(|k| panel.value(node, s, k)).collect())
                .collect();
            let mask: Vec<bool> = (0..t).map(|s| panel.is_missing(node, s)).collect();
            let filled = forward_fill(&series, &mask);
            for (s, row) in filled.iter().enumerate() {
                raw[(node * t + s) * d..(node * t + s) * d + d].copy_from_slice(row);
            }
        }
        let log = raw
            .iter()
            .map(|&v| crate::model::runner::to_log(v))
            .collect();
        FilledPanel { n, t, d, raw, log }
    }

    pub fn n_nodes(&self) -> usize {
        self.n
    }

    pub fn n_steps(&self) -> usize {
        self.t
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn raw_at(&self, node: usize, step: usize) -> &[f64] {
        let i = (node * self.t + step) * self.d;
        &self.raw[i..i + self.d]
    }

    pub fn raw_window(&self, node: usize, t0: usize, t1: usize) -> Vec<Vec<f64>> {
        (t0..t1).map(|s| self.raw_at(node, s).to_vec()).collect()
    }

    pub fn log_window(&self, node: usize, t0: usize, t1: usize) -> Vec<Vec<f64>> {
        (t0..t1)
            .map(|s| {
                let i = (node * self.t + s) * self.d;
                self.log[i..i + self.d].to_vec()
            })
            .collect()
    }

    /// Total raw value across dims at one step (used by importance scoring).
    pub fn total_at(&self, node: usize, step: usize) -> f64 {
        self.raw_at(node, step).iter().sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_panel(n: usize, t: usize, d: usize, seed: u64) -> SeriesPanel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut panel = SeriesPanel::new(n, t, d);
        for node in 0..n {
            for step in 0..t {
                for dim in 0..d {
                    panel.set_value(node, step, dim, rng.gen_range(0.0..100.0));
                }
                panel.set_missing(node, step, rng.gen_bool(0.15));
            }
            panel.set_meta(
                node,
                NodeMeta {
                    name: format!("series-{node}"),
                    category: (node % 2 == 0).then(|| format!("cat{}", node % 3)),
                },
            );
        }
        panel
    }

    #[test]
    fn save_load_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("panel.bin");
        let panel = random_panel(7, 13, 2, 1);
        panel.save(&path).unwrap();
        let loaded = SeriesPanel::load(&path).unwrap();
        assert_eq!(panel, loaded);

        // Identical content writes identical bytes.
        let path2 = dir.path().join("panel2.bin");
        loaded.save(&path2).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
    }

    #[test]
    fn random_access_window_matches_full_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("panel.bin");
        let panel = random_panel(5, 29, 3, 2);
        panel.save(&path).unwrap();
        for (node, t0, t1) in [(0, 0, 29), (3, 7, 20), (4, 28, 29), (2, 0, 1)] {
            let (values, mask) = SeriesPanel::read_node_window(&path, node, t0, t1).unwrap();
            let mut expect_v: Vec<f32> = Vec::new();
            for s in t0..t1 {
                for k in 0..3 {
                    expect_v.push(panel.value(node, s, k) as f32);
                }
            }
            let expect_m: Vec<bool> = (t0..t1).map(|s| panel.is_missing(node, s)).collect();
            assert_eq!(values, expect_v);
            assert_eq!(mask, expect_m);
        }
    }

    #[test]
    fn corrupt_magic_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("panel.bin");
        let panel = random_panel(2, 3, 1, 3);
        panel.save(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] ^= 0xff;
        std::fs::write(&path, &bytes).unwrap();
        match SeriesPanel::load(&path) {
            Err(RadflowError::Format { reason, .. }) => assert!(reason.contains("magic")),
            other => panic!("expected a format error, got {other:?}"),
        }
        match SeriesPanel::read_node_window(&path, 0, 0, 2) {
            Err(RadflowError::Format { .. }) => {}
            other => panic!("expected a format error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_file_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("panel.bin");
        random_panel(3, 4, 1, 4).save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(
            SeriesPanel::load(&path),
            Err(RadflowError::Format { .. })
        ));
    }

    #[test]
    fn forward_fill_examples() {
        let series = vec![vec![1.0], vec![0.0], vec![0.0], vec![4.0]];
        let mask = vec![false, true, true, false];
        assert_eq!(
            forward_fill(&series, &mask),
            vec![vec![1.0], vec![1.0], vec![1.0], vec![4.0]]
        );

        let series = vec![vec![7.0], vec![8.0], vec![3.0]];
        let mask = vec![true, true, false];
        assert_eq!(
            forward_fill(&series, &mask),
            vec![vec![0.0], vec![0.0], vec![3.0]]
        );

        let series = vec![vec![5.0, 6.0], vec![1.0, 2.0]];
        let mask = vec![false, true];
        assert_eq!(
            forward_fill(&series, &mask),
            vec![vec![5.0, 6.0], vec![5.0, 6.0]]
        );
    }

    #[test]
    fn filled_panel_applies_fill_and_log() {
        let mut panel = SeriesPanel::new(1, 3, 1);
        panel.set_value(0, 0, 0, 2.0);
        panel.set_value(0, 1, 0, 99.0);
        panel.set_missing(0, 1, true);
        panel.set_value(0, 2, 0, 5.0);
        let filled = FilledPanel::from_panel(&panel);
        assert_eq!(filled.raw_at(0, 1), &[2.0]);
        assert_eq!(filled.raw_window(0, 0, 3), vec![vec![2.0], vec![2.0], vec![5.0]]);
        let logs = filled.log_window(0, 0, 3);
        assert!((logs[2][0] - 5.0f64.ln_1p()).abs() < 1e-12);
        assert_eq!(filled.total_at(0, 2), 5.0);
    }

    #[test]
    fn missing_rate_counts_mask_bits() {
        let mut panel = SeriesPanel::new(2, 2, 1);
        panel.set_missing(0, 0, true);
        assert_eq!(panel.missing_rate(), 0.25);
    }
}
