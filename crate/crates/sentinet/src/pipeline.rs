//! Raw sensor records to normalized attributed-graph windows.
//!
//! The stages, in order: align irregular per-node records onto a fixed time
//! grid (closest record per interval, linear interpolation across gaps),
//! decimate each length-`kW` segment into `k` phase-interleaved windows,
//! z-score every `(node, modality)` series per window, build the sensor
//! adjacency from coordinates, and split chronologically at 7:2:1. Everything
//! here is a pure function of its inputs, so rerunning a stage reproduces its
//! output byte for byte.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{DatasetSplit, GraphSample};

/// Standard-deviation floor in z-scoring; constant windows map to zeros.
pub const SIGMA_FLOOR: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid pipeline config: {0}")]
    Config(String),
    #[error("no records at all for node {node}, modality {modality}; gap is unrecoverable")]
    Gap { node: usize, modality: usize },
    #[error(
        "cannot interpolate grid point {grid_index} for node {node}, modality {modality}: \
         no record on {side} side of the empty interval"
    )]
    Boundary {
        node: usize,
        modality: usize,
        grid_index: usize,
        side: &'static str,
    },
    #[error("series too short: need {required} grid points from start, have {available}")]
    Length { required: usize, available: usize },
    #[error("non-finite value at node {node}, modality {modality}, index {index}")]
    Data {
        node: usize,
        modality: usize,
        index: usize,
    },
    #[error("CSV line {line}: {message}")]
    Csv { line: u64, message: String },
    #[error("I/O: {0}")]
    Io(#[from] std::io::Error),
}

// ---- raw records and alignment -------------------------------------------------

/// One raw reading: a timestamp, a node, and one optional value per modality
/// (missing cells were empty in the source).
#[derive(Debug, Clone, PartialEq)]
pub struct RawRecord {
    pub timestamp: f64,
    pub node_id: usize,
    pub values: Vec<Option<f64>>,
}

/// Regular-grid series with an interpolation mask.
#[derive(Debug, Clone)]
pub struct AlignedSeries {
    pub interval: f64,
    /// Grid timestamps, strictly increasing with spacing `interval`.
    pub grid: Vec<f64>,
    /// `N×M×T`, finite everywhere.
    pub data: Array3<f64>,
    /// True exactly where the value was interpolated rather than observed.
    pub fill_mask: Array3<bool>,
}

/// Align raw records onto the grid `span.0, span.0+interval, …` (all points
/// ≤ `span.1`).
///
/// An interval `[g, g+interval)` holding records uses the one closest to `g`
/// (ties averaged). Empty intervals interpolate linearly between the nearest
/// record before `g` and the nearest after; a missing side is a boundary
/// error, and a `(node, modality)` with no records at all is a gap error.
pub fn align_timestamps(
    records: &[RawRecord],
    interval: f64,
    span: (f64, f64),
    nodes: usize,
    modalities: usize,
) -> Result<AlignedSeries, PipelineError> {
    if !(interval > 0.0) || !interval.is_finite() {
        return Err(PipelineError::Config(format!(
            "interval must be positive and finite, got {interval}"
        )));
    }
    if !(span.1 >= span.0) || !span.0.is_finite() || !span.1.is_finite() {
        return Err(PipelineError::Config(format!("bad span {span:?}")));
    }
    if nodes == 0 || modalities == 0 {
        return Err(PipelineError::Config("nodes and modalities must be positive".into()));
    }
    let t_count = ((span.1 - span.0) / interval).floor() as usize + 1;
    let grid: Vec<f64> = (0..t_count).map(|i| span.0 + i as f64 * interval).collect();

    // Bucket records per (node, modality), sorted by time.
    let mut streams: Vec<Vec<(f64, f64)>> = vec![Vec::new(); nodes * modalities];
    for r in records {
        if r.node_id >= nodes {
            return Err(PipelineError::Config(format!(
                "record node_id {} out of range (N = {nodes})",
                r.node_id
            )));
        }
        for (m, v) in r.values.iter().enumerate() {
            if m >= modalities {
                break;
            }
            if let Some(v) = v {
                if !v.is_finite() || !r.timestamp.is_finite() {
                    return Err(PipelineError::Data {
                        node: r.node_id,
                        modality: m,
                        index: 0,
                    });
                }
                streams[r.node_id * modalities + m].push((r.timestamp, *v));
            }
        }
    }
    for s in &mut streams {
        s.sort_by(|a, b| a.0.total_cmp(&b.0));
    }

    let mut data = Array3::zeros((nodes, modalities, t_count));
    let mut fill_mask = Array3::from_elem((nodes, modalities, t_count), false);
    for n in 0..nodes {
        for m in 0..modalities {
            let s = &streams[n * modalities + m];
            if s.is_empty() {
                return Err(PipelineError::Gap { node: n, modality: m });
            }
            for (gi, &g) in grid.iter().enumerate() {
                // Records inside [g, g+interval).
                let lo = s.partition_point(|&(t, _)| t < g);
                let hi = s.partition_point(|&(t, _)| t < g + interval);
                if lo < hi {
                    // Closest to the interval start = earliest; average exact ties.
                    let t_first = s[lo].0;
                    let ties: Vec<f64> = s[lo..hi]
                        .iter()
                        .take_while(|&&(t, _)| t == t_first)
                        .map(|&(_, v)| v)
                        .collect();
                    data[[n, m, gi]] = ties.iter().sum::<f64>() / ties.len() as f64;
                } else {
                    // Empty interval: nearest record strictly before g and
                    // nearest at/after g+interval straddle the grid point.
                    if lo == 0 {
                        return Err(PipelineError::Boundary {
                            node: n,
                            modality: m,
                            grid_index: gi,
                            side: "left",
                        });
                    }
                    if hi == s.len() {
                        return Err(PipelineError::Boundary {
                            node: n,
                            modality: m,
                            grid_index: gi,
                            side: "right",
                        });
                    }
                    let (tl, vl) = s[lo - 1];
                    let (tr, vr) = s[hi];
                    let w = (g - tl) / (tr - tl);
                    data[[n, m, gi]] = vl + (vr - vl) * w;
                    fill_mask[[n, m, gi]] = true;
                }
            }
        }
    }
    Ok(AlignedSeries {
        interval,
        grid,
        data,
        fill_mask,
    })
}

// ---- windowing -----------------------------------------------------------------

/// One `N×M×W` window cut from the aligned series.
#[derive(Debug, Clone)]
pub struct SampleWindow {
    pub x: Array3<f64>,
    /// Timestamp of the window's first grid point.
    pub origin_time: f64,
    /// Decimation phase in `[0, k)`.
    pub phase: usize,
}

/// Decimate the length-`kW` segment at `start` into `k` phase-interleaved
/// windows: phase `p` takes grid indices `start+p, start+p+k, …`.
pub fn downsample_windows(
    series: &AlignedSeries,
    k: usize,
    w: usize,
    start: usize,
) -> Result<Vec<SampleWindow>, PipelineError> {
    if k < 1 || w < 1 {
        return Err(PipelineError::Config(format!(
            "decimation step and window must be at least 1, got k={k}, W={w}"
        )));
    }
    let t = series.data.shape()[2];
    let required = k * w;
    if start > t || t - start < required {
        return Err(PipelineError::Length {
            required,
            available: t.saturating_sub(start),
        });
    }
    let (n, m) = (series.data.shape()[0], series.data.shape()[1]);
    let mut out = Vec::with_capacity(k);
    for p in 0..k {
        let mut x = Array3::zeros((n, m, w));
        for ni in 0..n {
            for mi in 0..m {
                for t_out in 0..w {
                    x[[ni, mi, t_out]] = series.data[[ni, mi, start + p + t_out * k]];
                }
            }
        }
        out.push(SampleWindow {
            x,
            origin_time: series.grid[start + p],
            phase: p,
        });
    }
    Ok(out)
}

/// Cut the whole series into consecutive `kW` segments (dropping a trailing
/// partial one) and decimate each; windows come out in chronological segment
/// order, phases in order within a segment.
pub fn enumerate_windows(
    series: &AlignedSeries,
    k: usize,
    w: usize,
) -> Result<Vec<SampleWindow>, PipelineError> {
    if k < 1 || w < 1 {
        return Err(PipelineError::Config(format!(
            "decimation step and window must be at least 1, got k={k}, W={w}"
        )));
    }
    let t = series.data.shape()[2];
    let seg = k * w;
    if t < seg {
        return Err(PipelineError::Length {
            required: seg,
            available: t,
        });
    }
    let mut out = Vec::new();
    let mut start = 0;
    while start + seg <= t {
        out.extend(downsample_windows(series, k, w, start)?);
        start += seg;
    }
    Ok(out)
}

// ---- normalization -------------------------------------------------------------

/// Z-score each `(node, modality)` series of the window to mean 0 and
/// population standard deviation 1; constant series become all zeros through
/// the [`SIGMA_FLOOR`].
pub fn zscore_normalize(window: &SampleWindow) -> Result<SampleWindow, PipelineError> {
    let (n, m, w) = {
        let s = window.x.shape();
        (s[0], s[1], s[2])
    };
    if w < 2 {
        return Err(PipelineError::Config(format!(
            "z-scoring needs at least 2 steps per window, got {w}"
        )));
    }
    let mut x = window.x.clone();
    for ni in 0..n {
        for mi in 0..m {
            for t in 0..w {
                if !x[[ni, mi, t]].is_finite() {
                    return Err(PipelineError::Data {
                        node: ni,
                        modality: mi,
                        index: t,
                    });
                }
            }
            let mean: f64 = (0..w).map(|t| x[[ni, mi, t]]).sum::<f64>() / w as f64;
            let var: f64 = (0..w).map(|t| (x[[ni, mi, t]] - mean).powi(2)).sum::<f64>() / w as f64;
            let denom = var.sqrt().max(SIGMA_FLOOR);
            for t in 0..w {
                x[[ni, mi, t]] = (x[[ni, mi, t]] - mean) / denom;
            }
        }
    }
    Ok(SampleWindow {
        x,
        origin_time: window.origin_time,
        phase: window.phase,
    })
}

// ---- splitting -----------------------------------------------------------------

/// Chronological prefix/middle/suffix split with floor-then-distribute
/// rounding: each part gets `⌊ratio·n⌋`, leftovers go to the largest
/// fractional parts (ties to the earlier part).
pub fn split_dataset(
    samples: Vec<GraphSample>,
    ratios: (f64, f64, f64),
) -> Result<DatasetSplit, PipelineError> {
    let r = [ratios.0, ratios.1, ratios.2];
    if r.iter().any(|&x| !(x > 0.0)) {
        return Err(PipelineError::Config(format!(
            "split ratios must all be positive, got {ratios:?}"
        )));
    }
    let sum: f64 = r.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(PipelineError::Config(format!(
            "split ratios must sum to 1, got {ratios:?} (sum {sum})"
        )));
    }
    let n = samples.len();
    let mut counts = [0usize; 3];
    let mut frac: Vec<(f64, usize)> = Vec::new();
    for (i, &ri) in r.iter().enumerate() {
        let exact = ri * n as f64;
        counts[i] = exact.floor() as usize;
        frac.push((exact - exact.floor(), i));
    }
    let mut leftover = n - counts.iter().sum::<usize>();
    frac.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    for &(_, i) in frac.iter().cycle().take(3 * n.max(1)) {
        if leftover == 0 {
            break;
        }
        counts[i] += 1;
        leftover -= 1;
    }
    let mut it = samples.into_iter();
    let train: Vec<_> = it.by_ref().take(counts[0]).collect();
    let validation: Vec<_> = it.by_ref().take(counts[1]).collect();
    let test: Vec<_> = it.collect();
    Ok(DatasetSplit {
        train,
        validation,
        test,
    })
}

// ---- adjacency -----------------------------------------------------------------

/// How to turn sensor coordinates into graph edges.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum AdjacencyRule {
    /// Connect nodes within Euclidean distance `r`.
    Radius(f64),
    /// Connect each node to its `κ` nearest others, symmetrized.
    Knn(usize),
}

/// Build the binary adjacency (unit diagonal, symmetric) from `N×2`
/// coordinates. The second return lists nodes left without any neighbor
/// besides themselves under the radius rule — a warning, not an error.
pub fn build_adjacency(
    positions: &Array2<f64>,
    rule: AdjacencyRule,
) -> Result<(Array2<f64>, Vec<usize>), PipelineError> {
    let n = positions.nrows();
    if positions.ncols() != 2 {
        return Err(PipelineError::Config(format!(
            "positions must be N×2, got N×{}",
            positions.ncols()
        )));
    }
    if positions.iter().any(|v| !v.is_finite()) {
        return Err(PipelineError::Config("positions must be finite".into()));
    }
    let dist = |i: usize, j: usize| -> f64 {
        let dx = positions[[i, 0]] - positions[[j, 0]];
        let dy = positions[[i, 1]] - positions[[j, 1]];
        (dx * dx + dy * dy).sqrt()
    };
    let mut a = Array2::eye(n);
    let mut isolated = Vec::new();
    match rule {
        AdjacencyRule::Radius(r) => {
            if !(r > 0.0) {
                return Err(PipelineError::Config(format!("radius must be positive, got {r}")));
            }
            for i in 0..n {
                for j in i + 1..n {
                    if dist(i, j) <= r {
                        a[[i, j]] = 1.0;
                        a[[j, i]] = 1.0;
                    }
                }
            }
            for i in 0..n {
                if (0..n).all(|j| j == i || a[[i, j]] == 0.0) {
                    isolated.push(i);
                }
            }
        }
        AdjacencyRule::Knn(kappa) => {
            if kappa < 1 {
                return Err(PipelineError::Config("κ must be at least 1".into()));
            }
            for i in 0..n {
                let mut others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
                others.sort_by(|&x, &y| dist(i, x).total_cmp(&dist(i, y)).then(x.cmp(&y)));
                for &j in others.iter().take(kappa) {
                    a[[i, j]] = 1.0;
                    a[[j, i]] = 1.0;
                }
            }
        }
    }
    Ok((a, isolated))
}

// ---- CSV input -----------------------------------------------------------------

/// Parsed raw CSV: records plus the modality names from the header
/// (`timestamp,node_id,<modality_1>,…`).
#[derive(Debug, Clone)]
pub struct RawCsv {
    pub records: Vec<RawRecord>,
    pub modality_names: Vec<String>,
}

/// Read the raw-record CSV format. Missing cells stay empty; malformed rows
/// report their line number.
pub fn read_raw_csv(path: &std::path::Path) -> Result<RawCsv, PipelineError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| PipelineError::Csv {
            line: 0,
            message: e.to_string(),
        })?;
    let headers = reader
        .headers()
        .map_err(|e| PipelineError::Csv {
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    let cols: Vec<&str> = headers.iter().collect();
    if cols.len() < 3 || cols[0] != "timestamp" || cols[1] != "node_id" {
        return Err(PipelineError::Csv {
            line: 1,
            message: format!(
                "header must be timestamp,node_id,<modalities…>, got {:?}",
                cols.join(",")
            ),
        });
    }
    let modality_names: Vec<String> = cols[2..].iter().map(|s| s.to_string()).collect();
    let mut records = Vec::new();
    for result in reader.records() {
        let row = result.map_err(|e| PipelineError::Csv {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = row.position().map_or(0, |p| p.line());
        let fail = |message: String| PipelineError::Csv { line, message };
        if row.len() != cols.len() {
            return Err(fail(format!("expected {} fields, got {}", cols.len(), row.len())));
        }
        let timestamp: f64 = row[0]
            .parse()
            .map_err(|e| fail(format!("bad timestamp {:?}: {e}", &row[0])))?;
        let node_id: usize = row[1]
            .parse()
            .map_err(|e| fail(format!("bad node_id {:?}: {e}", &row[1])))?;
        let mut values = Vec::with_capacity(modality_names.len());
        for (ci, cell) in row.iter().skip(2).enumerate() {
            if cell.is_empty() {
                values.push(None);
            } else {
                let v: f64 = cell.parse().map_err(|e| {
                    fail(format!(
                        "bad value {:?} in column {}: {e}",
                        cell, modality_names[ci]
                    ))
                })?;
                values.push(Some(v));
            }
        }
        records.push(RawRecord {
            timestamp,
            node_id,
            values,
        });
    }
    Ok(RawCsv {
        records,
        modality_names,
    })
}

/// Write records in the same CSV shape [`read_raw_csv`] consumes.
pub fn write_raw_csv(
    path: &std::path::Path,
    records: &[RawRecord],
    modality_names: &[String],
) -> Result<(), PipelineError> {
    let mut wtr = csv::Writer::from_path(path).map_err(|e| PipelineError::Csv {
        line: 0,
        message: e.to_string(),
    })?;
    let mut header = vec!["timestamp".to_string(), "node_id".to_string()];
    header.extend(modality_names.iter().cloned());
    wtr.write_record(&header).map_err(|e| PipelineError::Csv {
        line: 0,
        message: e.to_string(),
    })?;
    for r in records {
        let mut row = vec![format!("{}", r.timestamp), format!("{}", r.node_id)];
        for v in &r.values {
            row.push(v.map_or(String::new(), |x| format!("{x}")));
        }
        wtr.write_record(&row).map_err(|e| PipelineError::Csv {
            line: 0,
            message: e.to_string(),
        })?;
    }
    wtr.flush()?;
    Ok(())
}

/// Write `node_id,x,y` sensor coordinates.
pub fn write_positions_csv(
    path: &std::path::Path,
    positions: &Array2<f64>,
) -> Result<(), PipelineError> {
    let mut wtr = csv::Writer::from_path(path).map_err(|e| PipelineError::Csv {
        line: 0,
        message: e.to_string(),
    })?;
    let fail = |e: csv::Error| PipelineError::Csv {
        line: 0,
        message: e.to_string(),
    };
    wtr.write_record(["node_id", "x", "y"]).map_err(fail)?;
    for (i, row) in positions.rows().into_iter().enumerate() {
        wtr.write_record([i.to_string(), row[0].to_string(), row[1].to_string()])
            .map_err(fail)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Read `node_id,x,y` coordinates back as `N×2`; node ids must cover
/// `0..N` exactly once in any order.
pub fn read_positions_csv(path: &std::path::Path) -> Result<Array2<f64>, PipelineError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| PipelineError::Csv {
            line: 0,
            message: e.to_string(),
        })?;
    let mut rows: Vec<(usize, f64, f64)> = Vec::new();
    for result in reader.records() {
        let row = result.map_err(|e| PipelineError::Csv {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = row.position().map_or(0, |p| p.line());
        let fail = |message: String| PipelineError::Csv { line, message };
        if row.len() != 3 {
            return Err(fail(format!("expected node_id,x,y, got {} fields", row.len())));
        }
        let id: usize = row[0].parse().map_err(|e| fail(format!("bad node_id: {e}")))?;
        let x: f64 = row[1].parse().map_err(|e| fail(format!("bad x: {e}")))?;
        let y: f64 = row[2].parse().map_err(|e| fail(format!("bad y: {e}")))?;
        rows.push((id, x, y));
    }
    rows.sort_by_key(|r| r.0);
    for (i, r) in rows.iter().enumerate() {
        if r.0 != i {
            return Err(PipelineError::Csv {
                line: 0,
                message: format!("node ids must cover 0..{} exactly, found {}", rows.len(), r.0),
            });
        }
    }
    let mut out = Array2::zeros((rows.len(), 2));
    for (i, (_, x, y)) in rows.into_iter().enumerate() {
        out[[i, 0]] = x;
        out[[i, 1]] = y;
    }
    Ok(out)
}
