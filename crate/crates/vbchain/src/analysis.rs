//! Dataset diagnostics: label correlation matrix, arousal-valence structure
//! per burst type, per-country counts and the chain-order report.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::dataio::manifest::{Manifest, Split};
use crate::error::{Error, Result};
use crate::heads::{derive_chain_order, ChainOrder};
use crate::matrix::Matrix;
use crate::schema::{LabelSchema, NUM_EMOTIONS};

/// Pearson correlation of two equal-length series. Errors on constant input.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "pearson needs two equal series of length >= 2, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for (&a, &b) in x.iter().zip(y) {
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
        sxy += (a - mx) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::ConstantColumn("pearson input".into()));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// Pearson correlation matrix of the columns of `data`; exactly symmetric
/// with an exact unit diagonal. Constant columns are reported by name.
pub fn correlation_matrix(data: &Matrix, names: &[String]) -> Result<Matrix> {
    let n = data.cols();
    if names.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "correlation_matrix: {} columns but {} names",
            n,
            names.len()
        )));
    }
    if data.rows() < 3 {
        return Err(Error::InvalidArgument(format!(
            "correlation_matrix needs at least 3 rows, got {}",
            data.rows()
        )));
    }
    let columns: Vec<Vec<f64>> = (0..n).map(|j| data.column(j)).collect();
    for (j, col) in columns.iter().enumerate() {
        let first = col[0];
        if col.iter().all(|&v| v == first) {
            return Err(Error::ConstantColumn(names[j].clone()));
        }
    }
    let mut out = Matrix::zeros(n, n);
    for i in 0..n {
        out.set(i, i, 1.0);
        for j in (i + 1)..n {
            let r = pearson(&columns[i], &columns[j])?;
            out.set(i, j, r);
            out.set(j, i, r);
        }
    }
    Ok(out)
}

pub fn write_correlation_csv(matrix: &Matrix, names: &[String], path: &Path) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    writeln!(file, "label,{}", names.join(","))?;
    for i in 0..matrix.rows() {
        let row: Vec<String> = matrix.row(i).iter().map(|v| v.to_string()).collect();
        writeln!(file, "{},{}", names[i], row.join(","))?;
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct TypeCentroid {
    pub vb_type: String,
    pub count: usize,
    pub mean_arousal: f64,
    pub mean_valence: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct DensityCell {
    pub vb_type: String,
    pub arousal_bin: usize,
    pub valence_bin: usize,
    pub count: usize,
}

/// Per-type centroids and a binned density grid over the raw
/// arousal-valence plane.
#[derive(Debug, Clone, Serialize)]
pub struct AvSummary {
    pub bins: usize,
    pub centroids: Vec<TypeCentroid>,
    pub density: Vec<DensityCell>,
    /// Types with no labeled samples, skipped with a note.
    pub skipped_types: Vec<String>,
}

pub fn av_scatter_summary(manifest: &Manifest, schema: &LabelSchema, bins: usize) -> Result<AvSummary> {
    if bins == 0 {
        return Err(Error::InvalidArgument("bins must be positive".into()));
    }
    let (lo, hi) = schema.two_range();
    let bin_of = |v: f64| -> usize {
        let t = ((v - lo) / (hi - lo)).clamp(0.0, 1.0);
        ((t * bins as f64) as usize).min(bins - 1)
    };

    let mut per_type: BTreeMap<usize, Vec<(f64, f64)>> = BTreeMap::new();
    for sample in manifest.samples() {
        let (Some(a), Some(v), Some(t)) = (sample.arousal, sample.valence, sample.vb_type.as_deref())
        else {
            continue;
        };
        let idx = schema.vb_type_index(t).expect("manifest validated against schema");
        per_type.entry(idx).or_default().push((a, v));
    }

    let mut centroids = Vec::new();
    let mut density = Vec::new();
    let mut skipped = Vec::new();
    for (idx, name) in schema.vb_types().iter().enumerate() {
        match per_type.get(&idx) {
            None => skipped.push(name.clone()),
            Some(points) => {
                let n = points.len() as f64;
                centroids.push(TypeCentroid {
                    vb_type: name.clone(),
                    count: points.len(),
                    mean_arousal: points.iter().map(|p| p.0).sum::<f64>() / n,
                    mean_valence: points.iter().map(|p| p.1).sum::<f64>() / n,
                });
                let mut grid = vec![0usize; bins * bins];
                for &(a, v) in points {
                    grid[bin_of(a) * bins + bin_of(v)] += 1;
                }
                for ab in 0..bins {
                    for vb in 0..bins {
                        let count = grid[ab * bins + vb];
                        if count > 0 {
                            density.push(DensityCell {
                                vb_type: name.clone(),
                                arousal_bin: ab,
                                valence_bin: vb,
                                count,
                            });
                        }
                    }
                }
            }
        }
    }
    Ok(AvSummary { bins, centroids, density, skipped_types: skipped })
}

impl AvSummary {
    pub fn write_csv(&self, dir: &Path) -> Result<()> {
        let mut file = std::fs::File::create(dir.join("av_centroids.csv"))?;
        writeln!(file, "vb_type,count,mean_arousal,mean_valence")?;
        for c in &self.centroids {
            writeln!(file, "{},{},{},{}", c.vb_type, c.count, c.mean_arousal, c.mean_valence)?;
        }
        for skipped in &self.skipped_types {
            writeln!(file, "{},0,,", skipped)?;
        }

        let mut file = std::fs::File::create(dir.join("av_density.csv"))?;
        writeln!(file, "vb_type,arousal_bin,valence_bin,count")?;
        for d in &self.density {
            writeln!(file, "{},{},{},{}", d.vb_type, d.arousal_bin, d.valence_bin, d.count)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CountRow {
    pub split: String,
    pub country: String,
    pub count: usize,
}

/// Exact per-split, per-country sample counts; unlabeled rows fall into the
/// `(none)` bucket so totals always match the manifest size.
pub fn country_distribution(manifest: &Manifest) -> Vec<CountRow> {
    let mut counts: BTreeMap<(String, String), usize> = BTreeMap::new();
    for sample in manifest.samples() {
        let split = sample.split.to_string();
        let country = sample.country.clone().unwrap_or_else(|| "(none)".to_string());
        *counts.entry((split, country)).or_default() += 1;
    }
    counts
        .into_iter()
        .map(|((split, country), count)| CountRow { split, country, count })
        .collect()
}

pub fn write_country_distribution_csv(rows: &[CountRow], path: &Path) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    writeln!(file, "split,country,count")?;
    for row in rows {
        writeln!(file, "{},{},{}", row.split, row.country, row.count)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct OrderRow {
    pub rank: usize,
    pub label: String,
    pub accumulated_abs_r: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ChainOrderReport {
    pub order: ChainOrder,
    pub rows: Vec<OrderRow>,
}

/// Chain order over the training-split HIGH labels, as a readable table.
pub fn chain_order_report(manifest: &Manifest, schema: &LabelSchema) -> Result<ChainOrderReport> {
    let rows: Vec<&Vec<f64>> = manifest
        .split(Split::Train)
        .into_iter()
        .filter_map(|s| s.high.as_ref())
        .collect();
    if rows.len() < 3 {
        return Err(Error::MissingLabels {
            task: "high".into(),
            message: format!(
                "chain order needs at least 3 training samples with high labels, got {}",
                rows.len()
            ),
        });
    }
    let data = Matrix::from_vec(
        rows.len(),
        NUM_EMOTIONS,
        rows.iter().flat_map(|r| r.iter().copied()).collect(),
    )?;
    // surface constant columns under their schema names before delegating
    correlation_matrix(&data, schema.emotions())?;
    let order = derive_chain_order(&data)?;
    let rows = order
        .order()
        .iter()
        .enumerate()
        .map(|(rank, &label_idx)| OrderRow {
            rank,
            label: schema.emotions()[label_idx].clone(),
            accumulated_abs_r: order.accumulated()[label_idx],
        })
        .collect();
    Ok(ChainOrderReport { order, rows })
}

impl ChainOrderReport {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut file = std::fs::File::create(path)?;
        writeln!(file, "rank,label,accumulated_abs_r")?;
        for row in &self.rows {
            writeln!(file, "{},{},{}", row.rank, row.label, row.accumulated_abs_r)?;
        }
        Ok(())
    }
}
