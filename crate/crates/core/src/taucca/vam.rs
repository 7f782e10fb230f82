use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::kendall::weighted_kendall_tau;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VamRecord {
    pub teacher: String,
    pub year: i32,
    pub measures: Vec<f64>,
    pub weight: f64,
}

/// Reads `teacher_id, year, vam_1..vam_k`.
pub fn read_vam(path: impl AsRef<Path>) -> Result<Vec<VamRecord>> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    let source_name = path.display().to_string();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let (Some(t), Some(y)) = (col("teacher_id"), col("year")) else {
        return Err(Error::Parse {
            source_name,
            line: 1,
            message: "header must contain teacher_id and year".into(),
        });
    };
    let vam_cols: Vec<usize> = (1..)
        .map_while(|k| col(&format!("vam_{k}")))
        .collect();
    if vam_cols.is_empty() {
        return Err(Error::Parse {
            source_name,
            line: 1,
            message: "no vam_1 column".into(),
        });
    }
    let mut out: Vec<VamRecord> = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        let err = |message: String| Error::Parse {
            source_name: source_name.clone(),
            line,
            message,
        };
        let year = rec[y].trim().parse().map_err(|_| err(format!("bad year {:?}", &rec[y])))?;
        let measures = vam_cols
            .iter()
            .map(|&c| {
                rec[c]
                    .trim()
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| err(format!("bad value {:?}", &rec[c])))
            })
            .collect::<Result<Vec<_>>>()?;
        let teacher = rec[t].trim().to_string();
        if out.iter().any(|r| r.teacher == teacher && r.year == year) {
            return Err(err(format!("duplicate teacher-year {teacher}/{year}")));
        }
        out.push(VamRecord {
            teacher,
            year,
            measures,
            weight: 1.0,
        });
    }
    Ok(out)
}

pub fn write_vam(path: impl AsRef<Path>, records: &[VamRecord]) -> Result<()> {
    let k = records.first().map_or(0, |r| r.measures.len());
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["teacher_id".to_string(), "year".to_string()];
    header.extend((1..=k).map(|i| format!("vam_{i}")));
    w.write_record(&header)?;
    for r in records {
        if r.measures.len() != k {
            return Err(Error::Dimension {
                expected: k,
                got: r.measures.len(),
            });
        }
        let mut row = vec![r.teacher.clone(), r.year.to_string()];
        row.extend(r.measures.iter().map(|v| format!("{v:.17e}")));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// A scored unit (lesson or chapter) tagged with its teacher-year.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScoredUnit {
    pub unit: String,
    pub teacher: String,
    pub year: i32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StackedVam {
    /// VAM vector per kept unit, in input order.
    pub unit_vam: Vec<Vec<f64>>,
    /// Input indices of the kept units.
    pub kept: Vec<usize>,
    /// One row per teacher-year with at least one unit; `weight` counts units.
    pub teacher_years: Vec<VamRecord>,
    /// Teacher-year of each kept unit, as an index into `teacher_years`.
    pub unit_row: Vec<usize>,
    /// Units with no VAM row.
    pub dropped: Vec<String>,
}

/// Joins units to their teacher-year VAM vectors.
pub fn stack_vam(vams: &[VamRecord], units: &[ScoredUnit]) -> Result<StackedVam> {
    let k = vams.first().map_or(0, |r| r.measures.len());
    if k == 0 || vams.iter().any(|r| r.measures.len() != k) {
        return Err(Error::invalid("VAM records need one or more measures of equal count"));
    }
    let table: BTreeMap<(&str, i32), &VamRecord> = vams.iter().map(|r| ((r.teacher.as_str(), r.year), r)).collect();
    let mut rows: BTreeMap<(&str, i32), usize> = BTreeMap::new();
    let mut teacher_years: Vec<VamRecord> = Vec::new();
    let mut out = StackedVam {
        unit_vam: Vec::new(),
        kept: Vec::new(),
        teacher_years: Vec::new(),
        unit_row: Vec::new(),
        dropped: Vec::new(),
    };
    for (i, u) in units.iter().enumerate() {
        let key = (u.teacher.as_str(), u.year);
        let Some(rec) = table.get(&key) else {
            out.dropped.push(u.unit.clone());
            continue;
        };
        let row = *rows.entry(key).or_insert_with(|| {
            teacher_years.push(VamRecord {
                weight: 0.0,
                ..(*rec).clone()
            });
            teacher_years.len() - 1
        });
        teacher_years[row].weight += 1.0;
        out.unit_vam.push(rec.measures.clone());
        out.kept.push(i);
        out.unit_row.push(row);
    }
    if !out.dropped.is_empty() {
        log::warn!("stack_vam: {} units without a VAM row", out.dropped.len());
    }
    out.teacher_years = teacher_years;
    Ok(out)
}

/// Per-item weighted τ between teacher-year mean scores and each VAM
/// measure, averaged over measures. `unit_scores` is indexed like `units`
/// passed to [`stack_vam`].
pub fn item_weighted_tau(stacked: &StackedVam, unit_scores: &[Vec<f64>]) -> Result<Vec<Option<f64>>> {
    let n_rows = stacked.teacher_years.len();
    if n_rows < 2 {
        return Err(Error::invalid("need at least two teacher-years"));
    }
    let n_items = unit_scores.first().map_or(0, |s| s.len());
    let mut sums = vec![vec![0.0; n_items]; n_rows];
    for (&i, &row) in stacked.kept.iter().zip(&stacked.unit_row) {
        let s = unit_scores.get(i).ok_or(Error::Dimension {
            expected: i + 1,
            got: unit_scores.len(),
        })?;
        for (acc, v) in sums[row].iter_mut().zip(s) {
            *acc += v;
        }
    }
    let w: Vec<f64> = stacked.teacher_years.iter().map(|r| r.weight).collect();
    let k = stacked.teacher_years[0].measures.len();
    Ok((0..n_items)
        .map(|j| {
            let x: Vec<f64> = (0..n_rows).map(|r| sums[r][j] / w[r]).collect();
            let taus: Vec<f64> = (0..k)
                .filter_map(|m| {
                    let y: Vec<f64> = stacked.teacher_years.iter().map(|r| r.measures[m]).collect();
                    weighted_kendall_tau(&x, &y, &w).ok()
                })
                .collect();
            (!taus.is_empty()).then(|| taus.iter().sum::<f64>() / taus.len() as f64)
        })
        .collect())
}
