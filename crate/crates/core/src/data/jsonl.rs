//! JSON-lines files: one set, labeled set or temporal series per line.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::classifier::LabeledSetBatch;
use crate::equivariant::SetBatch;
use crate::error::{Error, Result};
use crate::tensor::DenseArray;
use crate::tvae::TemporalSetSeries;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SetLine {
    t: Option<f64>,
    points: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LabeledLine {
    label: usize,
    points: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SeriesLine {
    times: Vec<f64>,
    sets: Vec<Vec<Vec<f64>>>,
}

fn rows(a: &DenseArray) -> Vec<Vec<f64>> {
    let d = a.shape()[a.ndim() - 1];
    a.data().chunks(d).map(<[f64]>::to_vec).collect()
}

fn from_rows(rows: &[Vec<f64>], line: usize) -> Result<DenseArray> {
    let d = rows.first().map_or(0, Vec::len);
    if d == 0 || rows.iter().any(|r| r.len() != d) {
        return Err(Error::Shape(format!("line {line}: points must be non-empty rows of one length")));
    }
    DenseArray::new(vec![rows.len(), d], rows.concat())
}

fn lines<T: for<'de> Deserialize<'de>>(r: impl BufRead) -> Result<Vec<(usize, T)>> {
    let mut out = vec![];
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let v = serde_json::from_str(&line).map_err(|e| Error::InvalidArgument(format!("line {}: {e}", i + 1)))?;
        out.push((i + 1, v));
    }
    if out.is_empty() {
        return Err(Error::InvalidArgument("no records".into()));
    }
    Ok(out)
}

fn write_line(w: &mut impl Write, v: &impl Serialize) -> Result<()> {
    serde_json::to_writer(&mut *w, v)?;
    w.write_all(b"\n")?;
    Ok(())
}

/// One `{"t": .., "points": ..}` line per set.
pub fn write_sets(w: &mut impl Write, sets: &SetBatch, t: Option<f64>) -> Result<()> {
    for b in 0..sets.batch() {
        write_line(w, &SetLine { t, points: rows(&sets.set(b)) })?;
    }
    Ok(())
}

/// Sets of equal size; the `t` tags are returned alongside.
pub fn read_sets(r: impl BufRead) -> Result<(SetBatch, Vec<Option<f64>>)> {
    let recs: Vec<(usize, SetLine)> = lines(r)?;
    let sets = recs.iter().map(|(i, s)| from_rows(&s.points, *i)).collect::<Result<Vec<_>>>()?;
    Ok((SetBatch::from_sets(&sets)?, recs.iter().map(|(_, s)| s.t).collect()))
}

pub fn write_labeled(w: &mut impl Write, data: &LabeledSetBatch) -> Result<()> {
    for (b, &label) in data.labels.iter().enumerate() {
        write_line(w, &LabeledLine { label, points: rows(&data.sets.set(b)) })?;
    }
    Ok(())
}

/// Labeled sets; the class count is one more than the largest label
/// unless `classes` is given.
pub fn read_labeled(r: impl BufRead, classes: Option<usize>) -> Result<LabeledSetBatch> {
    let recs: Vec<(usize, LabeledLine)> = lines(r)?;
    let sets = recs.iter().map(|(i, s)| from_rows(&s.points, *i)).collect::<Result<Vec<_>>>()?;
    let labels: Vec<usize> = recs.iter().map(|(_, s)| s.label).collect();
    let classes = classes.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
    LabeledSetBatch::new(SetBatch::from_sets(&sets)?, labels, classes)
}

pub fn write_series(w: &mut impl Write, series: &[TemporalSetSeries]) -> Result<()> {
    for s in series {
        write_line(w, &SeriesLine { times: s.times.clone(), sets: s.sets.iter().map(rows).collect() })?;
    }
    Ok(())
}

pub fn read_series(r: impl BufRead) -> Result<Vec<TemporalSetSeries>> {
    lines::<SeriesLine>(r)?
        .into_iter()
        .map(|(i, s)| {
            let sets = s.sets.iter().map(|x| from_rows(x, i)).collect::<Result<Vec<_>>>()?;
            TemporalSetSeries::new(s.times, sets)
        })
        .collect()
}
