//! Panel ingestion and the heterotopic layout consumed by the GP engine.
//!
//! Each series keeps its own time grid, outcome vector and covariate matrix.
//! Exactly one series is treated; its `t0` counts the pre-intervention
//! observations, so indices `0..t0` are pre-period and `t0..T` post-period.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::path::Path;

use chrono::NaiveDate;
use log::warn;
use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SeriesRecord {
    pub id: String,
    pub times: Vec<f64>,
    pub y: Vec<f64>,
    /// `T x d`, one row per time point.
    pub covariates: DMatrix<f64>,
    pub is_treated: bool,
    /// Number of pre-intervention observations (treated series only).
    pub t0: Option<usize>,
}

impl SeriesRecord {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Input rows `[time, covariates...]` for the given row range.
    pub fn inputs(&self, rows: std::ops::Range<usize>) -> DMatrix<f64> {
        let d = self.covariates.ncols();
        DMatrix::from_fn(rows.len(), 1 + d, |i, j| {
            let r = rows.start + i;
            if j == 0 {
                self.times[r]
            } else {
                self.covariates[(r, j - 1)]
            }
        })
    }

    pub fn all_inputs(&self) -> DMatrix<f64> {
        self.inputs(0..self.len())
    }

    fn validate(&self) -> Result<()> {
        let n = self.times.len();
        if n == 0 {
            return Err(Error::EmptySeries(self.id.clone()));
        }
        if self.y.len() != n || self.covariates.nrows() != n {
            return Err(Error::Data(format!(
                "series `{}`: {} times, {} outcomes, {} covariate rows",
                self.id,
                n,
                self.y.len(),
                self.covariates.nrows()
            )));
        }
        if self.times.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Data(format!(
                "series `{}`: times are not strictly increasing",
                self.id
            )));
        }
        match (self.is_treated, self.t0) {
            (true, Some(t0)) if t0 >= 1 && t0 < n => Ok(()),
            (true, t0) => Err(Error::Data(format!(
                "treated series `{}` needs 1 <= t0 < {n}, got {t0:?}",
                self.id
            ))),
            (false, None) => Ok(()),
            (false, Some(_)) => Err(Error::Data(format!(
                "control series `{}` carries an intervention index",
                self.id
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeterotopicDataset {
    pub series: Vec<SeriesRecord>,
    pub covariate_names: Vec<String>,
    pub alignment_rule: String,
}

impl HeterotopicDataset {
    pub fn new(
        series: Vec<SeriesRecord>,
        covariate_names: Vec<String>,
        alignment_rule: impl Into<String>,
    ) -> Result<Self> {
        let ds = HeterotopicDataset {
            series,
            covariate_names,
            alignment_rule: alignment_rule.into(),
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.series.is_empty() {
            return Err(Error::Data("dataset has no series".into()));
        }
        let d = self.covariate_names.len();
        let mut ids = HashSet::new();
        for s in &self.series {
            s.validate()?;
            if s.covariates.ncols() != d {
                return Err(Error::Data(format!(
                    "series `{}` has {} covariates, dataset declares {d}",
                    s.id,
                    s.covariates.ncols()
                )));
            }
            if !ids.insert(s.id.as_str()) {
                return Err(Error::Data(format!("duplicate series id `{}`", s.id)));
            }
        }
        let treated = self.series.iter().filter(|s| s.is_treated).count();
        if treated != 1 {
            return Err(Error::Data(format!(
                "exactly one treated series required, found {treated}"
            )));
        }
        Ok(())
    }

    pub fn m(&self) -> usize {
        self.series.len()
    }

    pub fn n_covariates(&self) -> usize {
        self.covariate_names.len()
    }

    pub fn total_t(&self) -> usize {
        self.series.iter().map(SeriesRecord::len).sum()
    }

    pub fn treated_index(&self) -> usize {
        self.series
            .iter()
            .position(|s| s.is_treated)
            .expect("validated dataset has a treated series")
    }

    pub fn treated(&self) -> &SeriesRecord {
        &self.series[self.treated_index()]
    }

    /// Time value of the first post-intervention observation.
    pub fn intervention_time(&self) -> f64 {
        let t = self.treated();
        t.times[t.t0.expect("treated series has t0")]
    }

    pub fn controls(&self) -> impl Iterator<Item = &SeriesRecord> {
        self.series.iter().filter(|s| !s.is_treated)
    }

    pub fn series_by_id(&self, id: &str) -> Option<&SeriesRecord> {
        self.series.iter().find(|s| s.id == id)
    }

    /// The treated series plus the named controls, treated first.
    pub fn subset(&self, control_ids: &[String]) -> Result<Self> {
        let mut series = vec![self.treated().clone()];
        for id in control_ids {
            let s = self
                .series_by_id(id)
                .ok_or_else(|| Error::Data(format!("unknown series `{id}`")))?;
            if s.is_treated {
                return Err(Error::Data(format!("`{id}` is the treated series")));
            }
            series.push(s.clone());
        }
        HeterotopicDataset::new(
            series,
            self.covariate_names.clone(),
            self.alignment_rule.clone(),
        )
    }

    /// Z-scores every covariate column within each series. Constant columns
    /// are centred only.
    pub fn standardize_covariates(&mut self) {
        for s in &mut self.series {
            for mut col in s.covariates.column_iter_mut() {
                let v: Vec<f64> = col.iter().copied().collect();
                let m = crate::stats::mean(&v);
                let sd = crate::stats::std_dev(&v);
                let scale = if sd > 0.0 { sd } else { 1.0 };
                col.iter_mut().for_each(|x| *x = (*x - m) / scale);
            }
        }
    }

    /// Applies [`transform_log_per_capita`] to every series outcome.
    pub fn apply_log_per_capita(
        &mut self,
        populations: &BTreeMap<String, f64>,
        per: f64,
        floor: f64,
    ) -> Result<()> {
        for s in &mut self.series {
            let pop = *populations
                .get(&s.id)
                .ok_or_else(|| Error::Data(format!("no population for series `{}`", s.id)))?;
            s.y = transform_log_per_capita(&s.y, pop, per, floor)?;
        }
        Ok(())
    }

    /// Replaces the named covariate columns by the first principal component
    /// computed within each series.
    pub fn apply_pca(&mut self, columns: &[String], name: &str) -> Result<Vec<String>> {
        let idx: Vec<usize> = columns
            .iter()
            .map(|c| {
                self.covariate_names
                    .iter()
                    .position(|n| n == c)
                    .ok_or_else(|| Error::MissingColumn(c.clone()))
            })
            .collect::<Result<_>>()?;
        let keep: Vec<usize> = (0..self.covariate_names.len())
            .filter(|i| !idx.contains(i))
            .collect();
        let mut warnings = Vec::new();
        for s in &mut self.series {
            let sub = DMatrix::from_fn(s.len(), idx.len(), |r, c| s.covariates[(r, idx[c])]);
            let pca = pca_first_component(&sub)?;
            for &c in &pca.dropped_columns {
                warnings.push(format!(
                    "series `{}`: constant column `{}` dropped from PCA",
                    s.id, columns[c]
                ));
            }
            let n = s.len();
            let mut cov = DMatrix::zeros(n, keep.len() + 1);
            for r in 0..n {
                for (j, &k) in keep.iter().enumerate() {
                    cov[(r, j)] = s.covariates[(r, k)];
                }
                cov[(r, keep.len())] = pca.scores[r];
            }
            s.covariates = cov;
        }
        let mut names: Vec<String> = keep
            .iter()
            .map(|&k| self.covariate_names[k].clone())
            .collect();
        names.push(name.to_string());
        self.covariate_names = names;
        Ok(warnings)
    }
}

/// How the time column of a CSV is interpreted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeFormat {
    #[default]
    Numeric,
    /// ISO-8601 dates, aligned to a weekly relative index.
    Date,
}

/// Predicate on the outcome that marks the first usable observation when
/// aligning calendar dates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum ThresholdRule {
    /// The first reported row.
    FirstRow,
    #[default]
    FirstNonzero,
    FirstAtLeast { level: f64 },
}

impl ThresholdRule {
    pub fn accepts(&self, y: f64) -> bool {
        match self {
            ThresholdRule::FirstRow => true,
            ThresholdRule::FirstNonzero => y != 0.0,
            ThresholdRule::FirstAtLeast { level } => y >= *level,
        }
    }

    pub fn describe(&self) -> String {
        match self {
            ThresholdRule::FirstRow => "first reported row".into(),
            ThresholdRule::FirstNonzero => "first nonzero outcome".into(),
            ThresholdRule::FirstAtLeast { level } => format!("first outcome >= {level}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub series_column: String,
    pub time_column: String,
    pub outcome_column: String,
    #[serde(default)]
    pub covariate_columns: Vec<String>,
    pub treated: String,
    /// Time of the first post-intervention observation, in the format of
    /// the time column.
    pub intervention: String,
    #[serde(default)]
    pub time_format: TimeFormat,
    #[serde(default)]
    pub threshold: ThresholdRule,
    #[serde(default)]
    pub population_column: Option<String>,
}

impl CsvSchema {
    pub fn numeric(treated: &str, intervention: f64, covariates: &[&str]) -> Self {
        CsvSchema {
            series_column: "series_id".into(),
            time_column: "time".into(),
            outcome_column: "y".into(),
            covariate_columns: covariates.iter().map(|s| s.to_string()).collect(),
            treated: treated.into(),
            intervention: intervention.to_string(),
            time_format: TimeFormat::Numeric,
            threshold: ThresholdRule::default(),
            population_column: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IngestReport {
    /// Rows dropped for a missing outcome or covariate, per series.
    pub dropped_rows: BTreeMap<String, usize>,
    /// Rows before a series' first qualifying date (date alignment only).
    pub pre_threshold_rows: BTreeMap<String, usize>,
    pub excluded_series: Vec<String>,
    pub populations: BTreeMap<String, f64>,
    pub warnings: Vec<String>,
}

impl IngestReport {
    pub fn total_dropped(&self) -> usize {
        self.dropped_rows.values().sum()
    }
}

fn is_missing(s: &str) -> bool {
    matches!(
        s.trim().to_ascii_lowercase().as_str(),
        "" | "na" | "nan" | "null" | "none"
    )
}

fn parse_number(column: &str, value: &str, line: u64) -> Result<Option<f64>> {
    if is_missing(value) {
        return Ok(None);
    }
    value
        .trim()
        .parse::<f64>()
        .map(Some)
        .map_err(|_| Error::NonNumeric {
            column: column.into(),
            value: value.into(),
            line,
        })
}

struct RawRow {
    time: String,
    y: Option<f64>,
    covariates: Vec<Option<f64>>,
}

/// Reads a long-format CSV into a dataset.
pub fn ingest_csv(path: &Path, schema: &CsvSchema) -> Result<(HeterotopicDataset, IngestReport)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let headers = reader.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let series_col = col(&schema.series_column)?;
    let time_col = col(&schema.time_column)?;
    let y_col = col(&schema.outcome_column)?;
    let cov_cols: Vec<usize> = schema
        .covariate_columns
        .iter()
        .map(|c| col(c))
        .collect::<Result<_>>()?;
    let pop_col = schema.population_column.as_deref().map(col).transpose()?;

    let mut report = IngestReport::default();
    let mut order: Vec<String> = Vec::new();
    let mut rows: BTreeMap<String, Vec<RawRow>> = BTreeMap::new();
    let mut seen = HashSet::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        let id = record.get(series_col).unwrap_or("").to_string();
        let time = record.get(time_col).unwrap_or("").trim().to_string();
        if id.is_empty() || is_missing(&time) {
            *report.dropped_rows.entry(id.clone()).or_default() += 1;
            continue;
        }
        if !seen.insert((id.clone(), time.clone())) {
            return Err(Error::DuplicateObservation { series: id, time });
        }
        let y = parse_number(&schema.outcome_column, record.get(y_col).unwrap_or(""), line)?;
        let covariates = cov_cols
            .iter()
            .zip(&schema.covariate_columns)
            .map(|(&c, name)| parse_number(name, record.get(c).unwrap_or(""), line))
            .collect::<Result<Vec<_>>>()?;
        if let Some(pc) = pop_col {
            if let Some(p) = parse_number("population", record.get(pc).unwrap_or(""), line)? {
                report.populations.entry(id.clone()).or_insert(p);
            }
        }
        if !rows.contains_key(&id) {
            order.push(id.clone());
        }
        rows.entry(id).or_default().push(RawRow { time, y, covariates });
    }

    // Complete rows only, in numeric or date time.
    let mut complete: Vec<(String, Vec<(String, f64, Vec<f64>)>)> = Vec::new();
    for id in &order {
        let mut kept = Vec::new();
        let mut dropped = 0;
        for r in rows.remove(id).unwrap_or_default() {
            match (r.y, r.covariates.iter().copied().collect::<Option<Vec<f64>>>()) {
                (Some(y), Some(c)) => kept.push((r.time, y, c)),
                _ => dropped += 1,
            }
        }
        if dropped > 0 {
            *report.dropped_rows.entry(id.clone()).or_default() += dropped;
        }
        if kept.is_empty() {
            return Err(Error::EmptySeries(id.clone()));
        }
        complete.push((id.clone(), kept));
    }

    let (times, intervention, rule): (Vec<Option<(usize, Vec<f64>)>>, f64, String) =
        match schema.time_format {
            TimeFormat::Numeric => {
                let mut out = Vec::new();
                for (_, kept) in &complete {
                    let t = kept
                        .iter()
                        .map(|(s, _, _)| {
                            s.parse::<f64>().map_err(|_| Error::NonNumeric {
                                column: schema.time_column.clone(),
                                value: s.clone(),
                                line: 0,
                            })
                        })
                        .collect::<Result<Vec<f64>>>()?;
                    out.push(Some((0, t)));
                }
                let iv = schema.intervention.trim().parse::<f64>().map_err(|_| {
                    Error::NonNumeric {
                        column: "intervention".into(),
                        value: schema.intervention.clone(),
                        line: 0,
                    }
                })?;
                (out, iv, "numeric time as given".to_string())
            }
            TimeFormat::Date => {
                let mut dated = Vec::new();
                for (id, kept) in &complete {
                    let mut pts = kept
                        .iter()
                        .map(|(s, y, _)| parse_date(&schema.time_column, s).map(|d| (d, *y)))
                        .collect::<Result<Vec<_>>>()?;
                    pts.sort_by_key(|p| p.0);
                    dated.push((id.clone(), pts));
                }
                let alignment = align_times(&dated, &schema.threshold)?;
                let iv_date = parse_date("intervention", &schema.intervention)?;
                let iv = alignment.index_of(iv_date);
                report.warnings.extend(alignment.warnings.iter().cloned());
                let out = alignment
                    .series
                    .into_iter()
                    .map(|a| a.map(|a| (a.first_row, a.times)))
                    .collect();
                (
                    out,
                    iv,
                    format!(
                        "weekly index from {} ({})",
                        alignment.origin,
                        schema.threshold.describe()
                    ),
                )
            }
        };

    let mut series = Vec::new();
    for ((id, mut kept), aligned) in complete.into_iter().zip(times) {
        let Some((first_row, t)) = aligned else {
            report.excluded_series.push(id.clone());
            continue;
        };
        if schema.time_format == TimeFormat::Date {
            kept.sort_by_key(|(s, _, _)| parse_date("", s).ok());
            if first_row > 0 {
                report.pre_threshold_rows.insert(id.clone(), first_row);
            }
            kept.drain(..first_row);
        }
        let mut idx: Vec<usize> = (0..t.len()).collect();
        idx.sort_by(|&a, &b| t[a].total_cmp(&t[b]));
        let d = schema.covariate_columns.len();
        let times: Vec<f64> = idx.iter().map(|&i| t[i]).collect();
        let y: Vec<f64> = idx.iter().map(|&i| kept[i].1).collect();
        let covariates = DMatrix::from_fn(idx.len(), d, |r, c| kept[idx[r]].2[c]);
        let is_treated = id == schema.treated;
        let t0 = is_treated.then(|| times.iter().filter(|&&x| x < intervention).count());
        series.push(SeriesRecord {
            id,
            times,
            y,
            covariates,
            is_treated,
            t0,
        });
    }
    if !series.iter().any(|s| s.is_treated) {
        return Err(Error::Data(format!(
            "treated series `{}` not found",
            schema.treated
        )));
    }
    for w in &report.warnings {
        warn!("{w}");
    }
    let ds = HeterotopicDataset::new(series, schema.covariate_columns.clone(), rule)?;
    Ok((ds, report))
}

fn parse_date(column: &str, s: &str) -> Result<NaiveDate> {
    NaiveDate::parse_from_str(s.trim(), "%Y-%m-%d").map_err(|_| Error::NonNumeric {
        column: column.into(),
        value: s.into(),
        line: 0,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignedSeries {
    /// Index of the first qualifying row in the (date-sorted) input.
    pub first_row: usize,
    /// Relative week index of every row from `first_row` on.
    pub times: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Alignment {
    pub origin: NaiveDate,
    /// `None` for series that never satisfy the threshold rule.
    pub series: Vec<Option<AlignedSeries>>,
    pub warnings: Vec<String>,
}

impl Alignment {
    /// Relative index of an arbitrary date under this alignment.
    pub fn index_of(&self, date: NaiveDate) -> f64 {
        1.0 + (date - self.origin).num_days() as f64 / 7.0
    }
}

/// Maps calendar dates to a relative weekly index. The earliest qualifying
/// date across the panel becomes `t = 1`; every other date maps to
/// `1 + weeks elapsed since that origin`.
pub fn align_times(
    series: &[(String, Vec<(NaiveDate, f64)>)],
    rule: &ThresholdRule,
) -> Result<Alignment> {
    let firsts: Vec<Option<usize>> = series
        .iter()
        .map(|(_, pts)| pts.iter().position(|(_, y)| rule.accepts(*y)))
        .collect();
    let origin = series
        .iter()
        .zip(&firsts)
        .filter_map(|((_, pts), f)| f.map(|i| pts[i].0))
        .min()
        .ok_or_else(|| Error::Data("no series satisfies the threshold rule".into()))?;
    let mut warnings = Vec::new();
    let aligned = series
        .iter()
        .zip(&firsts)
        .map(|((id, pts), f)| match f {
            None => {
                warnings.push(format!(
                    "series `{id}` never satisfies the threshold rule ({}); excluded",
                    rule.describe()
                ));
                None
            }
            Some(i) => Some(AlignedSeries {
                first_row: *i,
                times: pts[*i..]
                    .iter()
                    .map(|(d, _)| 1.0 + (*d - origin).num_days() as f64 / 7.0)
                    .collect(),
            }),
        })
        .collect();
    Ok(Alignment {
        origin,
        series: aligned,
        warnings,
    })
}

/// `log((y / population) * per + floor)`, elementwise.
pub fn transform_log_per_capita(y: &[f64], population: f64, per: f64, floor: f64) -> Result<Vec<f64>> {
    if !(population > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "population must be positive, got {population}"
        )));
    }
    y.iter()
        .map(|&v| {
            if v < 0.0 {
                Err(Error::InvalidArgument(format!("negative count {v}")))
            } else {
                Ok((v / population * per + floor).ln())
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PcaResult {
    pub scores: Vec<f64>,
    pub explained_variance_ratio: f64,
    /// Loadings over the retained (non-constant) columns.
    pub loadings: Vec<f64>,
    pub dropped_columns: Vec<usize>,
}

/// First principal component of the column-standardized matrix `x`
/// (i.e. the top eigenvector of the sample correlation matrix). The sign
/// is fixed so that the first nonzero loading is positive.
pub fn pca_first_component(x: &DMatrix<f64>) -> Result<PcaResult> {
    let n = x.nrows();
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "PCA needs at least two rows, got {n}"
        )));
    }
    let mut dropped = Vec::new();
    let mut cols = Vec::new();
    for j in 0..x.ncols() {
        let v: Vec<f64> = x.column(j).iter().copied().collect();
        let sd = crate::stats::std_dev(&v);
        if sd > 0.0 {
            let m = crate::stats::mean(&v);
            cols.push(v.iter().map(|a| (a - m) / sd).collect::<Vec<f64>>());
        } else {
            warn!("PCA: constant column {j} dropped");
            dropped.push(j);
        }
    }
    if cols.is_empty() {
        return Err(Error::Data("PCA: every column is constant".into()));
    }
    let p = cols.len();
    let z = DMatrix::from_fn(n, p, |i, j| cols[j][i]);
    let corr = (z.transpose() * &z) / (n - 1) as f64;
    let eig = SymmetricEigen::new(corr.clone());
    let top = eig
        .eigenvalues
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .expect("non-empty spectrum");
    let mut loadings: Vec<f64> = eig.eigenvectors.column(top).iter().copied().collect();
    if let Some(first) = loadings.iter().find(|v| v.abs() > 1e-12) {
        if *first < 0.0 {
            loadings.iter_mut().for_each(|v| *v = -*v);
        }
    }
    let scores = (0..n)
        .map(|i| (0..p).map(|j| z[(i, j)] * loadings[j]).sum())
        .collect();
    Ok(PcaResult {
        scores,
        explained_variance_ratio: eig.eigenvalues[top] / corr.trace(),
        loadings,
        dropped_columns: dropped,
    })
}

/// Sidecar metadata written next to an exported dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMetadata {
    pub alignment_rule: String,
    pub transforms: Vec<String>,
    pub dropped_rows: BTreeMap<String, usize>,
    pub treated: String,
    pub intervention_time: f64,
    pub covariate_names: Vec<String>,
}

impl DatasetMetadata {
    pub fn new(ds: &HeterotopicDataset, report: &IngestReport, transforms: Vec<String>) -> Self {
        DatasetMetadata {
            alignment_rule: ds.alignment_rule.clone(),
            transforms,
            dropped_rows: report.dropped_rows.clone(),
            treated: ds.treated().id.clone(),
            intervention_time: ds.intervention_time(),
            covariate_names: ds.covariate_names.clone(),
        }
    }

    /// Schema that re-ingests the exported CSV.
    pub fn schema(&self) -> CsvSchema {
        let covs: Vec<&str> = self.covariate_names.iter().map(String::as_str).collect();
        CsvSchema::numeric(&self.treated, self.intervention_time, &covs)
    }
}

/// Writes the dataset in long format (`series_id,time,y,<covariates>`).
/// Floats use the shortest representation that parses back exactly.
pub fn write_csv(ds: &HeterotopicDataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["series_id".to_string(), "time".into(), "y".into()];
    header.extend(ds.covariate_names.iter().cloned());
    w.write_record(&header)?;
    for s in &ds.series {
        for i in 0..s.len() {
            let mut rec = vec![s.id.clone(), s.times[i].to_string(), s.y[i].to_string()];
            rec.extend(s.covariates.row(i).iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn write_metadata(meta: &DatasetMetadata, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(meta)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_metadata(path: &Path) -> Result<DatasetMetadata> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}
