//! Characterised object sets: the N×D feature table every later stage
//! consumes, plus ingestion, z-score normalization and a redundancy filter
//! over the measure columns.

use std::collections::HashSet;
use std::fmt;
use std::io::Read;

use crate::numfmt::format_real;

/// Errors raised while building or transforming a feature table.
#[derive(Debug)]
pub enum TableError {
    /// The input contained no data rows.
    EmptyInput,
    /// The header declared no measure columns.
    NoMeasures,
    /// The same object id appeared twice.
    DuplicateId(String),
    /// The same measure name appeared twice in the header.
    DuplicateMeasureName(String),
    /// A measure name was empty.
    EmptyMeasureName,
    /// A cell could not be parsed as a real number (1-based data row).
    NonNumericCell { row: usize, column: String },
    /// A cell parsed as NaN or an infinity (1-based data row).
    NonFiniteCell { row: usize, column: String },
    /// A row supplied the wrong number of values.
    RowLength {
        row: usize,
        expected: usize,
        found: usize,
    },
    /// The underlying CSV stream was malformed.
    Csv(String),
    /// The correlation threshold was outside (0, 1].
    InvalidThreshold(f64),
}

impl fmt::Display for TableError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TableError::EmptyInput => write!(f, "input contains no data rows"),
            TableError::NoMeasures => write!(f, "input declares no measure columns"),
            TableError::DuplicateId(id) => write!(f, "duplicate object id {id:?}"),
            TableError::DuplicateMeasureName(name) => {
                write!(f, "duplicate measure name {name:?}")
            }
            TableError::EmptyMeasureName => write!(f, "measure names must be non-empty"),
            TableError::NonNumericCell { row, column } => {
                write!(f, "row {row}, measure {column:?}: cell is not a number")
            }
            TableError::NonFiniteCell { row, column } => {
                write!(f, "row {row}, measure {column:?}: cell is not finite")
            }
            TableError::RowLength {
                row,
                expected,
                found,
            } => write!(f, "row {row}: expected {expected} values, found {found}"),
            TableError::Csv(msg) => write!(f, "malformed CSV: {msg}"),
            TableError::InvalidThreshold(t) => {
                write!(f, "correlation threshold {t} is outside (0, 1]")
            }
        }
    }
}

impl std::error::Error for TableError {}

/// An immutable N×D table pairing each object id with its measure values.
///
/// Invariants enforced on construction: at least one object and one measure,
/// pairwise-distinct ids and measure names, and every cell finite.
#[derive(Debug, Clone, PartialEq)]
pub struct CharacterisedObjectSet {
    object_ids: Vec<String>,
    measure_names: Vec<String>,
    /// Row-major, `object_ids.len() * measure_names.len()` cells.
    values: Vec<f64>,
}

impl CharacterisedObjectSet {
    /// Builds a set from per-object rows, validating every invariant.
    pub fn new(
        object_ids: Vec<String>,
        measure_names: Vec<String>,
        rows: Vec<Vec<f64>>,
    ) -> Result<Self, TableError> {
        if object_ids.is_empty() || rows.is_empty() {
            return Err(TableError::EmptyInput);
        }
        if measure_names.is_empty() {
            return Err(TableError::NoMeasures);
        }
        if object_ids.len() != rows.len() {
            return Err(TableError::RowLength {
                row: object_ids.len().min(rows.len()) + 1,
                expected: object_ids.len(),
                found: rows.len(),
            });
        }
        let mut seen_names = HashSet::new();
        for name in &measure_names {
            if name.is_empty() {
                return Err(TableError::EmptyMeasureName);
            }
            if !seen_names.insert(name.as_str()) {
                return Err(TableError::DuplicateMeasureName(name.clone()));
            }
        }
        let mut seen_ids = HashSet::new();
        for id in &object_ids {
            if !seen_ids.insert(id.as_str()) {
                return Err(TableError::DuplicateId(id.clone()));
            }
        }
        let d = measure_names.len();
        let mut values = Vec::with_capacity(object_ids.len() * d);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != d {
                return Err(TableError::RowLength {
                    row: i + 1,
                    expected: d,
                    found: row.len(),
                });
            }
            for (j, &cell) in row.iter().enumerate() {
                if !cell.is_finite() {
                    return Err(TableError::NonFiniteCell {
                        row: i + 1,
                        column: measure_names[j].clone(),
                    });
                }
                values.push(cell);
            }
        }
        Ok(Self {
            object_ids,
            measure_names,
            values,
        })
    }

    pub fn n_objects(&self) -> usize {
        self.object_ids.len()
    }

    pub fn n_measures(&self) -> usize {
        self.measure_names.len()
    }

    pub fn object_ids(&self) -> &[String] {
        &self.object_ids
    }

    pub fn measure_names(&self) -> &[String] {
        &self.measure_names
    }

    /// The values of object `i` in measure order.
    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.n_measures();
        &self.values[i * d..(i + 1) * d]
    }

    pub fn value(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n_measures() + j]
    }

    /// Copies measure column `j` out in object order.
    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.n_objects()).map(|i| self.value(i, j)).collect()
    }

    /// Serializes the set to CSV: header `id,<measures...>`, one object per
    /// row, reals with 17 significant digits so [`load_table`] reads back an
    /// identical set.
    pub fn to_csv(&self) -> String {
        let mut writer = csv::Writer::from_writer(Vec::new());
        let mut header = Vec::with_capacity(self.n_measures() + 1);
        header.push("id".to_string());
        header.extend(self.measure_names.iter().cloned());
        writer.write_record(&header).expect("in-memory write");
        for i in 0..self.n_objects() {
            let mut record = Vec::with_capacity(self.n_measures() + 1);
            record.push(self.object_ids[i].clone());
            record.extend(self.row(i).iter().map(|&v| format_real(v)));
            writer.write_record(&record).expect("in-memory write");
        }
        String::from_utf8(writer.into_inner().expect("in-memory flush")).expect("UTF-8")
    }
}

/// Per-measure statistics recorded by [`normalize`].
///
/// Entries are parallel to the input set's measure order. A measure lands in
/// `constant_measures` exactly when its population standard deviation is zero.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizationReport {
    pub means: Vec<f64>,
    pub stddevs: Vec<f64>,
    pub constant_measures: Vec<String>,
}

/// Outcome of [`filter_measures`]: the measures kept, and for each dropped
/// measure the earlier kept measure it duplicates plus their absolute Pearson
/// correlation.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterReport {
    pub kept: Vec<String>,
    pub dropped: Vec<DroppedMeasure>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DroppedMeasure {
    pub name: String,
    pub duplicate_of: String,
    pub absolute_correlation: f64,
}

/// Parses a characterised object set from CSV.
///
/// The first header cell names the id column (the name itself is ignored);
/// the remaining header cells are measure names. One object per data row,
/// order preserved. Cells accept decimal and scientific notation.
pub fn load_table<R: Read>(source: R) -> Result<CharacterisedObjectSet, TableError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(source);

    let headers = reader
        .headers()
        .map_err(|e| TableError::Csv(e.to_string()))?
        .clone();
    if headers.is_empty() {
        return Err(TableError::EmptyInput);
    }
    if headers.len() < 2 {
        return Err(TableError::NoMeasures);
    }
    let measure_names: Vec<String> = headers.iter().skip(1).map(str::to_string).collect();

    let mut object_ids = Vec::new();
    let mut rows = Vec::new();
    for (index, record) in reader.records().enumerate() {
        let row_no = index + 1;
        let record = match record {
            Ok(r) => r,
            Err(e) => {
                return Err(match e.kind() {
                    csv::ErrorKind::UnequalLengths { len, .. } => TableError::RowLength {
                        row: row_no,
                        expected: headers.len(),
                        found: *len as usize,
                    },
                    _ => TableError::Csv(e.to_string()),
                })
            }
        };
        object_ids.push(record.get(0).unwrap_or("").to_string());
        let mut row = Vec::with_capacity(measure_names.len());
        for (j, cell) in record.iter().skip(1).enumerate() {
            let value: f64 = cell.parse().map_err(|_| TableError::NonNumericCell {
                row: row_no,
                column: measure_names[j].clone(),
            })?;
            if !value.is_finite() {
                return Err(TableError::NonFiniteCell {
                    row: row_no,
                    column: measure_names[j].clone(),
                });
            }
            row.push(value);
        }
        rows.push(row);
    }
    CharacterisedObjectSet::new(object_ids, measure_names, rows)
}

fn column_mean_and_pop_std(column: &[f64]) -> (f64, f64) {
    let n = column.len() as f64;
    let mean = column.iter().sum::<f64>() / n;
    let var = column.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Z-scores every measure column: mean 0, population standard deviation 1.
///
/// Constant columns (standard deviation exactly zero) map to all zeros and
/// are listed in the report instead of erroring. Object ids and measure
/// names are unchanged.
pub fn normalize(set: &CharacterisedObjectSet) -> (CharacterisedObjectSet, NormalizationReport) {
    let n = set.n_objects();
    let d = set.n_measures();
    let mut means = Vec::with_capacity(d);
    let mut stddevs = Vec::with_capacity(d);
    let mut constant_measures = Vec::new();
    let mut rows = vec![Vec::with_capacity(d); n];

    for j in 0..d {
        let column = set.column(j);
        let (mean, std) = column_mean_and_pop_std(&column);
        means.push(mean);
        stddevs.push(std);
        if std == 0.0 {
            constant_measures.push(set.measure_names()[j].clone());
            for row in rows.iter_mut() {
                row.push(0.0);
            }
        } else {
            for (row, &x) in rows.iter_mut().zip(&column) {
                row.push((x - mean) / std);
            }
        }
    }

    let normalized = CharacterisedObjectSet::new(
        set.object_ids().to_vec(),
        set.measure_names().to_vec(),
        rows,
    )
    .expect("normalization preserves table invariants");
    (
        normalized,
        NormalizationReport {
            means,
            stddevs,
            constant_measures,
        },
    )
}

/// Absolute Pearson correlation of two columns; zero-variance columns
/// correlate as 0 with everything by convention. Clamped to [0, 1].
fn abs_pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let mean_a = a.iter().sum::<f64>() / n;
    let mean_b = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut var_a = 0.0;
    let mut var_b = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        let dx = x - mean_a;
        let dy = y - mean_b;
        cov += dx * dy;
        var_a += dx * dx;
        var_b += dy * dy;
    }
    if var_a == 0.0 || var_b == 0.0 {
        return 0.0;
    }
    (cov / (var_a * var_b).sqrt()).abs().min(1.0)
}

/// Drops redundant measures by a greedy first-kept-wins scan.
///
/// Measures are visited in input order; one is dropped exactly when its
/// absolute Pearson correlation with some earlier kept measure reaches
/// `threshold`. The first measure is therefore always kept, and constant
/// measures are never dropped by this rule.
pub fn filter_measures(
    set: &CharacterisedObjectSet,
    threshold: f64,
) -> Result<(CharacterisedObjectSet, FilterReport), TableError> {
    if !threshold.is_finite() || threshold <= 0.0 || threshold > 1.0 {
        return Err(TableError::InvalidThreshold(threshold));
    }

    let columns: Vec<Vec<f64>> = (0..set.n_measures()).map(|j| set.column(j)).collect();
    let mut kept_idx: Vec<usize> = Vec::new();
    let mut dropped = Vec::new();

    for j in 0..set.n_measures() {
        let mut verdict = None;
        for &i in &kept_idx {
            let r = abs_pearson(&columns[i], &columns[j]);
            if r >= threshold {
                verdict = Some((i, r));
                break;
            }
        }
        match verdict {
            Some((i, r)) => dropped.push(DroppedMeasure {
                name: set.measure_names()[j].clone(),
                duplicate_of: set.measure_names()[i].clone(),
                absolute_correlation: r,
            }),
            None => kept_idx.push(j),
        }
    }

    let kept: Vec<String> = kept_idx
        .iter()
        .map(|&j| set.measure_names()[j].clone())
        .collect();
    let rows: Vec<Vec<f64>> = (0..set.n_objects())
        .map(|i| kept_idx.iter().map(|&j| set.value(i, j)).collect())
        .collect();
    let reduced = CharacterisedObjectSet::new(set.object_ids().to_vec(), kept.clone(), rows)
        .expect("filtering keeps at least the first measure");
    Ok((reduced, FilterReport { kept, dropped }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set_from(ids: &[&str], names: &[&str], rows: &[&[f64]]) -> CharacterisedObjectSet {
        CharacterisedObjectSet::new(
            ids.iter().map(|s| s.to_string()).collect(),
            names.iter().map(|s| s.to_string()).collect(),
            rows.iter().map(|r| r.to_vec()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn load_table_parses_rows_in_order() {
        let set = load_table("id,a,b\nx,1,2\ny,3,4\n".as_bytes()).unwrap();
        assert_eq!(set.n_objects(), 2);
        assert_eq!(set.n_measures(), 2);
        assert_eq!(set.object_ids(), ["x", "y"]);
        assert_eq!(set.measure_names(), ["a", "b"]);
        assert_eq!(set.row(0), [1.0, 2.0]);
        assert_eq!(set.row(1), [3.0, 4.0]);
    }

    #[test]
    fn load_table_accepts_scientific_notation() {
        let set = load_table("id,a\nx,1.5e-3\ny,-2E4\n".as_bytes()).unwrap();
        assert_eq!(set.value(0, 0), 1.5e-3);
        assert_eq!(set.value(1, 0), -2e4);
    }

    #[test]
    fn load_table_rejects_duplicate_ids() {
        let err = load_table("id,a\nx,1\nx,2\n".as_bytes()).unwrap_err();
        assert!(matches!(err, TableError::DuplicateId(id) if id == "x"));
    }

    #[test]
    fn load_table_rejects_duplicate_measure_names() {
        let err = load_table("id,a,a\nx,1,2\n".as_bytes()).unwrap_err();
        assert!(matches!(err, TableError::DuplicateMeasureName(n) if n == "a"));
    }

    #[test]
    fn load_table_reports_non_numeric_cell_position() {
        let err = load_table("id,a\nx,abc\n".as_bytes()).unwrap_err();
        match err {
            TableError::NonNumericCell { row, column } => {
                assert_eq!(row, 1);
                assert_eq!(column, "a");
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn load_table_rejects_non_finite_cells() {
        let err = load_table("id,a\nx,inf\n".as_bytes()).unwrap_err();
        assert!(matches!(err, TableError::NonFiniteCell { row: 1, .. }));
        let err = load_table("id,a\nx,NaN\n".as_bytes()).unwrap_err();
        assert!(matches!(err, TableError::NonFiniteCell { row: 1, .. }));
    }

    #[test]
    fn load_table_rejects_empty_and_headerless_input() {
        assert!(matches!(
            load_table("id,a\n".as_bytes()),
            Err(TableError::EmptyInput)
        ));
        assert!(matches!(
            load_table("".as_bytes()),
            Err(TableError::EmptyInput)
        ));
        assert!(matches!(
            load_table("id\nx\n".as_bytes()),
            Err(TableError::NoMeasures)
        ));
    }

    #[test]
    fn load_table_reports_short_rows() {
        let err = load_table("id,a,b\nx,1\n".as_bytes()).unwrap_err();
        assert!(matches!(err, TableError::RowLength { row: 1, .. }));
    }

    #[test]
    fn csv_round_trip_preserves_the_set() {
        let set = set_from(
            &["x", "y, with comma", "z\"quoted\""],
            &["a", "b"],
            &[&[1.0, 0.1], &[-3.5e-9, 2.0 / 3.0], &[1e300, -0.0]],
        );
        let back = load_table(set.to_csv().as_bytes()).unwrap();
        assert_eq!(back, set);
    }

    #[test]
    fn normalize_matches_hand_computed_zscores() {
        // Column [1,2,3]: mean 2, population variance 2/3.
        let set = set_from(&["x", "y", "z"], &["a"], &[&[1.0], &[2.0], &[3.0]]);
        let (normed, report) = normalize(&set);
        let sigma = (2.0f64 / 3.0).sqrt();
        let expected = [(1.0 - 2.0) / sigma, 0.0, (3.0 - 2.0) / sigma];
        for (i, &e) in expected.iter().enumerate() {
            assert!((normed.value(i, 0) - e).abs() < 1e-12);
        }
        assert!((normed.value(0, 0) + 1.224744871391589).abs() < 1e-9);
        assert_eq!(report.means, [2.0]);
        assert!((report.stddevs[0] - sigma).abs() < 1e-15);
        assert!(report.constant_measures.is_empty());
    }

    #[test]
    fn normalize_maps_constant_columns_to_zero() {
        let set = set_from(&["x", "y", "z"], &["a"], &[&[5.0], &[5.0], &[5.0]]);
        let (normed, report) = normalize(&set);
        assert_eq!(normed.column(0), [0.0, 0.0, 0.0]);
        assert_eq!(report.constant_measures, ["a"]);
        assert_eq!(report.stddevs, [0.0]);
    }

    #[test]
    fn normalize_is_idempotent() {
        let set = set_from(
            &["a", "b", "c", "d"],
            &["m1", "m2"],
            &[&[1.0, 9.0], &[4.0, 9.0], &[-2.0, 9.0], &[0.5, 9.0]],
        );
        let (once, _) = normalize(&set);
        let (twice, _) = normalize(&once);
        for i in 0..set.n_objects() {
            for j in 0..set.n_measures() {
                assert!((once.value(i, j) - twice.value(i, j)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn filter_drops_perfect_linear_dependents() {
        // b = 2a + 1.
        let set = set_from(
            &["w", "x", "y", "z"],
            &["a", "b"],
            &[&[1.0, 3.0], &[2.0, 5.0], &[3.0, 7.0], &[4.0, 9.0]],
        );
        let (reduced, report) = filter_measures(&set, 0.95).unwrap();
        assert_eq!(reduced.measure_names(), ["a"]);
        assert_eq!(report.kept, ["a"]);
        assert_eq!(report.dropped.len(), 1);
        assert_eq!(report.dropped[0].name, "b");
        assert_eq!(report.dropped[0].duplicate_of, "a");
        assert_eq!(report.dropped[0].absolute_correlation, 1.0);
    }

    #[test]
    fn filter_keeps_uncorrelated_columns() {
        let set = set_from(
            &["p", "q", "r", "s"],
            &["a", "b"],
            &[&[1.0, 1.0], &[-1.0, 1.0], &[1.0, -1.0], &[-1.0, -1.0]],
        );
        let (reduced, report) = filter_measures(&set, 0.95).unwrap();
        assert_eq!(reduced.n_measures(), 2);
        assert!(report.dropped.is_empty());
    }

    #[test]
    fn filter_matches_direct_pearson_oracle() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [1.0, 2.0, 3.0, 5.0];
        // Independent Pearson computation for the oracle value.
        let ma = a.iter().sum::<f64>() / 4.0;
        let mb = b.iter().sum::<f64>() / 4.0;
        let cov: f64 = a.iter().zip(&b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma) * (x - ma)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb) * (y - mb)).sum();
        let r = cov / (va * vb).sqrt();
        assert!((r - 0.9827076298239908).abs() < 1e-12);

        let rows: Vec<Vec<f64>> = a.iter().zip(&b).map(|(&x, &y)| vec![x, y]).collect();
        let set = CharacterisedObjectSet::new(
            vec!["w".into(), "x".into(), "y".into(), "z".into()],
            vec!["a".into(), "b".into()],
            rows,
        )
        .unwrap();
        let (reduced, report) = filter_measures(&set, 0.95).unwrap();
        assert_eq!(reduced.measure_names(), ["a"]);
        assert!((report.dropped[0].absolute_correlation - r).abs() < 1e-12);
    }

    #[test]
    fn filter_never_drops_constant_measures() {
        let set = set_from(
            &["x", "y", "z"],
            &["a", "const", "a2"],
            &[&[1.0, 7.0, 2.0], &[2.0, 7.0, 4.0], &[3.0, 7.0, 6.0]],
        );
        let (reduced, report) = filter_measures(&set, 0.9).unwrap();
        assert_eq!(reduced.measure_names(), ["a", "const"]);
        assert_eq!(report.dropped[0].name, "a2");
    }

    #[test]
    fn filter_rejects_bad_thresholds() {
        let set = set_from(&["x"], &["a"], &[&[1.0]]);
        for t in [0.0, -0.5, 1.5, f64::NAN, f64::INFINITY] {
            assert!(matches!(
                filter_measures(&set, t),
                Err(TableError::InvalidThreshold(_))
            ));
        }
        assert!(filter_measures(&set, 1.0).is_ok());
    }
}
