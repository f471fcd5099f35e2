use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use crate::{Error, Result, SampleSet};

/// Feature rows with optional integer class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub features: SampleSet,
    pub labels: Option<Vec<i64>>,
}

impl LabeledDataset {
    pub fn new(features: SampleSet, labels: Option<Vec<i64>>) -> Result<Self> {
        if let Some(l) = &labels {
            if l.len() != features.len() {
                return Err(Error::Dataset(format!("{} labels for {} rows", l.len(), features.len())));
            }
        }
        Ok(Self { features, labels })
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.dim()
    }

    pub fn from_csv_path(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
        Self::from_csv_reader(file, &path.display().to_string())
    }

    /// Reads a header row, then one point per row. A column named `label`
    /// holds integer class ids; every other column is a numeric feature.
    /// `name` is used in error messages.
    pub fn from_csv_reader<R: Read>(reader: R, name: &str) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
        let headers = rdr
            .headers()
            .map_err(|e| Error::Dataset(format!("{name}: cannot read header: {e}")))?
            .clone();
        if headers.is_empty() {
            return Err(Error::Dataset(format!("{name}: missing header row")));
        }
        let label_col = headers.iter().position(|h| h == "label");
        if headers.iter().filter(|h| *h == "label").count() > 1 {
            return Err(Error::Dataset(format!("{name}: more than one label column")));
        }
        let dim = headers.len() - usize::from(label_col.is_some());
        let mut data = Vec::new();
        let mut labels = Vec::new();
        let mut rows = 0;
        for result in rdr.records() {
            let record = result.map_err(|e| {
                let line = e.position().map_or(0, |p| p.line());
                Error::Dataset(format!("{name}, line {line}: {e}"))
            })?;
            let line = record.position().map_or(0, |p| p.line());
            for (col, field) in record.iter().enumerate() {
                let bad = |what: &str| {
                    Error::Dataset(format!("{name}, line {line}, column {} ({}): {what} {field:?}", col + 1, &headers[col]))
                };
                if Some(col) == label_col {
                    labels.push(field.parse::<i64>().map_err(|_| bad("invalid integer label"))?);
                } else {
                    let v = field.parse::<f64>().map_err(|_| bad("invalid number"))?;
                    if !v.is_finite() {
                        return Err(bad("non-finite value"));
                    }
                    data.push(v);
                }
            }
            rows += 1;
        }
        let features = SampleSet::from_flat(data, rows, dim)?;
        Self::new(features, label_col.map(|_| labels))
    }

    /// Header `x0, x1, ...` followed by `label` when labels are present.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let err = |e: csv::Error| Error::Dataset(format!("writing dataset: {e}"));
        let mut header: Vec<String> = (0..self.dim()).map(|k| format!("x{k}")).collect();
        if self.labels.is_some() {
            header.push("label".into());
        }
        w.write_record(&header).map_err(err)?;
        for (i, row) in self.features.rows().enumerate() {
            let mut fields: Vec<String> = row.iter().map(f64::to_string).collect();
            if let Some(l) = &self.labels {
                fields.push(l[i].to_string());
            }
            w.write_record(&fields).map_err(err)?;
        }
        w.flush().map_err(|e| Error::Dataset(format!("writing dataset: {e}")))
    }
}
