//! The choice dataset and its CSV interchange format.
//!
//! Header: `respondent_id,task_id`, then `a_<attr>` per categorical
//! attribute, `a_price`, the same for `b_`, then `chose_a` (0/1). LF line
//! endings, `.` decimal separator.

use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ChoiceRecord, ChoiceTask, GroundTruth, RespondentParams, SurveyDesign};
use crate::domain::{AttributeScheme, ProductProfile};
use crate::error::{Error, Result};
use crate::output;

/// How a simulated dataset was produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub seed: u64,
    pub ground_truth: GroundTruth,
    pub design: SurveyDesign,
    pub respondents: Vec<RespondentParams>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChoiceDataset {
    pub scheme: AttributeScheme,
    pub records: Vec<ChoiceRecord>,
    pub provenance: Option<Provenance>,
}

impl ChoiceDataset {
    /// Checks grouping by respondent, per-respondent task id uniqueness and
    /// profile validity.
    pub fn new(scheme: AttributeScheme, records: Vec<ChoiceRecord>) -> Result<Self> {
        let mut finished = BTreeSet::new();
        let mut current: Option<u32> = None;
        let mut task_ids = BTreeSet::new();
        for (row, rec) in records.iter().enumerate() {
            let rid = rec.task.respondent_id;
            if current != Some(rid) {
                if let Some(prev) = current {
                    finished.insert(prev);
                }
                if finished.contains(&rid) {
                    return Err(Error::data(format!(
                        "record {row}: respondent {rid} appears in more than one block"
                    )));
                }
                current = Some(rid);
                task_ids.clear();
            }
            if !task_ids.insert(rec.task.task_id) {
                return Err(Error::data(format!(
                    "record {row}: duplicate task {} for respondent {rid}",
                    rec.task.task_id
                )));
            }
            scheme
                .validate_profile(&rec.task.profile_a)
                .and_then(|_| scheme.validate_profile(&rec.task.profile_b))
                .map_err(|e| Error::data(format!("record {row}: {e}")))?;
        }
        Ok(Self { scheme, records, provenance: None })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Distinct respondent ids in order of first appearance.
    pub fn respondent_ids(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = Vec::new();
        for r in &self.records {
            if ids.last() != Some(&r.task.respondent_id) {
                ids.push(r.task.respondent_id);
            }
        }
        ids
    }

    pub fn csv_header(scheme: &AttributeScheme) -> Vec<String> {
        let mut header = vec!["respondent_id".to_string(), "task_id".to_string()];
        for side in ["a", "b"] {
            header.extend(scheme.categorical().map(|a| format!("{side}_{}", a.name)));
            header.push(format!("{side}_price"));
        }
        header.push("chose_a".to_string());
        header
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(writer);
        w.write_record(Self::csv_header(&self.scheme))?;
        let attrs: Vec<&str> = self.scheme.categorical().map(|a| a.name.as_str()).collect();
        let mut row = Vec::with_capacity(2 * attrs.len() + 5);
        for rec in &self.records {
            row.clear();
            row.push(rec.task.respondent_id.to_string());
            row.push(rec.task.task_id.to_string());
            for p in [&rec.task.profile_a, &rec.task.profile_b] {
                row.extend(attrs.iter().map(|a| p.levels[*a].clone()));
                row.push(p.price.to_string());
            }
            row.push(if rec.chose_a { "1" } else { "0" }.to_string());
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(scheme: &AttributeScheme, reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let expected = Self::csv_header(scheme);
        let header = rdr.headers()?.clone();
        let found: Vec<&str> = header.iter().collect();
        if found != expected {
            let col = expected
                .iter()
                .zip(found.iter().map(|s| Some(*s)).chain(std::iter::repeat(None)))
                .position(|(e, f)| Some(e.as_str()) != f)
                .unwrap_or(expected.len());
            return Err(Error::data(format!(
                "header mismatch at column {}: expected `{}`, found `{}`",
                col + 1,
                expected.get(col).map(String::as_str).unwrap_or("<end>"),
                found.get(col).copied().unwrap_or("<end>"),
            )));
        }
        let attrs: Vec<String> = scheme.categorical().map(|a| a.name.clone()).collect();
        let mut records = Vec::new();
        for (i, result) in rdr.records().enumerate() {
            let row = i + 2; // header is line 1
            let rec = result.map_err(|e| Error::data(format!("row {row}: {e}")))?;
            let field = |col: usize| -> &str { rec.get(col).unwrap_or("") };
            let bad = |col: usize, what: &str| {
                Error::data(format!(
                    "row {row}, column `{}`: {what} (`{}`)",
                    expected[col],
                    field(col)
                ))
            };
            let int = |col: usize| field(col).parse::<u32>().map_err(|_| bad(col, "not an integer"));
            let respondent_id = int(0)?;
            let task_id = int(1)?;
            let mut col = 2;
            let mut profiles = Vec::with_capacity(2);
            for _ in 0..2 {
                let levels = attrs
                    .iter()
                    .enumerate()
                    .map(|(k, a)| (a.clone(), field(col + k).to_string()))
                    .collect();
                col += attrs.len();
                let price = field(col)
                    .parse::<f64>()
                    .ok()
                    .filter(|p| p.is_finite() && *p > 0.0)
                    .ok_or_else(|| bad(col, "not a positive price"))?;
                let profile = ProductProfile { levels, price };
                scheme
                    .validate_profile(&profile)
                    .map_err(|e| Error::data(format!("row {row}: {e}")))?;
                profiles.push(profile);
                col += 1;
            }
            let chose_a = match field(col) {
                "1" => true,
                "0" => false,
                _ => return Err(bad(col, "expected 0 or 1")),
            };
            let profile_b = profiles.pop().expect("two profiles");
            let profile_a = profiles.pop().expect("two profiles");
            records.push(ChoiceRecord {
                task: ChoiceTask { respondent_id, task_id, profile_a, profile_b },
                chose_a,
            });
        }
        Self::new(scheme.clone(), records)
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        output::write_atomic_with(path, |w| self.write_csv(w))
    }

    pub fn load_csv(scheme: &AttributeScheme, path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read_csv(scheme, std::io::BufReader::new(file))
    }
}
