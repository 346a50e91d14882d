//! Cohort file formats.
//!
//! The primary format is line-delimited JSON, one visit per line:
//!
//! ```text
//! {"eye_id":"e0001","visit_time":0.0,"T":31.5,"E":1,"features":[0.12,...]}
//! ```
//!
//! `T` and `E` are omitted for unlabeled cohorts; `views` (an array of feature
//! arrays) is optional. A CSV variant with columns `eye_id, visit_time, T, E,
//! f0..f{d-1}` is accepted for ingestion and can be written for inspection.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::domain::{Cohort, Eye, SurvivalLabel, Visit};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VisitRecord {
    pub eye_id: String,
    pub visit_time: f64,
    #[serde(rename = "T", default, skip_serializing_if = "Option::is_none")]
    pub time: Option<f64>,
    #[serde(rename = "E", default, skip_serializing_if = "Option::is_none")]
    pub event: Option<u8>,
    pub features: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub views: Option<Vec<Vec<f64>>>,
}

impl VisitRecord {
    fn from_visit(eye_id: &str, v: &Visit) -> Self {
        Self {
            eye_id: eye_id.to_string(),
            visit_time: v.visit_time,
            time: v.label.map(|l| l.time),
            event: v.label.map(|l| u8::from(l.event)),
            features: v.features.clone(),
            views: v.views.clone(),
        }
    }

    fn label(&self, line: usize) -> Result<Option<SurvivalLabel>> {
        match (self.time, self.event) {
            (None, None) => Ok(None),
            (Some(t), Some(e)) if e <= 1 => Ok(Some(SurvivalLabel::new(t, e == 1))),
            (Some(_), Some(e)) => Err(Error::Parse {
                line,
                message: format!("E must be 0 or 1, got {e}"),
            }),
            _ => Err(Error::Parse {
                line,
                message: "T and E must be given together".into(),
            }),
        }
    }
}

/// Groups records into a cohort. Visit order within an eye follows record order.
pub fn cohort_from_records(records: Vec<(usize, VisitRecord)>) -> Result<Cohort> {
    let mut feature_dim = None;
    let mut labeled = None;
    let mut eyes: BTreeMap<String, Vec<Visit>> = BTreeMap::new();
    for (line, rec) in records {
        let label = rec.label(line)?;
        match labeled {
            None => labeled = Some(label.is_some()),
            Some(l) if l != label.is_some() => {
                return Err(Error::Parse {
                    line,
                    message: "mixed labeled and unlabeled visits".into(),
                })
            }
            _ => {}
        }
        feature_dim.get_or_insert(rec.features.len());
        eyes.entry(rec.eye_id).or_default().push(Visit {
            visit_time: rec.visit_time,
            features: rec.features,
            label,
            views: rec.views,
        });
    }
    let eyes = eyes.into_iter().map(|(id, visits)| Eye { id, visits }).collect();
    Cohort::new(eyes, feature_dim.unwrap_or(0), labeled.unwrap_or(false))
}

pub fn records_of(cohort: &Cohort) -> Vec<VisitRecord> {
    cohort
        .eyes()
        .iter()
        .flat_map(|e| e.visits.iter().map(move |v| VisitRecord::from_visit(&e.id, v)))
        .collect()
}

pub fn read_jsonl<R: Read>(reader: R) -> Result<Cohort> {
    let mut records = Vec::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: VisitRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        records.push((i + 1, rec));
    }
    cohort_from_records(records)
}

pub fn write_jsonl<W: Write>(cohort: &Cohort, writer: W) -> Result<()> {
    let mut w = BufWriter::new(writer);
    for rec in records_of(cohort) {
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<R: Read>(reader: R) -> Result<Cohort> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let eye_col = col("eye_id").ok_or_else(|| Error::Parse {
        line: 1,
        message: "missing eye_id column".into(),
    })?;
    let time_col = col("visit_time").ok_or_else(|| Error::Parse {
        line: 1,
        message: "missing visit_time column".into(),
    })?;
    let t_col = col("T");
    let e_col = col("E");
    let mut feature_cols = Vec::new();
    while let Some(c) = col(&format!("f{}", feature_cols.len())) {
        feature_cols.push(c);
    }

    let mut records = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let line = i + 2;
        let row = row?;
        let num = |c: usize| -> Result<f64> {
            row[c].parse::<f64>().map_err(|e| Error::Parse {
                line,
                message: format!("column {}: {e}", &headers[c]),
            })
        };
        let opt = |c: Option<usize>| -> Result<Option<f64>> {
            match c {
                Some(c) if !row[c].is_empty() => num(c).map(Some),
                _ => Ok(None),
            }
        };
        let event = match opt(e_col)? {
            None => None,
            Some(v) if v == 0.0 || v == 1.0 => Some(v as u8),
            Some(v) => {
                return Err(Error::Parse {
                    line,
                    message: format!("E must be 0 or 1, got {v}"),
                })
            }
        };
        records.push((
            line,
            VisitRecord {
                eye_id: row[eye_col].to_string(),
                visit_time: num(time_col)?,
                time: opt(t_col)?,
                event,
                features: feature_cols.iter().map(|&c| num(c)).collect::<Result<_>>()?,
                views: None,
            },
        ));
    }
    cohort_from_records(records)
}

pub fn write_csv<W: Write>(cohort: &Cohort, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["eye_id".to_string(), "visit_time".into()];
    if cohort.is_labeled() {
        header.push("T".into());
        header.push("E".into());
    }
    header.extend((0..cohort.feature_dim()).map(|i| format!("f{i}")));
    w.write_record(&header)?;
    for rec in records_of(cohort) {
        let mut row = vec![rec.eye_id, rec.visit_time.to_string()];
        if cohort.is_labeled() {
            row.push(rec.time.map(|t| t.to_string()).unwrap_or_default());
            row.push(rec.event.map(|e| e.to_string()).unwrap_or_default());
        }
        row.extend(rec.features.iter().map(|f| f.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

fn is_csv(path: &Path) -> bool {
    path.extension()
        .map(|e| e.eq_ignore_ascii_case("csv"))
        .unwrap_or(false)
}

/// Reads a cohort file; `.csv` selects the CSV variant, anything else is JSON lines.
pub fn read_cohort(path: impl AsRef<Path>) -> Result<Cohort> {
    let path = path.as_ref();
    let file = File::open(path)?;
    if is_csv(path) {
        read_csv(file)
    } else {
        read_jsonl(file)
    }
}

pub fn write_cohort(cohort: &Cohort, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path)?;
    if is_csv(path) {
        write_csv(cohort, file)
    } else {
        write_jsonl(cohort, file)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"{"eye_id":"b","visit_time":0.0,"T":12.0,"E":0,"features":[1.0,2.0]}
{"eye_id":"a","visit_time":0.0,"T":6.5,"E":1,"features":[0.5,0.25],"views":[[0.5,0.25],[0.4,0.3]]}
{"eye_id":"b","visit_time":12.0,"T":0.0,"E":0,"features":[1.5,2.5]}
"#;

    #[test]
    fn jsonl_parses_and_groups() {
        let c = read_jsonl(SAMPLE.as_bytes()).unwrap();
        assert!(c.is_labeled());
        assert_eq!(c.feature_dim(), 2);
        assert_eq!(c.eyes().len(), 2);
        let b = c.eye("b").unwrap();
        assert_eq!(b.visits.len(), 2);
        assert_eq!(b.visits[1].label, Some(SurvivalLabel::censored(0.0)));
        let a = c.eye("a").unwrap();
        assert_eq!(a.visits[0].inference_views().len(), 2);
    }

    #[test]
    fn jsonl_round_trip() {
        let c = read_jsonl(SAMPLE.as_bytes()).unwrap();
        let mut buf = Vec::new();
        write_jsonl(&c, &mut buf).unwrap();
        assert_eq!(read_jsonl(buf.as_slice()).unwrap(), c);
    }

    #[test]
    fn unlabeled_rows_omit_label_fields() {
        let c = read_jsonl(SAMPLE.as_bytes()).unwrap().without_labels();
        let mut buf = Vec::new();
        write_jsonl(&c, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(!text.contains("\"T\""));
        assert!(!read_jsonl(text.as_bytes()).unwrap().is_labeled());
    }

    #[test]
    fn mixed_labels_rejected() {
        let text = r#"{"eye_id":"a","visit_time":0.0,"T":1.0,"E":0,"features":[1.0]}
{"eye_id":"a","visit_time":1.0,"features":[1.0]}"#;
        assert!(matches!(read_jsonl(text.as_bytes()), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn half_label_rejected() {
        let text = r#"{"eye_id":"a","visit_time":0.0,"T":1.0,"features":[1.0]}"#;
        assert!(read_jsonl(text.as_bytes()).is_err());
    }

    #[test]
    fn csv_variant() {
        let text = "eye_id,visit_time,T,E,f0,f1\na,0,6,1,0.5,0.25\na,6,0,1,0.75,0.5\n";
        let c = read_csv(text.as_bytes()).unwrap();
        assert_eq!(c.feature_dim(), 2);
        assert_eq!(c.eye("a").unwrap().visits[1].label, Some(SurvivalLabel::event(0.0)));

        let mut buf = Vec::new();
        write_csv(&c, &mut buf).unwrap();
        assert_eq!(read_csv(buf.as_slice()).unwrap(), c);
    }

    #[test]
    fn csv_unlabeled() {
        let text = "eye_id,visit_time,f0\na,0,1\na,3,2\n";
        let c = read_csv(text.as_bytes()).unwrap();
        assert!(!c.is_labeled());
        assert_eq!(c.n_visits(), 2);
    }
}
