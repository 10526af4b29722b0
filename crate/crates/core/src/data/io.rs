//! CSV ingestion: patient rows, long-format event streams and outcome
//! panels.

use super::{
    DataError, Dataset, Event, EventKind, PatientRecord, Panels, SchemaDecl, PERIOD_LENGTH_DAYS,
};
use chrono::NaiveDate;
use std::collections::HashMap;
use std::path::Path;

/// Load the patient table `id, county, d, <covariates...>` and validate it
/// against the declared schema.
pub fn load_patients_csv(path: &Path, schema: &SchemaDecl) -> Result<Dataset, DataError> {
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    let cols: Vec<&str> = headers.iter().collect();
    for required in ["id", "county", "d"] {
        if !cols.contains(&required) {
            return Err(DataError::MissingColumn(required.to_string()));
        }
    }
    let covar_cols: Vec<String> = cols[3..].iter().map(|s| s.to_string()).collect();
    for declared in &schema.covariates {
        if !covar_cols.contains(declared) {
            return Err(DataError::MissingColumn(declared.clone()));
        }
    }

    let mut county_labels = schema.counties.clone();
    county_labels.sort();

    let mut patients = Vec::new();
    for (idx, row) in rdr.records().enumerate() {
        let row = row?;
        let rownum = idx + 2; // 1-based, after header
        let id = row.get(0).unwrap_or("").to_string();
        let county_label = row.get(1).unwrap_or("");
        let county = county_labels
            .iter()
            .position(|c| c == county_label)
            .ok_or_else(|| DataError::UnknownCounty {
                row: rownum,
                label: county_label.to_string(),
            })?;
        let d_raw = row.get(2).unwrap_or("");
        let d = match d_raw {
            "0" => 0,
            "1" => 1,
            other => {
                return Err(DataError::BadTreatment {
                    row: rownum,
                    value: other.to_string(),
                })
            }
        };
        let mut x = Vec::with_capacity(covar_cols.len());
        for (j, name) in covar_cols.iter().enumerate() {
            let cell = row.get(3 + j).unwrap_or("");
            let v: f64 = cell.parse().map_err(|_| DataError::Parse {
                row: rownum,
                column: name.clone(),
                value: cell.to_string(),
            })?;
            x.push(v);
        }
        patients.push(PatientRecord {
            id,
            county,
            d,
            x,
            events: Vec::new(),
            panels: Panels::default(),
            alive_periods: 0,
        });
    }

    let ds = Dataset {
        patients,
        county_labels,
        covariate_names: covar_cols,
        period_length_days: PERIOD_LENGTH_DAYS,
    };
    ds.validate()?;
    Ok(ds)
}

/// Attach events from a long-format CSV `id, date, kind, code`.
pub fn load_events_csv(path: &Path, ds: &mut Dataset) -> Result<usize, DataError> {
    let mut rdr = csv::Reader::from_path(path)?;
    let index: HashMap<String, usize> = ds
        .patients
        .iter()
        .enumerate()
        .map(|(i, r)| (r.id.clone(), i))
        .collect();
    let mut count = 0;
    for (idx, row) in rdr.records().enumerate() {
        let row = row?;
        let rownum = idx + 2;
        let id = row.get(0).unwrap_or("");
        let &pi = index.get(id).ok_or_else(|| DataError::UnknownPatient {
            row: rownum,
            id: id.to_string(),
        })?;
        let date_raw = row.get(1).unwrap_or("");
        let date = NaiveDate::parse_from_str(date_raw, "%Y-%m-%d").map_err(|_| DataError::Parse {
            row: rownum,
            column: "date".into(),
            value: date_raw.to_string(),
        })?;
        let kind_raw = row.get(2).unwrap_or("");
        let kind = match kind_raw {
            "prescription" => EventKind::Prescription,
            "inpatient" => EventKind::Inpatient,
            other => {
                return Err(DataError::Parse {
                    row: rownum,
                    column: "kind".into(),
                    value: other.to_string(),
                })
            }
        };
        ds.patients[pi].events.push(Event {
            date,
            kind,
            code: row.get(3).unwrap_or("").to_string(),
        });
        count += 1;
    }
    for rec in ds.patients.iter_mut() {
        rec.events.sort_by_key(|e| e.date);
    }
    Ok(count)
}

/// Attach per-period outcomes from a long-format CSV
/// `id, period, outcome, value` (period is 1-based).
pub fn load_panel_csv(path: &Path, ds: &mut Dataset) -> Result<usize, DataError> {
    let mut rdr = csv::Reader::from_path(path)?;
    let index: HashMap<String, usize> = ds
        .patients
        .iter()
        .enumerate()
        .map(|(i, r)| (r.id.clone(), i))
        .collect();
    let mut count = 0;
    for (idx, row) in rdr.records().enumerate() {
        let row = row?;
        let rownum = idx + 2;
        let id = row.get(0).unwrap_or("");
        let &pi = index.get(id).ok_or_else(|| DataError::UnknownPatient {
            row: rownum,
            id: id.to_string(),
        })?;
        let period: usize = parse_cell(&row, 1, "period", rownum)?;
        let outcome_raw = row.get(2).unwrap_or("");
        let outcome =
            super::OutcomeKind::parse(outcome_raw).ok_or_else(|| DataError::Parse {
                row: rownum,
                column: "outcome".into(),
                value: outcome_raw.to_string(),
            })?;
        let value: u8 = parse_cell(&row, 3, "value", rownum)?;
        let panel = ds.patients[pi].panels.get_mut(outcome);
        if panel.len() < period {
            panel.resize(period, 0);
        }
        panel[period - 1] = value;
        count += 1;
    }
    for rec in ds.patients.iter_mut() {
        rec.alive_periods = rec
            .panels
            .dead
            .iter()
            .position(|&v| v == 1)
            .unwrap_or(rec.panels.dead.len());
    }
    ds.validate()?;
    Ok(count)
}

fn parse_cell<T: std::str::FromStr>(
    row: &csv::StringRecord,
    col: usize,
    name: &str,
    rownum: usize,
) -> Result<T, DataError> {
    let cell = row.get(col).unwrap_or("");
    cell.parse().map_err(|_| DataError::Parse {
        row: rownum,
        column: name.to_string(),
        value: cell.to_string(),
    })
}

/// Write the patient table back out (used by the prep step after
/// imputation).
pub fn write_patients_csv(path: &Path, ds: &Dataset) -> Result<(), DataError> {
    let mut wtr = csv::Writer::from_path(path)?;
    let mut header = vec!["id".to_string(), "county".into(), "d".into()];
    header.extend(ds.covariate_names.iter().cloned());
    wtr.write_record(&header)?;
    for rec in &ds.patients {
        let mut row = vec![
            rec.id.clone(),
            ds.county_labels[rec.county].clone(),
            rec.d.to_string(),
        ];
        row.extend(rec.x.iter().map(|v| format!("{v}")));
        wtr.write_record(&row)?;
    }
    wtr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn schema() -> SchemaDecl {
        SchemaDecl {
            counties: vec!["beta".into(), "alpha".into()],
            covariates: vec!["diff_time".into(), "age".into()],
        }
    }

    fn write_tmp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn round_trips_a_well_formed_fixture() {
        let mut body = String::from("id,county,d,diff_time,age\n");
        for i in 0..10 {
            body.push_str(&format!("p{i},alpha,{},{}.5,7{}\n", i % 2, i, i));
        }
        let f = write_tmp(&body);
        let ds = load_patients_csv(f.path(), &schema()).unwrap();
        assert_eq!(ds.n(), 10);
        assert_eq!(ds.county_labels, vec!["alpha".to_string(), "beta".into()]);
        assert_eq!(ds.patients[3].x, vec![3.5, 73.0]);

        let out = tempfile::NamedTempFile::new().unwrap();
        write_patients_csv(out.path(), &ds).unwrap();
        let ds2 = load_patients_csv(out.path(), &schema()).unwrap();
        assert_eq!(ds2.n(), 10);
        assert_eq!(ds2.patients[3].x, ds.patients[3].x);
    }

    #[test]
    fn unknown_county_names_row_and_label() {
        let f = write_tmp("id,county,d,diff_time,age\np0,X,0,1.0,70\n");
        match load_patients_csv(f.path(), &schema()) {
            Err(DataError::UnknownCounty { row, label }) => {
                assert_eq!(row, 2);
                assert_eq!(label, "X");
            }
            other => panic!("expected UnknownCounty, got {other:?}"),
        }
    }

    #[test]
    fn treatment_of_two_is_rejected() {
        let f = write_tmp("id,county,d,diff_time,age\np0,alpha,2,1.0,70\n");
        let err = load_patients_csv(f.path(), &schema()).unwrap_err();
        assert!(err.to_string().contains("treatment must be 0/1"));
    }

    #[test]
    fn events_and_panels_attach_and_sort() {
        let f = write_tmp("id,county,d,diff_time,age\np0,alpha,1,1.0,70\n");
        let mut ds = load_patients_csv(f.path(), &schema()).unwrap();

        let ev = write_tmp(
            "id,date,kind,code\np0,2016-02-01,inpatient,M844\np0,2016-01-01,prescription,N02AA01\n",
        );
        assert_eq!(load_events_csv(ev.path(), &mut ds).unwrap(), 2);
        assert_eq!(ds.patients[0].events[0].code, "N02AA01");

        let pn = write_tmp(
            "id,period,outcome,value\np0,1,dead,0\np0,2,dead,1\np0,1,pain,0\n",
        );
        assert_eq!(load_panel_csv(pn.path(), &mut ds).unwrap(), 3);
        assert_eq!(ds.patients[0].panels.dead, vec![0, 1]);
        assert_eq!(ds.patients[0].alive_periods, 1);
    }

    #[test]
    fn unparseable_cell_identifies_row_and_column() {
        let f = write_tmp("id,county,d,diff_time,age\np0,alpha,0,zzz,70\n");
        match load_patients_csv(f.path(), &schema()) {
            Err(DataError::Parse { row, column, .. }) => {
                assert_eq!(row, 2);
                assert_eq!(column, "diff_time");
            }
            other => panic!("expected Parse error, got {other:?}"),
        }
    }
}
