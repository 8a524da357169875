//! Panel CSV reading and writing.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use dyngam_core::{validate_dataset, Dims, Panel, Record};

use crate::CliError;

pub const PANEL_HEADER: [&str; 8] = ["region", "cause", "age_group", "gender", "month", "count", "offset", "stringency"];

fn parse_field<T: std::str::FromStr>(raw: &str, name: &str, line: usize) -> Result<T, CliError> {
    raw.trim().parse().map_err(|_| CliError::Parse {
        line,
        message: format!("`{}` is not a valid {name}", raw.trim()),
    })
}

/// Parses panel CSV text. Line numbers in errors are 1-based and count the header.
pub fn parse_panel_csv<R: Read>(reader: R) -> Result<Panel, CliError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).flexible(true).from_reader(reader);
    let header = rdr.headers().map_err(|e| csv_error(e, 1))?.clone();
    let cols: Vec<&str> = header.iter().map(|h| h.trim_start_matches('\u{feff}')).collect();
    if cols != PANEL_HEADER {
        return Err(CliError::Parse {
            line: 1,
            message: format!("header must be `{}`", PANEL_HEADER.join(",")),
        });
    }
    let mut records = Vec::new();
    let mut max = [0usize; 5];
    for row in rdr.records() {
        let row = row.map_err(|e| csv_error(e, 0))?;
        let line_no = row.position().map_or(0, |p| p.line() as usize);
        if row.len() == 1 && row[0].is_empty() {
            continue;
        }
        if row.len() != PANEL_HEADER.len() {
            return Err(CliError::Parse {
                line: line_no,
                message: format!("expected {} fields, found {}", PANEL_HEADER.len(), row.len()),
            });
        }
        let rec: Record<f64> = Record {
            region: parse_field(&row[0], "region code", line_no)?,
            cause: parse_field(&row[1], "cause code", line_no)?,
            age: parse_field(&row[2], "age-group code", line_no)?,
            gender: parse_field(&row[3], "gender code", line_no)?,
            month: parse_field(&row[4], "month index", line_no)?,
            count: parse_field(&row[5], "non-negative integer count", line_no)?,
            offset: parse_field(&row[6], "offset", line_no)?,
            stringency: parse_field(&row[7], "stringency", line_no)?,
        };
        if !(rec.offset.is_finite() && rec.stringency.is_finite()) {
            return Err(CliError::Parse {
                line: line_no,
                message: "offset and stringency must be finite".into(),
            });
        }
        for (m, v) in max.iter_mut().zip([rec.region, rec.cause, rec.age, rec.gender, rec.month]) {
            *m = (*m).max(v);
        }
        records.push(rec);
    }
    if records.is_empty() {
        return Err(CliError::Parse { line: 2, message: "no data rows".into() });
    }
    let dims = Dims::new(max[0] + 1, max[1] + 1, max[2] + 1, max[3] + 1, max[4] + 1);
    Ok(validate_dataset(records, dims)?)
}

fn csv_error(e: csv::Error, fallback: usize) -> CliError {
    let line = e.position().map_or(fallback, |p| p.line() as usize);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => CliError::Stream(io),
        other => CliError::Parse {
            line,
            message: format!("{other:?}"),
        },
    }
}

pub fn read_panel_csv(path: &Path) -> Result<Panel, CliError> {
    parse_panel_csv(File::open(path).map_err(|e| CliError::io(path, e))?)
}

pub fn write_panel_csv<W: Write>(data: &Panel, out: W) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(PANEL_HEADER).map_err(|e| csv_error(e, 0))?;
    for r in data.records() {
        w.write_record([
            r.region.to_string(),
            r.cause.to_string(),
            r.age.to_string(),
            r.gender.to_string(),
            r.month.to_string(),
            r.count.to_string(),
            r.offset.to_string(),
            r.stringency.to_string(),
        ])
        .map_err(|e| csv_error(e, 0))?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_panel_csv(data: &Panel, path: &Path) -> Result<(), CliError> {
    let f = File::create(path).map_err(|e| CliError::io(path, e))?;
    let mut w = std::io::BufWriter::new(f);
    write_panel_csv(data, &mut w)?;
    w.flush().map_err(|e| CliError::io(path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_csv(eol: &str) -> String {
        let mut s = PANEL_HEADER.join(",") + eol;
        for month in 0..3 {
            for region in 0..2 {
                for cause in 0..2 {
                    for age in 0..2 {
                        for gender in 0..2 {
                            s += &format!(
                                "{region},{cause},{age},{gender},{month},{},{},{}{eol}",
                                (region + cause + age + month) % 5,
                                100.0 + age as f64,
                                10 * (region + month)
                            );
                        }
                    }
                }
            }
        }
        s
    }

    #[test]
    fn toy_file_gives_expected_dims() {
        let data = parse_panel_csv(toy_csv("\n").as_bytes()).unwrap();
        assert_eq!(data.records().len(), 48);
        assert_eq!(data.dims(), Dims::new(2, 2, 2, 2, 3));
    }

    #[test]
    fn crlf_matches_lf() {
        let a = parse_panel_csv(toy_csv("\n").as_bytes()).unwrap();
        let b = parse_panel_csv(toy_csv("\r\n").as_bytes()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn negative_count_names_the_line() {
        let mut text = toy_csv("\n");
        text = text.replacen("0,0,0,0,0,0,", "0,0,0,0,0,-1,", 1);
        match parse_panel_csv(text.as_bytes()) {
            Err(CliError::Parse { line, message }) => {
                assert_eq!(line, 2);
                assert!(message.contains("-1"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bad_header_and_short_rows() {
        assert!(matches!(parse_panel_csv("a,b\n".as_bytes()), Err(CliError::Parse { line: 1, .. })));
        let text = PANEL_HEADER.join(",") + "\n0,0,0,0,0,1,1.0\n";
        assert!(matches!(parse_panel_csv(text.as_bytes()), Err(CliError::Parse { line: 2, .. })));
    }

    #[test]
    fn missing_cell_is_a_validation_error() {
        let text = toy_csv("\n");
        let cut: Vec<&str> = text.lines().collect();
        let shorter = cut[..cut.len() - 1].join("\n");
        assert!(matches!(parse_panel_csv(shorter.as_bytes()), Err(CliError::Validation(_))));
    }

    #[test]
    fn write_then_read_round_trips() {
        let data = parse_panel_csv(toy_csv("\n").as_bytes()).unwrap();
        let mut buf = Vec::new();
        write_panel_csv(&data, &mut buf).unwrap();
        assert_eq!(parse_panel_csv(buf.as_slice()).unwrap(), data);
    }
}
