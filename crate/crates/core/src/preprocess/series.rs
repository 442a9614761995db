use std::path::Path;

use chrono::{NaiveDate, NaiveDateTime};

use super::PreprocessError;

/// Multichannel series with one timestamp per step, stored channel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub timestamps: Vec<String>,
    pub names: Vec<String>,
    pub channels: Vec<Vec<f64>>,
}

impl Series {
    pub fn new(timestamps: Vec<String>, names: Vec<String>, channels: Vec<Vec<f64>>) -> Result<Self, PreprocessError> {
        if channels.is_empty() || names.len() != channels.len() {
            return Err(PreprocessError::Config(format!(
                "{} channel names for {} channels",
                names.len(),
                channels.len()
            )));
        }
        if channels.iter().any(|c| c.len() != timestamps.len()) {
            return Err(PreprocessError::Config(
                "every channel needs one value per timestamp".into(),
            ));
        }
        Ok(Self {
            timestamps,
            names,
            channels,
        })
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }
}

const DATETIME_FORMATS: &[&str] = &[
    "%Y-%m-%d %H:%M:%S",
    "%Y-%m-%dT%H:%M:%S",
    "%Y-%m-%d %H:%M",
    "%Y-%m-%dT%H:%M",
    "%Y/%m/%d %H:%M",
];

/// Accepts integer steps or ISO-8601 dates/datetimes.
pub fn is_valid_timestamp(s: &str) -> bool {
    let s = s.trim();
    s.parse::<i64>().is_ok()
        || NaiveDate::parse_from_str(s, "%Y-%m-%d").is_ok()
        || DATETIME_FORMATS
            .iter()
            .any(|f| NaiveDateTime::parse_from_str(s, f).is_ok())
        || chrono::DateTime::parse_from_rfc3339(s).is_ok()
}

/// Reads a headered CSV whose first column is a timestamp and whose
/// remaining columns are numeric channels.
pub fn load_csv(path: impl AsRef<Path>, delimiter: u8) -> Result<Series, PreprocessError> {
    let file = std::fs::File::open(path.as_ref())?;
    read_csv(file, delimiter)
}

pub fn read_csv<R: std::io::Read>(reader: R, delimiter: u8) -> Result<Series, PreprocessError> {
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .has_headers(true)
        .from_reader(reader);
    let csv_err = |row: usize, column: usize, message: String| PreprocessError::Csv { row, column, message };
    let header = rdr.headers().map_err(|e| csv_err(1, 1, e.to_string()))?.clone();
    if header.len() < 2 {
        return Err(csv_err(1, 1, "need a timestamp column and at least one channel".into()));
    }
    let names: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    let mut timestamps = Vec::new();
    let mut channels = vec![Vec::new(); names.len()];
    for (i, rec) in rdr.records().enumerate() {
        // header is row 1
        let row = i + 2;
        let rec = rec.map_err(|e| csv_err(row, 1, e.to_string()))?;
        if rec.len() != header.len() {
            return Err(csv_err(
                row,
                rec.len().min(header.len()) + 1,
                format!("expected {} fields, found {}", header.len(), rec.len()),
            ));
        }
        let ts = rec[0].trim();
        if !is_valid_timestamp(ts) {
            return Err(csv_err(row, 1, format!("unparseable timestamp {ts:?}")));
        }
        timestamps.push(ts.to_string());
        for (c, field) in rec.iter().skip(1).enumerate() {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| csv_err(row, c + 2, format!("non-numeric value {field:?}")))?;
            if !v.is_finite() {
                return Err(csv_err(row, c + 2, format!("non-finite value {field:?}")));
            }
            channels[c].push(v);
        }
    }
    if timestamps.is_empty() {
        return Err(csv_err(2, 1, "no data rows".into()));
    }
    Series::new(timestamps, names, channels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reads_iso_and_integer_timestamps() {
        let text = "date,a,b\n2016-07-01 00:00:00,1.5,2\n2016-07-01 01:00:00,3,4\n";
        let s = read_csv(text.as_bytes(), b',').unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s.names, vec!["a", "b"]);
        assert_eq!(s.channels[0], vec![1.5, 3.0]);
        let text = "t;x\n0;1\n1;2\n";
        let s = read_csv(text.as_bytes(), b';').unwrap();
        assert_eq!(s.timestamps, vec!["0", "1"]);
    }

    #[test]
    fn errors_name_row_and_column() {
        let text = "date,a,b\n2016-07-01,1,2\n2016-07-02,1,oops\n";
        match read_csv(text.as_bytes(), b',') {
            Err(PreprocessError::Csv { row, column, .. }) => assert_eq!((row, column), (3, 3)),
            other => panic!("{other:?}"),
        }
        let text = "date,a\nyesterday,1\n";
        match read_csv(text.as_bytes(), b',') {
            Err(PreprocessError::Csv { row, column, .. }) => assert_eq!((row, column), (2, 1)),
            other => panic!("{other:?}"),
        }
    }
}
