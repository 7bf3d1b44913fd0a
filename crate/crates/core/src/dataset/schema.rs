//! Column-schema driven parsing of tab-separated impression logs.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Read, Seek, SeekFrom};
use std::path::Path;

use flate2::read::GzDecoder;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{DatasetError, FeatureMap, ImpressionEvent};

pub const ROLE_CLICK: &str = "click";
pub const ROLE_PRICE: &str = "price";
pub const ROLE_HOUR: &str = "hour";
pub const ROLE_TIMESTAMP: &str = "timestamp";
pub const ROLE_CAMPAIGN: &str = "campaign";

const ROLES: [&str; 5] = [ROLE_CLICK, ROLE_PRICE, ROLE_HOUR, ROLE_TIMESTAMP, ROLE_CAMPAIGN];

/// Maps column index to either a reserved role (`click`, `price`, `hour`,
/// `timestamp`, `campaign`) or a categorical feature name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnSchema {
    pub column_count: usize,
    pub columns: BTreeMap<usize, String>,
}

impl ColumnSchema {
    /// Layout of the widely used preprocessed iPinYou logs: 27 tab-separated
    /// columns starting `click weekday hour bidid timestamp ...` with the
    /// clearing price ("payprice") at index 23 and the advertiser at 25.
    pub fn default_ipinyou() -> Self {
        let named: [(usize, &str); 21] = [
            (0, ROLE_CLICK),
            (1, "weekday"),
            (2, ROLE_HOUR),
            (4, ROLE_TIMESTAMP),
            (7, "useragent"),
            (9, "region"),
            (10, "city"),
            (11, "adexchange"),
            (12, "domain"),
            (15, "slotid"),
            (16, "slotwidth"),
            (17, "slotheight"),
            (18, "slotvisibility"),
            (19, "slotformat"),
            (20, "slotprice"),
            (21, "creative"),
            (23, ROLE_PRICE),
            (24, "keypage"),
            (25, ROLE_CAMPAIGN),
            (26, "usertag"),
            (8, "ip"),
        ];
        let columns = named.iter().map(|&(i, n)| (i, n.to_string())).collect();
        ColumnSchema { column_count: 27, columns }
    }

    pub fn from_json_file(path: &Path) -> Result<Self, DatasetError> {
        let text = std::fs::read_to_string(path).map_err(|e| DatasetError::io(path, e))?;
        let schema: ColumnSchema = serde_json::from_str(&text)?;
        schema.validate()?;
        Ok(schema)
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        let bad = |msg: String| Err(DatasetError::BadSchema(msg));
        let count_role = |role: &str| self.columns.values().filter(|n| n.as_str() == role).count();
        if count_role(ROLE_CLICK) != 1 {
            return bad("need exactly one click column".into());
        }
        if count_role(ROLE_PRICE) != 1 {
            return bad("need exactly one price column".into());
        }
        if count_role(ROLE_HOUR) > 1 || count_role(ROLE_TIMESTAMP) > 1 || count_role(ROLE_CAMPAIGN) > 1 {
            return bad("duplicate role column".into());
        }
        if count_role(ROLE_HOUR) == 0 && count_role(ROLE_TIMESTAMP) == 0 {
            return bad("need an hour or timestamp column".into());
        }
        for (&idx, name) in &self.columns {
            if idx >= self.column_count {
                return bad(format!("column {idx} ({name}) outside column_count {}", self.column_count));
            }
            if name.is_empty() {
                return bad(format!("column {idx} has an empty name"));
            }
        }
        let mut feature_names: Vec<&str> = self
            .columns
            .values()
            .map(String::as_str)
            .filter(|n| !ROLES.contains(n))
            .collect();
        feature_names.sort_unstable();
        feature_names.dedup();
        let feature_cols = self.columns.values().filter(|n| !ROLES.contains(&n.as_str())).count();
        if feature_names.len() != feature_cols {
            return bad("duplicate feature name".into());
        }
        Ok(())
    }

    fn role_col(&self, role: &str) -> Option<usize> {
        self.columns.iter().find(|(_, n)| n.as_str() == role).map(|(&i, _)| i)
    }

    pub fn click_col(&self) -> usize {
        self.role_col(ROLE_CLICK).expect("validated schema")
    }

    pub fn price_col(&self) -> usize {
        self.role_col(ROLE_PRICE).expect("validated schema")
    }

    pub fn hour_col(&self) -> Option<usize> {
        self.role_col(ROLE_HOUR)
    }

    pub fn timestamp_col(&self) -> Option<usize> {
        self.role_col(ROLE_TIMESTAMP)
    }

    pub fn campaign_col(&self) -> Option<usize> {
        self.role_col(ROLE_CAMPAIGN)
    }

    /// Feature columns in ascending column order.
    pub fn feature_cols(&self) -> Vec<(usize, &str)> {
        self.columns
            .iter()
            .filter(|(_, n)| !ROLES.contains(&n.as_str()))
            .map(|(&i, n)| (i, n.as_str()))
            .collect()
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum LineError {
    #[error("expected at least {expected} tab-separated fields, got {got}")]
    FieldCount { expected: usize, got: usize },
    #[error("column {col} ({what}): bad value {value:?}")]
    BadValue { col: usize, what: &'static str, value: String },
    #[error("bad json: {0}")]
    BadJson(String),
}

fn bad(col: usize, what: &'static str, value: &str) -> LineError {
    LineError::BadValue { col, what, value: value.to_string() }
}

/// Days since 1970-01-01 for a civil date; used to order log days before
/// rebasing them to 0.
fn days_from_civil(y: i64, m: u64, d: u64) -> i64 {
    let y = if m <= 2 { y - 1 } else { y };
    let era = if y >= 0 { y } else { y - 399 } / 400;
    let yoe = (y - era * 400) as u64;
    let mp = (m + 9) % 12;
    let doy = (153 * mp + 2) / 5 + d - 1;
    let doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
    era * 146097 + doe as i64 - 719468
}

/// Parses one tab-separated log line. With a timestamp column, `day_index`
/// holds a raw day ordinal that [`rebase_day_indices`] later shifts to 0;
/// with only an hour column every line lands on day 0.
pub fn parse_log_line(
    line: &str,
    schema: &ColumnSchema,
    fallback_campaign: &str,
) -> Result<ImpressionEvent, LineError> {
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() < schema.column_count {
        return Err(LineError::FieldCount { expected: schema.column_count, got: fields.len() });
    }

    let click_col = schema.click_col();
    let click: u8 = fields[click_col].trim().parse().map_err(|_| bad(click_col, "click", fields[click_col]))?;
    if click > 1 {
        return Err(bad(click_col, "click", fields[click_col]));
    }

    let price_col = schema.price_col();
    let market_price: u64 =
        fields[price_col].trim().parse().map_err(|_| bad(price_col, "price", fields[price_col]))?;

    let ts = schema.timestamp_col().map(|col| (col, fields[col].trim()));
    let hour: u8 = match schema.hour_col() {
        Some(col) => {
            let h: u8 = fields[col].trim().parse().map_err(|_| bad(col, "hour", fields[col]))?;
            if h > 23 {
                return Err(bad(col, "hour", fields[col]));
            }
            h
        }
        None => {
            let (col, ts) = ts.expect("validated schema has hour or timestamp");
            let h: u8 = ts
                .get(8..10)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| bad(col, "timestamp", ts))?;
            if h > 23 {
                return Err(bad(col, "timestamp", ts));
            }
            h
        }
    };

    let day_index = match ts {
        Some((col, ts)) => {
            let err = || bad(col, "timestamp", ts);
            if ts.len() < 10 || !ts.as_bytes()[..10].iter().all(u8::is_ascii_digit) {
                return Err(err());
            }
            let y: i64 = ts[0..4].parse().map_err(|_| err())?;
            let m: u64 = ts[4..6].parse().map_err(|_| err())?;
            let d: u64 = ts[6..8].parse().map_err(|_| err())?;
            if !(1..=12).contains(&m) || !(1..=31).contains(&d) {
                return Err(err());
            }
            let days = days_from_civil(y, m, d);
            if days < 0 {
                return Err(err());
            }
            days as usize
        }
        None => 0,
    };

    let campaign_id = match schema.campaign_col() {
        Some(col) => fields[col].trim().to_string(),
        None => fallback_campaign.to_string(),
    };

    let mut features = FeatureMap::new();
    for (col, name) in schema.feature_cols() {
        features.insert(name.to_string(), fields[col].trim().to_string());
    }

    Ok(ImpressionEvent { campaign_id, day_index, hour, market_price, click, features })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParseMode {
    /// First malformed line aborts the parse.
    Strict,
    /// Malformed lines are counted and skipped.
    SkipMalformed,
}

#[derive(Debug, Clone, Default)]
pub struct ParseStats {
    pub lines: usize,
    pub parsed: usize,
    pub skipped: usize,
    /// First few malformed lines with their 1-based line numbers.
    pub first_errors: Vec<(usize, LineError)>,
}

const KEPT_ERRORS: usize = 8;

/// Opens a file, transparently decompressing gzip detected by magic bytes.
pub fn open_maybe_gzip(path: &Path) -> Result<Box<dyn Read>, DatasetError> {
    let mut file = File::open(path).map_err(|e| DatasetError::io(path, e))?;
    let mut magic = [0u8; 2];
    let n = file.read(&mut magic).map_err(|e| DatasetError::io(path, e))?;
    file.seek(SeekFrom::Start(0)).map_err(|e| DatasetError::io(path, e))?;
    if n == 2 && magic == [0x1f, 0x8b] {
        Ok(Box::new(GzDecoder::new(file)))
    } else {
        Ok(Box::new(file))
    }
}

/// Parses one log file. Day indices are left raw; use [`parse_log_files`] or
/// [`rebase_day_indices`] to normalize them.
pub fn parse_log_file(
    path: &Path,
    schema: &ColumnSchema,
    fallback_campaign: &str,
    mode: ParseMode,
) -> Result<(Vec<ImpressionEvent>, ParseStats), DatasetError> {
    schema.validate()?;
    let reader = BufReader::new(open_maybe_gzip(path)?);
    let mut events = Vec::new();
    let mut stats = ParseStats::default();
    for (no, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| DatasetError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        stats.lines += 1;
        match parse_log_line(&line, schema, fallback_campaign) {
            Ok(ev) => {
                events.push(ev);
                stats.parsed += 1;
            }
            Err(kind) => match mode {
                ParseMode::Strict => {
                    return Err(DatasetError::MalformedLine { line: no + 1, kind });
                }
                ParseMode::SkipMalformed => {
                    stats.skipped += 1;
                    if stats.first_errors.len() < KEPT_ERRORS {
                        stats.first_errors.push((no + 1, kind));
                    }
                }
            },
        }
    }
    Ok((events, stats))
}

/// Parses and merges several log files, then rebases day indices so the
/// earliest day becomes 0.
pub fn parse_log_files(
    paths: &[impl AsRef<Path>],
    schema: &ColumnSchema,
    fallback_campaign: &str,
    mode: ParseMode,
) -> Result<(Vec<ImpressionEvent>, ParseStats), DatasetError> {
    let mut events = Vec::new();
    let mut stats = ParseStats::default();
    for path in paths {
        let (mut evs, s) = parse_log_file(path.as_ref(), schema, fallback_campaign, mode)?;
        events.append(&mut evs);
        stats.lines += s.lines;
        stats.parsed += s.parsed;
        stats.skipped += s.skipped;
        for e in s.first_errors {
            if stats.first_errors.len() < KEPT_ERRORS {
                stats.first_errors.push(e);
            }
        }
    }
    rebase_day_indices(&mut events);
    Ok((events, stats))
}

/// Maps raw day ordinals to dense 0-based indices in chronological order.
pub fn rebase_day_indices(events: &mut [ImpressionEvent]) {
    let mut days: Vec<usize> = events.iter().map(|e| e.day_index).collect();
    days.sort_unstable();
    days.dedup();
    for ev in events {
        ev.day_index = days.binary_search(&ev.day_index).expect("day present");
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_schema() -> ColumnSchema {
        let columns = [
            (0, ROLE_CLICK.to_string()),
            (1, "weekday".to_string()),
            (2, ROLE_HOUR.to_string()),
            (3, "region".to_string()),
            (4, ROLE_PRICE.to_string()),
        ]
        .into_iter()
        .collect();
        ColumnSchema { column_count: 5, columns }
    }

    #[test]
    fn parses_roles_and_features() {
        let schema = tiny_schema();
        schema.validate().unwrap();
        let ev = parse_log_line("1\t4\t13\tnorth\t230", &schema, "c7").unwrap();
        assert_eq!(ev.click, 1);
        assert_eq!(ev.hour, 13);
        assert_eq!(ev.market_price, 230);
        assert_eq!(ev.day_index, 0);
        assert_eq!(ev.campaign_id, "c7");
        assert_eq!(ev.features.get("weekday").unwrap(), "4");
        assert_eq!(ev.features.get("region").unwrap(), "north");
        assert_eq!(ev.features.len(), 2);
    }

    #[test]
    fn rejects_malformed_fields() {
        let schema = tiny_schema();
        assert_eq!(
            parse_log_line("1\t4\t13\tnorth", &schema, "c").unwrap_err(),
            LineError::FieldCount { expected: 5, got: 4 }
        );
        assert!(matches!(
            parse_log_line("2\t4\t13\tn\t10", &schema, "c").unwrap_err(),
            LineError::BadValue { col: 0, .. }
        ));
        assert!(matches!(
            parse_log_line("1\t4\t24\tn\t10", &schema, "c").unwrap_err(),
            LineError::BadValue { col: 2, .. }
        ));
        assert!(matches!(
            parse_log_line("1\t4\t3\tn\t-9", &schema, "c").unwrap_err(),
            LineError::BadValue { col: 4, .. }
        ));
    }

    #[test]
    fn timestamp_gives_hour_and_day() {
        let columns = [
            (0, ROLE_CLICK.to_string()),
            (1, ROLE_TIMESTAMP.to_string()),
            (2, ROLE_PRICE.to_string()),
        ]
        .into_iter()
        .collect();
        let schema = ColumnSchema { column_count: 3, columns };
        schema.validate().unwrap();
        let a = parse_log_line("0\t20130606155509000\t77", &schema, "c").unwrap();
        let b = parse_log_line("0\t20130607005509000\t77", &schema, "c").unwrap();
        assert_eq!(a.hour, 15);
        assert_eq!(b.hour, 0);
        assert_eq!(b.day_index, a.day_index + 1);
        let mut events = vec![b, a];
        rebase_day_indices(&mut events);
        assert_eq!(events[0].day_index, 1);
        assert_eq!(events[1].day_index, 0);
    }

    #[test]
    fn default_schema_is_valid() {
        ColumnSchema::default_ipinyou().validate().unwrap();
    }

    #[test]
    fn schema_validation_catches_misconfigurations() {
        let mut schema = tiny_schema();
        schema.columns.insert(4, ROLE_CLICK.to_string());
        assert!(schema.validate().is_err());
        let mut schema = tiny_schema();
        schema.columns.remove(&2);
        assert!(schema.validate().is_err());
        let mut schema = tiny_schema();
        schema.columns.insert(3, "weekday".to_string());
        assert!(schema.validate().is_err());
        let mut schema = tiny_schema();
        schema.column_count = 3;
        assert!(schema.validate().is_err());
    }

    #[test]
    fn skip_mode_counts_and_strict_aborts() {
        let dir = std::env::temp_dir().join(format!("schema-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("log.txt");
        std::fs::write(&path, "1\t4\t13\tnorth\t230\nbroken line\n0\t5\t2\tsouth\t9\n").unwrap();
        let schema = tiny_schema();
        let (events, stats) =
            parse_log_file(&path, &schema, "c", ParseMode::SkipMalformed).unwrap();
        assert_eq!(events.len(), 2);
        assert_eq!((stats.lines, stats.parsed, stats.skipped), (3, 2, 1));
        assert_eq!(stats.first_errors[0].0, 2);
        match parse_log_file(&path, &schema, "c", ParseMode::Strict) {
            Err(DatasetError::MalformedLine { line: 2, .. }) => {}
            other => panic!("unexpected: {other:?}"),
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn gzip_input_is_transparent() {
        use flate2::write::GzEncoder;
        use flate2::Compression;
        use std::io::Write;

        let dir = std::env::temp_dir().join(format!("schema-gz-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("log.txt.gz");
        let file = File::create(&path).unwrap();
        let mut gz = GzEncoder::new(file, Compression::default());
        gz.write_all(b"1\t4\t13\tnorth\t230\n").unwrap();
        gz.finish().unwrap();
        let (events, stats) =
            parse_log_file(&path, &tiny_schema(), "c", ParseMode::Strict).unwrap();
        assert_eq!(events.len(), 1);
        assert_eq!(stats.parsed, 1);
        assert_eq!(events[0].market_price, 230);
        std::fs::remove_dir_all(&dir).ok();
    }
}
