//! The archive's `.ts` text format.
//!
//! ```text
//! # comment
//! @problemName Toy
//! @dimensions 2
//! @seriesLength 3
//! @equalLength true
//! @classLabel true a b
//! @data
//! 1,2,3:4,5,6:a
//! ```
//!
//! Directive names are case-insensitive. `@timeStamps`, `@missing` and
//! `@univariate` are read but only `false`/consistent values are accepted.

use std::fmt::Write as _;
use std::path::Path;

use super::TimeSeriesDataset;
use crate::error::{Error, Result};

#[derive(Default)]
struct Header {
    name: Option<String>,
    dimensions: Option<usize>,
    length: Option<usize>,
    labels: Option<Vec<String>>,
}

fn parse_bool(line: usize, key: &str, value: Option<&str>) -> Result<bool> {
    match value.map(str::to_ascii_lowercase).as_deref() {
        Some("true") => Ok(true),
        Some("false") => Ok(false),
        _ => Err(Error::parse(line, format!("@{key} expects true or false"))),
    }
}

fn parse_count(line: usize, key: &str, value: Option<&str>) -> Result<usize> {
    value
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&v| v > 0)
        .ok_or_else(|| Error::parse(line, format!("@{key} expects a positive integer")))
}

fn directive(header: &mut Header, line: usize, text: &str) -> Result<()> {
    let mut parts = text[1..].split_whitespace();
    let key = parts.next().unwrap_or_default();
    let value = parts.next();
    match key.to_ascii_lowercase().as_str() {
        "problemname" => header.name = value.map(str::to_string),
        "dimensions" | "dimension" => header.dimensions = Some(parse_count(line, key, value)?),
        "serieslength" => header.length = Some(parse_count(line, key, value)?),
        "equallength" => {
            if !parse_bool(line, key, value)? {
                return Err(Error::parse(line, "variable-length series are not supported"));
            }
        }
        "timestamps" => {
            if parse_bool(line, key, value)? {
                return Err(Error::parse(line, "timestamped series are not supported"));
            }
        }
        "missing" => {
            parse_bool(line, key, value)?;
        }
        "univariate" => {
            if parse_bool(line, key, value)? {
                match header.dimensions {
                    Some(d) if d != 1 => {
                        return Err(Error::parse(line, format!("@univariate true with @dimensions {d}")))
                    }
                    _ => header.dimensions = Some(1),
                }
            }
        }
        "classlabel" => {
            if !parse_bool(line, key, value)? {
                return Err(Error::parse(
                    line,
                    "unlabeled data is not supported (@classLabel false)",
                ));
            }
            let labels: Vec<String> = parts.map(str::to_string).collect();
            if labels.is_empty() {
                return Err(Error::parse(line, "@classLabel true lists no labels"));
            }
            for (i, l) in labels.iter().enumerate() {
                if labels[..i].contains(l) {
                    return Err(Error::parse(line, format!("duplicate class label {l:?}")));
                }
            }
            header.labels = Some(labels);
        }
        "targetlabel" => return Err(Error::parse(line, "regression targets are not supported")),
        _ => return Err(Error::parse(line, format!("unknown directive @{key}"))),
    }
    Ok(())
}

/// Parses a whole `.ts` document. Every failure names the offending line.
pub fn parse_ts(text: &str) -> Result<TimeSeriesDataset> {
    let text = text.strip_prefix('\u{feff}').unwrap_or(text);
    let mut header = Header::default();
    let mut in_data = false;
    let mut last_line = 0;
    let mut values = Vec::new();
    let mut labels = Vec::new();
    let mut shape: Option<(usize, usize)> = None;

    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        last_line = line;
        let row = raw.trim();
        if row.is_empty() || row.starts_with('#') {
            continue;
        }
        if !in_data {
            if !row.starts_with('@') {
                return Err(Error::parse(line, "data row before @data"));
            }
            if row[1..].trim().eq_ignore_ascii_case("data") {
                if header.labels.is_none() {
                    return Err(Error::parse(line, "@data reached without @classLabel"));
                }
                in_data = true;
            } else {
                directive(&mut header, line, row)?;
            }
            continue;
        }
        if row.starts_with('@') {
            return Err(Error::parse(line, "directive after @data"));
        }

        let fields: Vec<&str> = row.split(':').collect();
        if fields.len() < 2 {
            return Err(Error::parse(line, "row has no class label"));
        }
        let (label, channels) = fields.split_last().expect("len >= 2");
        let m = header.dimensions.unwrap_or(channels.len());
        if channels.len() != m {
            return Err(Error::parse(
                line,
                format!("expected {m} channels, found {}", channels.len()),
            ));
        }
        let class_names = header.labels.as_ref().expect("checked at @data");
        let label = label.trim();
        let y = class_names
            .iter()
            .position(|c| c == label)
            .ok_or_else(|| Error::parse(line, format!("unknown class label {label:?}")))?;

        let mut l = header.length.or(shape.map(|s| s.1));
        for (c, block) in channels.iter().enumerate() {
            let start = values.len();
            for cell in block.split(',') {
                let cell = cell.trim();
                if cell == "?" {
                    return Err(Error::parse(line, format!("missing value in channel {}", c + 1)));
                }
                let v: f64 = cell
                    .parse()
                    .map_err(|_| Error::parse(line, format!("channel {}: bad number {cell:?}", c + 1)))?;
                if !v.is_finite() {
                    return Err(Error::parse(line, format!("channel {}: non-finite value", c + 1)));
                }
                values.push(v);
            }
            let got = values.len() - start;
            match l {
                Some(expected) if expected != got => {
                    return Err(Error::parse(
                        line,
                        format!("channel {} has {got} values, expected {expected}", c + 1),
                    ))
                }
                _ => l = Some(got),
            }
        }
        shape = Some((m, l.expect("at least one channel")));
        labels.push(y);
    }

    if !in_data {
        return Err(Error::parse(last_line + 1, "missing @data section"));
    }
    let Some((m, l)) = shape else {
        return Err(Error::parse(last_line + 1, "no samples after @data"));
    };
    let n = labels.len();
    let name = header.name.unwrap_or_default();
    TimeSeriesDataset::new(name, (n, m, l), values, labels, header.labels.expect("checked"))
}

pub fn read_ts_file(path: impl AsRef<Path>) -> Result<TimeSeriesDataset> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    parse_ts(&text)
}

/// Renders a dataset as `.ts`; values use the shortest round-trip form.
pub fn write_ts(ds: &TimeSeriesDataset) -> Result<String> {
    for name in ds.class_names() {
        if name.is_empty() || name.contains(|c: char| c.is_whitespace() || c == ':' || c == ',') {
            return Err(Error::data(format!("class label {name:?} cannot be written to .ts")));
        }
    }
    let mut out = String::new();
    let name = if ds.name.is_empty() {
        "unnamed"
    } else {
        ds.name.as_str()
    };
    let problem: String = name.split_whitespace().collect::<Vec<_>>().join("_");
    writeln!(out, "@problemName {problem}").unwrap();
    writeln!(out, "@timeStamps false").unwrap();
    writeln!(out, "@missing false").unwrap();
    writeln!(out, "@univariate {}", ds.channels() == 1).unwrap();
    writeln!(out, "@dimensions {}", ds.channels()).unwrap();
    writeln!(out, "@equalLength true").unwrap();
    writeln!(out, "@seriesLength {}", ds.length()).unwrap();
    writeln!(out, "@classLabel true {}", ds.class_names().join(" ")).unwrap();
    writeln!(out, "@data").unwrap();
    for i in 0..ds.len() {
        for c in 0..ds.channels() {
            let cells: Vec<String> = ds.channel(i, c).iter().map(|v| v.to_string()).collect();
            out.push_str(&cells.join(","));
            out.push(':');
        }
        out.push_str(&ds.class_names()[ds.labels()[i]]);
        out.push('\n');
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    const TOY: &str = "# toy fixture\n@problemName Toy\n@dimensions 2\n@seriesLength 3\n@equalLength true\n@classLabel true a b\n@data\n1,2,3:4,5,6:a\n0.5,-1,2e-3:0,0,0:b\n";

    fn line_of(err: Error) -> usize {
        match err {
            Error::Parse { line, .. } => line,
            other => panic!("expected a parse error, got {other}"),
        }
    }

    #[test]
    fn parses_toy() {
        let ds = parse_ts(TOY).unwrap();
        assert_eq!((ds.len(), ds.channels(), ds.length()), (2, 2, 3));
        assert_eq!(ds.labels(), &[0, 1]);
        assert_eq!(ds.channel(0, 1), &[4.0, 5.0, 6.0]);
        assert_eq!(ds.channel(1, 0), &[0.5, -1.0, 0.002]);
        assert_eq!(ds.name, "Toy");
    }

    #[test]
    fn crlf_and_inferred_shape() {
        let text = "@classLabel true x y\r\n@data\r\n1,2:3,4:y\r\n5,6:7,8:x\r\n";
        let ds = parse_ts(text).unwrap();
        assert_eq!((ds.len(), ds.channels(), ds.length()), (2, 2, 2));
        assert_eq!(ds.labels(), &[1, 0]);
    }

    #[test]
    fn located_errors() {
        let extra_channel = TOY.replace("1,2,3:4,5,6:a", "1,2,3:4,5,6:7,8,9:a");
        assert_eq!(line_of(parse_ts(&extra_channel).unwrap_err()), 8);
        let ragged = TOY.replace("4,5,6:a", "4,5:a");
        assert_eq!(line_of(parse_ts(&ragged).unwrap_err()), 8);
        let unknown = TOY.replace(":b\n", ":c\n");
        assert_eq!(line_of(parse_ts(&unknown).unwrap_err()), 9);
        let no_data = TOY.replace("@data\n", "");
        assert!(matches!(parse_ts(&no_data), Err(Error::Parse { .. })));
        let variable = TOY.replace("@equalLength true", "@equalLength false");
        assert_eq!(line_of(parse_ts(&variable).unwrap_err()), 5);
        let missing = TOY.replace("0.5,-1", "?,-1");
        assert_eq!(line_of(parse_ts(&missing).unwrap_err()), 9);
        let garbage = TOY.replace("0.5,-1", "0.5,abc");
        assert_eq!(line_of(parse_ts(&garbage).unwrap_err()), 9);
        assert_eq!(line_of(parse_ts("@data\n").unwrap_err()), 1);
        assert!(matches!(parse_ts(""), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn round_trip_is_exact() {
        let ds = TimeSeriesDataset::new(
            "rt",
            (2, 1, 3),
            vec![0.1, 1.0 / 3.0, -2.5e-300, 7.0, f64::MAX, -0.0],
            vec![1, 0],
            vec!["p".into(), "q".into()],
        )
        .unwrap();
        let back = parse_ts(&write_ts(&ds).unwrap()).unwrap();
        assert_eq!(back, ds);
    }
}
