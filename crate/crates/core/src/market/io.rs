//! Market interchange.
//!
//! Dense CSV:
//!
//! ```text
//! #dense N M
//! v_00,...,v_0(M-1)
//! ...                      (N rows)
//! #supplies
//! s_0,...,s_(M-1)
//! #budgets                 (optional, default all 1)
//! B_0,...,B_(N-1)
//! #groups                  (optional, default singletons)
//! g_0,...,g_(M-1)          (integer group id per item)
//! ```
//!
//! Sparse CSV starts with the header `buyer,item,value` followed by 0-based
//! triplets; omitted pairs are 0. The same trailer sections follow. The
//! number of items is the length of `#supplies`, the number of buyers is the
//! larger of the highest buyer index + 1 and the length of `#budgets`.
//!
//! Section values may sit on the marker line after a comma or on the next
//! line. Blank lines are ignored.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::Market;
use crate::error::{Error, Result};

struct Lines<'a> {
    path: &'a Path,
    rows: Vec<(usize, &'a str)>,
    pos: usize,
}

impl<'a> Lines<'a> {
    fn new(path: &'a Path, text: &'a str) -> Self {
        let rows = text
            .lines()
            .enumerate()
            .map(|(k, l)| (k + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty())
            .collect();
        Lines { path, rows, pos: 0 }
    }

    fn err(&self, line: usize, msg: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.to_path_buf(),
            line,
            msg: msg.into(),
        }
    }

    fn peek(&self) -> Option<(usize, &'a str)> {
        self.rows.get(self.pos).copied()
    }

    fn next(&mut self) -> Option<(usize, &'a str)> {
        let r = self.peek();
        self.pos += 1;
        r
    }

    fn last_line(&self) -> usize {
        self.rows.last().map_or(1, |r| r.0)
    }
}

fn parse_values(lines: &Lines<'_>, line: usize, text: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse::<f64>()
                .map_err(|_| lines.err(line, format!("non-numeric value '{t}'")))
        })
        .collect()
}

fn parse_index(lines: &Lines<'_>, line: usize, t: &str, what: &str) -> Result<usize> {
    t.trim().parse::<usize>().map_err(|_| {
        lines.err(
            line,
            format!("{what} '{}' is not a nonnegative integer", t.trim()),
        )
    })
}

fn check_nonneg(lines: &Lines<'_>, line: usize, vals: &[f64]) -> Result<()> {
    if let Some(v) = vals.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
        return Err(lines.err(
            line,
            format!("invalid valuation {v}: must be finite and >= 0"),
        ));
    }
    Ok(())
}

/// Reads a section body: values on the marker line (after the first comma),
/// otherwise the following line.
fn section_values(
    lines: &mut Lines<'_>,
    marker_line: usize,
    marker: &str,
) -> Result<(usize, Vec<f64>)> {
    if let Some((_, rest)) = marker.split_once(',') {
        let vals = parse_values(lines, marker_line, rest)?;
        if !vals.is_empty() {
            return Ok((marker_line, vals));
        }
    }
    match lines.next() {
        Some((line, text)) if !text.starts_with('#') => {
            Ok((line, parse_values(lines, line, text)?))
        }
        _ => Err(lines.err(marker_line, "section marker without values")),
    }
}

#[derive(Default)]
struct Trailer {
    supplies: Option<Vec<f64>>,
    budgets: Option<Vec<f64>>,
    groups: Option<(usize, Vec<f64>)>,
}

fn read_trailer(lines: &mut Lines<'_>) -> Result<Trailer> {
    let mut t = Trailer::default();
    while let Some((line, text)) = lines.next() {
        let tag = text.split(',').next().unwrap_or("").trim();
        match tag {
            "#supplies" => t.supplies = Some(section_values(lines, line, text)?.1),
            "#budgets" => t.budgets = Some(section_values(lines, line, text)?.1),
            "#groups" => t.groups = Some(section_values(lines, line, text)?),
            _ => return Err(lines.err(line, format!("unexpected line '{text}'"))),
        }
    }
    Ok(t)
}

fn groups_from_ids(
    lines: &Lines<'_>,
    line: usize,
    ids: &[f64],
    m: usize,
) -> Result<Vec<Vec<usize>>> {
    if ids.len() != m {
        return Err(lines.err(line, format!("#groups has {} ids, expected {m}", ids.len())));
    }
    let mut by_id: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
    for (j, &g) in ids.iter().enumerate() {
        if g.fract() != 0.0 || !g.is_finite() {
            return Err(lines.err(line, format!("group id {g} is not an integer")));
        }
        by_id.entry(g as i64).or_default().push(j);
    }
    Ok(by_id.into_values().collect())
}

fn assemble(lines: &Lines<'_>, valuations: Array2<f64>, trailer: Trailer) -> Result<Market> {
    let (n, m) = valuations.dim();
    let end = lines.last_line();
    let supplies = trailer
        .supplies
        .ok_or_else(|| lines.err(end, "missing #supplies section"))?;
    if supplies.len() < m {
        return Err(lines.err(end, format!("missing supply for item {}", supplies.len())));
    }
    if supplies.len() > m {
        return Err(lines.err(
            end,
            format!("#supplies has {} values, expected {m}", supplies.len()),
        ));
    }
    let budgets = match trailer.budgets {
        Some(b) if b.len() != n => {
            return Err(lines.err(
                end,
                format!("#budgets has {} values, expected {n}", b.len()),
            ))
        }
        Some(b) => b,
        None => vec![1.0; n],
    };
    let groups = match trailer.groups {
        Some((line, ids)) => groups_from_ids(lines, line, &ids, m)?,
        None => super::singleton_groups(m),
    };
    let market = Market {
        valuations,
        supplies: Array1::from(supplies),
        budgets: Array1::from(budgets),
        groups,
    };
    market.ensure_valid()?;
    Ok(market)
}

pub fn parse_csv(path: &Path, text: &str) -> Result<Market> {
    let mut lines = Lines::new(path, text);
    let (line, header) = lines.next().ok_or_else(|| lines.err(1, "empty file"))?;

    if let Some(dims) = header.strip_prefix("#dense") {
        let dims: Vec<&str> = dims.split([' ', ',']).filter(|t| !t.is_empty()).collect();
        if dims.len() != 2 {
            return Err(lines.err(line, "expected '#dense N M'"));
        }
        let n = parse_index(&lines, line, dims[0], "N")?;
        let m = parse_index(&lines, line, dims[1], "M")?;
        let mut v = Array2::zeros((n, m));
        for i in 0..n {
            let (line, text) = match lines.next() {
                Some((l, t)) if !t.starts_with('#') => (l, t),
                Some((l, _)) => return Err(lines.err(l, format!("expected valuation row {i}"))),
                None => {
                    return Err(lines.err(lines.last_line(), format!("missing valuation row {i}")))
                }
            };
            let vals = parse_values(&lines, line, text)?;
            if vals.len() != m {
                return Err(lines.err(
                    line,
                    format!("malformed row: {} values, expected {m}", vals.len()),
                ));
            }
            check_nonneg(&lines, line, &vals)?;
            for (j, x) in vals.into_iter().enumerate() {
                v[[i, j]] = x;
            }
        }
        let trailer = read_trailer(&mut lines)?;
        return assemble(&lines, v, trailer);
    }

    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    if cols != ["buyer", "item", "value"] {
        return Err(lines.err(line, "expected '#dense N M' or 'buyer,item,value' header"));
    }
    let mut triplets = Vec::new();
    while let Some((line, text)) = lines.peek() {
        if text.starts_with('#') {
            break;
        }
        lines.next();
        let parts: Vec<&str> = text.split(',').collect();
        if parts.len() != 3 {
            return Err(lines.err(line, "malformed row: expected buyer,item,value"));
        }
        let i = parse_index(&lines, line, parts[0], "buyer")?;
        let j = parse_index(&lines, line, parts[1], "item")?;
        let x = parse_values(&lines, line, parts[2])?;
        check_nonneg(&lines, line, &x)?;
        triplets.push((line, i, j, x[0]));
    }
    let trailer = read_trailer(&mut lines)?;
    let m = trailer.supplies.as_ref().map_or(0, Vec::len);
    let n = triplets
        .iter()
        .map(|t| t.1 + 1)
        .max()
        .unwrap_or(0)
        .max(trailer.budgets.as_ref().map_or(0, Vec::len));
    let mut v = Array2::zeros((n, m));
    for (line, i, j, x) in triplets {
        if j >= m {
            return Err(lines.err(line, format!("missing supply for item {j}")));
        }
        v[[i, j]] = x;
    }
    assemble(&lines, v, trailer)
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn ingest_csv(path: impl AsRef<Path>) -> Result<Market> {
    let path = path.as_ref();
    parse_csv(path, &read_text(path)?)
}

fn join(vals: impl IntoIterator<Item = f64>) -> String {
    vals.into_iter()
        .map(|v| format!("{v}"))
        .collect::<Vec<_>>()
        .join(",")
}

/// Dense layout with every trailer section written out.
pub fn to_csv_string(market: &Market) -> String {
    let (n, m) = market.valuations.dim();
    let mut out = String::new();
    let _ = writeln!(out, "#dense {n} {m}");
    for row in market.valuations.rows() {
        let _ = writeln!(out, "{}", join(row.iter().copied()));
    }
    let _ = writeln!(out, "#supplies\n{}", join(market.supplies.iter().copied()));
    let _ = writeln!(out, "#budgets\n{}", join(market.budgets.iter().copied()));
    let ids = market.group_of();
    let _ = writeln!(
        out,
        "#groups\n{}",
        ids.iter()
            .map(|g| g.to_string())
            .collect::<Vec<_>>()
            .join(",")
    );
    out
}

pub fn export_csv(market: &Market, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, to_csv_string(market)).map_err(|e| Error::io(path, e))
}

#[derive(Serialize, Deserialize)]
struct MarketJson {
    valuations: Vec<Vec<f64>>,
    supplies: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    budgets: Option<Vec<f64>>,
    /// Group id per item.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    groups: Option<Vec<i64>>,
}

pub fn to_json_string(market: &Market) -> Result<String> {
    let doc = MarketJson {
        valuations: market
            .valuations
            .rows()
            .into_iter()
            .map(|r| r.to_vec())
            .collect(),
        supplies: market.supplies.to_vec(),
        budgets: Some(market.budgets.to_vec()),
        groups: Some(market.group_of().into_iter().map(|g| g as i64).collect()),
    };
    Ok(serde_json::to_string_pretty(&doc)?)
}

pub fn from_json_str(text: &str) -> Result<Market> {
    let doc: MarketJson = serde_json::from_str(text)?;
    let n = doc.valuations.len();
    let m = doc.supplies.len();
    let mut v = Array2::zeros((n, m));
    for (i, row) in doc.valuations.iter().enumerate() {
        if row.len() != m {
            return Err(Error::InvalidArgument(format!(
                "valuation row {i} has {} entries, expected {m}",
                row.len()
            )));
        }
        for (j, &x) in row.iter().enumerate() {
            v[[i, j]] = x;
        }
    }
    let groups = match doc.groups {
        Some(ids) if ids.len() != m => {
            return Err(Error::InvalidArgument(format!(
                "groups has {} ids, expected {m}",
                ids.len()
            )))
        }
        Some(ids) => {
            let mut by_id: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
            for (j, g) in ids.into_iter().enumerate() {
                by_id.entry(g).or_default().push(j);
            }
            by_id.into_values().collect()
        }
        None => super::singleton_groups(m),
    };
    let market = Market {
        valuations: v,
        supplies: Array1::from(doc.supplies),
        budgets: Array1::from(doc.budgets.unwrap_or_else(|| vec![1.0; n])),
        groups,
    };
    market.ensure_valid()?;
    Ok(market)
}

pub fn ingest_json(path: impl AsRef<Path>) -> Result<Market> {
    from_json_str(&read_text(path.as_ref())?)
}

pub fn export_json(market: &Market, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, to_json_string(market)?).map_err(|e| Error::io(path, e))
}

fn is_json(path: &Path) -> bool {
    path.extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("json"))
}

/// Dispatches on the extension: `.json` is the JSON mirror, anything else CSV.
pub fn read_market(path: impl AsRef<Path>) -> Result<Market> {
    let path: PathBuf = path.as_ref().into();
    if is_json(&path) {
        ingest_json(&path)
    } else {
        ingest_csv(&path)
    }
}

pub fn write_market(market: &Market, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if is_json(path) {
        export_json(market, path)
    } else {
        export_csv(market, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn p() -> &'static Path {
        Path::new("mem.csv")
    }

    #[test]
    fn dense_with_supplies() {
        let text = "#dense 2 2\n1,2\n3,4\n#supplies\n1,2\n";
        let m = parse_csv(p(), text).unwrap();
        assert_eq!(m.valuations, array![[1.0, 2.0], [3.0, 4.0]]);
        assert_eq!(m.supplies, array![1.0, 2.0]);
        assert_eq!(m.budgets, array![1.0, 1.0]);
        assert_eq!(m.groups, vec![vec![0], vec![1]]);
    }

    #[test]
    fn values_on_marker_line() {
        let text = "#dense 1 2\n1,2\n#supplies,1,2\n#budgets,3\n#groups,7,7\n";
        let m = parse_csv(p(), text).unwrap();
        assert_eq!(m.budgets, array![3.0]);
        assert_eq!(m.groups, vec![vec![0, 1]]);
    }

    #[test]
    fn sparse_triplets_default_to_zero() {
        let text = "buyer,item,value\n0,0,1.5\n1,2,2\n#supplies\n1,1,1\n";
        let m = parse_csv(p(), text).unwrap();
        assert_eq!(m.valuations, array![[1.5, 0.0, 0.0], [0.0, 0.0, 2.0]]);
    }

    #[test]
    fn negative_value_reports_line() {
        let text = "#dense 2 2\n1,2\n3,-4\n#supplies\n1,2\n";
        match parse_csv(p(), text) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn non_numeric_and_malformed() {
        let e = parse_csv(p(), "#dense 1 2\n1,x\n#supplies\n1,1\n").unwrap_err();
        assert!(matches!(e, Error::Parse { line: 2, .. }));
        let e = parse_csv(p(), "#dense 1 2\n1\n#supplies\n1,1\n").unwrap_err();
        assert!(matches!(e, Error::Parse { line: 2, .. }));
    }

    #[test]
    fn sparse_missing_supply() {
        let text = "buyer,item,value\n0,0,1\n0,3,1\n#supplies\n1,1\n";
        match parse_csv(p(), text) {
            Err(Error::Parse { line, msg, .. }) => {
                assert_eq!(line, 3);
                assert!(msg.contains("missing supply for item 3"));
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn invalid_market_is_rejected() {
        let e = parse_csv(p(), "#dense 2 1\n1\n0\n#supplies\n1\n").unwrap_err();
        assert!(matches!(e, Error::InvalidMarket(_)));
    }

    #[test]
    fn json_mirror() {
        let m = Market::from_rows(&[&[1.0, 0.25], &[0.1, 3.0]], &[2.0, 1.0])
            .unwrap()
            .with_groups(vec![vec![0, 1]])
            .unwrap();
        let back = from_json_str(&to_json_string(&m).unwrap()).unwrap();
        assert_eq!(back, m);
        let minimal = from_json_str(r#"{"valuations":[[1,2]],"supplies":[1,1]}"#).unwrap();
        assert_eq!(minimal.groups.len(), 2);
    }
}
