//! CSV schemas for the round ledger, the selection trace, and the metrics
//! trajectories. All real values are written as 12-significant-digit
//! decimal text; files are UTF-8 with LF line endings and a mandatory
//! header row.

use crate::metrics::TsfiSemantics;
use crate::ClientId;

use super::SimError;

pub const LEDGER_HEADER: &str = "replication,round,client,utility,cost,profit,q,payoff,mt,active";
pub const SELECTION_HEADER: &str =
    "replication,round,candidates-considered,eliminated-ids,objective-value,mu";
pub const METRICS_HEADER: &str = "replication,round,tsw,tsfi,semantics,mu";

/// Formats with 12 significant digits in plain decimal notation.
pub fn fmt_sig(x: f64) -> String {
    if x.is_nan() {
        return "nan".to_string();
    }
    if x == 0.0 {
        return "0".to_string();
    }
    let magnitude = x.abs().log10().floor() as i32;
    let precision = (11 - magnitude).clamp(0, 40) as usize;
    format!("{x:.precision$}")
}

fn parse_value(field: &str, what: &str) -> Result<f64, SimError> {
    if field == "nan" {
        return Ok(f64::NAN);
    }
    field
        .parse::<f64>()
        .map_err(|_| SimError::Report(format!("bad {what} value '{field}'")))
}

fn parse_int<T: std::str::FromStr>(field: &str, what: &str) -> Result<T, SimError> {
    field.parse::<T>().map_err(|_| SimError::Report(format!("bad {what} value '{field}'")))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LedgerRow {
    pub replication: u32,
    pub round: u32,
    pub client: ClientId,
    pub utility: f64,
    pub cost: f64,
    pub profit: f64,
    pub q: f64,
    pub payoff: f64,
    pub mt: f64,
    pub active: bool,
}

impl LedgerRow {
    fn to_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.replication,
            self.round,
            self.client,
            fmt_sig(self.utility),
            fmt_sig(self.cost),
            fmt_sig(self.profit),
            fmt_sig(self.q),
            fmt_sig(self.payoff),
            fmt_sig(self.mt),
            self.active
        )
    }

    fn from_line(line: &str) -> Result<Self, SimError> {
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 10 {
            return Err(SimError::Report(format!("ledger row has {} fields", parts.len())));
        }
        Ok(LedgerRow {
            replication: parse_int(parts[0], "replication")?,
            round: parse_int(parts[1], "round")?,
            client: ClientId(parse_int(parts[2], "client")?),
            utility: parse_value(parts[3], "utility")?,
            cost: parse_value(parts[4], "cost")?,
            profit: parse_value(parts[5], "profit")?,
            q: parse_value(parts[6], "q")?,
            payoff: parse_value(parts[7], "payoff")?,
            mt: parse_value(parts[8], "mt")?,
            active: match parts[9] {
                "true" => true,
                "false" => false,
                other => return Err(SimError::Report(format!("bad active value '{other}'"))),
            },
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionRow {
    pub replication: u32,
    pub round: u32,
    pub candidates_considered: u32,
    pub eliminated: Vec<ClientId>,
    pub objective_value: f64,
    pub mu: f64,
}

impl SelectionRow {
    fn to_line(&self) -> String {
        let ids: Vec<String> = self.eliminated.iter().map(|c| c.to_string()).collect();
        format!(
            "{},{},{},{},{},{}",
            self.replication,
            self.round,
            self.candidates_considered,
            ids.join(";"),
            fmt_sig(self.objective_value),
            fmt_sig(self.mu)
        )
    }

    fn from_line(line: &str) -> Result<Self, SimError> {
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 6 {
            return Err(SimError::Report(format!("selection row has {} fields", parts.len())));
        }
        let eliminated = if parts[3].is_empty() {
            Vec::new()
        } else {
            parts[3]
                .split(';')
                .map(|s| parse_int::<u32>(s, "eliminated id").map(ClientId))
                .collect::<Result<_, _>>()?
        };
        Ok(SelectionRow {
            replication: parse_int(parts[0], "replication")?,
            round: parse_int(parts[1], "round")?,
            candidates_considered: parse_int(parts[2], "candidates-considered")?,
            eliminated,
            objective_value: parse_value(parts[4], "objective-value")?,
            mu: parse_value(parts[5], "mu")?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub replication: u32,
    pub round: u32,
    pub tsw: f64,
    /// `None` marks an undefined fairness index (zero denominator).
    pub tsfi: Option<f64>,
    pub semantics: TsfiSemantics,
    pub mu: f64,
}

fn semantics_text(s: TsfiSemantics) -> &'static str {
    match s {
        TsfiSemantics::Retrospective => "retrospective",
        TsfiSemantics::Historical => "historical",
    }
}

impl MetricsRow {
    fn to_line(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.replication,
            self.round,
            fmt_sig(self.tsw),
            self.tsfi.map_or_else(|| "nan".to_string(), fmt_sig),
            semantics_text(self.semantics),
            fmt_sig(self.mu)
        )
    }

    fn from_line(line: &str) -> Result<Self, SimError> {
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 6 {
            return Err(SimError::Report(format!("metrics row has {} fields", parts.len())));
        }
        let tsfi_raw = parse_value(parts[3], "tsfi")?;
        Ok(MetricsRow {
            replication: parse_int(parts[0], "replication")?,
            round: parse_int(parts[1], "round")?,
            tsw: parse_value(parts[2], "tsw")?,
            tsfi: (!tsfi_raw.is_nan()).then_some(tsfi_raw),
            semantics: match parts[4] {
                "retrospective" => TsfiSemantics::Retrospective,
                "historical" => TsfiSemantics::Historical,
                other => {
                    return Err(SimError::Report(format!("bad semantics value '{other}'")))
                }
            },
            mu: parse_value(parts[5], "mu")?,
        })
    }
}

fn write_csv<T>(header: &str, rows: &[T], line: impl Fn(&T) -> String) -> String {
    let mut out = String::with_capacity(rows.len() * 64 + header.len() + 1);
    out.push_str(header);
    out.push('\n');
    for row in rows {
        out.push_str(&line(row));
        out.push('\n');
    }
    out
}

fn parse_csv<T>(
    text: &str,
    header: &str,
    what: &str,
    from_line: impl Fn(&str) -> Result<T, SimError>,
) -> Result<Vec<T>, SimError> {
    let mut lines = text.lines();
    match lines.next() {
        Some(first) if first == header => {}
        other => {
            return Err(SimError::Report(format!(
                "{what} csv: expected header '{header}', found {other:?}"
            )))
        }
    }
    lines.filter(|l| !l.is_empty()).map(from_line).collect()
}

pub fn write_ledger_csv(rows: &[LedgerRow]) -> String {
    write_csv(LEDGER_HEADER, rows, LedgerRow::to_line)
}

pub fn parse_ledger_csv(text: &str) -> Result<Vec<LedgerRow>, SimError> {
    parse_csv(text, LEDGER_HEADER, "ledger", LedgerRow::from_line)
}

pub fn write_selection_csv(rows: &[SelectionRow]) -> String {
    write_csv(SELECTION_HEADER, rows, SelectionRow::to_line)
}

pub fn parse_selection_csv(text: &str) -> Result<Vec<SelectionRow>, SimError> {
    parse_csv(text, SELECTION_HEADER, "selection", SelectionRow::from_line)
}

pub fn write_metrics_csv(rows: &[MetricsRow]) -> String {
    write_csv(METRICS_HEADER, rows, MetricsRow::to_line)
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricsRow>, SimError> {
    parse_csv(text, METRICS_HEADER, "metrics", MetricsRow::from_line)
}
