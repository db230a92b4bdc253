//! Importer for the MATPOWER case format (version 2 subset).
//!
//! Recognised blocks are `mpc.baseMVA`, `mpc.bus`, `mpc.gen`, `mpc.branch`
//! and `mpc.gencost`. Anything else (`mpc.areas`, `mpc.bus_name`, extra
//! columns) is skipped and reported as a warning.

use std::fmt::Write as _;

use super::{BranchRecord, BusRecord, BusType, CostCurve, GenRecord, NetworkCase};
use crate::error::{Error, Result};

struct Table {
    name: String,
    line: usize,
    rows: Vec<(usize, Vec<f64>)>,
}

/// Parses MATPOWER case text, logging any ignored content.
pub fn parse_case_text(text: &str) -> Result<NetworkCase> {
    let (case, warnings) = parse_case_text_with_warnings(text)?;
    for w in warnings {
        log::warn!("{w}");
    }
    Ok(case)
}

/// Parses MATPOWER case text and returns the warnings instead of logging.
pub fn parse_case_text_with_warnings(text: &str) -> Result<(NetworkCase, Vec<String>)> {
    let mut warnings = Vec::new();
    let mut base_mva = None;
    let mut tables: Vec<Table> = Vec::new();
    let mut open: Option<Table> = None;
    let mut skipping_cell = false;

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = strip_comment(raw).trim();

        if skipping_cell {
            if line.contains('}') {
                skipping_cell = false;
            }
            continue;
        }

        if let Some(table) = open.as_mut() {
            let (body, closed) = match line.find(']') {
                Some(p) => (&line[..p], true),
                None => (line, false),
            };
            read_rows(body, line_no, &mut table.rows)?;
            if closed {
                tables.push(open.take().expect("open table"));
            }
            continue;
        }

        if line.is_empty()
            || line.starts_with("function")
            || line == "end"
            || line.starts_with("return")
        {
            continue;
        }

        let Some(rest) = line.strip_prefix("mpc.") else {
            return Err(Error::Syntax {
                line: line_no,
                msg: format!("unexpected content `{line}`"),
            });
        };
        let Some((name, value)) = rest.split_once('=') else {
            return Err(Error::Syntax {
                line: line_no,
                msg: "expected `mpc.<field> = <value>`".into(),
            });
        };
        let name = name.trim();
        let value = value.trim();

        if let Some(body) = value.strip_prefix('[') {
            let mut table = Table {
                name: name.to_string(),
                line: line_no,
                rows: Vec::new(),
            };
            match body.find(']') {
                Some(p) => {
                    read_rows(&body[..p], line_no, &mut table.rows)?;
                    tables.push(table);
                }
                None => {
                    read_rows(body, line_no, &mut table.rows)?;
                    open = Some(table);
                }
            }
        } else if value.starts_with('{') {
            warnings.push(format!("line {line_no}: ignoring cell array mpc.{name}"));
            skipping_cell = !value.contains('}');
        } else {
            let scalar = value.trim_end_matches(';').trim();
            match name {
                "baseMVA" => {
                    base_mva = Some(parse_number(scalar).ok_or_else(|| Error::Syntax {
                        line: line_no,
                        msg: format!("invalid baseMVA `{scalar}`"),
                    })?)
                }
                "version" => {
                    let v = scalar.trim_matches('\'').trim_matches('"');
                    if v != "2" {
                        warnings.push(format!("line {line_no}: case format version {v}, expected 2"));
                    }
                }
                other => warnings.push(format!("line {line_no}: ignoring mpc.{other}")),
            }
        }
    }

    if let Some(t) = open {
        return Err(Error::Syntax {
            line: t.line,
            msg: format!("unterminated matrix mpc.{}", t.name),
        });
    }

    let base_mva = base_mva.ok_or(Error::Syntax {
        line: 0,
        msg: "missing mpc.baseMVA".into(),
    })?;

    let mut bus_t = None;
    let mut gen_t = None;
    let mut branch_t = None;
    let mut cost_t = None;
    for t in tables {
        match t.name.as_str() {
            "bus" => bus_t = Some(t),
            "gen" => gen_t = Some(t),
            "branch" => branch_t = Some(t),
            "gencost" => cost_t = Some(t),
            other => warnings.push(format!("line {}: ignoring mpc.{other}", t.line)),
        }
    }
    let bus_t = bus_t.ok_or(Error::Syntax {
        line: 0,
        msg: "missing mpc.bus".into(),
    })?;

    let buses = read_buses(&bus_t, base_mva, &mut warnings)?;
    let (generators, in_service) = match &gen_t {
        Some(t) => read_gens(t, base_mva, &mut warnings)?,
        None => (Vec::new(), Vec::new()),
    };
    let branches = match &branch_t {
        Some(t) => read_branches(t, base_mva, &mut warnings)?,
        None => Vec::new(),
    };
    let costs = match &cost_t {
        Some(t) => read_costs(t, &in_service, &mut warnings)?,
        None => Vec::new(),
    };

    let case = NetworkCase {
        base_mva,
        buses,
        branches,
        generators,
        costs,
    }
    .validated()?;
    Ok((case, warnings))
}

fn strip_comment(line: &str) -> &str {
    let mut in_quote = false;
    for (i, c) in line.char_indices() {
        match c {
            '\'' => in_quote = !in_quote,
            '%' if !in_quote => return &line[..i],
            _ => {}
        }
    }
    line
}

fn parse_number(tok: &str) -> Option<f64> {
    match tok {
        "Inf" | "inf" => Some(f64::INFINITY),
        "-Inf" | "-inf" => Some(f64::NEG_INFINITY),
        _ => tok.parse().ok(),
    }
}

fn read_rows(body: &str, line: usize, rows: &mut Vec<(usize, Vec<f64>)>) -> Result<()> {
    for chunk in body.split(';') {
        let mut row = Vec::new();
        for tok in chunk
            .split(|c: char| c.is_whitespace() || c == ',')
            .filter(|t| !t.is_empty())
        {
            let v = parse_number(tok).ok_or_else(|| Error::Syntax {
                line,
                msg: format!("invalid number `{tok}`"),
            })?;
            row.push(v);
        }
        if !row.is_empty() {
            rows.push((line, row));
        }
    }
    Ok(())
}

fn need_cols(t: &Table, line: usize, row: &[f64], n: usize) -> Result<()> {
    if row.len() < n {
        return Err(Error::Syntax {
            line,
            msg: format!("mpc.{} row has {} columns, need at least {n}", t.name, row.len()),
        });
    }
    Ok(())
}

fn bus_id(v: f64, line: usize) -> Result<u32> {
    if v >= 0.0 && v.fract() == 0.0 && v <= u32::MAX as f64 {
        Ok(v as u32)
    } else {
        Err(Error::Syntax {
            line,
            msg: format!("invalid bus number {v}"),
        })
    }
}

fn note_extra(t: &Table, used: usize, warnings: &mut Vec<String>) {
    let extra = t
        .rows
        .iter()
        .any(|(_, r)| r.iter().skip(used).any(|&v| v != 0.0));
    if extra {
        warnings.push(format!(
            "mpc.{}: ignoring nonzero data beyond column {used}",
            t.name
        ));
    }
}

fn read_buses(t: &Table, base: f64, warnings: &mut Vec<String>) -> Result<Vec<BusRecord>> {
    let mut out = Vec::with_capacity(t.rows.len());
    for (line, row) in &t.rows {
        need_cols(t, *line, row, 13)?;
        let bus_type = match row[1] as i64 {
            1 => BusType::PQ,
            2 => BusType::PV,
            3 => BusType::Ref,
            4 => return Err(Error::Unsupported(format!("line {line}: isolated bus"))),
            other => {
                return Err(Error::Syntax {
                    line: *line,
                    msg: format!("unknown bus type {other}"),
                })
            }
        };
        out.push(BusRecord {
            id: bus_id(row[0], *line)?,
            bus_type,
            p_load: row[2] / base,
            q_load: row[3] / base,
            g_shunt: row[4] / base,
            b_shunt: row[5] / base,
            v_min: row[12],
            v_max: row[11],
        });
    }
    note_extra(t, 13, warnings);
    Ok(out)
}

fn read_gens(
    t: &Table,
    base: f64,
    warnings: &mut Vec<String>,
) -> Result<(Vec<GenRecord>, Vec<bool>)> {
    let mut out = Vec::new();
    let mut in_service = Vec::new();
    for (line, row) in &t.rows {
        need_cols(t, *line, row, 10)?;
        let on = row[7] > 0.0;
        in_service.push(on);
        if !on {
            warnings.push(format!("line {line}: dropping out-of-service generator"));
            continue;
        }
        out.push(GenRecord {
            bus: bus_id(row[0], *line)?,
            p_set: row[1] / base,
            q_max: row[3] / base,
            q_min: row[4] / base,
            v_setpoint: row[5],
            p_max: row[8] / base,
            p_min: row[9] / base,
        });
    }
    note_extra(t, 10, warnings);
    Ok((out, in_service))
}

fn read_branches(t: &Table, base: f64, warnings: &mut Vec<String>) -> Result<Vec<BranchRecord>> {
    let mut out = Vec::new();
    for (line, row) in &t.rows {
        need_cols(t, *line, row, 11)?;
        if row[10] <= 0.0 {
            warnings.push(format!("line {line}: dropping out-of-service branch"));
            continue;
        }
        if row[9] != 0.0 {
            return Err(Error::Unsupported(format!(
                "line {line}: phase-shifting transformer"
            )));
        }
        let tap = if row[8] == 0.0 { 1.0 } else { row[8] };
        let i_max = if row[5] > 0.0 { Some(row[5] / base) } else { None };
        out.push(BranchRecord {
            from_bus: bus_id(row[0], *line)?,
            to_bus: bus_id(row[1], *line)?,
            r: row[2],
            x: row[3],
            b: row[4],
            tap,
            i_max,
        });
    }
    Ok(out)
}

fn read_costs(t: &Table, in_service: &[bool], warnings: &mut Vec<String>) -> Result<Vec<CostCurve>> {
    if t.rows.len() > in_service.len() {
        warnings.push("mpc.gencost: ignoring reactive cost rows".into());
    }
    let mut out = Vec::new();
    for ((line, row), &on) in t.rows.iter().zip(in_service) {
        need_cols(t, *line, row, 4)?;
        if row[0] as i64 != 2 {
            return Err(Error::Unsupported(format!(
                "line {line}: only polynomial costs (model 2) are supported"
            )));
        }
        let n = row[3] as usize;
        if n > 3 {
            return Err(Error::Unsupported(format!(
                "line {line}: polynomial cost of degree {} (max 2)",
                n - 1
            )));
        }
        need_cols(t, *line, row, 4 + n)?;
        let c = &row[4..4 + n];
        let coef = |k: usize| if k < n { c[n - 1 - k] } else { 0.0 };
        if on {
            out.push(CostCurve {
                c2: coef(2),
                c1: coef(1),
                c0: coef(0),
            });
        }
    }
    Ok(out)
}

/// Writes a case back out in MATPOWER format.
pub fn to_matpower_text(case: &NetworkCase) -> String {
    let base = case.base_mva;
    let mut s = String::new();
    let _ = writeln!(s, "function mpc = exported_case");
    let _ = writeln!(s, "mpc.version = '2';");
    let _ = writeln!(s, "mpc.baseMVA = {base};");
    let _ = writeln!(s, "mpc.bus = [");
    for b in &case.buses {
        let ty = match b.bus_type {
            BusType::PQ => 1,
            BusType::PV => 2,
            BusType::Ref => 3,
        };
        let _ = writeln!(
            s,
            "\t{}\t{ty}\t{}\t{}\t{}\t{}\t1\t1\t0\t0\t1\t{}\t{};",
            b.id,
            b.p_load * base,
            b.q_load * base,
            b.g_shunt * base,
            b.b_shunt * base,
            b.v_max,
            b.v_min
        );
    }
    let _ = writeln!(s, "];\nmpc.gen = [");
    for g in &case.generators {
        let _ = writeln!(
            s,
            "\t{}\t{}\t0\t{}\t{}\t{}\t{base}\t1\t{}\t{};",
            g.bus,
            g.p_set * base,
            g.q_max * base,
            g.q_min * base,
            g.v_setpoint,
            g.p_max * base,
            g.p_min * base
        );
    }
    let _ = writeln!(s, "];\nmpc.branch = [");
    for br in &case.branches {
        let rate = br.i_max.map_or(0.0, |i| i * base);
        let _ = writeln!(
            s,
            "\t{}\t{}\t{}\t{}\t{}\t{rate}\t{rate}\t{rate}\t{}\t0\t1;",
            br.from_bus,
            br.to_bus,
            br.r,
            br.x,
            br.b,
            if br.tap == 1.0 { 0.0 } else { br.tap }
        );
    }
    let _ = writeln!(s, "];");
    if !case.costs.is_empty() {
        let _ = writeln!(s, "mpc.gencost = [");
        for c in &case.costs {
            let _ = writeln!(s, "\t2\t0\t0\t3\t{}\t{}\t{};", c.c2, c.c1, c.c0);
        }
        let _ = writeln!(s, "];");
    }
    s
}
