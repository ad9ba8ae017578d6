//! Tab-separated experiment artifacts and the human-readable summary built
//! from them.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::eval::Direction;
use crate::lpf::{IterationRecord, Side};

pub const MAP_FILE: &str = "map.tsv";
pub const HISTORY_FILE: &str = "history.tsv";
pub const OPEN_SET_FILE: &str = "open_set.tsv";
pub const SUMMARY_FILE: &str = "summary.txt";

const MAP_HEADER: &str = "mode\tdirection\tR\tmap\tseed";
const HISTORY_HEADER: &str = "seed\titeration\tcf_1\tcf_2\tactive\tselected\taccuracy\tcontaminated";
const OPEN_SET_HEADER: &str = "seed\tseen\tunseen\tin_class\tout_of_class\trequested_kappa\teffective_kappa";

#[derive(Debug, Clone, PartialEq)]
pub struct MapRow {
    pub mode: String,
    pub direction: Direction,
    pub r: usize,
    pub map: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HistoryRow {
    pub seed: u64,
    pub iteration: usize,
    pub cf: [f64; 2],
    /// 1 or 2.
    pub active: usize,
    pub selected: usize,
    pub accuracy: Option<f64>,
    pub contaminated: usize,
}

impl HistoryRow {
    pub fn from_record(seed: u64, r: &IterationRecord) -> Self {
        Self {
            seed,
            iteration: r.iteration,
            cf: r.cf,
            active: r.active.number(),
            selected: r.selected,
            accuracy: r.accuracy,
            contaminated: r.contaminated,
        }
    }

    pub fn active_side(&self) -> Side {
        if self.active == 2 {
            Side::Modality2
        } else {
            Side::Modality1
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OpenSetRow {
    pub seed: u64,
    pub seen: Vec<usize>,
    pub unseen: Vec<usize>,
    pub in_class: usize,
    pub out_of_class: usize,
    pub requested_kappa: f64,
    pub effective_kappa: f64,
}

pub fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.6}"))
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

pub fn format_map_rows(rows: &[MapRow]) -> String {
    let mut out = format!("{MAP_HEADER}\n");
    for r in rows {
        let _ = writeln!(out, "{}\t{}\t{}\t{:.6}\t{}", r.mode, r.direction.as_str(), r.r, r.map, r.seed);
    }
    out
}

pub fn format_history_rows(rows: &[HistoryRow]) -> String {
    let mut out = format!("{HISTORY_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{}\t{}\t{:.6}\t{:.6}\t{}\t{}\t{}\t{}",
            r.seed,
            r.iteration,
            r.cf[0],
            r.cf[1],
            r.active,
            r.selected,
            fmt_opt(r.accuracy),
            r.contaminated
        );
    }
    out
}

pub fn format_open_set_rows(rows: &[OpenSetRow]) -> String {
    let mut out = format!("{OPEN_SET_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{:.6}\t{:.6}",
            r.seed,
            join(&r.seen),
            join(&r.unseen),
            r.in_class,
            r.out_of_class,
            r.requested_kappa,
            r.effective_kappa
        );
    }
    out
}

fn bad(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Malformed {
        path: path.to_path_buf(),
        message: format!("line {line}: {}", message.into()),
    }
}

/// Data rows of a TSV file after checking the header.
fn tsv_rows(path: &Path, header: &str, width: usize) -> Result<Vec<(usize, Vec<String>)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == header => {}
        _ => return Err(bad(path, 1, format!("expected header `{header}`"))),
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        if line.is_empty() {
            continue;
        }
        let cells: Vec<String> = line.split('\t').map(str::to_string).collect();
        if cells.len() != width {
            return Err(bad(path, i + 1, format!("expected {width} fields, found {}", cells.len())));
        }
        rows.push((i + 1, cells));
    }
    Ok(rows)
}

fn parse<T: std::str::FromStr>(path: &Path, line: usize, cell: &str) -> Result<T> {
    cell.parse().map_err(|_| bad(path, line, format!("cannot parse `{cell}`")))
}

fn parse_list(path: &Path, line: usize, cell: &str) -> Result<Vec<usize>> {
    if cell.is_empty() {
        return Ok(Vec::new());
    }
    cell.split(',').map(|c| parse(path, line, c)).collect()
}

pub fn read_map_rows(path: &Path) -> Result<Vec<MapRow>> {
    tsv_rows(path, MAP_HEADER, 5)?
        .into_iter()
        .map(|(line, c)| {
            Ok(MapRow {
                mode: c[0].clone(),
                direction: Direction::parse(&c[1]).ok_or_else(|| bad(path, line, format!("unknown direction `{}`", c[1])))?,
                r: parse(path, line, &c[2])?,
                map: parse(path, line, &c[3])?,
                seed: parse(path, line, &c[4])?,
            })
        })
        .collect()
}

pub fn read_history_rows(path: &Path) -> Result<Vec<HistoryRow>> {
    tsv_rows(path, HISTORY_HEADER, 8)?
        .into_iter()
        .map(|(line, c)| {
            Ok(HistoryRow {
                seed: parse(path, line, &c[0])?,
                iteration: parse(path, line, &c[1])?,
                cf: [parse(path, line, &c[2])?, parse(path, line, &c[3])?],
                active: parse(path, line, &c[4])?,
                selected: parse(path, line, &c[5])?,
                accuracy: if c[6] == "-" { None } else { Some(parse(path, line, &c[6])?) },
                contaminated: parse(path, line, &c[7])?,
            })
        })
        .collect()
}

pub fn read_open_set_rows(path: &Path) -> Result<Vec<OpenSetRow>> {
    tsv_rows(path, OPEN_SET_HEADER, 7)?
        .into_iter()
        .map(|(line, c)| {
            Ok(OpenSetRow {
                seed: parse(path, line, &c[0])?,
                seen: parse_list(path, line, &c[1])?,
                unseen: parse_list(path, line, &c[2])?,
                in_class: parse(path, line, &c[3])?,
                out_of_class: parse(path, line, &c[4])?,
                requested_kappa: parse(path, line, &c[5])?,
                effective_kappa: parse(path, line, &c[6])?,
            })
        })
        .collect()
}

/// Median of a non-empty slice; the mean of the two middle values for even lengths.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapSummary {
    pub mode: String,
    pub direction: Direction,
    pub runs: usize,
    pub mean: f64,
    pub median: f64,
}

/// One entry per (mode, direction), in order of first appearance.
pub fn summarize_map(rows: &[MapRow]) -> Vec<MapSummary> {
    let mut order: Vec<(String, Direction)> = Vec::new();
    let mut values: BTreeMap<(String, &str), Vec<f64>> = BTreeMap::new();
    for r in rows {
        let key = (r.mode.clone(), r.direction);
        if !order.contains(&key) {
            order.push(key);
        }
        values.entry((r.mode.clone(), r.direction.as_str())).or_default().push(r.map);
    }
    order
        .into_iter()
        .map(|(mode, direction)| {
            let v = &values[&(mode.clone(), direction.as_str())];
            MapSummary {
                runs: v.len(),
                mean: v.iter().sum::<f64>() / v.len() as f64,
                median: median(v).unwrap_or(0.0),
                mode,
                direction,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionSummary {
    pub iteration: usize,
    /// Repetitions that reached this iteration.
    pub runs: usize,
    pub selected: f64,
    /// Median over runs with a non-empty selection.
    pub accuracy: Option<f64>,
    pub contaminated: f64,
}

/// Per-iteration medians over repetitions.
pub fn summarize_selection(rows: &[HistoryRow]) -> Vec<SelectionSummary> {
    let mut by_iter: BTreeMap<usize, Vec<&HistoryRow>> = BTreeMap::new();
    for r in rows {
        by_iter.entry(r.iteration).or_default().push(r);
    }
    by_iter
        .into_iter()
        .map(|(iteration, rs)| {
            let sel: Vec<f64> = rs.iter().map(|r| r.selected as f64).collect();
            let acc: Vec<f64> = rs.iter().filter_map(|r| r.accuracy).collect();
            let con: Vec<f64> = rs.iter().map(|r| r.contaminated as f64).collect();
            SelectionSummary {
                iteration,
                runs: rs.len(),
                selected: median(&sel).unwrap_or(0.0),
                accuracy: median(&acc),
                contaminated: median(&con).unwrap_or(0.0),
            }
        })
        .collect()
}

/// Plain-text tables: mean MAP per mode and direction, per-iteration selection
/// medians, and open-set pool statistics when present.
pub fn render(maps: &[MapRow], history: &[HistoryRow], open: &[OpenSetRow]) -> String {
    let mut out = String::new();
    let summary = summarize_map(maps);
    let r = maps.first().map_or(0, |m| m.r);
    let mut modes: Vec<&str> = Vec::new();
    for s in &summary {
        if !modes.contains(&s.mode.as_str()) {
            modes.push(&s.mode);
        }
    }
    let _ = writeln!(out, "MAP@{r} by mode (mean / median over repetitions)");
    let _ = writeln!(out, "{:<6}{:>20}{:>20}{:>6}", "mode", "i2t", "t2i", "runs");
    for mode in &modes {
        let cell = |d: Direction| {
            summary
                .iter()
                .find(|s| s.mode == *mode && s.direction == d)
                .map_or_else(|| "-".to_string(), |s| format!("{:.4} / {:.4}", s.mean, s.median))
        };
        let runs = summary.iter().find(|s| s.mode == *mode).map_or(0, |s| s.runs);
        let _ = writeln!(
            out,
            "{:<6}{:>20}{:>20}{:>6}",
            mode,
            cell(Direction::ImageToText),
            cell(Direction::TextToImage),
            runs
        );
    }
    if !history.is_empty() {
        let _ = writeln!(out, "\nPseudo-label selection per iteration (median over repetitions)");
        let _ = writeln!(
            out,
            "{:<10}{:>10}{:>12}{:>14}{:>6}",
            "iteration", "selected", "accuracy", "contaminated", "runs"
        );
        for s in summarize_selection(history) {
            let acc = s.accuracy.map_or_else(|| "-".to_string(), |a| format!("{:.2}%", 100.0 * a));
            let _ = writeln!(
                out,
                "{:<10}{:>10}{:>12}{:>14}{:>6}",
                s.iteration, s.selected, acc, s.contaminated, s.runs
            );
        }
    }
    if !open.is_empty() {
        let _ = writeln!(out, "\nOpen-set unlabeled pool");
        let _ = writeln!(
            out,
            "{:<8}{:>10}{:>14}{:>10}{:>10}",
            "seed", "in_class", "out_of_class", "kappa", "target"
        );
        for o in open {
            let _ = writeln!(
                out,
                "{:<8}{:>10}{:>14}{:>10.3}{:>10.3}",
                o.seed, o.in_class, o.out_of_class, o.effective_kappa, o.requested_kappa
            );
        }
    }
    out
}

/// Reads the artifacts in `dir` and renders them.
pub fn report_dir(dir: &Path) -> Result<String> {
    let maps = read_map_rows(&dir.join(MAP_FILE))?;
    let history_path = dir.join(HISTORY_FILE);
    let history = if history_path.exists() {
        read_history_rows(&history_path)?
    } else {
        Vec::new()
    };
    let open_path = dir.join(OPEN_SET_FILE);
    let open = if open_path.exists() {
        read_open_set_rows(&open_path)?
    } else {
        Vec::new()
    };
    Ok(render(&maps, &history, &open))
}
