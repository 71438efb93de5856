//! Aggregation over seeds and the rendered report tables.

use std::fmt::Write as _;

use crate::eval::percent;

use super::{Compression, Role, StageReport};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single value.
    pub std: f64,
    pub n: usize,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return MeanStd { mean: f64::NAN, std: f64::NAN, n };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        MeanStd { mean, std, n }
    }

    /// As percentages, `mean ± std`.
    fn render(&self) -> String {
        format!("{} ± {}", percent(self.mean), percent(self.std))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AggregateRow {
    pub stage_id: usize,
    pub role: Role,
    pub name: String,
    pub alias: Option<String>,
    pub params: u64,
    pub comp_vs_teacher: Option<Compression>,
    pub comp_vs_original: Option<Compression>,
    /// Per evaluation set, in report order.
    pub wer: Vec<MeanStd>,
    pub ser: Vec<MeanStd>,
}

impl AggregateRow {
    pub fn label(&self) -> String {
        match &self.alias {
            Some(a) => format!("{} = {a}", self.name),
            None => self.name.clone(),
        }
    }
}

/// Groups reports by (stage, model name) in first-seen order.
pub fn aggregate(reports: &[StageReport]) -> Vec<AggregateRow> {
    let mut keys: Vec<(usize, &str)> = Vec::new();
    for r in reports {
        if !keys.contains(&(r.stage_id, r.name.as_str())) {
            keys.push((r.stage_id, &r.name));
        }
    }
    keys.into_iter()
        .map(|(stage, name)| {
            let group: Vec<&StageReport> = reports.iter().filter(|r| r.stage_id == stage && r.name == name).collect();
            let first = group[0];
            let sets = first.scores.len();
            let column = |i: usize, f: fn(&super::EvalScore) -> f64| {
                MeanStd::of(&group.iter().filter_map(|r| r.scores.get(i).map(f)).collect::<Vec<_>>())
            };
            AggregateRow {
                stage_id: stage,
                role: first.role.clone(),
                name: name.to_string(),
                alias: first.alias.clone(),
                params: first.params,
                comp_vs_teacher: first.comp_vs_teacher,
                comp_vs_original: first.comp_vs_original,
                wer: (0..sets).map(|i| column(i, |s| s.wer)).collect(),
                ser: (0..sets).map(|i| column(i, |s| s.ser)).collect(),
            }
        })
        .collect()
}

fn comp(c: Option<Compression>) -> String {
    c.map_or_else(|| "-".into(), |c| c.display.to_string())
}

/// Aligned text table: stage, model, parameters, both compression
/// columns, then WER and SER per set as `mean ± std` percentages.
pub fn render_table(rows: &[AggregateRow], sets: &[String]) -> String {
    let mut header: Vec<String> = ["Stage", "Model", "Params", "%Comp teacher", "%Comp T1"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    for s in sets {
        header.push(format!("{s} WER"));
        header.push(format!("{s} SER"));
    }
    let mut cells = vec![header];
    for r in rows {
        let mut line = vec![
            r.stage_id.to_string(),
            r.label(),
            r.params.to_string(),
            comp(r.comp_vs_teacher),
            comp(r.comp_vs_original),
        ];
        for i in 0..sets.len() {
            line.push(r.wer.get(i).map_or_else(|| "-".into(), MeanStd::render));
            line.push(r.ser.get(i).map_or_else(|| "-".into(), MeanStd::render));
        }
        cells.push(line);
    }
    let widths: Vec<usize> = (0..cells[0].len())
        .map(|c| cells.iter().map(|l| l[c].chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for (n, line) in cells.iter().enumerate() {
        let padded: Vec<String> = line
            .iter()
            .zip(&widths)
            .map(|(s, &w)| format!("{s}{}", " ".repeat(w - s.chars().count())))
            .collect();
        let _ = writeln!(out, "{}", padded.join("  ").trim_end());
        if n == 0 {
            let _ = writeln!(out, "{}", "-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
        }
    }
    out
}

/// Machine-readable form of [`render_table`]; rates are fractions.
pub fn render_tsv(rows: &[AggregateRow], sets: &[String]) -> String {
    let mut out = String::from("stage\tmodel\talias\trole\tparams\tcomp_teacher\tcomp_teacher_exact\tcomp_t1\tcomp_t1_exact");
    for s in sets {
        let _ = write!(out, "\t{s}_wer_mean\t{s}_wer_std\t{s}_ser_mean\t{s}_ser_std");
    }
    out.push_str("\tseeds\n");
    for r in rows {
        let exact = |c: Option<Compression>| c.map_or_else(|| "-".into(), |c| format!("{:.6}", c.exact));
        let _ = write!(
            out,
            "{}\t{}\t{}\t{:?}\t{}\t{}\t{}\t{}\t{}",
            r.stage_id,
            r.name,
            r.alias.as_deref().unwrap_or("-"),
            r.role,
            r.params,
            comp(r.comp_vs_teacher),
            exact(r.comp_vs_teacher),
            comp(r.comp_vs_original),
            exact(r.comp_vs_original)
        );
        for i in 0..sets.len() {
            let (w, s) = (r.wer[i], r.ser[i]);
            let _ = write!(out, "\t{:.6}\t{:.6}\t{:.6}\t{:.6}", w.mean, w.std, s.mean, s.std);
        }
        let _ = writeln!(out, "\t{}", r.wer.first().map_or(0, |w| w.n));
    }
    out
}

/// One line per model and seed.
pub fn render_seed_tsv(reports: &[StageReport], sets: &[String]) -> String {
    let mut out = String::from("seed\tstage\tmodel\tparams\tsha256");
    for s in sets {
        let _ = write!(out, "\t{s}_wer\t{s}_ser");
    }
    out.push('\n');
    for r in reports {
        let _ = write!(out, "{}\t{}\t{}\t{}\t{}", r.seed, r.stage_id, r.name, r.params, r.checkpoint_sha256);
        for s in &r.scores {
            let _ = write!(out, "\t{:.6}\t{:.6}", s.wer, s.ser);
        }
        out.push('\n');
    }
    out
}

fn verdict(a: &MeanStd, b: &MeanStd, a_wins: &str, b_wins: &str) -> String {
    if a.mean < b.mean {
        a_wins.to_string()
    } else if b.mean < a.mean {
        b_wins.to_string()
    } else {
        "tie".to_string()
    }
}

/// Side-by-side mean WERs: each distilled student against its scratch
/// baseline, and each progressive student against the one distilled
/// directly from the original teacher.
pub fn render_comparison(rows: &[AggregateRow], sets: &[String]) -> String {
    let mut out = String::from("# comparisons (mean WER over seeds)\n");
    let stages: Vec<usize> = {
        let mut s: Vec<usize> = rows.iter().map(|r| r.stage_id).collect();
        s.dedup();
        s
    };
    for k in stages {
        let find = |role: Role| rows.iter().find(|r| r.stage_id == k && r.role == role);
        let student = find(Role::Student);
        if let (Some(s), Some(b)) = (student, find(Role::Baseline)) {
            for (i, set) in sets.iter().enumerate() {
                let _ = writeln!(
                    out,
                    "stage {k} {set}: distilled {} {} vs scratch {} {} -> {}",
                    s.name,
                    s.wer[i].render(),
                    b.name,
                    b.wer[i].render(),
                    verdict(&s.wer[i], &b.wer[i], "distilled lower", "scratch lower")
                );
            }
        }
        if let (Some(s), Some(d)) = (student, find(Role::StudentFromOriginal)) {
            for (i, set) in sets.iter().enumerate() {
                let _ = writeln!(
                    out,
                    "stage {k} {set}: multi-stage {} {} vs direct {} {} -> {}",
                    s.name,
                    s.wer[i].render(),
                    d.name,
                    d.wer[i].render(),
                    verdict(&s.wer[i], &d.wer[i], "multi-stage lower", "direct lower")
                );
            }
        }
    }
    out
}
