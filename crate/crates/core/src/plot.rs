//! Grouped bar charts of summary rows as standalone SVG.
//!
//! Every bar carries `data-method`, `data-family` and `data-value`
//! attributes; values are printed in shortest round-trip form so they parse
//! back to the exact means.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::experiment::{Method, SummaryRow};
use crate::scene::EnvFamily;
use crate::skill::SkillKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Metric {
    Success,
    PlanCollision,
    NoStart,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Success, Metric::PlanCollision, Metric::NoStart];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Success => "success",
            Metric::PlanCollision => "plan_collision",
            Metric::NoStart => "no_start",
        }
    }

    pub fn value(self, r: &SummaryRow) -> f64 {
        match self {
            Metric::Success => r.success_mean,
            Metric::PlanCollision => r.plan_collision_mean,
            Metric::NoStart => r.no_start_mean,
        }
    }
}

const PALETTE: [&str; 6] = ["#1b9e77", "#d95f02", "#7570b3", "#e7298a", "#66a61e", "#e6ab02"];

fn skill_name(s: SkillKind) -> &'static str {
    match s {
        SkillKind::Grasp => "grasp",
        SkillKind::Place => "place",
    }
}

/// One chart: families along x, one bar per method, error bars for success.
pub fn render_svg(rows: &[SummaryRow], skill: SkillKind, metric: Metric) -> Result<String> {
    let rows: Vec<&SummaryRow> = rows.iter().filter(|r| r.skill == skill).collect();
    if rows.is_empty() {
        return Err(Error::InvalidParameter("nothing to plot".into()));
    }
    let families: BTreeSet<EnvFamily> = rows.iter().map(|r| r.family).collect();
    let methods: BTreeSet<Method> = rows.iter().map(|r| r.method).collect();
    let (bar_w, gap, left, top, height) = (14.0, 18.0, 50.0, 30.0, 200.0);
    let group_w = bar_w * methods.len() as f64 + gap;
    let width = left + group_w * families.len() as f64 + 120.0;
    let total_h = top + height + 40.0;
    let y_of = |v: f64| top + height * (1.0 - v.clamp(0.0, 1.0));

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{total_h}" viewBox="0 0 {width} {total_h}" font-family="sans-serif" font-size="10">"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{left}" y="16" font-size="12">{} / {}</text>"#,
        skill_name(skill),
        metric.name()
    );
    for k in 0..=4 {
        let v = k as f64 / 4.0;
        let y = y_of(v);
        let _ = writeln!(
            s,
            "<line x1=\"{left}\" y1=\"{y}\" x2=\"{}\" y2=\"{y}\" stroke=\"#ddd\"/><text x=\"{}\" y=\"{}\" text-anchor=\"end\">{}</text>",
            width - 120.0,
            left - 4.0,
            y + 3.0,
            k * 25
        );
    }
    for (fi, fam) in families.iter().enumerate() {
        let x0 = left + gap / 2.0 + fi as f64 * group_w;
        for (mi, m) in methods.iter().enumerate() {
            let Some(r) = rows.iter().find(|r| r.family == *fam && r.method == *m) else {
                continue;
            };
            let v = metric.value(r);
            let x = x0 + mi as f64 * bar_w;
            let y = y_of(v);
            let _ = writeln!(
                s,
                r#"<rect class="bar" x="{x}" y="{y}" width="{}" height="{}" fill="{}" data-method="{m}" data-family="{fam:?}" data-value="{v}"/>"#,
                bar_w - 2.0,
                top + height - y,
                PALETTE[mi % PALETTE.len()]
            );
            if metric == Metric::Success && r.success_std > 0.0 {
                let cx = x + (bar_w - 2.0) / 2.0;
                let _ = writeln!(
                    s,
                    r#"<line x1="{cx}" y1="{}" x2="{cx}" y2="{}" stroke="black"/>"#,
                    y_of(v - r.success_std),
                    y_of(v + r.success_std)
                );
            }
        }
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">{fam:?}</text>"#,
            x0 + (group_w - gap) / 2.0,
            top + height + 14.0
        );
    }
    for (mi, m) in methods.iter().enumerate() {
        let x = width - 110.0;
        let y = top + 12.0 * mi as f64;
        let _ = writeln!(
            s,
            r#"<rect x="{x}" y="{y}" width="8" height="8" fill="{}"/><text x="{}" y="{}">{m}</text>"#,
            PALETTE[mi % PALETTE.len()],
            x + 12.0,
            y + 8.0
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

/// Writes one chart per (skill, metric) into `dir`; returns the paths.
pub fn emit_plots(rows: &[SummaryRow], dir: &Path) -> Result<Vec<PathBuf>> {
    if rows.is_empty() {
        return Err(Error::InvalidParameter("empty summary".into()));
    }
    std::fs::create_dir_all(dir)?;
    let skills: BTreeSet<SkillKind> = rows.iter().map(|r| r.skill).collect();
    let mut out = Vec::new();
    for skill in skills {
        for metric in Metric::ALL {
            let svg = render_svg(rows, skill, metric)?;
            let p = dir.join(format!("{}_{}.svg", skill_name(skill), metric.name()));
            std::fs::write(&p, svg)?;
            out.push(p);
        }
    }
    Ok(out)
}

/// Bars of a rendered chart as (method, family, value).
pub fn parse_bars(svg: &str) -> Vec<(String, String, f64)> {
    fn attr<'a>(tag: &'a str, name: &str) -> Option<&'a str> {
        let key = format!("{name}=\"");
        let i = tag.find(&key)? + key.len();
        let j = tag[i..].find('"')?;
        Some(&tag[i..i + j])
    }
    svg.lines()
        .filter(|l| l.contains("class=\"bar\""))
        .filter_map(|l| {
            Some((
                attr(l, "data-method")?.to_string(),
                attr(l, "data-family")?.to_string(),
                attr(l, "data-value")?.parse().ok()?,
            ))
        })
        .collect()
}
