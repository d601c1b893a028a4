//! Accuracy-vs-shots line charts.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Result};
use crossfi::eval::AblationRow;
use crossfi::Scenario;
use plotters::prelude::*;

/// Mean accuracy per series over seeds, one entry per shot count.
#[derive(Debug, Clone, PartialEq)]
pub struct ShotTable {
    pub scenario: Scenario,
    pub shots: Vec<usize>,
    pub series: BTreeMap<String, Vec<Option<f64>>>,
    /// Mean in-domain accuracy, drawn as the dashed reference.
    pub reference: Option<f64>,
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// One table per cross-domain scenario in `rows`; failed rows are skipped.
pub fn shot_tables(rows: &[AblationRow]) -> Vec<ShotTable> {
    let ok: Vec<(&AblationRow, f64)> = rows.iter().filter_map(|r| r.accuracy.map(|a| (r, a))).collect();
    let in_domain: Vec<f64> = ok
        .iter()
        .filter(|(r, _)| r.scenario == Scenario::InDomain)
        .map(|&(_, a)| a)
        .collect();
    let reference = mean(&in_domain);
    let mut scenarios: Vec<Scenario> = ok
        .iter()
        .map(|(r, _)| r.scenario)
        .filter(|s| *s != Scenario::InDomain)
        .collect();
    scenarios.sort_by_key(|s| s.to_string());
    scenarios.dedup();

    scenarios
        .into_iter()
        .map(|scenario| {
            let mine: Vec<&(&AblationRow, f64)> = ok.iter().filter(|(r, _)| r.scenario == scenario).collect();
            let mut shots: Vec<usize> = mine.iter().map(|(r, _)| r.k).collect();
            shots.sort_unstable();
            shots.dedup();
            let mut acc: BTreeMap<String, BTreeMap<usize, Vec<f64>>> = BTreeMap::new();
            for (r, a) in mine {
                acc.entry(r.name.clone()).or_default().entry(r.k).or_default().push(*a);
            }
            let series = acc
                .into_iter()
                .map(|(name, by_k)| {
                    let ys = shots.iter().map(|k| by_k.get(k).and_then(|v| mean(v))).collect();
                    (name, ys)
                })
                .collect();
            ShotTable {
                scenario,
                shots,
                series,
                reference,
            }
        })
        .collect()
}

/// Writes `accuracy_vs_shots_<scenario>.svg` per table into `dir`.
pub fn accuracy_vs_shots(rows: &[AblationRow], title: &str, dir: &Path) -> Result<Vec<PathBuf>> {
    let tables = shot_tables(rows);
    if tables.is_empty() {
        return Err(anyhow!(crossfi::Error::Data("no successful cross-domain rows to plot".into())));
    }
    tables.iter().map(|t| render(t, title, dir)).collect()
}

fn render(t: &ShotTable, title: &str, dir: &Path) -> Result<PathBuf> {
    let path = dir.join(format!("accuracy_vs_shots_{}.svg", t.scenario));
    let n = t.shots.len() as i32;
    {
        let root = SVGBackend::new(&path, (720, 480)).into_drawing_area();
        root.fill(&WHITE).map_err(|e| anyhow!("{e}"))?;
        // Shot counts sit at evenly spaced index positions, one key point each.
        let x = (-1..n).with_key_points((0..n).collect());
        let mut chart = ChartBuilder::on(&root)
            .caption(format!("{title} ({})", t.scenario), ("sans-serif", 20))
            .margin(12)
            .x_label_area_size(40)
            .y_label_area_size(50)
            .build_cartesian_2d(x, 0.0..1.0)
            .map_err(|e| anyhow!("{e}"))?;
        let shots = t.shots.clone();
        chart
            .configure_mesh()
            .x_desc("shots per class")
            .y_desc("accuracy")
            .x_label_formatter(&|i| shots.get(*i as usize).map_or_else(String::new, |k| k.to_string()))
            .draw()
            .map_err(|e| anyhow!("{e}"))?;

        for (idx, (name, ys)) in t.series.iter().enumerate() {
            let color = Palette99::pick(idx).to_rgba();
            let pts: Vec<(i32, f64)> = ys
                .iter()
                .enumerate()
                .filter_map(|(i, y)| y.map(|y| (i as i32, y)))
                .collect();
            chart
                .draw_series(LineSeries::new(pts.clone(), color.stroke_width(2)))
                .map_err(|e| anyhow!("{e}"))?
                .label(name.as_str())
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color.stroke_width(2)));
            chart
                .draw_series(pts.iter().map(|&p| Circle::new(p, 3, color.filled())))
                .map_err(|e| anyhow!("{e}"))?;
        }
        if let Some(r) = t.reference {
            chart
                .draw_series(DashedLineSeries::new(vec![(-1, r), (n, r)], 6, 4, BLACK.stroke_width(1)))
                .map_err(|e| anyhow!("{e}"))?
                .label("in-domain")
                .legend(|(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], BLACK));
        }
        chart
            .configure_series_labels()
            .position(SeriesLabelPosition::LowerRight)
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()
            .map_err(|e| anyhow!("{e}"))?;
        root.present().map_err(|e| anyhow!("{e}"))?;
    }
    Ok(path)
}
