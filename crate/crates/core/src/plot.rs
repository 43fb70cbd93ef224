//! Four stacked panels: VPP power, battery power with SOC, generator
//! outputs, mean frequency.

use std::path::Path;

use plotters::prelude::*;

use crate::trace::SimTrace;

#[derive(Debug, thiserror::Error)]
#[error("plot {path}: {message}")]
pub struct PlotError {
    pub path: String,
    pub message: String,
}

const COLORS: [RGBColor; 6] = [BLUE, RED, GREEN, MAGENTA, CYAN, BLACK];

fn range(series: &[&[f64]]) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in series.iter().flat_map(|s| s.iter()) {
        lo = lo.min(*v);
        hi = hi.max(*v);
    }
    if !lo.is_finite() {
        return (-1.0, 1.0);
    }
    let pad = ((hi - lo) * 0.05).max(1e-3);
    (lo - pad, hi + pad)
}

fn panel<DB: DrawingBackend>(
    area: &DrawingArea<DB, plotters::coord::Shift>,
    caption: &str,
    y_label: &str,
    t_min: &[f64],
    series: &[(String, &[f64])],
) -> Result<(), String> {
    let t_max = t_min.last().copied().unwrap_or(1.0).max(1e-9);
    let cols: Vec<&[f64]> = series.iter().map(|s| s.1).collect();
    let (lo, hi) = range(&cols);
    let mut chart = ChartBuilder::on(area)
        .caption(caption, ("sans-serif", 18))
        .margin(8)
        .x_label_area_size(30)
        .y_label_area_size(60)
        .build_cartesian_2d(0.0..t_max, lo..hi)
        .map_err(|e| e.to_string())?;
    chart
        .configure_mesh()
        .x_desc("time (min)")
        .y_desc(y_label)
        .draw()
        .map_err(|e| e.to_string())?;
    for (i, (name, ys)) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        chart
            .draw_series(LineSeries::new(t_min.iter().copied().zip(ys.iter().copied()), color))
            .map_err(|e| e.to_string())?
            .label(name.clone())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(|e| e.to_string())?;
    Ok(())
}

/// Writes the chart. `battery_ids` selects which VPPs go to the battery
/// panel; the rest share the VPP panel.
pub fn write_svg(trace: &SimTrace, path: &Path, title: &str, battery_ids: &[u32]) -> Result<(), PlotError> {
    let err = |message: String| PlotError {
        path: path.display().to_string(),
        message,
    };
    let t_min: Vec<f64> = trace.t_s().iter().map(|t| t / 60.0).collect();
    let col = |name: &str| trace.column(name).unwrap_or(&[]);

    let mut fleet = Vec::new();
    let mut battery = Vec::new();
    for id in trace.vpp_ids() {
        let target = if battery_ids.contains(&id) { &mut battery } else { &mut fleet };
        target.push((format!("vpp{id} MW"), col(&format!("vpp{id}_mw"))));
        target.push((format!("vpp{id} ref MW"), col(&format!("vpp{id}_ref_mw"))));
        if battery_ids.contains(&id) {
            battery.push((format!("vpp{id} SOC %"), col(&format!("vpp{id}_soc_pct"))));
        }
    }
    let gens: Vec<(String, &[f64])> = trace
        .names
        .iter()
        .filter(|n| n.starts_with("gen") && n.ends_with("_mw"))
        .map(|n| (n.trim_end_matches("_mw").to_string(), col(n)))
        .collect();
    let freq = vec![("mean frequency".to_string(), col("freq_hz"))];

    let root = SVGBackend::new(path, (1000, 1400)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| err(e.to_string()))?;
    let root = root
        .titled(title, ("sans-serif", 22))
        .map_err(|e| err(e.to_string()))?;
    let panels = root.split_evenly((4, 1));
    panel(&panels[0], "(a) VPP power", "MW", &t_min, &fleet).map_err(err)?;
    panel(&panels[1], "(b) battery power and SOC", "MW / %", &t_min, &battery).map_err(err)?;
    panel(&panels[2], "(c) generator output", "MW", &t_min, &gens).map_err(err)?;
    panel(&panels[3], "(d) mean frequency", "Hz", &t_min, &freq).map_err(err)?;
    root.present().map_err(|e| err(e.to_string()))?;
    Ok(())
}
