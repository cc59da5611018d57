//! CSV and SVG output for trajectories.

use std::io::Write;

use plotters::prelude::*;
use thiserror::Error;

use super::Trajectory;

#[derive(Debug, Error)]
pub enum ExportError {
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("plot failed: {0}")]
    Plot(String),
}

/// Column headers, unit-suffixed. Impedance-model states follow as
/// `x_i{k}` columns.
pub const CSV_COLUMNS: [&str; 14] = [
    "t_s",
    "f_N",
    "u_raw_kV2",
    "u_kV2",
    "u_applied_kV2",
    "y_mm",
    "y_meas_mm",
    "y_star_mm",
    "e_i_mm",
    "x2_mm_per_s",
    "x3_mm",
    "x_s_mm_s",
    "z_N",
    "y0_mm",
];

/// Writes one row per sample.
pub fn write_trajectory_csv<W: Write>(tr: &Trajectory, out: W) -> Result<(), ExportError> {
    let mut w = csv::Writer::from_writer(out);
    let n_i = tr.x_i.first().map_or(0, Vec::len);
    let mut header: Vec<String> = CSV_COLUMNS.iter().map(|s| s.to_string()).collect();
    header.extend((0..n_i).map(|k| format!("x_i{k}")));
    w.write_record(&header)?;
    for k in 0..tr.len() {
        let mut row = vec![
            tr.t[k], tr.f[k], tr.u_raw[k], tr.u[k], tr.u_applied[k], tr.y[k], tr.y_meas[k],
            tr.y_star[k], tr.e_i[k], tr.x2[k], tr.x3[k], tr.x_s[k], tr.z[k], tr.y0[k],
        ];
        row.extend_from_slice(&tr.x_i[k]);
        w.write_record(row.iter().map(|v| format!("{v:e}")))?;
    }
    w.flush()?;
    Ok(())
}

fn range(series: &[&[f64]]) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for s in series {
        for &v in s.iter().filter(|v| v.is_finite()) {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    if !lo.is_finite() {
        return (-1.0, 1.0);
    }
    let pad = ((hi - lo) * 0.05).max(1e-9 * hi.abs().max(1.0));
    (lo - pad, hi + pad)
}

fn plot_err<E: std::fmt::Display>(e: E) -> ExportError {
    ExportError::Plot(e.to_string())
}

/// Time panels (displacement with target, interaction error, input, force)
/// on the left; the (f, y) locus with the desired characteristic on the right.
pub fn trajectory_svg(tr: &Trajectory) -> Result<String, ExportError> {
    let mut buf = String::new();
    {
        let root = SVGBackend::with_string(&mut buf, (1200, 800)).into_drawing_area();
        root.fill(&WHITE).map_err(plot_err)?;
        let (left, right) = root.split_horizontally(720);
        let t_end = tr.t.last().copied().unwrap_or(1.0).max(1e-9);
        let groups: [(&str, &[&[f64]], [RGBColor; 2]); 4] = [
            ("y, y* (mm)", &[&tr.y, &tr.y_star], [BLUE, RED]),
            ("e_i (mm)", &[&tr.e_i], [MAGENTA, MAGENTA]),
            ("u (kV^2)", &[&tr.u], [BLACK, BLACK]),
            ("f (N)", &[&tr.f], [GREEN, GREEN]),
        ];
        for (area, (label, series, colors)) in left.split_evenly((4, 1)).iter().zip(groups) {
            let (lo, hi) = range(series);
            let mut chart = ChartBuilder::on(area)
                .margin(8)
                .x_label_area_size(20)
                .y_label_area_size(55)
                .build_cartesian_2d(0.0..t_end, lo..hi)
                .map_err(plot_err)?;
            chart.configure_mesh().y_desc(label).draw().map_err(plot_err)?;
            for (s, c) in series.iter().zip(colors) {
                chart
                    .draw_series(LineSeries::new(tr.t.iter().copied().zip(s.iter().copied()), c))
                    .map_err(plot_err)?;
            }
        }
        let (f_lo, f_hi) = range(&[&tr.f]);
        let (y_lo, y_hi) = range(&[&tr.y, &tr.y_star]);
        let mut chart = ChartBuilder::on(&right)
            .margin(12)
            .x_label_area_size(30)
            .y_label_area_size(50)
            .build_cartesian_2d(f_lo..f_hi, y_lo..y_hi)
            .map_err(plot_err)?;
        chart
            .configure_mesh()
            .x_desc("f (N)")
            .y_desc("y (mm)")
            .draw()
            .map_err(plot_err)?;
        for (s, c) in [(&tr.y_star, RED), (&tr.y, BLUE)] {
            chart
                .draw_series(LineSeries::new(tr.f.iter().copied().zip(s.iter().copied()), c))
                .map_err(plot_err)?;
        }
        root.present().map_err(plot_err)?;
    }
    Ok(buf)
}
