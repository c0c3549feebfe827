//! Loss-curve plot as a standalone SVG document.

use std::fmt::Write as _;

use gfus::trainer::{Split, TrainingLog};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 20.0;
const BOTTOM: f64 = 55.0;

fn series(log: &TrainingLog, split: Split) -> Vec<(f64, f64)> {
    log.rows
        .iter()
        .filter(|r| r.split == split)
        .map(|r| (r.epoch as f64, r.loss))
        .collect()
}

/// Train and validation loss per epoch, axes labelled "Epoch" and
/// "Loss value".
pub fn loss_curve(log: &TrainingLog) -> String {
    let train = series(log, Split::Train);
    let val = series(log, Split::Val);
    let all: Vec<&(f64, f64)> = train.iter().chain(&val).collect();
    let x_max = all.iter().map(|p| p.0).fold(1.0, f64::max);
    let y_max = all.iter().map(|p| p.1).fold(0.0, f64::max).max(1e-12) * 1.05;
    let plot_w = WIDTH - LEFT - RIGHT;
    let plot_h = HEIGHT - TOP - BOTTOM;
    let sx = |x: f64| LEFT + if x_max > 1.0 { (x - 1.0) / (x_max - 1.0) } else { 0.5 } * plot_w;
    let sy = |y: f64| TOP + plot_h - y / y_max * plot_h;
    let points = |s: &[(f64, f64)]| {
        s.iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect::<Vec<_>>()
            .join(" ")
    };

    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let (x0, y0, x1) = (LEFT, TOP + plot_h, LEFT + plot_w);
    let _ = writeln!(out, r#"<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>"#);
    let _ = writeln!(out, r#"<line x1="{x0}" y1="{TOP}" x2="{x0}" y2="{y0}" stroke="black"/>"#);
    for i in 0..=4 {
        let y = y_max * i as f64 / 4.0;
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{y:.3}</text>"#,
            LEFT - 6.0,
            sy(y) + 4.0
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">1</text><text x="{:.2}" y="{:.2}" text-anchor="middle">{x_max}</text>"#,
        sx(1.0),
        y0 + 16.0,
        sx(x_max),
        y0 + 16.0
    );
    let _ = writeln!(
        out,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">Epoch</text>"#,
        LEFT + plot_w / 2.0,
        HEIGHT - 12.0
    );
    let _ = writeln!(
        out,
        r#"<text x="16" y="{:.2}" text-anchor="middle" transform="rotate(-90 16 {:.2})">Loss value</text>"#,
        TOP + plot_h / 2.0,
        TOP + plot_h / 2.0
    );
    for (name, s, colour, legend_y) in [("train", &train, "#1f77b4", TOP + 10.0), ("val", &val, "#ff7f0e", TOP + 26.0)] {
        let _ = writeln!(
            out,
            r#"<polyline class="{name}" fill="none" stroke="{colour}" stroke-width="1.5" points="{}"/>"#,
            points(s)
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{legend_y:.2}" fill="{colour}" text-anchor="end">{name}</text>"#,
            x1 - 4.0
        );
    }
    out.push_str("</svg>\n");
    out
}
