//! Tiny deterministic chart renderer for report plots: histograms, bar
//! charts and line curves drawn straight into RGB buffers.

use crate::imgio::ImageBuf;

const BG: [u8; 3] = [250, 250, 248];
const AXIS: [u8; 3] = [60, 60, 60];
const SERIES: [[u8; 3]; 4] = [
    [66, 110, 200],
    [200, 90, 60],
    [70, 160, 90],
    [150, 80, 170],
];

const W: usize = 480;
const H: usize = 320;
const MARGIN: usize = 32;

fn canvas() -> ImageBuf {
    let mut img = ImageBuf::filled(W, H, BG);
    for x in MARGIN..W - MARGIN {
        img.set(x, H - MARGIN, AXIS);
    }
    for y in MARGIN..=H - MARGIN {
        img.set(MARGIN, y, AXIS);
    }
    img
}

fn fill_rect(img: &mut ImageBuf, x0: usize, y0: usize, x1: usize, y1: usize, color: [u8; 3]) {
    for y in y0..=y1.min(img.height - 1) {
        for x in x0..=x1.min(img.width - 1) {
            img.set(x, y, color);
        }
    }
}

fn draw_line(img: &mut ImageBuf, x0: f64, y0: f64, x1: f64, y1: f64, color: [u8; 3]) {
    let steps = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as usize).max(1);
    for s in 0..=steps {
        let t = s as f64 / steps as f64;
        let x = (x0 + t * (x1 - x0)).round() as usize;
        let y = (y0 + t * (y1 - y0)).round() as usize;
        if x < img.width && y < img.height {
            img.set(x, y, color);
            if y + 1 < img.height {
                img.set(x, y + 1, color);
            }
        }
    }
}

/// Histogram of `values` over `bins` equal-width bins; a second series can
/// be overlaid for comparison (entropy plots use clean vs. triggered).
pub fn histogram(series: &[(&str, &[f64])], bins: usize) -> ImageBuf {
    let mut img = canvas();
    let all: Vec<f64> = series
        .iter()
        .flat_map(|(_, v)| v.iter().copied())
        .filter(|v| v.is_finite())
        .collect();
    if all.is_empty() || bins == 0 {
        return img;
    }
    let lo = all.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = all.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut max_count = 1usize;
    let mut counts: Vec<Vec<usize>> = Vec::new();
    for (_, values) in series {
        let mut c = vec![0usize; bins];
        for v in values.iter().filter(|v| v.is_finite()) {
            let b = (((v - lo) / span) * bins as f64) as usize;
            c[b.min(bins - 1)] += 1;
        }
        max_count = max_count.max(c.iter().copied().max().unwrap_or(0));
        counts.push(c);
    }
    let plot_w = W - 2 * MARGIN;
    let plot_h = H - 2 * MARGIN;
    let bin_w = plot_w / bins;
    for (si, c) in counts.iter().enumerate() {
        let color = SERIES[si % SERIES.len()];
        let offset = si * 2;
        for (b, &count) in c.iter().enumerate() {
            if count == 0 {
                continue;
            }
            let height = (count * plot_h) / max_count;
            let x0 = MARGIN + b * bin_w + offset;
            let x1 = (x0 + bin_w.saturating_sub(2 + offset)).max(x0);
            fill_rect(
                &mut img,
                x0,
                H - MARGIN - height,
                x1,
                H - MARGIN - 1,
                color,
            );
        }
    }
    img
}

/// Bar chart of labelled values (anomaly indices per class). A horizontal
/// marker line can be drawn at `marker` (the index-2 threshold).
pub fn bar_chart(values: &[f64], marker: Option<f64>) -> ImageBuf {
    let mut img = canvas();
    if values.is_empty() {
        return img;
    }
    let finite_max = values
        .iter()
        .filter(|v| v.is_finite())
        .fold(0.0_f64, |m, &v| m.max(v))
        .max(marker.unwrap_or(0.0))
        .max(1e-9);
    let plot_w = W - 2 * MARGIN;
    let plot_h = H - 2 * MARGIN;
    let bar_w = (plot_w / values.len()).max(2);
    for (i, &v) in values.iter().enumerate() {
        let clamped = if v.is_finite() { v } else { finite_max };
        let height = ((clamped / finite_max) * plot_h as f64) as usize;
        let x0 = MARGIN + i * bar_w + 4;
        fill_rect(
            &mut img,
            x0,
            H - MARGIN - height.min(plot_h),
            x0 + bar_w.saturating_sub(8),
            H - MARGIN - 1,
            SERIES[i % SERIES.len()],
        );
    }
    if let Some(m) = marker {
        let y = H - MARGIN - (((m / finite_max) * plot_h as f64) as usize).min(plot_h);
        for x in (MARGIN..W - MARGIN).step_by(4) {
            img.set(x, y, AXIS);
        }
    }
    img
}

/// Line curves over a shared x axis (pruning fraction vs CA/ASR).
pub fn line_chart(xs: &[f64], series: &[(&str, &[f64])]) -> ImageBuf {
    let mut img = canvas();
    if xs.len() < 2 {
        return img;
    }
    let x_lo = xs.first().copied().unwrap();
    let x_hi = xs.last().copied().unwrap().max(x_lo + 1e-9);
    let all: Vec<f64> = series.iter().flat_map(|(_, v)| v.iter().copied()).collect();
    let y_lo = all.iter().cloned().fold(f64::INFINITY, f64::min).min(0.0);
    let y_hi = all.iter().cloned().fold(f64::NEG_INFINITY, f64::max).max(1.0);
    let plot_w = (W - 2 * MARGIN) as f64;
    let plot_h = (H - 2 * MARGIN) as f64;
    let px = |x: f64| MARGIN as f64 + (x - x_lo) / (x_hi - x_lo) * plot_w;
    let py = |y: f64| (H - MARGIN) as f64 - (y - y_lo) / (y_hi - y_lo) * plot_h;
    for (si, (_, values)) in series.iter().enumerate() {
        let color = SERIES[si % SERIES.len()];
        for w in values.windows(2).zip(xs.windows(2)) {
            let (ys, xw) = w;
            draw_line(&mut img, px(xw[0]), py(ys[0]), px(xw[1]), py(ys[1]), color);
        }
    }
    img
}
