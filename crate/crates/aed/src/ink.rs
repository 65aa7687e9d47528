//! Online-ink data model, the INKTEXT file format, and the deterministic
//! ink-to-raster conversion.
//!
//! Rendering follows the online-to-offline rules: a single uniform scale
//! factor, Bresenham segments, a 2-px stroke realized as a 2×2 stamp per
//! line pixel, and no anti-aliasing of any kind. y grows downward in both
//! ink coordinates and rasters.

use crate::error::{Error, Result};

/// Ordered strokes of 2-D pen coordinates plus a ground-truth label.
#[derive(Debug, Clone, PartialEq)]
pub struct InkSample {
    pub strokes: Vec<Vec<(f64, f64)>>,
    pub label: String,
}

/// Single-channel raster. 255 = background, 0 = ink; the renderer only
/// ever produces these two values.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl RasterImage {
    pub fn background(width: usize, height: usize) -> Self {
        RasterImage {
            width,
            height,
            pixels: vec![255; width * height],
        }
    }
}

/// Parse INKTEXT file contents.
pub fn parse_ink(text: &str) -> Result<InkSample> {
    let perr = |line: usize, msg: &str| Error::Parse {
        line,
        msg: msg.to_string(),
    };
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| perr(1, "empty file, expected 'INKTEXT 1' header"))?;
    if header != "INKTEXT 1" {
        return Err(perr(1, &format!("bad header {header:?}, expected 'INKTEXT 1'")));
    }
    let (_, label_line) = lines.next().ok_or_else(|| perr(2, "missing LABEL line"))?;
    let label = label_line
        .strip_prefix("LABEL\t")
        .ok_or_else(|| perr(2, "expected 'LABEL<TAB><label>'"))?
        .to_string();

    let mut strokes: Vec<Vec<(f64, f64)>> = Vec::new();
    let mut last_line = 2;
    let mut saw_end = false;
    while let Some((ix, line)) = lines.next() {
        let lineno = ix + 1;
        last_line = lineno;
        if line == "END" {
            saw_end = true;
            break;
        }
        let count: usize = line
            .strip_prefix("STROKE ")
            .ok_or_else(|| perr(lineno, &format!("expected 'STROKE <count>' or 'END', got {line:?}")))?
            .parse()
            .map_err(|_| perr(lineno, "non-numeric stroke point count"))?;
        if count == 0 {
            return Err(perr(lineno, "empty stroke (point count 0)"));
        }
        let mut pts = Vec::with_capacity(count);
        for _ in 0..count {
            let (pix, pline) = lines
                .next()
                .ok_or_else(|| perr(last_line + 1, "truncated stroke point list"))?;
            let lineno = pix + 1;
            last_line = lineno;
            let mut it = pline.split_whitespace();
            let x: f64 = it
                .next()
                .ok_or_else(|| perr(lineno, "missing x coordinate"))?
                .parse()
                .map_err(|_| perr(lineno, "non-numeric x coordinate"))?;
            let y: f64 = it
                .next()
                .ok_or_else(|| perr(lineno, "missing y coordinate"))?
                .parse()
                .map_err(|_| perr(lineno, "non-numeric y coordinate"))?;
            if it.next().is_some() {
                return Err(perr(lineno, "trailing tokens after coordinates"));
            }
            if !x.is_finite() || !y.is_finite() {
                return Err(perr(lineno, "non-finite coordinate"));
            }
            pts.push((x, y));
        }
        strokes.push(pts);
    }
    if !saw_end {
        return Err(perr(last_line, "missing END sentinel"));
    }
    if strokes.is_empty() {
        return Err(perr(last_line, "sample has no strokes"));
    }
    Ok(InkSample { strokes, label })
}

/// Serialize to INKTEXT (UTF-8, LF endings). Inverse of [`parse_ink`].
pub fn serialize_ink(sample: &InkSample) -> String {
    let mut out = String::from("INKTEXT 1\n");
    out.push_str("LABEL\t");
    out.push_str(&sample.label);
    out.push('\n');
    for stroke in &sample.strokes {
        out.push_str(&format!("STROKE {}\n", stroke.len()));
        for &(x, y) in stroke {
            out.push_str(&format!("{x} {y}\n"));
        }
    }
    out.push_str("END\n");
    out
}

/// Pixel margin around the rendered ink.
pub const RENDER_MARGIN: usize = 2;
/// Stroke width realized by the renderer.
pub const DEFAULT_STROKE_WIDTH: usize = 2;

fn stamp(img: &mut RasterImage, px: usize, py: usize, sw: usize) {
    debug_assert!(
        px + sw <= img.width && py + sw <= img.height,
        "stamp out of bounds at ({px},{py})"
    );
    for dy in 0..sw {
        for dx in 0..sw {
            let (x, y) = (px + dx, py + dy);
            if x < img.width && y < img.height {
                img.pixels[y * img.width + x] = 0;
            }
        }
    }
}

fn bresenham(img: &mut RasterImage, x0: i64, y0: i64, x1: i64, y1: i64, sw: usize) {
    let dx = (x1 - x0).abs();
    let dy = -(y1 - y0).abs();
    let sx = if x0 < x1 { 1 } else { -1 };
    let sy = if y0 < y1 { 1 } else { -1 };
    let (mut x, mut y) = (x0, y0);
    let mut err = dx + dy;
    loop {
        stamp(img, x as usize, y as usize, sw);
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

/// Render a sample to a binary raster. The ink bounding box is scaled by
/// a single factor so its height fills `target_height` minus margins;
/// the width follows proportionally, rounded up to even and clamped to
/// `max_width` (scaling down further if needed). Degenerate bounding-box
/// axes are expanded symmetrically to one ink-unit.
pub fn render(
    sample: &InkSample,
    target_height: usize,
    stroke_width: usize,
    max_width: usize,
) -> Result<RasterImage> {
    if sample.strokes.is_empty() || sample.strokes.iter().any(|s| s.is_empty()) {
        return Err(Error::Usage("cannot render an empty ink sample".into()));
    }
    if target_height < 8 || target_height % 2 != 0 {
        return Err(Error::Config(format!(
            "target_height must be even and >= 8, got {target_height}"
        )));
    }
    if stroke_width == 0 || stroke_width > RENDER_MARGIN {
        return Err(Error::Config(format!(
            "stroke_width must be in 1..={RENDER_MARGIN}, got {stroke_width}"
        )));
    }
    let margin = RENDER_MARGIN;
    if max_width <= 2 * margin + stroke_width {
        return Err(Error::Config(format!("max_width {max_width} too small")));
    }

    let (mut min_x, mut max_x) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut min_y, mut max_y) = (f64::INFINITY, f64::NEG_INFINITY);
    for stroke in &sample.strokes {
        for &(x, y) in stroke {
            min_x = min_x.min(x);
            max_x = max_x.max(x);
            min_y = min_y.min(y);
            max_y = max_y.max(y);
        }
    }
    // expand zero-extent axes to 1 ink-unit, symmetrically
    if max_x - min_x == 0.0 {
        min_x -= 0.5;
        max_x += 0.5;
    }
    if max_y - min_y == 0.0 {
        min_y -= 0.5;
        max_y += 0.5;
    }
    let (w_ink, h_ink) = (max_x - min_x, max_y - min_y);

    let avail_h = (target_height - 2 * margin) as f64;
    let mut scale = avail_h / h_ink;
    // proportional width, scaled down further if it would exceed max_width
    let max_content_w = (max_width - 2 * margin) as f64;
    if w_ink * scale > max_content_w {
        scale = max_content_w / w_ink;
    }

    let content_w = (w_ink * scale).round().max(1.0) as usize;
    let content_h = (h_ink * scale).round().max(1.0) as usize;
    let mut width = content_w + 2 * margin;
    if width % 2 != 0 {
        width += 1;
    }
    debug_assert!(width <= max_width);
    // vertical centering only matters when width-limited; otherwise the
    // content height equals target_height - 2*margin and this is `margin`
    let margin_y = (target_height - content_h) / 2;

    let mut img = RasterImage::background(width, target_height);
    let to_px = |x: f64, y: f64| -> (i64, i64) {
        let px = margin as i64 + ((x - min_x) * scale).round() as i64;
        let py = margin_y as i64 + ((y - min_y) * scale).round() as i64;
        (px, py)
    };
    for stroke in &sample.strokes {
        let (px, py) = to_px(stroke[0].0, stroke[0].1);
        stamp(&mut img, px as usize, py as usize, stroke_width);
        for pair in stroke.windows(2) {
            let (x0, y0) = to_px(pair[0].0, pair[0].1);
            let (x1, y1) = to_px(pair[1].0, pair[1].1);
            bresenham(&mut img, x0, y0, x1, y1, stroke_width);
        }
    }
    Ok(img)
}
