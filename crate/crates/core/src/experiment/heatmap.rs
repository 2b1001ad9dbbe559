use std::fmt::Write as _;

use crate::error::{Error, Result};

const CHAR_W: f64 = 8.4;
const LINE_H: f64 = 26.0;
const PAD: f64 = 4.0;
const MAX_W: f64 = 900.0;

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            _ => out.push(c),
        }
    }
    out
}

/// Tokens as boxes shaded from white (α = 0) to red (the largest α), wrapped
/// into lines, with each α in a tooltip.
pub fn heatmap_svg(weights: &[(String, f64)]) -> String {
    let max = weights.iter().map(|(_, a)| *a).fold(0.0f64, f64::max);
    let mut body = String::new();
    let (mut x, mut y) = (PAD, PAD);
    let mut width: f64 = 0.0;
    for (token, alpha) in weights {
        let w = token.chars().count().max(1) as f64 * CHAR_W + 2.0 * PAD;
        if x + w > MAX_W && x > PAD {
            x = PAD;
            y += LINE_H + PAD;
        }
        let s = if max > 0.0 { alpha / max } else { 0.0 };
        let gb = (255.0 * (1.0 - s)).round() as u8;
        let _ = write!(
            body,
            "<g><title>{} {alpha:.6}</title><rect x=\"{x:.1}\" y=\"{y:.1}\" width=\"{w:.1}\" height=\"{LINE_H:.1}\" fill=\"rgb(255,{gb},{gb})\" stroke=\"#ccc\"/>",
            escape(token)
        );
        let _ = writeln!(
            body,
            "<text x=\"{:.1}\" y=\"{:.1}\">{}</text></g>",
            x + PAD,
            y + LINE_H * 0.68,
            escape(token)
        );
        x += w + PAD;
        width = width.max(x);
    }
    let height = y + LINE_H + PAD;
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width:.1}\" height=\"{height:.1}\" font-family=\"monospace\" font-size=\"14\">\n{body}</svg>\n"
    )
}

/// `token,alpha` rows in input order.
pub fn heatmap_csv(weights: &[(String, f64)]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["token", "alpha"])?;
    for (t, a) in weights {
        w.write_record([t.as_str(), &a.to_string()])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::io("<heatmap csv>", e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}
