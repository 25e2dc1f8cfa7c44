//! Procedural pseudo-glyphs built from line and arc strokes.
//!
//! Design coordinates: x right, y down. The cell spans `[0, CELL_W] x [0, CELL_H]`
//! with the x-height line at `X_LINE`; ascenders start at 0.

use std::f64::consts::PI;

use rand::Rng;

pub const CELL_W: f64 = 12.0;
pub const CELL_H: f64 = 20.0;
pub const X_LINE: f64 = 7.0;

pub type Polyline = Vec<[f64; 2]>;

#[derive(Clone, Debug, PartialEq)]
pub struct Glyph {
    pub strokes: Vec<Polyline>,
}

fn arc(cx: f64, cy: f64, rx: f64, ry: f64, from: f64, to: f64) -> Polyline {
    let steps = (((to - from).abs() / (PI / 12.0)).ceil() as usize).max(2);
    (0..=steps)
        .map(|i| {
            let t = from + (to - from) * i as f64 / steps as f64;
            [cx + rx * t.cos(), cy + ry * t.sin()]
        })
        .collect()
}

fn primitive<R: Rng>(rng: &mut R) -> Polyline {
    let mid_y = (X_LINE + CELL_H) / 2.0;
    let (rx, ry) = (CELL_W / 2.0, (CELL_H - X_LINE) / 2.0);
    match rng.random_range(0..6) {
        0 => {
            let x = [0.0, CELL_W / 2.0, CELL_W][rng.random_range(0..3)];
            let top = if rng.random_bool(0.4) { 0.0 } else { X_LINE };
            vec![[x, top], [x, CELL_H]]
        }
        1 => {
            let y = [X_LINE, mid_y, CELL_H][rng.random_range(0..3)];
            vec![[0.0, y], [CELL_W, y]]
        }
        2 => {
            if rng.random_bool(0.5) {
                vec![[0.0, X_LINE], [CELL_W, CELL_H]]
            } else {
                vec![[0.0, CELL_H], [CELL_W, X_LINE]]
            }
        }
        3 => {
            // half bowl: left, right, top or bottom
            let start = [0.5, 1.5, 1.0, 0.0][rng.random_range(0..4)] * PI;
            arc(CELL_W / 2.0, mid_y, rx, ry, start, start + PI)
        }
        4 => arc(CELL_W / 2.0, mid_y, rx, ry, 0.0, 2.0 * PI),
        _ => {
            // hook: quarter arc joined to a short stem
            let mut p = arc(CELL_W / 2.0, mid_y, rx, ry, PI, 1.5 * PI);
            p.push([CELL_W, X_LINE]);
            p
        }
    }
}

pub fn random_glyph<R: Rng>(rng: &mut R) -> Glyph {
    let n = if rng.random_bool(0.3) { 1 } else { 2 };
    let mut strokes: Vec<Polyline> = Vec::with_capacity(n);
    while strokes.len() < n {
        let p = primitive(rng);
        if !strokes.contains(&p) {
            strokes.push(p);
        }
    }
    Glyph { strokes }
}

/// Horizontal glyph pitch in design units; spacing widens with the stroke so
/// heavy words keep ink in the minority of their box.
pub fn advance(stroke: f64) -> f64 {
    CELL_W + 1.5 * stroke + 3.0
}

/// Ink extent of a word of `n` glyphs, `[x0, y0, x1, y1]` in design units.
pub fn word_extent(n: usize, stroke: f64) -> [f64; 4] {
    let h = stroke / 2.0;
    let last = (n.max(1) - 1) as f64 * advance(stroke);
    [-h, -h, last + CELL_W + h, CELL_H + h]
}
