//! Named color table shared by the corpus generator and the captioner.

use crate::imaging::luminance;

/// Eleven named colors. Nearest-name lookups break ties by table order.
pub const NAMED_COLORS: [(&str, [u8; 3]); 11] = [
    ("black", [0, 0, 0]),
    ("white", [255, 255, 255]),
    ("red", [220, 40, 40]),
    ("green", [40, 170, 70]),
    ("blue", [40, 80, 220]),
    ("yellow", [245, 210, 40]),
    ("orange", [245, 140, 30]),
    ("purple", [140, 60, 180]),
    ("pink", [240, 120, 180]),
    ("brown", [130, 80, 40]),
    ("gray", [128, 128, 128]),
];

pub fn nearest_name(c: [u8; 3]) -> &'static str {
    let mut best = (u32::MAX, NAMED_COLORS[0].0);
    for (name, rgb) in NAMED_COLORS {
        let d: u32 = (0..3)
            .map(|i| {
                let e = c[i] as i32 - rgb[i] as i32;
                (e * e) as u32
            })
            .sum();
        if d < best.0 {
            best = (d, name);
        }
    }
    best.1
}

pub fn by_name(name: &str) -> Option<[u8; 3]> {
    NAMED_COLORS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, c)| *c)
}

pub fn contrast(a: [u8; 3], b: [u8; 3]) -> f64 {
    (luminance(a) - luminance(b)).abs()
}
