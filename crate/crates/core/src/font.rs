//! Fixed 8×8 bitmap font used to render and recognize poster text.
//!
//! Each glyph is a 5×7 pattern placed in columns 1..=5 and rows 0..=6 of an
//! 8×8 cell, so neighbouring characters are always separated by blank
//! columns and the last row of every cell is empty.

use std::collections::BTreeMap;

pub const CELL: u32 = 8;

/// Characters the font can render, in table order.
pub const CHARSET: &str = "ABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789 !-&.%?+";

// 5 columns x 7 rows per glyph, '#' = ink.
const GLYPH_ROWS: &[(char, [&str; 7])] = &[
    ('A', [".###.", "#...#", "#...#", "#####", "#...#", "#...#", "#...#"]),
    ('B', ["####.", "#...#", "#...#", "####.", "#...#", "#...#", "####."]),
    ('C', [".###.", "#...#", "#....", "#....", "#....", "#...#", ".###."]),
    ('D', ["###..", "#..#.", "#...#", "#...#", "#...#", "#..#.", "###.."]),
    ('E', ["#####", "#....", "#....", "####.", "#....", "#....", "#####"]),
    ('F', ["#####", "#....", "#....", "####.", "#....", "#....", "#...."]),
    ('G', [".###.", "#...#", "#....", "#.###", "#...#", "#...#", ".####"]),
    ('H', ["#...#", "#...#", "#...#", "#####", "#...#", "#...#", "#...#"]),
    ('I', [".###.", "..#..", "..#..", "..#..", "..#..", "..#..", ".###."]),
    ('J', ["..###", "...#.", "...#.", "...#.", "...#.", "#..#.", ".##.."]),
    ('K', ["#...#", "#..#.", "#.#..", "##...", "#.#..", "#..#.", "#...#"]),
    ('L', ["#....", "#....", "#....", "#....", "#....", "#....", "#####"]),
    ('M', ["#...#", "##.##", "#.#.#", "#.#.#", "#...#", "#...#", "#...#"]),
    ('N', ["#...#", "#...#", "##..#", "#.#.#", "#..##", "#...#", "#...#"]),
    ('O', [".###.", "#...#", "#...#", "#...#", "#...#", "#...#", ".###."]),
    ('P', ["####.", "#...#", "#...#", "####.", "#....", "#....", "#...."]),
    ('Q', [".###.", "#...#", "#...#", "#...#", "#.#.#", "#..#.", ".##.#"]),
    ('R', ["####.", "#...#", "#...#", "####.", "#.#..", "#..#.", "#...#"]),
    ('S', [".####", "#....", "#....", ".###.", "....#", "....#", "####."]),
    ('T', ["#####", "..#..", "..#..", "..#..", "..#..", "..#..", "..#.."]),
    ('U', ["#...#", "#...#", "#...#", "#...#", "#...#", "#...#", ".###."]),
    ('V', ["#...#", "#...#", "#...#", "#...#", "#...#", ".#.#.", "..#.."]),
    ('W', ["#...#", "#...#", "#...#", "#.#.#", "#.#.#", "#.#.#", ".#.#."]),
    ('X', ["#...#", "#...#", ".#.#.", "..#..", ".#.#.", "#...#", "#...#"]),
    ('Y', ["#...#", "#...#", ".#.#.", "..#..", "..#..", "..#..", "..#.."]),
    ('Z', ["#####", "....#", "...#.", "..#..", ".#...", "#....", "#####"]),
    ('0', [".###.", "#...#", "#..##", "#.#.#", "##..#", "#...#", ".###."]),
    ('1', ["..#..", ".##..", "..#..", "..#..", "..#..", "..#..", ".###."]),
    ('2', [".###.", "#...#", "....#", "...#.", "..#..", ".#...", "#####"]),
    ('3', ["#####", "...#.", "..#..", "...#.", "....#", "#...#", ".###."]),
    ('4', ["...#.", "..##.", ".#.#.", "#..#.", "#####", "...#.", "...#."]),
    ('5', ["#####", "#....", "####.", "....#", "....#", "#...#", ".###."]),
    ('6', ["..##.", ".#...", "#....", "####.", "#...#", "#...#", ".###."]),
    ('7', ["#####", "....#", "...#.", "..#..", ".#...", ".#...", ".#..."]),
    ('8', [".###.", "#...#", "#...#", ".###.", "#...#", "#...#", ".###."]),
    ('9', [".###.", "#...#", "#...#", ".####", "....#", "...#.", ".##.."]),
    (' ', [".....", ".....", ".....", ".....", ".....", ".....", "....."]),
    ('!', ["..#..", "..#..", "..#..", "..#..", "..#..", ".....", "..#.."]),
    ('-', [".....", ".....", ".....", "#####", ".....", ".....", "....."]),
    ('&', [".##..", "#..#.", "#.#..", ".#...", "#.#.#", "#..#.", ".##.#"]),
    ('.', [".....", ".....", ".....", ".....", ".....", ".##..", ".##.."]),
    ('%', ["##...", "##..#", "...#.", "..#..", ".#...", "#..##", "...##"]),
    ('?', [".###.", "#...#", "....#", "...#.", "..#..", ".....", "..#.."]),
    ('+', [".....", "..#..", "..#..", "#####", "..#..", "..#..", "....."]),
];

/// One 8×8 glyph: bit `row * 8 + col` is set where the glyph has ink.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GlyphMask(pub u64);

impl GlyphMask {
    #[inline]
    pub fn get(&self, col: u32, row: u32) -> bool {
        (self.0 >> (row * CELL + col)) & 1 == 1
    }

    pub fn popcount(&self) -> u32 {
        self.0.count_ones()
    }

    /// Ink pixel coordinates within the cell, row-major.
    pub fn ink(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        (0..CELL * CELL)
            .filter(|i| (self.0 >> i) & 1 == 1)
            .map(|i| (i % CELL, i / CELL))
    }
}

/// Binary bitmap font with a fixed square cell.
#[derive(Debug, Clone)]
pub struct GlyphFont {
    glyphs: BTreeMap<char, GlyphMask>,
    pub cell_width: u32,
    pub cell_height: u32,
}

impl Default for GlyphFont {
    fn default() -> Self {
        Self::builtin()
    }
}

impl GlyphFont {
    pub fn builtin() -> Self {
        let glyphs = GLYPH_ROWS
            .iter()
            .map(|(ch, rows)| {
                let mut bits = 0u64;
                for (r, row) in rows.iter().enumerate() {
                    for (c, b) in row.bytes().enumerate() {
                        if b == b'#' {
                            bits |= 1 << (r as u32 * CELL + c as u32 + 1);
                        }
                    }
                }
                (*ch, GlyphMask(bits))
            })
            .collect();
        Self {
            glyphs,
            cell_width: CELL,
            cell_height: CELL,
        }
    }

    pub fn glyph(&self, ch: char) -> Option<GlyphMask> {
        self.glyphs.get(&ch).copied()
    }

    pub fn supports(&self, ch: char) -> bool {
        self.glyphs.contains_key(&ch)
    }

    pub fn supports_str(&self, s: &str) -> bool {
        s.chars().all(|c| self.supports(c))
    }

    /// Non-space glyphs, in table order. These are the OCR templates.
    pub fn templates(&self) -> Vec<(char, GlyphMask)> {
        CHARSET
            .chars()
            .filter(|&c| c != ' ')
            .map(|c| (c, self.glyphs[&c]))
            .collect()
    }

    /// Pixel extent `(w, h)` of `len` characters at `scale`.
    pub fn extent(&self, len: usize, scale: u32) -> (u32, u32) {
        (len as u32 * self.cell_width * scale, self.cell_height * scale)
    }

    /// Number of ink pixels `content` occupies at `scale`.
    pub fn ink_pixels(&self, content: &str, scale: u32) -> u64 {
        content
            .chars()
            .filter_map(|c| self.glyph(c))
            .map(|g| g.popcount() as u64 * (scale * scale) as u64)
            .sum()
    }
}
