//! Regenerates the built-in glyph asset (`assets/mono16x32.glyphs`).
//!
//! Each glyph is drawn on a 5x9 design grid (rows 7..9 hold descenders) and
//! scaled 2x horizontally and 3x vertically into a 16x32 cell with a
//! 3-pixel left margin and a 2-pixel top margin. Ink is 0, paper is 255.
//!
//! ```text
//! cargo run -p onecad --example gen_font -- crates/core/assets/mono16x32.glyphs
//! ```

use onecad::glyphfont::GlyphFont;

const CELL_W: usize = 16;
const CELL_H: usize = 32;
const SCALE_X: usize = 2;
const SCALE_Y: usize = 3;
const LEFT: usize = 3;
const TOP: usize = 2;

#[rustfmt::skip]
const DESIGNS: &[(char, [&str; 9])] = &[
    ('a', [".....", ".....", ".###.", "....#", ".####", "#...#", ".####", ".....", "....."]),
    ('b', ["#....", "#....", "####.", "#...#", "#...#", "#...#", "####.", ".....", "....."]),
    ('c', [".....", ".....", ".####", "#....", "#....", "#....", ".####", ".....", "....."]),
    ('d', ["....#", "....#", ".####", "#...#", "#...#", "#...#", ".####", ".....", "....."]),
    ('e', [".....", ".....", ".###.", "#...#", "#####", "#....", ".###.", ".....", "....."]),
    ('f', ["..##.", ".#...", "####.", ".#...", ".#...", ".#...", ".#...", ".....", "....."]),
    ('g', [".....", ".....", ".####", "#...#", "#...#", "#...#", ".####", "....#", ".###."]),
    ('h', ["#....", "#....", "####.", "#...#", "#...#", "#...#", "#...#", ".....", "....."]),
    ('i', ["..#..", ".....", ".##..", "..#..", "..#..", "..#..", ".###.", ".....", "....."]),
    ('j', ["...#.", ".....", "..##.", "...#.", "...#.", "...#.", "...#.", "#..#.", ".##.."]),
    ('k', ["#....", "#....", "#..#.", "#.#..", "##...", "#.#..", "#..#.", ".....", "....."]),
    ('l', [".##..", "..#..", "..#..", "..#..", "..#..", "..#..", ".###.", ".....", "....."]),
    ('m', [".....", ".....", "##.#.", "#.#.#", "#.#.#", "#.#.#", "#.#.#", ".....", "....."]),
    ('n', [".....", ".....", "####.", "#...#", "#...#", "#...#", "#...#", ".....", "....."]),
    ('o', [".....", ".....", ".###.", "#...#", "#...#", "#...#", ".###.", ".....", "....."]),
    ('p', [".....", ".....", "####.", "#...#", "#...#", "#...#", "####.", "#....", "#...."]),
    ('q', [".....", ".....", ".####", "#...#", "#...#", "#...#", ".####", "....#", "....#"]),
    ('r', [".....", ".....", "#.##.", "##..#", "#....", "#....", "#....", ".....", "....."]),
    ('s', [".....", ".....", ".####", "#....", ".###.", "....#", "####.", ".....", "....."]),
    ('t', [".#...", ".#...", "####.", ".#...", ".#...", ".#..#", "..##.", ".....", "....."]),
    ('u', [".....", ".....", "#...#", "#...#", "#...#", "#..##", ".##.#", ".....", "....."]),
    ('v', [".....", ".....", "#...#", "#...#", "#...#", ".#.#.", "..#..", ".....", "....."]),
    ('w', [".....", ".....", "#...#", "#...#", "#.#.#", "#.#.#", ".#.#.", ".....", "....."]),
    ('x', [".....", ".....", "#...#", ".#.#.", "..#..", ".#.#.", "#...#", ".....", "....."]),
    ('y', [".....", ".....", "#...#", "#...#", "#...#", "#...#", ".####", "....#", ".###."]),
    ('z', [".....", ".....", "#####", "...#.", "..#..", ".#...", "#####", ".....", "....."]),
    ('0', [".###.", "#...#", "#..##", "#.#.#", "##..#", "#...#", ".###.", ".....", "....."]),
    ('1', ["..#..", ".##..", "..#..", "..#..", "..#..", "..#..", ".###.", ".....", "....."]),
    ('2', [".###.", "#...#", "....#", "...#.", "..#..", ".#...", "#####", ".....", "....."]),
    ('3', ["#####", "...#.", "..#..", "...#.", "....#", "#...#", ".###.", ".....", "....."]),
    ('4', ["...#.", "..##.", ".#.#.", "#..#.", "#####", "...#.", "...#.", ".....", "....."]),
    ('5', ["#####", "#....", "####.", "....#", "....#", "#...#", ".###.", ".....", "....."]),
    ('6', ["..##.", ".#...", "#....", "####.", "#...#", "#...#", ".###.", ".....", "....."]),
    ('7', ["#####", "....#", "...#.", "..#..", ".#...", ".#...", ".#...", ".....", "....."]),
    ('8', [".###.", "#...#", "#...#", ".###.", "#...#", "#...#", ".###.", ".....", "....."]),
    ('9', [".###.", "#...#", "#...#", ".####", "....#", "...#.", ".##..", ".....", "....."]),
    (' ', [".....", ".....", ".....", ".....", ".....", ".....", ".....", ".....", "....."]),
    ('_', [".....", ".....", ".....", ".....", ".....", ".....", ".....", ".....", "#####"]),
    ('-', [".....", ".....", ".....", ".....", ".###.", ".....", ".....", ".....", "....."]),
];

fn rasterize(design: &[&str; 9]) -> Vec<u8> {
    let mut cell = vec![255u8; CELL_W * CELL_H];
    for (gy, row) in design.iter().enumerate() {
        for (gx, mark) in row.bytes().enumerate() {
            if mark != b'#' {
                continue;
            }
            for dy in 0..SCALE_Y {
                for dx in 0..SCALE_X {
                    let y = TOP + gy * SCALE_Y + dy;
                    let x = LEFT + gx * SCALE_X + dx;
                    cell[y * CELL_W + x] = 0;
                }
            }
        }
    }
    cell
}

fn main() {
    let out = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "crates/core/assets/mono16x32.glyphs".to_string());
    let glyphs = DESIGNS.iter().map(|(ch, d)| (*ch, rasterize(d))).collect();
    let font = GlyphFont::new(CELL_W, CELL_H, glyphs).expect("valid font");
    std::fs::write(&out, font.to_bytes()).expect("write font asset");
    eprintln!("wrote {} glyphs to {out}", font.alphabet().len());
}
