//! Inspection overlays: token regions tinted per pixel value and labelled.

use image::{Rgb, RgbImage};

use super::record::TokenRecord;

/// 3x5 bitmaps, rows top to bottom, three bits per row with the MSB on the left.
const FONT: [(char, u16); 36] = [
    ('A', 0b010_101_111_101_101),
    ('B', 0b110_101_110_101_110),
    ('C', 0b011_100_100_100_011),
    ('D', 0b110_101_101_101_110),
    ('E', 0b111_100_110_100_111),
    ('F', 0b111_100_110_100_100),
    ('G', 0b011_100_101_101_011),
    ('H', 0b101_101_111_101_101),
    ('I', 0b111_010_010_010_111),
    ('J', 0b001_001_001_101_010),
    ('K', 0b101_101_110_101_101),
    ('L', 0b100_100_100_100_111),
    ('M', 0b101_111_111_101_101),
    ('N', 0b110_101_101_101_101),
    ('O', 0b010_101_101_101_010),
    ('P', 0b110_101_110_100_100),
    ('Q', 0b010_101_101_110_011),
    ('R', 0b110_101_110_101_101),
    ('S', 0b011_100_010_001_110),
    ('T', 0b111_010_010_010_010),
    ('U', 0b101_101_101_101_111),
    ('V', 0b101_101_101_101_010),
    ('W', 0b101_101_111_111_101),
    ('X', 0b101_101_010_101_101),
    ('Y', 0b101_101_010_010_010),
    ('Z', 0b111_001_010_100_111),
    ('0', 0b111_101_101_101_111),
    ('1', 0b010_110_010_010_111),
    ('2', 0b110_001_010_100_111),
    ('3', 0b110_001_010_001_110),
    ('4', 0b101_101_111_001_001),
    ('5', 0b111_100_110_001_110),
    ('6', 0b011_100_111_101_111),
    ('7', 0b111_001_010_010_010),
    ('8', 0b111_101_111_101_111),
    ('9', 0b111_101_111_001_110),
];

fn glyph(ch: char) -> Option<u16> {
    let up = ch.to_ascii_uppercase();
    FONT.iter().find(|(c, _)| *c == up).map(|(_, bits)| *bits)
}

/// Deterministic tint for a pixel value (splitmix64 of the value).
pub fn tint_color(pixel_value: u16) -> [u8; 3] {
    let mut z = u64::from(pixel_value).wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    [(z & 0xFF) as u8, ((z >> 8) & 0xFF) as u8, ((z >> 16) & 0xFF) as u8]
}

fn blend(src: [u8; 3], color: [u8; 3]) -> [u8; 3] {
    let mut out = [0u8; 3];
    for c in 0..3 {
        out[c] = ((u16::from(src[c]) + u16::from(color[c])) / 2) as u8;
    }
    if out == src {
        // blending a colour with itself; force a visible change
        out[0] = src[0] ^ 0x80;
    }
    out
}

/// Tints every token region and writes its text in a 3x5 font at the region's
/// top-left corner. Label pixels are clipped to the region, so only masked
/// pixels ever change.
pub fn render_overlay(record: &TokenRecord) -> RgbImage {
    let mut out = record.image.clone();
    let (w, h) = (record.mask.width, record.mask.height);
    for (i, &v) in record.mask.data.iter().enumerate() {
        if v == 0 {
            continue;
        }
        let (x, y) = (i as u32 % w, i as u32 / w);
        let px = out.get_pixel(x, y).0;
        out.put_pixel(x, y, Rgb(blend(px, tint_color(v))));
    }
    for entry in &record.entries {
        let v = entry.pixel_value;
        let Some((x0, y0)) = (0..h)
            .flat_map(|y| (0..w).map(move |x| (x, y)))
            .find(|&(x, y)| record.mask.data[(y * w + x) as usize] == v)
        else {
            continue;
        };
        let c = tint_color(v);
        let ink = [255 - c[0], 255 - c[1], 255 - c[2]];
        let mut cx = x0;
        for ch in entry.text.chars() {
            if let Some(bits) = glyph(ch) {
                for row in 0..5u32 {
                    for col in 0..3u32 {
                        if bits >> (14 - (row * 3 + col)) & 1 == 0 {
                            continue;
                        }
                        let (x, y) = (cx + col, y0 + row);
                        if x >= w || y >= h || record.mask.data[(y * w + x) as usize] != v {
                            continue;
                        }
                        let src = record.image.get_pixel(x, y).0;
                        let px = if ink == src { blend(src, c) } else { ink };
                        out.put_pixel(x, y, Rgb(px));
                    }
                }
            }
            cx += 4;
            if cx >= w {
                break;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::masks::TokenMaskPair;
    use crate::corpus::record::{assemble_record, RecordParts};
    use crate::tensorcore::BinaryMask;

    fn record(pairs: Vec<TokenMaskPair>) -> TokenRecord {
        let image = RgbImage::from_fn(16, 12, |x, y| Rgb([(x * 13) as u8, (y * 17) as u8, 128]));
        assemble_record(RecordParts {
            image,
            question: String::new(),
            answer: "HI".into(),
            pairs,
            image_type: None,
            bbox: None,
        })
        .unwrap()
        .record
    }

    #[test]
    fn no_tokens_no_change() {
        let r = record(vec![]);
        assert_eq!(render_overlay(&r), r.image);
    }

    #[test]
    fn exactly_masked_pixels_change() {
        let mask = BinaryMask::from_fn(12, 16, |y, x| (2..9).contains(&y) && (3..12).contains(&x));
        let r = record(vec![TokenMaskPair {
            text: "HI".into(),
            token_id: 0,
            index_in_text: 0,
            mask: mask.clone(),
        }]);
        let out = render_overlay(&r);
        for y in 0..12 {
            for x in 0..16 {
                let changed = out.get_pixel(x, y) != r.image.get_pixel(x, y);
                assert_eq!(changed, mask.get(y as usize, x as usize), "({x},{y})");
            }
        }
        assert_eq!(render_overlay(&r).as_raw(), out.as_raw());
    }
}
