//! Mask export: a line-oriented run-length text format and binary PGM
//! images for eyeballing.
//!
//! ```text
//! rle 16 16
//! 0 37 4 12 5 ...
//! 1 40 3 ...
//! ```
//!
//! After the `rle H W` header each line is a frame id followed by run
//! lengths over the row-major mask, alternating background and foreground
//! and starting with background (so a leading run may be zero). Runs cover
//! exactly `H * W` pixels.

use std::fmt::Write as _;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct RleMasks {
    pub height: usize,
    pub width: usize,
    /// `(frame_id, mask)` with strictly increasing ids.
    pub frames: Vec<(usize, Vec<bool>)>,
}

pub fn encode_runs(mask: &[bool]) -> Vec<usize> {
    let mut runs = Vec::new();
    let mut current = false;
    let mut len = 0;
    for &m in mask {
        if m == current {
            len += 1;
        } else {
            runs.push(len);
            current = m;
            len = 1;
        }
    }
    runs.push(len);
    runs
}

impl RleMasks {
    pub fn to_text(&self) -> String {
        let mut out = format!("rle {} {}\n", self.height, self.width);
        for (id, mask) in &self.frames {
            let _ = write!(out, "{id}");
            for r in encode_runs(mask) {
                let _ = write!(out, " {r}");
            }
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let bad = |m: String| Error::format("rle masks", m);
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().ok_or_else(|| bad("empty input".into()))?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        let (height, width) = match fields[..] {
            ["rle", h, w] => (
                h.parse::<usize>().map_err(|_| bad("bad height".into()))?,
                w.parse::<usize>().map_err(|_| bad("bad width".into()))?,
            ),
            _ => return Err(bad("expected `rle H W` header".into())),
        };
        let area = height
            .checked_mul(width)
            .filter(|&a| a > 0 && a <= 1 << 24)
            .ok_or_else(|| bad(format!("unsupported extent {height}x{width}")))?;
        let mut frames: Vec<(usize, Vec<bool>)> = Vec::new();
        for (i, line) in lines {
            let mut nums = line.split_whitespace().map(|s| s.parse::<usize>());
            let id = nums
                .next()
                .and_then(|r| r.ok())
                .ok_or_else(|| bad(format!("line {}: bad frame id", i + 1)))?;
            if frames.last().is_some_and(|(prev, _)| *prev >= id) {
                return Err(bad(format!("line {}: frame ids must increase", i + 1)));
            }
            let mut mask = Vec::with_capacity(area);
            let mut value = false;
            for (j, run) in nums.enumerate() {
                let run = run.map_err(|_| bad(format!("line {}: bad run length", i + 1)))?;
                if run == 0 && j > 0 {
                    return Err(bad(format!("line {}: empty run after the first", i + 1)));
                }
                if run > area - mask.len() {
                    return Err(bad(format!("line {}: runs exceed {area} pixels", i + 1)));
                }
                mask.extend(std::iter::repeat(value).take(run));
                value = !value;
            }
            if mask.len() != area {
                return Err(bad(format!("line {}: runs cover {} of {area} pixels", i + 1, mask.len())));
            }
            frames.push((id, mask));
        }
        Ok(RleMasks { height, width, frames })
    }
}

/// Binary (`P5`) graymap of a mask, each cell blown up to `scale x scale`.
pub fn mask_pgm(mask: &[bool], h: usize, w: usize, scale: usize) -> Vec<u8> {
    let (oh, ow) = (h * scale, w * scale);
    let mut out = format!("P5\n{ow} {oh}\n255\n").into_bytes();
    for y in 0..oh {
        for x in 0..ow {
            out.push(if mask[(y / scale) * w + x / scale] { 255 } else { 0 });
        }
    }
    out
}

/// Binary (`P5`) graymap of an RGB frame in `[0, 1]` (channel mean).
pub fn frame_pgm(pixels: &[f64], h: usize, w: usize) -> Vec<u8> {
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    for px in pixels.chunks(3).take(h * w) {
        let v = px.iter().sum::<f64>() / 3.0;
        out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn runs_start_with_background() {
        assert_eq!(encode_runs(&[true, true, false]), vec![0, 2, 1]);
        assert_eq!(encode_runs(&[false, false]), vec![2]);
        assert_eq!(encode_runs(&[false, true, false, true]), vec![1, 1, 1, 1]);
    }

    #[test]
    fn text_example() {
        let masks = RleMasks {
            height: 2,
            width: 3,
            frames: vec![(0, vec![false, true, true, false, false, false]), (4, vec![true; 6])],
        };
        let text = masks.to_text();
        assert_eq!(text, "rle 2 3\n0 1 2 3\n4 0 6\n");
        assert_eq!(RleMasks::parse(&text).unwrap(), masks);
    }

    #[test]
    fn malformed_inputs() {
        for text in [
            "",
            "rle 2\n",
            "rle 0 3\n",
            "rle 2 3\n0 1 2\n",
            "rle 2 3\n0 1 2 4\n",
            "rle 2 3\n0 1 0 5\n",
            "rle 2 3\n1 6\n0 6\n",
            "rle 2 3\nx 6\n",
            "mask 2 3\n",
        ] {
            assert!(RleMasks::parse(text).is_err(), "{text:?}");
        }
    }

    #[test]
    fn pgm_header_and_size() {
        let img = mask_pgm(&[true, false], 1, 2, 2);
        assert!(img.starts_with(b"P5\n4 2\n255\n"));
        assert_eq!(&img[img.len() - 8..], &[255, 255, 0, 0, 255, 255, 0, 0]);
    }

    proptest! {
        #[test]
        fn round_trip(h in 1usize..9, w in 1usize..9, bits in proptest::collection::vec(any::<bool>(), 64 * 3)) {
            let area = h * w;
            let frames: Vec<(usize, Vec<bool>)> = (0..3).map(|f| (2 * f, bits[f * 64..f * 64 + area].to_vec())).collect();
            let masks = RleMasks { height: h, width: w, frames };
            prop_assert_eq!(RleMasks::parse(&masks.to_text()).unwrap(), masks);
        }
    }
}
