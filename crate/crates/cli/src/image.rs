//! Plain ASCII PGM (`P2`) and PPM (`P3`) images with maxval 255.
//!
//! Samples map linearly to `[0, 1]`; writing clamps and rounds, so a file read
//! and written back is reproduced exactly.

use std::fmt::Write as _;
use std::path::Path;

use keysem_core::{FeatureMap, Matrix};

#[derive(Debug, thiserror::Error)]
pub enum ImageError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("image must have 1 (PGM) or 3 (PPM) channels, got {0}")]
    Channels(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

const MAXVAL: u32 = 255;

/// Whitespace-separated tokens with `#` comments stripped, each tagged with
/// its 1-based line number.
fn tokens(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines().enumerate().flat_map(|(i, line)| {
        let body = line.split('#').next().unwrap_or("");
        body.split_whitespace().map(move |t| (i + 1, t))
    })
}

pub fn parse(text: &str) -> Result<FeatureMap, ImageError> {
    let mut toks = tokens(text);
    let last_line = text.lines().count().max(1);
    let mut next = |what: &str| toks.next().ok_or(ImageError::Parse {
        line: last_line,
        msg: format!("unexpected end of file, expected {what}"),
    });
    let (line, magic) = next("magic number")?;
    let channels = match magic {
        "P2" => 1,
        "P3" => 3,
        other => {
            return Err(ImageError::Parse {
                line,
                msg: format!("expected P2 or P3, found {other:?}"),
            })
        }
    };
    let mut number = |what: &str| -> Result<(usize, u32), ImageError> {
        let (line, t) = next(what)?;
        let v = t.parse().map_err(|_| ImageError::Parse {
            line,
            msg: format!("expected {what}, found {t:?}"),
        })?;
        Ok((line, v))
    };
    let (_, width) = number("width")?;
    let (line, height) = number("height")?;
    if width == 0 || height == 0 {
        return Err(ImageError::Parse { line, msg: "zero image dimension".into() });
    }
    let (width, height) = (width as usize, height as usize);
    let (line, maxval) = number("maxval")?;
    if maxval != MAXVAL {
        return Err(ImageError::Parse {
            line,
            msg: format!("maxval must be {MAXVAL}, found {maxval}"),
        });
    }
    let mut data = Vec::with_capacity(width * height * channels);
    for _ in 0..width * height * channels {
        let (line, v) = number("sample")?;
        if v > MAXVAL {
            return Err(ImageError::Parse {
                line,
                msg: format!("sample {v} exceeds maxval"),
            });
        }
        data.push(v as f64 / MAXVAL as f64);
    }
    let pixels = Matrix::new(width * height, channels, data).expect("sample count matches shape");
    Ok(FeatureMap::new(height, width, pixels).expect("pixel rows match dimensions"))
}

pub fn format(img: &FeatureMap) -> Result<String, ImageError> {
    let magic = match img.channels() {
        1 => "P2",
        3 => "P3",
        c => return Err(ImageError::Channels(c)),
    };
    let mut s = format!("{magic}\n{} {}\n{MAXVAL}\n", img.width(), img.height());
    for y in 0..img.height() {
        let row: Vec<String> = (0..img.width())
            .flat_map(|x| img.at(y, x).iter().map(|&v| quantize(v).to_string()).collect::<Vec<_>>())
            .collect();
        writeln!(s, "{}", row.join(" ")).unwrap();
    }
    Ok(s)
}

fn quantize(v: f64) -> u32 {
    (v.clamp(0.0, 1.0) * MAXVAL as f64).round() as u32
}

pub fn read(path: &Path) -> Result<FeatureMap, ImageError> {
    parse(&std::fs::read_to_string(path)?)
}

pub fn write(path: &Path, img: &FeatureMap) -> Result<(), ImageError> {
    Ok(std::fs::write(path, format(img)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_written_pgm() {
        let img = parse("P2\n# tiny\n2 2\n255\n0 255\n51 102\n").unwrap();
        assert_eq!((img.height(), img.width(), img.channels()), (2, 2, 1));
        assert_eq!(img.pixels().data(), &[0.0, 1.0, 0.2, 0.4]);
    }

    #[test]
    fn ppm_round_trip() {
        let text = "P3\n2 1\n255\n1 2 3 250 251 252\n";
        let img = parse(text).unwrap();
        assert_eq!(img.at(0, 1), &[250.0 / 255.0, 251.0 / 255.0, 252.0 / 255.0]);
        assert_eq!(format(&img).unwrap(), text);
    }

    #[test]
    fn round_trip_is_exact_at_eight_bits() {
        let data: Vec<f64> = (0..=255).map(|v| v as f64 / 255.0).collect();
        let img = FeatureMap::new(16, 16, Matrix::new(256, 1, data).unwrap()).unwrap();
        assert_eq!(parse(&format(&img).unwrap()).unwrap(), img);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let err = |t: &str| match parse(t) {
            Err(ImageError::Parse { line, .. }) => line,
            other => panic!("expected parse error, got {other:?}"),
        };
        assert_eq!(err("P5\n1 1\n255\n0\n"), 1);
        assert_eq!(err("P2\n1 x\n255\n0\n"), 2);
        assert_eq!(err("P2\n1 1\n# c\n16\n0\n"), 4);
        assert_eq!(err("P2\n2 1\n255\n0\n"), 4);
    }

    #[test]
    fn writing_clamps() {
        let img = FeatureMap::new(1, 2, Matrix::new(2, 1, vec![-0.3, 1.7]).unwrap()).unwrap();
        assert_eq!(format(&img).unwrap(), "P2\n2 1\n255\n0 255\n");
    }
}
