//! Binary PGM (P5) and PPM (P6) with maxval 255.

use std::io::{BufRead, Write};

use super::DatasetError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PnmKind {
    /// Single-channel grey.
    Pgm,
    /// Interleaved RGB.
    Ppm,
}

impl PnmKind {
    pub fn channels(&self) -> usize {
        match self {
            PnmKind::Pgm => 1,
            PnmKind::Ppm => 3,
        }
    }

    fn magic(&self) -> &'static str {
        match self {
            PnmKind::Pgm => "P5",
            PnmKind::Ppm => "P6",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PnmImage {
    pub kind: PnmKind,
    pub width: usize,
    pub height: usize,
    /// Raster order; RGB interleaved for PPM.
    pub data: Vec<u8>,
}

impl PnmImage {
    pub fn new(
        kind: PnmKind,
        width: usize,
        height: usize,
        data: Vec<u8>,
    ) -> Result<Self, DatasetError> {
        if width == 0 || height == 0 || data.len() != width * height * kind.channels() {
            return Err(DatasetError::Format(format!(
                "{} bytes for a {width}x{height} {}",
                data.len(),
                kind.magic()
            )));
        }
        Ok(Self {
            kind,
            width,
            height,
            data,
        })
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        write!(
            w,
            "{}\n{} {}\n255\n",
            self.kind.magic(),
            self.width,
            self.height
        )?;
        w.write_all(&self.data)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(self.data.len() + 20);
        self.write_to(&mut buf)
            .expect("writing to a Vec cannot fail");
        buf
    }

    pub fn read_from<R: BufRead>(mut r: R) -> Result<Self, DatasetError> {
        let magic = header_token(&mut r)?;
        let kind = match magic.as_str() {
            "P5" => PnmKind::Pgm,
            "P6" => PnmKind::Ppm,
            other => return Err(DatasetError::Format(format!("unsupported magic `{other}`"))),
        };
        let width = header_number(&mut r)?;
        let height = header_number(&mut r)?;
        let maxval = header_number(&mut r)?;
        if maxval != 255 {
            return Err(DatasetError::Format(format!(
                "maxval {maxval}, expected 255"
            )));
        }
        let mut data = vec![0u8; width * height * kind.channels()];
        r.read_exact(&mut data)
            .map_err(|_| DatasetError::Format("truncated raster".into()))?;
        Self::new(kind, width, height, data)
    }
}

/// Next whitespace-delimited header token, skipping `#` comments. Consumes
/// exactly one whitespace byte after the token, as the format requires
/// before the raster.
fn header_token<R: BufRead>(r: &mut R) -> Result<String, DatasetError> {
    let mut token = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        if r.read(&mut byte)
            .map_err(|e| DatasetError::Format(e.to_string()))?
            == 0
        {
            return Err(DatasetError::Format("truncated header".into()));
        }
        match byte[0] {
            b'#' if token.is_empty() => {
                let mut skip = Vec::new();
                r.read_until(b'\n', &mut skip)
                    .map_err(|e| DatasetError::Format(e.to_string()))?;
            }
            b if b.is_ascii_whitespace() => {
                if !token.is_empty() {
                    break;
                }
            }
            b => token.push(b),
        }
    }
    String::from_utf8(token).map_err(|_| DatasetError::Format("non-ASCII header".into()))
}

fn header_number<R: BufRead>(r: &mut R) -> Result<usize, DatasetError> {
    let tok = header_token(r)?;
    tok.parse()
        .map_err(|_| DatasetError::Format(format!("bad header number `{tok}`")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_both_kinds() {
        let g = PnmImage::new(PnmKind::Pgm, 3, 2, vec![0, 1, 2, 253, 254, 255]).unwrap();
        let bytes = g.to_bytes();
        assert!(bytes.starts_with(b"P5\n3 2\n255\n"));
        assert_eq!(PnmImage::read_from(bytes.as_slice()).unwrap(), g);

        let c = PnmImage::new(PnmKind::Ppm, 1, 2, vec![9, 8, 7, 6, 5, 32]).unwrap();
        assert_eq!(PnmImage::read_from(c.to_bytes().as_slice()).unwrap(), c);
    }

    #[test]
    fn header_comments_and_errors() {
        let raw = b"P5\n# made by hand\n2 1\n255\n\x0a\x0b";
        let g = PnmImage::read_from(&raw[..]).unwrap();
        assert_eq!(g.data, vec![10, 11]);
        assert!(PnmImage::read_from(&b"P5\n2 1\n255\n\x01"[..]).is_err());
        assert!(PnmImage::read_from(&b"P3\n1 1\n255\n1 1 1"[..]).is_err());
        assert!(PnmImage::read_from(&b"P5\n1 1\n65535\n\x00\x00"[..]).is_err());
    }
}
