//! 8-bit grayscale PGM (binary `P5`) and PNG files with a sidecar text file
//! recording the linear window used for quantization.

use std::fs;
use std::path::{Path, PathBuf};

use eqimaging::{Error, Result, Scalar, Tensor};

/// Values in `[lo, hi]` map linearly onto `0..=255`; values outside clip.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Window {
    pub lo: f64,
    pub hi: f64,
}

impl Window {
    pub fn unit() -> Self {
        Self { lo: 0.0, hi: 1.0 }
    }

    fn check(&self) -> Result<()> {
        if !(self.hi > self.lo) || !self.lo.is_finite() || !self.hi.is_finite() {
            return Err(Error::InvalidArgument(format!("bad window [{}, {}]", self.lo, self.hi)));
        }
        Ok(())
    }

    fn quantize(&self, v: f64) -> u8 {
        let t = ((v - self.lo) / (self.hi - self.lo)).clamp(0.0, 1.0);
        (t * 255.0).round() as u8
    }

    fn dequantize(&self, b: u8) -> f64 {
        self.lo + (self.hi - self.lo) * b as f64 / 255.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ImageFormat {
    Pgm,
    Png,
}

impl ImageFormat {
    pub fn from_path(path: &Path) -> Result<Self> {
        match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
            Some("pgm") => Ok(Self::Pgm),
            Some("png") => Ok(Self::Png),
            other => Err(Error::Format(format!(
                "{}: unknown image extension {:?}; expected .pgm or .png",
                path.display(),
                other.unwrap_or("")
            ))),
        }
    }

    pub fn extension(&self) -> &'static str {
        match self {
            Self::Pgm => "pgm",
            Self::Png => "png",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Self::from_path(Path::new(&format!("x.{name}")))
    }
}

/// `image.png` -> `image.png.txt`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".txt");
    PathBuf::from(s)
}

fn image_dims<T: Scalar>(t: &Tensor<T>) -> Result<(usize, usize)> {
    match t.shape() {
        [h, w] | [1, h, w] => Ok((*h, *w)),
        s => Err(Error::InvalidShape {
            shape: s.to_vec(),
            reason: "expected a [H, W] or [1, H, W] image".into(),
        }),
    }
}

pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// Parses a binary 8-bit PGM; returns `(width, height, pixels)`.
pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let mut pos = 0usize;
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(Error::Format("PGM: expected magic `P5` at byte offset 0".into()));
    }
    pos += 2;
    let mut fields = [0usize; 3];
    for (i, field) in fields.iter_mut().enumerate() {
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format(format!(
                "PGM: expected {} at byte offset {start}",
                ["width", "height", "maxval"][i]
            )));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .expect("digits")
            .parse()
            .map_err(|_| Error::Format(format!("PGM: number too large at byte offset {start}")))?;
    }
    let [width, height, maxval] = fields;
    if maxval == 0 || maxval > 255 {
        return Err(Error::Format(format!("PGM: maxval {maxval} unsupported; only 8-bit files are read")));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::Format(format!("PGM: expected whitespace after the header at byte offset {pos}")));
    }
    pos += 1;
    let expected = width * height;
    let actual = bytes.len() - pos;
    if actual < expected {
        return Err(Error::Format(format!(
            "PGM: truncated payload at byte offset {pos}: expected {expected} bytes, found {actual}"
        )));
    }
    let mut pixels = bytes[pos..pos + expected].to_vec();
    if maxval != 255 {
        for p in &mut pixels {
            *p = ((*p as f64) * 255.0 / maxval as f64).round().min(255.0) as u8;
        }
    }
    Ok((width, height, pixels))
}

pub fn encode_png(width: usize, height: usize, pixels: &[u8]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| Error::Format(format!("PNG: {e}")))?;
        writer.write_image_data(pixels).map_err(|e| Error::Format(format!("PNG: {e}")))?;
    }
    Ok(out)
}

/// Decodes an 8-bit PNG; color images are converted to luma.
pub fn decode_png(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let mut dec = png::Decoder::new(bytes);
    dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = dec.read_info().map_err(|e| Error::Format(format!("PNG: {e}")))?;
    let mut buf = vec![0u8; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::Format(format!("PNG: {e}")))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let channels = info.color_type.samples();
    let line = info.line_size;
    let mut pixels = Vec::with_capacity(w * h);
    for r in 0..h {
        for c in 0..w {
            let px = &buf[r * line + c * channels..r * line + (c + 1) * channels];
            pixels.push(match channels {
                1 | 2 => px[0],
                _ => (0.299 * px[0] as f64 + 0.587 * px[1] as f64 + 0.114 * px[2] as f64).round() as u8,
            });
        }
    }
    Ok((w, h, pixels))
}

/// Writes `image` (`[H, W]` or `[1, H, W]`) and its sidecar. `notes` are
/// extra `key = value` lines for the sidecar.
pub fn write_image<T: Scalar>(path: impl AsRef<Path>, image: &Tensor<T>, window: Window, notes: &[(&str, String)]) -> Result<()> {
    let path = path.as_ref();
    window.check()?;
    let format = ImageFormat::from_path(path)?;
    let (h, w) = image_dims(image)?;
    let pixels: Vec<u8> = image.data().iter().map(|v| window.quantize(v.as_f64())).collect();
    let bytes = match format {
        ImageFormat::Pgm => encode_pgm(w, h, &pixels),
        ImageFormat::Png => encode_png(w, h, &pixels)?,
    };
    fs::write(path, bytes)?;
    let mut side = format!("window_lo = {}\nwindow_hi = {}\n", window.lo, window.hi);
    for (k, v) in notes {
        side.push_str(&format!("{k} = {v}\n"));
    }
    fs::write(sidecar_path(path), side)?;
    Ok(())
}

/// Reads a window from a sidecar file, if one exists.
pub fn read_window(path: &Path) -> Result<Option<Window>> {
    let side = sidecar_path(path);
    if !side.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&side)?;
    let mut lo = None;
    let mut hi = None;
    for line in text.lines() {
        if let Some((k, v)) = line.split_once('=') {
            let v: Option<f64> = v.trim().parse().ok();
            match k.trim() {
                "window_lo" => lo = v,
                "window_hi" => hi = v,
                _ => {}
            }
        }
    }
    match (lo, hi) {
        (Some(lo), Some(hi)) => Ok(Some(Window { lo, hi })),
        _ => Err(Error::Format(format!("{}: sidecar lacks window_lo/window_hi", side.display()))),
    }
}

/// Reads a `[1, H, W]` image, undoing the sidecar window (unit window if absent).
pub fn read_image<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    let path = path.as_ref();
    let format = ImageFormat::from_path(path)?;
    let bytes = fs::read(path)?;
    let (w, h, pixels) = match format {
        ImageFormat::Pgm => decode_pgm(&bytes),
        ImageFormat::Png => decode_png(&bytes),
    }
    .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let window = read_window(path)?.unwrap_or_else(Window::unit);
    Tensor::new(vec![1, h, w], pixels.iter().map(|&b| T::lit(window.dequantize(b))).collect())
}

/// Every `.pgm`/`.png` file in `dir`, sorted by name.
pub fn read_image_dir<T: Scalar>(dir: impl AsRef<Path>) -> Result<Vec<Tensor<T>>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir.as_ref())?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| ImageFormat::from_path(p).is_ok())
        .collect();
    paths.sort();
    paths.iter().map(read_image).collect()
}
