use std::path::Path;

use slowfast_tensor::Tensor;

use crate::error::{Error, Result};

/// A stack of RGB frames `[F, 3, H, W]` with values in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentVideo {
    frames: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl LatentVideo {
    pub fn new(frames: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != frames * 3 * height * width {
            return Err(Error::Config(format!(
                "video buffer holds {} values, expected {frames}x3x{height}x{width}",
                data.len()
            )));
        }
        Ok(Self {
            frames,
            height,
            width,
            data,
        })
    }

    pub fn zeros(frames: usize, height: usize, width: usize) -> Self {
        Self {
            frames,
            height,
            width,
            data: vec![0.0; frames * 3 * height * width],
        }
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self::zeros(0, height, width)
    }

    pub fn from_tensor(t: &Tensor<f32>) -> Result<Self> {
        match *t.shape() {
            [f, 3, h, w] => Self::new(f, h, w, t.data().to_vec()),
            ref s => Err(Error::Config(format!("expected [F,3,H,W] video, got {s:?}"))),
        }
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::new(&self.shape(), self.data.clone()).expect("video shape is consistent")
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.frames, 3, self.height, self.width]
    }

    pub fn len(&self) -> usize {
        self.frames
    }

    pub fn is_empty(&self) -> bool {
        self.frames == 0
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn frame_len(&self) -> usize {
        3 * self.height * self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn frame(&self, i: usize) -> &[f32] {
        let n = self.frame_len();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn frames(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.frame_len().max(1)).take(self.frames)
    }

    pub fn push_frame(&mut self, frame: &[f32]) {
        assert_eq!(frame.len(), self.frame_len(), "frame size mismatch");
        self.data.extend_from_slice(frame);
        self.frames += 1;
    }

    pub fn append(&mut self, other: &LatentVideo) {
        assert_eq!(
            (self.height, self.width),
            (other.height, other.width),
            "frame size mismatch"
        );
        self.data.extend_from_slice(&other.data);
        self.frames += other.frames;
    }

    pub fn concat(&self, other: &LatentVideo) -> LatentVideo {
        let mut out = self.clone();
        out.append(other);
        out
    }

    pub fn slice(&self, start: usize, len: usize) -> LatentVideo {
        assert!(start + len <= self.frames, "frame range out of bounds");
        let n = self.frame_len();
        LatentVideo {
            frames: len,
            height: self.height,
            width: self.width,
            data: self.data[start * n..(start + len) * n].to_vec(),
        }
    }

    /// The last `n` frames, or the whole video if it is shorter.
    pub fn tail(&self, n: usize) -> LatentVideo {
        let n = n.min(self.frames);
        self.slice(self.frames - n, n)
    }

    pub fn from_frames<'a>(height: usize, width: usize, frames: impl IntoIterator<Item = &'a [f32]>) -> Self {
        let mut v = Self::empty(height, width);
        for f in frames {
            v.push_frame(f);
        }
        v
    }

    /// Little-endian f32 blob, frames concatenated.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        f32s_to_le(&self.data)
    }

    pub fn from_le_bytes(frames: usize, height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(frames, height, width, le_to_f32s(bytes)?)
    }
}

pub fn f32s_to_le(data: &[f32]) -> Vec<u8> {
    data.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn le_to_f32s(bytes: &[u8]) -> Result<Vec<f32>> {
    if bytes.len() % 4 != 0 {
        return Err(Error::Checkpoint(format!(
            "float blob length {} is not a multiple of 4",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

/// Maps `[-1, 1]` to `0..=255` with rounding and clamping.
pub fn to_u8(v: f32) -> u8 {
    ((v as f64 + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

pub fn from_u8(v: u8) -> f32 {
    (v as f64 / 127.5 - 1.0) as f32
}

/// Planar `[3, H, W]` frame to interleaved 8-bit RGB.
pub fn frame_to_rgb8(frame: &[f32], height: usize, width: usize) -> Vec<u8> {
    let plane = height * width;
    let mut out = Vec::with_capacity(plane * 3);
    for p in 0..plane {
        for c in 0..3 {
            out.push(to_u8(frame[c * plane + p]));
        }
    }
    out
}

pub fn rgb8_to_frame(rgb: &[u8], height: usize, width: usize) -> Vec<f32> {
    let plane = height * width;
    let mut out = vec![0.0; plane * 3];
    for p in 0..plane {
        for c in 0..3 {
            out[c * plane + p] = from_u8(rgb[p * 3 + c]);
        }
    }
    out
}

pub fn encode_png(frame: &[f32], height: usize, width: usize) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut buf, width as u32, height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc
            .write_header()
            .map_err(|e| Error::Config(format!("png: {e}")))?;
        w.write_image_data(&frame_to_rgb8(frame, height, width))
            .map_err(|e| Error::Config(format!("png: {e}")))?;
    }
    Ok(buf)
}

pub fn decode_png(bytes: &[u8]) -> Result<(usize, usize, Vec<f32>)> {
    let dec = png::Decoder::new(std::io::Cursor::new(bytes));
    let mut reader = dec.read_info().map_err(|e| Error::Config(format!("png: {e}")))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Config("png: image too large".into()))?;
    let mut buf = vec![0; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Config(format!("png: {e}")))?;
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Config("png: only 8-bit RGB frames are supported".into()));
    }
    let (h, w) = (info.height as usize, info.width as usize);
    Ok((h, w, rgb8_to_frame(&buf[..h * w * 3], h, w)))
}

pub fn encode_ppm(frame: &[f32], height: usize, width: usize) -> Vec<u8> {
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend(frame_to_rgb8(frame, height, width));
    out
}

pub fn decode_ppm(bytes: &[u8]) -> Result<(usize, usize, Vec<f32>)> {
    let bad = || Error::Config("malformed PPM".into());
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad());
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad())?);
    }
    if fields[0] != "P6" || fields[3] != "255" {
        return Err(bad());
    }
    let w: usize = fields[1].parse().map_err(|_| bad())?;
    let h: usize = fields[2].parse().map_err(|_| bad())?;
    let body = bytes.get(pos + 1..pos + 1 + w * h * 3).ok_or_else(bad)?;
    Ok((h, w, rgb8_to_frame(body, h, w)))
}

/// Writes every frame as `frame_{i:05}.png` into `dir`.
pub fn write_png_frames(video: &LatentVideo, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, f) in video.frames().enumerate() {
        let path = dir.join(format!("frame_{i:05}.png"));
        let bytes = encode_png(f, video.height, video.width)?;
        std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// Reads `*.png` and `*.ppm` frames from `dir` in lexicographic order.
pub fn read_frames(dir: &Path) -> Result<LatentVideo> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("png" | "ppm")))
        .collect();
    paths.sort();
    let mut video: Option<LatentVideo> = None;
    for p in paths {
        let bytes = std::fs::read(&p).map_err(|e| Error::io(&p, e))?;
        let (h, w, frame) = if p.extension().is_some_and(|e| e == "png") {
            decode_png(&bytes)?
        } else {
            decode_ppm(&bytes)?
        };
        let v = video.get_or_insert_with(|| LatentVideo::empty(h, w));
        if (v.height, v.width) != (h, w) {
            return Err(Error::Config(format!("{}: frame size differs", p.display())));
        }
        v.push_frame(&frame);
    }
    video.ok_or(Error::Empty("no frames found"))
}
