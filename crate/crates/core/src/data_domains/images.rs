use std::collections::HashMap;
use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use image::imageops::FilterType;

use crate::error::{Error, Result};

const PACK_MAGIC: &[u8; 8] = b"UDAPACK1";

/// Where a record's pixels come from.
#[derive(Debug, Clone, PartialEq)]
pub enum ImageRef {
    /// An encoded image file, relative to the manifest directory.
    File(PathBuf),
    /// Entry `index` of a precomputed tensor pack, relative to the manifest directory.
    Packed { pack: PathBuf, index: usize },
    /// Precomputed channel-major tensor carried in the manifest itself.
    Inline { shape: [usize; 3], data: Arc<[f32]> },
}

impl ImageRef {
    pub(crate) fn parse_str(s: &str) -> Option<ImageRef> {
        if let Some(rest) = s.strip_prefix("pack:") {
            let (file, index) = rest.rsplit_once('#')?;
            return Some(ImageRef::Packed {
                pack: PathBuf::from(file),
                index: index.parse().ok()?,
            });
        }
        if s.is_empty() {
            return None;
        }
        Some(ImageRef::File(PathBuf::from(s)))
    }

    pub(crate) fn to_json(&self) -> serde_json::Value {
        match self {
            ImageRef::File(p) => serde_json::Value::String(p.to_string_lossy().into_owned()),
            ImageRef::Packed { pack, index } => {
                serde_json::Value::String(format!("pack:{}#{index}", pack.to_string_lossy()))
            }
            ImageRef::Inline { shape, data } => serde_json::json!({
                "shape": shape,
                "data": data.iter().copied().collect::<Vec<f32>>(),
            }),
        }
    }
}

/// Resolution the backbone expects, channel-major.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ImageSpec {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ImageSpec {
    pub fn square(channels: usize, size: usize) -> Self {
        Self {
            channels,
            height: size,
            width: size,
        }
    }

    pub fn numel(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }
}

/// Resolves [`ImageRef`]s to preprocessed tensors.
///
/// Encoded files are decoded, resized to the spec with a triangle filter and
/// mapped from `[0, 1]` to `[-1, 1]`. Packed and inline tensors are taken as
/// already preprocessed and must match the spec exactly.
pub struct ImageLoader {
    spec: ImageSpec,
    base_dir: PathBuf,
    packs: Mutex<HashMap<PathBuf, Arc<Pack>>>,
}

struct Pack {
    shape: [usize; 3],
    data: Vec<f32>,
}

impl ImageLoader {
    pub fn new(spec: ImageSpec, base_dir: impl Into<PathBuf>) -> Self {
        Self {
            spec,
            base_dir: base_dir.into(),
            packs: Mutex::new(HashMap::new()),
        }
    }

    pub fn spec(&self) -> ImageSpec {
        self.spec
    }

    pub fn load(&self, image: &ImageRef) -> Result<Arc<[f32]>> {
        match image {
            ImageRef::Inline { shape, data } => {
                self.check_shape(Path::new("<inline>"), *shape)?;
                Ok(data.clone())
            }
            ImageRef::Packed { pack, index } => {
                let path = self.base_dir.join(pack);
                let pack = self.pack(&path)?;
                self.check_shape(&path, pack.shape)?;
                let n = self.spec.numel();
                let start = index * n;
                let slice = pack
                    .data
                    .get(start..start + n)
                    .ok_or_else(|| Error::Image {
                        path: path.clone(),
                        message: format!("index {index} out of range"),
                    })?;
                Ok(Arc::from(slice))
            }
            ImageRef::File(rel) => {
                let path = self.base_dir.join(rel);
                self.decode(&path).map(Arc::from)
            }
        }
    }

    fn check_shape(&self, path: &Path, shape: [usize; 3]) -> Result<()> {
        if shape != self.spec.shape() {
            return Err(Error::Image {
                path: path.to_path_buf(),
                message: format!(
                    "tensor shape {shape:?} does not match backbone input {:?}",
                    self.spec.shape()
                ),
            });
        }
        Ok(())
    }

    fn pack(&self, path: &Path) -> Result<Arc<Pack>> {
        let mut packs = self.packs.lock().expect("pack cache poisoned");
        if let Some(p) = packs.get(path) {
            return Ok(p.clone());
        }
        let (shape, data) = read_pack(path)?;
        let pack = Arc::new(Pack { shape, data });
        packs.insert(path.to_path_buf(), pack.clone());
        Ok(pack)
    }

    fn decode(&self, path: &Path) -> Result<Vec<f32>> {
        let err = |message: String| Error::Image {
            path: path.to_path_buf(),
            message,
        };
        let img = image::open(path).map_err(|e| err(e.to_string()))?;
        let img = img.resize_exact(
            self.spec.width as u32,
            self.spec.height as u32,
            FilterType::Triangle,
        );
        let (c, h, w) = (self.spec.channels, self.spec.height, self.spec.width);
        let mut out = vec![0f32; c * h * w];
        match c {
            1 => {
                let gray = img.to_luma8();
                for (x, y, p) in gray.enumerate_pixels() {
                    out[y as usize * w + x as usize] = p[0] as f32 / 127.5 - 1.0;
                }
            }
            3 => {
                let rgb = img.to_rgb8();
                for (x, y, p) in rgb.enumerate_pixels() {
                    for ch in 0..3 {
                        out[ch * h * w + y as usize * w + x as usize] = p[ch] as f32 / 127.5 - 1.0;
                    }
                }
            }
            other => return Err(err(format!("unsupported channel count {other}"))),
        }
        Ok(out)
    }
}

/// Writes a tensor pack: magic, `count c h w` as little-endian `u32`, then data.
pub fn write_pack(path: &Path, shape: [usize; 3], images: &[Vec<f32>]) -> Result<()> {
    let n = shape.iter().product::<usize>();
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(PACK_MAGIC)?;
    for v in [images.len(), shape[0], shape[1], shape[2]] {
        w.write_all(&(v as u32).to_le_bytes())?;
    }
    for img in images {
        if img.len() != n {
            return Err(Error::DimensionMismatch {
                what: "packed image",
                expected: n,
                got: img.len(),
            });
        }
        for x in img {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_pack(path: &Path) -> Result<([usize; 3], Vec<f32>)> {
    let err = |message: &str| Error::Image {
        path: path.to_path_buf(),
        message: message.to_string(),
    };
    let mut r = BufReader::new(fs::File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| err("truncated pack"))?;
    if &magic != PACK_MAGIC {
        return Err(err("not a tensor pack"));
    }
    let mut dims = [0usize; 4];
    for d in dims.iter_mut() {
        let mut b = [0u8; 4];
        r.read_exact(&mut b).map_err(|_| err("truncated pack"))?;
        *d = u32::from_le_bytes(b) as usize;
    }
    let total = dims.iter().product::<usize>();
    let mut bytes = Vec::with_capacity(total * 4);
    r.read_to_end(&mut bytes)?;
    if bytes.len() != total * 4 {
        return Err(err("pack size does not match its header"));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(([dims[1], dims[2], dims[3]], data))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pack_roundtrip_and_lookup() {
        let dir = tempfile::tempdir().unwrap();
        let images: Vec<Vec<f32>> = (0..3).map(|i| vec![i as f32; 2 * 2 * 2]).collect();
        write_pack(&dir.path().join("p.bin"), [2, 2, 2], &images).unwrap();
        let loader = ImageLoader::new(ImageSpec::square(2, 2), dir.path());
        let r = ImageRef::parse_str("pack:p.bin#2").unwrap();
        assert_eq!(&*loader.load(&r).unwrap(), &images[2][..]);
        let oob = ImageRef::parse_str("pack:p.bin#3").unwrap();
        assert!(loader.load(&oob).is_err());
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let loader = ImageLoader::new(ImageSpec::square(3, 4), ".");
        let r = ImageRef::Inline {
            shape: [3, 2, 2],
            data: Arc::from(vec![0f32; 12]),
        };
        assert!(loader.load(&r).is_err());
    }

    #[test]
    fn decodes_and_resizes_png() {
        let dir = tempfile::tempdir().unwrap();
        let img = image::RgbImage::from_pixel(8, 8, image::Rgb([255, 0, 0]));
        img.save(dir.path().join("red.png")).unwrap();
        let loader = ImageLoader::new(ImageSpec::square(3, 4), dir.path());
        let px = loader.load(&ImageRef::File("red.png".into())).unwrap();
        assert_eq!(px.len(), 48);
        assert!((px[0] - 1.0).abs() < 1e-6);
        assert!((px[16] + 1.0).abs() < 1e-6);
    }
}
