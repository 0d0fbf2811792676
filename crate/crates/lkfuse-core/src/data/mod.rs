//! Paired-image ingestion, patch sampling and inference assembly.
//!
//! Datasets are two parallel directories with filename-matched pairs (any
//! mismatch is a hard error), or a two-column manifest of relative paths.
//! 8-bit PNG/BMP/JPEG sources decode to `[0,1]` f64; fused outputs are
//! written as PNG.

mod color;
mod sampler;
mod synthetic;

pub use color::{from_luminance, to_luminance};
pub use sampler::{pad_for_inference, pad_to_multiple, sample_training_batch, CropBack, PreparedPairs};
pub use synthetic::{synthetic_color_image, synthetic_pairs};

use crate::error::{Error, Result};
use crate::model::{FusionNet, ImageTensor};
use crate::tensor::Tensor;
use ndarray::{Array2, Array3};
use std::path::{Path, PathBuf};

/// Fusion task family, carried as provenance only; the pipeline treats both
/// identically.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum TaskKind {
    /// Medical image fusion (MRI + CT/PET/SPECT).
    Mif,
    /// Infrared-visible image fusion.
    Ivif,
}

/// Second-modality image: grayscale (CT, gray visible) or color (PET/SPECT
/// pseudo-color, RGB visible).
#[derive(Clone, Debug)]
pub enum ModalImage {
    Gray(Array2<f64>),
    Color(Array3<f64>),
}

impl ModalImage {
    pub fn dims(&self) -> (usize, usize) {
        match self {
            ModalImage::Gray(g) => g.dim(),
            ModalImage::Color(c) => (c.dim().1, c.dim().2),
        }
    }

    pub fn is_color(&self) -> bool {
        matches!(self, ModalImage::Color(_))
    }

    /// Luminance plane; grayscale images pass through unchanged.
    pub fn luminance(&self) -> Result<Array2<f64>> {
        match self {
            ModalImage::Gray(g) => Ok(g.clone()),
            ModalImage::Color(c) => Ok(to_luminance(c)?.0),
        }
    }
}

/// One aligned source pair.
#[derive(Clone, Debug)]
pub struct ImagePair {
    pub id: String,
    pub modal_a: Array2<f64>,
    pub modal_b: ModalImage,
    pub task: TaskKind,
}

impl ImagePair {
    pub fn new(
        id: impl Into<String>,
        modal_a: Array2<f64>,
        modal_b: ModalImage,
        task: TaskKind,
    ) -> Result<Self> {
        if modal_a.dim() != modal_b.dims() {
            return Err(Error::ShapeMismatch {
                context: "image pair",
                expected: format!("{:?}", modal_a.dim()),
                got: format!("{:?}", modal_b.dims()),
            });
        }
        let in_range = |v: &f64| (0.0..=1.0).contains(v) && v.is_finite();
        let b_ok = match &modal_b {
            ModalImage::Gray(g) => g.iter().all(in_range),
            ModalImage::Color(c) => c.iter().all(in_range),
        };
        if !modal_a.iter().all(in_range) || !b_ok {
            return Err(Error::RejectedInput(
                "image pair values must be finite and within [0,1]".into(),
            ));
        }
        Ok(ImagePair {
            id: id.into(),
            modal_a,
            modal_b,
            task,
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        self.modal_a.dim()
    }

    /// Luminance of the second modality (identity for grayscale sources).
    pub fn b_luminance(&self) -> Result<Array2<f64>> {
        self.modal_b.luminance()
    }
}

/// Fusion output for one pair: fused luminance plus the color reconstruction
/// when the second source was color.
#[derive(Clone, Debug)]
pub struct FusedResult {
    pub pair_id: String,
    pub config_fingerprint: String,
    pub fused_y: Array2<f64>,
    pub color: Option<Array3<f64>>,
}

/// Full inference for one pair: pad, forward, crop back, reinject color.
pub fn fuse_pair(net: &FusionNet, pair: &ImagePair) -> Result<FusedResult> {
    let b_y = pair.b_luminance()?;
    let min_dim = net.config().min_input_dim();
    let (input, crop_back) = pad_to_multiple(&pair.modal_a, &b_y, 16, min_dim)?;
    let fused = net.forward(&input)?;
    let fused_y = crop_back.apply(fused.tensor());
    let color = match &pair.modal_b {
        ModalImage::Color(c) => {
            let (_, cb, cr) = to_luminance(c)?;
            Some(from_luminance(&fused_y, &cb, &cr)?)
        }
        ModalImage::Gray(_) => None,
    };
    Ok(FusedResult {
        pair_id: pair.id.clone(),
        config_fingerprint: net.config().fingerprint_hex(),
        fused_y,
        color,
    })
}

// ---------------------------------------------------------------------------
// image IO
// ---------------------------------------------------------------------------

pub fn load_gray_image(path: &Path) -> Result<Array2<f64>> {
    let img = image::open(path)?.to_luma8();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
        img.get_pixel(x as u32, y as u32).0[0] as f64 / 255.0
    }))
}

/// Load the second modality, keeping color when the file has color channels.
pub fn load_modal_image(path: &Path) -> Result<ModalImage> {
    let img = image::open(path)?;
    match &img {
        image::DynamicImage::ImageLuma8(_) | image::DynamicImage::ImageLuma16(_) => {
            Ok(ModalImage::Gray(load_gray_from_dynamic(&img)))
        }
        _ => {
            let rgb = img.to_rgb8();
            let (w, h) = rgb.dimensions();
            let arr = Array3::from_shape_fn((3, h as usize, w as usize), |(c, y, x)| {
                rgb.get_pixel(x as u32, y as u32).0[c] as f64 / 255.0
            });
            Ok(ModalImage::Color(arr))
        }
    }
}

fn load_gray_from_dynamic(img: &image::DynamicImage) -> Array2<f64> {
    let g = img.to_luma8();
    let (w, h) = g.dimensions();
    Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
        g.get_pixel(x as u32, y as u32).0[0] as f64 / 255.0
    })
}

pub fn save_gray_image(path: &Path, img: &Array2<f64>) -> Result<()> {
    let (h, w) = img.dim();
    let mut buf = image::GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let v = (img[[y, x]].clamp(0.0, 1.0) * 255.0).round() as u8;
            buf.put_pixel(x as u32, y as u32, image::Luma([v]));
        }
    }
    buf.save(path)?;
    Ok(())
}

pub fn save_color_image(path: &Path, img: &Array3<f64>) -> Result<()> {
    let (_, h, w) = img.dim();
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [
                (img[[0, y, x]].clamp(0.0, 1.0) * 255.0).round() as u8,
                (img[[1, y, x]].clamp(0.0, 1.0) * 255.0).round() as u8,
                (img[[2, y, x]].clamp(0.0, 1.0) * 255.0).round() as u8,
            ];
            buf.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    buf.save(path)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// dataset layout
// ---------------------------------------------------------------------------

fn image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .map(|e| e.path())
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .map(|e| {
                    matches!(
                        e.to_ascii_lowercase().as_str(),
                        "png" | "jpg" | "jpeg" | "bmp"
                    )
                })
                .unwrap_or(false)
        })
        .collect();
    files.sort();
    Ok(files)
}

/// Load filename-matched pairs from two parallel directories. Any file
/// present on one side only is a hard error.
pub fn load_pair_directories(dir_a: &Path, dir_b: &Path, task: TaskKind) -> Result<Vec<ImagePair>> {
    let files_a = image_files(dir_a)?;
    let files_b = image_files(dir_b)?;
    let names = |files: &[PathBuf]| -> Vec<String> {
        files
            .iter()
            .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
            .collect()
    };
    let (na, nb) = (names(&files_a), names(&files_b));
    if na != nb {
        let only_a: Vec<_> = na.iter().filter(|n| !nb.contains(n)).collect();
        let only_b: Vec<_> = nb.iter().filter(|n| !na.contains(n)).collect();
        return Err(Error::Format(format!(
            "pair directories do not match: only in {}: {:?}; only in {}: {:?}",
            dir_a.display(),
            only_a,
            dir_b.display(),
            only_b
        )));
    }
    if files_a.is_empty() {
        return Err(Error::EmptyInput("pair directories"));
    }
    files_a
        .iter()
        .zip(files_b.iter())
        .map(|(pa, pb)| {
            let a = load_gray_image(pa)?;
            let b = load_modal_image(pb)?;
            let id = pa
                .file_stem()
                .unwrap()
                .to_string_lossy()
                .into_owned();
            ImagePair::new(id, a, b, task)
        })
        .collect()
}

/// Load pairs from a two-column manifest of relative paths (whitespace
/// separated), resolved against the manifest's directory.
pub fn load_manifest(manifest: &Path, task: TaskKind) -> Result<Vec<ImagePair>> {
    let base = manifest.parent().unwrap_or(Path::new("."));
    let text = std::fs::read_to_string(manifest)?;
    let mut pairs = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut cols = line.split_whitespace();
        let (pa, pb) = match (cols.next(), cols.next(), cols.next()) {
            (Some(a), Some(b), None) => (a, b),
            _ => {
                return Err(Error::Format(format!(
                    "manifest line {}: expected exactly two columns",
                    lineno + 1
                )))
            }
        };
        let a = load_gray_image(&base.join(pa))?;
        let b = load_modal_image(&base.join(pb))?;
        let id = Path::new(pa)
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| format!("pair{}", lineno));
        pairs.push(ImagePair::new(id, a, b, task)?);
    }
    if pairs.is_empty() {
        return Err(Error::EmptyInput("manifest"));
    }
    Ok(pairs)
}

/// Splice two aligned planes into a `(1,2,H,W)` model input.
pub fn splice_pair(a: &Array2<f64>, b_y: &Array2<f64>) -> Result<ImageTensor> {
    if a.dim() != b_y.dim() {
        return Err(Error::ShapeMismatch {
            context: "splice_pair",
            expected: format!("{:?}", a.dim()),
            got: format!("{:?}", b_y.dim()),
        });
    }
    let (h, w) = a.dim();
    let mut data = Vec::with_capacity(2 * h * w);
    data.extend(a.iter().copied());
    data.extend(b_y.iter().copied());
    ImageTensor::new(Tensor::new([1, 2, h, w], data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn pair_requires_aligned_dims() {
        let a = Array2::zeros((8, 8));
        let b = ModalImage::Gray(Array2::zeros((8, 9)));
        assert!(ImagePair::new("x", a, b, TaskKind::Mif).is_err());
    }

    #[test]
    fn pair_rejects_out_of_range() {
        let a = Array2::from_elem((4, 4), 1.5);
        let b = ModalImage::Gray(Array2::zeros((4, 4)));
        assert!(matches!(
            ImagePair::new("x", a, b, TaskKind::Mif),
            Err(Error::RejectedInput(_))
        ));
    }

    #[test]
    fn png_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("g.png");
        let img = Array2::from_shape_fn((9, 7), |(y, x)| ((y * 7 + x) % 256) as f64 / 255.0);
        save_gray_image(&path, &img).unwrap();
        let back = load_gray_image(&path).unwrap();
        assert_eq!(back.dim(), (9, 7));
        for (a, b) in img.iter().zip(back.iter()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn color_png_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("c.png");
        let img = synthetic_color_image(16, 3);
        save_color_image(&path, &img).unwrap();
        let back = load_modal_image(&path).unwrap();
        match back {
            ModalImage::Color(c) => {
                for (a, b) in img.iter().zip(c.iter()) {
                    assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
                }
            }
            ModalImage::Gray(_) => panic!("expected color"),
        }
    }

    #[test]
    fn mismatched_directories_are_hard_errors() {
        let dir = tempdir().unwrap();
        let da = dir.path().join("a");
        let db = dir.path().join("b");
        std::fs::create_dir_all(&da).unwrap();
        std::fs::create_dir_all(&db).unwrap();
        let img = Array2::from_elem((8, 8), 0.5);
        save_gray_image(&da.join("p1.png"), &img).unwrap();
        save_gray_image(&db.join("p1.png"), &img).unwrap();
        save_gray_image(&da.join("p2.png"), &img).unwrap();
        let err = load_pair_directories(&da, &db, TaskKind::Mif).unwrap_err();
        assert!(matches!(err, Error::Format(_)));
        assert!(err.to_string().contains("p2.png"));
    }

    #[test]
    fn directory_pairs_load_sorted() {
        let dir = tempdir().unwrap();
        let da = dir.path().join("a");
        let db = dir.path().join("b");
        std::fs::create_dir_all(&da).unwrap();
        std::fs::create_dir_all(&db).unwrap();
        let img = Array2::from_elem((8, 8), 0.25);
        for n in ["x.png", "m.png"] {
            save_gray_image(&da.join(n), &img).unwrap();
            save_gray_image(&db.join(n), &img).unwrap();
        }
        let pairs = load_pair_directories(&da, &db, TaskKind::Ivif).unwrap();
        let ids: Vec<&str> = pairs.iter().map(|p| p.id.as_str()).collect();
        assert_eq!(ids, ["m", "x"]);
    }

    #[test]
    fn manifest_loads_pairs() {
        let dir = tempdir().unwrap();
        let img = Array2::from_elem((8, 8), 0.5);
        save_gray_image(&dir.path().join("a1.png"), &img).unwrap();
        save_gray_image(&dir.path().join("b1.png"), &img).unwrap();
        let manifest = dir.path().join("pairs.txt");
        std::fs::write(&manifest, "# demo\na1.png b1.png\n").unwrap();
        let pairs = load_manifest(&manifest, TaskKind::Mif).unwrap();
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairs[0].id, "a1");
        let bad = dir.path().join("bad.txt");
        std::fs::write(&bad, "only_one_column\n").unwrap();
        assert!(load_manifest(&bad, TaskKind::Mif).is_err());
    }
}
