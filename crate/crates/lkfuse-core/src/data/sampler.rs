//! Random patch sampling for training and mirror padding for inference.

use super::ImagePair;
use crate::error::{Error, Result};
use crate::model::ImageTensor;
use crate::tensor::Tensor;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

/// Pairs with their second-modality luminance extracted once.
pub struct PreparedPairs {
    pub ids: Vec<String>,
    pub a: Vec<Array2<f64>>,
    pub b_y: Vec<Array2<f64>>,
}

impl PreparedPairs {
    pub fn from_pairs(pairs: &[ImagePair]) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::EmptyInput("pair list"));
        }
        let mut ids = Vec::with_capacity(pairs.len());
        let mut a = Vec::with_capacity(pairs.len());
        let mut b_y = Vec::with_capacity(pairs.len());
        for p in pairs {
            ids.push(p.id.clone());
            a.push(p.modal_a.clone());
            b_y.push(p.b_luminance()?);
        }
        Ok(PreparedPairs { ids, a, b_y })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Draw a `(batch, 2, crop, crop)` tensor of random crops: uniform pair
    /// choice, uniform crop origin; channel 0 is modality A, channel 1 the
    /// B luminance.
    pub fn sample_batch(&self, crop: usize, batch: usize, rng: &mut ChaCha12Rng) -> Result<ImageTensor> {
        for img in &self.a {
            let (h, w) = img.dim();
            if crop > h || crop > w {
                return Err(Error::RejectedInput(format!(
                    "crop {crop} exceeds image dims {h}x{w}"
                )));
            }
        }
        let plane = crop * crop;
        let mut data = vec![0.0f64; batch * 2 * plane];
        for bi in 0..batch {
            let pi = rng.random_range(0..self.len());
            let (h, w) = self.a[pi].dim();
            let oy = rng.random_range(0..=h - crop);
            let ox = rng.random_range(0..=w - crop);
            let base = bi * 2 * plane;
            for y in 0..crop {
                for x in 0..crop {
                    data[base + y * crop + x] = self.a[pi][[oy + y, ox + x]];
                    data[base + plane + y * crop + x] = self.b_y[pi][[oy + y, ox + x]];
                }
            }
        }
        ImageTensor::new(Tensor::new([batch, 2, crop, crop], data))
    }
}

/// One-shot batch sampling (prepares luminances internally); deterministic
/// for a fixed seed.
pub fn sample_training_batch(
    pairs: &[ImagePair],
    crop: usize,
    batch: usize,
    seed: u64,
) -> Result<ImageTensor> {
    let prepared = PreparedPairs::from_pairs(pairs)?;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    prepared.sample_batch(crop, batch, &mut rng)
}

/// Record needed to restore original dims after fusing a padded input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropBack {
    pub height: usize,
    pub width: usize,
}

impl CropBack {
    /// Crop a `(1,1,H',W')` fused tensor back to the original dims.
    pub fn apply(&self, fused: &Tensor) -> Array2<f64> {
        let [_, _, _, wp] = fused.shape();
        Array2::from_shape_fn((self.height, self.width), |(y, x)| {
            fused.data()[y * wp + x]
        })
    }
}

fn mirror_fold(i: usize, n: usize) -> usize {
    // symmetric (edge-inclusive) fold of an index beyond the right border
    let mut j = i as isize;
    let n = n as isize;
    loop {
        if j >= n {
            j = 2 * n - 1 - j;
        } else if j < 0 {
            j = -j - 1;
        } else {
            return j as usize;
        }
    }
}

/// Mirror-pad a source pair on the right/bottom so both dims are multiples
/// of `multiple` and at least `min_dim`, splice it into a model input, and
/// return the crop-back record for the original size.
pub fn pad_to_multiple(
    a: &Array2<f64>,
    b_y: &Array2<f64>,
    multiple: usize,
    min_dim: usize,
) -> Result<(ImageTensor, CropBack)> {
    if a.dim() != b_y.dim() {
        return Err(Error::ShapeMismatch {
            context: "pad_for_inference",
            expected: format!("{:?}", a.dim()),
            got: format!("{:?}", b_y.dim()),
        });
    }
    let (h, w) = a.dim();
    if h == 0 || w == 0 {
        return Err(Error::EmptyInput("pad_for_inference"));
    }
    let target = |n: usize| n.div_ceil(multiple).max(min_dim.div_ceil(multiple)) * multiple;
    let (hp, wp) = (target(h), target(w));
    let pad_plane = |img: &Array2<f64>| {
        Array2::from_shape_fn((hp, wp), |(y, x)| img[[mirror_fold(y, h), mirror_fold(x, w)]])
    };
    let (pa, pb) = (pad_plane(a), pad_plane(b_y));
    let mut data = Vec::with_capacity(2 * hp * wp);
    data.extend(pa.iter().copied());
    data.extend(pb.iter().copied());
    let tensor = ImageTensor::new(Tensor::new([1, 2, hp, wp], data))?;
    Ok((
        tensor,
        CropBack {
            height: h,
            width: w,
        },
    ))
}

/// Pad a pair to the next multiple of 16 (the model's downsampling contract).
pub fn pad_for_inference(
    a: &Array2<f64>,
    b_y: &Array2<f64>,
) -> Result<(ImageTensor, CropBack)> {
    pad_to_multiple(a, b_y, 16, 16)
}
