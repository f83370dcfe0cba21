use serde::{Deserialize, Serialize};

use crate::numkernel::{gelu_scalar, ParamSet, Tensor};

use super::BackboneError;

/// Single-channel image with values in `[0, 1]`, stored row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct SyntheticImage {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
}

impl SyntheticImage {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self, BackboneError> {
        if pixels.len() != height * width {
            return Err(BackboneError::Dimension(format!(
                "{height}x{width} image needs {} pixels, got {}",
                height * width,
                pixels.len()
            )));
        }
        if let Some(bad) = pixels.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(BackboneError::Dimension(format!("pixel value {bad} outside [0, 1]")));
        }
        Ok(Self { height, width, pixels })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            pixels: vec![0.0; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.pixels[r * self.width + c]
    }
}

impl TryFrom<Vec<Vec<f64>>> for SyntheticImage {
    type Error = BackboneError;

    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self, Self::Error> {
        let h = rows.len();
        let w = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != w) {
            return Err(BackboneError::Dimension("ragged image rows".into()));
        }
        Self::new(h, w, rows.into_iter().flatten().collect())
    }
}

impl From<SyntheticImage> for Vec<Vec<f64>> {
    fn from(img: SyntheticImage) -> Self {
        img.pixels.chunks(img.width.max(1)).map(<[f64]>::to_vec).collect()
    }
}

/// Cuts the image into `patch x patch` tiles in row-major tile order; each
/// tile is flattened row-major into one output row.
pub fn patchify(img: &SyntheticImage, patch: usize) -> Result<Tensor, BackboneError> {
    if patch == 0 || img.height % patch != 0 || img.width % patch != 0 {
        return Err(BackboneError::Dimension(format!(
            "{}x{} image not divisible by patch {patch}",
            img.height, img.width
        )));
    }
    let (ph, pw) = (img.height / patch, img.width / patch);
    let mut data = Vec::with_capacity(img.pixels.len());
    for tr in 0..ph {
        for tc in 0..pw {
            for r in 0..patch {
                for c in 0..patch {
                    data.push(img.at(tr * patch + r, tc * patch + c));
                }
            }
        }
    }
    Ok(Tensor::matrix(ph * pw, patch * patch, data).expect("patch layout"))
}

/// Linear patch embedding (`vision.patch.weight`, `vision.patch.bias`).
#[derive(Clone, Debug, PartialEq)]
pub struct VisionEncoder {
    pub patch_size: usize,
    pub weight: Tensor,
    pub bias: Tensor,
}

impl VisionEncoder {
    pub fn from_params(params: &ParamSet, patch_size: usize) -> Result<Self, BackboneError> {
        Ok(Self {
            patch_size,
            weight: params.tensor("vision.patch.weight")?.clone(),
            bias: params.tensor("vision.patch.bias")?.clone(),
        })
    }

    pub fn d_vision(&self) -> usize {
        self.weight.cols()
    }
}

fn affine(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor, BackboneError> {
    if x.cols() != w.rows() || b.len() != w.cols() {
        return Err(BackboneError::Dimension(format!(
            "input width {} vs weight {:?}",
            x.cols(),
            w.shape()
        )));
    }
    let (m, k, n) = (x.rows(), x.cols(), w.cols());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for p in 0..k {
                acc += x.get(i, p) * w.get(p, j);
            }
            out[i * n + j] = acc + b.data()[j];
        }
    }
    Ok(Tensor::matrix(m, n, out).expect("affine shape"))
}

/// Image token matrix `(n_patches x d_vision)`; row `i` embeds patch `i`.
pub fn encode_image(img: &SyntheticImage, enc: &VisionEncoder) -> Result<Tensor, BackboneError> {
    let patches = patchify(img, enc.patch_size)?;
    if patches.cols() != enc.weight.rows() {
        return Err(BackboneError::Dimension(format!(
            "patch dim {} vs encoder input {}",
            patches.cols(),
            enc.weight.rows()
        )));
    }
    affine(&patches, &enc.weight, &enc.bias)
}

/// Two linear layers with GeLU between, `d_vision -> d_model -> d_model`.
#[derive(Clone, Debug, PartialEq)]
pub struct Projector {
    pub fc1_weight: Tensor,
    pub fc1_bias: Tensor,
    pub fc2_weight: Tensor,
    pub fc2_bias: Tensor,
}

impl Projector {
    pub fn from_params(params: &ParamSet) -> Result<Self, BackboneError> {
        Ok(Self {
            fc1_weight: params.tensor("projector.fc1.weight")?.clone(),
            fc1_bias: params.tensor("projector.fc1.bias")?.clone(),
            fc2_weight: params.tensor("projector.fc2.weight")?.clone(),
            fc2_bias: params.tensor("projector.fc2.bias")?.clone(),
        })
    }
}

/// Maps image tokens into the language model's embedding space.
pub fn project(tokens: &Tensor, proj: &Projector) -> Result<Tensor, BackboneError> {
    let h = affine(tokens, &proj.fc1_weight, &proj.fc1_bias)?;
    let data = h.data().iter().map(|&v| gelu_scalar(v)).collect();
    let h = Tensor::new(h.shape().to_vec(), data).expect("same shape");
    affine(&h, &proj.fc2_weight, &proj.fc2_bias)
}
