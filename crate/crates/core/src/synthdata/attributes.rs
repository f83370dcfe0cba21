use std::f64::consts::PI;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::backbone::SyntheticImage;
use crate::numkernel::SplitMix64;

use super::SynthError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Modality {
    #[serde(rename = "CT")]
    Ct,
    #[serde(rename = "MRI")]
    Mri,
    #[serde(rename = "X-ray")]
    XRay,
    #[serde(rename = "Pathology")]
    Pathology,
}

impl Modality {
    pub const ALL: [Modality; 4] = [Modality::Ct, Modality::Mri, Modality::XRay, Modality::Pathology];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    /// Label used in files and reports.
    pub fn label(self) -> &'static str {
        match self {
            Modality::Ct => "CT",
            Modality::Mri => "MRI",
            Modality::XRay => "X-ray",
            Modality::Pathology => "Pathology",
        }
    }

    pub fn from_label(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.label() == s)
    }

    /// Word used inside generated text.
    pub fn word(self) -> &'static str {
        match self {
            Modality::Ct => "ct",
            Modality::Mri => "mri",
            Modality::XRay => "x-ray",
            Modality::Pathology => "pathology",
        }
    }

    pub fn from_word(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.word() == s)
    }

    /// Zero-mean period-4 texture value at pixel `(i, j)`: horizontal bands,
    /// vertical bands, diagonal bands, or a checkerboard.
    pub fn texture(self, i: usize, j: usize) -> f64 {
        let (i, j) = (i as f64, j as f64);
        match self {
            Modality::Ct => (PI * i / 2.0).cos(),
            Modality::Mri => (PI * j / 2.0).cos(),
            Modality::XRay => (PI * (i + j) / 2.0).cos(),
            Modality::Pathology => (PI * (i + j)).cos(),
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Organ {
    Brain,
    Lung,
    Liver,
    Kidney,
}

impl Organ {
    pub const ALL: [Organ; 4] = [Organ::Brain, Organ::Lung, Organ::Liver, Organ::Kidney];

    pub fn word(self) -> &'static str {
        match self {
            Organ::Brain => "brain",
            Organ::Lung => "lung",
            Organ::Liver => "liver",
            Organ::Kidney => "kidney",
        }
    }

    pub fn from_word(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|o| o.word() == s)
    }

    /// Background brightness encoding the organ class.
    pub fn brightness(self) -> f64 {
        match self {
            Organ::Brain => 0.2,
            Organ::Lung => 0.35,
            Organ::Liver => 0.5,
            Organ::Kidney => 0.65,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Shape {
    Square,
    Round,
}

impl Shape {
    pub fn word(self) -> &'static str {
        match self {
            Shape::Square => "square",
            Shape::Round => "round",
        }
    }

    /// Offsets inside the 3x3 bounding box.
    fn cells(self) -> &'static [(usize, usize)] {
        match self {
            Shape::Square => &[(0, 0), (0, 1), (0, 2), (1, 0), (1, 1), (1, 2), (2, 0), (2, 1), (2, 2)],
            Shape::Round => &[(0, 1), (1, 0), (1, 1), (1, 2), (2, 1)],
        }
    }
}

/// Which quarter of the image holds the lesions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Quadrant {
    pub upper: bool,
    pub left: bool,
}

impl Quadrant {
    pub const ALL: [Quadrant; 4] = [
        Quadrant { upper: true, left: true },
        Quadrant { upper: true, left: false },
        Quadrant { upper: false, left: true },
        Quadrant { upper: false, left: false },
    ];

    pub fn vertical(self) -> &'static str {
        if self.upper {
            "upper"
        } else {
            "lower"
        }
    }

    pub fn horizontal(self) -> &'static str {
        if self.left {
            "left"
        } else {
            "right"
        }
    }
}

/// Everything the generated text may talk about.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Attributes {
    pub modality: Modality,
    pub organ: Organ,
    pub shape: Shape,
    pub count: usize,
    pub quadrant: Quadrant,
}

impl Attributes {
    /// All 256 combinations in a fixed order.
    pub fn all() -> Vec<Attributes> {
        let mut v = Vec::new();
        for modality in Modality::ALL {
            for organ in Organ::ALL {
                for shape in [Shape::Square, Shape::Round] {
                    for count in [1, 2] {
                        for quadrant in Quadrant::ALL {
                            v.push(Attributes {
                                modality,
                                organ,
                                shape,
                                count,
                                quadrant,
                            });
                        }
                    }
                }
            }
        }
        v
    }
}

pub const IMAGE_SIZE: usize = 16;
const TEXTURE_AMP: f64 = 0.15;
const NOISE_STD: f64 = 0.01;
const LESION: f64 = 1.0;
const BACKGROUND_MAX: f64 = 0.9;

/// Draws a 16x16 image with the given attributes. Background pixels stay in
/// `[0, 0.9]`; lesion pixels are exactly `1.0`.
pub fn render(attrs: &Attributes, rng: &mut SplitMix64) -> SyntheticImage {
    let n = IMAGE_SIZE;
    let mut px = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let v = attrs.organ.brightness() + TEXTURE_AMP * attrs.modality.texture(i, j) + NOISE_STD * rng.normal();
            px[i * n + j] = v.clamp(0.0, BACKGROUND_MAX);
        }
    }
    let half = n / 2;
    let r_off = if attrs.quadrant.upper { 0 } else { half };
    let c_off = if attrs.quadrant.left { 0 } else { half };
    let r0 = rng.below(half - 2);
    let c0 = if attrs.count == 1 { rng.below(half - 2) } else { rng.below(half - 6) };
    for b in 0..attrs.count {
        for &(dr, dc) in attrs.shape.cells() {
            px[(r_off + r0 + dr) * n + c_off + c0 + 4 * b + dc] = LESION;
        }
    }
    SyntheticImage::new(n, n, px).expect("rendered pixels are in range")
}

/// Recovers the attributes from pixels alone: lesion components by
/// 4-connectivity on pixels equal to 1, organ from the mean background
/// level, modality from the best-correlated texture.
pub fn derive_attributes(img: &SyntheticImage) -> Result<Attributes, SynthError> {
    let (h, w) = (img.height(), img.width());
    let lesion: Vec<bool> = img.pixels().iter().map(|&v| v >= 0.95).collect();
    let mut seen = vec![false; h * w];
    let mut comps: Vec<Vec<(usize, usize)>> = Vec::new();
    for start in 0..h * w {
        if !lesion[start] || seen[start] {
            continue;
        }
        let mut stack = vec![start];
        seen[start] = true;
        let mut comp = Vec::new();
        while let Some(p) = stack.pop() {
            let (r, c) = (p / w, p % w);
            comp.push((r, c));
            let mut nb = Vec::with_capacity(4);
            if r > 0 {
                nb.push(p - w);
            }
            if r + 1 < h {
                nb.push(p + w);
            }
            if c > 0 {
                nb.push(p - 1);
            }
            if c + 1 < w {
                nb.push(p + 1);
            }
            for q in nb {
                if lesion[q] && !seen[q] {
                    seen[q] = true;
                    stack.push(q);
                }
            }
        }
        comps.push(comp);
    }
    if comps.is_empty() || comps.len() > 2 {
        return Err(SynthError::Oracle(format!("{} lesion components", comps.len())));
    }
    let shape = match comps[0].len() {
        9 => Shape::Square,
        5 => Shape::Round,
        n => return Err(SynthError::Oracle(format!("lesion of {n} pixels"))),
    };
    if comps.iter().any(|c| c.len() != comps[0].len()) {
        return Err(SynthError::Oracle("lesions differ in shape".into()));
    }
    let centroid = |c: &[(usize, usize)]| {
        let n = c.len() as f64;
        (
            c.iter().map(|p| p.0 as f64).sum::<f64>() / n,
            c.iter().map(|p| p.1 as f64).sum::<f64>() / n,
        )
    };
    let quads: Vec<Quadrant> = comps
        .iter()
        .map(|c| {
            let (r, col) = centroid(c);
            Quadrant {
                upper: r < h as f64 / 2.0,
                left: col < w as f64 / 2.0,
            }
        })
        .collect();
    if quads.iter().any(|q| *q != quads[0]) {
        return Err(SynthError::Oracle("lesions span quadrants".into()));
    }
    let background: Vec<(usize, f64)> = img
        .pixels()
        .iter()
        .enumerate()
        .filter(|(i, _)| !lesion[*i])
        .map(|(i, &v)| (i, v))
        .collect();
    let mean = background.iter().map(|p| p.1).sum::<f64>() / background.len() as f64;
    let organ = Organ::ALL
        .into_iter()
        .min_by(|a, b| {
            (a.brightness() - mean)
                .abs()
                .partial_cmp(&(b.brightness() - mean).abs())
                .expect("finite")
        })
        .expect("non-empty");
    let modality = Modality::ALL
        .into_iter()
        .map(|m| {
            let s: f64 = background.iter().map(|&(i, v)| (v - mean) * m.texture(i / w, i % w)).sum();
            (m, s)
        })
        .fold(None, |best: Option<(Modality, f64)>, (m, s)| match best {
            Some((_, bs)) if bs >= s => best,
            _ => Some((m, s)),
        })
        .expect("non-empty")
        .0;
    Ok(Attributes {
        modality,
        organ,
        shape,
        count: comps.len(),
        quadrant: quads[0],
    })
}
