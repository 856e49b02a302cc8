//! Saliency and feature-redundancy tools for trained networks.
//!
//! [`grad_cam`] weights the raw maps of a convolutional stage by the
//! spatial mean of the output's gradient with respect to each map, keeps
//! the positive part of the sum, upsamples it bilinearly to the input size
//! and divides by its maximum. The output is the single mass prediction,
//! so no class score is involved.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{write_json, Image, ImageDims};
use crate::error::{Error, Result};
use crate::model::{
    Activation, ArchConfig, BlockSpec, ConvSpec, FeatureMaps, HeadSpec, InitScheme, ModelParams, Network, OutputKind,
    Real,
};

/// Pixel-difference threshold of [`feature_similarity`].
pub const DEFAULT_DIFF_THRESHOLD: f64 = 0.1;

/// A saliency map at input resolution with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub layer: String,
    pub height: usize,
    pub width: usize,
    /// Row-major.
    pub values: Vec<f64>,
    /// Minimum and maximum of the upsampled map before normalization.
    pub raw_min: f64,
    pub raw_max: f64,
    /// Resolution of the stage the map was taken from.
    pub source_height: usize,
    pub source_width: usize,
}

/// JSON written next to a heatmap image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeatmapSidecar {
    pub layer: String,
    pub height: usize,
    pub width: usize,
    pub raw_min: f64,
    pub raw_max: f64,
    pub normalized: bool,
    pub source_height: usize,
    pub source_width: usize,
    pub image: String,
}

impl Heatmap {
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|v| *v == 0.0)
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    /// Row and column of the largest value (first one on ties).
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = 0;
        for (i, v) in self.values.iter().enumerate() {
            if *v > self.values[best] {
                best = i;
            }
        }
        (best / self.width, best % self.width)
    }

    /// Share of the total heat inside `q`.
    pub fn quadrant_share(&self, q: Quadrant) -> f64 {
        let total = self.sum();
        if total == 0.0 {
            return 0.0;
        }
        let mut inside = 0.0;
        for r in 0..self.height {
            for c in 0..self.width {
                if q.contains(r, c, self.height, self.width) {
                    inside += self.get(r, c);
                }
            }
        }
        inside / total
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.values.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
    }

    pub fn sidecar(&self, image_file: &str) -> HeatmapSidecar {
        HeatmapSidecar {
            layer: self.layer.clone(),
            height: self.height,
            width: self.width,
            raw_min: self.raw_min,
            raw_max: self.raw_max,
            normalized: self.raw_max > 0.0,
            source_height: self.source_height,
            source_width: self.source_width,
            image: image_file.to_string(),
        }
    }

    /// Writes `<stem>.png` (8-bit grayscale) and `<stem>.json`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let png = format!("{stem}.png");
        save_gray(&dir.join(&png), self.width, self.height, self.to_bytes())?;
        write_json(&dir.join(format!("{stem}.json")), &self.sidecar(&png))
    }
}

fn save_gray(path: &Path, width: usize, height: usize, bytes: Vec<u8>) -> Result<()> {
    let img = image::GrayImage::from_raw(width as u32, height as u32, bytes)
        .ok_or_else(|| Error::Dimension("heatmap buffer does not match its size".into()))?;
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::io(path, std::io::Error::other(e)))
}

/// Bilinear resize with pixel-centre alignment.
pub fn upsample_bilinear(src: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    let coord = |i: usize, n_in: usize, n_out: usize| {
        let x = ((i as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let lo = x.floor() as usize;
        (lo, (lo + 1).min(n_in - 1), x - lo as f64)
    };
    let mut out = Vec::with_capacity(out_h * out_w);
    for r in 0..out_h {
        let (r0, r1, fr) = coord(r, h, out_h);
        for c in 0..out_w {
            let (c0, c1, fc) = coord(c, w, out_w);
            let top = src[r0 * w + c0] * (1.0 - fc) + src[r0 * w + c1] * fc;
            let bottom = src[r1 * w + c0] * (1.0 - fc) + src[r1 * w + c1] * fc;
            out.push(top * (1.0 - fr) + bottom * fr);
        }
    }
    out
}

/// Grad-cam of `layer` for one image.
pub fn grad_cam<T: Real>(params: &ModelParams<T>, image: &Image, layer: &str) -> Result<Heatmap> {
    grad_cam_with(&Network::new(params.arch())?, params, image, layer)
}

/// As [`grad_cam`] with a prebuilt network.
pub fn grad_cam_with<T: Real>(net: &Network, params: &ModelParams<T>, image: &Image, layer: &str) -> Result<Heatmap> {
    let sg = net.stage_gradient(params, image, layer)?;
    let (h, w) = (sg.maps.height, sg.maps.width);
    let mut cam = vec![0.0; h * w];
    for (a, g) in sg.maps.maps.iter().zip(&sg.grads.maps) {
        let weight = g.iter().sum::<f64>() / g.len() as f64;
        if weight != 0.0 {
            for (c, v) in cam.iter_mut().zip(a) {
                *c += weight * v;
            }
        }
    }
    cam.iter_mut().for_each(|v| *v = v.max(0.0));
    let mut values = upsample_bilinear(&cam, h, w, image.height(), image.width());
    let raw_min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let raw_max = values.iter().copied().fold(0.0, f64::max);
    if !raw_max.is_finite() {
        return Err(Error::Numeric { layer: layer.to_string() });
    }
    if raw_max > 0.0 {
        values.iter_mut().for_each(|v| *v /= raw_max);
    }
    Ok(Heatmap {
        layer: layer.to_string(),
        height: image.height(),
        width: image.width(),
        values,
        raw_min,
        raw_max,
        source_height: h,
        source_width: w,
    })
}

/// A 2-D real map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Map2 {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl Map2 {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::Dimension(format!(
                "{} values for a {height}x{width} map",
                values.len()
            )));
        }
        Ok(Self { height, width, values })
    }

    /// Channel `i` of a stage's maps.
    pub fn from_maps(maps: &FeatureMaps, i: usize) -> Result<Self> {
        let v = maps
            .maps
            .get(i)
            .ok_or_else(|| Error::Dimension(format!("no map {i} among {}", maps.count())))?;
        Self::new(maps.height, maps.width, v.clone())
    }

    /// Min-max normalized copy; a constant map becomes all zeros.
    pub fn normalized(&self) -> Vec<f64> {
        let lo = self.values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !(hi > lo) {
            return vec![0.0; self.values.len()];
        }
        self.values.iter().map(|v| (v - lo) / (hi - lo)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Similarity {
    /// `1 - mean |a - b|` over normalized maps.
    pub score: f64,
    pub height: usize,
    pub width: usize,
    /// Pixels whose normalized difference exceeds the threshold.
    pub diff_map: Vec<bool>,
    pub threshold: f64,
}

impl Similarity {
    pub fn diff_count(&self) -> usize {
        self.diff_map.iter().filter(|d| **d).count()
    }

    /// Writes the difference mask as a black and white PNG.
    pub fn save_diff_png(&self, path: &Path) -> Result<()> {
        let bytes = self.diff_map.iter().map(|d| if *d { 255 } else { 0 }).collect();
        save_gray(path, self.width, self.height, bytes)
    }
}

pub fn feature_similarity(a: &Map2, b: &Map2) -> Result<Similarity> {
    feature_similarity_with(a, b, DEFAULT_DIFF_THRESHOLD)
}

pub fn feature_similarity_with(a: &Map2, b: &Map2, threshold: f64) -> Result<Similarity> {
    if (a.height, a.width) != (b.height, b.width) {
        return Err(Error::Dimension(format!(
            "maps are {}x{} and {}x{}",
            a.height, a.width, b.height, b.width
        )));
    }
    if a.values.is_empty() {
        return Err(Error::Dimension("empty maps".into()));
    }
    let (na, nb) = (a.normalized(), b.normalized());
    let diffs: Vec<f64> = na.iter().zip(&nb).map(|(x, y)| (x - y).abs()).collect();
    let mad = diffs.iter().sum::<f64>() / diffs.len() as f64;
    Ok(Similarity {
        score: (1.0 - mad).clamp(0.0, 1.0),
        height: a.height,
        width: a.width,
        diff_map: diffs.iter().map(|d| *d > threshold).collect(),
        threshold,
    })
}

/// Pairs of maps within one stage whose similarity is at least
/// `min_score`, highest first.
pub fn redundant_pairs(maps: &FeatureMaps, min_score: f64) -> Result<Vec<(usize, usize, f64)>> {
    let mut out = Vec::new();
    for i in 0..maps.count() {
        let a = Map2::from_maps(maps, i)?;
        for j in i + 1..maps.count() {
            let s = feature_similarity(&a, &Map2::from_maps(maps, j)?)?.score;
            if s >= min_score {
                out.push((i, j, s));
            }
        }
    }
    out.sort_by(|x, y| y.2.total_cmp(&x.2).then((x.0, x.1).cmp(&(y.0, y.1))));
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Quadrant {
    TopLeft,
    TopRight,
    BottomLeft,
    BottomRight,
}

impl Quadrant {
    pub const ALL: [Quadrant; 4] = [
        Quadrant::TopLeft,
        Quadrant::TopRight,
        Quadrant::BottomLeft,
        Quadrant::BottomRight,
    ];

    fn bottom(self) -> bool {
        matches!(self, Quadrant::BottomLeft | Quadrant::BottomRight)
    }

    fn right(self) -> bool {
        matches!(self, Quadrant::TopRight | Quadrant::BottomRight)
    }

    pub fn contains(self, row: usize, col: usize, height: usize, width: usize) -> bool {
        (row >= height / 2) == self.bottom() && (col >= width / 2) == self.right()
    }
}

/// A network whose output is the mean of one quadrant of a nonnegative
/// single-channel `side x side` input, built from hand-set weights.
///
/// The stem produces the image and a constant-one channel. The block's
/// first convolution adds a large negative offset outside the quadrant,
/// detected through zero padding of the constant channel, so that the ReLU
/// masks the image to the quadrant. The projection shortcut is zero.
pub fn quadrant_model(side: usize, q: Quadrant) -> Result<ModelParams<f64>> {
    if side < 8 || side % 2 != 0 {
        return Err(Error::config("quadrant model needs an even side >= 8"));
    }
    let half = side / 2;
    let k = side + 1;
    let arch = ArchConfig {
        name: Some("quadrant".into()),
        input: ImageDims::new(side, side, 1),
        stem: ConvSpec { filters: 2, kernel: 1, stride: 1 },
        blocks: vec![BlockSpec { filters: 3, kernel: k, stride: 1, activation: Activation::Relu }],
        head: HeadSpec { hidden: vec![], activation: Activation::Relu, output: OutputKind::Linear },
        init: InitScheme::Zeros,
        seed: 0,
    };
    let mut p = ModelParams::<f64>::zeros(&arch)?;
    let off = |p: &ModelParams<f64>, name: &str| p.segment(name).map(|s| s.offset).expect("segment");
    let big = 4.0;
    let (sw, sb) = (off(&p, "stem.weight"), off(&p, "stem.bias"));
    let (c1w, c1b, c2w) = (
        off(&p, "block1.conv1.weight"),
        off(&p, "block1.conv1.bias"),
        off(&p, "block1.conv2.weight"),
    );
    let ow = off(&p, "output.weight");
    let v = p.values_mut();
    // stem: channel 0 = image, channel 1 = 1
    v[sw] = 1.0;
    v[sb + 1] = 1.0;
    // conv1 output 0: image at the centre tap, plus `big` for each of the
    // row and column conditions that hold, minus `2 big`
    let tap = |ci: usize, kh: usize, kw: usize| c1w + (ci * k + kh) * k + kw;
    v[tap(0, half, half)] = 1.0;
    // a tap at kernel row 0 reads row r - half, inside the image iff r >= half
    let kh = if q.bottom() { 0 } else { 2 * half };
    let kw = if q.right() { 0 } else { 2 * half };
    v[tap(1, kh, half)] = big;
    v[tap(1, half, kw)] = big;
    v[c1b] = -2.0 * big;
    // conv2 output 0: pass channel 0 through
    v[c2w + half * k + half] = 1.0;
    // pooled mean covers a quarter of the image
    v[ow] = 4.0;
    Ok(p)
}
