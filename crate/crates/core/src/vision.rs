//! Scene images, the convolutional feature extractor, adaptive average
//! pooling and visual tokens.
//!
//! Feature maps are channels-last: a `[h*w, C]` tensor in raster order.

use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::numeric::{join, LayerNorm, Linear, NamedParams, Parameters, Rng, Tensor, GATHER_ZERO};

pub const FEATURE_CHANNELS: usize = 256;
pub const MIN_IMAGE_SIDE: usize = 32;
pub const CLIP_FRAMES: usize = 3;
/// Position id shared by every visual token (unordered tokens).
pub const VISUAL_POSITION_ID: usize = 0;
pub const VISUAL_SEGMENT_ID: usize = 1;
pub const PATCH_GRIDS: [usize; 5] = [1, 2, 3, 4, 5];

const IMGF_MAGIC: &[u8; 4] = b"IMGF";

/// RGB image with intensities in `[0, 1]`, stored HWC row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height < MIN_IMAGE_SIDE || width < MIN_IMAGE_SIDE {
            return Err(Error::Contract(format!(
                "image {height}x{width} is smaller than {MIN_IMAGE_SIDE}x{MIN_IMAGE_SIDE}"
            )));
        }
        if data.len() != height * width * 3 {
            return Err(Error::shape("image", &[height, width, 3], &[data.len()]));
        }
        let data = data
            .into_iter()
            .map(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) })
            .collect();
        Ok(Image { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Result<Self> {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Self::new(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        for (c, v) in rgb.into_iter().enumerate() {
            self.data[i + c] = v.clamp(0.0, 1.0);
        }
    }

    /// Constant `[h*w, 3]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[self.height * self.width, 3], self.data.clone()).unwrap()
    }

    /// 8-bit RGB PNG.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self.data.iter().map(|v| (v * 255.0).round() as u8).collect();
        let buf = image::RgbImage::from_raw(self.width as u32, self.height as u32, bytes)
            .expect("buffer length matches dimensions");
        buf.save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| Error::format(path, e.to_string()))
    }

    /// `IMGF`, u32 height, u32 width (little-endian), then f32 RGB triples.
    pub fn to_imgf_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + self.data.len() * 4);
        out.extend_from_slice(IMGF_MAGIC);
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        out
    }

    pub fn from_imgf_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..4] != IMGF_MAGIC {
            return Err(Error::Contract("missing IMGF header".into()));
        }
        let h = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let w = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let payload = &bytes[12..];
        if payload.len() != h * w * 3 * 4 {
            return Err(Error::Contract(format!(
                "IMGF payload of {} bytes does not match {h}x{w}",
                payload.len()
            )));
        }
        let data = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect();
        Self::new(h, w, data)
    }

    pub fn save_imgf(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_imgf_bytes()).map_err(|e| Error::io(path, e))
    }

    /// Loads an `IMGF` file or any 8-bit image the `image` crate decodes.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.starts_with(IMGF_MAGIC) {
            return Self::from_imgf_bytes(&bytes).map_err(|e| Error::format(path, e.to_string()));
        }
        let img = image::load_from_memory(&bytes)
            .map_err(|e| Error::format(path, e.to_string()))?
            .to_rgb8();
        let (w, h) = img.dimensions();
        let data = img.into_raw().into_iter().map(|b| b as f64 / 255.0).collect();
        Self::new(h as usize, w as usize, data).map_err(|e| Error::format(path, e.to_string()))
    }
}

/// Channels-last activations `[h*w, channels]`.
#[derive(Clone, Debug)]
pub struct FeatureMap {
    pub height: usize,
    pub width: usize,
    pub tensor: Tensor,
}

impl FeatureMap {
    pub fn new(height: usize, width: usize, tensor: Tensor) -> Result<Self> {
        if tensor.rank() != 2 || tensor.shape()[0] != height * width {
            return Err(Error::shape("feature map", &[height * width, 0], tensor.shape()));
        }
        Ok(FeatureMap { height, width, tensor })
    }

    pub fn channels(&self) -> usize {
        self.tensor.shape()[1]
    }
}

/// Geometry of a strided convolution over a `[t, h, w, c]` volume.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

impl ConvGeometry {
    pub fn output_dims(&self, dims: [usize; 3]) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            let padded = dims[a] + 2 * self.padding[a];
            if padded < self.kernel[a] {
                return Err(Error::Contract(format!(
                    "input extent {} too small for kernel {}",
                    dims[a], self.kernel[a]
                )));
            }
            out[a] = (padded - self.kernel[a]) / self.stride[a] + 1;
        }
        Ok(out)
    }

    /// Gather map turning a `[t, h, w, c]` volume into im2col rows ordered
    /// `(ot, oy, ox)` with columns ordered `(dt, dy, dx, channel)`.
    fn im2col_index(&self, dims: [usize; 3], channels: usize) -> Result<(Vec<usize>, [usize; 3])> {
        let [t, h, w] = dims;
        let out = self.output_dims(dims)?;
        let [kt, kh, kw] = self.kernel;
        let cols = kt * kh * kw * channels;
        let mut index = Vec::with_capacity(out[0] * out[1] * out[2] * cols);
        for ot in 0..out[0] {
            for oy in 0..out[1] {
                for ox in 0..out[2] {
                    for dt in 0..kt {
                        for dy in 0..kh {
                            for dx in 0..kw {
                                let it = (ot * self.stride[0] + dt) as isize - self.padding[0] as isize;
                                let iy = (oy * self.stride[1] + dy) as isize - self.padding[1] as isize;
                                let ix = (ox * self.stride[2] + dx) as isize - self.padding[2] as isize;
                                let inside = (0..t as isize).contains(&it)
                                    && (0..h as isize).contains(&iy)
                                    && (0..w as isize).contains(&ix);
                                for c in 0..channels {
                                    index.push(if inside {
                                        ((it as usize * h + iy as usize) * w + ix as usize) * channels + c
                                    } else {
                                        GATHER_ZERO
                                    });
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok((index, out))
    }
}

/// conv -> channel layer norm -> GeLU.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub geometry: ConvGeometry,
    pub conv: Linear,
    pub norm: LayerNorm,
}

impl ConvBlock {
    pub fn new(rng: &mut Rng, in_channels: usize, out_channels: usize, temporal_kernel: usize) -> Self {
        let geometry = ConvGeometry {
            kernel: [temporal_kernel, 3, 3],
            stride: [1, 2, 2],
            padding: [0, 1, 1],
        };
        let fan_in = temporal_kernel * 9 * in_channels;
        ConvBlock {
            geometry,
            conv: Linear::new(rng, fan_in, out_channels),
            norm: LayerNorm::new(out_channels),
        }
    }

    /// `input` is a `[t*h*w, c]` volume; returns the output volume and its dims.
    pub fn forward(&self, input: &Tensor, dims: [usize; 3]) -> Result<(Tensor, [usize; 3])> {
        let channels = input.shape()[1];
        let expected = self.conv.in_features();
        let (index, out) = self.geometry.im2col_index(dims, channels)?;
        let rows = out[0] * out[1] * out[2];
        if index.len() != rows * expected {
            return Err(Error::shape("conv", &[rows, index.len() / rows.max(1)], &[rows, expected]));
        }
        let cols = input.gather(Rc::new(index), &[rows, expected])?;
        let y = self.conv.forward(&cols)?;
        let y = self.norm.forward(&y)?.gelu();
        Ok((y, out))
    }
}

impl Parameters for ConvBlock {
    fn collect_params(&self, prefix: &str, out: &mut NamedParams) {
        self.conv.collect_params(&join(prefix, "conv"), out);
        self.norm.collect_params(&join(prefix, "norm"), out);
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VisionConfig {
    /// Output channels of each stride-2 block; the last is the feature width.
    pub widths: Vec<usize>,
    /// Frames consumed per sample: 1 for single frames, 3 for clips.
    pub frames: usize,
}

impl Default for VisionConfig {
    fn default() -> Self {
        VisionConfig {
            widths: vec![32, 64, 128, FEATURE_CHANNELS],
            frames: 1,
        }
    }
}

impl VisionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.len() != 4 || self.widths.last() != Some(&FEATURE_CHANNELS) {
            return Err(Error::Config(format!(
                "extractor needs 4 blocks ending in {FEATURE_CHANNELS} channels, got {:?}",
                self.widths
            )));
        }
        if self.widths.contains(&0) {
            return Err(Error::Config("zero-width conv block".into()));
        }
        if self.frames != 1 && self.frames != CLIP_FRAMES {
            return Err(Error::Config(format!("frames must be 1 or {CLIP_FRAMES}")));
        }
        Ok(())
    }
}

/// Four stride-2 conv blocks. With `frames == 3` the first block is a 3D
/// convolution whose temporal kernel spans the whole clip, collapsing time.
#[derive(Clone, Debug)]
pub struct ConvStack {
    pub frames: usize,
    pub blocks: Vec<ConvBlock>,
}

impl ConvStack {
    pub fn new(rng: &mut Rng, config: &VisionConfig) -> Result<Self> {
        config.validate()?;
        let mut blocks = Vec::with_capacity(config.widths.len());
        let mut in_channels = 3;
        for (i, &w) in config.widths.iter().enumerate() {
            let temporal = if i == 0 { config.frames } else { 1 };
            blocks.push(ConvBlock::new(rng, in_channels, w, temporal));
            in_channels = w;
        }
        Ok(ConvStack {
            frames: config.frames,
            blocks,
        })
    }

    pub fn extract(&self, frames: &[Image]) -> Result<FeatureMap> {
        if frames.len() != self.frames {
            return Err(Error::Contract(format!(
                "extractor expects {} frame(s), got {}",
                self.frames,
                frames.len()
            )));
        }
        let (h, w) = (frames[0].height(), frames[0].width());
        if frames.iter().any(|f| f.height() != h || f.width() != w) {
            return Err(Error::Contract("clip frames differ in size".into()));
        }
        let volume = if frames.len() == 1 {
            frames[0].to_tensor()
        } else {
            let data: Vec<f64> = frames.iter().flat_map(|f| f.data().iter().copied()).collect();
            Tensor::new(&[frames.len() * h * w, 3], data)?
        };
        let mut dims = [frames.len(), h, w];
        let mut x = volume;
        for block in &self.blocks {
            let (y, out) = block.forward(&x, dims)?;
            x = y;
            dims = out;
        }
        debug_assert_eq!(dims[0], 1);
        FeatureMap::new(dims[1], dims[2], x)
    }
}

impl Parameters for ConvStack {
    fn collect_params(&self, prefix: &str, out: &mut NamedParams) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.collect_params(&join(prefix, &format!("block{i}")), out);
        }
    }
}

/// Single-frame feature extraction.
pub fn extract_features_2d(image: &Image, cnn: &ConvStack) -> Result<FeatureMap> {
    if cnn.frames != 1 {
        return Err(Error::Contract("2D extraction needs a single-frame extractor".into()));
    }
    cnn.extract(std::slice::from_ref(image))
}

/// Clip feature extraction over exactly three consecutive frames.
pub fn extract_features_3d(clip: &[Image], cnn: &ConvStack) -> Result<FeatureMap> {
    if clip.len() != CLIP_FRAMES || cnn.frames != CLIP_FRAMES {
        return Err(Error::Contract(format!(
            "temporal extraction needs exactly {CLIP_FRAMES} frames and a clip extractor, got {}",
            clip.len()
        )));
    }
    cnn.extract(clip)
}

/// Bin `i` of `n` over an axis of length `len`:
/// `[floor(i*len/n), ceil((i+1)*len/n))`.
pub fn pool_bin(i: usize, n: usize, len: usize) -> (usize, usize) {
    let start = i * len / n;
    let end = ((i + 1) * len).div_ceil(n);
    (start, end)
}

/// Constant `[n*n, h*w]` averaging matrix for adaptive pooling.
pub fn pooling_matrix(h: usize, w: usize, n: usize) -> Result<Tensor> {
    if n == 0 {
        return Err(Error::Config("pooling grid n must be positive".into()));
    }
    let mut data = vec![0.0; n * n * h * w];
    for i in 0..n {
        let (r0, r1) = pool_bin(i, n, h);
        for j in 0..n {
            let (c0, c1) = pool_bin(j, n, w);
            let weight = 1.0 / ((r1 - r0) * (c1 - c0)) as f64;
            let row = (i * n + j) * h * w;
            for r in r0..r1 {
                for c in c0..c1 {
                    data[row + r * w + c] = weight;
                }
            }
        }
    }
    Tensor::new(&[n * n, h * w], data)
}

/// Pools a feature map to an `n x n` grid: `[n*n, channels]`, raster order.
pub fn adaptive_avg_pool(map: &FeatureMap, n: usize) -> Result<Tensor> {
    pooling_matrix(map.height, map.width, n)?.matmul(&map.tensor)
}

/// Visual token stream feeding the joint embedding.
#[derive(Clone, Debug)]
pub struct VisualTokens {
    /// `[n*n, 256]`
    pub features: Tensor,
    pub segment_ids: Vec<usize>,
    pub position_ids: Vec<usize>,
}

impl VisualTokens {
    pub fn len(&self) -> usize {
        self.segment_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segment_ids.is_empty()
    }
}

/// Flattens a pooled `[n*n, C]` grid into tokens. Positions are the shared
/// [`VISUAL_POSITION_ID`] unless `raster_positions` is set.
pub fn to_visual_tokens(pooled: &Tensor, raster_positions: bool) -> Result<VisualTokens> {
    let count = pooled.shape()[0];
    let side = (count as f64).sqrt().round() as usize;
    if pooled.rank() != 2 || side * side != count {
        return Err(Error::Contract(format!(
            "pooled grid {:?} is not a square token grid",
            pooled.shape()
        )));
    }
    Ok(VisualTokens {
        features: pooled.clone(),
        segment_ids: vec![VISUAL_SEGMENT_ID; count],
        position_ids: if raster_positions {
            (0..count).collect()
        } else {
            vec![VISUAL_POSITION_ID; count]
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::Rng;

    fn tiny_config(frames: usize) -> VisionConfig {
        VisionConfig {
            widths: vec![4, 4, 4, FEATURE_CHANNELS],
            frames,
        }
    }

    fn random_image(rng: &mut Rng, side: usize) -> Image {
        let data = (0..side * side * 3).map(|_| rng.uniform(0.0, 1.0)).collect();
        Image::new(side, side, data).unwrap()
    }

    fn zero_biases(cnn: &ConvStack) {
        for b in &cnn.blocks {
            b.conv.bias.set_data(vec![0.0; b.conv.bias.numel()]).unwrap();
        }
    }

    #[test]
    fn small_image_rejected() {
        assert!(Image::new(31, 64, vec![0.0; 31 * 64 * 3]).is_err());
        let img = Image::new(32, 32, vec![2.0; 32 * 32 * 3]).unwrap();
        assert!(img.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn stride_arithmetic_64_to_4() {
        let mut rng = Rng::new(1);
        let cnn = ConvStack::new(&mut rng, &VisionConfig::default()).unwrap();
        let img = random_image(&mut rng, 64);
        let fm = extract_features_2d(&img, &cnn).unwrap();
        assert_eq!((fm.height, fm.width, fm.channels()), (4, 4, 256));
    }

    #[test]
    fn zero_image_gives_zero_map() {
        let mut rng = Rng::new(2);
        let cnn = ConvStack::new(&mut rng, &tiny_config(1)).unwrap();
        zero_biases(&cnn);
        let fm = extract_features_2d(&Image::filled(32, 32, [0.0; 3]).unwrap(), &cnn).unwrap();
        assert!(fm.tensor.data().iter().all(|&v| v == 0.0));

        let cnn3 = ConvStack::new(&mut rng, &tiny_config(3)).unwrap();
        zero_biases(&cnn3);
        let zero = Image::filled(32, 32, [0.0; 3]).unwrap();
        let fm = extract_features_3d(&[zero.clone(), zero.clone(), zero], &cnn3).unwrap();
        assert!(fm.tensor.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn clip_path_matches_frame_path_shape() {
        let mut rng = Rng::new(3);
        let img = random_image(&mut rng, 48);
        let cnn2 = ConvStack::new(&mut rng, &tiny_config(1)).unwrap();
        let cnn3 = ConvStack::new(&mut rng, &tiny_config(3)).unwrap();
        let a = extract_features_2d(&img, &cnn2).unwrap();
        let b = extract_features_3d(&[img.clone(), img.clone(), img.clone()], &cnn3).unwrap();
        assert_eq!(a.tensor.shape(), b.tensor.shape());
        assert_eq!((a.height, a.width), (b.height, b.width));
        assert!(extract_features_3d(&[img.clone(), img], &cnn3).is_err());
    }

    #[test]
    fn conv_stack_gradients() {
        let mut rng = Rng::new(4);
        for frames in [1, 3] {
            let cnn = ConvStack::new(&mut rng, &tiny_config(frames)).unwrap();
            let clip: Vec<Image> = (0..frames).map(|_| random_image(&mut rng, 32)).collect();
            let probe = Tensor::new(&[4, 256], (0..1024).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap();
            let f = || cnn.extract(&clip)?.tensor.mul(&probe).map(|t| t.sum());
            let params = cnn.named_parameters();
            let tensors: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();
            let r = crate::numeric::grad_check_report(f, &tensors, 1e-5).unwrap();
            assert!(r.max_rel_err < 1e-4, "frames={frames}: {r:?} in {}", params[r.param].0);
        }
    }

    #[test]
    fn pooling_bins_on_3x3() {
        let map = FeatureMap::new(
            3,
            3,
            Tensor::new(&[9, 1], (1..=9).map(f64::from).collect()).unwrap(),
        )
        .unwrap();
        let pooled = adaptive_avg_pool(&map, 2).unwrap();
        assert_eq!(pooled.to_vec(), vec![3.0, 4.0, 6.0, 7.0]);
    }

    #[test]
    fn pooling_identity_and_global_mean() {
        let mut rng = Rng::new(5);
        let data: Vec<f64> = (0..16 * 3).map(|_| rng.uniform(-2.0, 2.0)).collect();
        let map = FeatureMap::new(4, 4, Tensor::new(&[16, 3], data.clone()).unwrap()).unwrap();
        assert_eq!(adaptive_avg_pool(&map, 4).unwrap().to_vec(), data);
        let g = adaptive_avg_pool(&map, 1).unwrap().to_vec();
        for c in 0..3 {
            let mean = (0..16).map(|i| data[i * 3 + c]).sum::<f64>() / 16.0;
            assert!((g[c] - mean).abs() < 1e-12);
        }
        assert!(adaptive_avg_pool(&map, 0).is_err());
    }

    #[test]
    fn pooling_bounds_and_mean_preservation() {
        let mut rng = Rng::new(6);
        for &(h, w, n) in &[(6, 6, 3), (7, 5, 2), (4, 4, 5), (8, 6, 2)] {
            let data: Vec<f64> = (0..h * w * 2).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let map = FeatureMap::new(h, w, Tensor::new(&[h * w, 2], data.clone()).unwrap()).unwrap();
            let pooled = adaptive_avg_pool(&map, n).unwrap().to_vec();
            for c in 0..2 {
                let col: Vec<f64> = (0..h * w).map(|i| data[i * 2 + c]).collect();
                let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let pc: Vec<f64> = (0..n * n).map(|i| pooled[i * 2 + c]).collect();
                assert!(pc.iter().all(|&v| v >= lo - 1e-12 && v <= hi + 1e-12));
                if h % n == 0 && w % n == 0 {
                    let m_in = col.iter().sum::<f64>() / col.len() as f64;
                    let m_out = pc.iter().sum::<f64>() / pc.len() as f64;
                    assert!((m_in - m_out).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn visual_tokens_layout() {
        let pooled = Tensor::new(&[4, 2], (0..8).map(f64::from).collect()).unwrap();
        let v = to_visual_tokens(&pooled, false).unwrap();
        assert_eq!(v.len(), 4);
        assert!(v.segment_ids.iter().all(|&s| s == VISUAL_SEGMENT_ID));
        assert!(v.position_ids.iter().all(|&p| p == VISUAL_POSITION_ID));
        assert_eq!(v.features.to_vec(), pooled.to_vec());
        let r = to_visual_tokens(&pooled, true).unwrap();
        assert_eq!(r.position_ids, vec![0, 1, 2, 3]);
        assert!(to_visual_tokens(&Tensor::zeros(&[3, 2]), false).is_err());
    }

    #[test]
    fn one_token_is_global_mean() {
        let mut rng = Rng::new(8);
        let cnn = ConvStack::new(&mut rng, &tiny_config(1)).unwrap();
        let fm = extract_features_2d(&random_image(&mut rng, 64), &cnn).unwrap();
        let v = to_visual_tokens(&adaptive_avg_pool(&fm, 1).unwrap(), false).unwrap();
        let data = fm.tensor.to_vec();
        let cells = fm.height * fm.width;
        let feats = v.features.to_vec();
        for c in 0..FEATURE_CHANNELS {
            let mean = (0..cells).map(|i| data[i * FEATURE_CHANNELS + c]).sum::<f64>() / cells as f64;
            assert!((feats[c] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn image_file_round_trips() {
        let mut rng = Rng::new(9);
        let img = random_image(&mut rng, 32);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.imgf");
        img.save_imgf(&p).unwrap();
        let back = Image::load(&p).unwrap();
        for (a, b) in img.data().iter().zip(back.data()) {
            assert_eq!(*b, *a as f32 as f64);
        }
        let p = dir.path().join("a.png");
        img.save_png(&p).unwrap();
        let back = Image::load(&p).unwrap();
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }
}
