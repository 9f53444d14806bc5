use crate::error::{Error, Result};

/// Label reserved for pixels that take part in no loss and no metric.
pub const IGNORE: u8 = 255;

/// Per-pixel class ids of an `h x w` image, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LabelMap {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

/// Label map at feature resolution, produced by [`downsample_labels`].
pub type DownsampledLabelMap = LabelMap;

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "label map {height}x{width} needs {} entries, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(LabelMap { height, width, data })
    }

    pub fn filled(height: usize, width: usize, label: u8) -> Self {
        LabelMap { height, width, data: vec![label; height * width] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, label: u8) {
        self.data[y * self.width + x] = label;
    }

    /// Checks every entry is a class id below `classes` or [`IGNORE`].
    pub fn validate(&self, classes: usize) -> Result<()> {
        match self.data.iter().position(|&l| l != IGNORE && l as usize >= classes) {
            Some(index) => Err(Error::InvalidLabel { label: self.data[index], index, classes }),
            None => Ok(()),
        }
    }

    /// Number of pixels that are not [`IGNORE`].
    pub fn labeled_pixels(&self) -> usize {
        self.data.iter().filter(|&&l| l != IGNORE).count()
    }
}

/// Nearest-neighbour downsample sampling each output pixel's centre.
///
/// Output pixel `(i, j)` copies input pixel
/// `(floor((i + 0.5) * H / h), floor((j + 0.5) * W / w))`, so the ignore index
/// and class ids pass through untouched.
pub fn downsample_labels(label: &LabelMap, h: usize, w: usize) -> Result<DownsampledLabelMap> {
    if h == 0 || w == 0 {
        return Err(Error::InvalidArgument(format!("cannot downsample labels to {h}x{w}")));
    }
    if h > label.height || w > label.width {
        return Err(Error::InvalidArgument(format!(
            "downsample target {h}x{w} exceeds source {}x{}",
            label.height, label.width
        )));
    }
    let src_row = |i: usize| ((2 * i + 1) * label.height) / (2 * h);
    let src_col = |j: usize| ((2 * j + 1) * label.width) / (2 * w);
    let mut data = Vec::with_capacity(h * w);
    for i in 0..h {
        let sy = src_row(i);
        for j in 0..w {
            data.push(label.get(sy, src_col(j)));
        }
    }
    LabelMap::new(h, w, data)
}
