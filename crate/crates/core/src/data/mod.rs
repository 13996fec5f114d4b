//! Client datasets: a procedural shapes generator and file loaders.

mod io;
mod shapes;

use thiserror::Error;

use crate::tensor::Tensor;

pub use io::{load_images, read_cifar10, read_pnm, write_pgm, write_pnm, write_ppm, ImageFormat};
pub use shapes::{gen_shapes_dataset, SHAPE_NAMES};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed data at byte {offset}: {msg}")]
    Format { offset: usize, msg: String },
    #[error("invalid dataset: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// Images of a common shape `(C, H, W)` with pixel values in `[0, 1]`, and
/// their class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientDataset {
    shape: [usize; 3],
    pixels: Vec<f64>,
    labels: Vec<usize>,
}

impl ClientDataset {
    /// `pixels` holds the images back to back in row-major `(C, H, W)`.
    pub fn new(shape: [usize; 3], pixels: Vec<f64>, labels: Vec<usize>) -> Result<Self> {
        let per = shape.iter().product::<usize>();
        if labels.is_empty() {
            return Err(DataError::Invalid("dataset needs at least one image".into()));
        }
        if per == 0 || pixels.len() != per * labels.len() {
            return Err(DataError::Invalid(format!(
                "{} pixels cannot hold {} images of shape {shape:?}",
                pixels.len(),
                labels.len()
            )));
        }
        if let Some(i) = pixels.iter().position(|p| !(0.0..=1.0).contains(p)) {
            return Err(DataError::Invalid(format!("pixel {i} = {} outside [0, 1]", pixels[i])));
        }
        Ok(Self { shape, pixels, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn image_len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let per = self.image_len();
        &self.pixels[i * per..(i + 1) * per]
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Images at `indices` stacked into an `(n, C, H, W)` tensor.
    pub fn batch(&self, indices: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        let [c, h, w] = self.shape;
        Tensor::new(data, &[indices.len(), c, h, w]).expect("batch shape")
    }

    pub fn all(&self) -> Tensor {
        self.batch(&(0..self.len()).collect::<Vec<_>>())
    }

    pub fn labels_at(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.labels[i]).collect()
    }

    /// The images at `indices` as a new dataset.
    pub fn subset(&self, indices: &[usize]) -> ClientDataset {
        let mut pixels = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            pixels.extend_from_slice(self.image(i));
        }
        ClientDataset {
            shape: self.shape,
            pixels,
            labels: self.labels_at(indices),
        }
    }

    /// Contiguous ranges of `sizes[k]` images, in order.
    pub fn split(&self, sizes: &[usize]) -> Result<Vec<ClientDataset>> {
        if sizes.iter().sum::<usize>() > self.len() || sizes.contains(&0) {
            return Err(DataError::Invalid(format!("cannot split {} images into {sizes:?}", self.len())));
        }
        let mut start = 0;
        Ok(sizes
            .iter()
            .map(|&n| {
                let idx: Vec<usize> = (start..start + n).collect();
                start += n;
                self.subset(&idx)
            })
            .collect())
    }
}
