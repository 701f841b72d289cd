//! Labelled image sets: CIFAR binary loaders, the CIFAR-100 superclass table,
//! and synthetic Gaussian blobs for desk-scale runs.

mod blobs;
mod cifar;
pub mod names;

use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use numkit::Tensor;

pub use blobs::{blob_centers, make_blobs};
pub use cifar::{
    denormalize_pixel, load_cifar10, load_cifar100, normalize_pixel, parse_cifar10, parse_cifar100,
    CIFAR100_RECORD, CIFAR10_RECORD, CIFAR_PIXELS,
};

use crate::error::{FedError, Result};
use crate::models::ImageShape;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Images stored channels-first, one contiguous `C·H·W` block per example,
/// values in [−1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImageSet {
    pub shape: ImageShape,
    pub images: Vec<f64>,
    pub labels: Vec<usize>,
    pub coarse: Option<Vec<usize>>,
    pub split: Split,
}

impl LabeledImageSet {
    pub fn new(
        shape: ImageShape,
        images: Vec<f64>,
        labels: Vec<usize>,
        coarse: Option<Vec<usize>>,
        split: Split,
    ) -> Result<Self> {
        if images.len() != labels.len() * shape.numel() {
            return Err(FedError::Dimension(format!(
                "{} pixel values for {} images of {} values",
                images.len(),
                labels.len(),
                shape.numel()
            )));
        }
        if coarse.as_ref().is_some_and(|c| c.len() != labels.len()) {
            return Err(FedError::Dimension("coarse label count differs".into()));
        }
        Ok(LabeledImageSet {
            shape,
            images,
            labels,
            coarse,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let n = self.shape.numel();
        &self.images[i * n..(i + 1) * n]
    }

    /// Indices of examples whose fine label is in `classes`, in set order.
    pub fn indices_of(&self, classes: &[usize]) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| classes.contains(&self.labels[i]))
            .collect()
    }

    pub fn subset(&self, idx: &[usize]) -> LabeledImageSet {
        let mut images = Vec::with_capacity(idx.len() * self.shape.numel());
        for &i in idx {
            images.extend_from_slice(self.image(i));
        }
        LabeledImageSet {
            shape: self.shape,
            images,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            coarse: self
                .coarse
                .as_ref()
                .map(|c| idx.iter().map(|&i| c[i]).collect()),
            split: self.split,
        }
    }

    /// `[n, C, H, W]` batch of the selected examples.
    pub fn batch(&self, idx: &[usize]) -> Tensor {
        let [c, h, w] = self.shape.dims();
        let mut data = Vec::with_capacity(idx.len() * self.shape.numel());
        for &i in idx {
            data.extend_from_slice(self.image(i));
        }
        Tensor::new(vec![idx.len(), c, h, w], data).expect("batch shape")
    }

    pub fn num_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }

    /// Length-prefixed binary dump used for fixtures.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(b"FGTD")?;
        w.write_u32::<LittleEndian>(1)?;
        for d in self.shape.dims() {
            w.write_u32::<LittleEndian>(d as u32)?;
        }
        w.write_u8(matches!(self.split, Split::Test) as u8)?;
        w.write_u64::<LittleEndian>(self.len() as u64)?;
        for &y in &self.labels {
            w.write_u32::<LittleEndian>(y as u32)?;
        }
        match &self.coarse {
            Some(c) => {
                w.write_u8(1)?;
                for &y in c {
                    w.write_u32::<LittleEndian>(y as u32)?;
                }
            }
            None => w.write_u8(0)?,
        }
        for &v in &self.images {
            w.write_f64::<LittleEndian>(v)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != b"FGTD" || r.read_u32::<LittleEndian>()? != 1 {
            return Err(FedError::Format("not a dataset dump".into()));
        }
        let mut dims = [0usize; 3];
        for d in &mut dims {
            *d = r.read_u32::<LittleEndian>()? as usize;
        }
        let shape = ImageShape {
            channels: dims[0],
            height: dims[1],
            width: dims[2],
        };
        let split = if r.read_u8()? == 1 {
            Split::Test
        } else {
            Split::Train
        };
        let n = r.read_u64::<LittleEndian>()? as usize;
        let read_labels = |r: &mut R| -> Result<Vec<usize>> {
            (0..n)
                .map(|_| Ok(r.read_u32::<LittleEndian>()? as usize))
                .collect()
        };
        let labels = read_labels(&mut r)?;
        let coarse = match r.read_u8()? {
            0 => None,
            _ => Some(read_labels(&mut r)?),
        };
        let mut images = vec![0.0; n * shape.numel()];
        r.read_f64_into::<LittleEndian>(&mut images)?;
        Self::new(shape, images, labels, coarse, split)
    }
}
