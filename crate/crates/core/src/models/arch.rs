use serde::{Deserialize, Serialize};

use crate::error::{FedError, Result};

/// Image geometry, channels-first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ImageShape {
    pub const CIFAR: ImageShape = ImageShape {
        channels: 3,
        height: 32,
        width: 32,
    };
    pub const TOY_GRAY: ImageShape = ImageShape {
        channels: 1,
        height: 8,
        width: 8,
    };
    pub const TOY_RGB: ImageShape = ImageShape {
        channels: 3,
        height: 16,
        width: 16,
    };

    pub fn numel(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Toy,
    Full,
}

impl std::str::FromStr for Scale {
    type Err = FedError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "toy" => Ok(Scale::Toy),
            "full" => Ok(Scale::Full),
            other => Err(FedError::Invalid(format!("unknown scale '{other}'"))),
        }
    }
}

impl std::fmt::Display for Scale {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Scale::Toy => "toy",
            Scale::Full => "full",
        })
    }
}

pub const FULL_DISC_CHANNELS: [usize; 6] = [16, 32, 64, 128, 256, 512];
pub const FULL_GEN_CHANNELS: [usize; 4] = [384, 192, 96, 48];
pub const FULL_CATE_HIDDEN: [usize; 2] = [256, 128];
pub const DEFAULT_EMBED_DIM: usize = 32;
pub const NOISE_DIM: usize = 100;

/// Channel list scaled for toy mode: divided by 8, at least 4.
fn shrink(channels: &[usize]) -> Vec<usize> {
    channels.iter().map(|&c| (c / 8).max(4)).collect()
}

/// Shapes of all three networks for one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub image: ImageShape,
    pub num_classes: usize,
    pub embed_dim: usize,
    pub cate_hidden: Vec<usize>,
    pub noise_dim: usize,
    /// Width of the dense projection, then the input channels of the first
    /// transposed convolution; the final stage emits `image.channels`.
    pub gen_channels: Vec<usize>,
    pub disc_channels: Vec<usize>,
    pub leaky_slope: f64,
}

impl ArchConfig {
    pub fn full(num_classes: usize) -> Self {
        ArchConfig {
            image: ImageShape::CIFAR,
            num_classes,
            embed_dim: DEFAULT_EMBED_DIM,
            cate_hidden: FULL_CATE_HIDDEN.to_vec(),
            noise_dim: NOISE_DIM,
            gen_channels: FULL_GEN_CHANNELS.to_vec(),
            disc_channels: FULL_DISC_CHANNELS.to_vec(),
            leaky_slope: 0.2,
        }
    }

    pub fn toy(image: ImageShape, num_classes: usize) -> Self {
        ArchConfig {
            image,
            num_classes,
            embed_dim: DEFAULT_EMBED_DIM,
            cate_hidden: shrink(&FULL_CATE_HIDDEN),
            noise_dim: NOISE_DIM,
            gen_channels: shrink(&FULL_GEN_CHANNELS),
            disc_channels: shrink(&FULL_DISC_CHANNELS),
            leaky_slope: 0.2,
        }
    }

    pub fn for_scale(scale: Scale, image: ImageShape, num_classes: usize) -> Self {
        match scale {
            Scale::Full => ArchConfig {
                image,
                ..Self::full(num_classes)
            },
            Scale::Toy => Self::toy(image, num_classes),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ImageShape {
            channels,
            height,
            width,
        } = self.image;
        if channels == 0 || height != width || height < 8 || height % 8 != 0 {
            return Err(FedError::Invalid(format!(
                "image must be square with a side divisible by 8, got {channels}x{height}x{width}"
            )));
        }
        if self.num_classes < 1 || self.embed_dim < 1 || self.noise_dim < 1 {
            return Err(FedError::Invalid(
                "class count, embedding and noise dimensions must be positive".into(),
            ));
        }
        if self.gen_channels.len() != 4 {
            return Err(FedError::Invalid(
                "generator needs four transposed-convolution input widths".into(),
            ));
        }
        if self.disc_channels.is_empty() || self.cate_hidden.is_empty() {
            return Err(FedError::Invalid("empty layer list".into()));
        }
        Ok(())
    }

    /// Width of the data feature ℱ.
    pub fn feature_dim(&self) -> usize {
        *self.disc_channels.last().unwrap()
    }

    /// `key=value` lines recorded in checkpoint headers.
    pub fn to_header(&self) -> String {
        let list = |v: &[usize]| {
            v.iter()
                .map(ToString::to_string)
                .collect::<Vec<_>>()
                .join(",")
        };
        format!(
            "image={},{},{}\nnum_classes={}\nembed_dim={}\ncate_hidden={}\nnoise_dim={}\ngen_channels={}\ndisc_channels={}\nleaky_slope={}\n",
            self.image.channels,
            self.image.height,
            self.image.width,
            self.num_classes,
            self.embed_dim,
            list(&self.cate_hidden),
            self.noise_dim,
            list(&self.gen_channels),
            list(&self.disc_channels),
            self.leaky_slope
        )
    }

    pub fn from_header(text: &str) -> Result<Self> {
        let mut map = std::collections::BTreeMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| FedError::Format(format!("bad header line '{line}'")))?;
            map.insert(k.trim(), v.trim());
        }
        let get = |k: &str| {
            map.get(k)
                .copied()
                .ok_or_else(|| FedError::Format(format!("header is missing '{k}'")))
        };
        let list = |k: &str| -> Result<Vec<usize>> {
            get(k)?
                .split(',')
                .map(|s| {
                    s.parse()
                        .map_err(|_| FedError::Format(format!("bad value in '{k}'")))
                })
                .collect()
        };
        let num = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| FedError::Format(format!("bad value for '{k}'")))
        };
        let img = list("image")?;
        if img.len() != 3 {
            return Err(FedError::Format("image needs three dimensions".into()));
        }
        let cfg = ArchConfig {
            image: ImageShape {
                channels: img[0],
                height: img[1],
                width: img[2],
            },
            num_classes: num("num_classes")?,
            embed_dim: num("embed_dim")?,
            cate_hidden: list("cate_hidden")?,
            noise_dim: num("noise_dim")?,
            gen_channels: list("gen_channels")?,
            disc_channels: list("disc_channels")?,
            leaky_slope: get("leaky_slope")?
                .parse()
                .map_err(|_| FedError::Format("bad leaky_slope".into()))?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_scale_keeps_exact_channel_lists() {
        let a = ArchConfig::full(10);
        assert_eq!(a.disc_channels, vec![16, 32, 64, 128, 256, 512]);
        assert_eq!(a.gen_channels, vec![384, 192, 96, 48]);
        assert_eq!(a.noise_dim, 100);
        a.validate().unwrap();
    }

    #[test]
    fn toy_scale_divides_by_eight_with_floor() {
        let a = ArchConfig::toy(ImageShape::TOY_GRAY, 4);
        assert_eq!(a.disc_channels, vec![4, 4, 8, 16, 32, 64]);
        assert_eq!(a.gen_channels, vec![48, 24, 12, 6]);
        assert_eq!(a.disc_channels.len(), 6);
        a.validate().unwrap();
    }

    #[test]
    fn header_roundtrip() {
        let a = ArchConfig::toy(ImageShape::TOY_RGB, 7);
        assert_eq!(ArchConfig::from_header(&a.to_header()).unwrap(), a);
        assert!(ArchConfig::from_header("image=1,8,8\n").is_err());
    }

    #[test]
    fn rejects_non_square_images() {
        let mut a = ArchConfig::toy(ImageShape::TOY_GRAY, 2);
        a.image.width = 16;
        assert!(a.validate().is_err());
    }
}
