use numkit::{Tape, Var};

use super::arch::ArchConfig;
use super::{dense, Dense};
use crate::error::{FedError, Result};
use crate::params::{BoundParams, Init, ParamId, ParamLayout};

#[derive(Debug, Clone, PartialEq)]
struct ConvLayer {
    w: ParamId,
    b: ParamId,
    stride: usize,
}

/// Convolutional feature extractor with a real/fake head on ℱ and a class
/// head on `[ℱ ‖ ℰ]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator {
    convs: Vec<ConvLayer>,
    rf_head: Dense,
    class_head: Dense,
    feature_dim: usize,
    embed_dim: usize,
    slope: f64,
}

impl Discriminator {
    pub(crate) fn register(layout: &mut ParamLayout, arch: &ArchConfig) -> Self {
        let mut chans = vec![arch.image.channels];
        chans.extend(&arch.disc_channels);
        let convs = chans
            .windows(2)
            .enumerate()
            .map(|(i, c)| ConvLayer {
                w: layout.push(
                    format!("disc.conv{i}.weight"),
                    vec![c[1], c[0], 3, 3],
                    Init::Scaled {
                        fan_in: c[0] * 9,
                        gain: 2f64.sqrt(),
                    },
                ),
                b: layout.push(format!("disc.conv{i}.bias"), vec![c[1]], Init::Zeros),
                // 32 → 16 → 16 → 8 → 8 → 4 → 4
                stride: if i % 2 == 0 { 2 } else { 1 },
            })
            .collect();
        let f = arch.feature_dim();
        let rf_head = Dense {
            w: layout.push(
                "disc.rf.weight",
                vec![f, 1],
                Init::Scaled {
                    fan_in: f,
                    gain: 1.0,
                },
            ),
            b: layout.push("disc.rf.bias", vec![1], Init::Zeros),
        };
        let width = f + arch.embed_dim;
        let class_head = Dense {
            w: layout.push(
                "disc.cls.weight",
                vec![width, arch.num_classes],
                Init::Scaled {
                    fan_in: width,
                    gain: 1.0,
                },
            ),
            b: layout.push("disc.cls.bias", vec![arch.num_classes], Init::Zeros),
        };
        Discriminator {
            convs,
            rf_head,
            class_head,
            feature_dim: f,
            embed_dim: arch.embed_dim,
            slope: arch.leaky_slope,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn class_head_width(&self) -> usize {
        self.feature_dim + self.embed_dim
    }

    pub(crate) fn class_head_params(&self) -> (ParamId, ParamId) {
        (self.class_head.w, self.class_head.b)
    }

    /// Data features ℱ `[n, F]`: global-average-pooled final conv output.
    pub fn features(&self, tape: &mut Tape, p: &BoundParams, images: Var) -> Result<Var> {
        let mut h = images;
        for c in &self.convs {
            h = tape.conv2d(h, p.var(c.w), c.stride, 1)?;
            h = tape.add_bias(h, p.var(c.b))?;
            h = tape.leaky_relu(h, self.slope)?;
        }
        Ok(tape.global_avg_pool(h)?)
    }

    /// Real/fake logits `[n, 1]`; depends on ℱ only.
    pub fn real_fake(&self, tape: &mut Tape, p: &BoundParams, features: Var) -> Result<Var> {
        dense(tape, p, &self.rf_head, features)
    }

    /// Class logits `[n, C]` from ℱ `[n, F]` and one batch embedding `[1, d]`
    /// shared by every row.
    pub fn classify(
        &self,
        tape: &mut Tape,
        p: &BoundParams,
        features: Var,
        embedding: Var,
    ) -> Result<Var> {
        if tape.shape(embedding) != [1, self.embed_dim] {
            return Err(FedError::Dimension(format!(
                "task embedding has shape {:?}, expected [1, {}]",
                tape.shape(embedding),
                self.embed_dim
            )));
        }
        let n = tape.shape(features)[0];
        let e = tape.broadcast_rows(embedding, n)?;
        let x = tape.concat(&[features, e])?;
        dense(tape, p, &self.class_head, x)
    }
}
