use numkit::{Tape, Var};

use super::arch::ArchConfig;
use super::{dense, Dense};
use crate::error::{FedError, Result};
use crate::params::{BoundParams, Init, ParamLayout};

/// Cardinality-agnostic task encoder: a fully connected network applied per
/// example, mean-pooled over the batch. Its size depends only on the image
/// shape and `embed_dim`, never on the number of tasks.
#[derive(Debug, Clone, PartialEq)]
pub struct CateEncoder {
    layers: Vec<Dense>,
    slope: f64,
    in_dim: usize,
}

impl CateEncoder {
    pub(crate) fn register(layout: &mut ParamLayout, arch: &ArchConfig) -> Self {
        let in_dim = arch.image.numel();
        let mut widths = vec![in_dim];
        widths.extend(&arch.cate_hidden);
        widths.push(arch.embed_dim);
        let last = widths.len() - 2;
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let gain = if i == last { 1.0 } else { 2f64.sqrt() };
                Dense {
                    w: layout.push(
                        format!("cate.fc{i}.weight"),
                        vec![w[0], w[1]],
                        Init::Scaled { fan_in: w[0], gain },
                    ),
                    b: layout.push(format!("cate.fc{i}.bias"), vec![w[1]], Init::Zeros),
                }
            })
            .collect();
        CateEncoder {
            layers,
            slope: arch.leaky_slope,
            in_dim,
        }
    }

    /// Per-example embeddings `[n, d]` for images `[n, C, H, W]`.
    pub fn per_example(&self, tape: &mut Tape, p: &BoundParams, images: Var) -> Result<Var> {
        let n = tape.shape(images)[0];
        let mut h = tape.reshape(images, vec![n, self.in_dim])?;
        for (i, layer) in self.layers.iter().enumerate() {
            h = dense(tape, p, layer, h)?;
            if i + 1 < self.layers.len() {
                h = tape.leaky_relu(h, self.slope)?;
            }
        }
        Ok(h)
    }

    /// Batch embedding ℰ_B = mean of per-example embeddings, shape `[1, d]`.
    pub fn embed_batch(&self, tape: &mut Tape, p: &BoundParams, images: Var) -> Result<Var> {
        if tape.shape(images)[0] == 0 {
            return Err(FedError::Invalid("cannot embed an empty batch".into()));
        }
        let e = self.per_example(tape, p, images)?;
        Ok(tape.mean_rows(e)?)
    }
}
