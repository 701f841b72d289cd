use numkit::{Tape, Var};

use super::arch::ArchConfig;
use super::{dense, Dense};
use crate::error::Result;
use crate::params::{BoundParams, Init, ParamId, ParamLayout};

#[derive(Debug, Clone, PartialEq)]
struct UpStage {
    w: ParamId,
    b: ParamId,
    kernel: usize,
    stride: usize,
    pad: usize,
}

/// Class-conditional generator: `[z ‖ one_hot(y)]` → dense projection →
/// four transposed convolutions (1×1 → H/8 → H/4 → H/2 → H) → tanh.
#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    proj: Dense,
    stages: Vec<UpStage>,
    proj_width: usize,
    num_classes: usize,
    noise_dim: usize,
    slope: f64,
}

impl Generator {
    pub(crate) fn register(layout: &mut ParamLayout, arch: &ArchConfig) -> Self {
        let input = arch.noise_dim + arch.num_classes;
        let proj_width = arch.gen_channels[0];
        let proj = Dense {
            w: layout.push(
                "gen.proj.weight",
                vec![input, proj_width],
                Init::Scaled {
                    fan_in: input,
                    gain: 2f64.sqrt(),
                },
            ),
            b: layout.push("gen.proj.bias", vec![proj_width], Init::Zeros),
        };
        let mut chans = arch.gen_channels.clone();
        chans.push(arch.image.channels);
        let first_kernel = arch.image.height / 8;
        let stages = chans
            .windows(2)
            .enumerate()
            .map(|(i, c)| {
                let (kernel, stride, pad) = if i == 0 {
                    (first_kernel, 1, 0)
                } else {
                    (4, 2, 1)
                };
                let fan_in = c[0] * kernel * kernel / (stride * stride);
                let gain = if i + 2 == chans.len() {
                    1.0
                } else {
                    2f64.sqrt()
                };
                UpStage {
                    w: layout.push(
                        format!("gen.up{i}.weight"),
                        vec![c[0], c[1], kernel, kernel],
                        Init::Scaled { fan_in, gain },
                    ),
                    b: layout.push(format!("gen.up{i}.bias"), vec![c[1]], Init::Zeros),
                    kernel,
                    stride,
                    pad,
                }
            })
            .collect();
        Generator {
            proj,
            stages,
            proj_width,
            num_classes: arch.num_classes,
            noise_dim: arch.noise_dim,
            slope: arch.leaky_slope,
        }
    }

    pub fn noise_dim(&self) -> usize {
        self.noise_dim
    }

    /// Images in [−1, 1] from noise `[n, noise_dim]` and one-hot labels
    /// `[n, num_classes]`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &BoundParams,
        noise: Var,
        one_hot: Var,
    ) -> Result<Var> {
        let n = tape.shape(noise)[0];
        debug_assert_eq!(tape.shape(one_hot), &[n, self.num_classes]);
        let x = tape.concat(&[noise, one_hot])?;
        let h = dense(tape, p, &self.proj, x)?;
        let h = tape.leaky_relu(h, self.slope)?;
        let mut h = tape.reshape(h, vec![n, self.proj_width, 1, 1])?;
        for (i, s) in self.stages.iter().enumerate() {
            h = tape.conv_transpose2d(h, p.var(s.w), s.stride, s.pad)?;
            h = tape.add_bias(h, p.var(s.b))?;
            h = if i + 1 < self.stages.len() {
                tape.leaky_relu(h, self.slope)?
            } else {
                tape.tanh(h)?
            };
        }
        Ok(h)
    }
}
