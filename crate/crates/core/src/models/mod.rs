//! The client networks: CATE task encoder, conditional generator, and the
//! two-headed discriminator, all packed into one flat parameter vector.

mod arch;
mod cate;
pub mod checkpoint;
mod discriminator;
mod generator;

use std::ops::Range;

use numkit::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub use arch::{ArchConfig, ImageShape, Scale, DEFAULT_EMBED_DIM, NOISE_DIM};
pub use cate::CateEncoder;
pub use discriminator::Discriminator;
pub use generator::Generator;

use crate::error::{FedError, Result};
use crate::params::{BoundParams, ParamId, ParamLayout, ParamVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Dense {
    pub w: ParamId,
    pub b: ParamId,
}

pub(crate) fn dense(tape: &mut Tape, p: &BoundParams, layer: &Dense, x: Var) -> Result<Var> {
    let h = tape.matmul(x, p.var(layer.w))?;
    Ok(tape.add_bias(h, p.var(layer.b))?)
}

/// One of the three networks; each owns a contiguous parameter range.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Segment {
    Cate,
    Generator,
    Discriminator,
}

/// The full client model: layout plus the three networks built on it.
#[derive(Debug, Clone)]
pub struct ClientModel {
    arch: ArchConfig,
    layout: ParamLayout,
    pub cate: CateEncoder,
    pub generator: Generator,
    pub discriminator: Discriminator,
    ranges: [Range<usize>; 3],
    entry_segments: Vec<Segment>,
}

impl ClientModel {
    pub fn new(arch: ArchConfig) -> Result<Self> {
        arch.validate()?;
        let mut layout = ParamLayout::new();
        let mut entry_segments = Vec::new();
        let mark = |layout: &ParamLayout, seg, segs: &mut Vec<Segment>| {
            segs.resize(layout.entries().len(), seg);
            layout.len()
        };
        let cate = CateEncoder::register(&mut layout, &arch);
        let c_end = mark(&layout, Segment::Cate, &mut entry_segments);
        let generator = Generator::register(&mut layout, &arch);
        let g_end = mark(&layout, Segment::Generator, &mut entry_segments);
        let discriminator = Discriminator::register(&mut layout, &arch);
        let d_end = mark(&layout, Segment::Discriminator, &mut entry_segments);
        Ok(ClientModel {
            arch,
            layout,
            cate,
            generator,
            discriminator,
            ranges: [0..c_end, c_end..g_end, g_end..d_end],
            entry_segments,
        })
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn param_count(&self) -> usize {
        self.layout.len()
    }

    pub fn segment_range(&self, seg: Segment) -> Range<usize> {
        self.ranges[seg as usize].clone()
    }

    pub fn segment_of(&self, id: ParamId) -> Segment {
        self.entry_segments[id.0]
    }

    /// Parameter ids of the class head (weight, bias).
    pub fn class_head_params(&self) -> (ParamId, ParamId) {
        self.discriminator.class_head_params()
    }

    /// Fresh parameters; a pure function of `seed`.
    pub fn init_params(&self, seed: u64) -> ParamVector {
        self.layout.initialize(&mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn check_params(&self, params: &ParamVector) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(FedError::Dimension(format!(
                "model has {} parameters, vector has {}",
                self.param_count(),
                params.len()
            )));
        }
        Ok(())
    }

    /// Binds parameters, making the listed segments trainable.
    pub fn bind(
        &self,
        tape: &mut Tape,
        params: &ParamVector,
        trainable: &[Segment],
    ) -> Result<BoundParams> {
        self.layout
            .bind(tape, params, |id| trainable.contains(&self.segment_of(id)))
    }

    pub fn one_hot(&self, labels: &[usize]) -> Result<Tensor> {
        let c = self.arch.num_classes;
        let mut data = vec![0.0; labels.len() * c];
        for (i, &y) in labels.iter().enumerate() {
            if y >= c {
                return Err(FedError::Invalid(format!(
                    "label {y} outside the {c}-class range"
                )));
            }
            data[i * c + y] = 1.0;
        }
        Ok(Tensor::new(vec![labels.len(), c], data)?)
    }

    pub fn sample_noise<R: Rng>(&self, rng: &mut R, n: usize) -> Tensor {
        let d = self.arch.noise_dim;
        let data = (0..n * d).map(|_| rng.sample(StandardNormal)).collect();
        Tensor::new(vec![n, d], data).expect("noise shape")
    }

    /// Records a generator pass for `labels` on `tape`.
    pub fn generate_on<R: Rng>(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        labels: &[usize],
        rng: &mut R,
    ) -> Result<Var> {
        let one_hot = self.one_hot(labels)?;
        let noise = tape.constant(self.sample_noise(rng, labels.len()))?;
        let one_hot = tape.constant(one_hot)?;
        self.generator.forward(tape, bound, noise, one_hot)
    }

    /// Batch of images `[n, C, H, W]` for `labels`, deterministic in `seed`.
    pub fn generate_images(
        &self,
        params: &ParamVector,
        labels: &[usize],
        seed: u64,
    ) -> Result<Tensor> {
        self.check_params(params)?;
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, params, &[])?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let out = self.generate_on(&mut tape, &bound, labels, &mut rng)?;
        Ok(tape.value(out).clone())
    }

    /// Labelled synthetic images, one per requested label.
    pub fn generate(
        &self,
        params: &ParamVector,
        labels: &[usize],
        seed: u64,
    ) -> Result<Vec<(Vec<f64>, usize)>> {
        let images = self.generate_images(params, labels, seed)?;
        let per = self.arch.image.numel();
        Ok(images
            .data()
            .chunks(per)
            .zip(labels)
            .map(|(img, &y)| (img.to_vec(), y))
            .collect())
    }

    /// ℰ_B for a batch `[n, C, H, W]`.
    pub fn embed_batch(&self, params: &ParamVector, images: &Tensor) -> Result<Vec<f64>> {
        self.check_params(params)?;
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, params, &[])?;
        let x = tape.constant(images.clone())?;
        let e = self.cate.embed_batch(&mut tape, &bound, x)?;
        Ok(tape.value(e).data().to_vec())
    }

    /// Per-example CATE embeddings, one row per image.
    pub fn embed_each(&self, params: &ParamVector, images: &Tensor) -> Result<Vec<Vec<f64>>> {
        self.check_params(params)?;
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, params, &[])?;
        let x = tape.constant(images.clone())?;
        let e = self.cate.per_example(&mut tape, &bound, x)?;
        Ok(tape
            .value(e)
            .data()
            .chunks(self.arch.embed_dim)
            .map(<[f64]>::to_vec)
            .collect())
    }

    /// Fails when one label with different noise yields identical images.
    pub fn check_generator(&self, params: &ParamVector) -> Result<()> {
        let imgs = self.generate(params, &[0, 0], 0)?;
        if imgs[0].0 == imgs[1].0 {
            return Err(FedError::Invalid(
                "generator ignores its noise input".into(),
            ));
        }
        Ok(())
    }

    /// Real/fake logit and class logits for one image under embedding ℰ.
    pub fn discriminate(
        &self,
        params: &ParamVector,
        image: &[f64],
        embedding: &[f64],
    ) -> Result<(f64, Vec<f64>)> {
        self.check_params(params)?;
        if image.len() != self.arch.image.numel() {
            return Err(FedError::Dimension(format!(
                "image has {} values, expected {}",
                image.len(),
                self.arch.image.numel()
            )));
        }
        if embedding.len() != self.arch.embed_dim {
            return Err(FedError::Dimension(format!(
                "embedding has {} entries, expected {}",
                embedding.len(),
                self.arch.embed_dim
            )));
        }
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, params, &[])?;
        let [c, h, w] = self.arch.image.dims();
        let x = tape.constant(Tensor::new(vec![1, c, h, w], image.to_vec())?)?;
        let e = tape.constant(Tensor::new(vec![1, embedding.len()], embedding.to_vec())?)?;
        let f = self.discriminator.features(&mut tape, &bound, x)?;
        let rf = self.discriminator.real_fake(&mut tape, &bound, f)?;
        let cls = self.discriminator.classify(&mut tape, &bound, f, e)?;
        Ok((tape.value(rf).data()[0], tape.value(cls).data().to_vec()))
    }
}
