//! The small feed-forward embedding network and its classifier centers.
//!
//! Forward: `h_{l+1} = act_l(W_l h_l + b_l)`, last layer linear, then the
//! output is projected onto the unit sphere. Backward is exact, including the
//! Jacobian of `z / ‖z‖`.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::matrix::{dot, l2_norm, Matrix};
use crate::error::{Error, Result};

/// Pre-normalization norms below this are rejected instead of clamped.
pub const DEGENERATE_NORM: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Tanh,
}

impl Activation {
    pub fn tag(self) -> u8 {
        match self {
            Activation::Identity => 0,
            Activation::Tanh => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Activation::Identity),
            1 => Some(Activation::Tanh),
            _ => None,
        }
    }

    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the activation output.
    #[inline]
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Tanh => 1.0 - y * y,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `out × in`.
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn input_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.rows()
    }
}

/// Backbone shape used to build a fresh model.
#[derive(Debug, Clone, PartialEq)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
    pub num_classes: usize,
}

impl Architecture {
    /// Two tanh hidden layers of width 64 projecting to a 16-d sphere.
    pub fn desk(input_dim: usize, num_classes: usize) -> Self {
        Self {
            input_dim,
            hidden: vec![64, 64],
            embed_dim: 16,
            num_classes,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingModel {
    layers: Vec<Layer>,
    /// Raw class centers, `num_classes × embed_dim`; normalized when consumed.
    centers: Matrix,
}

/// Everything the backward pass needs from one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// `activations[0]` is the input, `activations[l + 1]` the output of layer `l`.
    activations: Vec<Vec<f64>>,
    pre_norm_length: f64,
    embedding: Vec<f64>,
}

impl ForwardCache {
    pub fn embedding(&self) -> &[f64] {
        &self.embedding
    }

    pub fn into_embedding(self) -> Vec<f64> {
        self.embedding
    }
}

/// Parameter gradients, block-aligned with [`EmbeddingModel::param_blocks`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<(Matrix, Vec<f64>)>,
    pub centers: Matrix,
}

impl Gradients {
    pub fn zeros_like(model: &EmbeddingModel) -> Self {
        Self {
            layers: model
                .layers
                .iter()
                .map(|l| (Matrix::zeros(l.weight.rows(), l.weight.cols()), vec![0.0; l.bias.len()]))
                .collect(),
            centers: Matrix::zeros(model.centers.rows(), model.centers.cols()),
        }
    }

    pub fn blocks(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(self.layers.len() * 2 + 1);
        for (w, b) in &self.layers {
            out.push(w.as_slice());
            out.push(b.as_slice());
        }
        out.push(self.centers.as_slice());
        out
    }

    /// `self += other`.
    pub fn accumulate(&mut self, other: &Gradients) {
        for ((w, b), (ow, ob)) in self.layers.iter_mut().zip(&other.layers) {
            for (d, s) in w.as_mut_slice().iter_mut().zip(ow.as_slice()) {
                *d += s;
            }
            for (d, s) in b.iter_mut().zip(ob) {
                *d += s;
            }
        }
        for (d, s) in self
            .centers
            .as_mut_slice()
            .iter_mut()
            .zip(other.centers.as_slice())
        {
            *d += s;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.blocks().iter().all(|b| b.iter().all(|v| v.is_finite()))
    }
}

impl EmbeddingModel {
    /// Glorot-uniform weights, zero biases, random unit centers.
    pub fn init<R: Rng + ?Sized>(arch: &Architecture, rng: &mut R) -> Result<Self> {
        if arch.input_dim == 0 || arch.embed_dim == 0 || arch.num_classes == 0 {
            return Err(Error::Dimension(
                "input_dim, embed_dim and num_classes must be positive".into(),
            ));
        }
        let mut dims = vec![arch.input_dim];
        dims.extend(&arch.hidden);
        dims.push(arch.embed_dim);
        let n_layers = dims.len() - 1;
        let mut layers = Vec::with_capacity(n_layers);
        for (l, pair) in dims.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let data = (0..fan_in * fan_out)
                .map(|_| rng.random_range(-bound..=bound))
                .collect();
            layers.push(Layer {
                weight: Matrix::from_vec(fan_out, fan_in, data)?,
                bias: vec![0.0; fan_out],
                activation: if l + 1 == n_layers {
                    Activation::Identity
                } else {
                    Activation::Tanh
                },
            });
        }
        let mut centers = Matrix::zeros(arch.num_classes, arch.embed_dim);
        for c in 0..arch.num_classes {
            loop {
                let row: Vec<f64> = (0..arch.embed_dim)
                    .map(|_| StandardNormal.sample(rng))
                    .collect();
                let n = l2_norm(&row);
                if n > DEGENERATE_NORM {
                    for (d, v) in centers.row_mut(c).iter_mut().zip(&row) {
                        *d = v / n;
                    }
                    break;
                }
            }
        }
        Self::from_parts(layers, centers)
    }

    pub fn from_parts(layers: Vec<Layer>, centers: Matrix) -> Result<Self> {
        let Some(first) = layers.first() else {
            return Err(Error::Dimension("model needs at least one layer".into()));
        };
        let mut width = first.input_dim();
        for (i, l) in layers.iter().enumerate() {
            if l.input_dim() != width {
                return Err(Error::Dimension(format!(
                    "layer {i} expects input {} but previous layer emits {width}",
                    l.input_dim()
                )));
            }
            if l.bias.len() != l.output_dim() {
                return Err(Error::Dimension(format!(
                    "layer {i} bias has {} entries for {} outputs",
                    l.bias.len(),
                    l.output_dim()
                )));
            }
            width = l.output_dim();
        }
        if centers.cols() != width {
            return Err(Error::Dimension(format!(
                "centers have dimension {} but the backbone embeds into {width}",
                centers.cols()
            )));
        }
        let model = Self { layers, centers };
        if !model.param_blocks().iter().all(|b| b.iter().all(|v| v.is_finite())) {
            return Err(Error::Numeric("model parameters must be finite".into()));
        }
        Ok(model)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn centers(&self) -> &Matrix {
        &self.centers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn embed_dim(&self) -> usize {
        self.centers.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.centers.rows()
    }

    /// Parameter blocks in a fixed order: per layer weight then bias, then centers.
    pub fn param_blocks(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(self.layers.len() * 2 + 1);
        for l in &self.layers {
            out.push(l.weight.as_slice());
            out.push(l.bias.as_slice());
        }
        out.push(self.centers.as_slice());
        out
    }

    pub fn param_blocks_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(self.layers.len() * 2 + 1);
        for l in &mut self.layers {
            out.push(l.weight.as_mut_slice());
            out.push(l.bias.as_mut_slice());
        }
        out.push(self.centers.as_mut_slice());
        out
    }

    pub fn forward(&self, input: &[f64]) -> Result<ForwardCache> {
        if input.len() != self.input_dim() {
            return Err(Error::Dimension(format!(
                "model expects input of length {}, got {}",
                self.input_dim(),
                input.len()
            )));
        }
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(input.to_vec());
        for layer in &self.layers {
            let prev = activations.last().expect("input pushed above");
            let mut out = layer.weight.matvec(prev)?;
            for (o, b) in out.iter_mut().zip(&layer.bias) {
                *o = layer.activation.apply(*o + b);
            }
            activations.push(out);
        }
        let z = activations.last().expect("at least one layer");
        let norm = l2_norm(z);
        if !norm.is_finite() {
            return Err(Error::Numeric("non-finite pre-normalization vector".into()));
        }
        if norm < DEGENERATE_NORM {
            return Err(Error::DegenerateEmbedding { norm });
        }
        let embedding = z.iter().map(|v| v / norm).collect();
        Ok(ForwardCache {
            activations,
            pre_norm_length: norm,
            embedding,
        })
    }

    /// Unit-norm embedding of `input`.
    pub fn embed(&self, input: &[f64]) -> Result<Vec<f64>> {
        self.forward(input).map(ForwardCache::into_embedding)
    }

    /// Backpropagates a gradient on the unit embedding into the backbone.
    /// The returned center gradient is zero; the loss head fills it.
    pub fn backward(&self, cache: &ForwardCache, upstream: &[f64]) -> Result<Gradients> {
        let mut grads = Gradients::zeros_like(self);
        self.backward_into(cache, upstream, &mut grads)?;
        Ok(grads)
    }

    /// Like [`backward`](Self::backward) but accumulates into `grads`.
    pub fn backward_into(
        &self,
        cache: &ForwardCache,
        upstream: &[f64],
        grads: &mut Gradients,
    ) -> Result<()> {
        if upstream.len() != self.embed_dim() {
            return Err(Error::Dimension(format!(
                "upstream gradient has length {}, embedding has {}",
                upstream.len(),
                self.embed_dim()
            )));
        }
        if upstream.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numeric("non-finite upstream gradient".into()));
        }
        // d(z/‖z‖)/dz = (I − e eᵀ) / ‖z‖
        let e = &cache.embedding;
        let proj = dot(e, upstream);
        let mut delta: Vec<f64> = upstream
            .iter()
            .zip(e)
            .map(|(g, ei)| (g - ei * proj) / cache.pre_norm_length)
            .collect();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let out = &cache.activations[l + 1];
            for (d, &y) in delta.iter_mut().zip(out) {
                *d *= layer.activation.derivative_from_output(y);
            }
            let input = &cache.activations[l];
            let (gw, gb) = &mut grads.layers[l];
            gw.add_outer(&delta, input, 1.0);
            for (b, d) in gb.iter_mut().zip(&delta) {
                *b += d;
            }
            if l > 0 {
                delta = layer.weight.matvec_transposed(&delta)?;
            }
        }
        Ok(())
    }

    /// Unit-normalized centers plus their original lengths.
    pub fn normalized_centers(&self) -> Result<(Matrix, Vec<f64>)> {
        let mut out = self.centers.clone();
        let mut norms = Vec::with_capacity(out.rows());
        for r in 0..out.rows() {
            let n = l2_norm(self.centers.row(r));
            if n < DEGENERATE_NORM {
                return Err(Error::DegenerateEmbedding { norm: n });
            }
            for v in out.row_mut(r) {
                *v /= n;
            }
            norms.push(n);
        }
        Ok((out, norms))
    }

    /// Pulls gradients on normalized centers back to the raw center parameters.
    pub fn center_grads_from_normalized(
        normalized: &Matrix,
        norms: &[f64],
        grad_normalized: &Matrix,
        out: &mut Matrix,
    ) {
        for (r, &norm) in norms.iter().enumerate().take(normalized.rows()) {
            let w = normalized.row(r);
            let g = grad_normalized.row(r);
            let proj = dot(w, g);
            for ((o, gi), wi) in out.row_mut(r).iter_mut().zip(g).zip(w) {
                *o += (gi - wi * proj) / norm;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Purpose};

    fn identity_model() -> EmbeddingModel {
        EmbeddingModel::from_parts(
            vec![Layer {
                weight: Matrix::identity(2),
                bias: vec![0.0; 2],
                activation: Activation::Identity,
            }],
            Matrix::from_vec(1, 2, vec![1.0, 0.0]).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn identity_layer_normalizes_three_four() {
        let e = identity_model().embed(&[3.0, 4.0]).unwrap();
        assert_eq!(e, vec![0.6, 0.8]);
    }

    #[test]
    fn embed_is_bitwise_deterministic() {
        let mut rng = stream(7, Purpose::Init, 1);
        let model = EmbeddingModel::init(&Architecture::desk(8, 3), &mut rng).unwrap();
        let x: Vec<f64> = (0..8).map(|i| (i as f64 * 0.37).sin()).collect();
        let a = model.embed(&x).unwrap();
        let b = model.embed(&x).unwrap();
        assert!(a.iter().zip(&b).all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    #[test]
    fn shape_and_degenerate_errors() {
        let m = identity_model();
        assert!(matches!(m.embed(&[1.0]), Err(Error::Dimension(_))));
        assert!(matches!(
            m.embed(&[0.0, 0.0]),
            Err(Error::DegenerateEmbedding { .. })
        ));
    }

    #[test]
    fn zero_and_doubled_upstream() {
        let mut rng = stream(3, Purpose::Init, 1);
        let arch = Architecture {
            input_dim: 5,
            hidden: vec![7, 6],
            embed_dim: 4,
            num_classes: 3,
        };
        let model = EmbeddingModel::init(&arch, &mut rng).unwrap();
        let x = [0.3, -0.2, 0.9, 0.1, -0.5];
        let cache = model.forward(&x).unwrap();
        let zero = model.backward(&cache, &[0.0; 4]).unwrap();
        assert!(zero.blocks().iter().all(|b| b.iter().all(|v| *v == 0.0)));

        let g = [0.4, -1.0, 0.25, 2.0];
        let g2: Vec<f64> = g.iter().map(|v| 2.0 * v).collect();
        let one = model.backward(&cache, &g).unwrap();
        let two = model.backward(&cache, &g2).unwrap();
        for (a, b) in one.blocks().iter().zip(two.blocks()) {
            for (x, y) in a.iter().zip(b) {
                assert!((2.0 * x - y).abs() <= 1e-15 * y.abs().max(1.0));
            }
        }
        assert!(matches!(
            model.backward(&cache, &[f64::NAN, 0.0, 0.0, 0.0]),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn inconsistent_layer_chain_is_rejected() {
        let l0 = Layer {
            weight: Matrix::zeros(3, 2),
            bias: vec![0.0; 3],
            activation: Activation::Tanh,
        };
        let l1 = Layer {
            weight: Matrix::zeros(2, 4),
            bias: vec![0.0; 2],
            activation: Activation::Identity,
        };
        assert!(EmbeddingModel::from_parts(vec![l0, l1], Matrix::zeros(1, 2)).is_err());
    }
}
