//! MLP backbone producing deep features, a linear classification head, hand
//! written backpropagation, momentum SGD and a binary checkpoint format.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::numerics::{Matrix, Vector};
use crate::rng::Rng;

/// Affine layer `y = x Wᵀ + b` with `W` stored as `out × in`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub w: Matrix,
    pub b: Vector,
}

impl Dense {
    pub fn zeros(inp: usize, out: usize) -> Self {
        Dense {
            w: Matrix::zeros(out, inp),
            b: Vector::zeros(out),
        }
    }

    /// Uniform in `±1/sqrt(fan_in)`, zero bias.
    pub fn init(inp: usize, out: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (inp as f64).sqrt();
        Dense {
            w: Matrix::from_fn(out, inp, |_, _| rng.uniform_in(-bound, bound)),
            b: Vector::zeros(out),
        }
    }

    pub fn inputs(&self) -> usize {
        self.w.cols()
    }

    pub fn outputs(&self) -> usize {
        self.w.rows()
    }

    pub fn forward(&self, x: &Matrix) -> Matrix {
        assert_eq!(x.cols(), self.inputs(), "dense input width mismatch");
        let mut y = x.matmul_t(&self.w);
        for i in 0..y.rows() {
            y.row_mut(i).iter_mut().zip(self.b.iter()).for_each(|(v, b)| *v += b);
        }
        y
    }
}

/// Gradient of a [`Dense`] layer.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseGrad {
    pub w: Matrix,
    pub b: Vector,
}

impl DenseGrad {
    /// From the layer input `x` and the upstream gradient `dy`.
    pub fn from_batch(x: &Matrix, dy: &Matrix) -> Self {
        let w = dy.t_matmul(x);
        let mut b = Vector::zeros(dy.cols());
        for r in dy.row_iter() {
            b.iter_mut().zip(r).for_each(|(s, v)| *s += v);
        }
        DenseGrad { w, b }
    }

    pub fn zeros_like(l: &Dense) -> Self {
        DenseGrad {
            w: Matrix::zeros(l.w.rows(), l.w.cols()),
            b: Vector::zeros(l.b.len()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub input_dim: usize,
    /// Widths of the rectified hidden layers.
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
}

impl BackboneSpec {
    /// Total number of affine layers.
    pub fn depth(&self) -> usize {
        self.hidden.len() + 1
    }
}

/// Stack of affine layers with ReLU between them; the final (feature) layer
/// is linear.
#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    pub layers: Vec<Dense>,
}

impl Backbone {
    pub fn new(spec: &BackboneSpec, rng: &mut Rng) -> Self {
        let mut dims = vec![spec.input_dim];
        dims.extend(&spec.hidden);
        dims.push(spec.feature_dim);
        Backbone {
            layers: dims.windows(2).map(|w| Dense::init(w[0], w[1], rng)).collect(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn feature_dim(&self) -> usize {
        self.layers.last().expect("non-empty backbone").outputs()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearHead {
    /// `C × H`.
    pub w: Matrix,
    pub b: Vector,
}

impl LinearHead {
    pub fn zeros(classes: usize, features: usize) -> Self {
        LinearHead {
            w: Matrix::zeros(classes, features),
            b: Vector::zeros(classes),
        }
    }

    pub fn init(classes: usize, features: usize, rng: &mut Rng) -> Self {
        let d = Dense::init(features, classes, rng);
        LinearHead { w: d.w, b: d.b }
    }

    pub fn classes(&self) -> usize {
        self.w.rows()
    }

    pub fn features(&self) -> usize {
        self.w.cols()
    }

    pub fn logits(&self, features: &Matrix) -> Matrix {
        assert_eq!(features.cols(), self.features(), "head input width mismatch");
        let mut u = features.matmul_t(&self.w);
        for i in 0..u.rows() {
            u.row_mut(i).iter_mut().zip(self.b.iter()).for_each(|(v, b)| *v += b);
        }
        u
    }

    pub fn logits_one(&self, h: &[f64]) -> Vec<f64> {
        let mut u = self.w.mul_vec(h);
        u.iter_mut().zip(self.b.iter()).for_each(|(v, b)| *v += b);
        u
    }

    pub fn add_scaled(&mut self, s: f64, g: &HeadGrad) {
        self.w.add_scaled(s, &g.w);
        crate::numerics::axpy(s, &g.b, &mut self.b);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadGrad {
    pub w: Matrix,
    pub b: Vector,
}

impl HeadGrad {
    pub fn zeros(classes: usize, features: usize) -> Self {
        HeadGrad {
            w: Matrix::zeros(classes, features),
            b: Vector::zeros(classes),
        }
    }

    pub fn dot(&self, other: &HeadGrad) -> f64 {
        crate::numerics::dot(self.w.as_slice(), other.w.as_slice())
            + crate::numerics::dot(&self.b, &other.b)
    }
}

/// Backbone plus head. `generation` advances on every parameter update so a
/// cache from an earlier forward pass can be detected.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub backbone: Backbone,
    pub head: LinearHead,
    generation: u64,
}

#[derive(Clone, Debug)]
pub struct ForwardCache {
    generation: u64,
    /// Input to every layer; `inputs[0]` is the raw batch.
    inputs: Vec<Matrix>,
    /// Pre-activations of the rectified layers.
    pre: Vec<Matrix>,
}

#[derive(Clone, Debug)]
pub struct Forward {
    pub features: Matrix,
    pub logits: Matrix,
    pub cache: ForwardCache,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelGrad {
    pub backbone: Vec<DenseGrad>,
    pub head: HeadGrad,
}

impl Model {
    pub fn new(spec: &BackboneSpec, classes: usize, rng: &mut Rng) -> Self {
        let backbone = Backbone::new(spec, rng);
        let head = LinearHead::init(classes, spec.feature_dim, rng);
        Model {
            backbone,
            head,
            generation: 0,
        }
    }

    pub fn from_parts(backbone: Backbone, head: LinearHead) -> Result<Self> {
        if backbone.feature_dim() != head.features() {
            return Err(contract("backbone feature width differs from head input width"));
        }
        for w in backbone.layers.windows(2) {
            if w[0].outputs() != w[1].inputs() {
                return Err(contract("backbone layer widths do not chain"));
            }
        }
        Ok(Model {
            backbone,
            head,
            generation: 0,
        })
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn classes(&self) -> usize {
        self.head.classes()
    }

    pub fn features(&self, x: &Matrix) -> Matrix {
        self.forward(x).features
    }

    pub fn forward(&self, x: &Matrix) -> Forward {
        assert_eq!(x.cols(), self.backbone.input_dim(), "input width mismatch");
        let n_layers = self.backbone.layers.len();
        let mut inputs = Vec::with_capacity(n_layers);
        let mut pre = Vec::with_capacity(n_layers - 1);
        let mut a = x.clone();
        for (k, layer) in self.backbone.layers.iter().enumerate() {
            let z = layer.forward(&a);
            inputs.push(a);
            if k + 1 < n_layers {
                let mut r = z.clone();
                r.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
                pre.push(z);
                a = r;
            } else {
                a = z;
            }
        }
        let logits = self.head.logits(&a);
        Forward {
            features: a,
            logits,
            cache: ForwardCache {
                generation: self.generation,
                inputs,
                pre,
            },
        }
    }

    /// Backbone gradients for an upstream gradient on the features.
    pub fn backward_features(&self, cache: &ForwardCache, d_features: &Matrix) -> Result<Vec<DenseGrad>> {
        if cache.generation != self.generation {
            return Err(contract("stale forward cache"));
        }
        let layers = &self.backbone.layers;
        let mut grads = Vec::with_capacity(layers.len());
        let mut dy = d_features.clone();
        for k in (0..layers.len()).rev() {
            grads.push(DenseGrad::from_batch(&cache.inputs[k], &dy));
            if k == 0 {
                break;
            }
            let mut dx = dy.matmul(&layers[k].w);
            // rectifier of layer k-1
            for (g, z) in dx.as_mut_slice().iter_mut().zip(cache.pre[k - 1].as_slice()) {
                if *z <= 0.0 {
                    *g = 0.0;
                }
            }
            dy = dx;
        }
        grads.reverse();
        Ok(grads)
    }

    /// Gradients of every parameter given `d_logits` and the cached forward pass.
    pub fn backward(&self, cache: &ForwardCache, features: &Matrix, d_logits: &Matrix) -> Result<ModelGrad> {
        let head = DenseGrad::from_batch(features, d_logits);
        let d_features = d_logits.matmul(&self.head.w);
        Ok(ModelGrad {
            backbone: self.backward_features(cache, &d_features)?,
            head: HeadGrad { w: head.w, b: head.b },
        })
    }

    /// Full gradient from a precomputed head gradient and feature gradient.
    pub fn grad_from_parts(&self, cache: &ForwardCache, head: HeadGrad, d_features: &Matrix) -> Result<ModelGrad> {
        Ok(ModelGrad {
            backbone: self.backward_features(cache, d_features)?,
            head,
        })
    }

    /// Mutable parameter slices with a flag telling whether weight decay applies.
    fn params_mut(&mut self) -> Vec<(&mut [f64], bool)> {
        let mut out: Vec<(&mut [f64], bool)> = Vec::new();
        for l in &mut self.backbone.layers {
            out.push((l.w.as_mut_slice(), true));
            out.push((&mut l.b[..], false));
        }
        out.push((self.head.w.as_mut_slice(), true));
        out.push((&mut self.head.b[..], false));
        out
    }

    pub fn param_count(&self) -> usize {
        self.backbone
            .layers
            .iter()
            .map(|l| l.w.as_slice().len() + l.b.len())
            .sum::<usize>()
            + self.head.w.as_slice().len()
            + self.head.b.len()
    }

    pub fn bump_generation(&mut self) {
        self.generation += 1;
    }
}

impl ModelGrad {
    fn slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for g in &self.backbone {
            out.push(g.w.as_slice());
            out.push(&g.b);
        }
        out.push(self.head.w.as_slice());
        out.push(&self.head.b);
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// `(iteration, multiplier)` pairs; from `iteration` on the rate is
    /// multiplied by `multiplier` (cumulatively).
    pub schedule: Vec<(u64, f64)>,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            learning_rate: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            schedule: vec![(1000, 0.2), (1500, 0.2)],
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must lie in [0, 1)".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        if self.schedule.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(Error::Config("schedule iterations must be strictly increasing".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, iteration: u64) -> f64 {
        self.schedule
            .iter()
            .filter(|(t, _)| *t <= iteration)
            .fold(self.learning_rate, |lr, (_, m)| lr * m)
    }
}

/// Momentum buffers for [`sgd_step`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SgdState {
    velocity: Vec<Vec<f64>>,
}

/// `v ← μ v + g + λ_wd θ` (weights only), `θ ← θ − lr(t) v`.
pub fn sgd_step(model: &mut Model, grad: &ModelGrad, state: &mut SgdState, cfg: &SgdConfig, iteration: u64) {
    let lr = cfg.lr_at(iteration);
    let grads = grad.slices();
    let params = model.params_mut();
    assert_eq!(params.len(), grads.len(), "gradient does not match model");
    if state.velocity.is_empty() {
        state.velocity = grads.iter().map(|g| vec![0.0; g.len()]).collect();
    }
    for (((p, decay), g), v) in params.into_iter().zip(grads).zip(&mut state.velocity) {
        assert_eq!(p.len(), g.len(), "gradient shape mismatch");
        for ((pi, gi), vi) in p.iter_mut().zip(g).zip(v.iter_mut()) {
            let mut d = *gi;
            if decay && cfg.weight_decay != 0.0 {
                d += cfg.weight_decay * *pi;
            }
            *vi = cfg.momentum * *vi + d;
            *pi -= lr * *vi;
        }
    }
    model.bump_generation();
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"ICDACKPT";
const CHECKPOINT_VERSION: u32 = 1;

/// Named tensors with shape headers in a versioned little-endian blob:
/// magic, version, count, then per tensor `name_len, name, rank, dims.., data..`.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Vec<usize>, Vec<f64>)>,
}

impl Checkpoint {
    pub fn from_model(model: &Model) -> Self {
        let mut tensors = Vec::new();
        for (k, l) in model.backbone.layers.iter().enumerate() {
            tensors.push((format!("backbone.{k}.w"), vec![l.w.rows(), l.w.cols()], l.w.as_slice().to_vec()));
            tensors.push((format!("backbone.{k}.b"), vec![l.b.len()], l.b.to_vec()));
        }
        tensors.push(("head.w".into(), vec![model.head.w.rows(), model.head.w.cols()], model.head.w.as_slice().to_vec()));
        tensors.push(("head.b".into(), vec![model.head.b.len()], model.head.b.to_vec()));
        Checkpoint { tensors }
    }

    pub fn to_model(&self) -> Result<Model> {
        let find = |name: &str| {
            self.tensors
                .iter()
                .find(|(n, _, _)| n == name)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks {name}")))
        };
        let matrix = |name: &str| -> Result<Matrix> {
            let (_, shape, data) = find(name)?;
            if shape.len() != 2 {
                return Err(Error::Format(format!("{name} is not a matrix")));
            }
            Matrix::from_vec(shape[0], shape[1], data.clone())
        };
        let vector = |name: &str| -> Result<Vector> { Ok(Vector::from(find(name)?.2.clone())) };
        let depth = self.tensors.iter().filter(|(n, _, _)| n.starts_with("backbone.") && n.ends_with(".w")).count();
        let layers = (0..depth)
            .map(|k| {
                Ok(Dense {
                    w: matrix(&format!("backbone.{k}.w"))?,
                    b: vector(&format!("backbone.{k}.b"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if layers.is_empty() {
            return Err(Error::Format("checkpoint has no backbone layers".into()));
        }
        let head = LinearHead {
            w: matrix("head.w")?,
            b: vector("head.b")?,
        };
        Model::from_parts(Backbone { layers }, head)
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, shape, data) in &self.tensors {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(shape.len() as u32).to_le_bytes())?;
            for &d in shape {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for x in data {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        fn u32_of<R: Read>(r: &mut R) -> Result<u32> {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            Ok(u32::from_le_bytes(b))
        }
        fn u64_of<R: Read>(r: &mut R) -> Result<u64> {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            Ok(u64::from_le_bytes(b))
        }
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint".into()));
        }
        let version = u32_of(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let count = u32_of(&mut r)?;
        let mut tensors = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let len = u32_of(&mut r)? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|_| Error::Format("tensor name is not utf-8".into()))?;
            let rank = u32_of(&mut r)?;
            let shape = (0..rank).map(|_| u64_of(&mut r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = (0..n)
                .map(|_| u64_of(&mut r).map(f64::from_bits))
                .collect::<Result<Vec<_>>>()?;
            tensors.push((name, shape, data));
        }
        Ok(Checkpoint { tensors })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(hidden: Vec<usize>) -> BackboneSpec {
        BackboneSpec {
            input_dim: 3,
            hidden,
            feature_dim: 8,
        }
    }

    fn random_batch(n: usize, d: usize, rng: &mut Rng) -> Matrix {
        Matrix::from_fn(n, d, |_, _| rng.normal())
    }

    /// Straight-line per-element forward pass.
    fn reference_forward(m: &Model, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut a = x.to_vec();
        let n = m.backbone.layers.len();
        for (k, l) in m.backbone.layers.iter().enumerate() {
            let mut z = Vec::new();
            for o in 0..l.outputs() {
                let mut s = l.b[o];
                for i in 0..l.inputs() {
                    s += l.w[(o, i)] * a[i];
                }
                z.push(if k + 1 < n { s.max(0.0) } else { s });
            }
            a = z;
        }
        let mut u = Vec::new();
        for c in 0..m.head.classes() {
            let mut s = m.head.b[c];
            for j in 0..a.len() {
                s += m.head.w[(c, j)] * a[j];
            }
            u.push(s);
        }
        (a, u)
    }

    /// Scalar objective Σ r ⊙ logits for a fixed random `r`.
    fn objective(m: &Model, x: &Matrix, r: &Matrix) -> f64 {
        let f = m.forward(x);
        crate::numerics::dot(f.logits.as_slice(), r.as_slice())
    }

    #[test]
    fn zero_model_gives_zero_logits() {
        let mut m = Model::new(&spec(vec![4]), 3, &mut Rng::new(0));
        for l in &mut m.backbone.layers {
            *l = Dense::zeros(l.inputs(), l.outputs());
        }
        m.head = LinearHead::zeros(3, 8);
        let f = m.forward(&random_batch(5, 3, &mut Rng::new(1)));
        assert!(f.logits.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_linear_layer_by_hand() {
        let backbone = Backbone {
            layers: vec![Dense {
                w: Matrix::identity(2),
                b: Vector::zeros(2),
            }],
        };
        let head = LinearHead {
            w: Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, -1.0]]).unwrap(),
            b: Vector::from(vec![0.5, -0.5]),
        };
        let m = Model::from_parts(backbone, head).unwrap();
        let x = Matrix::from_rows(&[vec![1.0, 1.0], vec![2.0, 0.0]]).unwrap();
        let f = m.forward(&x);
        assert_eq!(f.logits.row(0), &[3.5, 1.5]);
        assert_eq!(f.logits.row(1), &[2.5, 5.5]);

        // d_logits = ones → head.w grad = Σ_i h_i in every row, head.b grad = N
        let g = m.backward(&f.cache, &f.features, &Matrix::from_fn(2, 2, |_, _| 1.0)).unwrap();
        assert_eq!(g.head.w.row(0), &[3.0, 1.0]);
        assert_eq!(g.head.w.row(1), &[3.0, 1.0]);
        assert_eq!(&g.head.b[..], &[2.0, 2.0]);
    }

    #[test]
    fn forward_matches_reference() {
        let mut rng = Rng::new(3);
        let m = Model::new(&spec(vec![5, 6]), 4, &mut rng);
        let x = random_batch(6, 3, &mut rng);
        let f = m.forward(&x);
        for i in 0..6 {
            let (h, u) = reference_forward(&m, x.row(i));
            assert!(crate::numerics::max_abs_diff(&h, f.features.row(i)) < 1e-12);
            assert!(crate::numerics::max_abs_diff(&u, f.logits.row(i)) < 1e-12);
        }
    }

    #[test]
    fn zero_upstream_zero_gradients() {
        let mut rng = Rng::new(4);
        let m = Model::new(&spec(vec![5]), 4, &mut rng);
        let x = random_batch(3, 3, &mut rng);
        let f = m.forward(&x);
        let g = m.backward(&f.cache, &f.features, &Matrix::zeros(3, 4)).unwrap();
        assert!(g.slices().iter().all(|s| s.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn backward_matches_central_differences() {
        for depth in 1..=3usize {
            let mut rng = Rng::new(10 + depth as u64);
            let hidden = vec![7; depth - 1];
            let mut m = Model::new(&spec(hidden), 4, &mut rng);
            let x = random_batch(6, 3, &mut rng);
            let r = random_batch(6, 4, &mut rng);
            let f = m.forward(&x);
            let g = m.backward(&f.cache, &f.features, &r).unwrap();
            let analytic: Vec<f64> = g.slices().concat();
            let step = 1e-5;
            let n = analytic.len();
            for k in 0..n {
                let bump = |m: &mut Model, delta: f64| {
                    let mut idx = k;
                    for (p, _) in m.params_mut() {
                        if idx < p.len() {
                            p[idx] += delta;
                            return;
                        }
                        idx -= p.len();
                    }
                };
                bump(&mut m, step);
                let plus = objective(&m, &x, &r);
                bump(&mut m, -2.0 * step);
                let minus = objective(&m, &x, &r);
                bump(&mut m, step);
                let fd = (plus - minus) / (2.0 * step);
                let err = (fd - analytic[k]).abs() / fd.abs().max(analytic[k].abs()).max(1e-3);
                assert!(err < 1e-6, "depth {depth} param {k}: fd {fd} analytic {}", analytic[k]);
            }
        }
    }

    #[test]
    fn stale_cache_is_rejected() {
        let mut rng = Rng::new(5);
        let mut m = Model::new(&spec(vec![4]), 2, &mut rng);
        let x = random_batch(2, 3, &mut rng);
        let f = m.forward(&x);
        let g = m.backward(&f.cache, &f.features, &Matrix::zeros(2, 2)).unwrap();
        sgd_step(&mut m, &g, &mut SgdState::default(), &SgdConfig::default(), 0);
        assert!(m.backward(&f.cache, &f.features, &Matrix::zeros(2, 2)).is_err());
    }

    fn scalar_model(w: f64) -> Model {
        let backbone = Backbone {
            layers: vec![Dense {
                w: Matrix::from_vec(1, 1, vec![w]).unwrap(),
                b: Vector::zeros(1),
            }],
        };
        Model::from_parts(backbone, LinearHead::zeros(1, 1)).unwrap()
    }

    fn scalar_grad(g: f64) -> ModelGrad {
        ModelGrad {
            backbone: vec![DenseGrad {
                w: Matrix::from_vec(1, 1, vec![g]).unwrap(),
                b: Vector::zeros(1),
            }],
            head: HeadGrad::zeros(1, 1),
        }
    }

    #[test]
    fn plain_gradient_descent() {
        let cfg = SgdConfig {
            learning_rate: 0.3,
            momentum: 0.0,
            weight_decay: 0.0,
            schedule: vec![],
        };
        let mut m = scalar_model(2.0);
        sgd_step(&mut m, &scalar_grad(0.5), &mut SgdState::default(), &cfg, 0);
        assert_eq!(m.backbone.layers[0].w[(0, 0)], 2.0 - 0.3 * 0.5);
    }

    #[test]
    fn momentum_and_decay_two_steps() {
        let cfg = SgdConfig {
            learning_rate: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            schedule: vec![],
        };
        let mut m = scalar_model(1.0);
        let mut st = SgdState::default();
        sgd_step(&mut m, &scalar_grad(0.2), &mut st, &cfg, 0);
        sgd_step(&mut m, &scalar_grad(-0.4), &mut st, &cfg, 1);
        // hand-unrolled
        let (mut p, mut v) = (1.0f64, 0.0f64);
        v = 0.9 * v + 0.2 + 5e-4 * p;
        p -= 0.1 * v;
        v = 0.9 * v + -0.4 + 5e-4 * p;
        p -= 0.1 * v;
        assert_eq!(m.backbone.layers[0].w[(0, 0)], p);
        // bias never decays: a zero-gradient step leaves it untouched
        assert_eq!(m.backbone.layers[0].b[0], 0.0);
    }

    #[test]
    fn schedule_drops_rate() {
        let cfg = SgdConfig {
            learning_rate: 0.1,
            schedule: vec![(100, 0.1)],
            ..SgdConfig::default()
        };
        assert_eq!(cfg.lr_at(99), 0.1);
        assert!((cfg.lr_at(100) - 0.01).abs() < 1e-16);
        assert!(SgdConfig { schedule: vec![(5, 0.1), (5, 0.1)], ..cfg.clone() }.validate().is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = Model::new(&spec(vec![4, 5]), 3, &mut Rng::new(6));
        let mut buf = Vec::new();
        Checkpoint::from_model(&m).write(&mut buf).unwrap();
        let back = Checkpoint::read(&buf[..]).unwrap().to_model().unwrap();
        assert_eq!(back, m);
        buf[0] = b'X';
        assert!(Checkpoint::read(&buf[..]).is_err());
    }
}
