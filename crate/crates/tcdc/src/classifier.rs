//! Residual image classifier that consumes decoded images.

use rand::Rng;
use serde::{Deserialize, Serialize};
use tcdc_core::loss::{cross_entropy, cross_entropy_grad_into, LossError};
use thiserror::Error;

use crate::impl_params;
use crate::nn::{
    dropout_backward, dropout_mask, gap, gap_backward, relu, relu_backward, Conv2d, Init, Linear, MaxPool, Need,
};
use crate::tensor::Tensor;

/// Smallest accepted input side.
pub const MIN_RESOLUTION: usize = 32;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ClassifierError {
    #[error("input {0}x{1} is below the minimum resolution of {MIN_RESOLUTION}")]
    Resolution(usize, usize),
    #[error("expected 3 input channels, got {0}")]
    Channels(usize),
    #[error("invalid classifier config: {0}")]
    Config(String),
    #[error(transparent)]
    Loss(#[from] LossError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Depth {
    Resnet18,
    Resnet8Toy,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierConfig {
    pub depth: Depth,
    pub num_classes: usize,
    pub dropout: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self { depth: Depth::Resnet8Toy, num_classes: 8, dropout: 0.1 }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<(), ClassifierError> {
        if self.num_classes < 2 {
            return Err(ClassifierError::Config(format!("need at least 2 classes, got {}", self.num_classes)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ClassifierError::Config(format!("dropout {} is outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Two 3×3 convolutions with an identity or strided 1×1 shortcut; no normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct BasicBlock {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub shortcut: Option<Conv2d>,
}

impl_params!(BasicBlock; conv1, conv2, shortcut);

#[derive(Debug, Clone)]
struct BlockTrace {
    input: Tensor,
    r1: Tensor,
    out: Tensor,
}

/// Scale of the last convolution in each residual branch at initialization,
/// which keeps activations bounded without batch normalization.
const BRANCH_INIT: f64 = 0.2;

impl BasicBlock {
    fn new(name: &str, cin: usize, cout: usize, stride: usize, rng: &mut impl Rng) -> Self {
        let conv1 = Conv2d::new(&format!("{name}.conv1"), cin, cout, 3, stride, 1, Init::He(1.0), rng);
        let conv2 = Conv2d::new(&format!("{name}.conv2"), cout, cout, 3, 1, 1, Init::He(BRANCH_INIT), rng);
        let shortcut = (stride != 1 || cin != cout)
            .then(|| Conv2d::new(&format!("{name}.shortcut"), cin, cout, 1, stride, 0, Init::He(1.0), rng));
        Self { conv1, conv2, shortcut }
    }

    fn forward(&self, x: &Tensor) -> (Tensor, Tensor) {
        let r1 = relu(&self.conv1.forward(x));
        let mut s = self.conv2.forward(&r1);
        match &self.shortcut {
            Some(sc) => s.add_assign(&sc.forward(x)),
            None => s.add_assign(x),
        }
        (relu(&s), r1)
    }

    fn backward(&mut self, t: &BlockTrace, dy: &Tensor, need: Need) -> Option<Tensor> {
        let ds = relu_backward(&t.out, dy);
        let inner = Need { params: need.params, input: true };
        let dr1 = self.conv2.backward(&t.r1, &ds, inner).expect("input gradient requested");
        let dc1 = relu_backward(&t.r1, &dr1);
        let mut dx = self.conv1.backward(&t.input, &dc1, need);
        let dsc = match self.shortcut.as_mut() {
            Some(sc) => sc.backward(&t.input, &ds, need),
            None => need.input.then_some(ds),
        };
        if let (Some(dx), Some(dsc)) = (dx.as_mut(), dsc) {
            dx.add_assign(&dsc);
        }
        dx
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    pub config: ClassifierConfig,
    pub stem: Conv2d,
    pub pool: Option<MaxPool>,
    pub blocks: Vec<BasicBlock>,
    pub fc: Linear,
}

impl_params!(Classifier; stem, blocks, fc);

/// Activations of a training-mode forward pass.
#[derive(Debug, Clone)]
pub struct ClassifierTrace {
    input: Tensor,
    stem_out: Tensor,
    pool_arg: Option<Vec<usize>>,
    blocks: Vec<BlockTrace>,
    pooled: Tensor,
    mask: Vec<f64>,
    features: Tensor,
}

impl Classifier {
    pub fn new(config: ClassifierConfig, rng: &mut impl Rng) -> Result<Self, ClassifierError> {
        config.validate()?;
        let (stem, pool, stages): (_, _, &[(usize, usize)]) = match config.depth {
            Depth::Resnet8Toy => {
                (Conv2d::new("cls.stem", 3, 16, 3, 2, 1, Init::He(1.0), rng), None, &[(16, 1), (32, 2), (64, 2)])
            }
            Depth::Resnet18 => (
                Conv2d::new("cls.stem", 3, 64, 7, 2, 3, Init::He(1.0), rng),
                Some(MaxPool { k: 3, stride: 2, pad: 1 }),
                &[(64, 1), (64, 1), (128, 2), (128, 1), (256, 2), (256, 1), (512, 2), (512, 1)],
            ),
        };
        let mut cin = stem.cout;
        let mut blocks = Vec::new();
        for (i, &(cout, stride)) in stages.iter().enumerate() {
            blocks.push(BasicBlock::new(&format!("cls.block{i}"), cin, cout, stride, rng));
            cin = cout;
        }
        let fc = Linear::new("cls.fc", cin, config.num_classes, rng);
        Ok(Self { config, stem, pool, blocks, fc })
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    fn check(&self, x: &Tensor) -> Result<(), ClassifierError> {
        if x.channels() != 3 {
            return Err(ClassifierError::Channels(x.channels()));
        }
        if x.height() < MIN_RESOLUTION || x.width() < MIN_RESOLUTION {
            return Err(ClassifierError::Resolution(x.height(), x.width()));
        }
        Ok(())
    }

    /// Evaluation-mode logits `(B, C)` as a flat row-major vector; deterministic.
    pub fn classify(&self, x: &Tensor) -> Result<Vec<f64>, ClassifierError> {
        self.check(x)?;
        let mut h = relu(&self.stem.forward(x));
        if let Some(pool) = self.pool {
            h = pool.forward(&h).0;
        }
        for b in &self.blocks {
            h = b.forward(&h).0;
        }
        Ok(self.fc.forward(&gap(&h)).data)
    }

    /// Training-mode forward pass with dropout drawn from `rng`.
    pub fn forward_train(&self, x: &Tensor, rng: &mut impl Rng) -> Result<(Vec<f64>, ClassifierTrace), ClassifierError> {
        self.forward_trace(x, true, rng)
    }

    /// Forward pass that keeps activations for [`Classifier::backward`]; dropout only when `dropout` is set.
    pub fn forward_trace(
        &self,
        x: &Tensor,
        dropout: bool,
        rng: &mut impl Rng,
    ) -> Result<(Vec<f64>, ClassifierTrace), ClassifierError> {
        self.check(x)?;
        let stem_out = relu(&self.stem.forward(x));
        let (mut h, pool_arg) = match self.pool {
            Some(pool) => {
                let (p, arg) = pool.forward(&stem_out);
                (p, Some(arg))
            }
            None => (stem_out.clone(), None),
        };
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (out, r1) = b.forward(&h);
            blocks.push(BlockTrace { input: h, r1, out: out.clone() });
            h = out;
        }
        let pooled = gap(&h);
        let mask = if dropout && self.config.dropout > 0.0 {
            dropout_mask(pooled.len(), self.config.dropout, rng)
        } else {
            vec![1.0; pooled.len()]
        };
        let features = Tensor::from_vec(pooled.shape(), pooled.data.iter().zip(&mask).map(|(a, m)| a * m).collect())
            .expect("same shape");
        let logits = self.fc.forward(&features).data;
        Ok((logits, ClassifierTrace { input: x.clone(), stem_out, pool_arg, blocks, pooled, mask, features }))
    }

    /// Backpropagates `d_logits`; returns the input gradient when `need.input`.
    pub fn backward(&mut self, t: &ClassifierTrace, d_logits: &[f64], need: Need) -> Option<Tensor> {
        let inner = Need { params: need.params, input: true };
        let dl = Tensor::from_vec([t.features.batch(), self.num_classes(), 1, 1], d_logits.to_vec()).expect("logit shape");
        let df = self.fc.backward(&t.features, &dl, inner).expect("input gradient requested");
        let dp = dropout_backward(&t.mask, &df);
        let last = t.blocks.last().map_or(&t.stem_out, |b| &b.out);
        let mut d = gap_backward(last.shape(), &dp);
        debug_assert_eq!(dp.len(), t.pooled.len());
        for (b, bt) in self.blocks.iter_mut().zip(&t.blocks).rev() {
            d = b.backward(bt, &d, inner).expect("input gradient requested");
        }
        if let Some(arg) = &t.pool_arg {
            d = MaxPool::backward(t.stem_out.shape(), arg, &d);
        }
        let ds = relu_backward(&t.stem_out, &d);
        self.stem.backward(&t.input, &ds, need)
    }

    /// Mean cross-entropy of a batch and its gradient w.r.t. the logits (times `scale`).
    pub fn loss_grad(&self, logits: &[f64], labels: &[usize], scale: f64) -> Result<(f64, Vec<f64>), ClassifierError> {
        let c = self.num_classes();
        let ce = cross_entropy(logits, c, labels)?;
        let mut g = vec![0.0; logits.len()];
        cross_entropy_grad_into(logits, c, labels, scale, &mut g)?;
        Ok((ce, g))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Params;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy(classes: usize, dropout: f64, rng: &mut ChaCha8Rng) -> Classifier {
        Classifier::new(ClassifierConfig { depth: Depth::Resnet8Toy, num_classes: classes, dropout }, rng).unwrap()
    }

    fn image(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    #[test]
    fn output_shape_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cls = toy(8, 0.1, &mut rng);
        let x = image([4, 3, 256, 256], &mut rng);
        let a = cls.classify(&x).unwrap();
        assert_eq!(a.len(), 4 * 8);
        assert_eq!(a, cls.classify(&x).unwrap());
        assert_eq!(cls.classify(&Tensor::zeros([1, 3, 16, 64])), Err(ClassifierError::Resolution(16, 64)));
        assert!(Classifier::new(ClassifierConfig { num_classes: 1, ..cls.config }, &mut rng).is_err());
    }

    #[test]
    fn resnet18_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = ClassifierConfig { depth: Depth::Resnet18, num_classes: 8, dropout: 0.1 };
        let cls = Classifier::new(cfg, &mut rng).unwrap();
        assert_eq!(cls.classify(&image([1, 3, 64, 64], &mut rng)).unwrap().len(), 8);
        assert_eq!(cls.blocks.len(), 8);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut cls = toy(3, 0.0, &mut rng);
        let x = image([2, 3, 32, 32], &mut rng);
        let labels = [2, 0];
        let (logits, trace) = cls.forward_train(&x, &mut rng).unwrap();
        assert_eq!(logits, cls.classify(&x).unwrap());
        let (_, g) = cls.loss_grad(&logits, &labels, 1.0).unwrap();
        cls.zero_grad();
        let dx = cls.backward(&trace, &g, Need::ALL).unwrap();
        let loss = |c: &Classifier, x: &Tensor| cross_entropy(&c.classify(x).unwrap(), 3, &labels).unwrap();
        for idx in [0, 517, 2048, 3000, 6143] {
            let mut p = x.clone();
            p.data[idx] += 1e-6;
            let up = loss(&cls, &p);
            p.data[idx] -= 2e-6;
            let fd = (up - loss(&cls, &p)) / 2e-6;
            assert!((fd - dx.data[idx]).abs() <= 1e-4 * fd.abs().max(1e-4), "{idx}: {fd} vs {}", dx.data[idx]);
        }
        let layout = crate::gradcheck::layout(&cls);
        for (i, (name, len)) in layout.iter().enumerate() {
            for j in [0, len / 3, len - 1] {
                let fd = crate::gradcheck::central_difference(&mut cls, i, j, 1e-6, |c| loss(c, &x));
                let an = crate::gradcheck::grad_of(&cls, i, j);
                assert!((an - fd).abs() <= 1e-4 * fd.abs().max(1e-4), "{name}[{j}]: {an} vs {fd}");
            }
        }
    }

    #[test]
    fn dropout_only_in_training() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cls = toy(4, 0.5, &mut rng);
        let x = image([2, 3, 32, 32], &mut rng);
        let (a, _) = cls.forward_train(&x, &mut rng).unwrap();
        let (b, _) = cls.forward_train(&x, &mut rng).unwrap();
        assert_ne!(a, b);
        assert_eq!(cls.classify(&x).unwrap(), cls.classify(&x).unwrap());
    }
}
