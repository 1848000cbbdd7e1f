use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::rc::Rc;

/// A named, trainable buffer. Models own their `Param`s; tapes borrow them
/// via [`crate::tensor::Tape::read`].
pub struct Param {
    name: String,
    value: Rc<Vec<f64>>,
    shape: Vec<usize>,
}

impl Param {
    pub fn new(name: impl Into<String>, shape: &[usize], data: Vec<f64>) -> Self {
        let shape = shape.to_vec();
        assert_eq!(
            data.len(),
            shape.iter().product::<usize>(),
            "param data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Param {
            name: name.into(),
            value: Rc::new(data),
            shape,
        }
    }

    pub fn zeros(name: impl Into<String>, shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Param::new(name, shape, vec![0.0; n])
    }

    pub fn ones(name: impl Into<String>, shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Param::new(name, shape, vec![1.0; n])
    }

    /// Gaussian init, mean 0.
    pub fn randn(name: impl Into<String>, shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| gaussian(rng) * std).collect();
        Param::new(name, shape, data)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.value
    }

    pub(crate) fn value_rc(&self) -> Rc<Vec<f64>> {
        Rc::clone(&self.value)
    }

    /// Stable identity for leaf dedup on a tape.
    pub(crate) fn identity(&self) -> usize {
        Rc::as_ptr(&self.value) as usize
    }

    /// Replace the contents, e.g. when loading a checkpoint or importing
    /// teacher weights. Shape must match.
    pub fn set_values(&mut self, data: &[f64]) {
        assert_eq!(
            data.len(),
            self.value.len(),
            "set_values length mismatch for {}: got {}, want {}",
            self.name,
            data.len(),
            self.value.len()
        );
        Rc::make_mut(&mut self.value).copy_from_slice(data);
    }

    /// In-place update through a closure over the value slice.
    pub fn update(&mut self, f: impl FnOnce(&mut [f64])) {
        let v: &mut Vec<f64> = Rc::make_mut(&mut self.value);
        f(v);
    }
}

/// Standard normal sample via Box-Muller.
pub(crate) fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}
