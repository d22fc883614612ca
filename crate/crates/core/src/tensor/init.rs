//! Seeded weight initialization.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::Tensor;

/// Draws trainable tensors from a uniform distribution on
/// `±sqrt(6 / (fan_in + fan_out))`; biases start at zero.
pub struct Initializer {
    rng: ChaCha8Rng,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        use rand::SeedableRng;
        Initializer { rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    fn uniform(&mut self, shape: Vec<usize>, limit: f64) -> Tensor {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| self.rng.gen_range(-limit..limit)).collect();
        Tensor::leaf(shape, data, true)
    }

    /// Dense / projection weight with the given fan.
    pub fn dense(&mut self, shape: Vec<usize>, fan_in: usize, fan_out: usize) -> Tensor {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        self.uniform(shape, limit)
    }

    /// Conv kernel `[c_out, c_in, k]`; fan is computed over the kernel extent.
    pub fn conv(&mut self, c_out: usize, c_in: usize, k: usize) -> Tensor {
        let limit = (6.0 / ((c_in * k + c_out * k) as f64)).sqrt();
        self.uniform(vec![c_out, c_in, k], limit)
    }

    /// Zero-filled trainable tensor (biases, attention output bias).
    pub fn zeros(&mut self, shape: Vec<usize>) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::leaf(shape, vec![0.0; n], true)
    }

    /// Constant-filled trainable tensor (norm gains).
    pub fn constant(&mut self, shape: Vec<usize>, value: f64) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::leaf(shape, vec![value; n], true)
    }
}
