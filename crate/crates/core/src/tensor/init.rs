use super::{Rng, Scalar, Tensor};

/// Parameter initialization scheme.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    /// Normal(0, std²) truncated at ±2·std by rejection.
    TruncNormal { std: f64 },
}

/// Deterministic initialization: equal `(shape, scheme, seed)` give
/// bit-identical tensors.
pub fn seeded_init<T: Scalar>(shape: &[usize], scheme: Init, seed: u64) -> Tensor<T> {
    match scheme {
        Init::Zeros => Tensor::zeros(shape),
        Init::TruncNormal { std } => {
            let mut rng = Rng::new(seed);
            Tensor::from_fn(shape, |_| loop {
                let z = rng.normal();
                if z.abs() <= 2.0 {
                    break T::of(z * std);
                }
            })
        }
    }
}

/// Hands out one derived seed per parameter tensor, in call order.
#[derive(Clone, Debug)]
pub struct SeedStream {
    base: u64,
    next: u64,
}

impl SeedStream {
    pub fn new(base: u64) -> Self {
        Self { base, next: 0 }
    }

    pub fn next_seed(&mut self) -> u64 {
        self.next += 1;
        Rng::derive(self.base, self.next).next_u64()
    }
}
