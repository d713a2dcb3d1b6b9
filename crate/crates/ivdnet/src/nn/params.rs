use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Handle to one tensor in a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

/// A named tensor plus its gradient accumulator. Non-trainable entries
/// (batch-norm running statistics) are carried along for checkpointing but
/// ignored by the optimizer and by parameter counts.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub data: ArrayD<f64>,
    pub grad: ArrayD<f64>,
    pub trainable: bool,
}

/// Flat registry of every tensor a model owns.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    params: Vec<Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, data: ArrayD<f64>, trainable: bool) -> ParamId {
        let grad = ArrayD::zeros(data.raw_dim());
        self.params.push(Param {
            name: name.into(),
            data,
            grad,
            trainable,
        });
        ParamId(self.params.len() - 1)
    }

    /// Kaiming-style initialization: zero-mean normal with variance 2/fan_in.
    pub fn add_conv_weight(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut impl Rng,
    ) -> ParamId {
        let std = (2.0 / fan_in.max(1) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        let data = ArrayD::from_shape_fn(IxDyn(shape), |_| normal.sample(rng));
        self.add(name, data, true)
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: &[usize], trainable: bool) -> ParamId {
        self.add(name, ArrayD::zeros(IxDyn(shape)), trainable)
    }

    pub fn add_ones(&mut self, name: impl Into<String>, shape: &[usize], trainable: bool) -> ParamId {
        self.add(name, ArrayD::ones(IxDyn(shape)), trainable)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn data(&self, id: ParamId) -> &ArrayD<f64> {
        &self.params[id.0].data
    }

    pub fn accumulate_grad(&mut self, id: ParamId, delta: &ArrayD<f64>) {
        self.params[id.0].grad += delta;
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Param)> {
        self.params
            .iter_mut()
            .enumerate()
            .map(|(i, p)| (ParamId(i), p))
    }

    /// Total number of trainable scalars.
    pub fn trainable_scalars(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.data.len())
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn trainable_count_skips_buffers() {
        let mut ps = ParamSet::new();
        ps.add_zeros("w", &[2, 3], true);
        ps.add_zeros("running_mean", &[3], false);
        assert_eq!(ps.trainable_scalars(), 6);
    }

    #[test]
    fn kaiming_init_is_seed_deterministic() {
        let mut a = ParamSet::new();
        let mut b = ParamSet::new();
        let w1 = a.add_conv_weight("w", &[4, 2, 3, 3], 18, &mut ChaCha8Rng::seed_from_u64(7));
        let w2 = b.add_conv_weight("w", &[4, 2, 3, 3], 18, &mut ChaCha8Rng::seed_from_u64(7));
        assert_eq!(a.data(w1), b.data(w2));
    }

    #[test]
    fn grad_accumulates() {
        let mut ps = ParamSet::new();
        let id = ps.add_ones("w", &[2], true);
        let delta = ArrayD::from_shape_vec(IxDyn(&[2]), vec![1.0, 2.0]).unwrap();
        ps.accumulate_grad(id, &delta);
        ps.accumulate_grad(id, &delta);
        assert_eq!(ps.get(id).grad.as_slice().unwrap(), &[2.0, 4.0]);
        ps.zero_grads();
        assert_eq!(ps.get(id).grad.as_slice().unwrap(), &[0.0, 0.0]);
    }
}
