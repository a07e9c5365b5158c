//! Named parameter arrays with paired gradients and optimizer moments.

use rand::Rng;

use super::NnError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    Zeros,
    /// Uniform in ±√(1/fan_in).
    FanIn(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Param {
    pub(crate) name: String,
    pub(crate) shape: Vec<usize>,
    pub(crate) value: Vec<f64>,
    pub(crate) grad: Vec<f64>,
    pub(crate) m: Vec<f64>,
    pub(crate) v: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum GradState {
    Cleared,
    Populated,
}

/// Every parameter owns one gradient buffer and one (m, v) moment pair of
/// the same length. Gradients are consumed by the optimizer step.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    pub(crate) params: Vec<Param>,
    pub(crate) step: u64,
    grad_state: GradState,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            step: 0,
            grad_state: GradState::Cleared,
        }
    }

    pub fn add<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        init: Init,
        rng: &mut R,
    ) -> ParamId {
        let name = name.into();
        assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate parameter name {name}"
        );
        let len: usize = shape.iter().product();
        let value = match init {
            Init::Zeros => vec![0.0; len],
            Init::FanIn(fan_in) => {
                let bound = (1.0 / fan_in.max(1) as f64).sqrt();
                (0..len).map(|_| rng.random_range(-bound..=bound)).collect()
            }
        };
        self.params.push(Param {
            name,
            shape: shape.to_vec(),
            value,
            grad: vec![0.0; len],
            m: vec![0.0; len],
            v: vec![0.0; len],
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn shape(&self, id: ParamId) -> &[usize] {
        &self.params[id.0].shape
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn value(&self, id: ParamId) -> &[f64] {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &[f64] {
        &self.params[id.0].grad
    }

    /// Mutable gradient buffer for accumulation; marks gradients as live.
    pub fn grad_mut(&mut self, id: ParamId) -> &mut [f64] {
        self.grad_state = GradState::Populated;
        &mut self.params[id.0].grad
    }

    pub fn has_gradients(&self) -> bool {
        self.grad_state == GradState::Populated
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
        self.grad_state = GradState::Cleared;
    }

    /// Multiplies every gradient by `k` (e.g. to average over a batch).
    pub fn scale_grads(&mut self, k: f64) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g *= k);
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub(crate) fn ensure_gradients(&self) -> Result<(), NnError> {
        if self.grad_state == GradState::Cleared {
            return Err(NnError::StaleGradients);
        }
        Ok(())
    }

    pub(crate) fn mark_consumed(&mut self) {
        self.zero_grad();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn fan_in_init_is_bounded_and_seeded() {
        let mut a = ParamStore::new();
        let mut b = ParamStore::new();
        let ia = a.add(
            "w",
            &[4, 9],
            Init::FanIn(9),
            &mut ChaCha8Rng::seed_from_u64(1),
        );
        b.add(
            "w",
            &[4, 9],
            Init::FanIn(9),
            &mut ChaCha8Rng::seed_from_u64(1),
        );
        assert_eq!(a, b);
        assert!(a.value(ia).iter().all(|v| v.abs() <= 1.0 / 3.0));
        assert_eq!(a.grad(ia).len(), 36);
    }

    #[test]
    fn gradient_state_tracking() {
        let mut s = ParamStore::new();
        let id = s.add("b", &[2], Init::Zeros, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(!s.has_gradients());
        s.grad_mut(id)[0] = 1.0;
        assert!(s.has_gradients());
        s.zero_grad();
        assert!(!s.has_gradients());
        assert_eq!(s.grad(id), &[0.0, 0.0]);
    }
}
