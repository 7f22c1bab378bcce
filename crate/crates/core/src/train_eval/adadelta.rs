use crate::nn_core::{Gradients, ParamStore, Tensor};

/// Adadelta with per-parameter running averages of squared gradients and
/// squared updates.
#[derive(Clone, Debug)]
pub struct Adadelta {
    pub rho: f64,
    pub eps: f64,
    sq_grad: Vec<Tensor>,
    sq_update: Vec<Tensor>,
}

impl Adadelta {
    pub const DEFAULT_RHO: f64 = 0.95;
    pub const DEFAULT_EPS: f64 = 1e-6;

    pub fn new(store: &ParamStore, rho: f64, eps: f64) -> Self {
        let zeros: Vec<Tensor> = store.ids().map(|id| Tensor::zeros(store.get(id).shape())).collect();
        Adadelta {
            rho,
            eps,
            sq_grad: zeros.clone(),
            sq_update: zeros,
        }
    }

    pub fn with_defaults(store: &ParamStore) -> Self {
        Self::new(store, Self::DEFAULT_RHO, Self::DEFAULT_EPS)
    }

    pub fn sq_grad(&self) -> &[Tensor] {
        &self.sq_grad
    }

    pub fn sq_update(&self) -> &[Tensor] {
        &self.sq_update
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) {
        let (rho, eps) = (self.rho, self.eps);
        for (id, g) in grads.iter() {
            let i = id.index();
            let x = store.get_mut(id).data_mut();
            let eg = self.sq_grad[i].data_mut();
            let ex = self.sq_update[i].data_mut();
            for (j, &gj) in g.data().iter().enumerate() {
                eg[j] = rho * eg[j] + (1.0 - rho) * gj * gj;
                let dx = -((ex[j] + eps).sqrt() / (eg[j] + eps).sqrt()) * gj;
                ex[j] = rho * ex[j] + (1.0 - rho) * dx * dx;
                x[j] += dx;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn_core::ParamKind;

    fn scalar_store(x: f64) -> (ParamStore, crate::nn_core::ParamId) {
        let mut store = ParamStore::new();
        let id = store.insert("x", ParamKind::Weight, Tensor::vector(vec![x])).unwrap();
        (store, id)
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let (mut store, id) = scalar_store(3.0);
        let mut opt = Adadelta::with_defaults(&store);
        let g = store.zero_grads();
        opt.step(&mut store, &g);
        assert_eq!(store.get(id).item(), 3.0);
        assert_eq!(opt.sq_grad()[0].item(), 0.0);
    }

    #[test]
    fn first_step_matches_closed_form() {
        let (mut store, id) = scalar_store(1.0);
        let mut opt = Adadelta::with_defaults(&store);
        let mut g = store.zero_grads();
        g.get_mut(id).data_mut()[0] = 2.0;
        opt.step(&mut store, &g);
        let expected = -(1e-6 / (0.05 * 4.0 + 1e-6f64)).sqrt() * 2.0;
        assert!((store.get(id).item() - 1.0 - expected).abs() < 1e-15);
    }
}
