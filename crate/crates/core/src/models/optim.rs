use super::tensor::Real;

/// Global L2 norm over a set of gradient tensors.
pub fn global_norm<T: Real>(grads: &[&[T]]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|v| v.as_f64().powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Rescales the gradients so their global norm is at most `max_norm`.
/// Returns the norm before and after clipping.
pub fn clip_grad_norm<T: Real>(grads: &mut [&mut Vec<T>], max_norm: f64) -> (f64, f64) {
    let pre = global_norm(&grads.iter().map(|g| g.as_slice()).collect::<Vec<_>>());
    if pre > max_norm {
        let k = T::from_f64(max_norm / (pre + 1e-6));
        for g in grads.iter_mut() {
            g.iter_mut().for_each(|v| *v = *v * k);
        }
    }
    let post = global_norm(&grads.iter().map(|g| g.as_slice()).collect::<Vec<_>>());
    (pre, post)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(shapes: &[usize], beta1: f64, beta2: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps: 1e-8,
            step: 0,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn update(&mut self, params: &mut [&mut Vec<f32>], grads: &[&Vec<f32>], lr: f64) {
        assert_eq!(params.len(), self.m.len(), "optimizer tensor count");
        self.step += 1;
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        let step_size = (lr / c1) as f32;
        let c2_sqrt = c2.sqrt() as f32;
        let eps = self.eps as f32;
        for (i, p) in params.iter_mut().enumerate() {
            let (m, v, g) = (&mut self.m[i], &mut self.v[i], grads[i]);
            for j in 0..p.len() {
                m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                p[j] -= step_size * m[j] / (v[j].sqrt() / c2_sqrt + eps);
            }
        }
    }
}
