use crate::error::{Error, Result};

use super::tensor::Tensor;

/// Rescales gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm measured before clipping.
pub fn clip_grad_norm<'a, I>(params: I, max_norm: f64) -> Result<f64>
where
    I: IntoIterator<Item = &'a mut Tensor>,
{
    if !(max_norm > 0.0) {
        return Err(Error::Domain(format!("max_norm must be positive, got {max_norm}")));
    }
    let mut params: Vec<&mut Tensor> = params.into_iter().collect();
    let mut sq = 0.0;
    for (i, p) in params.iter().enumerate() {
        let g = p
            .grad
            .as_ref()
            .ok_or_else(|| Error::Contract(format!("parameter {i} has no gradient")))?;
        sq += g.iter().map(|x| x * x).sum::<f64>();
    }
    let norm = sq.sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for p in params.iter_mut() {
            p.grad.as_mut().unwrap().iter_mut().for_each(|x| *x *= s);
        }
    }
    Ok(norm)
}

/// Piecewise-linear schedule: 0 → `peak` over `warmup` steps, then back to 0
/// at `total`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearSchedule {
    pub peak: f64,
    pub warmup: usize,
    pub total: usize,
}

impl LinearSchedule {
    pub fn new(peak: f64, warmup: usize, total: usize) -> Self {
        Self {
            peak,
            warmup: warmup.min(total),
            total,
        }
    }

    /// Warmup given as a fraction of `total`, rounded to the nearest step.
    pub fn with_warmup_fraction(peak: f64, fraction: f64, total: usize) -> Self {
        let warmup = (fraction * total as f64).round() as usize;
        Self::new(peak, warmup, total)
    }

    /// Learning rate applied at update number `step` (0-based).
    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup {
            self.peak * step as f64 / self.warmup as f64
        } else if step >= self.total {
            0.0
        } else {
            let span = (self.total - self.warmup).max(1) as f64;
            self.peak * (self.total - step) as f64 / span
        }
    }
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update. Parameters must be passed in the same order every
    /// call; those without gradients are skipped. Weight decay applies to
    /// matrices only, never to biases or layer-norm vectors.
    pub fn step<'a, I>(&mut self, params: I, lr: f64)
    where
        I: IntoIterator<Item = &'a mut Tensor>,
    {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, p) in params.into_iter().enumerate() {
            if self.first.len() <= i {
                self.first.push(vec![0.0; p.numel()]);
                self.second.push(vec![0.0; p.numel()]);
            }
            let Some(g) = p.grad.take() else { continue };
            let decay = if p.rank() >= 2 { self.weight_decay } else { 0.0 };
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for (j, x) in p.data_mut().iter_mut().enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mhat = m[j] / c1;
                let vhat = v[j] / c2;
                *x -= lr * (mhat / (vhat.sqrt() + self.eps) + decay * *x);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn with_grad(g: Vec<f64>) -> Tensor {
        let mut t = Tensor::zeros(&[g.len()]);
        t.grad = Some(g);
        t
    }

    #[test]
    fn clip_at_boundary_leaves_grads() {
        let mut t = with_grad(vec![3.0, 4.0]);
        let n = clip_grad_norm([&mut t], 5.0).unwrap();
        assert_eq!(n, 5.0);
        assert_eq!(t.grad.unwrap(), vec![3.0, 4.0]);
    }

    #[test]
    fn clip_scales_down() {
        let mut t = with_grad(vec![6.0, 8.0]);
        let n = clip_grad_norm([&mut t], 5.0).unwrap();
        assert_eq!(n, 10.0);
        let g = t.grad.unwrap();
        assert!((g[0] - 3.0).abs() < 1e-12 && (g[1] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn clip_zero_grads() {
        let mut t = with_grad(vec![0.0, 0.0]);
        assert_eq!(clip_grad_norm([&mut t], 1.0).unwrap(), 0.0);
        assert_eq!(t.grad.unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn clip_without_grad_is_contract_error() {
        let mut t = Tensor::zeros(&[2]);
        assert!(matches!(clip_grad_norm([&mut t], 1.0), Err(Error::Contract(_))));
    }

    #[test]
    fn clip_is_idempotent() {
        let mut a = with_grad(vec![6.0, -8.0, 1.0]);
        clip_grad_norm([&mut a], 2.0).unwrap();
        let once = a.grad.clone().unwrap();
        clip_grad_norm([&mut a], 2.0).unwrap();
        let twice = a.grad.unwrap();
        for (x, y) in once.iter().zip(&twice) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn schedule_peaks_after_warmup_and_ends_at_zero() {
        let s = LinearSchedule::with_warmup_fraction(1e-3, 0.05, 100);
        assert_eq!(s.warmup, 5);
        assert_eq!(s.lr(0), 0.0);
        assert_eq!(s.lr(5), 1e-3);
        assert!(s.lr(4) < s.lr(5) && s.lr(6) < s.lr(5));
        assert!(s.lr(99) <= 1e-3 / 95.0 + 1e-18);
        assert_eq!(s.lr(100), 0.0);
    }

    #[test]
    fn schedule_without_warmup_starts_at_peak() {
        let s = LinearSchedule::new(2e-5, 0, 10);
        assert_eq!(s.lr(0), 2e-5);
    }

    #[test]
    fn adamw_moves_against_gradient() {
        let mut p = Tensor::new(&[1], vec![1.0]).unwrap();
        p.grad = Some(vec![2.0]);
        let mut opt = AdamW::new(0.0);
        opt.step([&mut p], 0.1);
        // first Adam step has magnitude lr
        assert!((p.data()[0] - 0.9).abs() < 1e-6);
        assert!(p.grad.is_none());
    }

    #[test]
    fn adamw_decays_matrices_only() {
        let mut w = Tensor::full(&[1, 1], 1.0);
        let mut b = Tensor::full(&[1], 1.0);
        w.grad = Some(vec![0.0]);
        b.grad = Some(vec![0.0]);
        let mut opt = AdamW::new(0.5);
        opt.step([&mut w, &mut b], 0.1);
        assert!((w.data()[0] - 0.95).abs() < 1e-12);
        assert_eq!(b.data()[0], 1.0);
    }
}
