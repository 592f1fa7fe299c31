use crate::tensor::Tensor;

/// Result of one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// A gradient contained NaN; the whole step was skipped.
    SkippedNanGrad,
}

/// AdamW with bias correction and decoupled weight decay.
pub struct AdamW {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    t: u32,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(param_shapes: &[&[usize]], lr: f32, weight_decay: f32) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: param_shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: param_shapes.iter().map(|s| Tensor::zeros(s)).collect(),
        }
    }

    /// One update over all parameters. `grads[i] == None` leaves parameter
    /// `i` untouched (its moments are not advanced either). If any present
    /// gradient contains NaN the step is skipped entirely.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Option<Tensor>]) -> StepOutcome {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(params.len(), grads.len());
        if grads
            .iter()
            .flatten()
            .any(|g| g.data().iter().any(|v| v.is_nan()))
        {
            return StepOutcome::SkippedNanGrad;
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let Some(g) = g else { continue };
            for (((pv, gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let m_hat = *mv / bc1;
                let v_hat = *vv / bc2;
                *pv -= self.lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * *pv);
            }
        }
        StepOutcome::Applied
    }
}
