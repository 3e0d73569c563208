use serde::{Deserialize, Serialize};

use crate::objective::EvaluatedModel;
use crate::superkernel::{DecisionProbabilities, ThresholdGrads};

/// Exponential moving average of rewards. Before the first update it has no
/// value and the current batch mean is used instead.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Baseline {
    pub value: Option<f64>,
}

impl Baseline {
    pub fn value_or_mean(&self, rewards: &[f64]) -> f64 {
        self.value.unwrap_or_else(|| mean(rewards))
    }

    pub fn update(&mut self, rewards: &[f64], decay: f64) {
        let m = mean(rewards);
        self.value = Some(match self.value {
            None => m,
            Some(b) => decay * b + (1.0 - decay) * m,
        });
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Per-layer threshold steps `lr / N * sum_i (R_i - b) * dlog p(s_i) / dt`,
/// accumulated in sample order.
pub fn policy_gradient(
    probs: &[DecisionProbabilities],
    skip_allowed: &[bool],
    models: &[EvaluatedModel],
    baseline: f64,
    lr: f64,
) -> Vec<ThresholdGrads> {
    let mut steps = vec![ThresholdGrads::default(); probs.len()];
    if models.is_empty() {
        return steps;
    }
    let scale = lr / models.len() as f64;
    for m in models {
        let adv = m.reward - baseline;
        for (layer, step) in steps.iter_mut().enumerate() {
            let g = probs[layer].log_prob_grad(m.spec.arch[layer], m.spec.quant[layer], skip_allowed[layer]);
            step.scaled_add(&g, scale * adv);
        }
    }
    steps
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quantizer::Bits;
    use crate::superkernel::ArchDecision;
    use crate::supernet::ModelSpec;

    fn half() -> DecisionProbabilities {
        DecisionProbabilities {
            p_k5: 0.5,
            p_keep: 1.0,
            p_e6: 0.5,
            p_drop_9_16: 0.5,
            p_drop_5_8: 0.5,
        }
    }

    fn evaluated(arch: ArchDecision, bits: Bits, reward: f64) -> EvaluatedModel {
        EvaluatedModel {
            spec: ModelSpec::uniform(1, arch, bits),
            accuracy: 0.0,
            latency_ms: 0.0,
            reward,
        }
    }

    #[test]
    fn rewarded_inclusion_lowers_threshold() {
        let m = evaluated(ArchDecision::MAX, Bits::B16, 1.0);
        let s = policy_gradient(&[half()], &[false], &[m], 0.0, 1.0);
        assert_eq!(s[0].t_k5, -0.5);
        assert_eq!(s[0].t_e6, -0.5);
        // Bits 9..16 were kept, so the step lowers the drop threshold.
        assert_eq!(s[0].t_q_9_16, -0.5);
        assert_eq!(s[0].t_q_5_8, 0.0);
    }

    #[test]
    fn zero_advantage_zero_step() {
        let ms = [
            evaluated(ArchDecision::MAX, Bits::B4, 0.3),
            evaluated(ArchDecision::SKIP, Bits::B8, 0.3),
        ];
        let s = policy_gradient(&[half()], &[true], &ms, 0.3, 1.0);
        assert_eq!(s[0], ThresholdGrads::default());
    }

    #[test]
    fn baseline_starts_at_batch_mean() {
        let mut b = Baseline::default();
        assert_eq!(b.value_or_mean(&[1.0, 3.0]), 2.0);
        b.update(&[1.0, 3.0], 0.9);
        assert_eq!(b.value, Some(2.0));
        b.update(&[12.0], 0.9);
        assert!((b.value.unwrap() - 3.0).abs() < 1e-12);
    }
}
