//! Finite-difference verification of the analytic training gradient.
//!
//! Runs the batched loss used by the optimizer on a double-precision
//! network with frozen targets, then compares the accumulated analytic
//! gradient of every parameter against central differences of the same
//! loss.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::learner::{batch_loss, batch_loss_and_grad, BatchItem};
use crate::net::{NetConfig, QNetwork};

#[derive(Clone, Copy, Debug)]
pub struct GradcheckReport {
    pub n_params: usize,
    pub max_rel_error: f64,
    /// Parameter index of the worst disagreement.
    pub worst_param: usize,
}

/// Relative error with an absolute floor so near-zero gradients do not
/// blow the ratio up.
fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compare the analytic gradient of the mean weighted squared TD loss with
/// central finite differences over every parameter, in double precision.
pub fn run_gradcheck(cfg: NetConfig, batch: usize, seed: u64) -> GradcheckReport {
    let mut net = QNetwork::<f64>::new(cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfd);
    let items: Vec<BatchItem<f64>> = (0..batch.max(1))
        .map(|i| BatchItem {
            input: (0..cfg.input_len())
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect(),
            action: i % cfg.actions(),
            target: rng.gen_range(-1.0..1.0),
            weight: rng.gen_range(0.2..1.0),
        })
        .collect();

    let mut grad = vec![0.0f64; net.num_params()];
    batch_loss_and_grad(&net, &items, &mut grad);

    let eps = 1e-6;
    let mut worst = (0usize, 0.0f64);
    for i in 0..net.num_params() {
        let orig = net.params()[i];
        net.params_mut()[i] = orig + eps;
        let up = batch_loss(&net, &items);
        net.params_mut()[i] = orig - eps;
        let down = batch_loss(&net, &items);
        net.params_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let err = rel_error(numeric, grad[i]);
        if err > worst.1 {
            worst = (i, err);
        }
    }
    GradcheckReport {
        n_params: net.num_params(),
        max_rel_error: worst.1,
        worst_param: worst.0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reduced_net_gradcheck_passes() {
        let cfg = NetConfig {
            fov: 7,
            seq_len: 2,
            conv_blocks: 1,
            base_channels: 2,
            lstm_units: 6,
            dense_units: 6,
        };
        let report = run_gradcheck(cfg, 3, 5);
        assert!(
            report.max_rel_error <= 1e-4,
            "max rel error {} at param {}",
            report.max_rel_error,
            report.worst_param
        );
    }
}
