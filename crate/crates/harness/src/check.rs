//! Finite-difference gradient checks of a configured operator.

use dcnet::gradcheck::{
    check_network, check_point, sample_point, GroupReport, DEFAULT_STEP, TOLERANCE,
};
use dcnet::nn::{ArchItem, ArchPreset, ConvOperator};
use dcnet::{Mode, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::ExperimentConfig;
use crate::error::Result;

/// Operator points sampled per check.
pub const POINTS: usize = 100;
/// Length of the sampled `x` and `w` vectors.
pub const POINT_DIM: usize = 9;

#[derive(Clone, Debug)]
pub struct CheckReport {
    /// Worst combined relative error over the sampled operator points; `None`
    /// for standard convolutions.
    pub point_error: Option<f64>,
    pub groups: Vec<GroupReport>,
    pub tolerance: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.point_error.is_none_or(|e| e < self.tolerance)
            && self.groups.iter().all(|g| g.passed(self.tolerance))
    }
}

/// Checks the configured operator at random points, then every gradient of a
/// small `f64` network built from the model section.
pub fn gradcheck(config: &ExperimentConfig, seed: u64) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut arch = config.arch()?;
    let point_error = match arch.conv {
        ConvOperator::Decoupled(spec) => {
            let mut worst: f64 = 0.0;
            for _ in 0..POINTS {
                let (w, x, rho) = sample_point(POINT_DIM, &mut rng);
                worst = worst.max(check_point(spec, &w, &x, rho, DEFAULT_STEP)?.combined);
            }
            Some(worst)
        }
        ConvOperator::Standard => None,
    };

    arch.preset = ArchPreset::Custom;
    arch.layers = vec![ArchItem::Conv(4), ArchItem::Pool, ArchItem::Conv(4)];
    arch.width_divisor = 1;
    arch.input_size = 8;
    let mut net = arch.build::<f64>(&mut rng)?;
    let batch = 2;
    let n = batch * arch.in_channels * 64;
    let x = Tensor::new(
        &[batch, arch.in_channels, 8, 8],
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )?;
    let labels: Vec<usize> = (0..batch)
        .map(|_| rng.random_range(0..arch.num_classes))
        .collect();
    net.forward(&x, Mode::Train)?;
    let groups = check_network(&mut net, &x, &labels, DEFAULT_STEP)?;
    Ok(CheckReport {
        point_error,
        groups,
        tolerance: TOLERANCE,
    })
}
