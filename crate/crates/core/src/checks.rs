//! Self-checks: finite-difference gradient verification on random model
//! instances and the FM-reduction identity against the closed-form FM.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{gradient_check, Tape};
use crate::data::{init_embeddings, AttributeId, AttributeValuePair, DataSample, Side};
use crate::error::{GmcfError, Result};
use crate::model::ModelParams;
use crate::training::regularized_risk;
use crate::variants::{fm_predict, fm_reduction_predict, VariantConfig};

/// Finite-difference step used by [`gradcheck`].
pub const FD_STEP: f64 = 1e-5;

/// Instances whose ReLU inputs come this close to zero are redrawn.
pub const KINK_MARGIN: f64 = 1e-4;

/// A random labelled sample over a universe laid out as `[user ids | item ids]`,
/// with 1..=`max_attrs` attributes per side and values in `[0.5, 1.5)`.
pub fn random_sample(rng: &mut ChaCha8Rng, per_side: usize, max_attrs: usize) -> DataSample {
    let mut side = |side: Side, offset: usize| -> Vec<AttributeValuePair> {
        let n = rng.gen_range(1..=max_attrs.min(per_side));
        let mut ids: Vec<usize> = rand::seq::index::sample(rng, per_side, n).into_vec();
        ids.sort_unstable();
        ids.into_iter()
            .map(|k| AttributeValuePair::new(AttributeId { id: offset + k, side }, rng.gen_range(0.5..1.5)))
            .collect()
    };
    let user = side(Side::User, 0);
    let item = side(Side::Item, per_side);
    let label = if rng.gen_bool(0.5) { 1.0 } else { 0.0 };
    DataSample::new(user, item, label).expect("random sample is well formed")
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub instances: usize,
    /// Model draws discarded for sitting near a ReLU kink.
    pub redrawn: usize,
    pub max_relative_error: f64,
}

/// Runs `instances` gradient checks of the regularized risk of one sample under `variant`, each on a freshly seeded model of dimension `d`
/// with at most `max_attrs` attributes per side. Parameter draws that put a
/// ReLU input within [`KINK_MARGIN`] of zero are replaced by a fresh draw.
pub fn gradcheck(
    variant: VariantConfig,
    d: usize,
    max_attrs: usize,
    seed: u64,
    instances: usize,
) -> Result<GradcheckReport> {
    variant.validate()?;
    let per_side = 6;
    let mut worst: f64 = 0.0;
    let mut redrawn = 0;
    for k in 0..instances {
        let inst_seed = seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(k as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(inst_seed);
        let batch = vec![random_sample(&mut rng, per_side, max_attrs)];
        let mut params = ModelParams::init(2 * per_side, d, variant, 1, inst_seed)?;
        for attempt in 1.. {
            let mut tape = Tape::new();
            regularized_risk(&mut tape, &params, &batch, 1e-3)?;
            if tape.kink_margin() > KINK_MARGIN {
                break;
            }
            if attempt > 100 {
                return Err(GmcfError::Numeric("no kink-free parameter draw found".into()));
            }
            redrawn += 1;
            params = ModelParams::init(2 * per_side, d, variant, 1, inst_seed ^ (attempt << 32))?;
        }
        let err = gradient_check(&mut params, FD_STEP, |tape, p| regularized_risk(tape, p, &batch, 1e-3))?;
        worst = worst.max(err);
    }
    Ok(GradcheckReport {
        instances,
        redrawn,
        max_relative_error: worst,
    })
}

/// Max `|fm_reduction_predict - fm_predict|` over `n` random instances with
/// embedding dimension `d`.
pub fn fmcheck(n: usize, d: usize, seed: u64) -> Result<f64> {
    let per_side = 8;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for k in 0..n {
        let sample = random_sample(&mut rng, per_side, 4);
        let table = init_embeddings(2 * per_side, d, seed.wrapping_add(k as u64))?;
        let a = fm_reduction_predict(&sample, &table)?;
        let b = fm_predict(&sample, &table)?;
        worst = worst.max((a - b).abs());
    }
    Ok(worst)
}
