//! Synthetic interaction data with a planted labeling rule.
//!
//! Every user carries an id token plus categorical attributes `u0..`, every
//! item an id token plus `i0..`. Labels come from
//!
//! ```text
//! logit = cross_weight * <P[u0], Q[i0]>  +  inner_weight * xor(u1, u2) * sign[i1]
//! label = logit > 0
//! ```
//!
//! where `P`, `Q` are low-rank factor tables (the cross-affinity term) and
//! `xor(u1, u2)` is ±1 according to the parity of the two user levels (the
//! inner term, which no pairwise model can express). With probability
//! `noise` a label is replaced by a fair coin.

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GmcfError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlantedRule {
    /// Cross affinity only; factorizable by construction.
    Cross,
    /// Parity of two user attributes against one item attribute.
    Inner,
    Both,
}

impl std::str::FromStr for PlantedRule {
    type Err = GmcfError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cross" => Ok(Self::Cross),
            "inner" => Ok(Self::Inner),
            "both" => Ok(Self::Both),
            _ => Err(GmcfError::InvalidConfig(format!(
                "unknown rule '{s}' (cross|inner|both)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub users: usize,
    pub items: usize,
    /// Categorical attributes per user besides the id (at least 3 for the inner rule).
    pub user_attrs: usize,
    /// Categorical attributes per item besides the id (at least 2 for the inner rule).
    pub item_attrs: usize,
    /// Levels of every categorical attribute.
    pub levels: usize,
    pub samples_per_user: usize,
    /// Rank of the cross-affinity factor tables.
    pub rank: usize,
    pub rule: PlantedRule,
    /// Weight of the inner term under the combined rule; the cross term has unit spread.
    pub inner_weight: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            users: 500,
            items: 200,
            user_attrs: 3,
            item_attrs: 2,
            levels: 6,
            samples_per_user: 20,
            rank: 2,
            rule: PlantedRule::Both,
            inner_weight: 1.0,
            noise: 0.1,
            seed: 0,
        }
    }
}

/// Everything needed to recompute the clean labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleSidecar {
    pub spec: SynthSpec,
    pub cross_weight: f64,
    pub inner_weight: f64,
    /// `P[level]`, user attribute `u0`.
    pub user_factors: Vec<Vec<f64>>,
    /// `Q[level]`, item attribute `i0`.
    pub item_factors: Vec<Vec<f64>>,
    /// ±1 per level of item attribute `i1`.
    pub item_signs: Vec<f64>,
    /// Attribute levels per user, `[u0, u1, ...]`.
    pub user_levels: Vec<Vec<usize>>,
    pub item_levels: Vec<Vec<usize>>,
    /// Fraction of samples whose label equals the clean rule's.
    pub clean_agreement: f64,
}

impl RuleSidecar {
    pub fn logit(&self, user: usize, item: usize) -> f64 {
        let u = &self.user_levels[user];
        let i = &self.item_levels[item];
        let mut y = 0.0;
        if self.cross_weight != 0.0 {
            let dot: f64 = self.user_factors[u[0]]
                .iter()
                .zip(&self.item_factors[i[0]])
                .map(|(a, b)| a * b)
                .sum();
            y += self.cross_weight * dot;
        }
        if self.inner_weight != 0.0 {
            let parity = if (u[1] + u[2]).is_multiple_of(2) { 1.0 } else { -1.0 };
            y += self.inner_weight * parity * self.item_signs[i[1]];
        }
        y
    }

    pub fn clean_label(&self, user: usize, item: usize) -> f64 {
        if self.logit(user, item) > 0.0 {
            1.0
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    /// Dataset file contents.
    pub text: String,
    pub rule: RuleSidecar,
}

impl SyntheticData {
    pub fn sidecar_json(&self) -> String {
        serde_json::to_string_pretty(&self.rule).expect("sidecar serializes")
    }
}

pub fn generate_synthetic(spec: &SynthSpec) -> Result<SyntheticData> {
    let bad = |m: &str| Err(GmcfError::InvalidConfig(m.into()));
    if spec.users == 0 || spec.items == 0 || spec.samples_per_user == 0 || spec.levels < 2 || spec.rank == 0 {
        return bad("users, items, samples per user and rank must be positive, levels at least 2");
    }
    if spec.samples_per_user > spec.items {
        return bad("samples per user exceeds the number of items");
    }
    if !(spec.inner_weight >= 0.0 && spec.inner_weight.is_finite()) {
        return bad("inner weight must be non-negative");
    }
    if !(0.0..=1.0).contains(&spec.noise) {
        return bad("noise must lie in [0, 1]");
    }
    let needs_inner = spec.rule != PlantedRule::Cross;
    if spec.user_attrs < if needs_inner { 3 } else { 1 } || spec.item_attrs < if needs_inner { 2 } else { 1 } {
        return bad("the rule needs u0..u2 and i0..i1 (u0 and i0 for the cross rule)");
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let factors = |n: usize, rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| (0..spec.rank).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect()
    };
    let user_factors = factors(spec.levels, &mut rng);
    let item_factors = factors(spec.levels, &mut rng);
    let item_signs = (0..spec.levels).map(|k| if k % 2 == 0 { 1.0 } else { -1.0 }).collect();
    let user_levels: Vec<Vec<usize>> = (0..spec.users)
        .map(|_| (0..spec.user_attrs).map(|_| rng.gen_range(0..spec.levels)).collect())
        .collect();
    let item_levels: Vec<Vec<usize>> = (0..spec.items)
        .map(|_| (0..spec.item_attrs).map(|_| rng.gen_range(0..spec.levels)).collect())
        .collect();
    // scale so that both terms have comparable spread
    let cross_scale = 1.0 / (spec.rank as f64 / 9.0).sqrt();
    let (cross_weight, inner_weight) = match spec.rule {
        PlantedRule::Cross => (cross_scale, 0.0),
        PlantedRule::Inner => (0.0, 1.0),
        PlantedRule::Both => (cross_scale, spec.inner_weight),
    };
    let mut rule = RuleSidecar {
        spec: spec.clone(),
        cross_weight,
        inner_weight,
        user_factors,
        item_factors,
        item_signs,
        user_levels,
        item_levels,
        clean_agreement: 0.0,
    };

    let mut text = String::new();
    let mut agree = 0usize;
    for user in 0..spec.users {
        for item in sample_indices(&mut rng, spec.items, spec.samples_per_user) {
            let clean = rule.clean_label(user, item);
            let label = if rng.gen_bool(spec.noise) {
                if rng.gen_bool(0.5) {
                    1.0
                } else {
                    0.0
                }
            } else {
                clean
            };
            agree += (label == clean) as usize;
            text.push_str(&format!("{}\tuid_{user}", label as u8));
            for (a, level) in rule.user_levels[user].iter().enumerate() {
                text.push_str(&format!(" u{a}=l{level}"));
            }
            text.push_str(&format!("\tiid_{item}"));
            for (a, level) in rule.item_levels[item].iter().enumerate() {
                text.push_str(&format!(" i{a}=l{level}"));
            }
            text.push('\n');
        }
    }
    rule.clean_agreement = agree as f64 / (spec.users * spec.samples_per_user) as f64;
    Ok(SyntheticData { text, rule })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::{parse_dataset_str, ParseOptions};

    fn small(rule: PlantedRule, noise: f64) -> SynthSpec {
        SynthSpec {
            users: 40,
            items: 30,
            samples_per_user: 10,
            rule,
            noise,
            seed: 3,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn deterministic_and_parseable() {
        let a = generate_synthetic(&small(PlantedRule::Both, 0.1)).unwrap();
        let b = generate_synthetic(&small(PlantedRule::Both, 0.1)).unwrap();
        assert_eq!(a.text, b.text);
        assert_eq!(a.sidecar_json(), b.sidecar_json());
        let (ds, report) = parse_dataset_str(&a.text, ParseOptions::default()).unwrap();
        assert_eq!(ds.samples.len(), 400);
        assert_eq!(report.users, 40);
        assert_eq!(ds.samples[0].user_chars.len(), 4);
        assert_eq!(ds.samples[0].item_chars.len(), 3);
        let c = generate_synthetic(&SynthSpec {
            seed: 4,
            ..small(PlantedRule::Both, 0.1)
        })
        .unwrap();
        assert_ne!(a.text, c.text);
    }

    #[test]
    fn noiseless_labels_follow_the_rule() {
        let d = generate_synthetic(&small(PlantedRule::Cross, 0.0)).unwrap();
        assert_eq!(d.rule.clean_agreement, 1.0);
        let back: RuleSidecar = serde_json::from_str(&d.sidecar_json()).unwrap();
        assert_eq!(back, d.rule);
        for line in d.text.lines().take(50) {
            let cols: Vec<&str> = line.split('\t').collect();
            let user: usize = cols[1].split(' ').next().unwrap()[4..].parse().unwrap();
            let item: usize = cols[2].split(' ').next().unwrap()[4..].parse().unwrap();
            assert_eq!(cols[0], format!("{}", back.clean_label(user, item) as u8));
        }
    }

    #[test]
    fn half_noise_keeps_about_three_quarters() {
        let d = generate_synthetic(&SynthSpec {
            users: 200,
            ..small(PlantedRule::Both, 0.5)
        })
        .unwrap();
        assert!(
            (d.rule.clean_agreement - 0.75).abs() < 0.03,
            "{}",
            d.rule.clean_agreement
        );
    }

    #[test]
    fn rejects_bad_specs() {
        assert!(generate_synthetic(&SynthSpec {
            users: 0,
            ..SynthSpec::default()
        })
        .is_err());
        assert!(generate_synthetic(&SynthSpec {
            noise: 1.5,
            ..SynthSpec::default()
        })
        .is_err());
        assert!(generate_synthetic(&SynthSpec {
            user_attrs: 1,
            ..SynthSpec::default()
        })
        .is_err());
        assert!(generate_synthetic(&SynthSpec {
            samples_per_user: 500,
            ..SynthSpec::default()
        })
        .is_err());
    }
}
