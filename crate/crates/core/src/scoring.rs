//! Join of a ground-truth sample with both parsed turns into one
//! [`PerSampleEvaluation`]. Live and offline evaluation both go through
//! [`evaluate_sample`], so identical raw texts always score identically.

use crate::domain::{FrameSample, PerSampleEvaluation, RewardBreakdown, Turn1Output, Turn2Output};
use crate::metrics::per_sample_geometry;
use crate::parsing::{format_score, parse_turn1, parse_turn2};
use crate::rewards::{reward_accuracy, reward_dist, reward_reason, RewardConfig};

/// Score parsed outputs against `sample`.
///
/// The reasoning reward reads the four reasoning fields; the distance reward
/// is 0 when no box was produced.
pub fn evaluate_sample(
    sample: &FrameSample,
    turn1: &Turn1Output,
    turn2: &Turn2Output,
    config: &RewardConfig,
) -> PerSampleEvaluation {
    let predicted_phase = turn1.predicted_phase;
    let (iou, center_distance_pct) = per_sample_geometry(turn2.predicted_box.as_ref(), &sample.go_zone);
    let rewards = RewardBreakdown {
        acc: reward_accuracy(predicted_phase, sample.phase),
        format: format_score(turn2),
        reason: reward_reason(&sample.entity_set, &turn2.reasoning_text()),
        iou,
        dist: turn2
            .predicted_box
            .map_or(0.0, |b| reward_dist(&b, &sample.go_zone, config.tau)),
    };
    PerSampleEvaluation {
        sample_id: sample.sample_id.clone(),
        predicted_phase,
        phase_correct: predicted_phase == Some(sample.phase),
        predicted_box: turn2.predicted_box,
        iou,
        center_distance_pct,
        rewards,
    }
}

/// Parse both raw texts and score them.
pub fn evaluate_raw(
    sample: &FrameSample,
    turn1_raw: &str,
    turn2_raw: &str,
    config: &RewardConfig,
) -> PerSampleEvaluation {
    evaluate_sample(sample, &parse_turn1(turn1_raw), &parse_turn2(turn2_raw), config)
}
