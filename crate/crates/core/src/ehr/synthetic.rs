//! Deterministic synthetic cohort generator with a planted mortality signal.
//!
//! Every person gets a first inpatient stay with dense measurements over the first
//! 48 hours. A subset of concepts (the risk concepts) is shifted by a per-person latent
//! severity; the mean standardized abnormality of those concepts in the first 48 hours
//! drives in-stay death through `logistic(base + signal_strength * abnormality)`. The
//! intercept `base` is solved so that the realized death rate among persons who satisfy
//! the default adult / 48h stay / early-measurement criteria matches the target.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};

use super::*;
use crate::time::from_unix;

const HOUR: i64 = 3600;
const DAY: i64 = 24 * HOUR;
const OBSERVATION_HOURS: i64 = 48;
const OUTCOME_DAYS: i64 = 30;
const FIRST_CONCEPT_ID: ConceptId = 3000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorSpec {
    pub n_persons: usize,
    pub concept_count: usize,
    pub target_mortality_rate: f64,
    pub signal_strength: f64,
    pub seed: u64,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self {
            n_persons: 2000,
            concept_count: 8,
            target_mortality_rate: 0.15,
            signal_strength: 3.0,
            seed: 7,
        }
    }
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<(), EhrError> {
        if self.n_persons == 0 {
            return Err(EhrError::InvalidSpec("n_persons must be positive".into()));
        }
        if self.concept_count == 0 {
            return Err(EhrError::InvalidSpec("concept_count must be positive".into()));
        }
        if !(self.target_mortality_rate > 0.0 && self.target_mortality_rate < 1.0) {
            return Err(EhrError::InvalidSpec(
                "target_mortality_rate must lie in (0, 1)".into(),
            ));
        }
        if !(self.signal_strength >= 0.0 && self.signal_strength.is_finite()) {
            return Err(EhrError::InvalidSpec(
                "signal_strength must be finite and >= 0".into(),
            ));
        }
        Ok(())
    }

    /// All concept ids of the generated dictionary, in order.
    pub fn concept_ids(&self) -> Vec<ConceptId> {
        (0..self.concept_count as i64).map(|i| FIRST_CONCEPT_ID + i).collect()
    }

    /// The concepts that carry the planted signal.
    pub fn risk_concepts(&self) -> Vec<ConceptId> {
        let n = (self.concept_count / 3).max(1);
        self.concept_ids().into_iter().take(n).collect()
    }
}

const CATALOGUE: &[(&str, &str, f64, f64)] = &[
    ("lactate", "mmol/L", 0.5, 2.0),
    ("creatinine", "mg/dL", 0.6, 1.2),
    ("heart_rate", "bpm", 60.0, 100.0),
    ("respiratory_rate", "breaths/min", 12.0, 20.0),
    ("systolic_bp", "mmHg", 90.0, 140.0),
    ("temperature", "degC", 36.1, 37.2),
    ("spo2", "%", 95.0, 100.0),
    ("glucose", "mg/dL", 70.0, 140.0),
    ("wbc", "10^9/L", 4.0, 11.0),
    ("sodium", "mmol/L", 135.0, 145.0),
    ("potassium", "mmol/L", 3.5, 5.0),
    ("bun", "mg/dL", 7.0, 20.0),
];

fn concept_dictionary(count: usize) -> Vec<Concept> {
    (0..count)
        .map(|i| {
            let (name, unit, low, high) = CATALOGUE
                .get(i)
                .map(|&(n, u, l, h)| (n.to_string(), u.to_string(), l, h))
                .unwrap_or_else(|| (format!("lab_{i}"), "units".to_string(), 0.0, 1.0));
            Concept {
                concept_id: FIRST_CONCEPT_ID + i as i64,
                name,
                unit,
                normal_low: low,
                normal_high: high,
            }
        })
        .collect()
}

fn center_scale(c: &Concept) -> (f64, f64) {
    (
        (c.normal_low + c.normal_high) / 2.0,
        (c.normal_high - c.normal_low) / 2.0,
    )
}

fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Everything generated for one person before the death draw.
struct Draft {
    person: Person,
    visits: Vec<VisitOccurrence>,
    measurements: Vec<MeasurementEvent>,
    admission: i64,
    first_duration: i64,
    abnormality: f64,
    eligible: bool,
}

pub fn generate_synthetic(spec: &GeneratorSpec) -> Result<EhrStore, EhrError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let concepts = concept_dictionary(spec.concept_count);
    let risk = spec.risk_concepts();
    let noise = Normal::new(0.0, 0.5).unwrap();
    let std_normal = Normal::new(0.0, 1.0).unwrap();
    let baseline_shift = Normal::new(0.0, 0.5).unwrap();
    let dense_gap = Exp::new(1.0 / (4.0 * HOUR as f64)).unwrap();
    let sparse_gap = Exp::new(1.0 / (12.0 * HOUR as f64)).unwrap();

    // 2015-01-01T00:00:00Z
    let epoch = 1_420_070_400_i64;
    let mut next_visit_id: VisitId = 1;
    let mut drafts = Vec::with_capacity(spec.n_persons);

    for i in 0..spec.n_persons {
        let person_id = i as PersonId + 1;
        let gender = if rng.gen_bool(0.5) {
            Gender::Female
        } else {
            Gender::Male
        };
        let age_years: f64 = rng.gen_range(14.0..90.0);
        let admission = epoch + rng.gen_range(0..5 * 365 * DAY);
        let birth = admission - (age_years * 365.25 * DAY as f64) as i64;
        let first_duration = if rng.gen_bool(0.25) {
            rng.gen_range(6 * HOUR..OBSERVATION_HOURS * HOUR)
        } else {
            rng.gen_range(OBSERVATION_HOURS * HOUR..=240 * HOUR)
        };
        let measured_early = rng.gen_bool(0.97);
        let severity = std_normal.sample(&mut rng);

        let mut visits = Vec::new();
        let mut measurements = Vec::new();
        let first_visit = next_visit_id;
        next_visit_id += 1;
        visits.push(VisitOccurrence {
            visit_id: first_visit,
            person_id,
            start: from_unix(admission),
            end: from_unix(admission + first_duration),
            visit_kind: VisitKind::Inpatient,
        });

        let mut risk_sum = 0.0;
        let mut risk_n = 0usize;
        for concept in &concepts {
            let (center, scale) = center_scale(concept);
            let is_risk = risk.contains(&concept.concept_id);
            let shift = if is_risk {
                severity
            } else {
                baseline_shift.sample(&mut rng)
            };
            let mut t = if measured_early {
                rng.gen_range(1..2 * HOUR)
            } else {
                OBSERVATION_HOURS * HOUR + rng.gen_range(0..HOUR)
            };
            while t <= first_duration {
                let value = round2(center + scale * (shift + noise.sample(&mut rng)));
                if is_risk && t < OBSERVATION_HOURS * HOUR {
                    risk_sum += (value - center) / scale;
                    risk_n += 1;
                }
                measurements.push(MeasurementEvent {
                    person_id,
                    visit_id: Some(first_visit),
                    concept_id: concept.concept_id,
                    value,
                    at: from_unix(admission + t),
                });
                let gap = if t < OBSERVATION_HOURS * HOUR {
                    dense_gap.sample(&mut rng)
                } else {
                    sparse_gap.sample(&mut rng)
                };
                t += (gap as i64).max(60);
            }
        }
        let abnormality = if risk_n > 0 {
            risk_sum / risk_n as f64
        } else {
            0.0
        };

        // Earlier outpatient contacts, spaced so they never overlap.
        let mut cursor = admission;
        for _ in 0..rng.gen_range(0..=2) {
            cursor -= rng.gen_range(30 * DAY..350 * DAY);
            let duration = rng.gen_range(HOUR / 2..3 * HOUR);
            let visit_id = next_visit_id;
            next_visit_id += 1;
            visits.push(VisitOccurrence {
                visit_id,
                person_id,
                start: from_unix(cursor),
                end: from_unix(cursor + duration),
                visit_kind: VisitKind::Outpatient,
            });
            for _ in 0..rng.gen_range(1..=3) {
                let concept = &concepts[rng.gen_range(0..concepts.len())];
                let (center, scale) = center_scale(concept);
                measurements.push(MeasurementEvent {
                    person_id,
                    visit_id: Some(visit_id),
                    concept_id: concept.concept_id,
                    value: round2(center + scale * noise.sample(&mut rng)),
                    at: from_unix(cursor + rng.gen_range(0..=duration)),
                });
            }
        }

        // A stray measurement recorded outside any visit.
        if rng.gen_bool(0.3) {
            let concept = &concepts[rng.gen_range(0..concepts.len())];
            let (center, scale) = center_scale(concept);
            measurements.push(MeasurementEvent {
                person_id,
                visit_id: None,
                concept_id: concept.concept_id,
                value: round2(center + scale * noise.sample(&mut rng)),
                at: from_unix(admission - rng.gen_range(DAY..20 * DAY)),
            });
        }

        // A later readmission.
        if rng.gen_bool(0.3) {
            let start = admission + first_duration + rng.gen_range(30 * DAY..500 * DAY);
            let duration = rng.gen_range(24 * HOUR..120 * HOUR);
            let visit_id = next_visit_id;
            next_visit_id += 1;
            visits.push(VisitOccurrence {
                visit_id,
                person_id,
                start: from_unix(start),
                end: from_unix(start + duration),
                visit_kind: VisitKind::Inpatient,
            });
            for concept in &concepts {
                let (center, scale) = center_scale(concept);
                measurements.push(MeasurementEvent {
                    person_id,
                    visit_id: Some(visit_id),
                    concept_id: concept.concept_id,
                    value: round2(center + scale * noise.sample(&mut rng)),
                    at: from_unix(start + rng.gen_range(1..=duration)),
                });
            }
        }

        let early = measurements.iter().any(|m| {
            let t = m.at.timestamp();
            t >= admission && t < admission + OBSERVATION_HOURS * HOUR
        });
        let eligible = age_in_years(from_unix(birth), from_unix(admission)) >= 18
            && first_duration >= OBSERVATION_HOURS * HOUR
            && early;

        drafts.push(Draft {
            person: Person {
                person_id,
                birth_datetime: from_unix(birth),
                gender,
            },
            visits,
            measurements,
            admission,
            first_duration,
            abnormality,
            eligible,
        });
    }

    // Death draws: one uniform per person, then an intercept that makes the realized
    // eligible death count hit the target.
    let uniforms: Vec<f64> = drafts.iter().map(|_| rng.gen::<f64>()).collect();
    let eligible: Vec<usize> = (0..drafts.len()).filter(|&i| drafts[i].eligible).collect();
    let wanted = (spec.target_mortality_rate * eligible.len() as f64).round() as usize;
    let abnormality: Vec<f64> = drafts.iter().map(|d| d.abnormality).collect();
    let dies = |base: f64, i: usize| -> bool {
        uniforms[i] < logistic(base + spec.signal_strength * abnormality[i])
    };
    let base = if eligible.is_empty() {
        (spec.target_mortality_rate / (1.0 - spec.target_mortality_rate)).ln()
    } else {
        let (mut lo, mut hi) = (-40.0_f64, 40.0_f64);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            let count = eligible.iter().filter(|&&i| dies(mid, i)).count();
            if count >= wanted {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        hi
    };

    let mut persons = Vec::with_capacity(drafts.len());
    let mut visits = Vec::new();
    let mut measurements = Vec::new();
    let mut deaths = Vec::new();
    for (i, mut draft) in drafts.into_iter().enumerate() {
        let death_at = if dies(base, i) {
            let window_end = draft.admission + OUTCOME_DAYS * DAY - 1;
            let at = if draft.first_duration >= OBSERVATION_HOURS * HOUR {
                let last = (draft.admission + draft.first_duration).min(window_end);
                let at = rng.gen_range(draft.admission + OBSERVATION_HOURS * HOUR..=last);
                // Died during the stay: the stay ends at death.
                draft.visits[0].end = from_unix(at);
                at
            } else {
                let discharge = draft.admission + draft.first_duration;
                rng.gen_range(discharge + HOUR..=window_end)
            };
            Some(at)
        } else if rng.gen_bool(0.08) {
            Some(draft.admission + rng.gen_range(31 * DAY..400 * DAY))
        } else {
            None
        };

        if let Some(at) = death_at {
            let died = from_unix(at);
            let dropped: Vec<VisitId> = draft
                .visits
                .iter()
                .filter(|v| v.end > died)
                .map(|v| v.visit_id)
                .collect();
            draft.visits.retain(|v| !dropped.contains(&v.visit_id));
            draft.measurements.retain(|m| {
                m.at <= died && m.visit_id.is_none_or(|v| !dropped.contains(&v))
            });
            deaths.push(DeathRecord {
                person_id: draft.person.person_id,
                death_datetime: died,
            });
        }
        persons.push(draft.person);
        visits.extend(draft.visits);
        measurements.extend(draft.measurements);
    }

    EhrStore::from_tables(persons, visits, measurements, deaths, concepts)
}
