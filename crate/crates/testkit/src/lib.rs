//! Brute-force oracles and random fixtures for the test suites.

use std::collections::HashMap;

use chrono::{Datelike, Duration, NaiveDate, TimeZone, Utc};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dpm_core::array::Array;
use dpm_core::cohort::{
    evaluate_cohort, evaluate_outcome, CohortDefinition, CohortMember, LabeledCohort, OutcomeDefinition,
};
use dpm_core::ehr::{
    Concept, DeathRecord, EhrStore, Gender, MeasurementEvent, Person, VisitKind, VisitOccurrence,
};
use dpm_core::features::{
    extract_features, Aggregation, ColumnDictionary, CovariateSettings, FeatureBundle, Normalization,
    NormalizationStats,
};
use dpm_core::lightsaber::model::{batch_loss, Network, Sample};
use dpm_core::time::Timestamp;

/// Pairwise Mann-Whitney count over every positive/negative pair.
pub fn brute_auroc(scores: &[f64], labels: &[u8]) -> f64 {
    let mut num = 0.0;
    let mut pairs = 0.0;
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if labels[i] == 1 && labels[j] == 0 {
                pairs += 1.0;
                if scores[i] > scores[j] {
                    num += 1.0;
                } else if scores[i] == scores[j] {
                    num += 0.5;
                }
            }
        }
    }
    num / pairs
}

/// Average precision by walking each positive's rank; ties rank earlier inputs first.
pub fn brute_auprc(scores: &[f64], labels: &[u8]) -> f64 {
    let ahead = |i: usize, j: usize| scores[j] > scores[i] || (scores[j] == scores[i] && j < i);
    let mut sum = 0.0;
    let mut positives = 0;
    for i in 0..scores.len() {
        if labels[i] != 1 {
            continue;
        }
        positives += 1;
        let mut rank = 1;
        let mut hits = 1;
        for j in 0..scores.len() {
            if j != i && ahead(i, j) {
                rank += 1;
                hits += usize::from(labels[j] == 1);
            }
        }
        sum += hits as f64 / rank as f64;
    }
    sum / positives as f64
}

/// Completed years. A Feb 29 birthday falls at the start of Mar 1 in common years.
pub fn brute_age(birth: Timestamp, at: Timestamp) -> i64 {
    let mut age = 0;
    for y in 1..200 {
        let year = birth.year() + y;
        let anniversary = match NaiveDate::from_ymd_opt(year, birth.month(), birth.day()) {
            Some(date) => Utc.from_utc_datetime(&date.and_time(birth.time())),
            None => ts(year, 3, 1, 0, 0, 0),
        };
        if anniversary <= at {
            age = i64::from(y);
        } else {
            break;
        }
    }
    age
}

/// Linear scan over every table, no indexes.
pub fn brute_cohort(store: &EhrStore, def: &CohortDefinition) -> Vec<CohortMember> {
    let mut members = Vec::new();
    for p in store.persons() {
        let mut inpatient: Vec<&VisitOccurrence> = store
            .visits()
            .iter()
            .filter(|v| v.person_id == p.person_id && v.visit_kind == VisitKind::Inpatient)
            .collect();
        inpatient.sort_by_key(|v| (v.start, v.visit_id));
        if def.first_inpatient_only {
            inpatient.truncate(1);
        }
        for v in inpatient {
            let adult = brute_age(p.birth_datetime, v.start) >= def.min_age_years;
            let long = v.end - v.start >= Duration::hours(def.min_visit_duration_hours);
            let measured = def.require_measurement_within_hours.is_none_or(|h| {
                store.measurements().iter().any(|m| {
                    m.person_id == p.person_id && m.at >= v.start && m.at < v.start + Duration::hours(h)
                })
            });
            if adult && long && measured {
                members.push(CohortMember {
                    person_id: p.person_id,
                    index_datetime: v.start,
                    visit_id: v.visit_id,
                });
            }
        }
    }
    members.sort_by_key(|m| (m.person_id, m.index_datetime, m.visit_id));
    members
}

pub fn brute_outcome(store: &EhrStore, members: &[CohortMember], def: &OutcomeDefinition) -> Vec<u8> {
    members
        .iter()
        .map(|m| {
            let visit = store.visits().iter().find(|v| v.visit_id == m.visit_id).unwrap();
            let died = store.deaths().iter().find(|d| d.person_id == m.person_id);
            u8::from(died.is_some_and(|d| {
                let t = d.death_datetime;
                let within = t >= m.index_datetime && t < m.index_datetime + Duration::days(def.within_days_of_index);
                let hospital = !def.death_in_hospital || def.include_post_discharge || t <= visit.end;
                within && hospital
            }))
        })
        .collect()
}

pub fn ts(y: i32, mo: u32, d: u32, h: u32, mi: u32, s: u32) -> Timestamp {
    Utc.with_ymd_and_hms(y, mo, d, h, mi, s).unwrap()
}

pub const CONCEPTS: [i64; 4] = [3000, 3001, 3002, 3003];

pub fn concepts() -> Vec<Concept> {
    CONCEPTS
        .iter()
        .map(|&id| Concept {
            concept_id: id,
            name: format!("lab_{id}"),
            unit: "u".into(),
            normal_low: 0.0,
            normal_high: 10.0,
        })
        .collect()
}

/// Random store heavy on boundary cases: ages near 18 (Feb 29 births included), stays near
/// 48h, measurements on the window edge and deaths around day 30 and discharge.
pub fn random_store<R: Rng>(rng: &mut R, n_persons: usize) -> EhrStore {
    let mut persons = Vec::new();
    let mut visits = Vec::new();
    let mut measurements = Vec::new();
    let mut deaths = Vec::new();
    let mut next_visit = 1;
    for pid in 1..=n_persons as i64 {
        let first_start = ts(2015, 1, 1, 0, 0, 0)
            + Duration::seconds(rng.gen_range(0..5 * 365 * 86_400))
            - Duration::seconds(rng.gen_range(0..60) * i64::from(rng.gen_bool(0.2)));
        let birth = if rng.gen_bool(0.3) {
            // Within a day of the 18th birthday.
            let b = first_start - Duration::days(18 * 365 + 4) + Duration::seconds(rng.gen_range(-86_400..86_400));
            if rng.gen_bool(0.1) {
                ts(1996 + 4 * rng.gen_range(0..2), 2, 29, rng.gen_range(0..24), 0, 0)
            } else {
                b
            }
        } else {
            first_start - Duration::days(rng.gen_range(5 * 365..90 * 365))
        };
        let birth = birth.min(first_start - Duration::seconds(1));
        persons.push(Person {
            person_id: pid,
            birth_datetime: birth,
            gender: if rng.gen_bool(0.5) { Gender::Male } else { Gender::Female },
        });

        let mut own = Vec::new();
        let mut cursor = [first_start, first_start];
        for _ in 0..rng.gen_range(0..4) {
            let kind = if rng.gen_bool(0.7) { VisitKind::Inpatient } else { VisitKind::Outpatient };
            let k = usize::from(kind == VisitKind::Outpatient);
            let start = if rng.gen_bool(0.15) && k == 0 {
                cursor[0]
            } else {
                cursor[k] + Duration::seconds(rng.gen_range(0..30 * 86_400))
            };
            let hours = *[47, 48, 49, 24, 72, 200].choose(rng).unwrap();
            let jitter = *[-1, 0, 0, 1].choose(rng).unwrap();
            let end = start + Duration::hours(hours) + Duration::seconds(jitter);
            cursor[k] = end;
            own.push(VisitOccurrence {
                visit_id: next_visit,
                person_id: pid,
                start,
                end,
                visit_kind: kind,
            });
            next_visit += 1;
        }

        let mut own_events = Vec::new();
        for v in &own {
            for _ in 0..rng.gen_range(0..4) {
                let offset = *[0, 1, 47 * 3600 + 3599, 48 * 3600, 48 * 3600 - 1, 3600 * 30]
                    .choose(rng)
                    .unwrap();
                own_events.push(MeasurementEvent {
                    person_id: pid,
                    visit_id: rng.gen_bool(0.8).then_some(v.visit_id),
                    concept_id: *CONCEPTS.choose(rng).unwrap(),
                    value: rng.gen_range(-5.0..15.0),
                    at: v.start + Duration::seconds(offset),
                });
            }
        }

        let mut death = None;
        if let (Some(v), true) = (own.first(), rng.gen_bool(0.4)) {
            let anchor = own.choose(rng).map_or(v.start, |o| o.start);
            let at = match rng.gen_range(0..6) {
                0 => anchor + Duration::days(30) - Duration::seconds(1),
                1 => anchor + Duration::days(30),
                2 => own.iter().find(|o| o.start == anchor).unwrap().end,
                3 => own.iter().find(|o| o.start == anchor).unwrap().end + Duration::seconds(1),
                4 => anchor + Duration::seconds(rng.gen_range(0..40 * 86_400)),
                _ => anchor + Duration::hours(rng.gen_range(49..100)),
            };
            death = Some(at);
        }
        if let Some(at) = death {
            own.retain(|v| v.end <= at);
            let kept: Vec<i64> = own.iter().map(|v| v.visit_id).collect();
            own_events.retain(|m| m.at <= at && m.visit_id.is_none_or(|id| kept.contains(&id)));
            deaths.push(DeathRecord {
                person_id: pid,
                death_datetime: at,
            });
        }
        visits.extend(own);
        measurements.extend(own_events);
    }
    EhrStore::from_tables(persons, visits, measurements, deaths, concepts())
        .expect("random store is valid")
}

/// Largest relative error between the analytic gradient and central differences over
/// `indices`, as `|a - n| / max(|a|, |n|, floor)`.
pub fn gradient_error<N: Network<f64> + Clone>(
    net: &N,
    batch: &[(Sample<'_, f64>, f64)],
    indices: &[usize],
    floor: f64,
) -> f64 {
    let mut grad = vec![0.0; net.params().len()];
    dpm_core::lightsaber::model::batch_loss_and_grad(net, batch, &mut grad, None);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for &k in indices {
        let mut plus = net.clone();
        plus.params_mut()[k] += h;
        let mut minus = net.clone();
        minus.params_mut()[k] -= h;
        let numeric = (batch_loss(&plus, batch) - batch_loss(&minus, batch)) / (2.0 * h);
        let err = (grad[k] - numeric).abs() / grad[k].abs().max(numeric.abs()).max(floor);
        worst = worst.max(err);
    }
    worst
}

/// A bundle with random normalized-looking inputs and labels from `rule(static, temporal)`.
pub fn toy_bundle<R: Rng>(
    rng: &mut R,
    n: usize,
    n_bins: usize,
    n_channels: usize,
    rule: impl Fn(&[f32], &[f32]) -> bool,
) -> FeatureBundle {
    let cells = n_bins * n_channels;
    let mut statics = Vec::with_capacity(n * 2);
    let mut temporal = Vec::with_capacity(n * cells);
    let mut mask = Vec::with_capacity(n * cells);
    let mut labels = Vec::with_capacity(n);
    let mut members = Vec::with_capacity(n);
    for i in 0..n {
        let s: Vec<f32> = (0..2).map(|_| rng.gen_range(-1.5f32..1.5)).collect();
        let t: Vec<f32> = (0..cells).map(|_| rng.gen_range(-1.5f32..1.5)).collect();
        labels.push(u8::from(rule(&s, &t)));
        statics.extend(&s);
        temporal.extend(&t);
        mask.extend((0..cells).map(|_| if rng.gen_bool(0.7) { 1.0f32 } else { 0.0 }));
        members.push(CohortMember {
            person_id: i as i64 + 1,
            index_datetime: ts(2020, 1, 1, 0, 0, 0),
            visit_id: i as i64 + 1,
        });
    }
    let settings = CovariateSettings {
        concept_ids: (0..n_channels as i64).map(|c| 3000 + c).collect(),
        window_hours: n_bins as i64,
        bin_hours: 1,
        normalize: Normalization::None,
        ..Default::default()
    };
    FeatureBundle {
        outcome_name: "toy".into(),
        columns: ColumnDictionary {
            static_names: settings.static_names(),
            temporal_names: settings.temporal_names(),
        },
        settings,
        cohort: LabeledCohort {
            members,
            labels: labels.clone(),
        },
        static_features: Array::from_vec(&[n, 2], statics).unwrap(),
        temporal: Array::from_vec(&[n, n_bins, n_channels], temporal).unwrap(),
        mask: Array::from_vec(&[n, n_bins, n_channels], mask).unwrap(),
        labels,
        stats: NormalizationStats {
            medians: vec![0.0; n_channels],
            temporal: None,
            static_: None,
            fit_rows: n,
            fit_split: None,
        },
    }
}

/// Random model inputs: `n` rows of `s` statics and `cells` temporal cells, every third
/// cell masked out, alternating labels.
pub struct RandomRows {
    pub statics: Vec<f64>,
    pub temporal: Vec<f64>,
    pub mask: Vec<f64>,
    pub labels: Vec<f64>,
    pub s: usize,
    pub cells: usize,
}

impl RandomRows {
    pub fn new<R: Rng>(rng: &mut R, n: usize, s: usize, cells: usize) -> Self {
        let mut gen = |k: usize| (0..k).map(|_| rng.gen_range(-2.0..2.0)).collect::<Vec<f64>>();
        let statics = gen(n * s);
        let temporal = gen(n * cells);
        let mask = (0..n * cells).map(|i| f64::from(i % 3 != 0)).collect();
        let labels = (0..n).map(|i| f64::from(i % 2 == 0)).collect();
        Self { statics, temporal, mask, labels, s, cells }
    }

    pub fn batch(&self) -> Vec<(Sample<'_, f64>, f64)> {
        (0..self.labels.len())
            .map(|i| {
                let x = Sample {
                    statics: &self.statics[i * self.s..(i + 1) * self.s],
                    temporal: &self.temporal[i * self.cells..(i + 1) * self.cells],
                    mask: &self.mask[i * self.cells..(i + 1) * self.cells],
                };
                (x, self.labels[i])
            })
            .collect()
    }
}

pub fn random_covariate_settings<R: Rng>(rng: &mut R) -> CovariateSettings {
    let mut ids = CONCEPTS.to_vec();
    ids.shuffle(rng);
    ids.truncate(rng.gen_range(1..=4));
    let bin_hours = *[1, 2, 4, 6, 12].choose(rng).unwrap();
    CovariateSettings {
        concept_ids: ids,
        window_hours: 48,
        bin_hours,
        aggregation: *[Aggregation::Mean, Aggregation::Last, Aggregation::Max].choose(rng).unwrap(),
        include_static: rng.gen_bool(0.5),
        normalize: if rng.gen_bool(0.7) { Normalization::Zscore } else { Normalization::None },
    }
}

/// Features of a random store under random settings.
pub fn random_bundle(seed: u64) -> FeatureBundle {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let store = random_store(&mut rng, 120);
    let def = CohortDefinition {
        min_age_years: 0,
        min_visit_duration_hours: 24,
        require_measurement_within_hours: Some(24),
        ..Default::default()
    };
    let members = evaluate_cohort(&store, &def).unwrap();
    let labeled = evaluate_outcome(&store, &members, &OutcomeDefinition::default()).unwrap();
    extract_features(&store, &labeled, &random_covariate_settings(&mut rng)).unwrap()
}

/// Copy of `store` with one measurement changed, removed, moved or duplicated under another
/// concept. Only measurements outside `[start, start + window_hours)` of every visit of their
/// person are touched, and moved ones stay outside, so no cohort member's window can change.
pub fn perturb_outside_window<R: Rng>(
    rng: &mut R,
    store: &EhrStore,
    window_hours: i64,
    concept_ids: &[i64],
) -> EhrStore {
    let windows: HashMap<i64, Vec<(Timestamp, Timestamp)>> =
        store.visits().iter().fold(HashMap::new(), |mut acc, v| {
            acc.entry(v.person_id)
                .or_default()
                .push((v.start, v.start + Duration::hours(window_hours)));
            acc
        });
    let outside = |m: &MeasurementEvent| {
        windows
            .get(&m.person_id)
            .is_none_or(|ws| ws.iter().all(|&(from, to)| m.at < from || m.at >= to))
    };
    let mut events = store.measurements().to_vec();
    let candidates: Vec<usize> = (0..events.len()).filter(|&i| outside(&events[i])).collect();
    assert!(!candidates.is_empty(), "no measurement lies outside the windows");
    loop {
        let i = *candidates.choose(rng).unwrap();
        match rng.gen_range(0..4) {
            0 => events[i].value += rng.gen_range(-100.0..100.0),
            1 => {
                events.remove(i);
            }
            2 => {
                let person = events[i].person_id;
                let birth = store.person(person).unwrap().birth_datetime;
                let death = store.death(person).map(|d| d.death_datetime);
                let at = events[i].at + Duration::minutes(rng.gen_range(-6000..6000));
                let fits = at > birth && death.is_none_or(|d| at <= d);
                let moved = MeasurementEvent { at, visit_id: None, ..events[i].clone() };
                if !fits || !outside(&moved) {
                    continue;
                }
                events[i] = moved;
            }
            _ => {
                let mut extra = events[i].clone();
                extra.concept_id = *concept_ids.choose(rng).unwrap();
                extra.value = rng.gen_range(-10.0..10.0);
                events.push(extra);
            }
        }
        break;
    }
    EhrStore::from_tables(
        store.persons().to_vec(),
        store.visits().to_vec(),
        events,
        store.deaths().to_vec(),
        store.concepts().to_vec(),
    )
    .expect("perturbed store is valid")
}
