use proptest::prelude::*;

use iwr_core::datastore::{DatasetStore, IngestRule};
use iwr_core::env::{Action, Observation};
use iwr_core::operator::{Source, Step, Trajectory};
use iwr_core::rng;

fn trajectory(sources: &[bool], seed: u64, vals: &[f64]) -> Trajectory {
    let steps = sources
        .iter()
        .enumerate()
        .map(|(t, &human)| {
            let v = |k: usize| vals[(t * 13 + k) % vals.len()];
            Step {
                t: t as u32,
                obs: Observation(std::array::from_fn(v)),
                action: Action::new(v(10), v(11), v(12)),
                source: if human { Source::Human } else { Source::Policy },
            }
        })
        .collect();
    Trajectory {
        steps,
        success: seed.is_multiple_of(2),
        seed,
        round: (seed % 4) as u32,
        operator_id: format!("op{}", seed % 3),
    }
}

fn bucketed(n_human: usize, n_policy: usize) -> DatasetStore {
    let mut sources = vec![true; n_human];
    sources.extend(std::iter::repeat_n(false, n_policy));
    let mut s = DatasetStore::new("grasp-thread");
    s.ingest(&trajectory(&sources, 0, &[0.25, -1.5, 3.0]), IngestRule::Split);
    s
}

#[test]
fn uniform_sampling_matches_bucket_proportions() {
    // 100 human rows against 300 policy rows: each draw is human with
    // probability 1/4, so the count over n draws is Binomial(n, 1/4).
    let store = bucketed(100, 300);
    let mut r = rng::keyed(11, 99);
    let (draws, b) = (10_000, 64);
    let mut human = 0usize;
    for _ in 0..draws {
        let batch = store.sample_uniform(b, &mut r).unwrap();
        human += batch.sources.iter().filter(|&&s| s == Source::Human).count();
    }
    let n = (draws * b) as f64;
    let p = 0.25;
    let sigma = (n * p * (1.0 - p)).sqrt();
    assert!(
        (human as f64 - n * p).abs() < 4.0 * sigma,
        "human rows {human}, expected {} ± {sigma}",
        n * p
    );
}

#[test]
fn balanced_sampling_is_exactly_half_human() {
    let store = bucketed(7, 300);
    let mut r = rng::keyed(5, 99);
    for _ in 0..1000 {
        let batch = store.sample_balanced(64, &mut r).unwrap();
        assert_eq!(batch.sources.iter().filter(|&&s| s == Source::Human).count(), 32);
    }
}

#[test]
fn intervention_sampling_never_draws_policy_rows() {
    let store = bucketed(3, 300);
    let mut r = rng::keyed(5, 99);
    for _ in 0..1000 {
        let batch = store.sample_interventions(16, &mut r).unwrap();
        assert!(batch.sources.iter().all(|&s| s == Source::Human));
    }
}

fn arb_trajectories() -> impl Strategy<Value = Vec<Trajectory>> {
    let vals = prop::collection::vec(prop::num::f64::NORMAL | prop::num::f64::SUBNORMAL | prop::num::f64::ZERO, 1..20);
    prop::collection::vec((prop::collection::vec(any::<bool>(), 0..30), any::<u64>(), vals), 0..6)
        .prop_map(|ts| ts.iter().map(|(s, seed, v)| trajectory(s, *seed, v)).collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn split_partitions_every_step(trajs in arb_trajectories()) {
        let mut s = DatasetStore::new("grasp-thread");
        s.ingest_all(&trajs, IngestRule::Split);
        let human: usize = trajs.iter().map(Trajectory::human_steps).sum();
        let total: usize = trajs.iter().map(|t| t.steps.len()).sum();
        prop_assert_eq!(s.n_interventions(), human);
        prop_assert_eq!(s.n_on_policy(), total - human);
        prop_assert!(s.interventions().iter().all(|x| x.source == Source::Human));
        prop_assert!(s.on_policy().iter().all(|x| x.source == Source::Policy));

        let mut d = DatasetStore::new("grasp-thread");
        d.ingest_all(&trajs, IngestRule::DiscardPolicy);
        prop_assert_eq!(d.n_interventions(), human);
        prop_assert_eq!(d.n_on_policy(), 0);

        let mut a = DatasetStore::new("grasp-thread");
        a.ingest_all(&trajs, IngestRule::AllHuman);
        prop_assert_eq!(a.n_interventions(), total);
    }

    #[test]
    fn jsonl_round_trip_is_bit_exact(trajs in arb_trajectories()) {
        let mut s = DatasetStore::new("grasp-thread");
        s.ingest_all(&trajs, IngestRule::Split);
        let mut buf = Vec::new();
        s.write_jsonl(&mut buf).unwrap();
        let back = DatasetStore::read_jsonl(buf.as_slice()).unwrap();
        let bits = |st: &DatasetStore| -> Vec<u64> {
            st.interventions().iter().chain(st.on_policy())
                .flat_map(|x| x.obs.0.iter().chain(x.action.to_array().iter()).map(|v| v.to_bits()).collect::<Vec<_>>())
                .collect()
        };
        prop_assert_eq!(bits(&back), bits(&s));
        let restored: Vec<Trajectory> = back.records().into_iter().map(|r| r.into_trajectory()).collect();
        prop_assert_eq!(restored, trajs);
    }

    #[test]
    fn merge_is_bucketwise_concatenation(a in arb_trajectories(), b in arb_trajectories()) {
        let mut x = DatasetStore::new("grasp-thread");
        x.ingest_all(&a, IngestRule::Split);
        let mut y = DatasetStore::new("grasp-thread");
        y.ingest_all(&b, IngestRule::Split);
        let m = DatasetStore::merge([&x, &y]).unwrap();
        prop_assert_eq!(m.n_interventions(), x.n_interventions() + y.n_interventions());
        prop_assert_eq!(m.n_on_policy(), x.n_on_policy() + y.n_on_policy());
        prop_assert_eq!(m.trajectories().len(), a.len() + b.len());
    }
}

#[test]
fn schema_violations_report_the_line() {
    let good = bucketed(2, 1);
    let mut buf = Vec::new();
    good.write_jsonl(&mut buf).unwrap();
    let mut text = String::from_utf8(buf).unwrap();
    text.push_str("{\"task\":\"grasp-thread\"}\n");
    match DatasetStore::read_jsonl(text.as_bytes()) {
        Err(iwr_core::Error::SchemaViolation { line, .. }) => assert_eq!(line, 2),
        other => panic!("{other:?}"),
    }
    let short_obs = text.lines().next().unwrap().replacen("\"obs\":[", "\"obs\":[1.0,", 1);
    assert!(DatasetStore::read_jsonl(short_obs.as_bytes()).is_err());
}
