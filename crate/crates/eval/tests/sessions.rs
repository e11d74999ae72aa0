use std::collections::HashSet;
use std::io::Write;

use magicvid_eval::state::{LogEntry, VoteRecord};
use magicvid_eval::{replay_log, round2, Choice, EvalError, EvalState, Outcome, PairSpec, Side};
use proptest::prelude::*;

fn pool(n: usize, competitors: &[&str]) -> Vec<PairSpec> {
    (0..n)
        .map(|i| PairSpec {
            id: format!("pair-{i}"),
            prompt: format!("prompt {i}"),
            ours: format!("/videos/ours/{i}.gif").into(),
            theirs: format!("/videos/theirs/{i}.gif").into(),
            competitor: competitors[i % competitors.len()].to_string(),
        })
        .collect()
}

/// The click a voter with preference `pref` makes after looking at the videos.
fn click(state: &EvalState, token: &str, pair_id: &str, pref: Outcome) -> Choice {
    let left = state.asset(token, pair_id, Side::Left).unwrap();
    let left_is_ours = left.to_string_lossy().contains("/ours/");
    Choice::expressing(pref, left_is_ours)
}

#[test]
fn left_side_frequency_is_fair() {
    let n = 10_000;
    let mut s = EvalState::new(pool(3, &["x"]), 7).unwrap();
    let mut left = 0u32;
    for _ in 0..n {
        let t = s.create_session().unwrap();
        s.assign_pair(&t).unwrap();
        left += s.pending_left_is_ours(&t).unwrap() as u32;
    }
    // Binomial(n, 1/2): sigma = sqrt(n)/2.
    let sigma = (n as f64).sqrt() / 2.0;
    assert!((left as f64 - n as f64 / 2.0).abs() <= 3.0 * sigma, "left-is-ours {left} of {n}");
}

#[test]
fn pair_choice_is_roughly_uniform() {
    let pairs = 4;
    let n = 8_000;
    let mut s = EvalState::new(pool(pairs, &["x"]), 11).unwrap();
    let mut counts = vec![0f64; pairs];
    for _ in 0..n {
        let t = s.create_session().unwrap();
        let p = s.assign_pair(&t).unwrap();
        let i: usize = p.pair_id.trim_start_matches("pair-").parse().unwrap();
        counts[i] += 1.0;
    }
    let p = 1.0 / pairs as f64;
    let sigma = (n as f64 * p * (1.0 - p)).sqrt();
    for c in counts {
        assert!((c - n as f64 * p).abs() <= 4.0 * sigma, "{c}");
    }
}

#[test]
fn no_pair_is_served_twice_and_session_exhausts() {
    let mut s = EvalState::new(pool(20, &["x", "y"]), 1).unwrap();
    let t = s.create_session().unwrap();
    let mut seen = HashSet::new();
    for _ in 0..20 {
        let p = s.assign_pair(&t).unwrap();
        assert!(seen.insert(p.pair_id.clone()), "{} served twice", p.pair_id);
        s.record_vote(&t, &p.pair_id, Choice::Same).unwrap();
    }
    assert!(matches!(s.assign_pair(&t), Err(EvalError::Exhausted)));
    assert_eq!(s.votes_by(&t).unwrap(), 20);
}

#[test]
fn empty_pool_is_exhausted() {
    let mut s = EvalState::new(Vec::new(), 0).unwrap();
    let t = s.create_session().unwrap();
    assert!(matches!(s.assign_pair(&t), Err(EvalError::Exhausted)));
}

#[test]
fn clicks_are_derandomized() {
    let mut s = EvalState::new(pool(1, &["x"]), 0).unwrap();
    let mut seen_sides = HashSet::new();
    for _ in 0..40 {
        for choice in [Choice::Left, Choice::Same, Choice::Right] {
            let t = s.create_session().unwrap();
            let p = s.assign_pair(&t).unwrap();
            let left_is_ours = s.pending_left_is_ours(&t).unwrap();
            seen_sides.insert(left_is_ours);
            let before = s.stats("x");
            let outcome = s.record_vote(&t, &p.pair_id, choice).unwrap();
            let after = s.stats("x");
            let expected = match (choice, left_is_ours) {
                (Choice::Same, _) => Outcome::Same,
                (Choice::Left, true) | (Choice::Right, false) => Outcome::Good,
                _ => Outcome::Bad,
            };
            assert_eq!(outcome, expected);
            let delta = (after.good - before.good, after.same - before.same, after.bad - before.bad);
            let want = match expected {
                Outcome::Good => (1, 0, 0),
                Outcome::Same => (0, 1, 0),
                Outcome::Bad => (0, 0, 1),
            };
            assert_eq!(delta, want);
        }
    }
    assert_eq!(seen_sides.len(), 2, "both side orders should occur");
}

#[test]
fn duplicate_vote_is_rejected() {
    let mut s = EvalState::new(pool(2, &["x"]), 0).unwrap();
    let t = s.create_session().unwrap();
    let p = s.assign_pair(&t).unwrap();
    s.record_vote(&t, &p.pair_id, Choice::Left).unwrap();
    assert!(matches!(
        s.record_vote(&t, &p.pair_id, Choice::Left),
        Err(EvalError::DuplicateVote(_))
    ));
    assert_eq!(s.total_votes(), 1);
}

#[test]
fn empty_tally_has_undefined_ratio() {
    let s = EvalState::new(pool(2, &["x"]), 0).unwrap();
    let t = s.stats("x");
    assert_eq!((t.good, t.same, t.bad), (0, 0, 0));
    assert_eq!(t.ratio(), None);
    assert_eq!(s.stats("unknown").total(), 0);
}

fn write_synthetic_log(path: &std::path::Path, competitor: &str, g: u64, s: u64, b: u64) {
    let mut f = std::fs::File::create(path).unwrap();
    let mut n = 0u64;
    for (outcome, count) in [(Outcome::Good, g), (Outcome::Same, s), (Outcome::Bad, b)] {
        for _ in 0..count {
            let left_is_ours = n % 2 == 0;
            let entry = LogEntry::Vote(VoteRecord {
                voter: format!("v{}", n % 61),
                pair_id: format!("pair-{n}"),
                competitor: competitor.into(),
                choice: Choice::expressing(outcome, left_is_ours),
                left_is_ours,
                outcome,
                timestamp_ms: n,
            });
            writeln!(f, "{}", serde_json::to_string(&entry).unwrap()).unwrap();
            n += 1;
        }
    }
}

#[test]
fn replayed_log_reproduces_printed_ratio() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("votes.jsonl");
    write_synthetic_log(&path, "Pika 1.0", 4263, 927, 1010);
    let tallies = replay_log(&path).unwrap();
    assert_eq!(tallies.len(), 1);
    assert_eq!((tallies[0].good, tallies[0].same, tallies[0].bad), (4263, 927, 1010));
    assert_eq!(round2(tallies[0].ratio().unwrap()), 2.68);
    let s = EvalState::with_log(Vec::new(), 0, &path).unwrap();
    assert_eq!(s.stats("Pika 1.0").total(), 6200);
}

#[test]
fn log_survives_restart() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("votes.jsonl");
    let (token, voted) = {
        let mut s = EvalState::with_log(pool(6, &["x"]), 3, &path).unwrap();
        let t = s.create_session().unwrap();
        let mut voted = HashSet::new();
        for c in [Choice::Left, Choice::Right, Choice::Same] {
            let p = s.assign_pair(&t).unwrap();
            s.record_vote(&t, &p.pair_id, c).unwrap();
            voted.insert(p.pair_id);
        }
        (t, voted)
    };
    let before = replay_log(&path).unwrap();
    let mut s = EvalState::with_log(pool(6, &["x"]), 4, &path).unwrap();
    assert_eq!(s.all_stats(), before);
    assert_eq!(s.votes_by(&token).unwrap(), 3);
    for _ in 0..3 {
        let p = s.assign_pair(&token).unwrap();
        assert!(!voted.contains(&p.pair_id));
        s.record_vote(&token, &p.pair_id, Choice::Same).unwrap();
    }
    assert!(matches!(s.assign_pair(&token), Err(EvalError::Exhausted)));
}

#[test]
fn five_hundred_votes_are_conserved() {
    let mut s = EvalState::new(pool(50, &["x", "y", "z"]), 5).unwrap();
    let prefs = [Outcome::Good, Outcome::Same, Outcome::Bad];
    for v in 0..10 {
        let t = s.create_session().unwrap();
        for k in 0..50 {
            let p = s.assign_pair(&t).unwrap();
            let c = click(&s, &t, &p.pair_id, prefs[(v + k) % 3]);
            s.record_vote(&t, &p.pair_id, c).unwrap();
        }
    }
    let total: u64 = s.all_stats().iter().map(|t| t.total()).sum();
    assert_eq!(total, 500);
    assert_eq!(s.total_votes(), 500);
}

fn simulate(seed: u64, prefs: &[(u8, u8)], voters: usize) -> Vec<magicvid_eval::GsbTally> {
    let outcomes = [Outcome::Good, Outcome::Same, Outcome::Bad];
    let mut s = EvalState::new(pool(prefs.len(), &["a", "b"]), seed).unwrap();
    for v in 0..voters {
        let t = s.create_session().unwrap();
        while let Ok(p) = s.assign_pair(&t) {
            let i: usize = p.pair_id.trim_start_matches("pair-").parse().unwrap();
            let (even, odd) = prefs[i];
            let pref = outcomes[(if v % 2 == 0 { even } else { odd }) as usize % 3];
            let c = click(&s, &t, &p.pair_id, pref);
            s.record_vote(&t, &p.pair_id, c).unwrap();
        }
    }
    s.all_stats()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    /// Tallies depend only on voters' preferences, not on which side each
    /// video happened to be shown on.
    #[test]
    fn tally_is_side_blind(prefs in prop::collection::vec((0u8..3, 0u8..3), 1..12),
                           voters in 1usize..5,
                           seed_a in any::<u64>(),
                           seed_b in any::<u64>()) {
        let a = simulate(seed_a, &prefs, voters);
        let b = simulate(seed_b, &prefs, voters);
        prop_assert_eq!(&a, &b);
        let total: u64 = a.iter().map(|t| t.total()).sum();
        prop_assert_eq!(total, (prefs.len() * voters) as u64);
    }
}
