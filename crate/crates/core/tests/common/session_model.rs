//! Reference model for the workshop state machine. Random operation
//! sequences are applied to both the real session and this model; every
//! result and every intermediate state must agree.

use std::collections::BTreeMap;

use chrono::{DateTime, Duration, Utc};
use elicit_core::distfit::ElicitedTriplet;
use elicit_core::elicitation::{Arm, ExpertProfile, Round, SessionError, SessionState, WorkshopSession};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const EXPERT_POOL: usize = 5;

/// (lower, mode, upper) in patients per 100. The last entry cannot be fitted.
pub const TRIPLETS: [(f64, f64, f64); 4] = [(1.0, 7.0, 40.0), (2.0, 6.0, 20.0), (5.0, 12.0, 30.0), (0.0, 50.0, 100.0)];

#[derive(Debug, Clone, Copy)]
pub enum Op {
    Register(usize),
    Submit { expert: usize, round: Round, arm: Arm, triplet: usize },
    Advance,
    Boxplots { round: Round, arm: Arm },
}

pub fn random_ops<R: Rng>(rng: &mut R, len: usize) -> Vec<Op> {
    (0..len)
        .map(|_| {
            let round = if rng.random_bool(0.5) { Round::One } else { Round::Two };
            let arm = if rng.random_bool(0.5) { Arm::HighDose } else { Arm::LowDose };
            match rng.random_range(0..10) {
                0..=2 => Op::Register(rng.random_range(0..EXPERT_POOL)),
                3..=5 => Op::Submit {
                    expert: rng.random_range(0..EXPERT_POOL),
                    round,
                    arm,
                    triplet: rng.random_range(0..TRIPLETS.len()),
                },
                6..=7 => Op::Advance,
                _ => Op::Boxplots { round, arm },
            }
        })
        .collect()
}

fn expert_id(i: usize) -> String {
    format!("expert-{i}")
}

fn rank(s: SessionState) -> u8 {
    match s {
        SessionState::Created => 0,
        SessionState::Round1Open => 1,
        SessionState::Discussion => 2,
        SessionState::Round2Open => 3,
        SessionState::Closed => 4,
    }
}

#[derive(Default)]
struct Model {
    rank: u8,
    roster: Vec<usize>,
    live: BTreeMap<(usize, u8, Arm), usize>,
}

/// Runs one sequence; returns a description of the first disagreement.
pub fn check_sequence(ops: &[Op]) -> Result<(), String> {
    let mut session = WorkshopSession::new("prop");
    let mut model = Model::default();
    let t0: DateTime<Utc> = "2024-04-16T16:00:00Z".parse().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(ops.len() as u64);

    for (step, op) in ops.iter().enumerate() {
        let before = rank(session.state());
        let ctx = |msg: String| format!("step {step} {op:?}: {msg}");
        match *op {
            Op::Register(i) => {
                let got = session.register_expert(ExpertProfile::bare(expert_id(i)));
                let expected_ok = model.rank <= 1 && !model.roster.contains(&i);
                match (&got, expected_ok) {
                    (Ok(()), true) => model.roster.push(i),
                    (Err(SessionError::SessionClosed), false) if model.rank == 4 => {}
                    (Err(SessionError::RegistrationClosed(_)), false) if (2..4).contains(&model.rank) => {}
                    (Err(SessionError::DuplicateExpert(_)), false) if model.roster.contains(&i) => {}
                    _ => return Err(ctx(format!("register returned {got:?}"))),
                }
            }
            Op::Submit { expert, round, arm, triplet } => {
                let (l, m, u) = TRIPLETS[triplet];
                let t = ElicitedTriplet::from_counts(l, m, u).unwrap();
                let at = t0 + Duration::seconds(step as i64);
                let got = session.submit(&expert_id(expert), round, arm, t, at).map(|s| s.clone());
                let round_no = u8::from(round);
                let open = (round_no == 1 && model.rank == 1) || (round_no == 2 && model.rank == 3);
                match &got {
                    Ok(stored) => {
                        if !open || !model.roster.contains(&expert) {
                            return Err(ctx("accepted a submission the model rejects".into()));
                        }
                        if stored.submitted_at != at || stored.triplet != t {
                            return Err(ctx("stored record differs from the request".into()));
                        }
                        model.live.insert((expert, round_no, arm), triplet);
                    }
                    Err(SessionError::WrongRoundState { .. }) if !open => {}
                    Err(SessionError::UnknownExpert(_)) if open && !model.roster.contains(&expert) => {}
                    Err(SessionError::InvalidTriplet(_))
                        if open && model.roster.contains(&expert) && triplet == TRIPLETS.len() - 1 => {}
                    Err(e) => return Err(ctx(format!("unexpected error {e:?}"))),
                }
            }
            Op::Advance => {
                let got = session.advance_with_rng(&mut rng);
                match got {
                    Ok(_) if model.rank < 4 => model.rank += 1,
                    Err(SessionError::AlreadyClosed) if model.rank == 4 => {}
                    other => return Err(ctx(format!("advance returned {other:?}"))),
                }
            }
            Op::Boxplots { round, arm } => {
                let round_no = u8::from(round);
                let available = if round_no == 1 { model.rank >= 2 } else { model.rank == 4 };
                let expected = model.live.keys().filter(|k| k.1 == round_no && k.2 == arm).count();
                match session.boxplots(round, arm) {
                    Ok(boxes) => {
                        if !available || boxes.len() != expected {
                            return Err(ctx(format!("{} boxes, model expects {expected}", boxes.len())));
                        }
                        for b in &boxes {
                            let ordered = b.whisker_low <= b.q25
                                && b.q25 <= b.median
                                && b.median <= b.q75
                                && b.q75 <= b.whisker_high;
                            if !ordered {
                                return Err(ctx(format!("box out of order: {b:?}")));
                            }
                        }
                        if !boxes.windows(2).all(|w| w[0].label < w[1].label) {
                            return Err(ctx("boxes not sorted by alias".into()));
                        }
                    }
                    Err(SessionError::BoxplotsUnavailable { .. }) if !available => {}
                    Err(SessionError::NoSubmissions { .. }) if available && expected == 0 => {}
                    Err(e) => return Err(ctx(format!("boxplots error {e:?}"))),
                }
            }
        }

        let after = rank(session.state());
        if after < before || after > before + 1 || after != model.rank {
            return Err(ctx(format!("state moved from {before} to {after}, model at {}", model.rank)));
        }
        let mut keys: Vec<_> = session
            .submissions()
            .iter()
            .map(|s| (s.expert_id.clone(), s.round, s.arm))
            .collect();
        let total = keys.len();
        keys.sort();
        keys.dedup();
        if keys.len() != total || total != model.live.len() {
            return Err(ctx(format!("{total} stored submissions, {} unique, model {}", keys.len(), model.live.len())));
        }
    }

    let restored = WorkshopSession::import_session(&session.export_session()).map_err(|e| e.to_string())?;
    if restored != session {
        return Err("export/import changed the session".into());
    }
    Ok(())
}
