mod common;

use common::*;
use saycomply::episode::EventKind;
use saycomply::llm::RequestTag;
use saycomply::{run_to_completion, start_episode, step_episode, EpisodeConfig, EpisodeStatus, TaskKind, TaskStatus};

fn cfg() -> EpisodeConfig {
    EpisodeConfig::default()
}

#[test]
fn compliant_extinguisher_query_dispatches_one_task() {
    let (rt, llm) = runtime("rules-f1.json");
    let store = locked(f1());
    let state = start_episode(EXTINGUISHER_QUERY, &store, &w1(), &cfg(), &rt);
    assert_eq!(state.status, EpisodeStatus::Executing);
    let dispatched: Vec<_> = state.events.iter().filter(|e| e.kind == EventKind::Dispatched).collect();
    assert_eq!(dispatched.len(), 1);

    let log = llm.audit_log();
    assert_eq!(log.iter().map(|r| r.tag).collect::<Vec<_>>(), vec![RequestTag::L1Select, RequestTag::Plan]);
    let plan_text = log[1].response.as_deref().unwrap();
    let plan = saycomply::planner::parse_plan_output(plan_text).unwrap();
    let saycomply::planner::PlanOutput::Outcome(saycomply::PlannerOutcome::Accepted { plan }) = plan.output else {
        panic!("plan expected")
    };
    assert_eq!(state.in_flight.as_ref(), Some(&plan.tasks()[0]));
    assert_eq!(state.cache.remaining, plan.tasks()[1..]);
    state.check_invariants().unwrap();
}

#[test]
fn h2s_query_is_refused_without_execution() {
    let (rt, _) = runtime("rules-f1.json");
    let store = locked(f1());
    let mut world = w1();
    let state = run_to_completion("enter the H2S zone", &store, &mut world, &cfg(), &rt);
    assert_eq!(state.status, EpisodeStatus::Refused);
    assert!(state.feedback_log.is_empty());
    assert_eq!(world, w1());
    let cited = &state.cache.refusal.as_ref().unwrap().cited_entry_ids;
    assert!(cited.iter().all(|id| state.retrieved_ids().contains(id)));
    assert_eq!(state.events.last().unwrap().kind, EventKind::Refused);
    state.check_invariants().unwrap();
}

#[test]
fn empty_query_errors_with_validation_event() {
    let (rt, llm) = runtime("rules-f1.json");
    let state = start_episode("   ", &locked(f1()), &w1(), &cfg(), &rt);
    assert_eq!(state.status, EpisodeStatus::Errored);
    assert_eq!(state.events.len(), 1);
    assert_eq!(state.events[0].payload["stage"], "validation");
    assert!(llm.audit_log().is_empty());
}

#[test]
fn three_task_plan_completes_in_three_steps() {
    let (rt, _) = runtime("rules-f1.json");
    let store = locked(f1());
    let mut world = w1();
    let mut state = start_episode("read the boiler gauge", &store, &world, &cfg(), &rt);
    let mut steps = 0;
    while state.status == EpisodeStatus::Executing {
        step_episode(&mut state, &store, &mut world, &cfg(), &rt);
        state.check_invariants().unwrap();
        steps += 1;
    }
    assert_eq!(steps, 3);
    assert_eq!(state.status, EpisodeStatus::Completed);
    assert_eq!(state.feedback_log.len(), 3);
    assert_eq!(state.feedback_log[1].observation, "57 psi");
    assert_eq!(state.final_answer.as_deref(), Some("gauge read complete\n3/3 tasks succeeded"));
    let seqs: Vec<u64> = state.events.iter().map(|e| e.seq).collect();
    assert_eq!(seqs, (1..=state.events.len() as u64).collect::<Vec<_>>());
}

#[test]
fn unreachable_goto_is_rerouted() {
    let (rt, _) = runtime("rules-f1.json");
    let store = locked(f1());
    let mut world = w1();
    let mut state = start_episode("go to the archive room", &store, &world, &cfg(), &rt);
    step_episode(&mut state, &store, &mut world, &cfg(), &rt);
    assert_eq!(state.feedback_log[0].status, TaskStatus::Failed);
    assert_eq!(state.status, EpisodeStatus::Executing);
    let replanned = state.events.iter().rev().find(|e| e.kind == EventKind::Replanned).unwrap();
    assert_eq!(replanned.payload["keep"], false);
    assert_eq!(state.in_flight.as_ref().unwrap().target, "lobby");
    while state.status == EpisodeStatus::Executing {
        step_episode(&mut state, &store, &mut world, &cfg(), &rt);
    }
    assert_eq!(state.status, EpisodeStatus::Completed);
    assert!(state.final_answer.unwrap().ends_with("2/3 tasks succeeded; 1 failed"));
}

#[test]
fn endless_replanning_errors_at_iteration_21() {
    let (rt, _) = runtime("rules-loop.json");
    let store = locked(f1());
    let mut world = w1();
    let state = run_to_completion("patrol the hall", &store, &mut world, &cfg(), &rt);
    assert_eq!(state.status, EpisodeStatus::Errored);
    let last = state.events.last().unwrap();
    assert_eq!(last.kind, EventKind::Errored);
    assert_eq!(last.payload["iteration"], 21);
    assert_eq!(state.feedback_log.len(), 21);
    assert_eq!(state.cache.iteration, 21);
    state.check_invariants().unwrap();
}

#[test]
fn parse_bomb_errors() {
    let (rt, llm) = runtime("rules-parse-bomb.json");
    let state = run_to_completion("read the boiler gauge", &locked(f1()), &mut w1(), &cfg(), &rt);
    assert_eq!(state.status, EpisodeStatus::Errored);
    assert_eq!(llm.calls_tagged(RequestTag::Plan), 2);
    assert!(state.error.unwrap().starts_with("planning:"));
}

#[test]
fn observations_are_written_back_when_configured() {
    let (rt, _) = runtime("rules-f1.json");
    let store = locked(f1());
    let config = EpisodeConfig { observation_log: Some("robot-observation-log".into()), ..cfg() };
    let state = run_to_completion("read the boiler gauge", &store, &mut w1(), &config, &rt);
    assert_eq!(state.status, EpisodeStatus::Completed);
    let guard = store.read().unwrap();
    assert_eq!(guard.version(), 2);
    let body = &guard.get("robot-observation-log").unwrap().body;
    assert!(body.lines().last().unwrap().ends_with("| boiler-gauge | 57 psi"));
}

#[test]
fn retrieval_happens_once_and_plans_use_at_most_two_calls() {
    let (rt, llm) = runtime("rules-f1.json");
    let state = run_to_completion(EXTINGUISHER_QUERY, &locked(f1()), &mut w1(), &cfg(), &rt);
    assert_eq!(state.status, EpisodeStatus::Completed);
    assert_eq!(state.events.iter().filter(|e| e.kind == EventKind::Retrieved).count(), 1);
    assert_eq!(llm.calls_tagged(RequestTag::L1Select), 1);
    for e in state.events.iter().filter(|e| matches!(e.kind, EventKind::Planned | EventKind::Replanned)) {
        assert!(e.payload["llm_calls"].as_u64().unwrap() <= 2);
    }
    let last = state.feedback_log.last().unwrap();
    assert_eq!((last.task.kind, last.status), (TaskKind::Respond, TaskStatus::Succeeded));
}

#[test]
fn episode_ids_are_unique_and_events_replay_from_any_seq() {
    let (rt, _) = runtime("rules-f1.json");
    let store = locked(f1());
    let a = run_to_completion("read the boiler gauge", &store, &mut w1(), &cfg(), &rt);
    let b = run_to_completion("read the boiler gauge", &store, &mut w1(), &cfg(), &rt);
    assert_ne!(a.id, b.id);
    for since in 0..=a.events.len() as u64 + 2 {
        let tail = a.events_since(since);
        assert!(tail.iter().all(|e| e.seq > since));
        assert_eq!(tail.len(), a.events.len().saturating_sub(since as usize));
    }
}
