mod common;

use std::collections::BTreeSet;
use std::sync::atomic::Ordering;

use chrono::NaiveDate;
use common::*;
use conceptpath::evalharness::{run_ablation, Gold, Unit};
use conceptpath::kgstore::{Actor, Concept, JournalAction, ReviewKind, ReviewState, SharedStore, Source, Store, Work};
use conceptpath::pipeline::{
    commit_run, run_pipeline, run_work, Ablation, BackendError, BackendRequest, BackendResponse, ConceptEdit,
    ExpertDecision, Hierarchy, NoExpert, PairState, PipelineContext, PipelineError, RefineEffect, RunStatus,
    ScriptEntry, ScriptedExpert, ScriptedMock, Stage, TripletState, WorkRun, MAX_ITERATIONS,
};
use proptest::prelude::*;

fn entry(stage: Stage, response: &str) -> ScriptEntry {
    ScriptEntry {
        work_id: None,
        stage,
        response: response.to_string(),
    }
}

const SEGMENTS: &str = "<related_research>Prior work.</related_research>\
<research_methods>We do physics.</research_methods>\
<conclusions>It works.</conclusions>";

fn small_store() -> Store {
    let mut s = Store::new();
    for (id, name, level) in [
        ("P", "Physics", 0),
        ("PP", "Particle physics", 1),
        ("NO", "Neutrino oscillation", 2),
        ("SN", "Sterile neutrino", 3),
        ("ML", "Machine learning", 1),
    ] {
        s.insert_concept(Concept::new(id, name, level, Source::Openalex))
            .unwrap();
    }
    s.insert_work(work("W", "Neutrinos oscillate.")).unwrap();
    s
}

fn work(id: &str, abstract_text: &str) -> Work {
    Work {
        id: id.into(),
        title: "t".into(),
        abstract_text: abstract_text.into(),
        publication_date: NaiveDate::from_ymd_opt(2021, 5, 1).unwrap(),
        authors: vec!["A".into()],
        concept_ids: ["P".to_string()].into(),
    }
}

fn pairs(rows: &str) -> String {
    format!("<concept_pairs>{rows}</concept_pairs>")
}

fn rels(rows: &str) -> String {
    format!("<concept_relations>{rows}</concept_relations>")
}

fn run_script(store: &Store, script: Vec<ScriptEntry>, expert: &dyn conceptpath::pipeline::ExpertSource) -> WorkRun {
    let mock = ScriptedMock::new(script);
    let ctx = PipelineContext::new(&mock, expert);
    run_work(store.work("W").unwrap(), store, None, None, &ctx).unwrap().run
}

#[test]
fn stage1_golden_segments() {
    let store = small_store();
    let run = run_script(
        &store,
        vec![
            entry(Stage::Segmentation, SEGMENTS),
            entry(Stage::Pairs, &pairs("[]")),
            entry(Stage::Pairs, &pairs("[]")),
            entry(Stage::Pairs, &pairs("[]")),
        ],
        &NoExpert,
    );
    let seg = run.segments.unwrap();
    assert_eq!(seg.related_research, "Prior work.");
    assert_eq!(seg.research_methods, "We do physics.");
    assert_eq!(seg.conclusions, "It works.");
    assert_eq!(run.status, RunStatus::Completed);
    assert!(run.hierarchy.nodes.is_empty());
}

#[test]
fn stage1_missing_tag_routes_to_segmentation_review_after_retries() {
    let store = small_store();
    let bad = "<related_research>a</related_research><research_methods>b</research_methods>";
    let run = run_script(&store, vec![entry(Stage::Segmentation, bad); 3], &NoExpert);
    assert_eq!(run.status, RunStatus::AwaitingReview);
    assert_eq!(run.stages[&Stage::Segmentation].calls, 3);
    assert_eq!(run.stages[&Stage::Segmentation].parse_failures, 3);
    assert_eq!(run.parked_on.len(), 1);
    assert!(run.parked_on[0].starts_with("W-segmentation-"));
}

#[test]
fn stage1_expert_annotation_supplies_segments() {
    let store = small_store();
    let bad = "no tags at all";
    let expert = ScriptedExpert::new().on(ReviewKind::Segmentation, |_| {
        Some(ExpertDecision {
            action: JournalAction::Annotate,
            note: Some(SEGMENTS.into()),
            concept_edit: None,
        })
    });
    let mut script = vec![entry(Stage::Segmentation, bad); 3];
    script.extend([
        entry(Stage::Pairs, &pairs("[]")),
        entry(Stage::Pairs, &pairs("[]")),
        entry(Stage::Pairs, &pairs("[]")),
    ]);
    let run = run_script(&store, script, &expert);
    assert_eq!(run.status, RunStatus::Completed);
    assert_eq!(run.segments.unwrap().research_methods, "We do physics.");
}

#[test]
fn empty_abstract_is_rejected_before_stage1() {
    let mut store = Store::new();
    store
        .insert_concept(Concept::new("P", "Physics", 0, Source::Openalex))
        .unwrap();
    store.insert_work(work("W", "ok")).unwrap();
    let mut w = store.work("W").unwrap().clone();
    w.abstract_text = "   ".into();
    let mock = ScriptedMock::new(vec![]);
    let ctx = PipelineContext::new(&mock, &NoExpert);
    let err = run_work(&w, &store, None, None, &ctx).unwrap_err();
    assert!(matches!(err, PipelineError::Precondition { .. }));
    assert_eq!(mock.remaining(), 0);
}

fn three_stage_script(pair_rows: &str, rel_rows: &str) -> Vec<ScriptEntry> {
    vec![
        entry(Stage::Segmentation, SEGMENTS),
        entry(Stage::Pairs, &pairs(pair_rows)),
        entry(Stage::Pairs, &pairs("[]")),
        entry(Stage::Pairs, &pairs("[]")),
        entry(Stage::Relations, &rels(rel_rows)),
    ]
}

#[test]
fn stage2_known_and_fuzzy_names_match() {
    let store = small_store();
    let mut script = three_stage_script(
        r#"[["Physics","Neutrino oscillation"],["Physics","machine-learning"]]"#,
        "[]",
    );
    script.truncate(4);
    script.push(entry(Stage::Relations, &rels("[]")));
    let mut ctx_run = run_script(&store, script, &NoExpert);
    ctx_run
        .pairs
        .sort_by(|a, b| a.specific_concept.cmp(&b.specific_concept));
    let ids: Vec<_> = ctx_run
        .pairs
        .iter()
        .map(|p| p.matched_concept_ids.clone().unwrap())
        .collect();
    assert_eq!(ids, vec![("P".into(), "NO".into()), ("P".into(), "ML".into())]);
    assert!(ctx_run.pairs.iter().all(|p| p.validation_state == PairState::KbMatched));
}

#[test]
fn stage2_unknown_term_parks_on_pair_review() {
    let mut store = small_store();
    let script = three_stage_script(r#"[["Physics","Quantum frobnication"]]"#, "[]");
    let run = run_script(&store, script.clone(), &NoExpert);
    assert_eq!(run.status, RunStatus::AwaitingReview);
    assert_eq!(run.pairs[0].validation_state, PairState::Pending);

    let mock = ScriptedMock::new(script);
    let ctx = PipelineContext::new(&mock, &NoExpert);
    let outcome = run_work(store.work("W").unwrap(), &store, None, None, &ctx).unwrap();
    assert_eq!(outcome.writes.items.len(), 1);
    let item = &outcome.writes.items[0];
    assert_eq!(item.kind, ReviewKind::Pair);
    assert_eq!(item.state, ReviewState::Pending);
    assert_eq!(item.payload["concept"], "Quantum frobnication");
    commit_run(&mut store, outcome).unwrap();
    assert_eq!(store.review_items().len(), 1);
    assert!(store.journal().is_empty());
}

#[test]
fn stage3_drops_out_of_vocabulary_triplets() {
    let store = small_store();
    let script = three_stage_script(
        r#"[["Physics","Particle physics"]]"#,
        r#"[["Physics","is-a","Particle physics"],["Physics","is-a","Zorbology"]]"#,
    );
    let mut script = script;
    script.push(entry(Stage::Refinement, "[]"));
    let run = run_script(&store, script, &NoExpert);
    assert_eq!(run.status, RunStatus::Completed);
    assert_eq!(run.counters.hallucinations, 1);
    assert_eq!(
        run.hierarchy.edges,
        BTreeSet::from([("P".to_string(), "PP".to_string())])
    );
    assert_eq!(run.paths, vec![vec!["P".to_string(), "PP".to_string()]]);
}

#[test]
fn stage3_rejects_level_order_violations() {
    let store = small_store();
    let mut script = three_stage_script(
        r#"[["Physics","Particle physics"]]"#,
        r#"[["Particle physics","is-a","Physics"]]"#,
    );
    script.push(entry(Stage::Refinement, "[]"));
    let run = run_script(&store, script, &NoExpert);
    assert_eq!(run.triplets.len(), 1);
    assert_eq!(run.triplets[0].state, TripletState::Rejected);
    assert_eq!(run.counters.level_order_rejections, 1);
    assert!(run.hierarchy.edges.is_empty());
}

#[test]
fn stage3_batches_pairs() {
    let mut store = Store::new();
    let mut rows = Vec::new();
    store
        .insert_concept(Concept::new("R", "Root field", 0, Source::Openalex))
        .unwrap();
    let leaves = [
        "Alpha", "Bravo", "Charlie", "Delta", "Echo", "Foxtrot", "Golf", "Hotel", "India", "Juliett",
    ];
    for (i, n) in leaves.iter().enumerate() {
        store
            .insert_concept(Concept::new(format!("L{i}"), *n, 1, Source::Openalex))
            .unwrap();
        rows.push(format!(r#"["Root field","{n}"]"#));
    }
    let mut w = work("W", "abstract");
    w.concept_ids = ["R".to_string()].into();
    store.insert_work(w).unwrap();
    let script = vec![
        entry(Stage::Segmentation, SEGMENTS),
        entry(Stage::Pairs, &pairs(&format!("[{}]", rows.join(",")))),
        entry(Stage::Pairs, &pairs("[]")),
        entry(Stage::Pairs, &pairs("[]")),
        entry(Stage::Relations, &rels("[]")),
        entry(Stage::Relations, &rels("[]")),
    ];
    let run = run_script(&store, script, &NoExpert);
    assert_eq!(run.status, RunStatus::Completed);
    assert_eq!(run.stages[&Stage::Relations].calls, 2);
}

#[test]
fn stage4_without_proposals_stops_after_one_iteration() {
    let store = small_store();
    let mut script = three_stage_script(
        r#"[["Physics","Particle physics"],["Particle physics","Neutrino oscillation"]]"#,
        r#"[["Physics","is-a","Particle physics"],["Particle physics","is-a","Neutrino oscillation"]]"#,
    );
    script.extend([entry(Stage::Refinement, "[]"), entry(Stage::Refinement, "[]")]);
    let run = run_script(&store, script, &NoExpert);
    assert_eq!(run.iterations, 1);
    assert_eq!(
        run.hierarchy.edges,
        BTreeSet::from([
            ("P".to_string(), "PP".to_string()),
            ("PP".to_string(), "NO".to_string())
        ])
    );
}

#[test]
fn stage4_one_intermediate_then_silence_ends_in_iteration_two() {
    let store = small_store();
    let mut script = three_stage_script(
        r#"[["Physics","Neutrino oscillation"],["Physics","Particle physics"]]"#,
        r#"[["Physics","is-a","Neutrino oscillation"],["Physics","is-a","Particle physics"]]"#,
    );
    // edges in id order: (P,NO), (P,PP); iteration 2 sees (P,PP), (PP,NO)
    script.extend([
        entry(Stage::Refinement, r#"["Particle physics","add"]"#),
        entry(Stage::Refinement, "[]"),
        entry(Stage::Refinement, "[]"),
        entry(Stage::Refinement, "[]"),
    ]);
    let run = run_script(&store, script, &NoExpert);
    assert_eq!(run.status, RunStatus::Completed);
    assert_eq!(run.iterations, 2);
    assert_eq!(
        run.hierarchy.edges,
        BTreeSet::from([
            ("P".to_string(), "PP".to_string()),
            ("PP".to_string(), "NO".to_string())
        ])
    );
    assert_eq!(run.refinements.len(), 1);
    assert_eq!(run.refinements[0].effect, RefineEffect::AddedIntermediate);
}

#[test]
fn stage4_add_outside_vocabulary_needs_the_expert() {
    let store = small_store();
    let mut script = three_stage_script(
        r#"[["Physics","Neutrino oscillation"]]"#,
        r#"[["Physics","is-a","Neutrino oscillation"]]"#,
    );
    script.extend([entry(Stage::Refinement, r#"["Particle physics","add"]"#)]);
    let run = run_script(&store, script.clone(), &NoExpert);
    assert_eq!(run.status, RunStatus::AwaitingReview);
    assert_eq!(run.parked_on.len(), 1);

    script.push(entry(Stage::Refinement, "[]"));
    script.push(entry(Stage::Refinement, "[]"));
    let run = run_script(&store, script, &refinement_approver());
    assert_eq!(run.status, RunStatus::Completed);
    assert!(run.hierarchy.nodes.contains("PP"));
}

#[test]
fn stage4_expert_can_create_a_concept() {
    let store = small_store();
    let mut script = three_stage_script(
        r#"[["Physics","Neutrino oscillation"]]"#,
        r#"[["Physics","is-a","Neutrino oscillation"]]"#,
    );
    script.extend([
        entry(Stage::Refinement, r#"["Lepton physics","add"]"#),
        entry(Stage::Refinement, "[]"),
        entry(Stage::Refinement, "[]"),
    ]);
    let expert = ScriptedExpert::new().on(ReviewKind::Refinement, |_| {
        Some(approve_with(Some(ConceptEdit {
            name: "Lepton physics".into(),
            level: 1,
            id: None,
        })))
    });
    let mock = ScriptedMock::new(script);
    let ctx = PipelineContext::new(&mock, &expert);
    let mut store = store;
    let outcome = run_work(store.work("W").unwrap(), &store, None, None, &ctx).unwrap();
    assert_eq!(outcome.run.status, RunStatus::Completed);
    let created = &outcome.writes.concepts[0];
    assert_eq!(created.source, Source::Expert);
    assert_eq!(created.level, 1);
    commit_run(&mut store, outcome).unwrap();
    let edges: BTreeSet<_> = store
        .edges()
        .iter()
        .map(|e| (e.parent_id.clone(), e.child_id.clone(), e.validated))
        .collect();
    let cid = store.concepts_named("Lepton physics")[0].id.clone();
    assert!(edges.contains(&("P".to_string(), cid.clone(), true)));
    assert!(edges.contains(&(cid, "NO".to_string(), true)));
    assert!(store.validate().is_empty());
}

#[test]
fn stage4_add_breaking_level_order_is_journaled_and_rejected() {
    let store = small_store();
    let mut script = three_stage_script(
        r#"[["Physics","Particle physics"],["Particle physics","Neutrino oscillation"]]"#,
        r#"[["Physics","is-a","Particle physics"],["Particle physics","is-a","Neutrino oscillation"]]"#,
    );
    // (P,PP) gets an intermediate with level 2, which cannot sit between 0 and 1
    script.extend([
        entry(Stage::Refinement, r#"["Neutrino oscillation","add"]"#),
        entry(Stage::Refinement, "[]"),
    ]);
    let mock = ScriptedMock::new(script);
    let ctx = PipelineContext::new(&mock, &NoExpert);
    let outcome = run_work(store.work("W").unwrap(), &store, None, None, &ctx).unwrap();
    let run = &outcome.run;
    assert_eq!(run.iterations, 1);
    assert_eq!(run.refinements[0].effect, RefineEffect::RejectedLevelOrder);
    let d = outcome
        .writes
        .decisions
        .iter()
        .find(|d| d.item_id == run.refinements[0].review_item)
        .unwrap();
    assert_eq!(d.action, JournalAction::Reject);
    assert_eq!(d.actor, Actor::System);
}

#[test]
fn stage4_delete_relation_and_concept() {
    let store = small_store();
    let mut script = three_stage_script(
        r#"[["Physics","Particle physics"],["Particle physics","Neutrino oscillation"],["Physics","Machine learning"]]"#,
        r#"[["Physics","is-a","Particle physics"],["Particle physics","is-a","Neutrino oscillation"],["Physics","is-a","Machine learning"]]"#,
    );
    // order: (P,ML), (P,PP), (PP,NO)
    script.extend([
        entry(Stage::Refinement, r#"["Machine learning","delete"]"#),
        entry(Stage::Refinement, r#"["Neutrino oscillation","delete"]"#),
        entry(Stage::Refinement, "[]"),
    ]);
    let run = run_script(&store, script, &NoExpert);
    let effects: Vec<_> = run.refinements.iter().map(|r| r.effect).collect();
    assert_eq!(
        effects,
        vec![RefineEffect::DeletedRelation, RefineEffect::DeletedConcept]
    );
    // after deleting NO, (PP,NO) is gone, so iteration 1 ends; iteration 2 sees (P,PP) only
    assert_eq!(run.iterations, 2);
    assert_eq!(
        run.hierarchy.nodes,
        BTreeSet::from(["ML".into(), "P".into(), "PP".into()])
    );
    assert_eq!(
        run.hierarchy.edges,
        BTreeSet::from([("P".to_string(), "PP".to_string())])
    );
}

#[test]
fn unparseable_refinement_fails_without_mutating_the_store() {
    let mut store = small_store();
    let mut script = three_stage_script(
        r#"[["Physics","Particle physics"]]"#,
        r#"[["Physics","is-a","Particle physics"]]"#,
    );
    script.extend(vec![entry(Stage::Refinement, r#"["Optics","merge"]"#); 3]);
    let before_edges = store.edges().len();
    let mock = ScriptedMock::new(script);
    let ctx = PipelineContext::new(&mock, &NoExpert);
    let outcome = run_work(store.work("W").unwrap(), &store, None, None, &ctx).unwrap();
    assert_eq!(outcome.run.status, RunStatus::Failed);
    assert!(outcome.run.error.as_deref().unwrap().contains("unknown action"));
    commit_run(&mut store, outcome).unwrap();
    assert_eq!(store.edges().len(), before_edges);
    assert!(store.paths().is_empty());
    assert_eq!(store.run("W").unwrap().status, RunStatus::Failed);
}

#[test]
fn backend_errors_fail_the_work_and_keep_partial_artifacts() {
    let store = small_store();
    let backend = |req: &BackendRequest| -> Result<BackendResponse, BackendError> {
        match req.stage {
            Stage::Segmentation => Ok(BackendResponse::text(SEGMENTS)),
            _ => Err(BackendError::Http {
                status: 500,
                body: "down".into(),
            }),
        }
    };
    let ctx = PipelineContext::new(&backend, &NoExpert);
    let run = run_work(store.work("W").unwrap(), &store, None, None, &ctx)
        .unwrap()
        .run;
    assert_eq!(run.status, RunStatus::Failed);
    assert!(run.segments.is_some());
    assert_eq!(run.stages[&Stage::Pairs].calls, 3);
}

#[test]
fn gold_script_reconstructs_gold_paths() {
    let shared = SharedStore::new(corpus_store());
    let mock = gold_script();
    let expert = refinement_approver();
    let ctx = PipelineContext::new(&mock, &expert);
    let summary = run_pipeline(&shared, None, &ctx, 4, false).unwrap();
    assert_eq!(summary.completed, 10, "{summary:?}");
    assert_eq!(mock.remaining(), 0);

    let store = shared.snapshot();
    let gold = Gold::load(&corpus_dir(), &store).unwrap();
    for (work, g) in &gold.works {
        let got: BTreeSet<String> = store
            .paths()
            .iter()
            .filter(|p| &p.work_id == work)
            .map(|p| p.key.clone())
            .collect();
        assert_eq!(&got, &g.paths, "paths of {work}");
    }
    assert!(store.validate().is_empty(), "{:?}", store.validate());
    // W3 went through the expert; W10 had one invented concept
    assert_eq!(store.run("W10").unwrap().counters.hallucinations, 1);
    assert_eq!(store.run("W10").unwrap().stages[&Stage::Segmentation].parse_failures, 1);
    assert_eq!(summary.hallucinations, 1);
}

#[test]
fn gold_script_scores_perfectly_end_to_end() {
    let store = corpus_store();
    let gold = Gold::load(&corpus_dir(), &store).unwrap();
    let mock = gold_script();
    let expert = refinement_approver();
    let ctx = PipelineContext::new(&mock, &expert);
    let report = run_ablation(Ablation::EndToEnd, &store, &gold, &ctx).unwrap();
    for unit in Unit::ALL {
        let r = report.unit(unit);
        assert_eq!((r.precision, r.recall, r.f1), (1.0, 1.0, 1.0), "{unit:?}");
    }
}

#[test]
fn ablation_without_decision_source_names_the_gap() {
    let store = corpus_store();
    let gold = Gold::load(&corpus_dir(), &store).unwrap();
    let oracle = GoldOracle::load();
    let ctx = PipelineContext::new(&oracle, &NoExpert);
    let err = run_ablation(Ablation::EndToEnd, &store, &gold, &ctx).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("end_to_end") && msg.contains("W3"), "{msg}");
}

#[test]
fn every_configuration_runs_through_the_harness() {
    let store = corpus_store();
    let gold = Gold::load(&corpus_dir(), &store).unwrap();
    let expert = ScriptedExpert::new()
        .always(ReviewKind::Refinement, JournalAction::Approve)
        .always(ReviewKind::Pair, JournalAction::Reject);
    for config in Ablation::ALL {
        let oracle = GoldOracle::load();
        let ctx = PipelineContext::new(&oracle, &expert);
        let report = run_ablation(config, &store, &gold, &ctx).unwrap();
        assert!(report.failed_works.is_empty(), "{config}: {:?}", report.failed_works);
        let c = report.unit(Unit::Concept);
        assert!(c.precision > 0.0 && c.recall > 0.0, "{config}");
    }
}

#[test]
fn kg_constraint_raises_precision_under_noise() {
    let store = corpus_store();
    let gold = Gold::load(&corpus_dir(), &store).unwrap();
    let expert = ScriptedExpert::new().always(ReviewKind::Pair, JournalAction::Reject);
    let precision = |config: Ablation| {
        let noisy = Noisy::new(GoldOracle::load(), 7, 0.2);
        let ctx = PipelineContext::new(&noisy, &expert);
        let r = run_ablation(config, &store, &gold, &ctx).unwrap();
        (
            r.unit(Unit::Triplet).precision,
            r.unit(Unit::Concept).precision,
            noisy.injected(),
        )
    };
    let (raw_t, raw_c, injected_raw) = precision(Ablation::Stages23Raw);
    let (kg_t, kg_c, injected_kg) = precision(Ablation::Stages23ExpertKg);
    assert!(injected_raw > 0 && injected_kg > 0);
    assert!(raw_t < kg_t, "{raw_t} vs {kg_t}");
    assert!(raw_c < kg_c, "{raw_c} vs {kg_c}");
}

#[test]
fn rerun_after_decision_resumes_without_duplicate_journal_entries() {
    let shared = SharedStore::new(corpus_store());
    let mock = gold_script();
    let ctx = PipelineContext::new(&mock, &NoExpert);
    let first = run_pipeline(&shared, None, &ctx, 2, false).unwrap();
    assert_eq!(first.awaiting_review, 1);
    assert_eq!(first.completed, 9);
    let snap = shared.snapshot();
    let parked = snap.run("W3").unwrap().parked_on.clone();
    assert_eq!(parked.len(), 1);
    let journal_before = snap.journal().len();

    shared
        .write(|s| {
            s.decide(
                &parked[0],
                Actor::Expert,
                JournalAction::Approve,
                serde_json::json!({}),
                chrono::Utc::now(),
            )
            .map(|_| ())
        })
        .unwrap();

    let second = run_pipeline(&shared, None, &ctx, 2, false).unwrap();
    assert_eq!(second.completed, 1);
    assert_eq!(second.skipped, 9);
    let snap = shared.snapshot();
    assert_eq!(snap.run("W3").unwrap().status, RunStatus::Completed);
    // the approve plus W3's remaining system decisions, nothing twice
    let ids: Vec<_> = snap.journal().iter().map(|e| e.item_id.clone()).collect();
    let unique: BTreeSet<_> = ids.iter().collect();
    assert_eq!(ids.len(), unique.len());
    assert!(snap.journal().len() > journal_before);
    assert_eq!(mock.remaining(), 0);
    assert!(snap.review_items().iter().all(|i| !i.is_pending()));
}

#[test]
fn identical_inputs_give_identical_hierarchies() {
    let store = corpus_store();
    let expert = refinement_approver();
    let run_all = || {
        let mock = gold_script();
        let ctx = PipelineContext::new(&mock, &expert);
        store
            .works()
            .iter()
            .map(|w| serde_json::to_string(&run_work(w, &store, None, None, &ctx).unwrap().run.hierarchy).unwrap())
            .collect::<Vec<_>>()
    };
    assert_eq!(run_all(), run_all());
}

#[test]
fn journal_holds_each_refinement_once_in_order() {
    let shared = SharedStore::new(corpus_store());
    let mock = gold_script();
    let expert = refinement_approver();
    let ctx = PipelineContext::new(&mock, &expert);
    run_pipeline(&shared, None, &ctx, 1, false).unwrap();
    let store = shared.snapshot();
    for run in store.runs() {
        for r in &run.refinements {
            let n = store.journal().iter().filter(|e| e.item_id == r.review_item).count();
            assert_eq!(n, 1, "{}", r.review_item);
        }
        let positions: Vec<usize> = run
            .refinements
            .iter()
            .map(|r| store.journal().iter().position(|e| e.item_id == r.review_item).unwrap())
            .collect();
        assert!(positions.windows(2).all(|w| w[0] < w[1]), "{positions:?}");
    }
    let w3 = store.run("W3").unwrap();
    let expert_entries = store.journal().iter().filter(|e| e.actor == Actor::Expert).count();
    assert_eq!(expert_entries, 1);
    assert_eq!(w3.refinements.len(), 2);
}

#[test]
fn kb_timeout_schedules_a_retry() {
    use conceptpath::pipeline::{KbClient, KbEntry, KbError};
    use std::sync::Arc;
    struct Down;
    impl KbClient for Down {
        fn name(&self) -> &str {
            "down"
        }
        fn search(&self, _: &str) -> Result<Vec<KbEntry>, KbError> {
            Err(KbError::Timeout)
        }
    }
    let store = small_store();
    let mock = ScriptedMock::new(three_stage_script(r#"[["Physics","Quarkonium"]]"#, "[]"));
    let mut ctx = PipelineContext::new(&mock, &NoExpert);
    ctx.kbs.push(Arc::new(Down));
    let run = run_work(store.work("W").unwrap(), &store, None, None, &ctx)
        .unwrap()
        .run;
    assert_eq!(run.status, RunStatus::AwaitingRetry);
    assert!(run.next_retry_at.is_some());
    assert_eq!(run.pairs[0].validation_state, PairState::Pending);
}

fn closure_holds(run: &WorkRun, expert_added: &BTreeSet<String>) -> bool {
    let allowed: BTreeSet<String> = run.validated_concepts().union(expert_added).cloned().collect();
    run.hierarchy.nodes.is_subset(&allowed)
        && run
            .hierarchy
            .edges
            .iter()
            .all(|(p, c)| run.hierarchy.nodes.contains(p) && run.hierarchy.nodes.contains(c))
}

#[test]
fn vocabulary_closure_under_injected_noise() {
    let corpus = Synthetic::generate(11, 60, 50);
    let noisy = Noisy::new(corpus.oracle(), 2024, 0.2);
    let ctx = PipelineContext::new(&noisy, &NoExpert);
    let mut hallucinations = 0;
    for w in corpus.store.works() {
        let run = run_work(w, &corpus.store, None, None, &ctx).unwrap().run;
        assert_eq!(run.status, RunStatus::Completed, "{}: {:?}", w.id, run.error);
        assert!(closure_holds(&run, &BTreeSet::new()), "{}", w.id);
        assert!(run.hierarchy.nodes.iter().all(|n| corpus.store.contains_concept(n)));
        hallucinations += run.counters.hallucinations as usize;
    }
    assert!(noisy.injected() > 0);
    assert_eq!(hallucinations, noisy.injected());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn stage4_never_exceeds_five_iterations(seed in any::<u64>()) {
        let corpus = Synthetic::generate(seed, 24, 4);
        let adversary = Adversary::new(corpus.oracle(), corpus.names(), seed);
        let expert = ScriptedExpert::new().on(ReviewKind::Refinement, move |item| {
            let flip = item.id.bytes().map(u32::from).sum::<u32>() % 3;
            Some(ExpertDecision::new(if flip == 0 { JournalAction::Reject } else { JournalAction::Approve }))
        });
        let ctx = PipelineContext::new(&adversary, &expert);
        for w in corpus.store.works() {
            let before = adversary.refinement_calls.load(Ordering::SeqCst);
            let run = run_work(w, &corpus.store, None, None, &ctx).unwrap().run;
            prop_assert!(run.iterations <= MAX_ITERATIONS);
            prop_assert!(run.refinements.iter().all(|r| r.iteration >= 1 && r.iteration <= MAX_ITERATIONS));
            let calls = adversary.refinement_calls.load(Ordering::SeqCst) - before;
            // each iteration asks about at most the edges of a graph on the vocabulary
            let v = run.validated_concepts().len() + run.refinements.len();
            prop_assert!(calls <= MAX_ITERATIONS as usize * v * v.max(1));
            if run.status == RunStatus::Completed {
                let added = run.refinements.iter().filter(|r| r.effect == RefineEffect::AddedIntermediate).count();
                let extra = run.hierarchy.nodes.difference(&run.validated_concepts()).count();
                prop_assert!(extra <= added);
            }
        }
    }
}

#[test]
fn stage4_only_refines_a_seed() {
    let store = small_store();
    let seed = Hierarchy {
        nodes: ["P", "NO"].map(String::from).into(),
        edges: [("P".to_string(), "NO".to_string())].into(),
    };
    let mock = ScriptedMock::new(vec![
        entry(Stage::Refinement, r#"["Particle physics","add"]"#),
        entry(Stage::Refinement, "[]"),
        entry(Stage::Refinement, "[]"),
    ]);
    let expert = refinement_approver();
    let mut ctx = PipelineContext::new(&mock, &expert);
    ctx.config.ablation = Ablation::Stage4Only;
    let run = run_work(store.work("W").unwrap(), &store, None, Some(&seed), &ctx)
        .unwrap()
        .run;
    assert_eq!(run.status, RunStatus::Completed);
    assert_eq!(
        run.paths,
        vec![vec!["P".to_string(), "PP".to_string(), "NO".to_string()]]
    );
    assert_eq!(expert.asked().len(), 1);
}
