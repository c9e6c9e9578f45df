use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::dataio::{load_csv_reader, split_and_fold, SchemaHints};
use crate::library::build_library;
use crate::models::{ModelSpec, Weighting};

fn toy_dataset() -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut csv = String::from("x1,x2,color,y\n");
    for _ in 0..240 {
        let x1: f64 = rng.random_range(-2.0..2.0);
        let x2: f64 = rng.random_range(-2.0..2.0);
        let color = ["red", "green", "blue"][rng.random_range(0..3)];
        let noise: f64 = rng.random_range(-1.0..1.0);
        let y = if x1 * x2 + 0.3 * x1 + noise > 0.0 { "pos" } else { "neg" };
        csv.push_str(&format!("{x1:.4},{x2:.4},{color},{y}\n"));
    }
    let ds = load_csv_reader(csv.as_bytes(), "y", &SchemaHints::default()).unwrap();
    split_and_fold(ds, 0.25, 5, 3).unwrap()
}

fn specs() -> Vec<ModelSpec> {
    vec![
        ModelSpec::Knn {
            k: 1,
            weighting: Weighting::Uniform,
        },
        ModelSpec::Knn {
            k: 7,
            weighting: Weighting::Distance,
        },
        ModelSpec::DecisionTree {
            max_depth: Some(2),
            min_leaf: 2,
        },
        ModelSpec::DecisionTree {
            max_depth: None,
            min_leaf: 1,
        },
        ModelSpec::NaiveBayes { alpha: 1.0 },
        ModelSpec::LogisticRegression { lambda: 0.01 },
    ]
}

fn workspace() -> Arc<Workspace> {
    static WS: OnceLock<Arc<Workspace>> = OnceLock::new();
    WS.get_or_init(|| {
        let ds = toy_dataset();
        let lib = build_library(&ds, &specs(), 5).unwrap();
        let config = WorkspaceConfig {
            tsne: TsneParams {
                iters: 300,
                perplexity: 10.0,
                ..Default::default()
            },
            ..Default::default()
        };
        Arc::new(Workspace::new(ds, lib, config).unwrap())
    })
    .clone()
}

fn session() -> Session {
    Session::create(workspace(), "t".into(), &CreateParams::default()).unwrap()
}

#[test]
fn create_starts_from_auto_selection() {
    let s = session();
    assert_eq!(s.revision(), 0);
    assert_eq!(s.ensemble().members, s.trace().final_members);
    assert_eq!(s.ensemble(), s.initial_ensemble());
    assert_eq!(s.layout_mode(), &LayoutMode::Attribute("x1".into()));
    assert!(s.selection().is_empty());
    let p = s.perf_panel();
    assert_eq!(p.current, p.initial);
    assert_eq!(p.n_test, 60);
}

#[test]
fn each_mutation_bumps_revision_once() {
    let mut s = session();
    let outside = (0..6).find(|m| !s.ensemble().members.contains(m)).unwrap();
    let mut expect = 0;
    let mut check = |s: &Session, n: u64| {
        expect += n;
        assert_eq!(s.revision(), expect);
    };
    s.set_selection(&SelectionBody {
        ids: Some(vec![3, 1, 3]),
        ..Default::default()
    })
    .unwrap();
    check(&s, 1);
    assert_eq!(s.selection(), &[1, 3]);
    s.toggle_model(outside).unwrap();
    check(&s, 1);
    s.set_errors_filter(true);
    check(&s, 1);
    s.set_layout(LayoutMode::Pca).unwrap();
    check(&s, 1);
    s.set_axes("acc", "acc_local").unwrap();
    check(&s, 1);
    s.reset_to_auto().unwrap();
    check(&s, 1);
    // reads leave it alone
    s.frame(None, None, None).unwrap();
    s.run_cv();
    s.candidates().unwrap();
    s.model_space(None, None).unwrap();
    check(&s, 0);
    // failed calls too
    assert!(s.toggle_model(99).is_err());
    assert!(s.set_axes("nope", "acc").is_err());
    assert!(s.set_layout("attribute:nope".parse().unwrap()).is_err());
    check(&s, 0);
}

#[test]
fn toggle_in_and_out_restores_state() {
    let mut s = session();
    let start = s.ensemble().clone();
    let outside = (0..6).find(|m| !start.members.contains(m)).unwrap();
    let a = s.toggle_model(outside).unwrap();
    assert!(a.added && a.applied);
    let b = s.toggle_model(outside).unwrap();
    assert!(!b.added);
    assert_eq!(s.revision(), 2);
    assert_eq!(s.ensemble().members, start.members);
    assert_eq!(s.ensemble().perf.accuracy_test, start.perf.accuracy_test);
    for (x, y) in s.ensemble().combined_test.as_slice().iter().zip(start.combined_test.as_slice()) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn last_member_is_rejected() {
    let ws = workspace();
    let mut s = session();
    let keep = s.ensemble().members[0];
    for m in s.ensemble().members.clone().into_iter().skip(1) {
        s.toggle_model(m).unwrap();
    }
    let rev = s.revision();
    assert!(matches!(s.toggle_model(keep), Err(SessionError::LastMember)));
    assert_eq!(s.revision(), rev);
    assert_eq!(s.ensemble().members, vec![keep]);
    assert_eq!(SessionError::LastMember.status(), 409);
    assert!(ws.lib.len() > 1);
}

/// First toggle from the initial ensemble that lowers test accuracy.
fn harmful_toggle(s: &Session) -> Option<usize> {
    let lib = &workspace().lib;
    let base = s.ensemble().perf.accuracy_test;
    (0..lib.len()).find(|&m| {
        let mut members = s.ensemble().members.clone();
        match members.iter().position(|&x| x == m) {
            Some(p) if members.len() > 1 => {
                members.remove(p);
            }
            Some(_) => return false,
            None => members.push(m),
        }
        ensemble::evaluate(lib, &members).unwrap().perf.accuracy_test < base
    })
}

#[test]
fn strict_guard_rolls_back() {
    let mut s = session();
    let m = harmful_toggle(&s).expect("toy library has a harmful toggle");
    s.set_guard(GuardPolicy {
        mode: GuardMode::Strict,
        tolerance: 0.0,
    });
    let before = s.ensemble().clone();
    let r = s.toggle_model(m).unwrap();
    assert!(!r.applied);
    assert!(matches!(r.verdict, GuardVerdict::Violated { delta } if delta > 0.0));
    assert_eq!(s.ensemble(), &before);
    assert_eq!(r.perf.current, before.perf);
    assert_eq!(s.revision(), 2);
    // the tracker was restored too: the next toggle starts from the same set
    let again = s.toggle_model(m).unwrap();
    assert_eq!(again.added, r.added);
}

#[test]
fn warn_guard_applies_and_reports() {
    let mut s = session();
    let m = harmful_toggle(&s).unwrap();
    let r = s.toggle_model(m).unwrap();
    assert!(r.applied);
    assert!(matches!(r.verdict, GuardVerdict::Violated { .. }));
    s.reset_to_auto().unwrap();
    s.set_guard(GuardPolicy {
        mode: GuardMode::Off,
        tolerance: 0.0,
    });
    assert_eq!(s.toggle_model(m).unwrap().verdict, GuardVerdict::Ok);
}

#[test]
fn rect_selection_matches_brute_force() {
    let mut s = session();
    let rect = Rect {
        x0: 1.2,
        x1: 0.4,
        y0: 0.1,
        y1: 0.9,
    };
    let r = s
        .set_selection(&SelectionBody {
            rect: Some(rect),
            ..Default::default()
        })
        .unwrap();
    let frame = s.frame(None, None, None).unwrap().frame;
    let want: Vec<usize> = frame
        .points
        .iter()
        .filter(|p| (0.4..=1.2).contains(&p.x) && (0.1..=0.9).contains(&p.y))
        .map(|p| p.instance_id)
        .collect();
    assert!(!want.is_empty());
    assert_eq!(s.selection(), want.as_slice());
    assert_eq!(r.selection_size, want.len());

    // local accuracy against a direct count
    let lib = &workspace().lib;
    let acc = r.local_accuracy.unwrap();
    for m in 0..lib.len() {
        let hits = want.iter().filter(|&&i| lib.test_pred(m)[i] == lib.test_labels()[i]).count();
        assert_eq!(acc[m], hits as f64 / want.len() as f64);
    }
}

#[test]
fn rect_with_mode_switches_layout() {
    let mut s = session();
    s.set_selection(&SelectionBody {
        rect: Some(Rect {
            x0: -100.0,
            x1: 100.0,
            y0: -100.0,
            y1: 100.0,
        }),
        mode: Some("pca".into()),
        ..Default::default()
    })
    .unwrap();
    assert_eq!(s.layout_mode(), &LayoutMode::Pca);
    assert_eq!(s.selection().len(), 60);
}

#[test]
fn bad_selections() {
    let mut s = session();
    assert!(matches!(
        s.set_selection(&SelectionBody {
            ids: Some(vec![60]),
            ..Default::default()
        }),
        Err(SessionError::InstanceOutOfRange { id: 60, n: 60 })
    ));
    assert!(s.set_selection(&SelectionBody::default()).is_err());
    assert_eq!(s.revision(), 0);
}

#[test]
fn errors_filter_restricts_selection() {
    let mut s = session();
    let all: Vec<usize> = (0..60).collect();
    s.set_selection(&SelectionBody {
        ids: Some(all),
        ..Default::default()
    })
    .unwrap();
    s.set_errors_filter(true);
    let eff = s.effective_selection();
    assert_eq!(eff.len(), s.ensemble().n_errors());
    assert!(eff.iter().all(|&i| !s.ensemble().correct[i]));
    s.set_errors_filter(false);
    assert_eq!(s.effective_selection().len(), 60);
}

#[test]
fn empty_selection_disables_local_axis() {
    let mut s = session();
    let r = s
        .set_selection(&SelectionBody {
            ids: Some(vec![]),
            ..Default::default()
        })
        .unwrap();
    assert!(r.empty && r.local_accuracy.is_none());
    let ms = s.model_space(Some("acc_local"), Some("acc")).unwrap();
    assert!(!ms.available && ms.points.is_empty());
    let c = s.candidates().unwrap();
    assert!(c.no_candidate);
    let ms = s.model_space(Some("auc_w"), Some("div_q")).unwrap();
    assert!(ms.available);
    assert_eq!(ms.points.len(), 6);
}

#[test]
fn candidates_are_ranked_and_improving() {
    let mut s = session();
    s.set_selection(&SelectionBody {
        ids: Some((0..60).collect()),
        ..Default::default()
    })
    .unwrap();
    s.set_errors_filter(true);
    let c = s.candidates().unwrap();
    assert!(c.ranked.windows(2).all(|w| w[0].acc_local >= w[1].acc_local));
    assert!(c.ranked.iter().all(|x| !s.ensemble().members.contains(&x.model_id)));
    assert_eq!(c.ensemble_local, Some(0.0));
    if let Some(top) = &c.top_improving {
        let before = s.ensemble().clone();
        s.toggle_model(top.model_id).unwrap();
        let eff: Vec<usize> = (0..60).filter(|&i| !before.correct[i]).collect();
        let ws = workspace();
        let truth = ws.lib.test_labels();
        let after = crate::metrics::accuracy(&s.ensemble().pred, truth, Some(&eff)).unwrap();
        assert_eq!(after, top.ensemble_local_after);
        assert!(after > 0.0);
    } else {
        assert!(c.no_candidate && c.reason.is_some());
    }
}

#[test]
fn frame_has_grids_and_panel() {
    let s = session();
    let f = s.frame(None, Some(4), Some(3)).unwrap();
    assert_eq!(f.frame.points.len(), 60);
    assert_eq!(f.density.total, 60);
    assert_eq!(f.errors_density.total as usize, s.ensemble().n_errors());
    assert_eq!(f.density.cols, 4);
    let sum: u64 = f.density.counts.iter().flatten().sum();
    assert_eq!(sum, 60);
    for mode in [LayoutMode::Pca, LayoutMode::Mds, LayoutMode::Tsne] {
        let f = s.frame(Some(&mode), None, None).unwrap();
        assert_eq!(f.frame.mode, mode);
        assert!(f.frame.points.iter().all(|p| p.x.is_finite() && p.y.is_finite()));
    }
    // cached projections are reused
    let a = workspace().projection(&LayoutMode::Tsne).unwrap();
    let b = workspace().projection(&LayoutMode::Tsne).unwrap();
    assert!(Arc::ptr_eq(&a, &b));
}

#[test]
fn snapshot_round_trip() {
    let mut s = session();
    let outside = (0..6).find(|m| !s.ensemble().members.contains(m)).unwrap();
    s.toggle_model(outside).unwrap();
    s.set_selection(&SelectionBody {
        ids: Some(vec![2, 5, 7]),
        ..Default::default()
    })
    .unwrap();
    s.set_axes("acc_local", "f1:pos").unwrap();
    let snap = s.snapshot();
    let text = serde_json::to_string(&snap).unwrap();
    let back: SessionSnapshot = serde_json::from_str(&text).unwrap();
    let r = Session::restore(workspace(), &back).unwrap();
    assert_eq!(r.snapshot(), snap);
    assert_eq!(r.ensemble(), s.ensemble());
    assert_eq!(r.initial_ensemble(), s.initial_ensemble());
}

#[test]
fn request_json_forms() {
    let r: ApiRequest = serde_json::from_str(r#"{"op":"toggle","session":"s1","model_id":3}"#).unwrap();
    assert_eq!(
        r,
        ApiRequest::Toggle {
            session: "s1".into(),
            model_id: 3
        }
    );
    let r: ApiRequest =
        serde_json::from_str(r#"{"op":"selection","session":"s1","rect":{"x0":0,"x1":1,"y0":0,"y1":1},"mode":"pca"}"#).unwrap();
    assert!(matches!(
        r,
        ApiRequest::Selection {
            body: SelectionBody { rect: Some(_), .. },
            ..
        }
    ));
    let r: ApiRequest =
        serde_json::from_str(r#"{"op":"create_session","select":{"max_size":3},"guard":{"mode":"strict","tolerance":0.01}}"#).unwrap();
    match r {
        ApiRequest::CreateSession { params } => {
            assert_eq!(params.select.unwrap().max_size, 3);
            assert_eq!(params.guard.unwrap().mode, GuardMode::Strict);
        }
        other => panic!("{other:?}"),
    }
    let r: ApiRequest = serde_json::from_str(r#"{"op":"guard","session":"s1","mode":"off","tolerance":0}"#).unwrap();
    assert!(matches!(r, ApiRequest::Guard { .. }));
}

#[test]
fn manager_dispatch_and_errors() {
    let mgr = SessionManager::new(workspace());
    let v = mgr
        .dispatch(&ApiRequest::CreateSession {
            params: CreateParams::default(),
        })
        .unwrap();
    assert_eq!(v["session_id"], "s1");
    assert_eq!(v["revision"], 0);
    let v = mgr
        .dispatch(&ApiRequest::CreateSession {
            params: CreateParams::default(),
        })
        .unwrap();
    assert_eq!(v["session_id"], "s2");
    let v = mgr
        .dispatch(&ApiRequest::ErrorsFilter {
            session: "s1".into(),
            on: true,
        })
        .unwrap();
    assert_eq!(v["revision"], 1);
    let v = mgr.dispatch(&ApiRequest::Perf { session: "s2".into() }).unwrap();
    assert_eq!(v["revision"], 0);
    let e = mgr.dispatch(&ApiRequest::Perf { session: "s9".into() }).unwrap_err();
    assert_eq!(e.status(), 404);
    let e = mgr
        .dispatch(&ApiRequest::Layout {
            session: "s1".into(),
            mode: "spiral".into(),
        })
        .unwrap_err();
    assert_eq!(e.status(), 400);
}

const SCRIPT: &str = r#"
# two sessions, a few edits
{"op":"create_session"}
{"op":"selection","session":"s1","ids":[0,1,2,3,4,5,6,7,8,9]}
{"op":"errors_filter","session":"s1","on":true}
{"op":"candidates","session":"s1"}
{"op":"toggle","session":"s1","model_id":0}
{"op":"toggle","session":"s1","model_id":4}
{"op":"frame","session":"s1","mode":"pca"}
{"op":"cv","session":"s1"}
{"op":"toggle","session":"s9","model_id":0}
not json
{"op":"create_session","select":{"hillclimb":"auc_cv","bags":3}}
{"op":"model_space","session":"s2","x":"acc","y":"div_q"}
"#;

#[test]
fn replay_is_deterministic() {
    let a = replay(workspace(), SCRIPT.as_bytes()).unwrap();
    let b = replay(workspace(), SCRIPT.as_bytes()).unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    assert_eq!(a.records.len(), 12);
    assert_eq!(a.sessions.len(), 2);
    let failed: Vec<usize> = a.records.iter().filter(|r| !r.ok).map(|r| r.line).collect();
    assert_eq!(failed.len(), 2);
    assert_eq!(a.records.iter().find(|r| !r.ok).unwrap().status, 404);
    // the toggle lines each advanced the revision, whichever way they went
    assert!(a.sessions[0].revision >= 4);
}

#[test]
fn concurrent_reads_see_committed_revisions() {
    let mgr = Arc::new(SessionManager::new(workspace()));
    mgr.create(&CreateParams::default()).unwrap();
    let outside = {
        let s = mgr.session("s1").unwrap();
        let g = s.read().unwrap();
        let found = (0..6).find(|m| !g.ensemble().members.contains(m)).unwrap();
        found
    };
    std::thread::scope(|scope| {
        let w = mgr.clone();
        scope.spawn(move || {
            for _ in 0..20 {
                w.dispatch(&ApiRequest::Toggle {
                    session: "s1".into(),
                    model_id: outside,
                })
                .unwrap();
            }
        });
        for _ in 0..2 {
            let r = mgr.clone();
            scope.spawn(move || {
                let mut last = 0;
                for _ in 0..50 {
                    let v = r.dispatch(&ApiRequest::Perf { session: "s1".into() }).unwrap();
                    let rev = v["revision"].as_u64().unwrap();
                    assert!(rev >= last);
                    // an even revision means the model is out again
                    let has = v["members"].as_array().unwrap().iter().any(|m| m["model_id"] == outside);
                    assert_eq!(has, rev % 2 == 1);
                    last = rev;
                }
            });
        }
    });
    let v = mgr.dispatch(&ApiRequest::Perf { session: "s1".into() }).unwrap();
    assert_eq!(v["revision"], 20);
}

#[test]
fn viz_sample_limits_frames() {
    let base = workspace();
    let config = WorkspaceConfig {
        viz_sample: Some(20),
        viz_seed: 4,
        ..base.config.clone()
    };
    let ws = Arc::new(Workspace::new(base.ds.clone(), base.lib.clone(), config).unwrap());
    let ids = ws.viz_ids().to_vec();
    assert_eq!(ids.len(), 20);
    assert!(ids.windows(2).all(|w| w[0] < w[1]));
    let s = Session::create(ws.clone(), "v".into(), &CreateParams::default()).unwrap();
    for mode in [LayoutMode::Attribute("color".into()), LayoutMode::Pca] {
        let f = s.frame(Some(&mode), None, None).unwrap();
        let got: Vec<usize> = f.frame.points.iter().map(|p| p.instance_id).collect();
        assert_eq!(got, ids);
        assert_eq!(f.density.total, 20);
        let errs = ids.iter().filter(|&&i| !s.ensemble().correct[i]).count();
        assert_eq!(f.errors_density.total as usize, errs);
    }
    // the sample is a function of the seed
    let again = Workspace::new(base.ds.clone(), base.lib.clone(), ws.config.clone()).unwrap();
    assert_eq!(again.viz_ids(), ids.as_slice());
}
