use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stepback_core::evaluation::api::{router, AppState, SessionDetail, SessionSummary, ADMIN_HEADER};
use stepback_core::evaluation::{
    aggregate_results, build_ab_sessions, global_variance, heatmap_image, render_heatmap,
    ChoiceRequest, ConversionKind, Part, ResponseStore, SampleManifest, SampleSection, SessionSet,
};
use stepback_core::features::Spectrogram;
use stepback_core::Error;
use tower::ServiceExt;

/// Mean and variance by a plain double loop over (utterance, frame) per bin.
fn variance_oracle(specs: &[Spectrogram], bin: usize) -> f64 {
    let mut vals = Vec::new();
    for s in specs {
        for t in 0..s.n_frames() {
            vals.push(s.values[[t, bin]]);
        }
    }
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n
}

fn random_spec(rng: &mut ChaCha8Rng, frames: usize, bins: usize) -> Spectrogram {
    let values = Array2::from_shape_fn((frames, bins), |_| rng.random_range(-20.0..5.0));
    Spectrogram::new(values, 256).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn global_variance_matches_loop_oracle(seed in any::<u64>(), n in 1usize..5, bins in 1usize..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let specs: Vec<_> = (0..n)
            .map(|_| { let f = rng.random_range(1..40); random_spec(&mut rng, f, bins) })
            .collect();
        let p = global_variance(&specs, ConversionKind::M2F).unwrap();
        prop_assert_eq!(p.variances.len(), bins);
        for k in 0..bins {
            prop_assert!(p.variances[k] >= 0.0);
            prop_assert!((p.variances[k] - variance_oracle(&specs, k)).abs() <= 1e-9);
        }
    }
}

#[test]
fn heatmap_files() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let s = random_spec(&mut rng, 128, 513);
    let a = dir.path().join("a.png");
    let b = dir.path().join("b.png");
    render_heatmap(&s, &a).unwrap();
    render_heatmap(&s, &b).unwrap();
    let bytes = std::fs::read(&a).unwrap();
    assert!(!bytes.is_empty());
    assert_eq!(bytes, std::fs::read(&b).unwrap());

    let floor = Spectrogram::new(Array2::from_elem((128, 513), 1e-10f64.ln()), 256).unwrap();
    let img = heatmap_image(&floor).unwrap();
    let first = *img.get_pixel(0, 0);
    assert!(img.pixels().all(|p| *p == first));

    let bad = dir.path().join("missing").join("x.png");
    assert!(matches!(render_heatmap(&s, &bad), Err(Error::Io { .. })));
}

fn sample_manifest(dir: &Path, n: usize) -> SampleManifest {
    let file = |name: String| {
        let p = dir.join(name);
        std::fs::write(&p, b"RIFF").unwrap();
        p
    };
    SampleManifest {
        sections: (0..n)
            .map(|i| SampleSection {
                source: file(format!("src{i}.wav")),
                target: file(format!("tgt{i}.wav")),
                systems: BTreeMap::from([
                    ("baseline".to_string(), file(format!("base{i}.wav"))),
                    ("stepback".to_string(), file(format!("step{i}.wav"))),
                ]),
            })
            .collect(),
    }
}

#[test]
fn sessions_cover_every_part_and_blind_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let m = sample_manifest(dir.path(), 20);
    let set = build_ab_sessions(&m, 20, 3).unwrap();
    assert_eq!(set.sessions.len(), 20);
    let items: usize = set
        .sessions
        .iter()
        .flat_map(|s| &s.sections)
        .map(|s| s.parts.len())
        .sum();
    assert_eq!(items, 60);
    assert_eq!(build_ab_sessions(&m, 20, 3).unwrap(), set);

    let mut incomplete = m.clone();
    incomplete.sections[4].systems.remove("baseline");
    assert!(matches!(build_ab_sessions(&incomplete, 20, 3), Err(Error::Validation(_))));
    assert!(matches!(build_ab_sessions(&m, 21, 3), Err(Error::Validation(_))));
    let mut missing = m.clone();
    missing.sections[0].target = dir.path().join("nope.wav");
    assert!(matches!(build_ab_sessions(&missing, 20, 3), Err(Error::Validation(_))));
}

#[test]
fn a_first_frequency_is_fair() {
    let dir = tempfile::tempdir().unwrap();
    let m = sample_manifest(dir.path(), 1);
    let n = 1000.0;
    let hits = (0..1000u64)
        .filter(|seed| {
            let set = build_ab_sessions(&m, 1, *seed).unwrap();
            set.key.sections["s01"][0].a_system == "baseline"
        })
        .count() as f64;
    let sigma = (n * 0.25f64).sqrt();
    assert!((hits - n / 2.0).abs() <= 3.0 * sigma, "{hits} of 1000");
}

fn choice(session: &str, part: &str, c: &str, subject: &str) -> ChoiceRequest {
    ChoiceRequest {
        session_id: session.into(),
        section: 0,
        part: part.into(),
        choice: c.into(),
        subject_id: subject.into(),
    }
}

#[test]
fn responses_are_at_most_once_and_durable() {
    let dir = tempfile::tempdir().unwrap();
    let set = build_ab_sessions(&sample_manifest(dir.path(), 2), 2, 1).unwrap();
    let log = dir.path().join("responses.jsonl");
    {
        let store = ResponseStore::open(&log).unwrap();
        store.record_choice(&set, &choice("s01", "naturalness", "A", "u1")).unwrap();
        assert!(matches!(
            store.record_choice(&set, &choice("s01", "naturalness", "B", "u1")),
            Err(Error::Conflict(_))
        ));
        assert!(matches!(
            store.record_choice(&set, &choice("s01", "content", "C", "u1")),
            Err(Error::Validation(_))
        ));
        assert!(matches!(
            store.record_choice(&set, &choice("s09", "content", "A", "u1")),
            Err(Error::NotFound(_))
        ));
        let mut wrong_section = choice("s01", "content", "A", "u1");
        wrong_section.section = 3;
        assert!(matches!(store.record_choice(&set, &wrong_section), Err(Error::NotFound(_))));
        store.record_choice(&set, &choice("s01", "naturalness", "A", "u2")).unwrap();
    }
    let reopened = ResponseStore::open(&log).unwrap();
    assert_eq!(reopened.records().len(), 2);
    assert!(matches!(
        reopened.record_choice(&set, &choice("s01", "naturalness", "A", "u2")),
        Err(Error::Conflict(_))
    ));
}

/// 20 sessions; subject `u{j}` picks the stepback sample on naturalness for
/// the first `stepback_wins` sessions and the baseline sample otherwise.
fn responses_with(set: &SessionSet, store: &ResponseStore, stepback_wins: usize) {
    for (i, s) in set.sessions.iter().enumerate() {
        let k = &set.key.sections[&s.session_id][0];
        let want = if i < stepback_wins { "stepback" } else { "baseline" };
        let c = if k.a_system == want { "A" } else { "B" };
        store
            .record_choice(set, &choice(&s.session_id, "naturalness", c, "u1"))
            .unwrap();
    }
}

#[test]
fn aggregation_unblinds_and_tests() {
    let dir = tempfile::tempdir().unwrap();
    let set = build_ab_sessions(&sample_manifest(dir.path(), 20), 20, 9).unwrap();

    let even = ResponseStore::open(&dir.path().join("even.jsonl")).unwrap();
    responses_with(&set, &even, 10);
    let t = aggregate_results(&set, &even.records()).unwrap();
    let nat = t.part(Part::Naturalness);
    assert_eq!(nat.counts["stepback"], 10);
    assert_eq!(nat.proportions["stepback"], 0.5);
    assert_eq!(nat.p_value, 1.0);
    assert_eq!(t.part(Part::Content).total, 0);

    let sweep = ResponseStore::open(&dir.path().join("sweep.jsonl")).unwrap();
    responses_with(&set, &sweep, 20);
    let mut records = sweep.records();
    let t = aggregate_results(&set, &records).unwrap();
    let nat = t.part(Part::Naturalness);
    assert_eq!(nat.proportions["stepback"], 1.0);
    assert!((nat.p_value - 2f64.powi(-19)).abs() < 1e-15);

    records.reverse();
    records.rotate_left(7);
    assert_eq!(aggregate_results(&set, &records).unwrap(), t);

    assert!(matches!(aggregate_results(&set, &[]), Err(Error::Validation(_))));
}

async fn call(app: &axum::Router, req: Request<Body>) -> (StatusCode, Vec<u8>) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let body = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, body)
}

fn post(body: &ChoiceRequest) -> Request<Body> {
    Request::post("/api/choices")
        .header("content-type", "application/json")
        .body(Body::from(serde_json::to_vec(body).unwrap()))
        .unwrap()
}

#[tokio::test]
async fn http_contract() {
    let dir = tempfile::tempdir().unwrap();
    let set = Arc::new(build_ab_sessions(&sample_manifest(dir.path(), 2), 2, 4).unwrap());
    let store = Arc::new(ResponseStore::open(&dir.path().join("r.jsonl")).unwrap());
    let app = router(AppState {
        sessions: set.clone(),
        store,
        admin_token: Arc::new("secret".into()),
    });

    let (st, body) = call(&app, Request::get("/api/sessions").body(Body::empty()).unwrap()).await;
    assert_eq!(st, StatusCode::OK);
    let list: Vec<SessionSummary> = serde_json::from_slice(&body).unwrap();
    assert_eq!(list.len(), 2);

    let (st, body) = call(
        &app,
        Request::get("/api/sessions/s01?subject=u1").body(Body::empty()).unwrap(),
    )
    .await;
    assert_eq!(st, StatusCode::OK);
    let text = String::from_utf8(body.clone()).unwrap();
    for secret in ["stepback", "baseline", dir.path().to_str().unwrap(), ".wav"] {
        assert!(!text.contains(secret), "session detail leaks {secret}");
    }
    let detail: SessionDetail = serde_json::from_slice(&body).unwrap();
    assert_eq!(detail.sections[0].parts.len(), 3);
    assert!(detail.sections[0].parts.iter().all(|p| !p.answered));

    let token = &detail.sections[0].audio.a;
    let (st, bytes) = call(
        &app,
        Request::get(format!("/api/audio/{token}")).body(Body::empty()).unwrap(),
    )
    .await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(bytes, b"RIFF");
    let (st, _) = call(&app, Request::get("/api/audio/deadbeef").body(Body::empty()).unwrap()).await;
    assert_eq!(st, StatusCode::NOT_FOUND);

    let ok = choice("s01", "content", "B", "u1");
    let (st, body) = call(&app, post(&ok)).await;
    assert_eq!(st, StatusCode::CREATED);
    assert!(!String::from_utf8(body).unwrap().contains("stepback"));
    assert_eq!(call(&app, post(&ok)).await.0, StatusCode::CONFLICT);
    assert_eq!(
        call(&app, post(&choice("s01", "content", "Z", "u1"))).await.0,
        StatusCode::BAD_REQUEST
    );
    assert_eq!(
        call(&app, post(&choice("s77", "content", "A", "u1"))).await.0,
        StatusCode::NOT_FOUND
    );

    let (_, body) = call(
        &app,
        Request::get("/api/sessions/s01?subject=u1").body(Body::empty()).unwrap(),
    )
    .await;
    let detail: SessionDetail = serde_json::from_slice(&body).unwrap();
    let answered: Vec<bool> = detail.sections[0].parts.iter().map(|p| p.answered).collect();
    assert_eq!(answered, vec![false, true, false]);

    let (st, _) = call(&app, Request::get("/api/admin/aggregate").body(Body::empty()).unwrap()).await;
    assert_eq!(st, StatusCode::UNAUTHORIZED);
    let (st, body) = call(
        &app,
        Request::get("/api/admin/aggregate")
            .header(ADMIN_HEADER, "secret")
            .body(Body::empty())
            .unwrap(),
    )
    .await;
    assert_eq!(st, StatusCode::OK);
    let table: stepback_core::evaluation::AggregateTable = serde_json::from_slice(&body).unwrap();
    let k = set.section_key("s01", 0).unwrap();
    assert_eq!(table.part(Part::Content).counts[&k.b_system], 1);
}
