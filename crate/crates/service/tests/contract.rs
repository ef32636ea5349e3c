use std::collections::BTreeMap;
use std::sync::{Arc, OnceLock};
use std::time::Duration;

use pcbm::intervention::{
    ground_truth_chain, ground_truth_concept, payload, Edit, MaskSource, Recomputed,
};
use pcbm::pipeline::{
    assemble, train_components, Components, ModelBundle, Overrides, Profile, Variant,
};
use pcbm::schema::ConceptSchema;
use pcbm::synth::{Dataset, Split};
use pcbm_client::{Client, ClientError};
use pcbm_service::{router, AppState};

struct Fixture {
    profile: Profile,
    schema: ConceptSchema,
    data: Dataset,
    components: Components,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let profile = Profile::tiny();
        let schema = ConceptSchema::geoscan();
        let data = profile.dataset(&schema).unwrap();
        let components = train_components(
            &profile,
            &schema,
            &data,
            &[Variant::Pcbm, Variant::SegOnly],
            4,
        )
        .unwrap();
        Fixture {
            profile,
            schema,
            data,
            components,
        }
    })
}

fn bundle(v: Variant) -> ModelBundle {
    let f = fixture();
    assemble(v, &f.components, &f.profile, &f.schema, &f.data, 4).unwrap()
}

async fn start_with(bundle: ModelBundle, data: Dataset, ttl: Duration) -> (Client, Arc<AppState>) {
    let state = AppState::new(bundle, data, ttl);
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    let app = router(state.clone());
    tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
    (Client::new(format!("http://{addr}")), state)
}

async fn start() -> Client {
    start_with(
        bundle(Variant::Pcbm),
        fixture().data.clone(),
        Duration::from_secs(600),
    )
    .await
    .0
}

fn rejection<T: std::fmt::Debug>(r: Result<T, ClientError>) -> (u16, String) {
    match r.unwrap_err() {
        ClientError::Api { status, code, .. } => (status.as_u16(), code),
        e => panic!("transport error {e}"),
    }
}

fn concept_name(i: usize) -> String {
    fixture().schema.concepts[i].name.clone()
}

fn test_id() -> usize {
    fixture().data.splits.test[0]
}

#[tokio::test]
async fn sample_listing_follows_the_splits() {
    let f = fixture();
    let c = start().await;
    let test = c.samples(Some(Split::Test)).await.unwrap();
    assert_eq!(test.len(), f.data.splits.test.len());
    assert!(test.windows(2).all(|w| w[0].id < w[1].id));
    assert!(test.iter().all(|s| s.split == Split::Test));
    assert_eq!(c.samples(None).await.unwrap().len(), f.data.samples.len());
    let t = c.thumbnail(test[0].id).await.unwrap();
    assert_eq!((t.height, t.width), (f.data.height, f.data.width));

    let raw = reqwest::get(format!("{}/samples?split=holdout", c.base()))
        .await
        .unwrap();
    assert_eq!(raw.status().as_u16(), 400);
    let body: serde_json::Value = raw.json().await.unwrap();
    assert_eq!(body["error"]["code"], "unknown_split");

    let mut data = f.data.clone();
    data.splits.val.clear();
    let (empty, _) = start_with(bundle(Variant::Pcbm), data, Duration::from_secs(600)).await;
    assert!(empty.samples(Some(Split::Val)).await.unwrap().is_empty());
}

#[tokio::test]
async fn open_session_exposes_both_bottlenecks() {
    let f = fixture();
    let c = start().await;
    let id = test_id();
    let a = c.open_session(id).await.unwrap();
    let p = &a.payload;
    assert_eq!(p.concepts.len(), f.schema.d());
    assert_eq!(p.segments.len(), f.schema.n());
    assert_eq!(p.image.len(), f.data.height * f.data.width);
    assert!(p
        .segments
        .iter()
        .all(|s| s.probabilities.len() == p.image.len()));
    assert_eq!(
        p.omega.as_ref().unwrap().len(),
        f.schema.binary_indices().len()
    );
    assert!(p.interaction.is_some());
    assert_eq!(p.classes.len(), f.schema.num_classes());
    assert!(a.audit.is_empty());

    let b = c.open_session(id).await.unwrap();
    assert_ne!(a.session_id, b.session_id);
    assert_eq!(a.payload, b.payload);
    assert_eq!(c.session(&a.session_id).await.unwrap().payload, a.payload);

    assert_eq!(
        rejection(c.open_session(f.data.samples.len()).await),
        (404, "unknown_sample".into())
    );
    let (seg_only, _) = start_with(
        bundle(Variant::SegOnly),
        f.data.clone(),
        Duration::from_secs(600),
    )
    .await;
    assert_eq!(
        rejection(seg_only.open_session(id).await),
        (422, "not_intervenable".into())
    );
}

#[tokio::test]
async fn concept_edit_matches_single_override_inference() {
    let f = fixture();
    let b = bundle(Variant::Pcbm);
    let c = start().await;
    let id = test_id();
    let s = c.open_session(id).await.unwrap();
    let i = f.schema.binary_indices()[0];
    let after = c
        .edit(
            &s.session_id,
            &Edit::Concept {
                concept: concept_name(i),
                value: 0.92,
            },
        )
        .await
        .unwrap();

    let ov = Overrides {
        masks: BTreeMap::new(),
        concepts: BTreeMap::from([(i, 0.92)]),
    };
    let sample = &f.data.samples[id];
    let expected = b.infer(&sample.image, Some(&sample.mask), &ov).unwrap();
    let want = payload(&b, &f.data, id, &expected, &ov).unwrap();
    assert_eq!(after.payload, want);
    // A concept edit never touches the segmentation bottleneck.
    assert_eq!(after.payload.segments, s.payload.segments);
    assert_eq!(after.audit.len(), 1);
    assert_eq!(after.audit[0].recomputed, Recomputed::Predictor);

    let gt = c
        .edit(
            &s.session_id,
            &Edit::ConceptGroundTruth {
                concept: concept_name(i),
            },
        )
        .await
        .unwrap();
    assert_eq!(
        gt.payload.concepts[i].value,
        ground_truth_concept(&f.schema, &f.data, id, i)
    );
}

#[tokio::test]
async fn ground_truth_mask_edits_match_segmentation_intervention() {
    let f = fixture();
    let b = bundle(Variant::Pcbm);
    let c = start().await;
    let id = test_id();
    let s = c.open_session(id).await.unwrap();
    let mut last = None;
    for seg in &f.schema.segmentation {
        let v = c
            .edit(
                &s.session_id,
                &Edit::Mask {
                    segment: seg.clone(),
                    source: MaskSource::GroundTruth,
                },
            )
            .await
            .unwrap();
        assert_eq!(
            v.audit.last().unwrap().recomputed,
            Recomputed::ConceiverAndPredictor
        );
        last = Some(v);
    }
    let p = last.unwrap().payload;
    let chain = ground_truth_chain(&b, &f.data, &[id]).unwrap();
    let concepts: Vec<f64> = p.concepts.iter().map(|c| c.value).collect();
    assert_eq!(concepts, chain.concepts.unwrap().data());
    let probs: Vec<f64> = p.classes.iter().map(|c| c.probability).collect();
    assert_eq!(probs, chain.outputs[0].probabilities);
    assert_eq!(p.interaction, chain.outputs[0].interaction);
}

#[tokio::test]
async fn edits_are_idempotent_and_isolated() {
    let c = start().await;
    let id = test_id();
    let a = c.open_session(id).await.unwrap();
    let b = c.open_session(id).await.unwrap();
    let edit = Edit::Mask {
        segment: fixture().schema.segmentation[1].clone(),
        source: MaskSource::Clear,
    };
    let once = c.edit(&a.session_id, &edit).await.unwrap();
    let twice = c.edit(&a.session_id, &edit).await.unwrap();
    assert_eq!(once.payload, twice.payload);
    assert_eq!(twice.audit.len(), 2);
    assert_eq!(twice.audit[1].recomputed, Recomputed::Nothing);
    assert_eq!(c.session(&b.session_id).await.unwrap().payload, b.payload);

    let cleared = c
        .edit(
            &a.session_id,
            &Edit::Clear {
                segment: None,
                concept: None,
            },
        )
        .await
        .unwrap();
    assert_eq!(cleared.payload, a.payload);
}

#[tokio::test]
async fn invalid_edits_are_rejected_with_codes() {
    let c = start().await;
    let s = c.open_session(test_id()).await.unwrap();
    let sid = &s.session_id;
    let cases = [
        (
            Edit::Concept {
                concept: concept_name(0),
                value: 1.5,
            },
            "out_of_range",
        ),
        (
            Edit::Concept {
                concept: "no_such_concept".into(),
                value: 0.5,
            },
            "unknown_concept",
        ),
        (
            Edit::Mask {
                segment: "no_such_organ".into(),
                source: MaskSource::Clear,
            },
            "unknown_segment",
        ),
        (
            Edit::Mask {
                segment: fixture().schema.segmentation[1].clone(),
                source: MaskSource::Layer {
                    values: vec![0.5; 3],
                },
            },
            "invalid_edit",
        ),
    ];
    for (edit, want) in cases {
        assert_eq!(rejection(c.edit(sid, &edit).await), (422, want.to_string()));
    }
    // Rejected edits leave the session untouched.
    let now = c.session(sid).await.unwrap();
    assert_eq!(now.payload, s.payload);
    assert!(now.audit.is_empty());

    let raw = reqwest::Client::new()
        .post(format!("{}/sessions/{sid}/edits", c.base()))
        .header("content-type", "application/json")
        .body(r#"{"type":"paint"}"#)
        .send()
        .await
        .unwrap();
    assert_eq!(raw.status().as_u16(), 422);
    let body: serde_json::Value = raw.json().await.unwrap();
    assert_eq!(body["error"]["code"], "invalid_edit");
}

#[tokio::test]
async fn sessions_close_and_expire() {
    let c = start().await;
    let s = c.open_session(test_id()).await.unwrap();
    c.close(&s.session_id).await.unwrap();
    assert_eq!(
        rejection(c.session(&s.session_id).await),
        (404, "unknown_session".into())
    );
    assert_eq!(
        rejection(c.close(&s.session_id).await),
        (404, "unknown_session".into())
    );

    let (short, state) = start_with(
        bundle(Variant::Pcbm),
        fixture().data.clone(),
        Duration::from_millis(50),
    )
    .await;
    let s = short.open_session(test_id()).await.unwrap();
    assert_eq!(state.session_count(), 1);
    tokio::time::sleep(Duration::from_millis(120)).await;
    assert_eq!(
        rejection(short.session(&s.session_id).await),
        (404, "unknown_session".into())
    );
    assert_eq!(state.session_count(), 0);
}
