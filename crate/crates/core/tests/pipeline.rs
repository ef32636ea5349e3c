use std::collections::BTreeMap;
use std::sync::OnceLock;

use pcbm::experiment::{check_endpoints, report_json, run_seed, ExperimentOptions};
use pcbm::intervention::{
    greedy_curve, intervene_segmentation, payload, rule_based_zeroing, substitute, ConceptSet,
    Edit, InterventionSession, MaskSource, Recomputed,
};
use pcbm::numerics::Tensor;
use pcbm::observer::Provenance;
use pcbm::pipeline::{
    assemble, audit, load_bundle, run_chain, save_bundle, train_components, Components,
    MaskOverride, ModelBundle, Overrides, PipelineError, Profile, Variant,
};
use pcbm::schema::ConceptSchema;
use pcbm::synth::Dataset;

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
        let components = train_components(&profile, &schema, &data, &Variant::ALL, 3).unwrap();
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
    assemble(v, &f.components, &f.profile, &f.schema, &f.data, 3).unwrap()
}

#[test]
fn every_variant_trains_wires_and_audits() {
    let f = fixture();
    for v in Variant::ALL {
        let b = bundle(v);
        audit(&b).unwrap();
        assert_eq!(b.observer.is_some(), v.uses_observer());
        let out = run_chain(&b, &f.data, &f.data.splits.test[..5]).unwrap();
        assert_eq!(out.outputs.len(), 5);
        assert_eq!(out.concepts.is_some(), v.conceiver_input().is_some());
        for o in &out.outputs {
            assert_eq!(o.omega.is_some(), v.interaction());
            assert!((o.probabilities.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn audit_rejects_foreign_and_shared_parameters() {
    let mut b = bundle(Variant::Pcbm);
    b.stages[1]
        .parameters
        .push("observer.enc0.conv1.weight".into());
    assert!(matches!(audit(&b), Err(PipelineError::Leakage(_))));
    let mut b = bundle(Variant::Pcbm);
    b.stages[2].parameters.push("conceiver.head.weight".into());
    assert!(matches!(audit(&b), Err(PipelineError::Leakage(_))));
    let mut b = bundle(Variant::Pcbm);
    b.stages[1].stack_provenance = Some(Provenance::Predicted);
    assert!(matches!(audit(&b), Err(PipelineError::Provenance(_))));
    let mut b = bundle(Variant::Cbm);
    b.stages.swap(0, 1);
    assert!(audit(&b).is_err());
}

#[test]
fn test_path_refuses_ground_truth_stacks() {
    let f = fixture();
    let b = bundle(Variant::Pcbm);
    let gt = pcbm::conceiver::ground_truth_stack(&f.data, 0, f.schema.n());
    assert!(matches!(
        b.concepts_from_stacks(&[&gt]),
        Err(PipelineError::Provenance(_))
    ));
    let edited = pcbm::intervention::ground_truth_stacks(&b, &f.data, &[0]);
    assert!(b.concepts_from_stacks(&[&edited[0]]).is_ok());
}

#[test]
fn infer_matches_batched_chain_and_validates_overrides() {
    let f = fixture();
    let b = bundle(Variant::Pcbm);
    let id = f.data.splits.test[0];
    let s = &f.data.samples[id];
    let one = b.infer(&s.image, None, &Overrides::default()).unwrap();
    let batch = run_chain(&b, &f.data, &[id]).unwrap();
    assert_eq!(one.output.logits, batch.outputs[0].logits);
    assert_eq!(
        one.stack.as_ref().unwrap().provenance,
        Provenance::Predicted
    );
    let mut ov = Overrides::default();
    ov.concepts.insert(0, 1.5);
    assert!(matches!(
        b.infer(&s.image, None, &ov),
        Err(PipelineError::Override { .. })
    ));
    let mut ov = Overrides::default();
    ov.masks.insert(1, MaskOverride::GroundTruth);
    assert!(b.infer(&s.image, None, &ov).is_err());
    let r = b.infer(&s.image, Some(&s.mask), &ov).unwrap();
    assert_eq!(r.segmentation.unwrap().provenance, Provenance::Edited);
    let mut ov = Overrides::default();
    ov.masks.insert(99, MaskOverride::Clear);
    assert!(b.infer(&s.image, None, &ov).is_err());
    let cbm = bundle(Variant::Cbm);
    let mut ov = Overrides::default();
    ov.masks.insert(1, MaskOverride::Clear);
    assert!(cbm.infer(&s.image, None, &ov).is_err());
    assert!(b
        .infer(&Tensor::zeros(&[1, 4, 4]), None, &Overrides::default())
        .is_err());
}

#[test]
fn bundle_checkpoints_round_trip() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    for v in Variant::ALL {
        let b = bundle(v);
        let path = dir.path().join(format!("{v}.bundle"));
        save_bundle(&b, &path).unwrap();
        let back = load_bundle(&path, Some(v)).unwrap();
        assert_eq!(back.parameter_fingerprint(), b.parameter_fingerprint());
        assert_eq!(back.stages, b.stages);
        let ids = &f.data.splits.test[..4];
        let x = run_chain(&b, &f.data, ids).unwrap();
        let y = run_chain(&back, &f.data, ids).unwrap();
        assert_eq!(x.outputs, y.outputs);
    }
    let path = dir.path().join("pcbm.bundle");
    assert!(matches!(
        load_bundle(&path, Some(Variant::Cbm)),
        Err(PipelineError::VariantMismatch { .. })
    ));
    let bytes = std::fs::read(&path).unwrap();
    for cut in [4, 20, bytes.len() / 2, bytes.len() - 1] {
        let p = dir.path().join("cut.bundle");
        std::fs::write(&p, &bytes[..cut]).unwrap();
        assert!(load_bundle(&p, None).is_err(), "truncated at {cut}");
    }
}

#[test]
fn sessions_are_pure_isolated_and_downstream_minimal() {
    let f = fixture();
    let b = bundle(Variant::Pcbm);
    let before = b.parameter_fingerprint();
    let id = f.data.splits.test[1];
    let mut a = InterventionSession::open(&b, &f.data, id).unwrap();
    let other = InterventionSession::open(&b, &f.data, id).unwrap();
    let name = f.schema.concepts[2].name.clone();
    let edit = Edit::Concept {
        concept: name.clone(),
        value: 0.9,
    };
    let seg_before = a.current.segmentation.clone();
    a.apply(&b, &f.data, edit.clone()).unwrap();
    assert_eq!(a.audit[0].recomputed, Recomputed::Predictor);
    assert_eq!(a.current.segmentation, seg_before);
    let mut ov = Overrides::default();
    ov.concepts.insert(2, 0.9);
    let direct = b.infer(&f.data.samples[id].image, None, &ov).unwrap();
    assert_eq!(a.current.output, direct.output);
    let once = a.current.output.clone();
    a.apply(&b, &f.data, edit).unwrap();
    assert_eq!(a.current.output, once);
    assert_eq!(other.current.output, other.base.output);
    assert!(a
        .apply(
            &b,
            &f.data,
            Edit::Concept {
                concept: name,
                value: 1.5
            }
        )
        .is_err());
    assert_eq!(a.audit.len(), 2);
    assert!(a
        .apply(
            &b,
            &f.data,
            Edit::Mask {
                segment: "nope".into(),
                source: MaskSource::Clear
            }
        )
        .is_err());
    a.apply(
        &b,
        &f.data,
        Edit::Clear {
            segment: None,
            concept: None,
        },
    )
    .unwrap();
    assert_eq!(a.current.output, a.base.output);
    assert_eq!(b.parameter_fingerprint(), before);
    assert!(InterventionSession::open(&bundle(Variant::SegOnly), &f.data, id).is_err());
}

#[test]
fn ground_truth_mask_edits_match_segmentation_intervention() {
    let f = fixture();
    let b = bundle(Variant::Pcbm);
    let id = f.data.splits.test[2];
    let mut s = InterventionSession::open(&b, &f.data, id).unwrap();
    for seg in &f.schema.segmentation {
        s.apply(
            &b,
            &f.data,
            Edit::Mask {
                segment: seg.clone(),
                source: MaskSource::GroundTruth,
            },
        )
        .unwrap();
    }
    assert_eq!(
        s.audit.last().unwrap().recomputed,
        Recomputed::ConceiverAndPredictor
    );
    let stacks = pcbm::intervention::ground_truth_stacks(&b, &f.data, &[id]);
    let c = b.concepts_from_stacks(&[&stacks[0]]).unwrap();
    assert_eq!(s.current.concepts.as_ref().unwrap(), c.data());
    let r = intervene_segmentation(&b, &f.data, &[id], None).unwrap();
    assert_eq!(
        r.intervened.classification.oa,
        f64::from(u8::from(s.current.class == f.data.samples[id].label))
    );
    let p = payload(&b, &f.data, id, &s.current, &s.overrides).unwrap();
    assert_eq!(p.concepts.len(), f.schema.d());
    assert_eq!(p.segments.len(), f.schema.n());
    assert!(p.segments.iter().all(|x| x.overridden));
    assert!(intervene_segmentation(&bundle(Variant::SegOnly), &f.data, &[id], None).is_err());
    assert!(intervene_segmentation(&bundle(Variant::Cbm), &f.data, &[id], None).is_err());
}

#[test]
fn greedy_curve_endpoints_are_exact() {
    let f = fixture();
    for v in [Variant::Pcbm, Variant::Cbm] {
        let b = bundle(v);
        let test = &f.data.splits.test;
        let chain = run_chain(&b, &f.data, test).unwrap();
        let set = ConceptSet::new(&f.schema, &f.data, test, chain.concepts.clone().unwrap());
        let c = greedy_curve(&b, &set, &chain.outputs, None).unwrap();
        assert!(c.endpoint_identical && c.start_identical);
        assert_eq!(c.oa.len(), f.schema.d() + 1);
        let mut order = c.order.clone();
        order.sort();
        order.dedup();
        assert_eq!(order.len(), f.schema.d());
        let all: Vec<usize> = (0..f.schema.d()).collect();
        let full = substitute(&set.predicted, &set.truth, &set.applicable, &all);
        let pred: Vec<usize> = b
            .classify(&full)
            .unwrap()
            .iter()
            .map(|o| o.class())
            .collect();
        let hits = pred.iter().zip(&set.labels).filter(|(p, l)| p == l).count();
        assert_eq!(*c.oa.last().unwrap(), hits as f64 / test.len() as f64);
    }
}

#[test]
fn substitution_keeps_inapplicable_entries() {
    let pred = Tensor::new(vec![2, 2], vec![0.3, 0.4, 0.5, 0.6]);
    let truth = Tensor::new(vec![2, 2], vec![0.99, 0.0, 0.01, 0.7]);
    let out = substitute(&pred, &truth, &[true, false, false, true], &[0, 1]);
    assert_eq!(out.data(), &[0.99, 0.4, 0.5, 0.7]);
}

#[test]
fn zeroing_fires_only_on_absent_organs_with_ground_truth_masks() {
    let f = fixture();
    let th = f.profile.zeroing_pixels;
    let ids: Vec<usize> = (0..f.data.samples.len()).collect();
    let labels: Vec<Vec<u8>> = ids
        .iter()
        .map(|&i| f.data.samples[i].mask.clone())
        .collect();
    let d = f.schema.d();
    let ones = Tensor::new(vec![ids.len(), d], vec![1.0; ids.len() * d]);
    let (out, events) = rule_based_zeroing(&f.schema, &labels, &ones, th);
    let mut fired = BTreeMap::new();
    for e in &events {
        fired.insert((e.row, e.concept.clone()), ());
    }
    for (r, &i) in ids.iter().enumerate() {
        for c in 0..d {
            if let Some(o) = f.schema.visibility_organ(c) {
                let absent = !f.data.samples[i].mask.contains(&(o as u8));
                let key = (r, f.schema.concepts[c].name.clone());
                assert_eq!(fired.contains_key(&key), absent);
                assert_eq!(out.data()[r * d + c] == 0.0, absent);
            } else {
                assert_eq!(out.data()[r * d + c], 1.0);
            }
        }
    }
    let (_, none) = rule_based_zeroing(&f.schema, &labels, &ones, 0.0);
    assert!(none.is_empty());
}

#[test]
fn seed_runs_are_byte_identical() {
    let f = fixture();
    let mut opts = ExperimentOptions::without_standard();
    opts.ablation_organs = vec!["stomach".into()];
    let mut d1 = f.data.clone();
    let mut d2 = f.data.clone();
    let a = run_seed(&f.profile, &f.schema, &mut d1, 5, &opts).unwrap();
    let b = run_seed(&f.profile, &f.schema, &mut d2, 5, &opts).unwrap();
    assert_eq!(report_json(&a), report_json(&b));
    assert!(check_endpoints(std::slice::from_ref(&a)).passed);
    assert_eq!(a.greedy.len(), 4);
    assert_eq!(a.faithfulness.len(), 2);
    assert_eq!(a.variants.len(), 5);
}
