//! Per-seed benchmark runs over every variant and auxiliary experiment, and the
//! direction checks applied across seeds.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::intervention::{
    faithfulness, greedy_curve, intervene_segmentation, organ_ablation, with_interaction_column,
    zeroing_report, AblationRow, ConceptSet, FaithfulnessMode, FaithfulnessReport, GreedyCurve,
    SegmentationIntervention, Selection, ZeroingReport,
};
use crate::metrics::{mean_std, MeanStd};
use crate::pipeline::{
    assemble, report_chain, resample_split, run_chain, summarize, train_components, ChainOutput,
    EvalReport, ModelBundle, Profile, Result, StageRecord, Variant,
};
use crate::predictor::rows;
use crate::schema::ConceptSchema;
use crate::synth::{derive_seed, Dataset, GeoScan};

pub const ABLATION_ORGANS: [&str; 4] = ["thalamus", "csp", "stomach", "vein"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentOptions {
    pub variants: Vec<Variant>,
    pub greedy: bool,
    pub ablation_organs: Vec<String>,
    pub faithfulness: bool,
}

impl Default for ExperimentOptions {
    fn default() -> Self {
        Self {
            variants: Variant::ALL.to_vec(),
            greedy: true,
            ablation_organs: ABLATION_ORGANS.iter().map(|s| s.to_string()).collect(),
            faithfulness: true,
        }
    }
}

impl ExperimentOptions {
    /// Everything except the end-to-end baseline, which no check depends on.
    pub fn without_standard() -> Self {
        Self {
            variants: Variant::ALL
                .into_iter()
                .filter(|&v| v != Variant::Standard)
                .collect(),
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedReport {
    pub seed: u64,
    pub profile: String,
    pub profile_fingerprint: String,
    pub variants: Vec<EvalReport>,
    pub stages: BTreeMap<Variant, Vec<StageRecord>>,
    pub segmentation_intervention: Option<SegmentationIntervention>,
    pub zeroing: Option<ZeroingReport>,
    pub greedy: Vec<GreedyCurve>,
    pub ablation: Vec<AblationRow>,
    pub faithfulness: Vec<FaithfulnessReport>,
}

impl SeedReport {
    pub fn variant(&self, v: Variant) -> Option<&EvalReport> {
        self.variants.iter().find(|r| r.variant == v)
    }
}

fn subset(chain: &ChainOutput, ids: &[usize]) -> ChainOutput {
    ChainOutput {
        labels: chain
            .labels
            .as_ref()
            .map(|l| ids.iter().map(|&i| l[i].clone()).collect()),
        concepts: chain.concepts.as_ref().map(|c| rows(c, ids)),
        outputs: ids.iter().map(|&i| chain.outputs[i].clone()).collect(),
    }
}

/// Trains every requested variant on the seed's split and runs the auxiliary
/// experiments on its test split.
pub fn run_seed(
    profile: &Profile,
    schema: &ConceptSchema,
    data: &mut Dataset,
    seed: u64,
    opts: &ExperimentOptions,
) -> Result<SeedReport> {
    resample_split(data, schema.num_classes(), seed);
    let data = &*data;
    let geo = GeoScan::new(schema.clone(), profile.synth.clone())?;
    let mut wanted = opts.variants.clone();
    let aux = opts.greedy || opts.faithfulness || !opts.ablation_organs.is_empty();
    if aux {
        for v in [Variant::Pcbm, Variant::Cbm] {
            if !wanted.contains(&v) {
                wanted.push(v);
            }
        }
    }
    let components = train_components(profile, schema, data, &wanted, seed)?;
    let bundles: BTreeMap<Variant, ModelBundle> = wanted
        .iter()
        .map(|&v| Ok((v, assemble(v, &components, profile, schema, data, seed)?)))
        .collect::<Result<_>>()?;
    let test = &data.splits.test;
    let all: Vec<usize> = (0..data.samples.len()).collect();
    let mut full_chains: BTreeMap<Variant, ChainOutput> = BTreeMap::new();
    for v in [Variant::Pcbm, Variant::Cbm] {
        if let Some(b) = bundles.get(&v) {
            full_chains.insert(v, run_chain(b, data, &all)?);
        }
    }
    let mut report = SeedReport {
        seed,
        profile: profile.name.clone(),
        profile_fingerprint: profile.fingerprint(),
        variants: Vec::new(),
        stages: bundles
            .iter()
            .map(|(&v, b)| (v, b.stages.clone()))
            .collect(),
        segmentation_intervention: None,
        zeroing: None,
        greedy: Vec::new(),
        ablation: Vec::new(),
        faithfulness: Vec::new(),
    };
    let mut test_chains: BTreeMap<Variant, ChainOutput> = BTreeMap::new();
    for &v in &opts.variants {
        let b = &bundles[&v];
        let chain = match full_chains.get(&v) {
            Some(c) => subset(c, test),
            None => run_chain(b, data, test)?,
        };
        report.variants.push(report_chain(b, data, test, &chain));
        test_chains.insert(v, chain);
    }
    let pcbm = &bundles[&Variant::Pcbm];
    let pcbm_test = test_chains
        .get(&Variant::Pcbm)
        .cloned()
        .unwrap_or_else(|| subset(&full_chains[&Variant::Pcbm], test));
    report.segmentation_intervention =
        Some(intervene_segmentation(pcbm, data, test, Some(&pcbm_test))?);
    report.zeroing = Some(zeroing_report(pcbm, data, test, &pcbm_test)?);
    if opts.greedy {
        for v in [Variant::Pcbm, Variant::Cbm] {
            let b = &bundles[&v];
            let chain = &full_chains[&v];
            let concepts =
                |ids: &[usize]| rows(chain.concepts.as_ref().expect("conceiver present"), ids);
            let eval = ConceptSet::new(schema, data, test, concepts(test));
            let val = ConceptSet::new(schema, data, &data.splits.val, concepts(&data.splits.val));
            let eval_out = subset(chain, test).outputs;
            report.greedy.push(greedy_curve(b, &eval, &eval_out, None)?);
            report
                .greedy
                .push(greedy_curve(b, &eval, &eval_out, Some(&val))?);
        }
    }
    if !opts.ablation_organs.is_empty() {
        let organs: Vec<&str> = opts.ablation_organs.iter().map(String::as_str).collect();
        report.ablation =
            organ_ablation(&[pcbm, &bundles[&Variant::Cbm]], &geo, data, test, &organs)?;
    }
    if opts.faithfulness {
        let pc = full_chains[&Variant::Pcbm]
            .concepts
            .clone()
            .expect("conceiver present");
        let cc = full_chains[&Variant::Cbm]
            .concepts
            .clone()
            .expect("conceiver present");
        let cbar: Vec<f64> = full_chains[&Variant::Pcbm]
            .outputs
            .iter()
            .map(|o| o.interaction.expect("interaction enabled"))
            .collect();
        let augmented = with_interaction_column(&pc, &cbar);
        let fseed = derive_seed(seed, 0xfa17, 0);
        for (mode, plain) in [
            (FaithfulnessMode::PerModel, &cc),
            (FaithfulnessMode::Paired, &pc),
        ] {
            report.faithfulness.push(faithfulness(
                mode,
                plain,
                &augmented,
                data,
                schema.num_classes(),
                &profile.predictor,
                schema,
                fseed,
            )?);
        }
    }
    Ok(report)
}

/// Deterministic JSON of a seed report.
pub fn report_json(report: &SeedReport) -> String {
    serde_json::to_string_pretty(report).expect("report serializes")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub profile: String,
    pub seeds: Vec<u64>,
    pub per_seed: Vec<SeedReport>,
    pub summary: BTreeMap<Variant, BTreeMap<String, MeanStd>>,
    pub curves: Vec<CurveSummary>,
}

/// Greedy intervention curve averaged over seeds: point `k` is the OA after
/// `k` concepts were replaced with ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveSummary {
    pub variant: Variant,
    pub selection: Selection,
    pub oa: Vec<MeanStd>,
}

pub fn summarize_curves(reports: &[SeedReport]) -> Vec<CurveSummary> {
    let mut groups: Vec<((Variant, Selection), Vec<&GreedyCurve>)> = Vec::new();
    for c in reports.iter().flat_map(|r| &r.greedy) {
        match groups
            .iter_mut()
            .find(|(k, _)| *k == (c.variant, c.selection))
        {
            Some((_, v)) => v.push(c),
            None => groups.push(((c.variant, c.selection), vec![c])),
        }
    }
    groups
        .into_iter()
        .map(|((variant, selection), curves)| {
            let len = curves.iter().map(|c| c.oa.len()).min().unwrap_or(0);
            let oa = (0..len)
                .map(|k| mean_std(&curves.iter().map(|c| c.oa[k]).collect::<Vec<_>>()))
                .collect();
            CurveSummary {
                variant,
                selection,
                oa,
            }
        })
        .collect()
}

/// Runs every seed on a freshly generated dataset and aggregates the variants.
pub fn run_benchmark(
    profile: &Profile,
    schema: &ConceptSchema,
    seeds: &[u64],
    opts: &ExperimentOptions,
    mut progress: impl FnMut(&SeedReport),
) -> Result<BenchmarkReport> {
    let mut data = profile.dataset(schema)?;
    let mut per_seed = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let r = run_seed(profile, schema, &mut data, seed, opts)?;
        progress(&r);
        per_seed.push(r);
    }
    Ok(BenchmarkReport {
        profile: profile.name.clone(),
        seeds: seeds.to_vec(),
        summary: summarize_variants(&per_seed),
        curves: summarize_curves(&per_seed),
        per_seed,
    })
}

pub fn summarize_variants(reports: &[SeedReport]) -> BTreeMap<Variant, BTreeMap<String, MeanStd>> {
    let mut out = BTreeMap::new();
    if let Some(first) = reports.first() {
        for r in &first.variants {
            let per: Vec<EvalReport> = reports
                .iter()
                .filter_map(|s| s.variant(r.variant).cloned())
                .collect();
            out.insert(r.variant, summarize(&per));
        }
    }
    out
}

/// Outcome of one cross-seed direction check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckOutcome {
    pub id: u8,
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.into_iter().collect();
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

fn metric(r: &SeedReport, v: Variant, f: impl Fn(&EvalReport) -> f64) -> Option<f64> {
    r.variant(v).map(f)
}

fn outcome(id: u8, name: &str, passed: bool, detail: String) -> CheckOutcome {
    CheckOutcome {
        id,
        name: name.to_string(),
        passed,
        detail,
    }
}

fn seed_list(reports: &[SeedReport], f: impl Fn(&SeedReport) -> String) -> String {
    reports
        .iter()
        .map(|r| format!("{}:{}", r.seed, f(r)))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Benchmark ordering: mean MA gap of at least two points, and OA no worse
/// on at least 80% of paired seeds.
pub fn check_ordering(reports: &[SeedReport]) -> CheckOutcome {
    let name = "PCBM vs CBM ordering";
    let ma = |v| {
        mean(
            reports
                .iter()
                .filter_map(|r| metric(r, v, |e| e.classification.ma)),
        )
    };
    let oa_wins = reports
        .iter()
        .filter(|r| {
            matches!(
                (metric(r, Variant::Pcbm, |e| e.classification.oa), metric(r, Variant::Cbm, |e| e.classification.oa)),
                (Some(p), Some(c)) if p >= c
            )
        })
        .count();
    let gap = ma(Variant::Pcbm) - ma(Variant::Cbm);
    let need = (reports.len() * 8).div_ceil(10);
    outcome(
        5,
        name,
        !reports.is_empty() && gap >= 0.02 && oa_wins >= need,
        format!(
            "mean MA {:.4} vs {:.4} (gap {:+.4}, need >= 0.02); OA >= CBM on {oa_wins}/{} seeds (need {need})",
            ma(Variant::Pcbm),
            ma(Variant::Cbm),
            gap,
            reports.len()
        ),
    )
}

/// Interaction ablation and the SEG-ONLY accuracy ranking. The ranking half
/// passes either way; a deviation is reported with seed-level accuracies.
pub fn check_ablation(reports: &[SeedReport]) -> CheckOutcome {
    let ma = |v| {
        mean(
            reports
                .iter()
                .filter_map(|r| metric(r, v, |e| e.classification.ma)),
        )
    };
    let oa = |v| {
        mean(
            reports
                .iter()
                .filter_map(|r| metric(r, v, |e| e.classification.oa)),
        )
    };
    let ci = ma(Variant::Pcbm);
    let no_ci = ma(Variant::PcbmNoCi);
    let ranked: Vec<Variant> = Variant::ALL
        .into_iter()
        .filter(|&v| reports.first().is_some_and(|r| r.variant(v).is_some()))
        .collect();
    let top = ranked
        .iter()
        .copied()
        .fold(None::<(Variant, f64)>, |best, v| {
            let x = oa(v);
            match best {
                Some((_, b)) if b >= x => best,
                _ => Some((v, x)),
            }
        })
        .map(|(v, _)| v);
    let seg_only_top = top == Some(Variant::SegOnly);
    let mut detail = format!("mean MA with interaction {ci:.4} vs without {no_ci:.4}; ");
    if seg_only_top {
        detail.push_str("SEG-ONLY has the highest mean OA");
    } else {
        let per_seed = seed_list(reports, |r| {
            ranked
                .iter()
                .map(|&v| {
                    format!(
                        "{}={:.4}",
                        v,
                        metric(r, v, |e| e.classification.oa).unwrap_or(f64::NAN)
                    )
                })
                .collect::<Vec<_>>()
                .join(",")
        });
        let means = ranked
            .iter()
            .map(|&v| format!("{v}={:.4}", oa(v)))
            .collect::<Vec<_>>()
            .join(", ");
        detail.push_str(&format!(
            "deviation: highest mean OA is {} not seg-only (means {means}; per seed OA {per_seed})",
            top.map_or("none".to_string(), |v| v.to_string())
        ));
    }
    outcome(
        6,
        "interaction ablation",
        !reports.is_empty() && ci >= no_ci,
        detail,
    )
}

pub fn check_endpoints(reports: &[SeedReport]) -> CheckOutcome {
    let curves: Vec<&GreedyCurve> = reports.iter().flat_map(|r| &r.greedy).collect();
    let bad: Vec<String> = reports
        .iter()
        .flat_map(|r| {
            r.greedy
                .iter()
                .filter(|c| !(c.endpoint_identical && c.start_identical))
                .map(move |c| format!("seed {} {} {:?}", r.seed, c.variant, c.selection))
        })
        .collect();
    outcome(
        7,
        "greedy endpoint identity",
        !curves.is_empty() && bad.is_empty(),
        format!(
            "{} curves, {} mismatched {:?}",
            curves.len(),
            bad.len(),
            bad
        ),
    )
}

pub fn check_segmentation_intervention(reports: &[SeedReport]) -> CheckOutcome {
    let si: Vec<(u64, &SegmentationIntervention)> = reports
        .iter()
        .filter_map(|r| r.segmentation_intervention.as_ref().map(|s| (r.seed, s)))
        .collect();
    let degraded: Vec<u64> = si
        .iter()
        .filter(|(_, s)| s.degrades())
        .map(|(seed, _)| *seed)
        .collect();
    let improved = si.iter().filter(|(_, s)| s.improves()).count();
    let need = (reports.len() * 7).div_ceil(10);
    let per_seed = seed_list(reports, |r| {
        r.segmentation_intervention
            .as_ref()
            .map_or("-".into(), |s| {
                let (b, i) = (s.baseline.concepts.unwrap(), s.intervened.concepts.unwrap());
                format!(
                    "coa {:.4}->{:.4} rmse {:.4}->{:.4}",
                    b.coa, i.coa, b.rmse, i.rmse
                )
            })
    });
    outcome(
        8,
        "segmentation intervention",
        si.len() == reports.len() && !si.is_empty() && degraded.is_empty() && improved >= need,
        format!(
            "degraded on {degraded:?}; improved on {improved}/{} (need {need}); {per_seed}",
            reports.len()
        ),
    )
}

pub fn check_ablation_bias(reports: &[SeedReport]) -> CheckOutcome {
    let mut organs: Vec<String> = Vec::new();
    for r in reports {
        for a in &r.ablation {
            if !organs.contains(&a.organ) {
                organs.push(a.organ.clone());
            }
        }
    }
    let mut ok = 0;
    let mut parts = Vec::new();
    for o in &organs {
        let vals = |v: Variant, ablated: bool| {
            mean(reports.iter().flat_map(|r| {
                r.ablation
                    .iter()
                    .filter(|a| &a.organ == o)
                    .filter_map(|a| {
                        if ablated { &a.ablated } else { &a.control }
                            .get(&v)
                            .map(|m| m.mean)
                    })
                    .collect::<Vec<_>>()
            }))
        };
        let (p, c) = (vals(Variant::Pcbm, true), vals(Variant::Cbm, true));
        let pass = p <= 0.1 && p < c;
        ok += usize::from(pass);
        parts.push(format!(
            "{o}: pcbm {p:.4} cbm {c:.4} (controls {:.3}/{:.3}) {}",
            vals(Variant::Pcbm, false),
            vals(Variant::Cbm, false),
            if pass { "ok" } else { "miss" }
        ));
    }
    let need = 3.min(organs.len());
    outcome(
        9,
        "organ ablation",
        organs.len() >= 4 && ok >= need,
        format!(
            "{ok}/{} organs meet both bounds (need {need}); {}",
            organs.len(),
            parts.join("; ")
        ),
    )
}

pub fn check_faithfulness(reports: &[SeedReport]) -> CheckOutcome {
    let rows: Vec<(u64, &FaithfulnessReport)> = reports
        .iter()
        .filter_map(|r| {
            r.faithfulness
                .iter()
                .find(|f| f.mode == FaithfulnessMode::PerModel)
                .map(|f| (r.seed, f))
        })
        .collect();
    let wins = rows
        .iter()
        .filter(|(_, f)| f.with_interaction.ma >= f.concepts_only.ma)
        .count();
    let need = (reports.len() * 8).div_ceil(10);
    let paired_wins = reports
        .iter()
        .flat_map(|r| &r.faithfulness)
        .filter(|f| {
            f.mode == FaithfulnessMode::Paired && f.with_interaction.ma >= f.concepts_only.ma
        })
        .count();
    let per_seed = rows
        .iter()
        .map(|(s, f)| format!("{s}:{:.4}/{:.4}", f.concepts_only.ma, f.with_interaction.ma))
        .collect::<Vec<_>>()
        .join(" ");
    outcome(
        10,
        "faithfulness",
        rows.len() == reports.len() && !rows.is_empty() && wins >= need,
        format!(
            "MA with interaction >= without on {wins}/{} seeds (need {need}); same-concept pairing {paired_wins}/{}; {per_seed}",
            reports.len(),
            reports.len()
        ),
    )
}

/// Every cross-seed direction check.
pub fn check_all(reports: &[SeedReport]) -> Vec<CheckOutcome> {
    vec![
        check_ordering(reports),
        check_ablation(reports),
        check_endpoints(reports),
        check_segmentation_intervention(reports),
        check_ablation_bias(reports),
        check_faithfulness(reports),
    ]
}
