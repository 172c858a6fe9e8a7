#![allow(dead_code)]

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use gozone_core::dataset::{DatasetManifest, SplitSpec, VideoMeta};
use gozone_core::parsing::{render_turn1, render_turn2};
use gozone_core::{BoundingBox, FrameSample, SurgicalPhase, Turn2Output};
use gozone_harness::endpoint::{image_data_url, EndpointConfig, HttpBackend, RetryPolicy};
use gozone_harness::orchestrator::{RunContext, TranscriptStore};
use gozone_harness::stub::{first_image, turn_of, Responder, StubReply};
use tempfile::TempDir;

pub struct Fixture {
    pub dir: TempDir,
    pub manifest: DatasetManifest,
    pub manifest_path: PathBuf,
}

impl Fixture {
    pub fn root(&self) -> &Path {
        self.dir.path()
    }

    pub fn image_url(&self, sample: &FrameSample) -> String {
        image_data_url(&sample.image_ref, self.root()).unwrap()
    }
}

pub fn entity_set(phase: SurgicalPhase) -> Vec<String> {
    match phase {
        SurgicalPhase::PreparationOfGoZone => vec!["gallbladder".into(), "adhesions".into()],
        SurgicalPhase::DissectionOfCalotsTriangle => vec!["cystic duct".into(), "cystic artery".into()],
        SurgicalPhase::ClipAndDivide => vec!["clip".into(), "cystic duct".into()],
        SurgicalPhase::GallbladderDissection => vec!["liver bed".into(), "gallbladder".into()],
    }
}

/// `n` samples in one test-split video, phases cycling A-D, each with its
/// own image file.
pub fn fixture(n: usize) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let mut records = Vec::new();
    for i in 0..n {
        let phase = SurgicalPhase::ALL[i % 4];
        let image_ref = format!("frames/f{i:04}.png");
        let path = dir.path().join(&image_ref);
        fs::create_dir_all(path.parent().unwrap()).unwrap();
        fs::write(&path, format!("frame {i}")).unwrap();
        let x = (i as i64 * 37) % 600;
        let y = (i as i64 * 53) % 600;
        records.push(FrameSample {
            sample_id: format!("vid01_{:04}", i * 5),
            video_id: "vid01".into(),
            frame_index: i as u64 * 5,
            image_ref,
            image_width_px: 1920,
            image_height_px: 1080,
            phase,
            go_zone: BoundingBox::new(x, y, x + 200 + (i as i64 % 7) * 10, y + 150).unwrap(),
            anatomic_text: "Anatomy".into(),
            exposure_text: "Exposure".into(),
            next_action_text: "Action".into(),
            risk_text: "Risk".into(),
            entity_set: entity_set(phase),
        });
    }
    let manifest = DatasetManifest {
        records,
        videos: vec![VideoMeta { video_id: "vid01".into(), fps_sampled: 0.2, n_samples: Some(n), patient_meta: None }],
        split: SplitSpec { train: Default::default(), test: ["vid01".to_string()].into() },
    };
    let manifest_path = dir.path().join("manifest.jsonl");
    fs::write(&manifest_path, manifest.to_jsonl()).unwrap();
    Fixture { dir, manifest, manifest_path }
}

/// A well-formed reasoning answer mentioning the sample's entities.
pub fn answer(sample: &FrameSample, b: Option<BoundingBox>) -> String {
    let entities = sample.entity_set.join(" and ");
    render_turn2(&Turn2Output {
        thinking_text: Some("Looking at the frame.".into()),
        location_text: Some(format!("Region around the {entities}.")),
        exposure_text: Some("Adequate exposure.".into()),
        next_action_text: Some("Continue dissection.".into()),
        risk_text: Some("Avoid the common bile duct.".into()),
        predicted_box: b,
        ..Default::default()
    })
}

pub fn perfect_answers(sample: &FrameSample) -> (String, String) {
    (render_turn1(sample.phase), answer(sample, Some(sample.go_zone)))
}

#[derive(Clone)]
pub struct Script {
    pub turn1: StubReply,
    pub turn2: StubReply,
}

impl Script {
    pub fn text(t1: impl Into<String>, t2: impl Into<String>) -> Self {
        Self { turn1: StubReply::Text(t1.into()), turn2: StubReply::Text(t2.into()) }
    }
}

/// Responder keyed by the image URL in the request.
pub fn scripted(scripts: HashMap<String, Script>) -> Responder {
    Arc::new(move |req| {
        let Some(script) = first_image(req).and_then(|img| scripts.get(img)) else {
            return StubReply::Status(404);
        };
        if turn_of(req) == 1 {
            script.turn1.clone()
        } else {
            script.turn2.clone()
        }
    })
}

pub fn script_all(fx: &Fixture, f: impl Fn(usize, &FrameSample) -> Script) -> HashMap<String, Script> {
    fx.manifest
        .records
        .iter()
        .enumerate()
        .map(|(i, s)| (fx.image_url(s), f(i, s)))
        .collect()
}

pub fn endpoint(base_url: &str, concurrency: usize) -> EndpointConfig {
    EndpointConfig {
        base_url: base_url.to_string(),
        model_name: "stub".into(),
        timeout_seconds: 10.0,
        max_concurrency: concurrency,
        retry_policy: RetryPolicy { max_attempts: 2, backoff_base_seconds: 0.0 },
        ..EndpointConfig::default()
    }
}

pub fn context(fx: &Fixture, base_url: &str, concurrency: usize, store: Option<&Path>) -> RunContext<HttpBackend> {
    let endpoint = endpoint(base_url, concurrency);
    RunContext {
        backend: HttpBackend::new(&endpoint).unwrap(),
        endpoint,
        tool: Default::default(),
        rewards: Default::default(),
        image_root: fx.root().to_path_buf(),
        store: store.map(|p| TranscriptStore::open(p).unwrap()),
    }
}

/// Per-system reasoning outputs for a review session.
pub fn system_outputs(systems: &[&str], n: usize) -> BTreeMap<String, Vec<(String, Turn2Output)>> {
    systems
        .iter()
        .enumerate()
        .map(|(k, s)| {
            let list = (0..n)
                .map(|i| {
                    let t = Turn2Output {
                        location_text: Some(format!("Candidate {k} location for frame {i}")),
                        exposure_text: Some("Exposure ok".into()),
                        next_action_text: Some("Retract".into()),
                        risk_text: Some("Bile duct".into()),
                        predicted_box: Some(BoundingBox::new(10 * k as i64, 10, 300, 300).unwrap()),
                        ..Default::default()
                    };
                    (format!("vid01_{:04}", i * 5), t)
                })
                .collect();
            (s.to_string(), list)
        })
        .collect()
}
