//! Synthetic embedding manifests for tests, benchmarks and the checked-in
//! fixtures under `tests/data`.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::dataset::{EmbeddingRecord, Field, Label, Manifest, Scenario};

#[derive(Debug, Clone)]
pub struct GaussianSpec {
    pub scenario: Scenario,
    pub per_class: usize,
    pub dim: usize,
    /// Bona fide samples are centred at `+shift * 1`, attacks at `-shift * 1`.
    pub shift: f64,
    /// Shuffle labels after drawing features, destroying any signal.
    pub random_labels: bool,
    /// Augmented copies per original (original plus small noise).
    pub augmentations: usize,
    pub seed: u64,
}

impl GaussianSpec {
    pub fn new(scenario: Scenario, per_class: usize, seed: u64) -> Self {
        Self {
            scenario,
            per_class,
            dim: crate::EMBEDDING_DIM,
            shift: 0.5,
            random_labels: false,
            augmentations: 0,
            seed,
        }
    }
}

const AUG_TAGS: [&str; 3] = ["rot10_bright", "hflip_contrast", "rot5_sat"];

fn draw(rng: &mut impl Rng, dim: usize, mean: f64) -> Vec<f32> {
    (0..dim)
        .map(|_| (mean + rng.sample::<f64, _>(StandardNormal)) as f32)
        .collect()
}

/// Two isotropic Gaussian clouds with unit covariance, one document per
/// original sample. Scenario `both` gets a face and a text record per
/// document, both drawn from the document's class.
pub fn gaussian_manifest(spec: &GaussianSpec) -> Manifest {
    let mut rng = crate::seed::rng(spec.seed);
    let mut labels: Vec<Label> = (0..2 * spec.per_class)
        .map(|i| if i % 2 == 0 { Label::Bonafide } else { Label::Attack })
        .collect();
    let mut records = Vec::new();
    let fields: &[Field] = match spec.scenario {
        Scenario::Face => &[Field::Face],
        Scenario::Text => &[Field::Text],
        Scenario::Both => &[Field::Face, Field::Text],
    };
    let mut drawn: Vec<(String, Label, Vec<Vec<f32>>)> = Vec::new();
    for (i, &label) in labels.iter().enumerate() {
        let mean = match label {
            Label::Bonafide => spec.shift,
            Label::Attack => -spec.shift,
        };
        let vectors = fields.iter().map(|_| draw(&mut rng, spec.dim, mean)).collect();
        drawn.push((format!("doc{i:04}"), label, vectors));
    }
    if spec.random_labels {
        labels.shuffle(&mut rng);
        for (d, l) in drawn.iter_mut().zip(&labels) {
            d.1 = *l;
        }
    }
    for (doc, label, vectors) in &drawn {
        for (field, vector) in fields.iter().zip(vectors) {
            let mut push = |aug: Option<&str>, vector: Vec<f32>| {
                let suffix = aug.map(|a| format!("-{a}")).unwrap_or_default();
                records.push(EmbeddingRecord {
                    sample_id: format!("{doc}-{field}{suffix}"),
                    document_id: doc.clone(),
                    field: *field,
                    scenario: spec.scenario,
                    label: *label,
                    aug: aug.map(str::to_string),
                    dim: spec.dim,
                    vector,
                });
            };
            push(None, vector.clone());
            for tag in AUG_TAGS.iter().cycle().take(spec.augmentations) {
                let jittered = vector
                    .iter()
                    .map(|&x| x + 0.05 * rng.sample::<f32, _>(StandardNormal))
                    .collect();
                push(Some(tag), jittered);
            }
        }
    }
    let mut manifest = Manifest::new(records);
    manifest
        .source_meta
        .insert("backbone".into(), "synthetic-gaussian".into());
    manifest.source_meta.insert("seed".into(), spec.seed.to_string());
    manifest.source_meta.insert("shift".into(), spec.shift.to_string());
    manifest
        .source_meta
        .insert("random_labels".into(), spec.random_labels.to_string());
    manifest
}
