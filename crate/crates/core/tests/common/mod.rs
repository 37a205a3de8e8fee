#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use zero_tta::io::{write_embedding_file, DatasetManifest, SampleRecord};
use zero_tta::{EmbeddingMatrix64, Matrix64};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normalize(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

pub fn unit_rows(rows: &[Vec<f64>]) -> EmbeddingMatrix64 {
    let rows: Vec<Vec<f64>> = rows.iter().map(|r| normalize(r)).collect();
    EmbeddingMatrix64::from_rows(&rows).unwrap()
}

pub fn random_unit_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> EmbeddingMatrix64 {
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
        .collect();
    unit_rows(&rows)
}

/// Cosine-scale logits in [-1, 1]; rows are redrawn until their entries are distinct.
pub fn distinct_logits(rng: &mut ChaCha8Rng, n: usize, c: usize) -> Matrix64 {
    let mut data = Vec::with_capacity(n * c);
    while data.len() < n * c {
        let row: Vec<f64> = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
        if row_gap(&row) > 0.0 {
            data.extend(row);
        }
    }
    Matrix64::new(n, c, data).unwrap()
}

fn row_gap(r: &[f64]) -> f64 {
    let mut s = r.to_vec();
    s.sort_by(f64::total_cmp);
    s.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min)
}

pub fn min_row_gap(logits: &Matrix64) -> f64 {
    logits.iter_rows().map(row_gap).fold(f64::INFINITY, f64::min)
}

pub struct FixtureSample {
    pub id: String,
    pub label: usize,
    pub views: Vec<Vec<f64>>,
}

/// Writes views (one shared file), per-template text files and a manifest into `dir`.
pub fn write_fixture(
    dir: &Path,
    class_names: &[&str],
    templates: &[Vec<Vec<f64>>],
    samples: &[FixtureSample],
    temperature: f64,
) -> PathBuf {
    let n_views = samples[0].views.len();
    let mut all_rows = Vec::new();
    let mut records = Vec::new();
    for s in samples {
        assert_eq!(s.views.len(), n_views);
        records.push(SampleRecord {
            id: s.id.clone(),
            label: s.label,
            path: "views.zteb".into(),
            offset: all_rows.len(),
        });
        all_rows.extend(s.views.iter().cloned());
    }
    write_embedding_file(&unit_rows(&all_rows), dir.join("views.zteb")).unwrap();
    let mut text_files = Vec::new();
    for (t, rows) in templates.iter().enumerate() {
        let name = format!("text_t{t}.zteb");
        write_embedding_file(&unit_rows(rows), dir.join(&name)).unwrap();
        text_files.push(name);
    }
    let manifest = DatasetManifest {
        dataset: "fixture".into(),
        num_classes: class_names.len(),
        class_names: class_names.iter().map(|s| s.to_string()).collect(),
        temperature,
        n_views,
        samples: records,
        text_embeddings: text_files,
        provenance: Default::default(),
    };
    let path = dir.join("manifest.json");
    fs::write(&path, manifest.to_json().unwrap()).unwrap();
    path
}

/// Random dataset: `n_samples` samples of `n_views` views around a noisy class
/// prototype, two templates, so random ties occur regularly at small γN.
pub fn random_fixture(
    dir: &Path,
    seed: u64,
    n_samples: usize,
    n_views: usize,
    n_classes: usize,
    dim: usize,
) -> PathBuf {
    let mut r = rng(seed);
    let gauss =
        |r: &mut ChaCha8Rng, d: usize| -> Vec<f64> { (0..d).map(|_| r.sample::<f64, _>(StandardNormal)).collect() };
    let protos: Vec<Vec<f64>> = (0..n_classes).map(|_| normalize(&gauss(&mut r, dim))).collect();
    let templates: Vec<Vec<Vec<f64>>> = (0..2)
        .map(|_| {
            protos
                .iter()
                .map(|p| {
                    let noise = gauss(&mut r, dim);
                    p.iter().zip(&noise).map(|(a, b)| a + 0.2 * b).collect()
                })
                .collect()
        })
        .collect();
    let samples: Vec<FixtureSample> = (0..n_samples)
        .map(|s| {
            let label = r.random_range(0..n_classes);
            let views = (0..n_views)
                .map(|_| {
                    let noise = gauss(&mut r, dim);
                    protos[label].iter().zip(&noise).map(|(a, b)| a + 0.45 * b).collect()
                })
                .collect();
            FixtureSample {
                id: format!("s{s:04}"),
                label,
                views,
            }
        })
        .collect();
    let names: Vec<String> = (0..n_classes).map(|c| format!("class{c}")).collect();
    let names: Vec<&str> = names.iter().map(String::as_str).collect();
    write_fixture(dir, &names, &templates, &samples, 0.01)
}
