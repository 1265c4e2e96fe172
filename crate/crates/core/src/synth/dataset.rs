use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::volb::{labels_to_bytes, read_labels, read_volume, volume_to_bytes};
use crate::field::{LabelMap, Volume};
use crate::manifest::sha256_hex;
use crate::models::{AttributeRecord, Sex};

use super::shapes::{PopulationSpec, Shape};
use super::LABEL_NAMES;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectMeta {
    pub shape: Shape,
    pub deform_seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Subject {
    pub id: String,
    pub attributes: AttributeRecord,
    pub image: Volume,
    pub labels: LabelMap,
    /// Voxel count per label.
    pub volumes: Vec<usize>,
    pub meta: SubjectMeta,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: PopulationSpec,
    pub subjects: Vec<Subject>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Vec<&Subject> {
        idx.iter().map(|&i| &self.subjects[i]).collect()
    }
}

/// Subject indices of a train/validation/test partition, each sorted.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Random partition of `n` subjects. Sizes are `round(f * n)` for train and
/// validation; test takes the rest.
pub fn split(n: usize, fractions: [f64; 3], seed: u64) -> Result<Split> {
    let sum: f64 = fractions.iter().sum();
    if (sum - 1.0).abs() > 1e-9 || fractions.iter().any(|f| !(0.0..=1.0).contains(f)) {
        return Err(Error::Config(format!(
            "split fractions {fractions:?} must be in [0, 1] and sum to 1"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((fractions[0] * n as f64).round() as usize).min(n);
    let n_val = ((fractions[1] * n as f64).round() as usize).min(n - n_train);
    let part = |a: usize, b: usize| {
        let mut v = order[a..b].to_vec();
        v.sort_unstable();
        v
    };
    Ok(Split {
        train: part(0, n_train),
        val: part(n_train, n_train + n_val),
        test: part(n_train + n_val, n),
    })
}

const MANIFEST: &str = "manifest.txt";
const ATTRIBUTES: &str = "attributes.csv";
const FORMAT: &str = "condatlas-dataset-1";

fn image_path(id: &str) -> String {
    format!("subjects/{id}_image.volb")
}

fn labels_path(id: &str) -> String {
    format!("subjects/{id}_labels.volb")
}

#[derive(Debug, Serialize, Deserialize)]
struct Row {
    id: String,
    age: f64,
    sex: Sex,
    vol_background: usize,
    vol_cortex: usize,
    vol_ventricle: usize,
    vol_hippocampus: usize,
    vol_midline: usize,
    r_brain: f64,
    r_cortex: f64,
    r_ventricle: f64,
    r_hippocampus: f64,
    deform_seed: u64,
}

/// Writes `manifest.txt`, `attributes.csv` and one image and label file per
/// subject under `dir`.
pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir.join("subjects")).map_err(|e| Error::io(dir, e))?;
    let mut files: Vec<(String, Vec<u8>)> = Vec::new();

    let mut w = csv::Writer::from_writer(Vec::new());
    for s in &ds.subjects {
        let v = &s.volumes;
        let m = &s.meta.shape;
        w.serialize(Row {
            id: s.id.clone(),
            age: s.attributes.age,
            sex: s.attributes.sex,
            vol_background: v[0],
            vol_cortex: v[1],
            vol_ventricle: v[2],
            vol_hippocampus: v[3],
            vol_midline: v[4],
            r_brain: m.brain,
            r_cortex: m.cortex,
            r_ventricle: m.ventricle,
            r_hippocampus: m.hippocampus,
            deform_seed: s.meta.deform_seed,
        })?;
    }
    let csv_bytes = w
        .into_inner()
        .map_err(|e| Error::format(dir.join(ATTRIBUTES), e.to_string()))?;
    files.push((ATTRIBUTES.to_string(), csv_bytes));

    for s in &ds.subjects {
        files.push((image_path(&s.id), volume_to_bytes(&s.image)));
        files.push((labels_path(&s.id), labels_to_bytes(&s.labels)));
    }
    for (name, bytes) in &files {
        let path = dir.join(name);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    }

    let spec = serde_json::to_string(&ds.spec).expect("spec serializes");
    let mut manifest = format!(
        "format = {FORMAT}\nsubjects = {}\nlabels = {}\nspec = {spec}\n\n[checksums]\n",
        ds.subjects.len(),
        LABEL_NAMES.join(",")
    );
    for (name, bytes) in &files {
        manifest.push_str(&format!("{name} = {}\n", sha256_hex(bytes)));
    }
    let path = dir.join(MANIFEST);
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
}

struct Manifest {
    spec: PopulationSpec,
    subjects: usize,
    checksums: Vec<(String, String)>,
}

fn parse_manifest(text: &str, path: &Path) -> Result<Manifest> {
    let bad = |m: String| Error::format(path, m);
    let mut format = None;
    let mut spec = None;
    let mut subjects = None;
    let mut checksums = Vec::new();
    let mut in_sums = false;
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
        if line == "[checksums]" {
            in_sums = true;
            continue;
        }
        let (k, v) = line
            .split_once(" = ")
            .ok_or_else(|| bad(format!("malformed line {line:?}")))?;
        if in_sums {
            checksums.push((k.to_string(), v.to_string()));
            continue;
        }
        match k {
            "format" => format = Some(v.to_string()),
            "subjects" => subjects = Some(v.parse().map_err(|_| bad(format!("bad subject count {v:?}")))?),
            "spec" => spec = Some(serde_json::from_str(v).map_err(|e| bad(format!("spec: {e}")))?),
            "labels" => {
                if v != LABEL_NAMES.join(",") {
                    return Err(bad(format!("unexpected label vocabulary {v:?}")));
                }
            }
            _ => return Err(bad(format!("unknown key {k:?}"))),
        }
    }
    if format.as_deref() != Some(FORMAT) {
        return Err(bad(format!("not a dataset manifest (format {format:?})")));
    }
    Ok(Manifest {
        spec: spec.ok_or_else(|| bad("missing spec".into()))?,
        subjects: subjects.ok_or_else(|| bad("missing subject count".into()))?,
        checksums,
    })
}

fn read_checked(dir: &Path, name: &str, sums: &[(String, String)]) -> Result<(PathBuf, Vec<u8>)> {
    let path = dir.join(name);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let want = sums
        .iter()
        .find(|(n, _)| n == name)
        .ok_or_else(|| Error::format(dir.join(MANIFEST), format!("no checksum for {name}")))?;
    if sha256_hex(&bytes) != want.1 {
        return Err(Error::format(&path, "checksum mismatch"));
    }
    Ok((path, bytes))
}

/// Loads and verifies a directory written by [`save_dataset`].
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let mpath = dir.join(MANIFEST);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest = parse_manifest(&text, &mpath)?;
    let (apath, bytes) = read_checked(dir, ATTRIBUTES, &manifest.checksums)?;
    let mut rows = Vec::new();
    for r in csv::Reader::from_reader(bytes.as_slice()).deserialize::<Row>() {
        rows.push(r.map_err(|e| Error::format(&apath, e.to_string()))?);
    }
    if rows.len() != manifest.subjects {
        return Err(Error::format(
            &apath,
            format!("{} rows, manifest lists {} subjects", rows.len(), manifest.subjects),
        ));
    }
    let mut subjects = Vec::with_capacity(rows.len());
    for r in rows {
        let (ip, _) = read_checked(dir, &image_path(&r.id), &manifest.checksums)?;
        let (lp, _) = read_checked(dir, &labels_path(&r.id), &manifest.checksums)?;
        let image = read_volume(&ip)?;
        let labels = read_labels(&lp, LABEL_NAMES.len())?;
        let volumes = vec![
            r.vol_background,
            r.vol_cortex,
            r.vol_ventricle,
            r.vol_hippocampus,
            r.vol_midline,
        ];
        if labels.counts() != volumes {
            return Err(Error::format(
                &apath,
                format!("volumes of {} disagree with its label file", r.id),
            ));
        }
        subjects.push(Subject {
            id: r.id,
            attributes: AttributeRecord::new(r.age, r.sex),
            image,
            labels,
            volumes,
            meta: SubjectMeta {
                shape: Shape {
                    brain: r.r_brain,
                    cortex: r.r_cortex,
                    ventricle: r.r_ventricle,
                    hippocampus: r.r_hippocampus,
                },
                deform_seed: r.deform_seed,
            },
        });
    }
    Ok(Dataset {
        spec: manifest.spec,
        subjects,
    })
}
