//! Dataset manifest, clinical-metadata encoding, fold assignment and class weights.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Number of diagnosis labels.
pub const N_CLASSES: usize = 6;
/// Width of an encoded clinical vector: 1 age slot + 15 region slots + 6 boolean pairs.
pub const N_CLI: usize = 28;
pub const AGE_SLOT: usize = 0;
pub const REGION_OFFSET: usize = 1;
pub const FLAG_OFFSET: usize = REGION_OFFSET + BodyRegion::ALL.len();
pub const DEFAULT_AGE_SCALE: f64 = 100.0;

/// Exact header of the manifest file.
pub const MANIFEST_HEADER: [&str; 12] = [
    "lesion_id",
    "patient_id",
    "image_path",
    "diagnosis",
    "age",
    "region",
    "itch",
    "bleed",
    "hurt",
    "grew",
    "changed",
    "elevation",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Diagnosis {
    Ack,
    Bcc,
    Mel,
    Nev,
    Scc,
    Sek,
}

impl Diagnosis {
    pub const ALL: [Diagnosis; N_CLASSES] = [
        Diagnosis::Ack,
        Diagnosis::Bcc,
        Diagnosis::Mel,
        Diagnosis::Nev,
        Diagnosis::Scc,
        Diagnosis::Sek,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn token(self) -> &'static str {
        match self {
            Diagnosis::Ack => "ack",
            Diagnosis::Bcc => "bcc",
            Diagnosis::Mel => "mel",
            Diagnosis::Nev => "nev",
            Diagnosis::Scc => "scc",
            Diagnosis::Sek => "sek",
        }
    }

    /// Upper-case abbreviation used in reports.
    pub fn abbrev(self) -> &'static str {
        match self {
            Diagnosis::Ack => "ACK",
            Diagnosis::Bcc => "BCC",
            Diagnosis::Mel => "MEL",
            Diagnosis::Nev => "NEV",
            Diagnosis::Scc => "SCC",
            Diagnosis::Sek => "SEK",
        }
    }
}

impl fmt::Display for Diagnosis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.abbrev())
    }
}

impl FromStr for Diagnosis {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s.trim().to_ascii_lowercase();
        Self::ALL
            .into_iter()
            .find(|d| d.token() == t)
            .ok_or_else(|| format!("unknown label `{s}`"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BodyRegion {
    Face,
    Scalp,
    Nose,
    Lips,
    Ears,
    Neck,
    Chest,
    Abdomen,
    Back,
    Arm,
    Forearm,
    Hand,
    Thigh,
    Shin,
    Foot,
}

impl BodyRegion {
    pub const ALL: [BodyRegion; 15] = [
        BodyRegion::Face,
        BodyRegion::Scalp,
        BodyRegion::Nose,
        BodyRegion::Lips,
        BodyRegion::Ears,
        BodyRegion::Neck,
        BodyRegion::Chest,
        BodyRegion::Abdomen,
        BodyRegion::Back,
        BodyRegion::Arm,
        BodyRegion::Forearm,
        BodyRegion::Hand,
        BodyRegion::Thigh,
        BodyRegion::Shin,
        BodyRegion::Foot,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn token(self) -> &'static str {
        match self {
            BodyRegion::Face => "face",
            BodyRegion::Scalp => "scalp",
            BodyRegion::Nose => "nose",
            BodyRegion::Lips => "lips",
            BodyRegion::Ears => "ears",
            BodyRegion::Neck => "neck",
            BodyRegion::Chest => "chest",
            BodyRegion::Abdomen => "abdomen",
            BodyRegion::Back => "back",
            BodyRegion::Arm => "arm",
            BodyRegion::Forearm => "forearm",
            BodyRegion::Hand => "hand",
            BodyRegion::Thigh => "thigh",
            BodyRegion::Shin => "shin",
            BodyRegion::Foot => "foot",
        }
    }
}

impl fmt::Display for BodyRegion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

impl FromStr for BodyRegion {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s.trim().to_ascii_lowercase();
        Self::ALL
            .into_iter()
            .find(|r| r.token() == t)
            .ok_or_else(|| format!("unknown region `{s}`"))
    }
}

/// The six patient-reported findings, in encoding order.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Findings {
    pub itch: bool,
    pub bleed: bool,
    pub hurt: bool,
    pub grew: bool,
    pub changed: bool,
    pub elevation: bool,
}

impl Findings {
    pub fn as_array(&self) -> [bool; 6] {
        [
            self.itch,
            self.bleed,
            self.hurt,
            self.grew,
            self.changed,
            self.elevation,
        ]
    }

    pub fn from_array(a: [bool; 6]) -> Self {
        Findings {
            itch: a[0],
            bleed: a[1],
            hurt: a[2],
            grew: a[3],
            changed: a[4],
            elevation: a[5],
        }
    }
}

/// One lesion: raw metadata, label and image reference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClinicalRecord {
    pub lesion_id: String,
    pub patient_id: String,
    pub image_path: PathBuf,
    pub diagnosis: Diagnosis,
    pub age: u32,
    pub region: BodyRegion,
    pub findings: Findings,
}

/// Encoded clinical metadata with the frozen slot layout
/// `[age/scale, region one-hot (15), (false,true) pair per finding (6 x 2)]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClinicalVector<T>(pub [T; N_CLI]);

impl<T: Scalar> ClinicalVector<T> {
    pub fn as_slice(&self) -> &[T] {
        &self.0
    }

    pub fn age(&self) -> T {
        self.0[AGE_SLOT]
    }
}

/// Encodes a record into the 28-slot vector fed to the fused classifier.
pub fn encode_clinical<T: Scalar>(record: &ClinicalRecord, age_scale: f64) -> ClinicalVector<T> {
    debug_assert!(age_scale > 0.0);
    let mut v = [T::zero(); N_CLI];
    v[AGE_SLOT] = T::lit(record.age as f64 / age_scale);
    v[REGION_OFFSET + record.region.index()] = T::one();
    for (i, flag) in record.findings.as_array().into_iter().enumerate() {
        v[FLAG_OFFSET + 2 * i + usize::from(flag)] = T::one();
    }
    ClinicalVector(v)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub records: Vec<ClinicalRecord>,
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn new(records: Vec<ClinicalRecord>, root: impl Into<PathBuf>) -> Result<Self> {
        let mut seen = HashSet::new();
        for r in &records {
            if !seen.insert(r.lesion_id.as_str()) {
                return Err(Error::Manifest(format!(
                    "duplicate lesion_id `{}`",
                    r.lesion_id
                )));
            }
        }
        Ok(DatasetManifest {
            records,
            root: root.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Label counts in `Diagnosis::ALL` order.
    pub fn label_histogram(&self) -> [usize; N_CLASSES] {
        histogram(self.records.iter().map(|r| r.diagnosis))
    }

    pub fn labels(&self) -> Vec<Diagnosis> {
        self.records.iter().map(|r| r.diagnosis).collect()
    }

    pub fn image_path(&self, i: usize) -> PathBuf {
        self.root.join(&self.records[i].image_path)
    }

    /// Fails on the first image that does not exist under `root`.
    pub fn verify_images(&self) -> Result<()> {
        for r in &self.records {
            let p = self.root.join(&r.image_path);
            if !p.is_file() {
                return Err(Error::MissingImage {
                    path: r.image_path.clone(),
                    root: self.root.clone(),
                });
            }
        }
        Ok(())
    }

    /// Sub-manifest restricted to `indices` (in the given order).
    pub fn subset(&self, indices: &[usize]) -> DatasetManifest {
        DatasetManifest {
            records: indices.iter().map(|&i| self.records[i].clone()).collect(),
            root: self.root.clone(),
        }
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        write_manifest(w, &self.records)
    }
}

pub fn histogram(labels: impl IntoIterator<Item = Diagnosis>) -> [usize; N_CLASSES] {
    let mut h = [0; N_CLASSES];
    for d in labels {
        h[d.index()] += 1;
    }
    h
}

fn parse_bool(s: &str) -> Option<bool> {
    match s.trim() {
        "true" => Some(true),
        "false" => Some(false),
        _ => None,
    }
}

/// Parses a manifest table. Image existence is not checked here; see
/// [`load_manifest`] and [`DatasetManifest::verify_images`].
pub fn parse_manifest<R: Read>(source: R, root: impl Into<PathBuf>) -> Result<DatasetManifest> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(source);

    let header = reader.headers()?.clone();
    let header: Vec<&str> = header.iter().collect();
    if header != MANIFEST_HEADER {
        return Err(Error::Manifest(format!(
            "header must be `{}`, found `{}`",
            MANIFEST_HEADER.join(","),
            header.join(",")
        )));
    }

    let mut records = Vec::new();
    let mut seen: HashMap<String, u64> = HashMap::new();
    for row in reader.records() {
        let row = row?;
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        let err = |column: &str, message: String| Error::ManifestRow {
            row: line,
            column: column.to_string(),
            message,
        };
        if row.len() != MANIFEST_HEADER.len() {
            return Err(err(
                "*",
                format!(
                    "expected {} columns, found {}",
                    MANIFEST_HEADER.len(),
                    row.len()
                ),
            ));
        }

        let lesion_id = row[0].to_string();
        if lesion_id.is_empty() {
            return Err(err("lesion_id", "empty lesion_id".into()));
        }
        if let Some(first) = seen.get(&lesion_id) {
            return Err(err(
                "lesion_id",
                format!("duplicate lesion_id `{lesion_id}` (first seen at row {first})"),
            ));
        }
        let patient_id = row[1].to_string();
        if patient_id.is_empty() {
            return Err(err("patient_id", "empty patient_id".into()));
        }
        let image_path = PathBuf::from(&row[2]);
        if row[2].is_empty() || image_path.is_absolute() {
            return Err(err(
                "image_path",
                format!("image_path must be a non-empty relative path, got `{}`", &row[2]),
            ));
        }
        let diagnosis: Diagnosis = row[3].parse().map_err(|m| err("diagnosis", m))?;
        let age: u32 = row[4]
            .parse()
            .map_err(|_| err("age", format!("age must be a non-negative integer, got `{}`", &row[4])))?;
        let region: BodyRegion = row[5].parse().map_err(|m| err("region", m))?;
        let mut flags = [false; 6];
        for (i, flag) in flags.iter_mut().enumerate() {
            let column = MANIFEST_HEADER[6 + i];
            *flag = parse_bool(&row[6 + i]).ok_or_else(|| {
                err(
                    column,
                    format!("expected `true` or `false`, got `{}`", &row[6 + i]),
                )
            })?;
        }

        seen.insert(lesion_id.clone(), line);
        records.push(ClinicalRecord {
            lesion_id,
            patient_id,
            image_path,
            diagnosis,
            age,
            region,
            findings: Findings::from_array(flags),
        });
    }

    DatasetManifest::new(records, root)
}

/// Reads a manifest file and checks that every image resolves under `root`.
pub fn load_manifest(path: &Path, root: &Path) -> Result<DatasetManifest> {
    let file = std::fs::File::open(path)?;
    let manifest = parse_manifest(std::io::BufReader::new(file), root)?;
    manifest.verify_images()?;
    Ok(manifest)
}

pub fn write_manifest<W: Write>(w: W, records: &[ClinicalRecord]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(MANIFEST_HEADER)?;
    for r in records {
        let f = r.findings.as_array();
        let path = r.image_path.to_string_lossy();
        let age = r.age.to_string();
        let mut row: Vec<&str> = vec![
            &r.lesion_id,
            &r.patient_id,
            &path,
            r.diagnosis.token(),
            &age,
            r.region.token(),
        ];
        row.extend(f.iter().map(|&b| if b { "true" } else { "false" }));
        out.write_record(&row)?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldEntry {
    pub lesion_id: String,
    pub fold: usize,
}

/// Assignment of every manifest record to one of `k` folds, in manifest order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub k: usize,
    pub seed: u64,
    pub grouped: bool,
    pub entries: Vec<FoldEntry>,
}

impl FoldAssignment {
    pub fn fold_of(&self, lesion_id: &str) -> Option<usize> {
        self.entries
            .iter()
            .find(|e| e.lesion_id == lesion_id)
            .map(|e| e.fold)
    }

    /// Manifest positions held out in `fold`.
    pub fn test_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.entries.len())
            .filter(|&i| self.entries[i].fold == fold)
            .collect()
    }

    /// Manifest positions used for training when `fold` is held out.
    pub fn train_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.entries.len())
            .filter(|&i| self.entries[i].fold != fold)
            .collect()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for e in &self.entries {
            sizes[e.fold] += 1;
        }
        sizes
    }

    pub fn as_map(&self) -> BTreeMap<&str, usize> {
        self.entries
            .iter()
            .map(|e| (e.lesion_id.as_str(), e.fold))
            .collect()
    }
}

/// Stratified k-fold split, optionally keeping each patient's lesions in a single fold.
///
/// Without grouping every class is dealt round-robin over the folds from a
/// shared cursor, so each fold receives `floor` or `ceil` of its ideal share.
/// With grouping, patients are placed greedily (largest first) into the fold
/// whose label counts fall furthest below their stratified target.
pub fn make_folds(
    manifest: &DatasetManifest,
    k: usize,
    seed: u64,
    group_by_patient: bool,
) -> Result<FoldAssignment> {
    let n = manifest.len();
    if k < 2 {
        return Err(Error::Folds(format!("k must be at least 2, got {k}")));
    }
    if k > n {
        return Err(Error::Folds(format!(
            "k = {k} exceeds the record count {n}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fold = vec![usize::MAX; n];

    if !group_by_patient {
        let hist = manifest.label_histogram();
        if let Some(min) = hist.iter().copied().filter(|&c| c > 0).min() {
            if min < k {
                return Err(Error::Folds(format!(
                    "smallest class has {min} records, fewer than k = {k}"
                )));
            }
        }
        let mut cursor = 0usize;
        for d in Diagnosis::ALL {
            let mut idx: Vec<usize> = (0..n)
                .filter(|&i| manifest.records[i].diagnosis == d)
                .collect();
            idx.shuffle(&mut rng);
            for i in idx {
                fold[i] = cursor % k;
                cursor += 1;
            }
        }
    } else {
        // Groups in first-appearance order, then shuffled, then stably sorted by size.
        let mut group_index: HashMap<&str, usize> = HashMap::new();
        let mut groups: Vec<Vec<usize>> = Vec::new();
        for (i, r) in manifest.records.iter().enumerate() {
            let g = *group_index.entry(r.patient_id.as_str()).or_insert_with(|| {
                groups.push(Vec::new());
                groups.len() - 1
            });
            groups[g].push(i);
        }
        if groups.len() < k {
            return Err(Error::Folds(format!(
                "{} patients cannot fill {k} folds when grouping by patient",
                groups.len()
            )));
        }
        groups.shuffle(&mut rng);
        groups.sort_by(|a, b| b.len().cmp(&a.len()));

        let total = manifest.label_histogram();
        let target: Vec<f64> = total.iter().map(|&c| c as f64 / k as f64).collect();
        let mut counts = vec![[0usize; N_CLASSES]; k];
        let mut sizes = vec![0usize; k];
        let mut empty_folds = k;

        for (gi, members) in groups.iter().enumerate() {
            let remaining = groups.len() - gi;
            let gh = histogram(members.iter().map(|&i| manifest.records[i].diagnosis));
            let must_fill_empty = remaining <= empty_folds;
            let mut best: Option<(f64, usize, usize)> = None;
            for f in 0..k {
                if must_fill_empty && sizes[f] > 0 {
                    continue;
                }
                // Squared deviation from the stratified target after placing the group.
                let cost: f64 = (0..N_CLASSES)
                    .map(|c| {
                        let after = (counts[f][c] + gh[c]) as f64 - target[c];
                        let before = counts[f][c] as f64 - target[c];
                        after * after - before * before
                    })
                    .sum();
                let key = (cost, sizes[f], f);
                let better = match best {
                    None => true,
                    Some(b) => {
                        key.0 < b.0 - 1e-12 || ((key.0 - b.0).abs() <= 1e-12 && (key.1, key.2) < (b.1, b.2))
                    }
                };
                if better {
                    best = Some(key);
                }
            }
            let f = best.map(|b| b.2).expect("at least one candidate fold");
            if sizes[f] == 0 {
                empty_folds -= 1;
            }
            for &i in members {
                fold[i] = f;
            }
            sizes[f] += members.len();
            for c in 0..N_CLASSES {
                counts[f][c] += gh[c];
            }
        }
    }

    Ok(FoldAssignment {
        k,
        seed,
        grouped: group_by_patient,
        entries: manifest
            .records
            .iter()
            .zip(fold)
            .map(|(r, f)| FoldEntry {
                lesion_id: r.lesion_id.clone(),
                fold: f,
            })
            .collect(),
    })
}

/// Per-label loss weights `N / n_i`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightVector {
    pub weights: [f64; N_CLASSES],
}

impl WeightVector {
    pub fn get(&self, d: Diagnosis) -> f64 {
        self.weights[d.index()]
    }

    /// All weights equal to `w`.
    pub fn uniform(w: f64) -> Self {
        WeightVector {
            weights: [w; N_CLASSES],
        }
    }
}

/// `N / n_i` for each entry of `counts`; every count must be positive.
pub fn class_weights_from_counts(counts: &[usize]) -> Result<Vec<f64>> {
    let total: usize = counts.iter().sum();
    counts
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            if c == 0 {
                let name = Diagnosis::from_index(i)
                    .map(|d| d.abbrev().to_string())
                    .unwrap_or_else(|| format!("#{i}"));
                Err(Error::EmptyClass(name))
            } else {
                Ok(total as f64 / c as f64)
            }
        })
        .collect()
}

pub fn class_weights(manifest: &DatasetManifest) -> Result<WeightVector> {
    let w = class_weights_from_counts(&manifest.label_histogram())?;
    let mut weights = [0.0; N_CLASSES];
    weights.copy_from_slice(&w);
    Ok(WeightVector { weights })
}
