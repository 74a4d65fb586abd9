//! NIH ChestX-ray14 metadata parsing, label statistics and patient-wise splits.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::disease::{DiseaseLabel, LabelVector, NO_FINDING, NUM_DISEASES};
use crate::error::{Error, Result};

const COL_IMAGE: &str = "Image Index";
const COL_LABELS: &str = "Finding Labels";
const COL_PATIENT: &str = "Patient ID";
const COL_AGE: &str = "Patient Age";
const COL_GENDER: &str = "Patient Gender";

/// File name of the metadata table in the public archive.
pub const METADATA_FILE: &str = "Data_Entry_2017.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Gender {
    M,
    F,
}

/// One X-ray from the metadata file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageRecord {
    pub image_id: String,
    pub patient_id: String,
    pub labels: LabelVector,
    /// Kept for provenance only; no model consumes it.
    pub age: Option<u32>,
    pub gender: Option<Gender>,
}

/// Row-level problems that do not abort parsing.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ParseWarnings {
    pub bad_age: usize,
    pub bad_gender: usize,
}

#[derive(Debug, Clone)]
pub struct Catalog {
    pub records: Vec<ImageRecord>,
    pub warnings: ParseWarnings,
}

impl Catalog {
    pub fn by_id(&self) -> HashMap<&str, &ImageRecord> {
        self.records.iter().map(|r| (r.image_id.as_str(), r)).collect()
    }
}

pub fn parse_catalog(path: impl AsRef<Path>) -> Result<Catalog> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_catalog_from_reader(file)
}

/// Parses a comma-separated metadata table with a header row.
///
/// Error rows are reported by their line number in the file (the header is line 1).
pub fn parse_catalog_from_reader<R: Read>(reader: R) -> Result<Catalog> {
    let mut rdr = csv::ReaderBuilder::new()
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let column = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let image_col = column(COL_IMAGE)?;
    let labels_col = column(COL_LABELS)?;
    let patient_col = column(COL_PATIENT)?;
    let age_col = column(COL_AGE).ok();
    let gender_col = column(COL_GENDER).ok();

    let mut records = Vec::new();
    let mut warnings = ParseWarnings::default();
    let mut seen = HashSet::new();
    for row in rdr.records() {
        let row = row?;
        let line = row.position().map(|p| p.line() as usize).unwrap_or(0);
        let field = |idx: usize| row.get(idx).unwrap_or("");

        let image_id = field(image_col).to_string();
        if image_id.is_empty() {
            return Err(Error::BadRow {
                row: line,
                message: "empty image id".into(),
            });
        }
        if !seen.insert(image_id.clone()) {
            return Err(Error::BadRow {
                row: line,
                message: format!("duplicate image id {image_id:?}"),
            });
        }
        let patient_id = field(patient_col).to_string();
        if patient_id.is_empty() {
            return Err(Error::BadRow {
                row: line,
                message: "empty patient id".into(),
            });
        }
        let labels = parse_finding_labels(field(labels_col), line)?;

        let age = age_col.and_then(|c| {
            let raw = field(c);
            match raw.trim_end_matches('Y').parse::<u32>() {
                Ok(a) => Some(a),
                Err(_) => {
                    warnings.bad_age += 1;
                    None
                }
            }
        });
        let gender = gender_col.and_then(|c| match field(c) {
            "M" => Some(Gender::M),
            "F" => Some(Gender::F),
            _ => {
                warnings.bad_gender += 1;
                None
            }
        });

        records.push(ImageRecord {
            image_id,
            patient_id,
            labels,
            age,
            gender,
        });
    }
    if warnings.bad_age > 0 || warnings.bad_gender > 0 {
        log::warn!(
            "metadata: {} rows with unparseable age, {} with unparseable gender",
            warnings.bad_age,
            warnings.bad_gender
        );
    }
    Ok(Catalog { records, warnings })
}

fn parse_finding_labels(raw: &str, row: usize) -> Result<LabelVector> {
    let mut labels = LabelVector::NONE;
    for token in raw.split('|').map(str::trim) {
        if token == NO_FINDING {
            continue;
        }
        let disease = token.parse::<DiseaseLabel>().map_err(|_| Error::UnknownDisease {
            token: token.to_string(),
            row,
        })?;
        labels.set(disease, true);
    }
    Ok(labels)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CombinationCount {
    pub key: String,
    pub count: usize,
    pub fraction: f64,
}

/// Label-combination frequencies, most common first.
#[derive(Debug, Clone, PartialEq)]
pub struct CombinationStats {
    pub total: usize,
    pub entries: Vec<CombinationCount>,
}

impl CombinationStats {
    pub fn get(&self, key: &str) -> Option<&CombinationCount> {
        self.entries.iter().find(|e| e.key == key)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Aligned text table: `<combination> <count> <percent>%`.
    pub fn render(&self, top: Option<usize>) -> String {
        let rows = &self.entries[..top.unwrap_or(self.entries.len()).min(self.entries.len())];
        let width = rows.iter().map(|e| e.key.len()).max().unwrap_or(0);
        let mut out = String::new();
        for e in rows {
            out.push_str(&format!("{:<width$} {} {:.2}%\n", e.key, e.count, e.fraction * 100.0));
        }
        out
    }
}

pub fn label_combination_stats(records: &[ImageRecord]) -> Result<CombinationStats> {
    if records.is_empty() {
        return Err(Error::invalid("no records to summarize"));
    }
    let mut counts: HashMap<LabelVector, usize> = HashMap::new();
    for r in records {
        *counts.entry(r.labels).or_default() += 1;
    }
    let total = records.len();
    let mut entries: Vec<CombinationCount> = counts
        .into_iter()
        .map(|(labels, count)| CombinationCount {
            key: labels.combination_key(),
            count,
            fraction: count as f64 / total as f64,
        })
        .collect();
    entries.sort_by(|a, b| b.count.cmp(&a.count).then_with(|| a.key.cmp(&b.key)));
    Ok(CombinationStats { total, entries })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::invalid(format!("unknown split {other:?}"))),
        }
    }
}

/// Train/validation/test fractions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.7,
            val: 0.1,
            test: 0.2,
        }
    }
}

impl SplitRatios {
    pub fn new(train: f64, val: f64, test: f64) -> Result<Self> {
        let r = Self { train, val, test };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        let all = self.as_array();
        if all.iter().any(|r| !r.is_finite() || *r <= 0.0) {
            return Err(Error::invalid(format!("split ratios must be positive: {all:?}")));
        }
        let sum: f64 = all.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("split ratios sum to {sum}, not 1")));
        }
        Ok(())
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.train, self.val, self.test]
    }

    pub fn get(&self, split: Split) -> f64 {
        self.as_array()[split as usize]
    }
}

impl FromStr for SplitRatios {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<f64> = s
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::invalid(format!("bad ratios {s:?}: {e}")))?;
        match parts.as_slice() {
            [a, b, c] => SplitRatios::new(*a, *b, *c),
            _ => Err(Error::invalid(format!("expected three ratios, got {s:?}"))),
        }
    }
}

impl fmt::Display for SplitRatios {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{}", self.train, self.val, self.test)
    }
}

/// Assignment of every image to one split.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitManifest {
    pub split_of: BTreeMap<String, Split>,
    pub seed: u64,
    pub ratios: SplitRatios,
}

impl SplitManifest {
    pub fn get(&self, image_id: &str) -> Option<Split> {
        self.split_of.get(image_id).copied()
    }

    pub fn len(&self) -> usize {
        self.split_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.split_of.is_empty()
    }

    /// Records of `split`, in catalog order. Records missing from the manifest are skipped.
    pub fn select<'a>(&self, records: &'a [ImageRecord], split: Split) -> Vec<&'a ImageRecord> {
        records
            .iter()
            .filter(|r| self.get(&r.image_id) == Some(split))
            .collect()
    }

    /// Fails if any patient has images in more than one split.
    pub fn check_patient_disjoint(&self, records: &[ImageRecord]) -> Result<()> {
        let mut seen: HashMap<&str, (Split, &str)> = HashMap::new();
        for r in records {
            let Some(split) = self.get(&r.image_id) else {
                continue;
            };
            match seen.get(r.patient_id.as_str()) {
                Some((other, other_img)) if *other != split => {
                    return Err(Error::Leakage(format!(
                        "patient {} has image {} in {} and {} in {}",
                        r.patient_id, other_img, other, r.image_id, split
                    )));
                }
                Some(_) => {}
                None => {
                    seen.insert(&r.patient_id, (split, &r.image_id));
                }
            }
        }
        Ok(())
    }
}

struct Patient<'a> {
    id: &'a str,
    images: Vec<&'a str>,
    /// positive image count per disease
    positives: [usize; NUM_DISEASES],
    no_finding: usize,
    present: LabelVector,
}

/// Running per-split totals used by the greedy apportionment.
#[derive(Default)]
struct Tally {
    images: [usize; 3],
    positives: [[usize; NUM_DISEASES]; 3],
    no_finding: [usize; 3],
}

impl Tally {
    /// Relative shortfall of split `s` for a stratum once `add` more images are placed.
    fn shortfall(ratio: f64, per_split: &[usize; 3], s: usize, add: usize) -> f64 {
        let total = per_split.iter().sum::<usize>() + add;
        (ratio * total as f64 - per_split[s] as f64) / total as f64
    }

    fn score(&self, ratios: &[f64; 3], s: usize, p: &Patient) -> f64 {
        let mut score = Self::shortfall(ratios[s], &self.images, s, p.images.len());
        for d in p.present.diseases() {
            let i = d.index();
            let per_split = [self.positives[0][i], self.positives[1][i], self.positives[2][i]];
            score += Self::shortfall(ratios[s], &per_split, s, p.positives[i]);
        }
        if p.no_finding > 0 {
            score += Self::shortfall(ratios[s], &self.no_finding, s, p.no_finding);
        }
        score
    }

    fn add(&mut self, s: usize, p: &Patient) {
        self.images[s] += p.images.len();
        for i in 0..NUM_DISEASES {
            self.positives[s][i] += p.positives[i];
        }
        self.no_finding[s] += p.no_finding;
    }
}

/// Patient-disjoint, stratified train/val/test split.
///
/// Patients are bucketed by their rarest present disease (global image
/// prevalence; patients without any finding form their own bucket). Buckets
/// are visited rarest first and, within a bucket, patients are shuffled with
/// `seed` and each is sent to the split with the largest summed relative
/// shortfall over the strata it belongs to: overall image count, every
/// disease it carries, and "No Finding" images.
pub fn make_patient_split(records: &[ImageRecord], ratios: SplitRatios, seed: u64) -> Result<SplitManifest> {
    ratios.validate()?;
    let mut patients: BTreeMap<&str, Patient> = BTreeMap::new();
    let mut prevalence = [0usize; NUM_DISEASES];
    let mut ids = HashSet::new();
    for r in records {
        if !ids.insert(r.image_id.as_str()) {
            return Err(Error::invalid(format!("duplicate image id {:?}", r.image_id)));
        }
        let p = patients.entry(&r.patient_id).or_insert_with(|| Patient {
            id: &r.patient_id,
            images: Vec::new(),
            positives: [0; NUM_DISEASES],
            no_finding: 0,
            present: LabelVector::NONE,
        });
        p.images.push(&r.image_id);
        p.present = p.present.union(r.labels);
        if r.labels.is_empty() {
            p.no_finding += 1;
        }
        for d in r.labels.diseases() {
            p.positives[d.index()] += 1;
            prevalence[d.index()] += 1;
        }
    }
    if patients.len() < Split::ALL.len() {
        return Err(Error::invalid(format!(
            "need at least {} patients to split, got {}",
            Split::ALL.len(),
            patients.len()
        )));
    }

    // bucket key: (prevalence, disease index); None sorts last
    let rarest = |p: &Patient| p.present.diseases().min_by_key(|d| (prevalence[d.index()], d.index()));
    let mut buckets: BTreeMap<(usize, usize), Vec<&Patient>> = BTreeMap::new();
    for p in patients.values() {
        let key = match rarest(p) {
            Some(d) => (prevalence[d.index()], d.index()),
            None => (usize::MAX, NUM_DISEASES),
        };
        buckets.entry(key).or_default().push(p);
    }

    let ratio_arr = ratios.as_array();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tally = Tally::default();
    let mut split_of = BTreeMap::new();
    for bucket in buckets.values_mut() {
        bucket.shuffle(&mut rng);
        for p in bucket.iter() {
            let mut best = 0;
            let mut best_score = f64::NEG_INFINITY;
            for s in 0..3 {
                let score = tally.score(&ratio_arr, s, p);
                // strictly greater keeps the earliest split on ties
                if score > best_score + 1e-12 {
                    best = s;
                    best_score = score;
                }
            }
            tally.add(best, p);
            for img in &p.images {
                split_of.insert(img.to_string(), Split::ALL[best]);
            }
            log::trace!("patient {} -> {}", p.id, Split::ALL[best]);
        }
    }

    Ok(SplitManifest { split_of, seed, ratios })
}

const MANIFEST_MAGIC: &str = "# dacnet-manifest";

/// Writes `# dacnet-manifest seed=<n> ratios=<a>,<b>,<c>` then `<image_id>\t<split>` lines.
pub fn write_manifest_to<W: Write>(manifest: &SplitManifest, mut out: W) -> Result<()> {
    if manifest.is_empty() {
        return Err(Error::invalid("refusing to write an empty manifest"));
    }
    manifest.ratios.validate()?;
    let mut buf = String::with_capacity(manifest.len() * 24);
    buf.push_str(&format!(
        "{MANIFEST_MAGIC} seed={} ratios={}\n",
        manifest.seed, manifest.ratios
    ));
    for (id, split) in &manifest.split_of {
        if id.is_empty() || id.contains(['\t', '\n', '\r']) {
            return Err(Error::invalid(format!("image id {id:?} cannot be written")));
        }
        buf.push_str(id);
        buf.push('\t');
        buf.push_str(split.as_str());
        buf.push('\n');
    }
    out.write_all(buf.as_bytes()).map_err(|e| Error::io("<manifest>", e))
}

pub fn write_manifest(manifest: &SplitManifest, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    write_manifest_to(manifest, &mut buf)?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<SplitManifest> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_manifest_from(BufReader::new(file), path)
}

pub fn read_manifest_from<R: BufRead>(reader: R, path: &Path) -> Result<SplitManifest> {
    let malformed = |line: usize, message: String| Error::Malformed {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = reader.lines().enumerate();
    let (seed, ratios) = match lines.next() {
        Some((_, header)) => {
            let header = header.map_err(|e| Error::io(path, e))?;
            parse_manifest_header(&header).map_err(|m| malformed(1, m))?
        }
        None => return Err(malformed(1, "empty manifest".into())),
    };
    let mut split_of = BTreeMap::new();
    for (i, line) in lines {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.is_empty() {
            continue;
        }
        let (id, split) = line
            .split_once('\t')
            .ok_or_else(|| malformed(line_no, format!("expected <image_id>\\t<split>, got {line:?}")))?;
        let split = split.parse::<Split>().map_err(|e| malformed(line_no, e.to_string()))?;
        if id.is_empty() {
            return Err(malformed(line_no, "empty image id".into()));
        }
        if split_of.insert(id.to_string(), split).is_some() {
            return Err(malformed(line_no, format!("duplicate image id {id:?}")));
        }
    }
    if split_of.is_empty() {
        return Err(malformed(1, "manifest has no entries".into()));
    }
    Ok(SplitManifest { split_of, seed, ratios })
}

fn parse_manifest_header(header: &str) -> std::result::Result<(u64, SplitRatios), String> {
    let rest = header
        .strip_prefix(MANIFEST_MAGIC)
        .ok_or_else(|| format!("missing {MANIFEST_MAGIC:?} header"))?;
    let mut seed = None;
    let mut ratios = None;
    for kv in rest.split_whitespace() {
        match kv.split_once('=') {
            Some(("seed", v)) => seed = Some(v.parse::<u64>().map_err(|e| format!("bad seed: {e}"))?),
            Some(("ratios", v)) => ratios = Some(v.parse::<SplitRatios>().map_err(|e| e.to_string())?),
            _ => return Err(format!("unexpected header field {kv:?}")),
        }
    }
    Ok((seed.ok_or("header lacks seed")?, ratios.ok_or("header lacks ratios")?))
}

/// Distinct patients per split.
pub fn patients_per_split(records: &[ImageRecord], manifest: &SplitManifest) -> [usize; 3] {
    let mut sets: [BTreeSet<&str>; 3] = Default::default();
    for r in records {
        if let Some(s) = manifest.get(&r.image_id) {
            sets[s as usize].insert(&r.patient_id);
        }
    }
    sets.map(|s| s.len())
}
