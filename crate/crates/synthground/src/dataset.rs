//! Dataset generation, on-disk layout and loading.
//!
//! Layout under the output directory:
//!
//! ```text
//! images/<id>.ppm   RGB scene, binary PPM
//! masks/<id>.pbm    referent mask, binary PBM
//! index.jsonl       one JSON record per sample
//! vocab.txt         one word per line
//! manifest.sha      "<sha256>  <path>" per file, sorted by path
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::expr::{lexicon, Expression, Template};
use crate::netpbm::{decode_pbm, decode_ppm, encode_pbm, encode_ppm};
use crate::scene::{mask_box, Color, SceneObject, SceneSpec, ShapeKind, Size};

pub const MAX_RETRIES: usize = 64;
const PLACEMENT_TRIES: usize = 200;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        Split::ALL.into_iter().find(|x| x.name() == s)
    }
}

#[derive(Clone, Debug)]
pub struct GenerateOptions {
    pub seed: u64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub resolution: usize,
    /// Canvas resolution must be a multiple of this.
    pub patch: usize,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        GenerateOptions {
            seed: 0,
            n_train: 4000,
            n_val: 500,
            n_test: 500,
            resolution: 64,
            patch: 8,
        }
    }
}

/// One line of `index.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexRecord {
    pub id: String,
    pub scene_id: u64,
    pub split: Split,
    pub expression: String,
    pub template: Template,
    pub referent: usize,
    /// Normalized `(cx, cy, w, h)`.
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub image: String,
    pub mask: String,
    pub scene: SceneSpec,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroundingSample {
    pub record: IndexRecord,
    pub image: Vec<u8>,
    pub mask: Vec<bool>,
}

impl GroundingSample {
    pub fn resolution(&self) -> usize {
        self.record.scene.resolution
    }

    pub fn word_count(&self) -> usize {
        self.record.expression.split_whitespace().count()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct GenerateReport {
    pub written: BTreeMap<Split, usize>,
    pub skipped: usize,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub samples: Vec<GroundingSample>,
    pub vocab: Vec<String>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &GroundingSample> {
        self.samples.iter().filter(move |s| s.record.split == split)
    }

    pub fn find(&self, id: &str) -> Option<&GroundingSample> {
        self.samples.iter().find(|s| s.record.id == id)
    }
}

fn random_object(rng: &mut ChaCha8Rng, resolution: usize) -> SceneObject {
    let size = *Size::ALL.choose(rng).expect("non-empty");
    let r = size.radius(resolution);
    let lo = r + 1;
    let hi = resolution as u32 - r - 1;
    SceneObject {
        shape: *ShapeKind::ALL.choose(rng).expect("non-empty"),
        color: *Color::ALL.choose(rng).expect("non-empty"),
        size,
        cx: rng.gen_range(lo..=hi),
        cy: rng.gen_range(lo..=hi),
    }
}

/// Two to five objects whose circumscribed circles are at least 2 px apart.
pub fn random_scene(rng: &mut ChaCha8Rng, resolution: usize) -> Option<SceneSpec> {
    let n = rng.gen_range(2..=5);
    let mut objects: Vec<SceneObject> = Vec::with_capacity(n);
    for _ in 0..PLACEMENT_TRIES {
        if objects.len() == n {
            break;
        }
        let cand = random_object(rng, resolution);
        let ok = objects.iter().all(|o| {
            let dx = o.cx as f64 - cand.cx as f64;
            let dy = o.cy as f64 - cand.cy as f64;
            let min = (o.size.radius(resolution) + cand.size.radius(resolution) + 2) as f64;
            dx * dx + dy * dy >= min * min
        });
        if ok {
            objects.push(cand);
        }
    }
    (objects.len() == n).then_some(SceneSpec { resolution, objects })
}

/// Draws one sample of the requested template, retrying fresh scenes up to
/// [`MAX_RETRIES`] times.
pub fn sample_scene(
    rng: &mut ChaCha8Rng,
    template: Template,
    resolution: usize,
) -> Option<(SceneSpec, Expression, usize)> {
    for _ in 0..MAX_RETRIES {
        let Some(scene) = random_scene(rng, resolution) else {
            continue;
        };
        let cands = Expression::candidates(template, &scene);
        if let Some(&(expr, referent)) = cands.choose(rng) {
            return Some((scene, expr, referent));
        }
    }
    None
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Generates the dataset under `out`. Output is a pure function of `opts`.
pub fn generate_dataset(opts: &GenerateOptions, out: &Path) -> Result<GenerateReport> {
    if opts.n_train + opts.n_val + opts.n_test == 0 {
        return Err(Error::InvalidArgument("at least one sample must be requested".into()));
    }
    if opts.patch == 0 || !opts.resolution.is_multiple_of(opts.patch) || opts.resolution < 16 {
        return Err(Error::InvalidArgument(format!(
            "resolution {} must be >= 16 and divisible by patch size {}",
            opts.resolution, opts.patch
        )));
    }
    for dir in [out.to_path_buf(), out.join("images"), out.join("masks")] {
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GenerateReport::default();
    let mut index = String::new();
    let mut scene_id = 0u64;
    let res = opts.resolution;
    for (split, count) in [
        (Split::Train, opts.n_train),
        (Split::Val, opts.n_val),
        (Split::Test, opts.n_test),
    ] {
        let mut written = 0;
        for i in 0..count {
            let template = Template::ALL[rng.gen_range(0..Template::ALL.len())];
            let Some((scene, expr, referent)) = sample_scene(&mut rng, template, res) else {
                report.skipped += 1;
                continue;
            };
            let id = format!("{}-{i:05}", split.name());
            let mask = scene.object_mask(referent);
            let bbox = mask_box(&mask, res).expect("objects always cover pixels");
            let image_rel = format!("images/{id}.ppm");
            let mask_rel = format!("masks/{id}.pbm");
            write_file(&out.join(&image_rel), &encode_ppm(res, res, &scene.render()))?;
            write_file(&out.join(&mask_rel), &encode_pbm(res, res, &mask))?;
            let record = IndexRecord {
                id,
                scene_id,
                split,
                expression: expr.text(),
                template: expr.template(),
                referent,
                bbox,
                image: image_rel,
                mask: mask_rel,
                scene,
            };
            index.push_str(&serde_json::to_string(&record).expect("record serializes"));
            index.push('\n');
            scene_id += 1;
            written += 1;
        }
        report.written.insert(split, written);
    }
    write_file(&out.join("index.jsonl"), index.as_bytes())?;
    let vocab: String = lexicon().iter().map(|w| format!("{w}\n")).collect();
    write_file(&out.join("vocab.txt"), vocab.as_bytes())?;
    write_manifest(out)?;
    Ok(report)
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn manifest_files(root: &Path) -> Result<Vec<String>> {
    let mut files = vec!["index.jsonl".to_string(), "vocab.txt".to_string()];
    for dir in ["images", "masks"] {
        let path = root.join(dir);
        let entries = fs::read_dir(&path).map_err(|e| Error::io(&path, e))?;
        for entry in entries {
            let entry = entry.map_err(|e| Error::io(&path, e))?;
            files.push(format!("{dir}/{}", entry.file_name().to_string_lossy()));
        }
    }
    files.sort();
    Ok(files)
}

fn write_manifest(root: &Path) -> Result<()> {
    let mut manifest = String::new();
    for rel in manifest_files(root)? {
        let path = root.join(&rel);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        manifest.push_str(&format!("{}  {rel}\n", sha256_hex(&bytes)));
    }
    write_file(&root.join("manifest.sha"), manifest.as_bytes())
}

/// Parses `manifest.sha` text into `(digest, path)` pairs.
pub fn parse_manifest(text: &str, file: &Path) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let body = line.trim_end_matches(['\n', '\r']);
        if !body.is_empty() {
            let malformed = |detail: &str| Error::Malformed {
                file: file.to_path_buf(),
                offset,
                detail: detail.into(),
            };
            let (digest, path) = body
                .split_once("  ")
                .ok_or_else(|| malformed("expected '<sha256>  <path>'"))?;
            if digest.len() != 64 || !digest.bytes().all(|b| b.is_ascii_hexdigit()) {
                return Err(malformed("digest is not 64 hex characters"));
            }
            if path.is_empty() || path.starts_with('/') || path.split('/').any(|c| c == "..") {
                return Err(malformed("path must be relative and stay inside the dataset"));
            }
            out.push((digest.to_ascii_lowercase(), path.to_string()));
        }
        offset += line.len();
    }
    Ok(out)
}

/// Recomputes every digest in `manifest.sha` and checks the listing is complete.
pub fn verify_manifest(root: &Path) -> Result<usize> {
    let path = root.join("manifest.sha");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let entries = parse_manifest(&text, &path)?;
    let listed: Vec<&str> = entries.iter().map(|(_, p)| p.as_str()).collect();
    let actual = manifest_files(root)?;
    if listed != actual.iter().map(String::as_str).collect::<Vec<_>>() {
        return Err(Error::Manifest {
            path: "manifest.sha".into(),
            detail: "file listing differs from directory".into(),
        });
    }
    for (digest, rel) in &entries {
        let p = root.join(rel);
        let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
        let got = sha256_hex(&bytes);
        if &got != digest {
            return Err(Error::Manifest {
                path: rel.clone(),
                detail: format!("expected {digest}, got {got}"),
            });
        }
    }
    Ok(entries.len())
}

/// Parses `index.jsonl`; errors carry the byte offset of the bad line.
pub fn parse_index(text: &str, file: &Path) -> Result<Vec<IndexRecord>> {
    let mut records = Vec::new();
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let body = line.trim_end();
        if !body.is_empty() {
            let rec: IndexRecord = serde_json::from_str(body).map_err(|e| Error::Malformed {
                file: file.to_path_buf(),
                offset,
                detail: e.to_string(),
            })?;
            validate_record(&rec).map_err(|detail| Error::Malformed {
                file: file.to_path_buf(),
                offset,
                detail,
            })?;
            records.push(rec);
        }
        offset += line.len();
    }
    Ok(records)
}

fn validate_record(rec: &IndexRecord) -> std::result::Result<(), String> {
    let res = rec.scene.resolution;
    if res == 0 || res > 4096 {
        return Err(format!("unsupported resolution {res}"));
    }
    if rec.referent >= rec.scene.objects.len() {
        return Err(format!("referent {} out of range", rec.referent));
    }
    if !rec.bbox.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)) {
        return Err("box components must lie in [0, 1]".into());
    }
    for p in [&rec.image, &rec.mask] {
        if p.starts_with('/') || p.split('/').any(|c| c == "..") {
            return Err(format!("path {p} escapes the dataset"));
        }
    }
    Ok(())
}

pub fn read_vocab(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect())
}

/// Loads every sample in index order. A missing or undecodable image or mask is an error.
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let index_path = root.join("index.jsonl");
    let text = fs::read_to_string(&index_path).map_err(|e| Error::io(&index_path, e))?;
    let records = parse_index(&text, &index_path)?;
    let mut scenes_by_split: BTreeMap<u64, Split> = BTreeMap::new();
    let mut samples = Vec::with_capacity(records.len());
    for record in records {
        if let Some(&prev) = scenes_by_split.get(&record.scene_id) {
            if prev != record.split {
                return Err(Error::Malformed {
                    file: index_path.clone(),
                    offset: 0,
                    detail: format!(
                        "scene {} appears in both {} and {}",
                        record.scene_id,
                        prev.name(),
                        record.split.name()
                    ),
                });
            }
        }
        scenes_by_split.insert(record.scene_id, record.split);
        let res = record.scene.resolution;
        let image_path = root.join(&record.image);
        let bytes = fs::read(&image_path).map_err(|e| Error::io(&image_path, e))?;
        let image = decode_ppm(&bytes).map_err(|e| Error::Malformed {
            file: image_path.clone(),
            offset: 0,
            detail: e.to_string(),
        })?;
        let mask_path = root.join(&record.mask);
        let bytes = fs::read(&mask_path).map_err(|e| Error::io(&mask_path, e))?;
        let mask = decode_pbm(&bytes).map_err(|e| Error::Malformed {
            file: mask_path.clone(),
            offset: 0,
            detail: e.to_string(),
        })?;
        if (image.width, image.height) != (res, res) || (mask.width, mask.height) != (res, res) {
            return Err(Error::Malformed {
                file: image_path,
                offset: 0,
                detail: format!("image or mask size does not match resolution {res}"),
            });
        }
        samples.push(GroundingSample {
            record,
            image: image.pixels,
            mask: mask.bits,
        });
    }
    let vocab = read_vocab(&root.join("vocab.txt"))?;
    Ok(Dataset {
        root: root.to_path_buf(),
        samples,
        vocab,
    })
}
