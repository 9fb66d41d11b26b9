//! Paired-image datasets on disk and in memory.
//!
//! Layout: `<root>/<MODALITY>/<scene_id>.img` plus a `pairs.tsv` whose rows
//! are `modA_path<TAB>modB_path<TAB>pair_tag` with paths relative to the
//! root. `.img` is a 16-byte header (magic `A2AI`, then channels, height,
//! width as little-endian u32) followed by row-major little-endian f32
//! values in `[-1, 1]`.

use std::collections::HashMap;
use std::fs;
use std::io::{Read as _, Write as _};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::nn::derive_rng;
use crate::registry::{ModalityId, Registry, DEFAULT_TRAINING_PAIRS};
use crate::synth::{generate_scene, render_modality};
use crate::tensor::Tensor;

pub const IMG_MAGIC: [u8; 4] = *b"A2AI";
pub const PAIRS_FILE: &str = "pairs.tsv";
pub const DATASET_MANIFEST_FILE: &str = "manifest.txt";

/// Which unordered modality pairs a dataset emits.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairProtocol {
    pub pairs: Vec<(String, String)>,
}

impl PairProtocol {
    /// The seven-pair protocol the default training set mirrors.
    pub fn seven_pair() -> Self {
        Self {
            pairs: DEFAULT_TRAINING_PAIRS
                .iter()
                .map(|&(a, b)| (a.to_string(), b.to_string()))
                .collect(),
        }
    }

    pub fn new(pairs: Vec<(String, String)>) -> Self {
        Self { pairs }
    }

    pub fn validate(&self, registry: &Registry) -> Result<()> {
        if self.pairs.is_empty() {
            return Err(Error::InvalidSpec("pair protocol is empty".into()));
        }
        for (a, b) in &self.pairs {
            registry.id(a)?;
            registry.id(b)?;
            if a == b {
                return Err(Error::IdenticalEndpoints(a.clone()));
            }
        }
        Ok(())
    }

    /// Modalities touched by the protocol, each listed once in registry order.
    pub fn modalities(&self, registry: &Registry) -> Result<Vec<ModalityId>> {
        let mut seen = vec![false; registry.len()];
        for (a, b) in &self.pairs {
            seen[registry.id(a)?.0] = true;
            seen[registry.id(b)?.0] = true;
        }
        Ok((0..registry.len()).filter(|&i| seen[i]).map(ModalityId).collect())
    }
}

/// Writes one `.img` atomically (temp file in the same directory, then rename).
pub fn write_img(path: &Path, img: &Tensor<f32>) -> Result<()> {
    let shape = img.shape();
    if shape.len() != 3 {
        return Err(Error::ShapeMismatch {
            expected: "(channels, height, width)".into(),
            got: format!("{shape:?}"),
        });
    }
    let mut bytes = Vec::with_capacity(16 + img.numel() * 4);
    bytes.extend_from_slice(&IMG_MAGIC);
    for &dim in shape {
        bytes.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    for &v in img.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let tmp = path.with_extension("img.tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_img(path: &Path) -> Result<Tensor<f32>> {
    let fmt_err = |reason: String| Error::DatasetFormat {
        file: path.display().to_string(),
        reason,
    };
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 16 {
        return Err(fmt_err(format!("file is {} bytes, shorter than the header", bytes.len())));
    }
    if bytes[0..4] != IMG_MAGIC {
        return Err(fmt_err(format!("bad magic {:?}", &bytes[0..4])));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap()) as usize;
    let (c, h, w) = (dim(1), dim(2), dim(3));
    let numel = c
        .checked_mul(h)
        .and_then(|x| x.checked_mul(w))
        .ok_or_else(|| fmt_err(format!("absurd dimensions ({c}, {h}, {w})")))?;
    if numel == 0 {
        return Err(fmt_err(format!("empty dimensions ({c}, {h}, {w})")));
    }
    if bytes.len() != 16 + numel * 4 {
        return Err(fmt_err(format!(
            "payload is {} bytes but ({c}, {h}, {w}) needs {}",
            bytes.len() - 16,
            numel * 4
        )));
    }
    let mut data = Vec::with_capacity(numel);
    for i in 0..numel {
        let off = 16 + 4 * i;
        let v = f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
        if !v.is_finite() {
            return Err(fmt_err(format!("non-finite value at element {i}")));
        }
        data.push(v);
    }
    Ok(Tensor::new(vec![c, h, w], data))
}

/// What `make_paired_dataset` produced; also serialized as the dataset
/// manifest next to `pairs.tsv`.
#[derive(Clone, Debug)]
pub struct DatasetManifest {
    pub seed_start: u64,
    pub seed_end: u64,
    pub protocol: PairProtocol,
    pub scene_size: usize,
    pub pair_rows: usize,
    pub files_written: usize,
}

impl DatasetManifest {
    fn render(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("pair_rows={}\n", self.pair_rows));
        let pairs: Vec<String> = self
            .protocol
            .pairs
            .iter()
            .map(|(a, b)| format!("{a}-{b}"))
            .collect();
        s.push_str(&format!("protocol={}\n", pairs.join(",")));
        s.push_str(&format!("scene_size={}\n", self.scene_size));
        s.push_str(&format!("seed_end={}\n", self.seed_end));
        s.push_str(&format!("seed_start={}\n", self.seed_start));
        s
    }
}

fn scene_file_name(seed: u64) -> String {
    format!("{seed:08}.img")
}

/// Renders every scene in `seeds` into the modalities the protocol touches
/// and writes the directory layout. Each image file is written once even
/// when referenced by several pairs; regeneration is byte-identical.
pub fn make_paired_dataset(
    registry: &Registry,
    seeds: std::ops::Range<u64>,
    protocol: &PairProtocol,
    out_dir: &Path,
    scene_size: usize,
) -> Result<DatasetManifest> {
    protocol.validate(registry)?;
    if seeds.is_empty() {
        return Err(Error::InvalidSpec("empty seed range".into()));
    }
    let modalities = protocol.modalities(registry)?;
    for &m in &modalities {
        fs::create_dir_all(out_dir.join(&registry.spec(m)?.name))?;
    }
    let mut files_written = 0usize;
    let mut tsv = String::new();
    for seed in seeds.clone() {
        let scene = generate_scene(seed, scene_size, scene_size)?;
        for &m in &modalities {
            let spec = registry.spec(m)?;
            let img = render_modality(&scene, spec)?;
            write_img(&out_dir.join(&spec.name).join(scene_file_name(seed)), &img)?;
            files_written += 1;
        }
        for (a, b) in &protocol.pairs {
            tsv.push_str(&format!(
                "{a}/{file}\t{b}/{file}\t{a}-{b}\n",
                file = scene_file_name(seed)
            ));
        }
    }
    let tmp = out_dir.join(format!("{PAIRS_FILE}.tmp"));
    fs::write(&tmp, &tsv)?;
    fs::rename(&tmp, out_dir.join(PAIRS_FILE))?;
    let manifest = DatasetManifest {
        seed_start: seeds.start,
        seed_end: seeds.end,
        protocol: protocol.clone(),
        scene_size,
        pair_rows: protocol.pairs.len() * (seeds.end - seeds.start) as usize,
        files_written,
    };
    let tmp = out_dir.join(format!("{DATASET_MANIFEST_FILE}.tmp"));
    fs::write(&tmp, manifest.render())?;
    fs::rename(&tmp, out_dir.join(DATASET_MANIFEST_FILE))?;
    Ok(manifest)
}

/// One aligned image pair, already oriented as listed in `pairs.tsv`.
#[derive(Clone, Debug)]
pub struct PairEntry {
    pub a_modality: ModalityId,
    pub b_modality: ModalityId,
    pub a_index: usize,
    pub b_index: usize,
    pub tag: String,
}

/// An ingested dataset: deduplicated images plus the pair rows that
/// reference them.
#[derive(Clone, Debug)]
pub struct PairedDataset {
    images: Vec<Tensor<f32>>,
    image_modality: Vec<ModalityId>,
    entries: Vec<PairEntry>,
}

impl PairedDataset {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[PairEntry] {
        &self.entries
    }

    pub fn image(&self, index: usize) -> &Tensor<f32> {
        &self.images[index]
    }

    /// Indices of pair rows joining the two modalities, either orientation.
    pub fn rows_for(&self, m1: ModalityId, m2: ModalityId) -> Vec<usize> {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| {
                (e.a_modality == m1 && e.b_modality == m2)
                    || (e.a_modality == m2 && e.b_modality == m1)
            })
            .map(|(i, _)| i)
            .collect()
    }

    /// (source image index, target image index) pairs for a direction.
    pub fn direction_pairs(&self, src: ModalityId, tgt: ModalityId) -> Vec<(usize, usize)> {
        self.rows_for(src, tgt)
            .into_iter()
            .map(|i| {
                let e = &self.entries[i];
                if e.a_modality == src {
                    (e.a_index, e.b_index)
                } else {
                    (e.b_index, e.a_index)
                }
            })
            .collect()
    }

    /// Unique image indices of one modality, in ingestion order.
    pub fn images_of(&self, modality: ModalityId) -> Vec<usize> {
        self.image_modality
            .iter()
            .enumerate()
            .filter(|(_, &m)| m == modality)
            .map(|(i, _)| i)
            .collect()
    }

    /// Deterministic permutation of the pair rows.
    pub fn shuffled_rows(&self, seed: u64) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.entries.len()).collect();
        let mut rng = derive_rng(seed, &[self.entries.len() as u64]);
        idx.shuffle(&mut rng);
        idx
    }

    /// Unordered modality pairs present in the data, as a direction set
    /// containing both orientations of each.
    pub fn covered_directions(&self) -> crate::registry::DirectionSet {
        let mut set = crate::registry::DirectionSet::new();
        for e in &self.entries {
            set.insert((e.a_modality, e.b_modality));
            set.insert((e.b_modality, e.a_modality));
        }
        set
    }
}

/// Loads `pairs.tsv` and every referenced image, shape-checking each file
/// against the registry entry named by its directory.
pub fn ingest_directory(registry: &Registry, root: &Path) -> Result<PairedDataset> {
    let tsv_path = root.join(PAIRS_FILE);
    let tsv = fs::read_to_string(&tsv_path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::DatasetFormat {
                file: tsv_path.display().to_string(),
                reason: "missing pairs.tsv".into(),
            }
        } else {
            Error::Io(e)
        }
    })?;
    let fmt_err = |reason: String| Error::DatasetFormat {
        file: tsv_path.display().to_string(),
        reason,
    };

    let mut images = Vec::new();
    let mut image_modality = Vec::new();
    let mut by_path: HashMap<PathBuf, usize> = HashMap::new();
    let mut entries = Vec::new();

    let mut load = |rel: &str, line_no: usize| -> Result<(usize, ModalityId)> {
        let rel_path = PathBuf::from(rel);
        if let Some(&i) = by_path.get(&rel_path) {
            return Ok((i, image_modality[i]));
        }
        let mod_name = rel_path
            .components()
            .next()
            .and_then(|c| c.as_os_str().to_str())
            .ok_or_else(|| {
                Error::DatasetFormat {
                    file: tsv_path.display().to_string(),
                    reason: format!("line {line_no}: unusable path {rel:?}"),
                }
            })?;
        let modality = registry.id(mod_name)?;
        let spec = registry.spec(modality)?;
        let img = read_img(&root.join(&rel_path))?;
        let expected = [spec.channels, spec.native_size, spec.native_size];
        if img.shape() != expected {
            return Err(Error::DatasetFormat {
                file: root.join(&rel_path).display().to_string(),
                reason: format!(
                    "shape {:?} does not match registry entry {} {:?}",
                    img.shape(),
                    spec.name,
                    expected
                ),
            });
        }
        let idx = images.len();
        images.push(img);
        image_modality.push(modality);
        by_path.insert(rel_path, idx);
        Ok((idx, modality))
    };

    for (i, line) in tsv.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(fmt_err(format!(
                "line {}: expected 3 tab-separated fields, got {}",
                i + 1,
                fields.len()
            )));
        }
        let (a_index, a_modality) = load(fields[0], i + 1)?;
        let (b_index, b_modality) = load(fields[1], i + 1)?;
        entries.push(PairEntry {
            a_modality,
            b_modality,
            a_index,
            b_index,
            tag: fields[2].to_string(),
        });
    }
    if entries.is_empty() {
        return Err(fmt_err("pairs.tsv holds no rows".into()));
    }
    Ok(PairedDataset { images, image_modality, entries })
}
