//! On-disk dataset: manifest with SHA-256 digests, per-sample PNG + JSON
//! layout, split construction with unseen-composition disjointness.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datagen::{render_sample, sample_rng, ConditionIds, GarmentClass, GarmentSample, PaletteEntry, N_LOGOS, N_PALETTES, N_SILHOUETTES};
use crate::error::{GarmentError, Result};
use crate::num::Scalar;
use crate::tensor::{BoxPx, ImageTensor, MaskTensor};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    TestSeen,
    TestUnseen,
}

impl Split {
    pub fn dir_name(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::TestSeen => "test_seen",
            Split::TestUnseen => "test_unseen",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: u64,
    pub split: Split,
    pub dir: String,
    /// Relative file name -> SHA-256 hex digest.
    pub files: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub generator_seed: u64,
    pub samples: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn split_entries(&self, split: Split) -> Vec<&ManifestEntry> {
        self.samples.iter().filter(|e| e.split == split).collect()
    }
}

/// Per-sample sidecar with every non-image ground truth.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConditionsFile {
    /// (top, left, height, width) in pixels, origin top-left.
    pub bbox: [usize; 4],
    pub palette: Vec<PaletteEntry>,
    pub garment_class: GarmentClass,
    pub ids: ConditionIds,
}

pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    hex_string(&h.finalize())
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Quantizes to 8-bit and encodes as PNG bytes.
pub fn image_to_png_bytes<T: Scalar>(img: &ImageTensor<T>) -> Result<Vec<u8>> {
    let (_, h, w) = img.data.dim();
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let p = img.pixel(y, x);
            let q = |v: T| (v.to_f64_().clamp(0.0, 1.0) * 255.0).round() as u8;
            buf.put_pixel(x as u32, y as u32, image::Rgb([q(p[0]), q(p[1]), q(p[2])]));
        }
    }
    let mut bytes = Vec::new();
    buf.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)?;
    Ok(bytes)
}

pub fn image_from_png_bytes<T: Scalar>(bytes: &[u8]) -> Result<ImageTensor<T>> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)?.to_rgb8();
    let (w, h) = img.dimensions();
    let mut out = ImageTensor::zeros(h as usize, w as usize);
    for y in 0..h {
        for x in 0..w {
            let p = img.get_pixel(x, y);
            out.set_pixel(
                y as usize,
                x as usize,
                [
                    T::from_f64(p[0] as f64 / 255.0),
                    T::from_f64(p[1] as f64 / 255.0),
                    T::from_f64(p[2] as f64 / 255.0),
                ],
            );
        }
    }
    ImageTensor::new(out.data)
}

const SAMPLE_IMAGES: [&str; 6] = [
    "image.png",
    "plain.png",
    "silhouette.png",
    "color_ref.png",
    "logo.png",
    "mask.png",
];

fn write_sample<T: Scalar>(
    root: &Path,
    split: Split,
    sample: &GarmentSample<T>,
) -> Result<ManifestEntry> {
    let dir_rel = format!("samples/{}/{:06}", split.dir_name(), sample.sample_id);
    let dir = root.join(&dir_rel);
    fs::create_dir_all(&dir)?;
    let mut files = BTreeMap::new();

    let mask_img = {
        let mut m = ImageTensor::<T>::zeros(sample.mask.height(), sample.mask.width());
        for y in 0..sample.mask.height() {
            for x in 0..sample.mask.width() {
                let v = sample.mask.data[[0, y, x]];
                m.set_pixel(y, x, [v, v, v]);
            }
        }
        m
    };
    let images: [(&str, &ImageTensor<T>); 6] = [
        ("image.png", &sample.image),
        ("plain.png", &sample.plain),
        ("silhouette.png", &sample.silhouette),
        ("color_ref.png", &sample.color_ref),
        ("logo.png", &sample.logo),
        ("mask.png", &mask_img),
    ];
    for (name, img) in images {
        let bytes = image_to_png_bytes(img)?;
        files.insert(name.to_string(), sha256_hex(&bytes));
        fs::write(dir.join(name), &bytes)?;
    }

    let caption = sample.prompt.as_bytes().to_vec();
    files.insert("caption.txt".to_string(), sha256_hex(&caption));
    fs::write(dir.join("caption.txt"), &caption)?;

    let conditions = ConditionsFile {
        bbox: [
            sample.mask.bbox.top,
            sample.mask.bbox.left,
            sample.mask.bbox.height,
            sample.mask.bbox.width,
        ],
        palette: sample.palette.clone(),
        garment_class: sample.garment_class,
        ids: sample.ids,
    };
    let cond_bytes = serde_json::to_vec_pretty(&conditions)?;
    files.insert("conditions.json".to_string(), sha256_hex(&cond_bytes));
    fs::write(dir.join("conditions.json"), &cond_bytes)?;

    Ok(ManifestEntry { id: sample.sample_id, split, dir: dir_rel, files })
}

/// Generates and writes the full dataset. The unseen split's condition
/// triples are guaranteed never to co-occur in train.
pub fn write_dataset(
    root: &Path,
    seed: u64,
    n_train: usize,
    n_seen: usize,
    n_unseen: usize,
) -> Result<Dataset> {
    fs::create_dir_all(root)?;
    let mut entries = Vec::new();
    let mut train_triples: Vec<ConditionIds> = Vec::with_capacity(n_train);
    let mut train_set: HashSet<ConditionIds> = HashSet::new();

    for i in 0..n_train {
        let mut rng = sample_rng(seed, "train", i as u64);
        let ids = ConditionIds {
            silhouette: rng.gen_range(0..N_SILHOUETTES),
            palette: rng.gen_range(0..N_PALETTES),
            logo: rng.gen_range(0..N_LOGOS),
        };
        let sample = render_sample::<f32>(i as u64, ids, &mut rng)?;
        entries.push(write_sample(root, Split::Train, &sample)?);
        train_triples.push(ids);
        train_set.insert(ids);
    }

    // Seen test split: condition triples re-drawn from the train set
    // (fresh placement boxes).
    for i in 0..n_seen {
        let mut rng = sample_rng(seed, "test_seen", i as u64);
        let ids = train_triples[rng.gen_range(0..train_triples.len())];
        let sample = render_sample::<f32>(i as u64, ids, &mut rng)?;
        entries.push(write_sample(root, Split::TestSeen, &sample)?);
    }

    // Unseen split: random recombinations rejected until the triple never
    // co-occurs in train.
    for i in 0..n_unseen {
        let mut rng = sample_rng(seed, "test_unseen", i as u64);
        let mut ids = None;
        for _ in 0..1000 {
            let cand = ConditionIds {
                silhouette: train_triples[rng.gen_range(0..train_triples.len())].silhouette,
                palette: train_triples[rng.gen_range(0..train_triples.len())].palette,
                logo: train_triples[rng.gen_range(0..train_triples.len())].logo,
            };
            if !train_set.contains(&cand) {
                ids = Some(cand);
                break;
            }
        }
        let ids = ids.ok_or_else(|| {
            GarmentError::Parameter("could not find an unseen condition triple".into())
        })?;
        let sample = render_sample::<f32>(i as u64, ids, &mut rng)?;
        entries.push(write_sample(root, Split::TestUnseen, &sample)?);
    }

    let manifest = DatasetManifest { version: MANIFEST_VERSION, generator_seed: seed, samples: entries };
    let bytes = serde_json::to_vec_pretty(&manifest)?;
    fs::write(root.join("manifest.json"), bytes)?;
    Ok(Dataset { root: root.to_path_buf(), manifest })
}

/// Opens a dataset and verifies the unseen-split disjointness invariant.
pub fn read_dataset(manifest_path: &Path) -> Result<Dataset> {
    let bytes = fs::read(manifest_path)
        .map_err(|e| GarmentError::Load(format!("manifest {manifest_path:?}: {e}")))?;
    let manifest: DatasetManifest = serde_json::from_slice(&bytes)?;
    if manifest.version != MANIFEST_VERSION {
        return Err(GarmentError::Load(format!(
            "manifest version {} unsupported",
            manifest.version
        )));
    }
    let root = manifest_path
        .parent()
        .ok_or_else(|| GarmentError::Load("manifest has no parent dir".into()))?
        .to_path_buf();
    let ds = Dataset { root, manifest };
    ds.verify_unseen_disjointness()?;
    Ok(ds)
}

impl Dataset {
    /// Loads one sample, verifying every file digest.
    pub fn load_sample(&self, entry: &ManifestEntry) -> Result<GarmentSample<f32>> {
        let dir = self.root.join(&entry.dir);
        let mut read_verified = |name: &str| -> Result<Vec<u8>> {
            let bytes = fs::read(dir.join(name))
                .map_err(|e| GarmentError::Load(format!("{name}: {e}")))?;
            let expect = entry.files.get(name).ok_or_else(|| {
                GarmentError::Corruption(format!("{name} missing from manifest entry"))
            })?;
            let got = sha256_hex(&bytes);
            if &got != expect {
                return Err(GarmentError::Corruption(format!(
                    "digest mismatch for {}/{name}",
                    entry.dir
                )));
            }
            Ok(bytes)
        };

        let mut images = Vec::with_capacity(6);
        for name in SAMPLE_IMAGES {
            images.push(image_from_png_bytes::<f32>(&read_verified(name)?)?);
        }
        let [image, plain, silhouette, color_ref, logo, _mask_img]: [ImageTensor<f32>; 6] =
            images.try_into().expect("six images");
        let prompt = String::from_utf8_lossy(&read_verified("caption.txt")?).to_string();
        let cond: ConditionsFile = serde_json::from_slice(&read_verified("conditions.json")?)?;
        let bbox = BoxPx::new(cond.bbox[0], cond.bbox[1], cond.bbox[2], cond.bbox[3]);
        let mask = MaskTensor::from_box(image.height(), image.width(), bbox)?;
        Ok(GarmentSample {
            sample_id: entry.id,
            image,
            plain,
            prompt,
            silhouette,
            color_ref,
            logo,
            mask,
            palette: cond.palette,
            garment_class: cond.garment_class,
            ids: cond.ids,
        })
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<GarmentSample<f32>>> {
        self.manifest
            .split_entries(split)
            .into_iter()
            .map(|e| self.load_sample(e))
            .collect()
    }

    /// The unseen split must share zero condition triples with train.
    pub fn verify_unseen_disjointness(&self) -> Result<()> {
        let mut train: HashSet<ConditionIds> = HashSet::new();
        for e in self.manifest.split_entries(Split::Train) {
            let cond = self.read_conditions(e)?;
            train.insert(cond.ids);
        }
        for e in self.manifest.split_entries(Split::TestUnseen) {
            let cond = self.read_conditions(e)?;
            if train.contains(&cond.ids) {
                return Err(GarmentError::Corruption(format!(
                    "unseen sample {} shares a train condition triple",
                    e.id
                )));
            }
        }
        Ok(())
    }

    fn read_conditions(&self, entry: &ManifestEntry) -> Result<ConditionsFile> {
        let bytes = fs::read(self.root.join(&entry.dir).join("conditions.json"))?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}
