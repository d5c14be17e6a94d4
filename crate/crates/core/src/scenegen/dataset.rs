//! On-disk benchmark: PPM images, PGM labels and JSON-lines manifests.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{
    corrupt, generate_intermediate, render_clean, CorruptionParams, Domain, ImageSample, LabelMap, Scene, SceneError,
    SceneSpec,
};
use crate::imageio;
use crate::rng::Stream;

pub const TRAIN_MANIFEST: &str = "manifest.jsonl";
pub const EVAL_MANIFEST: &str = "eval_manifest.jsonl";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub seed: u64,
    pub size: usize,
    pub source: usize,
    pub m1: usize,
    pub m2: usize,
    pub target: usize,
    /// Held-out labeled target images per adverse scene.
    pub eval_per_scene: usize,
    /// Share of M1 built from SSIM-selected slight-weather candidates.
    pub m1_generated_fraction: f32,
    pub n_candidates: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            size: 64,
            source: 64,
            m1: 64,
            m2: 32,
            target: 64,
            eval_per_scene: 16,
            m1_generated_fraction: 0.5,
            n_candidates: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub image_path: String,
    pub label_path: Option<String>,
    pub domain: Domain,
    pub scene: Scene,
}

/// Entries plus the directory their relative paths resolve against.
#[derive(Clone, Debug)]
pub struct Manifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SceneError + '_ {
    move |source| SceneError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn seed_for(seed: u64, split: &str, i: usize) -> u64 {
    Stream::new(seed, &format!("scene/{split}/{i}")).next_u64()
}

fn render(seed: u64, split: &str, i: usize, size: usize) -> Result<ImageSample, SceneError> {
    render_clean(&SceneSpec::random(seed_for(seed, split, i), size))
}

fn full(img: &ImageSample, kind: Scene, seed: u64) -> Result<ImageSample, SceneError> {
    corrupt(
        img,
        &CorruptionParams {
            kind,
            intensity: 1.0,
            seed,
        },
    )
}

fn is_generated(i: usize, fraction: f32) -> bool {
    let f = fraction.clamp(0.0, 1.0) as f64;
    ((i + 1) as f64 * f).floor() > (i as f64 * f).floor()
}

/// Generate the training and evaluation samples in memory.
pub fn generate_samples(cfg: &DatasetConfig) -> Result<(Vec<ImageSample>, Vec<ImageSample>), SceneError> {
    let s = cfg.seed;
    let mut train = Vec::with_capacity(cfg.source + cfg.m1 + cfg.m2 + cfg.target);
    for i in 0..cfg.source {
        let mut x = render(s, "source", i, cfg.size)?;
        x.id = format!("src-{i:04}");
        train.push(x);
    }
    let easy = [Scene::Fog, Scene::Rain, Scene::Snow];
    for i in 0..cfg.m1 {
        let kind = easy[i % 3];
        let mut x = if is_generated(i, cfg.m1_generated_fraction) {
            let mut reference = render(s, "m1-ref", i, cfg.size)?;
            reference.domain = Domain::Target;
            let mut st = Stream::new(s, &format!("m1-gen/{i}"));
            generate_intermediate(&reference, kind, cfg.n_candidates, &mut st)?.sample
        } else {
            let base = render(s, "m1", i, cfg.size)?;
            let mut st = Stream::new(s, &format!("m1-corrupt/{i}"));
            let intensity = st.uniform_range(0.3, 0.6);
            corrupt(
                &base,
                &CorruptionParams {
                    kind,
                    intensity,
                    seed: st.next_u64(),
                },
            )?
        };
        x.domain = Domain::M1;
        x.label = None;
        x.id = format!("m1-{i:04}");
        train.push(x);
    }
    for i in 0..cfg.m2 {
        let mut x = full(
            &render(s, "m2", i, cfg.size)?,
            Scene::Night,
            seed_for(s, "m2-corrupt", i),
        )?;
        x.domain = Domain::M2;
        x.label = None;
        x.id = format!("m2-{i:04}");
        train.push(x);
    }
    for i in 0..cfg.target {
        let kind = Scene::ADVERSE[i % 4];
        let mut x = full(
            &render(s, "target", i, cfg.size)?,
            kind,
            seed_for(s, "target-corrupt", i),
        )?;
        x.domain = Domain::Target;
        x.label = None;
        x.id = format!("tgt-{i:04}");
        train.push(x);
    }
    let mut eval = Vec::with_capacity(4 * cfg.eval_per_scene);
    for kind in Scene::ADVERSE {
        let split = format!("eval-{}", kind.name());
        for j in 0..cfg.eval_per_scene {
            let mut x = full(
                &render(s, &split, j, cfg.size)?,
                kind,
                seed_for(s, &format!("{split}-corrupt"), j),
            )?;
            x.domain = Domain::Target;
            x.id = format!("{split}-{j:04}");
            eval.push(x);
        }
    }
    Ok((train, eval))
}

fn write_sample(dir: &Path, x: &ImageSample) -> Result<ManifestEntry, SceneError> {
    let image_path = format!("images/{}.ppm", x.id);
    let p = dir.join(&image_path);
    fs::write(&p, imageio::encode_ppm(&x.image)).map_err(io_err(&p))?;
    let label_path = match &x.label {
        Some(l) => {
            let rel = format!("labels/{}.pgm", x.id);
            let p = dir.join(&rel);
            fs::write(&p, imageio::encode_pgm(&l.data, l.h, l.w)).map_err(io_err(&p))?;
            Some(rel)
        }
        None => None,
    };
    Ok(ManifestEntry {
        id: x.id.clone(),
        image_path,
        label_path,
        domain: x.domain,
        scene: x.scene,
    })
}

/// Write a manifest via a temporary file and rename, so a failed write
/// never leaves a truncated manifest behind.
fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<(), SceneError> {
    let tmp = path.with_extension("jsonl.tmp");
    let result = (|| {
        let mut f = fs::File::create(&tmp).map_err(io_err(&tmp))?;
        for e in entries {
            let line = serde_json::to_string(e).expect("manifest entries serialize");
            writeln!(f, "{line}").map_err(io_err(&tmp))?;
        }
        f.sync_all().map_err(io_err(&tmp))?;
        fs::rename(&tmp, path).map_err(io_err(path))
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result
}

/// Generate the benchmark under `out`: `manifest.jsonl` (training split,
/// labels only on source) and `eval_manifest.jsonl` (held-out labeled
/// target images). Returns the training manifest.
pub fn build_dataset(cfg: &DatasetConfig, out: &Path) -> Result<Manifest, SceneError> {
    let (train, eval) = generate_samples(cfg)?;
    for sub in ["images", "labels"] {
        let d = out.join(sub);
        fs::create_dir_all(&d).map_err(io_err(&d))?;
    }
    let train_entries = train
        .iter()
        .map(|x| write_sample(out, x))
        .collect::<Result<Vec<_>, _>>()?;
    let eval_entries = eval
        .iter()
        .map(|x| write_sample(out, x))
        .collect::<Result<Vec<_>, _>>()?;
    let cfg_path = out.join("dataset.json");
    fs::write(&cfg_path, serde_json::to_vec_pretty(cfg).expect("config serializes")).map_err(io_err(&cfg_path))?;
    write_manifest(&out.join(EVAL_MANIFEST), &eval_entries)?;
    write_manifest(&out.join(TRAIN_MANIFEST), &train_entries)?;
    Ok(Manifest {
        root: out.to_path_buf(),
        entries: train_entries,
    })
}

pub fn read_manifest(path: &Path) -> Result<Manifest, SceneError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let e: ManifestEntry = serde_json::from_str(line).map_err(|e| SceneError::Manifest {
            path: path.display().to_string(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        entries.push(e);
    }
    Ok(Manifest {
        root: path.parent().unwrap_or(Path::new(".")).to_path_buf(),
        entries,
    })
}

pub fn load_sample(root: &Path, e: &ManifestEntry) -> Result<ImageSample, SceneError> {
    let wrap = |msg: String| SceneError::Sample { id: e.id.clone(), msg };
    let image = imageio::read_ppm(&root.join(&e.image_path)).map_err(|err| wrap(err.to_string()))?;
    let label = match &e.label_path {
        Some(p) => {
            let (data, h, w) = imageio::read_pgm(&root.join(p)).map_err(|err| wrap(err.to_string()))?;
            if (h, w) != (image.shape()[1], image.shape()[2]) {
                return Err(wrap(format!("label {h}x{w} does not match image")));
            }
            Some(LabelMap { h, w, data })
        }
        None => None,
    };
    Ok(ImageSample {
        id: e.id.clone(),
        image,
        label,
        domain: e.domain,
        scene: e.scene,
    })
}

pub fn load_manifest(m: &Manifest) -> Result<Vec<ImageSample>, SceneError> {
    m.entries.iter().map(|e| load_sample(&m.root, e)).collect()
}
