//! `synth-data` and `preprocess`.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use irisnas::data::{read_manifest, write_manifest, ManifestEntry};
use irisnas::iris::{
    corpus_params, mask_to_pixels, normalize, pixels_to_mask, read_pgm, segment,
    synth_iris, write_pgm, EyeImage, SegmentParams, Segmentation, POLAR_COLS, POLAR_ROWS,
};
use irisnas::iriscode::{encode, GaborBank, ProbeGrid};
use serde::{Deserialize, Serialize};

/// Ground truth for one synthetic image, as written to `truth.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TruthEntry {
    pub path: String,
    pub mask: Option<String>,
    pub subject_id: String,
    pub segmentation: Segmentation,
    pub rotation: f64,
}

/// One row of `segmentation.json` written by `preprocess`.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct Preprocessed {
    source: String,
    polar: String,
    segmentation: Segmentation,
    valid_fraction: f64,
}

/// Manifest paths are relative to the manifest's directory.
pub fn resolve(manifest: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        manifest.parent().unwrap_or(Path::new("")).join(p)
    }
}

fn mkdir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))
}

pub fn synth_data(
    out: &Path,
    identities: usize,
    per_identity: usize,
    max_rotation_deg: f64,
    seed: u64,
) -> Result<()> {
    if identities == 0 || per_identity == 0 {
        bail!("need at least one identity and one image per identity");
    }
    mkdir(&out.join("images"))?;
    mkdir(&out.join("masks"))?;
    let mut entries = Vec::new();
    let mut truth = Vec::new();
    for id in 0..identities as u64 {
        for k in 0..per_identity as u64 {
            let params = corpus_params(id, k, seed, max_rotation_deg.to_radians());
            let eye = synth_iris(seed ^ (id * per_identity as u64 + k).wrapping_mul(0x2545_f491_4f6c_dd1d), &params)?;
            let name = format!("{id:04}_{k:02}.pgm");
            let (img, mask) = (format!("images/{name}"), format!("masks/{name}"));
            let (w, h) = (eye.image.width(), eye.image.height());
            write_pgm(&out.join(&img), w, h, eye.image.pixels())?;
            let m = eye.image.mask().expect("synthetic eyes carry a mask");
            write_pgm(&out.join(&mask), w, h, &mask_to_pixels(m))?;
            let subject_id = format!("s{id:04}");
            entries.push(ManifestEntry {
                path: img.clone(),
                subject_id: subject_id.clone(),
            });
            truth.push(TruthEntry {
                path: img,
                mask: Some(mask),
                subject_id,
                segmentation: eye.truth,
                rotation: params.rotation,
            });
        }
    }
    write_manifest(&out.join("manifest.csv"), &entries)?;
    let json = serde_json::to_string_pretty(&truth)?;
    fs::write(out.join("truth.json"), json).context("writing truth.json")?;
    eprintln!("wrote {} images to {}", entries.len(), out.display());
    Ok(())
}

fn stem(path: &str) -> String {
    let p = Path::new(path).with_extension("");
    p.to_string_lossy()
        .chars()
        .map(|c| if c == '/' || c == '\\' { '_' } else { c })
        .collect()
}

pub fn preprocess(
    manifest: &Path,
    out: &Path,
    truth: Option<&Path>,
    templates: bool,
) -> Result<()> {
    let entries = read_manifest(manifest)?;
    let truth: Vec<TruthEntry> = match truth {
        Some(p) => serde_json::from_str(
            &fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
        )
        .with_context(|| format!("parsing {}", p.display()))?,
        None => Vec::new(),
    };
    mkdir(&out.join("polar"))?;
    if templates {
        mkdir(&out.join("templates"))?;
    }
    let bank = GaborBank::default();
    let mut polar = Vec::new();
    let mut codes = Vec::new();
    let mut report = Vec::new();
    for e in &entries {
        let src = resolve(manifest, &e.path);
        let mut img: EyeImage = read_pgm(&src)?;
        let known = truth.iter().find(|t| t.path == e.path);
        let seg = match known {
            Some(t) => {
                if let Some(m) = &t.mask {
                    let mask = read_pgm(&resolve(manifest, m))?;
                    img = img.with_mask(pixels_to_mask(mask.pixels()))?;
                }
                t.segmentation
            }
            None => segment(&img, &SegmentParams::default())
                .with_context(|| format!("segmenting {}", src.display()))?,
        };
        let n = normalize(&img, &seg);
        let s = stem(&e.path);
        let p = format!("polar/{s}.pgm");
        write_pgm(&out.join(&p), POLAR_COLS, POLAR_ROWS, &n.to_gray())?;
        write_pgm(&out.join(format!("polar/{s}.mask.pgm")), POLAR_COLS, POLAR_ROWS, &mask_to_pixels(&n.mask))?;
        polar.push(ManifestEntry {
            path: p.clone(),
            subject_id: e.subject_id.clone(),
        });
        if templates {
            let t = encode(&n, &bank, ProbeGrid::default())?;
            let tp = format!("templates/{s}.bin");
            t.save(&out.join(&tp))?;
            codes.push(ManifestEntry {
                path: tp,
                subject_id: e.subject_id.clone(),
            });
        }
        let valid = n.mask.iter().filter(|v| **v).count() as f64 / n.mask.len() as f64;
        report.push(Preprocessed {
            source: e.path.clone(),
            polar: p,
            segmentation: seg,
            valid_fraction: valid,
        });
    }
    write_manifest(&out.join("manifest.csv"), &polar)?;
    if templates {
        write_manifest(&out.join("templates.csv"), &codes)?;
    }
    fs::write(out.join("segmentation.json"), serde_json::to_string_pretty(&report)?)
        .context("writing segmentation.json")?;
    eprintln!("normalized {} images into {}", polar.len(), out.display());
    Ok(())
}

/// Reads a polar manifest into network inputs reduced by `factor`.
pub fn load_polar(manifest: &Path, entries: &[ManifestEntry], factor: usize) -> Result<Vec<Vec<f32>>> {
    entries
        .iter()
        .map(|e| {
            let p = resolve(manifest, &e.path);
            let img = read_pgm(&p)?;
            if (img.width(), img.height()) != (POLAR_COLS, POLAR_ROWS) {
                bail!(
                    "{} is {}x{}, expected a {POLAR_COLS}x{POLAR_ROWS} normalized iris (run preprocess)",
                    p.display(),
                    img.width(),
                    img.height()
                );
            }
            let px: Vec<f32> = img.pixels().iter().map(|v| *v as f32).collect();
            Ok(irisnas::data::network_input(&px, POLAR_ROWS, POLAR_COLS, factor)?)
        })
        .collect()
}
