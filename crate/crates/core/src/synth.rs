//! Procedural two-camera pedestrian data, identity-disjoint splits, and
//! image-folder / manifest I/O.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::{ImageBuffer, Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::sampling::LabeledImage;
use crate::tensor::Tensor;

/// Camera-2 divergence from camera 1 is multiplied by `1 + SHIFT_GAIN * domain_shift`.
pub const SHIFT_GAIN: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraTransform {
    pub brightness_shift: f64,
    /// Radians about the grey axis.
    pub hue_rotation: f64,
    /// Maximum horizontal offset in pixels.
    pub horizontal_jitter: f64,
    pub noise_sigma: f64,
}

impl CameraTransform {
    pub const IDENTITY: CameraTransform = CameraTransform {
        brightness_shift: 0.0,
        hue_rotation: 0.0,
        horizontal_jitter: 0.0,
        noise_sigma: 0.0,
    };

    fn lerp(a: &Self, b: &Self, t: f64) -> Self {
        let f = |x: f64, y: f64| x + (y - x) * t;
        CameraTransform {
            brightness_shift: f(a.brightness_shift, b.brightness_shift),
            hue_rotation: f(a.hue_rotation, b.hue_rotation),
            horizontal_jitter: f(a.horizontal_jitter, b.horizontal_jitter).max(0.0),
            noise_sigma: f(a.noise_sigma, b.noise_sigma).max(0.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub n_identities: usize,
    pub images_per_camera: usize,
    /// `[H, W]`.
    pub image_size: [usize; 2],
    pub cameras: [CameraTransform; 2],
    /// In `[0, 1]`.
    pub domain_shift: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_identities: 80,
            images_per_camera: 1,
            image_size: [32, 32],
            cameras: [
                CameraTransform {
                    brightness_shift: 0.0,
                    hue_rotation: 0.0,
                    horizontal_jitter: 2.0,
                    noise_sigma: 0.05,
                },
                CameraTransform {
                    brightness_shift: -0.12,
                    hue_rotation: 0.45,
                    horizontal_jitter: 3.0,
                    noise_sigma: 0.07,
                },
            ],
            domain_shift: 0.0,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_identities < 2 {
            return Err(Error::Config(format!("need at least 2 identities, got {}", self.n_identities)));
        }
        if self.images_per_camera == 0 {
            return Err(Error::Config("images_per_camera must be >= 1".into()));
        }
        if self.image_size.iter().any(|&s| s < 16) {
            return Err(Error::Config(format!("image size {:?} too small to render (min 16)", self.image_size)));
        }
        if !(0.0..=1.0).contains(&self.domain_shift) {
            return Err(Error::Config(format!("domain_shift must be in [0,1], got {}", self.domain_shift)));
        }
        for c in &self.cameras {
            if !(c.noise_sigma >= 0.0) || !(c.horizontal_jitter >= 0.0) {
                return Err(Error::Config("noise_sigma and horizontal_jitter must be >= 0".into()));
            }
        }
        Ok(())
    }

    /// Camera transforms after applying `domain_shift`.
    pub fn effective_cameras(&self) -> [CameraTransform; 2] {
        let gain = 1.0 + SHIFT_GAIN * self.domain_shift;
        [self.cameras[0], CameraTransform::lerp(&self.cameras[0], &self.cameras[1], gain)]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Identity {
    torso: [f64; 3],
    legs: [f64; 3],
    skin: [f64; 3],
    /// Body width as a fraction of image width.
    aspect: f64,
    texture_phase: f64,
}

impl Identity {
    fn sample(rng: &mut ChaCha8Rng) -> Self {
        let mut color = || [rng.random_range(0.05..0.95), rng.random_range(0.05..0.95), rng.random_range(0.05..0.95)];
        let torso = color();
        let legs = color();
        let tone = rng.random_range(0.45..0.85);
        Identity {
            torso,
            legs,
            skin: [tone, tone * 0.8, tone * 0.65],
            aspect: rng.random_range(0.35..0.6),
            texture_phase: rng.random_range(0.0..std::f64::consts::TAU),
        }
    }
}

const BACKGROUND: f64 = 0.5;

fn render(id: &Identity, [h, w]: [usize; 2], dx: f64) -> Vec<[f64; 3]> {
    let mut px = vec![[BACKGROUND; 3]; h * w];
    let (hf, wf) = (h as f64, w as f64);
    let cx = wf / 2.0 + dx;
    let half = id.aspect * wf / 2.0;
    let head_half = half / 2.0;
    let gap = (wf / 32.0).max(1.0) / 2.0;
    for y in 0..h {
        let v = (y as f64 + 0.5) / hf;
        for x in 0..w {
            let u = x as f64 + 0.5 - cx;
            let c = if (0.06..0.22).contains(&v) && u.abs() < head_half {
                Some(id.skin)
            } else if (0.22..0.58).contains(&v) && u.abs() < half {
                let stripe = 0.82 + 0.18 * (std::f64::consts::TAU * y as f64 * 4.0 / hf + id.texture_phase).sin();
                Some(id.torso.map(|t| t * stripe))
            } else if (0.58..0.95).contains(&v) && u.abs() < half * 0.85 && u.abs() > gap {
                Some(id.legs)
            } else {
                None
            };
            if let Some(c) = c {
                px[y * w + x] = c;
            }
        }
    }
    px
}

fn hue_matrix(theta: f64) -> [[f64; 3]; 3] {
    let (s, c) = theta.sin_cos();
    let k = (1.0 - c) / 3.0;
    let r = (1.0f64 / 3.0).sqrt() * s;
    [[c + k, k - r, k + r], [k + r, c + k, k - r], [k - r, k + r, c + k]]
}

fn camera_image(id: &Identity, size: [usize; 2], cam: &CameraTransform, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let dx = if cam.horizontal_jitter > 0.0 {
        rng.random_range(-cam.horizontal_jitter..=cam.horizontal_jitter).round()
    } else {
        0.0
    };
    let px = render(id, size, dx);
    let m = hue_matrix(cam.hue_rotation);
    let noise = Normal::new(0.0, cam.noise_sigma).expect("sigma validated");
    let n = size[0] * size[1];
    let mut data = vec![0.0f32; 3 * n];
    for (i, p) in px.iter().enumerate() {
        for ch in 0..3 {
            let rotated = m[ch][0] * p[0] + m[ch][1] * p[1] + m[ch][2] * p[2];
            let mut v = rotated + cam.brightness_shift;
            if cam.noise_sigma > 0.0 {
                v += noise.sample(rng);
            }
            data[ch * n + i] = v.clamp(0.0, 1.0) as f32;
        }
    }
    Tensor::new(vec![3, size[0], size[1]], data).expect("consistent shape")
}

/// Identities `0..n`, each with `images_per_camera` images in cameras 1 and 2.
pub fn generate(spec: &SynthSpec) -> Result<Vec<LabeledImage>> {
    spec.validate()?;
    let cams = spec.effective_cameras();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let ids: Vec<Identity> = (0..spec.n_identities).map(|_| Identity::sample(&mut rng)).collect();
    let mut out = Vec::with_capacity(ids.len() * 2 * spec.images_per_camera);
    for (pid, id) in ids.iter().enumerate() {
        for (c, cam) in cams.iter().enumerate() {
            for _ in 0..spec.images_per_camera {
                let img = camera_image(id, spec.image_size, cam, &mut rng);
                out.push(LabeledImage::new(img, pid as u32, c as u8 + 1)?);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitProtocol {
    pub n_test_identities: usize,
    pub n_val_identities: usize,
    pub gallery_distractors: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Split {
    pub train: Vec<LabeledImage>,
    pub val: Vec<LabeledImage>,
    pub test: Vec<LabeledImage>,
    /// Camera-2 images of identities that appear only in the gallery.
    pub distractors: Vec<LabeledImage>,
}

pub fn identities(data: &[LabeledImage]) -> Vec<u32> {
    let mut ids: Vec<u32> = data.iter().map(|d| d.person_id).collect();
    ids.sort_unstable();
    ids.dedup();
    ids
}

/// Identity-disjoint partition; identities are shuffled by `protocol.seed`.
pub fn split(data: &[LabeledImage], protocol: &SplitProtocol) -> Result<Split> {
    let mut ids = identities(data);
    let held = protocol.n_test_identities + protocol.n_val_identities + protocol.gallery_distractors;
    if protocol.n_test_identities == 0 || held >= ids.len() {
        return Err(Error::Data(format!(
            "{} identities cannot supply {} test, {} val and {} distractor identities plus training data",
            ids.len(),
            protocol.n_test_identities,
            protocol.n_val_identities,
            protocol.gallery_distractors
        )));
    }
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(protocol.seed));
    let (test, rest) = ids.split_at(protocol.n_test_identities);
    let (val, rest) = rest.split_at(protocol.n_val_identities);
    let (distractors, _) = rest.split_at(protocol.gallery_distractors);
    let mut out = Split::default();
    for d in data {
        let id = &d.person_id;
        if test.contains(id) {
            out.test.push(d.clone());
        } else if val.contains(id) {
            out.val.push(d.clone());
        } else if distractors.contains(id) {
            if d.camera_id == 2 {
                out.distractors.push(d.clone());
            }
        } else {
            out.train.push(d.clone());
        }
    }
    Ok(out)
}

/// Shifts every person id by `offset`, keeping id spaces of merged sets disjoint.
pub fn offset_ids(data: &[LabeledImage], offset: u32) -> Vec<LabeledImage> {
    data.iter()
        .map(|d| LabeledImage {
            person_id: d.person_id + offset,
            ..d.clone()
        })
        .collect()
}

fn decode(path: &Path, [h, w]: [usize; 2]) -> Result<Tensor<f32>> {
    let img = image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    let img = if img.dimensions() == (w as u32, h as u32) {
        img
    } else {
        image::imageops::resize(&img, w as u32, h as u32, FilterType::Triangle)
    };
    Ok(rgb_to_tensor(&img))
}

fn rgb_to_tensor(img: &RgbImage) -> Tensor<f32> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0f32; 3 * h * w];
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            data[c * h * w + y as usize * w + x as usize] = p[c] as f32 / 255.0;
        }
    }
    Tensor::new(vec![3, h, w], data).expect("consistent shape")
}

fn tensor_to_rgb(t: &Tensor<f32>) -> RgbImage {
    let (h, w) = (t.shape()[1], t.shape()[2]);
    let d = t.data();
    ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        Rgb([0, 1, 2].map(|c| (d[c * h * w + i].clamp(0.0, 1.0) * 255.0).round() as u8))
    })
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|e| Error::io(dir, e)))
        .collect::<Result<Vec<_>>>()?;
    v.sort();
    Ok(v)
}

fn parse_dir_id<T: std::str::FromStr>(p: &Path, what: &str) -> Result<T> {
    p.file_name()
        .and_then(|n| n.to_str())
        .and_then(|n| n.parse().ok())
        .ok_or_else(|| Error::Data(format!("{}: directory name is not a {what}", p.display())))
}

/// Reads `<person_id>/<camera_id>/<image>` and resizes to `size` (bilinear).
pub fn load_folder(root: &Path, size: [usize; 2]) -> Result<Vec<LabeledImage>> {
    let mut out = Vec::new();
    for person in sorted_entries(root)? {
        if !person.is_dir() {
            return Err(Error::Data(format!("{}: expected a person directory", person.display())));
        }
        let pid: u32 = parse_dir_id(&person, "person id")?;
        for cam in sorted_entries(&person)? {
            let cid: u8 = parse_dir_id(&cam, "camera id")?;
            for file in sorted_entries(&cam)? {
                out.push(LabeledImage::new(decode(&file, size)?, pid, cid)?);
            }
        }
    }
    if out.is_empty() {
        return Err(Error::Data(format!("{}: no images found", root.display())));
    }
    Ok(out)
}

pub const MANIFEST: &str = "manifest.csv";
const MANIFEST_HEADER: &str = "path,person_id,camera_id";

/// Writes PNGs in the folder layout plus `manifest.csv`.
pub fn export_dataset(data: &[LabeledImage], dir: &Path) -> Result<()> {
    let mut counters: BTreeMap<(u32, u8), usize> = BTreeMap::new();
    let mut manifest = String::from(MANIFEST_HEADER);
    manifest.push('\n');
    for d in data {
        let n = counters.entry((d.person_id, d.camera_id)).or_default();
        let rel = format!("{}/{}/{:04}.png", d.person_id, d.camera_id, *n);
        *n += 1;
        let path = dir.join(&rel);
        fs::create_dir_all(path.parent().expect("has parent")).map_err(|e| Error::io(&path, e))?;
        tensor_to_rgb(&d.image)
            .save(&path)
            .map_err(|source| Error::Image { path: path.clone(), source })?;
        manifest.push_str(&format!("{rel},{},{}\n", d.person_id, d.camera_id));
    }
    let mpath = dir.join(MANIFEST);
    fs::write(&mpath, manifest).map_err(|e| Error::io(&mpath, e))
}

/// Reads a dataset through its manifest; paths are relative to `dir`.
pub fn import_dataset(dir: &Path, size: [usize; 2]) -> Result<Vec<LabeledImage>> {
    let mpath = dir.join(MANIFEST);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(MANIFEST_HEADER) {
        return Err(Error::Data(format!("{}: expected header '{MANIFEST_HEADER}'", mpath.display())));
    }
    let mut out = Vec::new();
    for (n, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let bad = || Error::Data(format!("{}:{}: malformed record '{line}'", mpath.display(), n + 2));
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != 3 {
            return Err(bad());
        }
        let pid = f[1].parse().map_err(|_| bad())?;
        let cid = f[2].parse().map_err(|_| bad())?;
        out.push(LabeledImage::new(decode(&dir.join(f[0]), size)?, pid, cid)?);
    }
    if out.is_empty() {
        return Err(Error::Data(format!("{}: manifest lists no images", mpath.display())));
    }
    Ok(out)
}

/// Cross-camera rank-1 of nearest-neighbour matching on raw pixels.
pub fn raw_pixel_rank1(data: &[LabeledImage]) -> f64 {
    let first = |pid: u32, cam: u8| data.iter().find(|d| d.person_id == pid && d.camera_id == cam);
    let ids = identities(data);
    let pairs: Vec<_> = ids.iter().filter_map(|&i| Some((first(i, 1)?, first(i, 2)?))).collect();
    let dist = |a: &Tensor<f32>, b: &Tensor<f32>| -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| ((x - y) as f64).powi(2)).sum()
    };
    let hits = pairs
        .iter()
        .filter(|(q, g)| {
            let d0 = dist(&q.image, &g.image);
            pairs.iter().all(|(_, o)| std::ptr::eq(*o, *g) || dist(&q.image, &o.image) > d0)
        })
        .count();
    hits as f64 / pairs.len().max(1) as f64
}
