//! Positive pairs, triplets, mirroring and epoch batching.

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    /// `[3, H, W]`, values in `[0, 1]`.
    pub image: Tensor<f32>,
    pub person_id: u32,
    /// 1 or 2.
    pub camera_id: u8,
    pub mirrored: bool,
}

impl LabeledImage {
    pub fn new(image: Tensor<f32>, person_id: u32, camera_id: u8) -> Result<Self> {
        if !(1..=2).contains(&camera_id) {
            return Err(Error::Data(format!("camera id must be 1 or 2, got {camera_id}")));
        }
        if image.shape().len() != 3 {
            return Err(Error::shape("labeled image", format!("expected [C,H,W], got {:?}", image.shape())));
        }
        Ok(LabeledImage {
            image,
            person_id,
            camera_id,
            mirrored: false,
        })
    }
}

/// Indices into the dataset: anchor (A, camera 1), positive (A, camera 2),
/// negative (B ≠ A, camera 2).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

impl Triplet {
    pub fn check(&self, data: &[LabeledImage]) -> Result<()> {
        let get = |i: usize| data.get(i).ok_or_else(|| Error::Data(format!("triplet index {i} out of range")));
        let (a, p, n) = (get(self.anchor)?, get(self.positive)?, get(self.negative)?);
        if a.person_id != p.person_id || n.person_id == a.person_id {
            return Err(Error::Data(format!("bad identities in {self:?}")));
        }
        if p.camera_id != n.camera_id || a.camera_id == p.camera_id {
            return Err(Error::Data(format!("bad cameras in {self:?}")));
        }
        Ok(())
    }
}

/// Cross-camera same-person pairs `(camera-1 index, camera-2 index)`,
/// ordered by person id, then image index.
pub fn enumerate_positive_pairs(data: &[LabeledImage]) -> Vec<(usize, usize)> {
    let mut ids: Vec<u32> = data.iter().map(|d| d.person_id).collect();
    ids.sort_unstable();
    ids.dedup();
    let mut pairs = Vec::new();
    for id in ids {
        let of_cam = |c: u8| -> Vec<usize> {
            (0..data.len())
                .filter(|&i| data[i].person_id == id && data[i].camera_id == c)
                .collect()
        };
        let (c1, c2) = (of_cam(1), of_cam(2));
        if c1.is_empty() || c2.is_empty() {
            log::warn!("person {id} appears in only one camera; no positive pairs");
            continue;
        }
        for &a in &c1 {
            for &b in &c2 {
                pairs.push((a, b));
            }
        }
    }
    pairs
}

#[derive(Debug, Clone, PartialEq)]
pub struct TripletSet {
    pub triplets: Vec<Triplet>,
    /// Pairs with fewer than `k` negative candidates, sampled with replacement.
    pub short_pairs: usize,
}

/// `k` triplets per positive pair, negatives drawn without replacement from
/// other identities in the positive's camera.
pub fn make_triplets(pairs: &[(usize, usize)], data: &[LabeledImage], k: usize, seed: u64) -> Result<TripletSet> {
    if k == 0 {
        return Err(Error::InvalidArgument("triplets per pair must be >= 1".into()));
    }
    let mut ids: Vec<u32> = data.iter().map(|d| d.person_id).collect();
    ids.sort_unstable();
    ids.dedup();
    if ids.len() < 2 {
        return Err(Error::Data(format!("need at least 2 identities for negatives, found {}", ids.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = TripletSet {
        triplets: Vec::with_capacity(pairs.len() * k),
        short_pairs: 0,
    };
    for &(a, p) in pairs {
        let (anchor, pos) = (&data[a], &data[p]);
        if anchor.person_id != pos.person_id || anchor.camera_id == pos.camera_id {
            return Err(Error::Data(format!("({a}, {p}) is not a cross-camera positive pair")));
        }
        let candidates: Vec<usize> = (0..data.len())
            .filter(|&i| data[i].camera_id == pos.camera_id && data[i].person_id != anchor.person_id)
            .collect();
        if candidates.is_empty() {
            return Err(Error::Data(format!("no negatives in camera {} for person {}", pos.camera_id, pos.person_id)));
        }
        let picks: Vec<usize> = if candidates.len() >= k {
            sample(&mut rng, candidates.len(), k).into_iter().map(|i| candidates[i]).collect()
        } else {
            out.short_pairs += 1;
            (0..k).map(|_| candidates[rng.random_range(0..candidates.len())]).collect()
        };
        out.triplets.extend(picks.into_iter().map(|negative| Triplet {
            anchor: a,
            positive: p,
            negative,
        }));
    }
    if out.short_pairs > 0 {
        log::warn!("{} positive pairs had fewer than {k} negatives; sampled with replacement", out.short_pairs);
    }
    Ok(out)
}

/// Horizontal flip of a `[C, H, W]` image.
pub fn mirror_image(img: &Tensor<f32>) -> Tensor<f32> {
    let (w, src) = (img.shape()[2], img.data());
    let mut out = Vec::with_capacity(src.len());
    for row in src.chunks_exact(w) {
        out.extend(row.iter().rev());
    }
    Tensor::new(img.shape().to_vec(), out).expect("same shape")
}

/// Each image followed by its mirrored twin.
pub fn mirror_augment(data: &[LabeledImage]) -> Vec<LabeledImage> {
    let mut out = Vec::with_capacity(2 * data.len());
    for d in data {
        out.push(d.clone());
        out.push(LabeledImage {
            image: mirror_image(&d.image),
            mirrored: !d.mirrored,
            ..d.clone()
        });
    }
    out
}

/// Shuffles `items` by `(seed, epoch)` and cuts batches of `batch_size`;
/// the final partial batch is kept.
pub fn batch_iter<T: Clone>(items: &[T], batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<T>>> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be >= 1".into()));
    }
    if items.is_empty() {
        return Err(Error::Data("cannot batch an empty triplet list".into()));
    }
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    order.shuffle(&mut rng);
    Ok(order
        .chunks(batch_size)
        .map(|c| c.iter().map(|&i| items[i].clone()).collect())
        .collect())
}
