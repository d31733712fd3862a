//! Seeded multi-aspect paired data.
//!
//! A world holds well-separated unit prototypes, one per aspect. Each image
//! shows a random subset of aspects (one noisy local row per aspect) and each
//! of its captions describes a random sub-subset of those aspects, so a single
//! image matches several partially overlapping captions.

use std::fs;
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::framing;
use crate::numgrad::Matrix;

pub const FEATURE_MAGIC: &[u8; 4] = b"SSF1";
const FORMAT_VERSION: u32 = 1;

/// Largest pairwise prototype cosine accepted by rejection sampling.
pub const MAX_PROTOTYPE_COSINE: f64 = 0.5;
const MAX_REJECTIONS: usize = 100_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub n_aspects: usize,
    pub d_raw: usize,
    pub aspects_per_image: usize,
    pub aspects_per_caption: usize,
    pub captions_per_image: usize,
    pub noise_sigma: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            n_aspects: 8,
            d_raw: 32,
            aspects_per_image: 4,
            aspects_per_caption: 2,
            captions_per_image: 5,
            noise_sigma: 0.05,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_raw == 0 {
            return Err(invalid("d_raw must be positive"));
        }
        if self.aspects_per_image == 0 || self.aspects_per_caption == 0 {
            return Err(invalid("aspect counts must be positive"));
        }
        if self.aspects_per_image > self.n_aspects {
            return Err(invalid(format!(
                "aspects_per_image ({}) exceeds n_aspects ({})",
                self.aspects_per_image, self.n_aspects
            )));
        }
        if self.aspects_per_caption > self.aspects_per_image {
            return Err(invalid(format!(
                "aspects_per_caption ({}) exceeds aspects_per_image ({})",
                self.aspects_per_caption, self.aspects_per_image
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(invalid(format!(
                "noise_sigma must be finite and >= 0, got {}",
                self.noise_sigma
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AspectWorld {
    pub config: WorldConfig,
    /// `n_aspects x d_raw`, unit rows.
    pub prototypes: Matrix,
}

impl AspectWorld {
    /// Draws prototypes one at a time, rejecting candidates too close to an
    /// accepted one.
    pub fn sample<R: Rng>(config: WorldConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.d_raw;
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(config.n_aspects);
        let mut rejections = 0;
        while rows.len() < config.n_aspects {
            let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-12 {
                continue;
            }
            v.iter_mut().for_each(|x| *x /= norm);
            let ok = rows
                .iter()
                .all(|r| r.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>() < MAX_PROTOTYPE_COSINE);
            if ok {
                rows.push(v);
            } else {
                rejections += 1;
                if rejections > MAX_REJECTIONS {
                    return Err(invalid(format!(
                        "cannot place {} prototypes with pairwise cosine < {MAX_PROTOTYPE_COSINE} in {d} dims",
                        config.n_aspects
                    )));
                }
            }
        }
        let prototypes = Matrix::from_vec(rows.len(), d, rows.concat())?;
        Ok(Self { config, prototypes })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: usize,
    /// Ground-truth aspects, in local-row order.
    pub aspects: Vec<usize>,
    #[serde(skip)]
    pub locals: Matrix,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub id: usize,
    pub image_id: usize,
    /// Ground-truth aspects, in local-row order; a subset of the image's.
    pub aspects: Vec<usize>,
    #[serde(skip)]
    pub locals: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub world: AspectWorld,
    pub seed: u64,
    pub images: Vec<ImageRecord>,
    pub captions: Vec<CaptionRecord>,
}

/// A borrowed image-caption pair.
#[derive(Clone, Copy, Debug)]
pub struct PairedSample<'a> {
    pub image: &'a ImageRecord,
    pub caption: &'a CaptionRecord,
}

/// Generates a dataset. The result depends only on `(config, n_images, seed)`.
pub fn generate(config: WorldConfig, n_images: usize, seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let world = AspectWorld::sample(config, &mut rng)?;
    let c = &world.config;
    let noise = Normal::new(0.0, c.noise_sigma).map_err(|e| invalid(e.to_string()))?;
    let noisy_row = |rng: &mut ChaCha8Rng, aspect: usize| -> Vec<f64> {
        world
            .prototypes
            .row(aspect)
            .iter()
            .map(|p| p + noise.sample(rng))
            .collect()
    };

    let mut images = Vec::with_capacity(n_images);
    let mut captions = Vec::with_capacity(n_images * c.captions_per_image);
    for id in 0..n_images {
        let aspects = index::sample(&mut rng, c.n_aspects, c.aspects_per_image).into_vec();
        let rows: Vec<f64> = aspects
            .iter()
            .flat_map(|&a| noisy_row(&mut rng, a))
            .collect();
        let locals = Matrix::from_vec(aspects.len(), c.d_raw, rows)?;
        for _ in 0..c.captions_per_image {
            let mut pick =
                index::sample(&mut rng, c.aspects_per_image, c.aspects_per_caption).into_vec();
            pick.sort_unstable();
            let cap_aspects: Vec<usize> = pick.iter().map(|&i| aspects[i]).collect();
            let rows: Vec<f64> = cap_aspects
                .iter()
                .flat_map(|&a| noisy_row(&mut rng, a))
                .collect();
            captions.push(CaptionRecord {
                id: captions.len(),
                image_id: id,
                aspects: cap_aspects,
                locals: Matrix::from_vec(pick.len(), c.d_raw, rows)?,
            });
        }
        images.push(ImageRecord {
            id,
            aspects,
            locals,
        });
    }
    Ok(Dataset {
        world,
        seed,
        images,
        captions,
    })
}

impl Dataset {
    pub fn d_raw(&self) -> usize {
        self.world.config.d_raw
    }

    pub fn pairs(&self) -> impl Iterator<Item = PairedSample<'_>> {
        self.captions.iter().map(move |caption| PairedSample {
            image: &self.images[caption.image_id],
            caption,
        })
    }

    /// Caption indices of each image.
    pub fn captions_by_image(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.images.len()];
        for (j, c) in self.captions.iter().enumerate() {
            out[c.image_id].push(j);
        }
        out
    }

    /// `images x captions` 0/1 ground-truth relevance.
    pub fn relevance(&self) -> Matrix {
        let mut m = Matrix::zeros(self.images.len(), self.captions.len());
        for (j, c) in self.captions.iter().enumerate() {
            m[(c.image_id, j)] = 1.0;
        }
        m
    }

    /// Keeps the images with index in `range` and their captions, renumbered
    /// from zero.
    pub fn slice_images(&self, range: std::ops::Range<usize>) -> Dataset {
        let images: Vec<ImageRecord> = self.images[range.clone()]
            .iter()
            .enumerate()
            .map(|(i, im)| ImageRecord {
                id: i,
                ..im.clone()
            })
            .collect();
        let captions = self
            .captions
            .iter()
            .filter(|c| range.contains(&c.image_id))
            .enumerate()
            .map(|(j, c)| CaptionRecord {
                id: j,
                image_id: c.image_id - range.start,
                ..c.clone()
            })
            .collect();
        Dataset {
            world: self.world.clone(),
            seed: self.seed,
            images,
            captions,
        }
    }

    /// Train/test split: the last `round(test_fraction * n)` images are held out.
    pub fn split(&self, test_fraction: f64) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&test_fraction) {
            return Err(invalid(format!(
                "test_fraction must be in [0, 1), got {test_fraction}"
            )));
        }
        let n = self.images.len();
        let n_test = (test_fraction * n as f64).round() as usize;
        let cut = n - n_test;
        Ok((self.slice_images(0..cut), self.slice_images(cut..n)))
    }

    fn check(&self) -> Result<()> {
        let d = self.d_raw();
        for im in &self.images {
            if im.locals.cols() != d || im.locals.rows() == 0 {
                return Err(Error::Malformed(format!(
                    "image {} has locals {:?}",
                    im.id,
                    im.locals.shape()
                )));
            }
        }
        for c in &self.captions {
            if c.locals.cols() != d || c.locals.rows() == 0 {
                return Err(Error::Malformed(format!(
                    "caption {} has locals {:?}",
                    c.id,
                    c.locals.shape()
                )));
            }
            if c.image_id >= self.images.len() {
                return Err(Error::Malformed(format!(
                    "caption {} refers to missing image {}",
                    c.id, c.image_id
                )));
            }
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct FileHeader {
    version: u32,
    seed: u64,
    n_images: usize,
    n_captions: usize,
    d_raw: usize,
    world: WorldConfig,
    /// Rows of the prototype block at the start of the payload.
    n_prototypes: usize,
    image_rows: Vec<usize>,
    caption_rows: Vec<usize>,
    images: Vec<ImageRecord>,
    captions: Vec<CaptionRecord>,
}

/// Serializes a dataset: prototypes, then image locals, then caption locals.
pub fn to_bytes(ds: &Dataset) -> Result<Vec<u8>> {
    ds.check()?;
    let header = FileHeader {
        version: FORMAT_VERSION,
        seed: ds.seed,
        n_images: ds.images.len(),
        n_captions: ds.captions.len(),
        d_raw: ds.d_raw(),
        world: ds.world.config.clone(),
        n_prototypes: ds.world.prototypes.rows(),
        image_rows: ds.images.iter().map(|i| i.locals.rows()).collect(),
        caption_rows: ds.captions.iter().map(|c| c.locals.rows()).collect(),
        images: ds.images.clone(),
        captions: ds.captions.clone(),
    };
    let mut payload = ds.world.prototypes.as_slice().to_vec();
    for im in &ds.images {
        payload.extend_from_slice(im.locals.as_slice());
    }
    for c in &ds.captions {
        payload.extend_from_slice(c.locals.as_slice());
    }
    Ok(framing::encode(
        FEATURE_MAGIC,
        &serde_json::to_vec(&header)?,
        &payload,
    ))
}

pub fn from_bytes(bytes: &[u8]) -> Result<Dataset> {
    let (header, payload) = framing::decode(FEATURE_MAGIC, bytes)?;
    let h: FileHeader = serde_json::from_slice(header)?;
    if h.version != FORMAT_VERSION {
        return Err(Error::Version {
            found: format!("SSF1 v{}", h.version),
            expected: format!("SSF1 v{FORMAT_VERSION}"),
        });
    }
    if h.images.len() != h.n_images
        || h.image_rows.len() != h.n_images
        || h.captions.len() != h.n_captions
        || h.caption_rows.len() != h.n_captions
    {
        return Err(Error::Malformed(
            "record counts disagree with header".into(),
        ));
    }
    let values = framing::read_f64s(payload);
    let d = h.d_raw;
    let expected = d
        * (h.n_prototypes
            + h.image_rows.iter().sum::<usize>()
            + h.caption_rows.iter().sum::<usize>());
    if values.len() != expected {
        return Err(Error::Truncated(format!(
            "payload holds {} values, header announces {expected}",
            values.len()
        )));
    }
    let mut cursor = 0;
    let mut take = |rows: usize| -> Result<Matrix> {
        let m = Matrix::from_vec(rows, d, values[cursor..cursor + rows * d].to_vec())?;
        cursor += rows * d;
        Ok(m)
    };
    let prototypes = take(h.n_prototypes)?;
    let mut images = h.images;
    for (im, &r) in images.iter_mut().zip(&h.image_rows) {
        im.locals = take(r)?;
    }
    let mut captions = h.captions;
    for (c, &r) in captions.iter_mut().zip(&h.caption_rows) {
        c.locals = take(r)?;
    }
    let ds = Dataset {
        world: AspectWorld {
            config: h.world,
            prototypes,
        },
        seed: h.seed,
        images,
        captions,
    };
    ds.check()?;
    Ok(ds)
}

pub fn save_features(path: &Path, ds: &Dataset) -> Result<()> {
    framing::write_file(path, &to_bytes(ds)?)
}

pub fn load_features(path: &Path) -> Result<Dataset> {
    from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> WorldConfig {
        WorldConfig {
            d_raw: 12,
            ..WorldConfig::default()
        }
    }

    #[test]
    fn prototypes_unit_and_separated() {
        let ds = generate(small(), 0, 3).unwrap();
        let p = &ds.world.prototypes;
        for i in 0..p.rows() {
            let n: f64 = p.row(i).iter().map(|x| x * x).sum();
            assert!((n - 1.0).abs() < 1e-12);
            for j in 0..i {
                let c: f64 = p.row(i).iter().zip(p.row(j)).map(|(a, b)| a * b).sum();
                assert!(c < MAX_PROTOTYPE_COSINE);
            }
        }
    }

    #[test]
    fn noiseless_full_caption_is_row_subset() {
        let cfg = WorldConfig {
            noise_sigma: 0.0,
            aspects_per_caption: 4,
            ..small()
        };
        let ds = generate(cfg, 10, 1).unwrap();
        for pair in ds.pairs() {
            for r in 0..pair.caption.locals.rows() {
                let row = pair.caption.locals.row(r);
                assert!((0..pair.image.locals.rows()).any(|s| pair.image.locals.row(s) == row));
            }
        }
    }

    #[test]
    fn caption_aspects_are_image_subsets() {
        let ds = generate(small(), 20, 2).unwrap();
        for pair in ds.pairs() {
            assert!(pair
                .caption
                .aspects
                .iter()
                .all(|a| pair.image.aspects.contains(a)));
            let mut a = pair.image.aspects.clone();
            a.sort_unstable();
            a.dedup();
            assert_eq!(a.len(), 4);
        }
    }

    #[test]
    fn deterministic_under_seed() {
        let a = to_bytes(&generate(small(), 15, 9).unwrap()).unwrap();
        let b = to_bytes(&generate(small(), 15, 9).unwrap()).unwrap();
        assert_eq!(a, b);
        let c = to_bytes(&generate(small(), 15, 10).unwrap()).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn counting() {
        let ds = generate(small(), 100, 4).unwrap();
        assert_eq!(ds.images.len(), 100);
        assert_eq!(ds.captions.len(), 500);
        assert_eq!(ds.relevance().sum(), 500.0);
    }

    #[test]
    fn infeasible_counts_rejected() {
        let cfg = WorldConfig {
            aspects_per_image: 9,
            ..small()
        };
        assert!(generate(cfg, 1, 0).is_err());
    }

    #[test]
    fn round_trip_and_corruption() {
        let ds = generate(small(), 7, 5).unwrap();
        let bytes = to_bytes(&ds).unwrap();
        assert_eq!(from_bytes(&bytes).unwrap(), ds);
        let mut bad = bytes.clone();
        let i = bytes.len() - 30;
        bad[i] ^= 0x10;
        assert!(matches!(from_bytes(&bad), Err(Error::Checksum { .. })));
        assert!(matches!(
            from_bytes(&bytes[..bytes.len() - 9]),
            Err(Error::Checksum { .. } | Error::Truncated(_))
        ));
    }

    #[test]
    fn empty_dataset_round_trips() {
        let ds = generate(small(), 0, 5).unwrap();
        let back = from_bytes(&to_bytes(&ds).unwrap()).unwrap();
        assert!(back.images.is_empty() && back.captions.is_empty());
        assert_eq!(back, ds);
    }

    #[test]
    fn split_keeps_caption_links() {
        let ds = generate(small(), 10, 6).unwrap();
        let (train, test) = ds.split(0.2).unwrap();
        assert_eq!((train.images.len(), test.images.len()), (8, 2));
        assert_eq!(test.captions.len(), 10);
        assert_eq!(test.images[1].locals, ds.images[9].locals);
        assert!(test.captions.iter().all(|c| c.image_id < 2));
        assert_eq!(test.captions[9].locals, ds.captions[49].locals);
    }

    #[test]
    fn caption_subsets_uniform() {
        // 4 choose 2 = 6 subsets, 5 degrees of freedom; 20.515 is the
        // p = 0.001 critical value.
        let ds = generate(small(), 2000, 77).unwrap();
        let mut counts = [0usize; 16];
        let draws = ds.captions.len();
        for pair in ds.pairs() {
            let mask: usize = pair
                .caption
                .aspects
                .iter()
                .map(|a| 1 << pair.image.aspects.iter().position(|b| b == a).unwrap())
                .sum();
            counts[mask] += 1;
        }
        let observed: Vec<usize> = counts.iter().copied().filter(|&c| c > 0).collect();
        assert_eq!(observed.len(), 6);
        let e = draws as f64 / 6.0;
        let chi2: f64 = observed.iter().map(|&o| (o as f64 - e).powi(2) / e).sum();
        assert!(chi2 < 20.515, "chi2 = {chi2}");
    }
}
