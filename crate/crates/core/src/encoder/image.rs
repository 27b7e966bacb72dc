//! Image features standing in for a vision tower: a coarse RGB histogram when
//! pixels are available, otherwise a seeded pseudo-feature keyed by item id.

use std::path::Path;

use rand_distr::{Distribution, StandardNormal};

use crate::corpus::Item;
use crate::error::{Error, Result};
use crate::rng;

pub const HISTOGRAM_BINS: usize = 27;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ImageSource<'a> {
    Pixels(&'a [u8]),
    ItemId(&'a str),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureMode {
    Histogram,
    Hash,
}

/// Featurize one image source into a unit vector of length `d_img`.
/// Undecodable pixels fall back to hashing the bytes.
pub fn image_featurize(source: ImageSource<'_>, d_img: usize, seed: u64) -> Result<(Vec<f64>, FeatureMode)> {
    if d_img < 4 {
        return Err(Error::Config(format!("d_img must be >= 4, got {d_img}")));
    }
    match source {
        ImageSource::Pixels(bytes) => match histogram_features(bytes, d_img) {
            Some(v) => Ok((v, FeatureMode::Histogram)),
            None => Ok((hash_features(&hex_key(bytes), d_img, seed), FeatureMode::Hash)),
        },
        ImageSource::ItemId(id) => Ok((hash_features(id, d_img, seed), FeatureMode::Hash)),
    }
}

fn hex_key(bytes: &[u8]) -> String {
    crate::io::sha256_hex(bytes)
}

/// 3x3x3 RGB histogram resampled to `d_img` and L2-normalized.
pub fn histogram_features(bytes: &[u8], d_img: usize) -> Option<Vec<f64>> {
    let img = image::load_from_memory(bytes).ok()?.to_rgb8();
    let mut hist = [0f64; HISTOGRAM_BINS];
    for px in img.pixels() {
        let [r, g, b] = px.0;
        let bin = |c: u8| (c as usize * 3) / 256;
        hist[bin(r) * 9 + bin(g) * 3 + bin(b)] += 1.0;
    }
    let mut v = vec![0.0; d_img];
    for (i, h) in hist.iter().enumerate() {
        let j = if d_img >= HISTOGRAM_BINS { i } else { i * d_img / HISTOGRAM_BINS };
        v[j] += h;
    }
    normalize(v)
}

pub fn hash_features(key: &str, d_img: usize, seed: u64) -> Vec<f64> {
    let mut r = rng::seeded(rng::derive_str(seed, key));
    loop {
        let v: Vec<f64> = (0..d_img).map(|_| StandardNormal.sample(&mut r)).collect();
        if let Some(v) = normalize(v) {
            return v;
        }
    }
}

fn normalize(mut v: Vec<f64>) -> Option<Vec<f64>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return None;
    }
    v.iter_mut().for_each(|x| *x /= norm);
    Some(v)
}

/// Featurizes catalog items, reading local image files where they exist.
#[derive(Debug)]
pub struct Featurizer {
    pub d_img: usize,
    pub seed: u64,
    /// Local files that existed but could not be decoded.
    pub fallbacks: usize,
    pub decoded: usize,
}

impl Featurizer {
    pub fn new(d_img: usize, seed: u64) -> Result<Self> {
        if d_img < 4 {
            return Err(Error::Config(format!("d_img must be >= 4, got {d_img}")));
        }
        Ok(Self {
            d_img,
            seed,
            fallbacks: 0,
            decoded: 0,
        })
    }

    pub fn features_for(&mut self, item: &Item, image_root: Option<&Path>) -> Vec<f64> {
        let local = image_root
            .map(|r| r.join(&item.image_ref))
            .filter(|p| p.is_file())
            .or_else(|| Some(Path::new(&item.image_ref).to_path_buf()).filter(|p| p.is_file()));
        if let Some(path) = local {
            if let Some(v) = std::fs::read(&path)
                .ok()
                .and_then(|b| histogram_features(&b, self.d_img))
            {
                self.decoded += 1;
                return v;
            }
            self.fallbacks += 1;
            log::warn!("could not decode {}, using hashed features", path.display());
        }
        hash_features(&item.item_id, self.d_img, self.seed)
    }

    pub fn featurize_all(&mut self, items: &mut [Item], image_root: Option<&Path>) {
        for it in items.iter_mut() {
            it.image_features = self.features_for(it, image_root);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    fn png(color: [u8; 3]) -> Vec<u8> {
        let img = image::RgbImage::from_pixel(8, 8, image::Rgb(color));
        let mut buf = Cursor::new(Vec::new());
        img.write_to(&mut buf, image::ImageFormat::Png).unwrap();
        buf.into_inner()
    }

    #[test]
    fn mid_gray_is_center_bin() {
        let (v, mode) = image_featurize(ImageSource::Pixels(&png([128, 128, 128])), 27, 0).unwrap();
        assert_eq!(mode, FeatureMode::Histogram);
        for (i, x) in v.iter().enumerate() {
            assert_eq!(*x, if i == 13 { 1.0 } else { 0.0 });
        }
    }

    #[test]
    fn resampled_histogram_is_unit() {
        let v = histogram_features(&png([10, 200, 90]), 8).unwrap();
        assert_eq!(v.len(), 8);
        assert!((v.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
        let v = histogram_features(&png([10, 200, 90]), 32).unwrap();
        assert_eq!(v.len(), 32);
    }

    #[test]
    fn hash_mode_deterministic() {
        let a = image_featurize(ImageSource::ItemId("B0001"), 27, 3).unwrap().0;
        let b = image_featurize(ImageSource::ItemId("B0001"), 27, 3).unwrap().0;
        assert_eq!(a, b);
        let c = image_featurize(ImageSource::ItemId("B0001"), 27, 4).unwrap().0;
        assert_ne!(a, c);
    }

    #[test]
    fn undecodable_pixels_fall_back() {
        let (v, mode) = image_featurize(ImageSource::Pixels(b"not an image"), 16, 0).unwrap();
        assert_eq!(mode, FeatureMode::Hash);
        assert_eq!(v.len(), 16);
    }

    #[test]
    fn tiny_dimension_rejected() {
        assert!(image_featurize(ImageSource::ItemId("x"), 3, 0).is_err());
    }

    #[test]
    fn distinct_ids_rarely_similar() {
        let vs: Vec<Vec<f64>> = (0..2000)
            .map(|i| hash_features(&format!("item-{i}"), 27, 11))
            .collect();
        let below = (0..1000)
            .filter(|&p| {
                let (a, b) = (&vs[2 * p], &vs[2 * p + 1]);
                a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() < 0.5
            })
            .count();
        assert!(below >= 990, "only {below}/1000 pairs below 0.5");
    }

    #[test]
    fn featurizer_counts_undecodable_files() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("bad.jpg"), b"garbage").unwrap();
        std::fs::write(dir.path().join("ok.png"), png([250, 5, 5])).unwrap();
        let mut f = Featurizer::new(27, 0).unwrap();
        let mk = |id: &str, r: &str| Item {
            item_id: id.into(),
            title: "t".into(),
            category: "c".into(),
            brand: "b".into(),
            price: "1".into(),
            image_ref: r.into(),
            image_features: vec![],
        };
        let mut items = vec![mk("a", "bad.jpg"), mk("b", "ok.png"), mk("c", "https://x/y.jpg")];
        f.featurize_all(&mut items, Some(dir.path()));
        assert_eq!(f.fallbacks, 1);
        assert_eq!(f.decoded, 1);
        assert!(items.iter().all(|i| i.image_features.len() == 27));
    }
}
