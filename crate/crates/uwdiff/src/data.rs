//! Paired image corpora: loading, splitting, and batching.
//!
//! A corpus lives on disk as
//!
//! ```text
//! root/
//!   raw/        degraded inputs
//!   reference/  clean counterparts, same filename stems
//! ```
//!
//! Images are decoded to `[H, W, 3]` RGB tensors in `[0, 1]` (channel-first
//! conversion happens at batch assembly, keeping one canonical image domain
//! here). Loading, splitting, and epoch shuffling are all deterministic under
//! fixed seeds.

use crate::{Error, Result};
use image::imageops::FilterType;
use ndarray::{Array3, ArrayView3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

/// One degraded/clean training pair, identified by the shared filename stem.
#[derive(Debug, Clone)]
pub struct ImagePair {
    pub id: String,
    /// Degraded input, `[H, W, 3]` in `[0, 1]`.
    pub raw: Array3<f64>,
    /// Clean counterpart with identical shape.
    pub reference: Array3<f64>,
}

#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub train: Vec<ImagePair>,
    pub val: Vec<ImagePair>,
    pub seed: u64,
}

const IMAGE_EXTS: [&str; 3] = ["png", "jpg", "jpeg"];

fn is_image_file(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| IMAGE_EXTS.contains(&e.to_ascii_lowercase().as_str()))
        .unwrap_or(false)
}

/// Maps filename stem -> path for every image file directly under `dir`.
fn index_dir(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if !path.is_file() || !is_image_file(&path) {
            continue;
        }
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::Contract(format!("non-UTF8 filename under {}", dir.display())))?
            .to_string();
        if let Some(prev) = out.insert(stem.clone(), path.clone()) {
            return Err(Error::Contract(format!(
                "duplicate stem {stem:?}: {} and {}",
                prev.display(),
                path.display()
            )));
        }
    }
    Ok(out)
}

/// Decodes one image to `[side, side, 3]` RGB in `[0, 1]`.
///
/// Inputs already at the target size are converted without resampling, so a
/// decode -> encode -> decode cycle is bitwise stable. Other sizes go through
/// a bilinear filter (anti-aliased on downscale).
pub fn load_image(path: &Path, side: usize) -> Result<Array3<f64>> {
    let img = image::open(path).map_err(|e| Error::ImageDecode {
        path: path.to_path_buf(),
        source: e,
    })?;
    let rgb = img.to_rgb8();
    let rgb = if rgb.width() as usize == side && rgb.height() as usize == side {
        rgb
    } else {
        image::imageops::resize(&rgb, side as u32, side as u32, FilterType::Triangle)
    };
    let mut out = Array3::<f64>::zeros((side, side, 3));
    for (x, y, px) in rgb.enumerate_pixels() {
        for c in 0..3 {
            out[[y as usize, x as usize, c]] = px.0[c] as f64 / 255.0;
        }
    }
    Ok(out)
}

/// Decodes one image at its stored size to `[H, W, 3]` RGB in `[0, 1]`.
pub fn load_image_native(path: &Path) -> Result<Array3<f64>> {
    let img = image::open(path).map_err(|e| Error::ImageDecode {
        path: path.to_path_buf(),
        source: e,
    })?;
    let rgb = img.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut out = Array3::<f64>::zeros((h, w, 3));
    for (x, y, px) in rgb.enumerate_pixels() {
        for c in 0..3 {
            out[[y as usize, x as usize, c]] = px.0[c] as f64 / 255.0;
        }
    }
    Ok(out)
}

/// Encodes an `[H, W, 3]` tensor in `[0, 1]` as an 8-bit RGB PNG.
pub fn save_png(path: &Path, img: &ArrayView3<f64>) -> Result<()> {
    let (h, w, c) = img.dim();
    if c != 3 {
        return Err(Error::Contract(format!("save_png expects [H,W,3], got {:?}", img.dim())));
    }
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for (x, y, px) in buf.enumerate_pixels_mut() {
        for ch in 0..3 {
            let v = img[[y as usize, x as usize, ch]].clamp(0.0, 1.0);
            px.0[ch] = (v * 255.0).round() as u8;
        }
    }
    buf.save(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::ImageDecode {
            path: path.to_path_buf(),
            source: other,
        },
    })
}

/// Loads every matched pair under `root` (see module docs for the layout),
/// sorted by id. Files present on only one side abort the load with the full
/// orphan list.
pub fn load_corpus(root: &Path, side: usize) -> Result<Vec<ImagePair>> {
    let raw_dir = root.join("raw");
    let ref_dir = root.join("reference");
    let raws = index_dir(&raw_dir)?;
    let refs = index_dir(&ref_dir)?;

    let mut orphans: Vec<String> = Vec::new();
    for stem in raws.keys() {
        if !refs.contains_key(stem) {
            orphans.push(format!("raw/{stem}"));
        }
    }
    for stem in refs.keys() {
        if !raws.contains_key(stem) {
            orphans.push(format!("reference/{stem}"));
        }
    }
    if !orphans.is_empty() {
        orphans.sort();
        return Err(Error::OrphanFiles(orphans));
    }

    let mut pairs = Vec::with_capacity(raws.len());
    for (stem, raw_path) in &raws {
        let raw = load_image(raw_path, side)?;
        let reference = load_image(&refs[stem], side)?;
        pairs.push(ImagePair {
            id: stem.clone(),
            raw,
            reference,
        });
    }
    // BTreeMap iteration is already sorted by stem.
    Ok(pairs)
}

/// Splits a corpus into train/val with `round(val_fraction * n)` validation
/// pairs, chosen by a seeded shuffle.
pub fn split_corpus(pairs: Vec<ImagePair>, val_fraction: f64, seed: u64) -> Result<DatasetSplit> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::Config(format!(
            "val_fraction must be in (0, 1), got {val_fraction}"
        )));
    }
    if pairs.len() < 2 {
        return Err(Error::Config(format!(
            "need at least 2 pairs to split, got {}",
            pairs.len()
        )));
    }
    let n = pairs.len();
    let n_val = ((val_fraction * n as f64).round() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    let val_set: std::collections::BTreeSet<usize> = order[..n_val].iter().copied().collect();
    let mut train = Vec::with_capacity(n - n_val);
    let mut val = Vec::with_capacity(n_val);
    for (i, pair) in pairs.into_iter().enumerate() {
        if val_set.contains(&i) {
            val.push(pair);
        } else {
            train.push(pair);
        }
    }
    Ok(DatasetSplit { train, val, seed })
}

/// Index order for one epoch: a seeded permutation chunked into batches.
/// The final batch may be partial.
pub fn batch_indices(n: usize, batch_size: usize, shuffle_seed: u64) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch_size must be >= 1");
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed);
    order.shuffle(&mut rng);
    order.chunks(batch_size).map(|c| c.to_vec()).collect()
}

/// Batched pass over `pairs` in seeded shuffle order.
pub fn batch_iter<'a>(
    pairs: &'a [ImagePair],
    batch_size: usize,
    shuffle_seed: u64,
) -> impl Iterator<Item = Vec<&'a ImagePair>> {
    batch_indices(pairs.len(), batch_size, shuffle_seed)
        .into_iter()
        .map(move |idx| idx.into_iter().map(|i| &pairs[i]).collect())
}

/// `[H, W, 3]` -> `[3, H, W]`.
pub fn to_chw(img: &ArrayView3<f64>) -> Array3<f64> {
    let (h, w, _) = img.dim();
    let mut out = Array3::<f64>::zeros((3, h, w));
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                out[[c, y, x]] = img[[y, x, c]];
            }
        }
    }
    out
}

/// `[3, H, W]` -> `[H, W, 3]`.
pub fn to_hwc(img: &ArrayView3<f64>) -> Array3<f64> {
    let (_, h, w) = img.dim();
    let mut out = Array3::<f64>::zeros((h, w, 3));
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                out[[y, x, c]] = img[[c, y, x]];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn write_png(path: &Path, side: u32, f: impl Fn(u32, u32) -> [u8; 3]) {
        let mut img = image::RgbImage::new(side, side);
        for (x, y, px) in img.enumerate_pixels_mut() {
            px.0 = f(x, y);
        }
        img.save(path).unwrap();
    }

    fn make_corpus(dir: &Path, ids: &[&str], side: u32) {
        std::fs::create_dir_all(dir.join("raw")).unwrap();
        std::fs::create_dir_all(dir.join("reference")).unwrap();
        for (k, id) in ids.iter().enumerate() {
            let v = (k as u8).wrapping_mul(40);
            write_png(&dir.join("raw").join(format!("{id}.png")), side, |x, y| {
                [v, (x % 256) as u8, (y % 256) as u8]
            });
            write_png(
                &dir.join("reference").join(format!("{id}.png")),
                side,
                |x, y| [(x % 256) as u8, v, (y % 256) as u8],
            );
        }
    }

    #[test]
    fn loads_matched_pairs_sorted() {
        let tmp = tempfile::tempdir().unwrap();
        make_corpus(tmp.path(), &["c", "a", "b"], 8);
        let pairs = load_corpus(tmp.path(), 8).unwrap();
        let ids: Vec<&str> = pairs.iter().map(|p| p.id.as_str()).collect();
        assert_eq!(ids, vec!["a", "b", "c"]);
        for p in &pairs {
            assert_eq!(p.raw.dim(), (8, 8, 3));
            assert_eq!(p.reference.dim(), (8, 8, 3));
            assert!(p.raw.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn orphan_files_abort_with_names() {
        let tmp = tempfile::tempdir().unwrap();
        make_corpus(tmp.path(), &["a", "b"], 4);
        std::fs::remove_file(tmp.path().join("reference/b.png")).unwrap();
        write_png(&tmp.path().join("reference/z.png"), 4, |_, _| [0, 0, 0]);
        let err = load_corpus(tmp.path(), 4).unwrap_err();
        match err {
            Error::OrphanFiles(list) => {
                assert_eq!(list, vec!["raw/b".to_string(), "reference/z".to_string()]);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn all_black_pair_is_zero_tensor() {
        let tmp = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(tmp.path().join("raw")).unwrap();
        std::fs::create_dir_all(tmp.path().join("reference")).unwrap();
        write_png(&tmp.path().join("raw/k.png"), 4, |_, _| [0, 0, 0]);
        write_png(&tmp.path().join("reference/k.png"), 4, |_, _| [0, 0, 0]);
        let pairs = load_corpus(tmp.path(), 4).unwrap();
        assert!(pairs[0].raw.iter().all(|&v| v == 0.0));
        assert!(pairs[0].reference.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn resize_hits_requested_side() {
        let tmp = tempfile::tempdir().unwrap();
        write_png(&tmp.path().join("img.png"), 16, |x, _| [(x * 16) as u8, 0, 0]);
        let img = load_image(&tmp.path().join("img.png"), 8).unwrap();
        assert_eq!(img.dim(), (8, 8, 3));
    }

    fn tiny_pair(id: &str) -> ImagePair {
        ImagePair {
            id: id.to_string(),
            raw: Array3::zeros((1, 1, 3)),
            reference: Array3::zeros((1, 1, 3)),
        }
    }

    #[test]
    fn split_arithmetic_and_determinism() {
        let pairs: Vec<ImagePair> = (0..10).map(|i| tiny_pair(&format!("p{i:02}"))).collect();
        let s1 = split_corpus(pairs.clone(), 0.2, 7).unwrap();
        assert_eq!(s1.train.len(), 8);
        assert_eq!(s1.val.len(), 2);
        let s2 = split_corpus(pairs, 0.2, 7).unwrap();
        let ids = |v: &Vec<ImagePair>| v.iter().map(|p| p.id.clone()).collect::<Vec<_>>();
        assert_eq!(ids(&s1.val), ids(&s2.val));
        assert_eq!(ids(&s1.train), ids(&s2.train));
        // disjoint by id
        for p in &s1.val {
            assert!(!s1.train.iter().any(|q| q.id == p.id));
        }
    }

    #[test]
    fn split_matches_uieb_protocol() {
        let pairs: Vec<ImagePair> = (0..890).map(|i| tiny_pair(&format!("u{i:04}"))).collect();
        let s = split_corpus(pairs, 90.0 / 890.0, 0).unwrap();
        assert_eq!(s.train.len(), 800);
        assert_eq!(s.val.len(), 90);
    }

    #[test]
    fn split_rejects_bad_fraction() {
        let pairs: Vec<ImagePair> = (0..4).map(|i| tiny_pair(&i.to_string())).collect();
        assert!(matches!(
            split_corpus(pairs.clone(), 0.0, 0),
            Err(Error::Config(_))
        ));
        assert!(matches!(split_corpus(pairs, 1.0, 0), Err(Error::Config(_))));
    }

    #[test]
    fn batches_cover_every_pair_once() {
        let batches = batch_indices(5, 2, 3);
        let sizes: Vec<usize> = batches.iter().map(|b| b.len()).collect();
        assert_eq!(sizes, vec![2, 2, 1]);
        let mut all: Vec<usize> = batches.into_iter().flatten().collect();
        all.sort_unstable();
        assert_eq!(all, vec![0, 1, 2, 3, 4]);
        // determinism
        assert_eq!(batch_indices(5, 2, 3), batch_indices(5, 2, 3));
        // full single batch
        assert_eq!(batch_indices(32, 32, 0).len(), 1);
        // empty input -> empty stream
        assert!(batch_indices(0, 4, 0).is_empty());
    }

    #[test]
    fn decode_encode_decode_is_bitwise_stable() {
        let tmp = tempfile::tempdir().unwrap();
        let p0 = tmp.path().join("orig.png");
        write_png(&p0, 8, |x, y| [(x * 31 % 256) as u8, (y * 57 % 256) as u8, 123]);
        let a = load_image(&p0, 8).unwrap();
        let p1 = tmp.path().join("first.png");
        save_png(&p1, &a.view()).unwrap();
        let b = load_image(&p1, 8).unwrap();
        assert_eq!(a, b);
        let p2 = tmp.path().join("second.png");
        save_png(&p2, &b.view()).unwrap();
        assert_eq!(
            std::fs::read(&p1).unwrap(),
            std::fs::read(&p2).unwrap(),
            "second encode pass must be a bitwise no-op"
        );
    }

    #[test]
    fn jpeg_inputs_decode() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("img.jpg");
        let mut img = image::RgbImage::new(8, 8);
        for (_, _, px) in img.enumerate_pixels_mut() {
            px.0 = [200, 100, 50];
        }
        img.save(&path).unwrap();
        let arr = load_image(&path, 8).unwrap();
        assert_eq!(arr.dim(), (8, 8, 3));
    }

    #[test]
    fn chw_roundtrip() {
        let mut img = Array3::<f64>::zeros((2, 3, 3));
        img[[0, 1, 2]] = 0.5;
        img[[1, 2, 0]] = 0.25;
        let c = to_chw(&img.view());
        assert_eq!(c[[2, 0, 1]], 0.5);
        assert_eq!(c[[0, 1, 2]], 0.25);
        assert_eq!(to_hwc(&c.view()), img);
    }
}
