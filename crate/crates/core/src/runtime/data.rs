//! Dataset ingestion: image directories and synthetic layered scenes, all
//! brought to `resolution × resolution` RGB in `[0, 1]`.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{CganError, Result};
use crate::runtime::imageio;
use crate::runtime::synthetic::{self, SyntheticRecipe};
use crate::tensor::Tensor;

/// File extensions picked up from a dataset directory.
pub const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg"];

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Directory(PathBuf),
    Synthetic { recipe: SyntheticRecipe, count: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub source: DataSource,
    pub resolution: usize,
    pub shuffle_seed: u64,
}

/// Images `[N, 3, S, S]` with the name each came from.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub images: Tensor,
    pub names: Vec<String>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

/// Largest centered square of a `[C, H, W]` image.
pub fn center_crop_square(image: &Tensor) -> Tensor {
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let side = h.min(w);
    let (y0, x0) = ((h - side) / 2, (w - side) / 2);
    let d = image.data();
    Tensor::from_fn(&[c, side, side], |i| {
        let (ch, p) = (i / (side * side), i % (side * side));
        let (y, x) = (p / side, p % side);
        d[ch * h * w + (y0 + y) * w + x0 + x]
    })
}

/// Per-axis weights of an area-average resize: for each output index, the
/// covered input indices and their coverage fractions (summing to 1).
fn area_weights(input: usize, output: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let (lo, hi) = (o as f64 * scale, (o + 1) as f64 * scale);
            let mut taps = Vec::new();
            let mut i = lo.floor() as usize;
            while (i as f64) < hi && i < input {
                let overlap = hi.min(i as f64 + 1.0) - lo.max(i as f64);
                if overlap > 0.0 {
                    taps.push((i, overlap / scale));
                }
                i += 1;
            }
            taps
        })
        .collect()
}

/// Antialiased resize of a `[C, H, W]` image: each output pixel is the mean
/// of the input area it covers. Upscaling degenerates to nearest-neighbour.
pub fn resize_area(image: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let s = image.shape();
    if s.len() != 3 || out_h == 0 || out_w == 0 || s[1] == 0 || s[2] == 0 {
        return Err(CganError::Dimension(format!(
            "cannot resize {s:?} to {out_h}x{out_w}"
        )));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let wy = area_weights(h, out_h);
    let wx = area_weights(w, out_w);
    let d = image.data();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let src = &d[ch * h * w..(ch + 1) * h * w];
        for ty in &wy {
            for tx in &wx {
                let mut acc = 0.0;
                for &(y, fy) in ty {
                    for &(x, fx) in tx {
                        acc += fy * fx * src[y * w + x];
                    }
                }
                out.push(acc);
            }
        }
    }
    Tensor::new(&[c, out_h, out_w], out)
}

/// Crop to square, then resize to `resolution`.
pub fn prepare(image: &Tensor, resolution: usize) -> Result<Tensor> {
    let square = center_crop_square(image);
    if square.shape()[1] == resolution {
        return Ok(square);
    }
    resize_area(&square, resolution, resolution)
}

fn has_image_extension(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

/// Image files directly inside `dir`, sorted by name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| CganError::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| CganError::io(dir, e))?.path();
        if path.is_file() && has_image_extension(&path) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

/// Reads every image of a directory at `resolution`, in name order.
pub fn load_directory(dir: &Path, resolution: usize) -> Result<Dataset> {
    let files = list_images(dir)?;
    if files.is_empty() {
        return Err(CganError::Argument(format!(
            "no usable images ({}) in {}",
            IMAGE_EXTENSIONS.join(", "),
            dir.display()
        )));
    }
    let images = files
        .par_iter()
        .map(|p| prepare(&imageio::read_rgb(p)?, resolution))
        .collect::<Result<Vec<_>>>()?;
    let names = files
        .iter()
        .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
        .collect();
    Ok(Dataset {
        images: Tensor::stack(&images)?,
        names,
    })
}

/// Loads and shuffles a dataset; the order depends only on the spec.
pub fn load_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    if spec.resolution == 0 {
        return Err(CganError::Argument("resolution must be at least 1".into()));
    }
    let Dataset { images, names } = match &spec.source {
        DataSource::Directory(dir) => load_directory(dir, spec.resolution)?,
        DataSource::Synthetic { recipe, count } => {
            if recipe.size != spec.resolution {
                return Err(CganError::Argument(format!(
                    "synthetic recipe renders {0}x{0}, dataset wants {1}x{1}",
                    recipe.size, spec.resolution
                )));
            }
            Dataset {
                images: synthetic::render_images(recipe, 0..*count)?,
                names: (0..*count).map(|i| format!("synthetic_{i:05}")).collect(),
            }
        }
    };
    let mut order: Vec<usize> = (0..names.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.shuffle_seed));
    Ok(Dataset {
        images: images.gather(&order),
        names: order.iter().map(|&i| names[i].clone()).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn checkerboard_averages_to_gray() {
        let img = Tensor::new(&[1, 2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let out = resize_area(&img, 1, 1).unwrap();
        assert_eq!(out.data(), &[0.5]);
    }

    #[test]
    fn fractional_coverage() {
        // 3 -> 2 along one axis: outputs cover [0, 1.5) and [1.5, 3).
        let img = Tensor::new(&[1, 1, 3], vec![0.0, 0.3, 0.9]).unwrap();
        let out = resize_area(&img, 1, 2).unwrap();
        let expect = [(0.0 + 0.5 * 0.3) / 1.5, (0.5 * 0.3 + 0.9) / 1.5];
        for (a, b) in out.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn center_crop() {
        let img = Tensor::from_fn(&[1, 2, 4], |i| i as f64);
        assert_eq!(center_crop_square(&img).data(), &[1.0, 2.0, 5.0, 6.0]);
    }

    proptest! {
        #[test]
        fn constant_images_stay_constant(
            h in 1usize..40, w in 1usize..40, oh in 1usize..20, ow in 1usize..20, v in 0.0f64..1.0
        ) {
            let img = Tensor::full(&[3, h, w], v);
            let out = resize_area(&img, oh, ow).unwrap();
            for x in out.data() {
                prop_assert!((x - v).abs() < 1e-12);
            }
        }

        #[test]
        fn resize_preserves_mean_on_integer_factors(f in 1usize..5, seed in 0u64..1000) {
            use rand::Rng;
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let img = Tensor::from_fn(&[1, 4 * f, 4 * f], |_| r.random_range(0.0..1.0));
            let out = resize_area(&img, 4, 4).unwrap();
            prop_assert!((out.sum() / 16.0 - img.sum() / img.len() as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn directory_loading() {
        let dir = tempfile::tempdir().unwrap();
        let red = Tensor::from_fn(&[3, 20, 30], |i| if i < 600 { 1.0 } else { 0.0 });
        imageio::write_rgb(&dir.path().join("b.png"), &red).unwrap();
        imageio::write_rgb(&dir.path().join("a.png"), &Tensor::full(&[3, 8, 8], 0.2)).unwrap();
        fs::write(dir.path().join("notes.txt"), "ignored").unwrap();

        let spec = DatasetSpec {
            source: DataSource::Directory(dir.path().to_path_buf()),
            resolution: 4,
            shuffle_seed: 3,
        };
        let d1 = load_dataset(&spec).unwrap();
        let d2 = load_dataset(&spec).unwrap();
        assert_eq!(d1.names, d2.names);
        assert_eq!(d1.images, d2.images);
        assert_eq!(d1.images.shape(), &[2, 3, 4, 4]);
        let red_index = d1.names.iter().position(|n| n == "b.png").unwrap();
        let red_item = &d1.images.unstack()[red_index];
        assert!(red_item.data()[..16].iter().all(|&v| (v - 1.0).abs() < 1e-12));
        assert!(red_item.data()[16..].iter().all(|&v| v.abs() < 1e-12));

        fs::write(dir.path().join("c.png"), b"broken").unwrap();
        match load_dataset(&spec) {
            Err(CganError::Image { path, .. }) => assert!(path.ends_with("c.png")),
            other => panic!("{other:?}"),
        }

        let empty = tempfile::tempdir().unwrap();
        let spec = DatasetSpec {
            source: DataSource::Directory(empty.path().to_path_buf()),
            ..spec
        };
        assert!(matches!(load_dataset(&spec), Err(CganError::Argument(_))));
    }
}
