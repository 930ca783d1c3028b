//! Synthetic dense-labeling tasks and minimal grayscale image input.
//!
//! Ground truth is the per-pixel argmax of `L` independent box-smoothed
//! Gaussian noise fields, which yields contiguous label regions whose size
//! grows with the smoothing radius. Each pixel's features are its one-hot
//! label plus Gaussian noise, the 3x3 average of those noisy channels, the
//! normalized `(x, y)` position and a constant 1.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layer::EmbeddingMatrix;
use crate::tensor::{read_matrix, write_matrix, Matrix, Vector};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticTaskSpec {
    pub width: usize,
    pub height: usize,
    pub labels: usize,
    pub noise_sigma: f64,
    pub smooth_radius: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        SyntheticTaskSpec {
            width: 16,
            height: 16,
            labels: 3,
            noise_sigma: 1.0,
            smooth_radius: 3,
            n_train: 64,
            n_test: 32,
            seed: 7,
        }
    }
}

impl SyntheticTaskSpec {
    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    /// `2 L + 3`: noisy one-hot, its 3x3 average, `(x, y)`, constant.
    pub fn feature_dim(&self) -> usize {
        feature_dim(self.labels)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::Config("task grid must be non-empty".into()));
        }
        if self.labels < 2 {
            return Err(Error::Config(format!(
                "task needs at least 2 labels, got {}",
                self.labels
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config(format!(
                "noise_sigma must be >= 0, got {}",
                self.noise_sigma
            )));
        }
        Ok(())
    }
}

pub fn feature_dim(labels: usize) -> usize {
    2 * labels + 3
}

/// One image: features as `F x P` (column `p` is pixel `p`) and a label per
/// pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub features: Matrix,
    pub truth: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub spec: SyntheticTaskSpec,
    pub train: Vec<LabeledSample>,
    pub test: Vec<LabeledSample>,
}

/// RNG for sample `index` of a dataset seeded with `seed`.
pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

pub fn generate(spec: &SyntheticTaskSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    let total = spec.n_train + spec.n_test;
    let mut samples: Vec<LabeledSample> = (0..total)
        .map(|i| generate_sample(spec, &mut sample_rng(spec.seed, i as u64)))
        .collect();
    let test = samples.split_off(spec.n_train);
    Ok(SyntheticDataset {
        spec: spec.clone(),
        train: samples,
        test,
    })
}

pub fn generate_sample(spec: &SyntheticTaskSpec, rng: &mut impl Rng) -> LabeledSample {
    let (w, h, labels) = (spec.width, spec.height, spec.labels);
    let p = w * h;

    let fields: Vec<Vec<f64>> = (0..labels)
        .map(|_| {
            let noise: Vec<f64> = (0..p).map(|_| rng.sample(StandardNormal)).collect();
            box_mean(&noise, w, h, spec.smooth_radius)
        })
        .collect();
    let truth: Vec<usize> = (0..p)
        .map(|i| {
            (0..labels)
                .fold((0, f64::NEG_INFINITY), |best, l| {
                    if fields[l][i] > best.1 {
                        (l, fields[l][i])
                    } else {
                        best
                    }
                })
                .0
        })
        .collect();

    let raw: Vec<Vec<f64>> = (0..labels)
        .map(|l| {
            (0..p)
                .map(|i| {
                    let hot = if truth[i] == l { 1.0 } else { 0.0 };
                    let n: f64 = rng.sample(StandardNormal);
                    hot + spec.noise_sigma * n
                })
                .collect()
        })
        .collect();
    let local: Vec<Vec<f64>> = raw.iter().map(|ch| box_mean(ch, w, h, 1)).collect();

    let f = feature_dim(labels);
    let mut data = vec![0.0; f * p];
    for (i, chan) in raw.iter().chain(&local).enumerate() {
        data[i * p..(i + 1) * p].copy_from_slice(chan);
    }
    let coord = |v: usize, extent: usize| {
        if extent > 1 {
            v as f64 / (extent - 1) as f64
        } else {
            0.0
        }
    };
    for y in 0..h {
        for x in 0..w {
            let px = y * w + x;
            data[2 * labels * p + px] = coord(x, w);
            data[(2 * labels + 1) * p + px] = coord(y, h);
            data[(2 * labels + 2) * p + px] = 1.0;
        }
    }
    LabeledSample {
        features: Matrix::from_vec_unchecked(f, p, data),
        truth,
    }
}

/// Mean over the `(2r+1) x (2r+1)` window around each pixel, clipped at the
/// grid border. Row-major `w x h` grid.
pub fn box_mean(values: &[f64], w: usize, h: usize, radius: usize) -> Vec<f64> {
    debug_assert_eq!(values.len(), w * h);
    // summed-area table with a zero border
    let sw = w + 1;
    let mut sat = vec![0.0; sw * (h + 1)];
    for y in 0..h {
        let mut row = 0.0;
        for x in 0..w {
            row += values[y * w + x];
            sat[(y + 1) * sw + x + 1] = sat[y * sw + x + 1] + row;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        let (y0, y1) = (y.saturating_sub(radius), (y + radius + 1).min(h));
        for x in 0..w {
            let (x0, x1) = (x.saturating_sub(radius), (x + radius + 1).min(w));
            let sum = sat[y1 * sw + x1] - sat[y0 * sw + x1] - sat[y1 * sw + x0] + sat[y0 * sw + x0];
            out[y * w + x] = sum / ((y1 - y0) * (x1 - x0)) as f64;
        }
    }
    out
}

/// Fraction of horizontally or vertically adjacent pixel pairs that share a
/// label, pooled over `samples`.
pub fn neighbor_agreement(samples: &[LabeledSample], width: usize, height: usize) -> f64 {
    let (mut same, mut total) = (0usize, 0usize);
    for s in samples {
        for y in 0..height {
            for x in 0..width {
                let i = y * width + x;
                if x + 1 < width {
                    total += 1;
                    same += usize::from(s.truth[i] == s.truth[i + 1]);
                }
                if y + 1 < height {
                    total += 1;
                    same += usize::from(s.truth[i] == s.truth[i + width]);
                }
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        same as f64 / total as f64
    }
}

/// Embeddings with i.i.d. `N(0, 1/N)` entries.
pub fn random_embeddings(embed_dim: usize, variables: usize, rng: &mut impl Rng) -> EmbeddingMatrix {
    let scale = 1.0 / (variables as f64).sqrt();
    let data = (0..embed_dim * variables)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect();
    EmbeddingMatrix::new(Matrix::from_vec_unchecked(embed_dim, variables, data))
}

/// Vector with i.i.d. standard normal entries.
pub fn random_vector(len: usize, rng: &mut impl Rng) -> Vector {
    Vector::from_vec_unchecked((0..len).map(|_| rng.sample(StandardNormal)).collect())
}

const DATASET_MANIFEST: &str = "dataset.json";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetManifest {
    spec: SyntheticTaskSpec,
    feature_dim: usize,
    train: Vec<SampleFiles>,
    test: Vec<SampleFiles>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleFiles {
    features: String,
    truth: String,
}

/// Writes each sample as a feature matrix file and a `1 x P` truth file,
/// plus a JSON manifest.
pub fn save_dataset(dir: impl AsRef<Path>, data: &SyntheticDataset) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let write_split = |name: &str, samples: &[LabeledSample]| -> Result<Vec<SampleFiles>> {
        samples
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let files = SampleFiles {
                    features: format!("{name}_{i:04}_features.txt"),
                    truth: format!("{name}_{i:04}_truth.txt"),
                };
                write_matrix(dir.join(&files.features), &s.features)?;
                let truth = s.truth.iter().map(|&t| t as f64).collect();
                write_matrix(
                    dir.join(&files.truth),
                    &Matrix::from_vec_unchecked(1, s.truth.len(), truth),
                )?;
                Ok(files)
            })
            .collect()
    };
    let manifest = DatasetManifest {
        spec: data.spec.clone(),
        feature_dim: data.spec.feature_dim(),
        train: write_split("train", &data.train)?,
        test: write_split("test", &data.test)?,
    };
    let path = dir.join(DATASET_MANIFEST);
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<SyntheticDataset> {
    let dir = dir.as_ref();
    let path = dir.join(DATASET_MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)?;
    let read_split = |files: &[SampleFiles]| -> Result<Vec<LabeledSample>> {
        files
            .iter()
            .map(|f| {
                let features = read_matrix(dir.join(&f.features))?;
                let truth_path = dir.join(&f.truth);
                let truth = read_matrix(&truth_path)?
                    .as_slice()
                    .iter()
                    .map(|&v| {
                        if v >= 0.0 && v.fract() == 0.0 && (v as usize) < manifest.spec.labels {
                            Ok(v as usize)
                        } else {
                            Err(Error::Format {
                                path: truth_path.clone(),
                                line: 2,
                                message: format!("invalid label {v}"),
                            })
                        }
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(LabeledSample { features, truth })
            })
            .collect()
    };
    Ok(SyntheticDataset {
        train: read_split(&manifest.train)?,
        test: read_split(&manifest.test)?,
        spec: manifest.spec,
    })
}

/// Reads a binary (`P5`) or ASCII (`P2`) PGM as a `height x width` matrix
/// with intensities scaled to `[0, 1]`.
pub fn load_pgm(path: impl AsRef<Path>) -> Result<Matrix> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_pgm(&bytes, path)
}

pub fn parse_pgm(bytes: &[u8], origin: impl AsRef<Path>) -> Result<Matrix> {
    let origin = origin.as_ref();
    let err = |line: usize, message: String| Error::Format {
        path: origin.to_path_buf(),
        line,
        message,
    };

    let mut pos = 0usize;
    let mut line = 1usize;
    // Header tokens are separated by whitespace; `#` starts a comment.
    let next_token = |pos: &mut usize, line: &mut usize| -> Option<(String, usize)> {
        loop {
            match bytes.get(*pos)? {
                b'#' => {
                    while let Some(&c) = bytes.get(*pos) {
                        *pos += 1;
                        if c == b'\n' {
                            *line += 1;
                            break;
                        }
                    }
                }
                c if c.is_ascii_whitespace() => {
                    if *c == b'\n' {
                        *line += 1;
                    }
                    *pos += 1;
                }
                _ => break,
            }
        }
        let start = *pos;
        while bytes.get(*pos).is_some_and(|c| !c.is_ascii_whitespace()) {
            *pos += 1;
        }
        Some((String::from_utf8_lossy(&bytes[start..*pos]).into_owned(), *line))
    };

    let (magic, _) = next_token(&mut pos, &mut line).ok_or_else(|| err(1, "empty file".into()))?;
    let binary = match magic.as_str() {
        "P5" => true,
        "P2" => false,
        other => return Err(err(1, format!("bad magic `{other}`, expected P2 or P5"))),
    };
    let mut header = [0usize; 3];
    for (slot, name) in header.iter_mut().zip(["width", "height", "maxval"]) {
        let (tok, at) = next_token(&mut pos, &mut line).ok_or_else(|| err(line, format!("missing {name}")))?;
        *slot = tok.parse().map_err(|_| err(at, format!("invalid {name} `{tok}`")))?;
    }
    let [width, height, maxval] = header;
    if maxval == 0 || maxval > 65535 {
        return Err(err(line, format!("maxval {maxval} outside 1..=65535")));
    }
    let count = width * height;
    let scale = 1.0 / maxval as f64;

    let mut data = Vec::with_capacity(count);
    if binary {
        // exactly one whitespace byte separates maxval from the raster
        pos += 1;
        let bytes_per = if maxval < 256 { 1 } else { 2 };
        let raster = bytes.get(pos..).unwrap_or(&[]);
        if raster.len() < count * bytes_per {
            return Err(err(
                line,
                format!(
                    "truncated raster: need {} bytes, found {}",
                    count * bytes_per,
                    raster.len()
                ),
            ));
        }
        for i in 0..count {
            let v = if bytes_per == 1 {
                raster[i] as usize
            } else {
                (raster[2 * i] as usize) << 8 | raster[2 * i + 1] as usize
            };
            if v > maxval {
                return Err(err(line, format!("sample {v} exceeds maxval {maxval}")));
            }
            data.push(v as f64 * scale);
        }
    } else {
        for _ in 0..count {
            let (tok, at) = next_token(&mut pos, &mut line)
                .filter(|(t, _)| !t.is_empty())
                .ok_or_else(|| err(line, format!("truncated raster: expected {count} samples")))?;
            let v: usize = tok.parse().map_err(|_| err(at, format!("invalid sample `{tok}`")))?;
            if v > maxval {
                return Err(err(at, format!("sample {v} exceeds maxval {maxval}")));
            }
            data.push(v as f64 * scale);
        }
    }
    Matrix::new(height, width, data)
}

/// Per-pixel features for a grayscale image: intensity, its 3x3 average,
/// normalized `(x, y)` and a constant 1, as a `5 x P` matrix.
pub fn image_features(gray: &Matrix) -> Matrix {
    let (h, w) = gray.shape();
    let p = w * h;
    let local = box_mean(gray.as_slice(), w, h, 1);
    let mut data = Vec::with_capacity(5 * p);
    data.extend_from_slice(gray.as_slice());
    data.extend_from_slice(&local);
    let coord = |v: usize, extent: usize| {
        if extent > 1 {
            v as f64 / (extent - 1) as f64
        } else {
            0.0
        }
    };
    data.extend((0..p).map(|i| coord(i % w, w)));
    data.extend((0..p).map(|i| coord(i / w, h)));
    data.extend(std::iter::repeat_n(1.0, p));
    Matrix::from_vec_unchecked(5, p, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn box_mean_radius_zero_is_identity() {
        let v: Vec<f64> = (0..12).map(|i| i as f64).collect();
        assert_eq!(box_mean(&v, 4, 3, 0), v);
    }

    #[test]
    fn box_mean_matches_brute_force() {
        let (w, h) = (5, 4);
        let v: Vec<f64> = (0..w * h).map(|i| ((i * 7) % 11) as f64).collect();
        for r in 0..4 {
            let fast = box_mean(&v, w, h, r);
            for y in 0..h {
                for x in 0..w {
                    let (mut s, mut c) = (0.0, 0);
                    for yy in y.saturating_sub(r)..(y + r + 1).min(h) {
                        for xx in x.saturating_sub(r)..(x + r + 1).min(w) {
                            s += v[yy * w + xx];
                            c += 1;
                        }
                    }
                    assert!((fast[y * w + x] - s / c as f64).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = SyntheticTaskSpec {
            n_train: 3,
            n_test: 2,
            ..Default::default()
        };
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.train.len(), 3);
        assert_eq!(a.test.len(), 2);
        let other = generate(&SyntheticTaskSpec { seed: 8, ..spec }).unwrap();
        assert_ne!(a.train[0].truth, other.train[0].truth);
    }

    #[test]
    fn noiseless_features_reveal_truth() {
        let spec = SyntheticTaskSpec {
            noise_sigma: 0.0,
            smooth_radius: 0,
            n_train: 2,
            n_test: 0,
            ..Default::default()
        };
        let data = generate(&spec).unwrap();
        let p = spec.pixels();
        for s in &data.train {
            assert_eq!(s.features.shape(), (spec.feature_dim(), p));
            for (px, &t) in s.truth.iter().enumerate() {
                for l in 0..spec.labels {
                    let expected = if l == t { 1.0 } else { 0.0 };
                    assert_eq!(s.features.get(l, px), expected);
                }
                assert_eq!(s.features.get(2 * spec.labels + 2, px), 1.0);
            }
        }
    }

    #[test]
    fn huge_radius_gives_constant_truth() {
        let spec = SyntheticTaskSpec {
            smooth_radius: 16,
            n_train: 10,
            n_test: 0,
            ..Default::default()
        };
        for s in generate(&spec).unwrap().train {
            assert!(s.truth.iter().all(|&t| t == s.truth[0]));
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        for spec in [
            SyntheticTaskSpec {
                width: 0,
                ..Default::default()
            },
            SyntheticTaskSpec {
                labels: 1,
                ..Default::default()
            },
            SyntheticTaskSpec {
                noise_sigma: -1.0,
                ..Default::default()
            },
        ] {
            assert!(generate(&spec).is_err());
        }
    }

    #[test]
    fn pgm_ascii_and_binary_agree() {
        let ascii = parse_pgm(b"P2\n2 2\n255\n0 255 255 0\n", "a.pgm").unwrap();
        assert_eq!(ascii.as_slice(), &[0.0, 1.0, 1.0, 0.0]);
        assert_eq!(ascii.shape(), (2, 2));
        let binary = parse_pgm(b"P5\n# comment\n2 2\n255\n\x00\xff\xff\x00", "b.pgm").unwrap();
        assert_eq!(ascii, binary);
        let wide = parse_pgm(b"P5 2 1 65535\n\xff\xff\x80\x00", "c.pgm").unwrap();
        assert_eq!(wide.as_slice(), &[1.0, 32768.0 / 65535.0]);
    }

    #[test]
    fn pgm_errors() {
        assert!(matches!(
            parse_pgm(b"P6\n1 1\n255\n\x00", "x"),
            Err(Error::Format { .. })
        ));
        assert!(matches!(
            parse_pgm(b"P5\n2 2\n255\n\x00\x01", "x"),
            Err(Error::Format { .. })
        ));
        assert!(matches!(
            parse_pgm(b"P2\n2 2\n255\n0 1 2\n", "x"),
            Err(Error::Format { .. })
        ));
        assert!(matches!(
            parse_pgm(b"P2\n1 1\n70000\n0\n", "x"),
            Err(Error::Format { .. })
        ));
        assert!(matches!(
            parse_pgm(b"P2\n1 1\n10\n11\n", "x"),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn image_features_shape() {
        let img = parse_pgm(b"P2\n3 2\n4\n0 1 2 3 4 0\n", "x").unwrap();
        let f = image_features(&img);
        assert_eq!(f.shape(), (5, 6));
        assert_eq!(f.get(0, 4), 1.0);
        assert_eq!(f.get(2, 2), 1.0);
        assert_eq!(f.get(3, 3), 1.0);
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticTaskSpec {
            width: 4,
            height: 3,
            n_train: 2,
            n_test: 1,
            ..Default::default()
        };
        let data = generate(&spec).unwrap();
        save_dataset(dir.path(), &data).unwrap();
        assert_eq!(load_dataset(dir.path()).unwrap(), data);
    }
}
