//! MNIST ingestion and the environment suites trained on: Colored MNIST,
//! Rotated MNIST and a small synthetic feature-selection task.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{key_str, lane, substream};
use crate::tensor::Tensor;

/// Environment variable naming the directory that holds the IDX files.
pub const DATA_ROOT_ENV: &str = "MODNET_DATA_ROOT";
pub const DEFAULT_DATA_ROOT: &str = "data/mnist";

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

/// A parsed IDX container: dimension sizes and raw bytes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

/// Parses an uncompressed IDX file holding 3-D images or 1-D labels.
pub fn parse_idx(bytes: &[u8]) -> Result<IdxArray> {
    let magic = read_be_u32(bytes, 0)
        .ok_or_else(|| Error::Format(format!("IDX header needs 4 bytes, got {}", bytes.len())))?;
    let rank = match magic {
        IMAGE_MAGIC => 3,
        LABEL_MAGIC => 1,
        other => {
            return Err(Error::Format(format!(
                "bad IDX magic 0x{other:08x}; expected 0x{IMAGE_MAGIC:08x} (images) or 0x{LABEL_MAGIC:08x} (labels)"
            )))
        }
    };
    let dims = (0..rank)
        .map(|i| {
            read_be_u32(bytes, 4 + 4 * i).map(|d| d as usize).ok_or_else(|| {
                Error::Format(format!("IDX header truncated: {rank} dimensions expected"))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let header = 4 + 4 * rank;
    let expected: usize = dims.iter().product();
    let actual = bytes.len() - header;
    if actual != expected {
        return Err(Error::Format(format!(
            "IDX payload for dims {dims:?} needs {expected} bytes, found {actual}"
        )));
    }
    Ok(IdxArray {
        dims,
        data: bytes[header..].to_vec(),
    })
}

fn read_be_u32(bytes: &[u8], at: usize) -> Option<u32> {
    let b = bytes.get(at..at + 4)?;
    Some(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
}

/// Reads and parses an IDX file, transparently gunzipping it.
pub fn read_idx_file(path: &Path) -> Result<IdxArray> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        parse_idx(&out)
    } else {
        parse_idx(&raw)
    }
}

/// Grayscale digits with their labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MnistSet {
    pub rows: usize,
    pub cols: usize,
    /// `count × rows × cols` bytes.
    pub images: Vec<u8>,
    pub labels: Vec<u8>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn stem(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "t10k",
        }
    }
}

impl MnistSet {
    pub fn from_idx(images: IdxArray, labels: IdxArray) -> Result<Self> {
        let [count, rows, cols] = images.dims[..] else {
            return Err(Error::Format(format!("image file has dims {:?}, need 3", images.dims)));
        };
        let [n_labels] = labels.dims[..] else {
            return Err(Error::Format(format!("label file has dims {:?}, need 1", labels.dims)));
        };
        if count != n_labels {
            return Err(Error::Data(format!("{count} images but {n_labels} labels")));
        }
        if let Some(bad) = labels.data.iter().find(|&&l| l >= 10) {
            return Err(Error::Data(format!("label {bad} is not a digit")));
        }
        Ok(MnistSet {
            rows,
            cols,
            images: images.data,
            labels: labels.data,
        })
    }

    /// Loads `train-*` or `t10k-*` files from `dir`, with or without `.gz`.
    pub fn load(dir: &Path, split: Split) -> Result<Self> {
        let find = |kind: &str| -> Result<PathBuf> {
            let base = format!("{}-{kind}", split.stem());
            for name in [base.clone(), format!("{base}.gz")] {
                let p = dir.join(name);
                if p.is_file() {
                    return Ok(p);
                }
            }
            Err(Error::Data(format!(
                "no {base}[.gz] under {} (set {DATA_ROOT_ENV} or data.root)",
                dir.display()
            )))
        };
        let images = read_idx_file(&find("images-idx3-ubyte")?)?;
        let labels = read_idx_file(&find("labels-idx1-ubyte")?)?;
        Self::from_idx(images, labels)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn pixels(&self) -> usize {
        self.rows * self.cols
    }

    /// Image `i` scaled to `[0, 1]`.
    pub fn image(&self, i: usize) -> Vec<f64> {
        let p = self.pixels();
        self.images[i * p..(i + 1) * p]
            .iter()
            .map(|&b| b as f64 / 255.0)
            .collect()
    }

    /// The first `n` examples.
    pub fn truncate(&self, n: usize) -> MnistSet {
        let n = n.min(self.len());
        MnistSet {
            rows: self.rows,
            cols: self.cols,
            images: self.images[..n * self.pixels()].to_vec(),
            labels: self.labels[..n].to_vec(),
        }
    }
}

/// Data root: explicit value, else `$MODNET_DATA_ROOT`, else `data/mnist`.
pub fn resolve_data_root(explicit: Option<&Path>) -> PathBuf {
    explicit
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_DATA_ROOT))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Train,
    Test,
}

/// One domain: inputs `count × C × H × W` in `[0, 1]` (or `count × d` for the
/// synthetic task) with integer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Environment {
    pub env_id: String,
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub role: Role,
    /// Construction parameters, for the record.
    pub provenance: serde_json::Value,
}

impl Environment {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn batch(&self, indices: &[usize]) -> Result<EnvironmentBatch> {
        Ok(EnvironmentBatch {
            env_id: self.env_id.clone(),
            inputs: self.inputs.gather_rows(indices)?,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnvironmentBatch {
    pub env_id: String,
    pub inputs: Tensor,
    pub labels: Vec<usize>,
}

impl EnvironmentBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// One Colored MNIST domain.
#[derive(Clone, Debug, PartialEq)]
pub struct ColorEnvSpec {
    pub env_id: String,
    pub color_flip_prob: f64,
    pub role: Role,
}

fn check_prob(name: &str, p: f64) -> Result<()> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must lie in [0, 1], got {p}")))
    }
}

/// Splits `base` (after a seeded shuffle) into equal disjoint parts, one per
/// spec. Binary label `digit >= 5`, flipped with `label_noise`; the color bit
/// is that label flipped with the environment's probability, and the digit is
/// drawn into channel `color` of a 2-channel image.
pub fn build_colored_mnist(
    base: &MnistSet,
    envs: &[ColorEnvSpec],
    label_noise: f64,
    seed: u64,
) -> Result<Vec<Environment>> {
    check_prob("label_noise", label_noise)?;
    for e in envs {
        check_prob(&format!("color flip probability of `{}`", e.env_id), e.color_flip_prob)?;
    }
    if base.is_empty() {
        return Err(Error::Data("colored MNIST needs a non-empty base set".into()));
    }
    if envs.is_empty() {
        return Err(Error::Config("colored MNIST needs at least one environment".into()));
    }
    let per_env = base.len() / envs.len();
    if per_env == 0 {
        return Err(Error::Data(format!(
            "{} examples cannot fill {} environments",
            base.len(),
            envs.len()
        )));
    }
    let mut order: Vec<usize> = (0..base.len()).collect();
    order.shuffle(&mut substream(seed, &[lane::SHUFFLE, key_str("cmnist")]));

    let pixels = base.pixels();
    envs.iter()
        .enumerate()
        .map(|(k, spec)| {
            let mut rng = substream(seed, &[lane::COLOR, key_str(&spec.env_id)]);
            let indices = &order[k * per_env..(k + 1) * per_env];
            let mut data = vec![0.0; per_env * 2 * pixels];
            let mut labels = Vec::with_capacity(per_env);
            for (row, &i) in indices.iter().enumerate() {
                let mut y = usize::from(base.labels[i] >= 5);
                if rng.random::<f64>() < label_noise {
                    y = 1 - y;
                }
                let mut color = y;
                if rng.random::<f64>() < spec.color_flip_prob {
                    color = 1 - color;
                }
                let start = (row * 2 + color) * pixels;
                data[start..start + pixels].copy_from_slice(&base.image(i));
                labels.push(y);
            }
            Ok(Environment {
                env_id: spec.env_id.clone(),
                inputs: Tensor::new(vec![per_env, 2, base.rows, base.cols], data)?,
                labels,
                role: spec.role,
                provenance: serde_json::json!({
                    "dataset": "colored_mnist",
                    "color_flip_prob": spec.color_flip_prob,
                    "label_noise": label_noise,
                    "seed": seed,
                    "base_offset": k * per_env,
                    "count": per_env,
                }),
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interpolation {
    Nearest,
    #[default]
    Bilinear,
}

/// Rotates a `rows × cols` image counter-clockwise by `angle_degrees` about its
/// center. Each output pixel reads the source at the inversely rotated
/// position; anything outside the image reads as 0.
pub fn rotate_image(img: &[f64], rows: usize, cols: usize, angle_degrees: f64, method: Interpolation) -> Vec<f64> {
    debug_assert_eq!(img.len(), rows * cols);
    let (sin, cos) = angle_degrees.to_radians().sin_cos();
    let cy = (rows as f64 - 1.0) / 2.0;
    let cx = (cols as f64 - 1.0) / 2.0;
    let at = |r: isize, c: isize| -> f64 {
        if r < 0 || c < 0 || r >= rows as isize || c >= cols as isize {
            0.0
        } else {
            img[r as usize * cols + c as usize]
        }
    };
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            let dx = c as f64 - cx;
            let dy = r as f64 - cy;
            let sx = cx + cos * dx - sin * dy;
            let sy = cy + sin * dx + cos * dy;
            out[r * cols + c] = match method {
                Interpolation::Nearest => at(sy.round() as isize, sx.round() as isize),
                Interpolation::Bilinear => {
                    let (x0, y0) = (sx.floor(), sy.floor());
                    let (fx, fy) = (sx - x0, sy - y0);
                    let (x0, y0) = (x0 as isize, y0 as isize);
                    (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x0 + 1))
                        + fy * ((1.0 - fx) * at(y0 + 1, x0) + fx * at(y0 + 1, x0 + 1))
                }
            };
        }
    }
    out
}

/// One environment per angle, each a disjoint random subset of
/// `per_env_count` digits rotated by that angle, labelled 0–9. The
/// `test_angle` environment has role test.
pub fn build_rotated_envs(
    base: &MnistSet,
    angles: &[f64],
    test_angle: f64,
    per_env_count: usize,
    method: Interpolation,
    seed: u64,
) -> Result<Vec<Environment>> {
    if angles.is_empty() || per_env_count == 0 {
        return Err(Error::Config("rotated MNIST needs angles and per_env_count >= 1".into()));
    }
    if !angles.contains(&test_angle) {
        return Err(Error::Config(format!(
            "test_angle {test_angle} is not one of the angles {angles:?}"
        )));
    }
    let needed = angles.len() * per_env_count;
    if base.len() < needed {
        return Err(Error::Data(format!(
            "{} angles x {per_env_count} examples need {needed} base images, have {}",
            angles.len(),
            base.len()
        )));
    }
    let mut order: Vec<usize> = (0..base.len()).collect();
    order.shuffle(&mut substream(seed, &[lane::ROTATE]));
    let pixels = base.pixels();
    angles
        .iter()
        .enumerate()
        .map(|(k, &angle)| {
            let indices = &order[k * per_env_count..(k + 1) * per_env_count];
            let mut data = Vec::with_capacity(per_env_count * pixels);
            for &i in indices {
                data.extend(rotate_image(&base.image(i), base.rows, base.cols, angle, method));
            }
            Ok(Environment {
                env_id: format!("rot{angle}"),
                inputs: Tensor::new(vec![per_env_count, 1, base.rows, base.cols], data)?,
                labels: indices.iter().map(|&i| base.labels[i] as usize).collect(),
                role: if angle == test_angle { Role::Test } else { Role::Train },
                provenance: serde_json::json!({
                    "dataset": "rotated_mnist",
                    "angle": angle,
                    "interpolation": method,
                    "seed": seed,
                    "count": per_env_count,
                }),
            })
        })
        .collect()
}

/// Binary task on `informative + noise` standard-normal features where only
/// the first `informative` features carry signal:
/// `y = [Σ_{j<informative} x_j > 0]`. Returns a train and a test environment.
pub fn build_synthetic_features(
    informative: usize,
    noise: usize,
    train_count: usize,
    test_count: usize,
    seed: u64,
) -> Result<Vec<Environment>> {
    if informative == 0 || train_count == 0 || test_count == 0 {
        return Err(Error::Config(
            "synthetic task needs informative >= 1 and positive sample counts".into(),
        ));
    }
    let d = informative + noise;
    let make = |env_id: &str, n: usize, role: Role| -> Result<Environment> {
        let mut rng = substream(seed, &[lane::SYNTHETIC, key_str(env_id)]);
        let data: Vec<f64> = (0..n * d).map(|_| rng.sample(StandardNormal)).collect();
        let labels = data
            .chunks(d)
            .map(|x| usize::from(x[..informative].iter().sum::<f64>() > 0.0))
            .collect();
        Ok(Environment {
            env_id: env_id.to_string(),
            inputs: Tensor::new(vec![n, d], data)?,
            labels,
            role,
            provenance: serde_json::json!({
                "dataset": "synthetic",
                "informative": informative,
                "noise": noise,
                "seed": seed,
                "count": n,
            }),
        })
    };
    Ok(vec![
        make("train", train_count, Role::Train)?,
        make("test", test_count, Role::Test)?,
    ])
}

/// Seeded permutation of `env` cut into batches of `batch_size`; the last
/// batch may be short. The order depends only on `(seed, env_id, epoch)`.
pub fn batch_iter(
    env: &Environment,
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> Result<impl Iterator<Item = EnvironmentBatch> + '_> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be >= 1".into()));
    }
    let order = epoch_order(env, seed, epoch);
    Ok((0..env.len().div_ceil(batch_size)).map(move |b| {
        let end = ((b + 1) * batch_size).min(order.len());
        env.batch(&order[b * batch_size..end])
            .expect("indices come from a permutation of the environment")
    }))
}

pub(crate) fn epoch_order(env: &Environment, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..env.len()).collect();
    order.shuffle(&mut substream(seed, &[lane::SHUFFLE, key_str(&env.env_id), epoch]));
    order
}

/// Which suite to build and its parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// `cmnist`, `rmnist` or `synthetic`.
    pub dataset: Dataset,
    /// Directory with the IDX files; see [`resolve_data_root`].
    pub root: Option<PathBuf>,
    /// Colored MNIST: training digits drawn from the train split.
    pub train_count: usize,
    /// Colored MNIST: test digits drawn from the test split.
    pub test_count: usize,
    pub label_noise: f64,
    pub train_flip_probs: Vec<f64>,
    pub test_flip_prob: f64,
    /// Rotated MNIST.
    pub angles: Vec<f64>,
    pub test_angle: f64,
    pub per_env_count: usize,
    pub interpolation: Interpolation,
    /// Synthetic task.
    pub informative_features: usize,
    pub noise_features: usize,
    pub synthetic_train: usize,
    pub synthetic_test: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dataset {
    Cmnist,
    Rmnist,
    Synthetic,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            dataset: Dataset::Cmnist,
            root: None,
            train_count: 50_000,
            test_count: 10_000,
            label_noise: 0.25,
            train_flip_probs: vec![0.1, 0.2],
            test_flip_prob: 0.9,
            angles: vec![0.0, 15.0, 30.0, 45.0, 60.0, 75.0],
            test_angle: 0.0,
            per_env_count: 1000,
            interpolation: Interpolation::Bilinear,
            informative_features: 2,
            noise_features: 8,
            synthetic_train: 2000,
            synthetic_test: 1000,
        }
    }
}

impl DataConfig {
    /// Per-example input shape and class count of the selected suite.
    pub fn input_signature(&self) -> (Vec<usize>, usize) {
        match self.dataset {
            Dataset::Cmnist => (vec![2, 28, 28], 2),
            Dataset::Rmnist => (vec![1, 28, 28], 10),
            Dataset::Synthetic => (vec![self.informative_features + self.noise_features], 2),
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_prob("data.label_noise", self.label_noise)?;
        check_prob("data.test_flip_prob", self.test_flip_prob)?;
        for &p in &self.train_flip_probs {
            check_prob("data.train_flip_probs entry", p)?;
        }
        match self.dataset {
            Dataset::Cmnist if self.train_flip_probs.is_empty() => Err(Error::Config(
                "data.train_flip_probs needs at least one environment".into(),
            )),
            Dataset::Cmnist if self.train_count == 0 || self.test_count == 0 => {
                Err(Error::Config("data.train_count and data.test_count must be >= 1".into()))
            }
            Dataset::Rmnist if !self.angles.contains(&self.test_angle) => Err(Error::Config(format!(
                "data.test_angle {} is not one of data.angles {:?}",
                self.test_angle, self.angles
            ))),
            Dataset::Rmnist if self.angles.len() < 2 || self.per_env_count == 0 => Err(
                Error::Config("rotated MNIST needs >= 2 angles and per_env_count >= 1".into()),
            ),
            _ => Ok(()),
        }
    }

    /// Loads whatever raw data the suite needs and builds its environments.
    pub fn build(&self, seed: u64) -> Result<Vec<Environment>> {
        self.validate()?;
        let root = || resolve_data_root(self.root.as_deref());
        match self.dataset {
            Dataset::Cmnist => {
                let root = root();
                let train = MnistSet::load(&root, Split::Train)?;
                let test = MnistSet::load(&root, Split::Test)?;
                if train.len() < self.train_count || test.len() < self.test_count {
                    return Err(Error::Data(format!(
                        "asked for {} train / {} test digits, files hold {} / {}",
                        self.train_count,
                        self.test_count,
                        train.len(),
                        test.len()
                    )));
                }
                let train_specs: Vec<ColorEnvSpec> = self
                    .train_flip_probs
                    .iter()
                    .map(|&p| ColorEnvSpec {
                        env_id: format!("train{p}"),
                        color_flip_prob: p,
                        role: Role::Train,
                    })
                    .collect();
                let test_spec = ColorEnvSpec {
                    env_id: "test".into(),
                    color_flip_prob: self.test_flip_prob,
                    role: Role::Test,
                };
                let mut envs = build_colored_mnist(
                    &train.truncate(self.train_count),
                    &train_specs,
                    self.label_noise,
                    seed,
                )?;
                envs.extend(build_colored_mnist(
                    &test.truncate(self.test_count),
                    &[test_spec],
                    self.label_noise,
                    seed,
                )?);
                Ok(envs)
            }
            Dataset::Rmnist => {
                let train = MnistSet::load(&root(), Split::Train)?;
                build_rotated_envs(
                    &train,
                    &self.angles,
                    self.test_angle,
                    self.per_env_count,
                    self.interpolation,
                    seed,
                )
            }
            Dataset::Synthetic => build_synthetic_features(
                self.informative_features,
                self.noise_features,
                self.synthetic_train,
                self.synthetic_test,
                seed,
            ),
        }
    }
}
