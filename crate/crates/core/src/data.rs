//! Task containers, the binary task-file format with its JSON manifest, and a
//! sampler for the generative process.
//!
//! Task file layout (little-endian):
//!
//! ```text
//! "LDCC"            4 bytes magic
//! version  u16      = 1
//! C        u32      number of classes
//! D        u32      sample dimension
//! repeated C times:
//!   N_c    u32
//!   N_c·D  f32      row-major samples
//! ```
//!
//! Sample values are stored as `f32` in memory as well, so a save/load cycle
//! is bit-exact.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ThemeModel;
use crate::specfn::log_sum_exp;

const MAGIC: &[u8; 4] = b"LDCC";
const FORMAT_VERSION: u16 = 1;
const MANIFEST_NAME: &str = "manifest.json";

/// The samples of one class: `rows` vectors of dimension `dim`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassBlock {
    dim: usize,
    values: Vec<f32>,
}

impl ClassBlock {
    pub fn new(dim: usize, values: Vec<f32>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Data("sample dimension must be at least 1".into()));
        }
        if values.is_empty() || !values.len().is_multiple_of(dim) {
            return Err(Error::Data(format!(
                "class block of {} values is not a non-empty multiple of D = {dim}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("class block has non-finite samples".into()));
        }
        Ok(Self { dim, values })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.values.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn row(&self, n: usize) -> &[f32] {
        &self.values[n * self.dim..(n + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.values.chunks_exact(self.dim)
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }
}

/// A classification task: C classes, each with its own sample count.
#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    id: String,
    classes: Vec<ClassBlock>,
}

impl Task {
    pub fn new(id: impl Into<String>, classes: Vec<ClassBlock>) -> Result<Self> {
        let id = id.into();
        let Some(first) = classes.first() else {
            return Err(Error::Data(format!("task {id:?} has no classes")));
        };
        if classes.iter().any(|c| c.dim() != first.dim()) {
            return Err(Error::Data(format!("task {id:?} mixes sample dimensions")));
        }
        Ok(Self { id, classes })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn classes(&self) -> &[ClassBlock] {
        &self.classes
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn dim(&self) -> usize {
        self.classes[0].dim()
    }

    pub fn total_samples(&self) -> usize {
        self.classes.iter().map(ClassBlock::len).sum()
    }

    /// All samples, class by class.
    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.classes.iter().flat_map(ClassBlock::rows)
    }
}

/// An ordered, non-empty set of tasks sharing one dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskCollection {
    dim: usize,
    tasks: Vec<Task>,
}

impl TaskCollection {
    pub fn new(tasks: Vec<Task>) -> Result<Self> {
        let Some(first) = tasks.first() else {
            return Err(Error::Data("task collection is empty".into()));
        };
        let dim = first.dim();
        let mut seen = HashSet::new();
        for t in &tasks {
            if t.dim() != dim {
                return Err(Error::Data(format!(
                    "task {:?} has dimension {}, expected {dim}",
                    t.id(),
                    t.dim()
                )));
            }
            if !seen.insert(t.id()) {
                return Err(Error::Data(format!("duplicate task id {:?}", t.id())));
            }
        }
        Ok(Self { dim, tasks })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn tasks(&self) -> &[Task] {
        &self.tasks
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn into_tasks(self) -> Vec<Task> {
        self.tasks
    }
}

/// Latent draws of the generative process, kept alongside synthetic data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentRecord {
    /// Task-theme mixture φ_d per task (L-simplex).
    pub phi: Vec<Vec<f64>>,
    /// Task-theme index y_dc per task and class.
    pub y: Vec<Vec<usize>>,
    /// Image-theme index z_dcn per task, class and sample.
    pub z: Vec<Vec<Vec<usize>>>,
}

impl LatentRecord {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string(self).map_err(|e| Error::json(path, e))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }
}

/// RNG for task `index` under `seed`: one ChaCha8 stream per task, so output
/// does not depend on how tasks are scheduled across threads.
pub fn task_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Draws from Dir(concentration) as normalized Gamma variates.
///
/// Shapes below one are sampled in log space (G_a = G_{a+1} · U^{1/a}) so very
/// small concentrations do not underflow to an all-zero draw.
pub fn sample_dirichlet<R: Rng + ?Sized>(rng: &mut R, concentration: &[f64]) -> Vec<f64> {
    if concentration.len() == 1 {
        return vec![1.0];
    }
    let mut logs: Vec<f64> = concentration
        .iter()
        .map(|&a| {
            if a >= 1.0 {
                Gamma::new(a, 1.0).unwrap().sample(rng).ln()
            } else {
                let g = Gamma::new(a + 1.0, 1.0).unwrap().sample(rng);
                let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
                g.ln() + u.ln() / a
            }
        })
        .collect();
    let lse = log_sum_exp(&logs).expect("non-empty");
    for v in logs.iter_mut() {
        *v = (*v - lse).exp();
    }
    logs
}

pub(crate) fn sample_categorical<R: Rng + ?Sized>(rng: &mut R, probs: &[f64]) -> usize {
    let mut u: f64 = rng.random::<f64>() * probs.iter().sum::<f64>();
    for (i, &p) in probs.iter().enumerate() {
        if u < p {
            return i;
        }
        u -= p;
    }
    // rounding: return the last index with positive mass
    probs
        .iter()
        .rposition(|&p| p > 0.0)
        .unwrap_or(probs.len() - 1)
}

/// Samples M tasks of C classes with N samples each from the generative process.
///
/// Task `d` draws from its own stream [`task_rng`]`(seed, d)`, so the result is
/// identical for any thread count. Samples are rounded to `f32`.
pub fn generate_synthetic(
    model: &ThemeModel,
    tasks: usize,
    classes: usize,
    shots: usize,
    seed: u64,
) -> Result<(TaskCollection, LatentRecord)> {
    if tasks == 0 || classes == 0 || shots == 0 {
        return Err(Error::Argument(
            "tasks, classes and shots must all be at least 1".into(),
        ));
    }
    let dim = model.dim();
    // per task: (task, φ, y, z)
    type Draw = (Task, Vec<f64>, Vec<usize>, Vec<Vec<usize>>);
    let drawn: Vec<Draw> = (0..tasks)
        .into_par_iter()
        .map(|d| {
            let mut rng = task_rng(seed, d as u64);
            let phi = sample_dirichlet(&mut rng, model.delta());
            let mut ys = Vec::with_capacity(classes);
            let mut zs = Vec::with_capacity(classes);
            let mut blocks = Vec::with_capacity(classes);
            let mut eps = vec![0.0f64; dim];
            for _ in 0..classes {
                let y = sample_categorical(&mut rng, &phi);
                let theta = sample_dirichlet(&mut rng, &model.alpha()[y]);
                let mut values = Vec::with_capacity(shots * dim);
                let mut z_row = Vec::with_capacity(shots);
                for _ in 0..shots {
                    let z = sample_categorical(&mut rng, &theta);
                    for e in eps.iter_mut() {
                        *e = StandardNormal.sample(&mut rng);
                    }
                    let lower = model.sigma()[z].cholesky_lower();
                    let mu = &model.mu()[z];
                    for i in 0..dim {
                        let mut v = mu[i];
                        for j in 0..=i {
                            v += lower[(i, j)] * eps[j];
                        }
                        values.push(v as f32);
                    }
                    z_row.push(z);
                }
                ys.push(y);
                zs.push(z_row);
                blocks.push(ClassBlock::new(dim, values)?);
            }
            Ok((Task::new(format!("task-{d:06}"), blocks)?, phi, ys, zs))
        })
        .collect::<Result<_>>()?;

    let mut out_tasks = Vec::with_capacity(tasks);
    let mut latent = LatentRecord {
        phi: Vec::with_capacity(tasks),
        y: Vec::with_capacity(tasks),
        z: Vec::with_capacity(tasks),
    };
    for (t, phi, y, z) in drawn {
        out_tasks.push(t);
        latent.phi.push(phi);
        latent.y.push(y);
        latent.z.push(z);
    }
    Ok((TaskCollection::new(out_tasks)?, latent))
}

/// Encodes one task in the binary task format.
pub fn encode_task(task: &Task) -> Vec<u8> {
    let mut buf =
        Vec::with_capacity(14 + task.num_classes() * 4 + task.total_samples() * task.dim() * 4);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(task.num_classes() as u32).to_le_bytes());
    buf.extend_from_slice(&(task.dim() as u32).to_le_bytes());
    for class in task.classes() {
        buf.extend_from_slice(&(class.len() as u32).to_le_bytes());
        for v in class.values() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn fail(&self, offset: usize, message: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            offset: offset as u64,
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.fail(
                self.pos,
                format!("unexpected end of file while reading {what}"),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

/// Decodes a binary task. `expected_dim`, when given, is checked against the
/// header. Errors name the byte offset of the offending field.
pub fn decode_task(
    bytes: &[u8],
    id: impl Into<String>,
    expected_dim: Option<usize>,
    path: &Path,
) -> Result<Task> {
    let mut r = Reader {
        bytes,
        pos: 0,
        path,
    };
    if r.take(4, "magic")? != MAGIC {
        return Err(r.fail(0, "bad magic, expected \"LDCC\""));
    }
    let version = r.u16("version")?;
    if version != FORMAT_VERSION {
        return Err(r.fail(4, format!("unsupported version {version}")));
    }
    let classes = r.u32("class count")? as usize;
    if classes == 0 {
        return Err(r.fail(6, "class count must be at least 1"));
    }
    let dim = r.u32("dimension")? as usize;
    if dim == 0 {
        return Err(r.fail(10, "dimension must be at least 1"));
    }
    if let Some(want) = expected_dim {
        if dim != want {
            return Err(r.fail(
                10,
                format!("dimension {dim} does not match manifest dimension {want}"),
            ));
        }
    }
    let mut blocks = Vec::with_capacity(classes);
    for c in 0..classes {
        let count_at = r.pos;
        let n = r.u32("sample count")? as usize;
        if n == 0 {
            return Err(r.fail(count_at, format!("class {c} has no samples")));
        }
        let start = r.pos;
        let raw = r.take(n * dim * 4, "samples")?;
        let values: Vec<f32> = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(r.fail(start + 4 * i, "non-finite sample value"));
        }
        blocks.push(ClassBlock::new(dim, values)?);
    }
    if r.pos != bytes.len() {
        return Err(r.fail(r.pos, "trailing bytes after last class"));
    }
    Task::new(id, blocks)
}

pub fn write_task_file(task: &Task, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_task(task)).map_err(|e| Error::io(path, e))
}

pub fn read_task_file(
    path: impl AsRef<Path>,
    id: impl Into<String>,
    expected_dim: Option<usize>,
) -> Result<Task> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_task(&bytes, id, expected_dim, path)
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    dimension: usize,
    tasks: Vec<ManifestEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    id: String,
    path: String,
}

/// Writes `manifest.json` plus one task file per task into `dir`; returns the
/// manifest path. Task file paths in the manifest are relative to `dir`.
pub fn save_tasks(coll: &TaskCollection, dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    let task_dir = dir.join("tasks");
    fs::create_dir_all(&task_dir).map_err(|e| Error::io(&task_dir, e))?;
    let mut entries = Vec::with_capacity(coll.len());
    for (i, task) in coll.tasks().iter().enumerate() {
        let rel = format!("tasks/task_{i:06}.ldcc");
        write_task_file(task, dir.join(&rel))?;
        entries.push(ManifestEntry {
            id: task.id().to_string(),
            path: rel,
        });
    }
    let manifest = Manifest {
        dimension: coll.dim(),
        tasks: entries,
    };
    let path = dir.join(MANIFEST_NAME);
    let mut text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&path, e))?;
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Loads a collection from its manifest. Relative task paths resolve against
/// the manifest's directory.
pub fn load_tasks(manifest: impl AsRef<Path>) -> Result<TaskCollection> {
    let manifest = manifest.as_ref();
    let text = fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::json(manifest, e))?;
    if m.dimension == 0 {
        return Err(Error::Data(format!(
            "{}: manifest dimension must be at least 1",
            manifest.display()
        )));
    }
    let base = manifest.parent().unwrap_or(Path::new("."));
    let tasks = m
        .tasks
        .into_par_iter()
        .map(|e| {
            let p = Path::new(&e.path);
            let full = if p.is_absolute() {
                p.to_path_buf()
            } else {
                base.join(p)
            };
            read_task_file(full, e.id, Some(m.dimension))
        })
        .collect::<Result<Vec<_>>>()?;
    TaskCollection::new(tasks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::random_model;
    use nalgebra::DMatrix;

    fn tiny() -> TaskCollection {
        let t = Task::new("only", vec![ClassBlock::new(1, vec![0.25]).unwrap()]).unwrap();
        TaskCollection::new(vec![t]).unwrap()
    }

    #[test]
    fn containers_validate() {
        assert!(ClassBlock::new(2, vec![1.0, 2.0, 3.0]).is_err());
        assert!(ClassBlock::new(1, vec![]).is_err());
        assert!(ClassBlock::new(1, vec![f32::NAN]).is_err());
        assert!(Task::new("x", vec![]).is_err());
        let a = ClassBlock::new(1, vec![1.0]).unwrap();
        let b = ClassBlock::new(2, vec![1.0, 2.0]).unwrap();
        assert!(Task::new("x", vec![a.clone(), b.clone()]).is_err());
        let t1 = Task::new("x", vec![a.clone()]).unwrap();
        let t2 = Task::new("x", vec![a]).unwrap();
        assert!(TaskCollection::new(vec![t1.clone(), t2]).is_err());
        let t3 = Task::new("y", vec![b]).unwrap();
        assert!(TaskCollection::new(vec![t1, t3]).is_err());
        assert!(TaskCollection::new(vec![]).is_err());
    }

    #[test]
    fn varying_class_sizes_round_trip() {
        let t = Task::new(
            "uneven",
            vec![
                ClassBlock::new(2, vec![1.0, 2.0]).unwrap(),
                ClassBlock::new(2, vec![3.0, 4.0, 5.0, 6.0, -7.5, 8.0]).unwrap(),
            ],
        )
        .unwrap();
        let bytes = encode_task(&t);
        let back = decode_task(&bytes, "uneven", Some(2), Path::new("mem")).unwrap();
        assert_eq!(back, t);
        assert_eq!(back.classes()[1].len(), 3);
    }

    #[test]
    fn tiny_collection_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let coll = tiny();
        let manifest = save_tasks(&coll, dir.path()).unwrap();
        assert_eq!(load_tasks(manifest).unwrap(), coll);
    }

    #[test]
    fn format_errors_name_offsets() {
        let coll = tiny();
        let t = &coll.tasks()[0];
        let good = encode_task(t);

        let mut bad = good.clone();
        bad[0] = b'X';
        match decode_task(&bad, "t", None, Path::new("f")) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("{other:?}"),
        }

        let mut bad = good.clone();
        bad[4] = 7;
        match decode_task(&bad, "t", None, Path::new("f")) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 4),
            other => panic!("{other:?}"),
        }

        match decode_task(&good, "t", Some(3), Path::new("f")) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 10),
            other => panic!("{other:?}"),
        }

        match decode_task(&good[..good.len() - 1], "t", None, Path::new("f")) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 18),
            other => panic!("{other:?}"),
        }

        let mut long = good.clone();
        long.push(0);
        assert!(matches!(
            decode_task(&long, "t", None, Path::new("f")),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn single_task_theme_forces_y_zero() {
        let model = random_model(1, 3, 2, 4).unwrap();
        let (_, latent) = generate_synthetic(&model, 20, 4, 3, 1).unwrap();
        assert!(latent.y.iter().flatten().all(|&y| y == 0));
    }

    #[test]
    fn latent_indices_in_range() {
        let model = random_model(3, 4, 2, 8).unwrap();
        let (coll, latent) = generate_synthetic(&model, 30, 3, 5, 2).unwrap();
        assert_eq!(coll.len(), 30);
        for (phi, (ys, zs)) in latent.phi.iter().zip(latent.y.iter().zip(&latent.z)) {
            assert!((phi.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(ys.iter().all(|&y| y < 3));
            assert!(zs.iter().flatten().all(|&z| z < 4));
        }
    }

    #[test]
    fn generator_is_deterministic() {
        let model = random_model(2, 3, 2, 4).unwrap();
        let a = generate_synthetic(&model, 12, 3, 4, 99).unwrap();
        let b = generate_synthetic(&model, 12, 3, 4, 99).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(&model, 12, 3, 4, 100).unwrap();
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn generator_round_trips_through_files() {
        let model = random_model(2, 3, 3, 4).unwrap();
        let (coll, latent) = generate_synthetic(&model, 10, 4, 5, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let manifest = save_tasks(&coll, dir.path()).unwrap();
        assert_eq!(load_tasks(&manifest).unwrap(), coll);
        let lp = dir.path().join("latent.json");
        latent.save(&lp).unwrap();
        assert_eq!(LatentRecord::load(&lp).unwrap(), latent);
    }

    #[test]
    fn single_gaussian_empirical_mean() {
        let model = ThemeModel::new(
            vec![vec![0.0]],
            vec![DMatrix::identity(1, 1)],
            vec![vec![1.0]],
            vec![1.0],
        )
        .unwrap();
        let (coll, _) = generate_synthetic(&model, 1000, 10, 10, 5).unwrap();
        let (sum, n) = coll
            .tasks()
            .iter()
            .flat_map(|t| t.rows())
            .fold((0.0, 0usize), |(s, n), r| (s + r[0] as f64, n + 1));
        assert_eq!(n, 100_000);
        assert!((sum / n as f64).abs() < 4.0 / (n as f64).sqrt());
    }

    #[test]
    fn class_theme_frequencies_match_symmetric_prior() {
        let model = ThemeModel::new(
            vec![vec![0.0]],
            vec![DMatrix::identity(1, 1)],
            vec![vec![1.0]; 4],
            vec![0.7; 4],
        )
        .unwrap();
        let (_, latent) = generate_synthetic(&model, 10_000, 1, 1, 8).unwrap();
        let n = latent.y.len() as f64;
        for l in 0..4 {
            let freq = latent.y.iter().filter(|y| y[0] == l).count() as f64 / n;
            let se = (0.25f64 * 0.75 / n).sqrt();
            assert!((freq - 0.25).abs() < 3.0 * se, "theme {l}: {freq}");
        }
    }

    #[test]
    fn dirichlet_sampler_handles_tiny_concentrations() {
        let mut rng = task_rng(1, 0);
        for _ in 0..1000 {
            let p = sample_dirichlet(&mut rng, &[0.01, 0.01, 0.01]);
            assert!(p.iter().all(|v| v.is_finite() && *v >= 0.0));
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
