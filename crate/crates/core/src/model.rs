//! The labeling function: projector, student/teacher prototypes and soft assignments.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::linalg::{argmax_columns, normalize_columns, normalize_rows, softmax_columns};
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"SMCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Linear branch plus a two-layer SiLU MLP; the two outputs are summed.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectorParams {
    pub linear_w: Array2<f64>,
    pub linear_b: Array1<f64>,
    pub mlp_w1: Array2<f64>,
    pub mlp_b1: Array1<f64>,
    pub mlp_w2: Array2<f64>,
    pub mlp_b2: Array1<f64>,
}

/// Intermediate activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ProjectorCache {
    pub hidden_pre: Array2<f64>,
    pub hidden: Array2<f64>,
}

pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

pub fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

impl ProjectorParams {
    pub fn zeros(channels: usize, hidden: usize, dim_d: usize) -> Self {
        Self {
            linear_w: Array2::zeros((dim_d, channels)),
            linear_b: Array1::zeros(dim_d),
            mlp_w1: Array2::zeros((hidden, channels)),
            mlp_b1: Array1::zeros(hidden),
            mlp_w2: Array2::zeros((dim_d, hidden)),
            mlp_b2: Array1::zeros(dim_d),
        }
    }

    /// Weights and biases drawn from `uniform(±1/sqrt(fan_in))`.
    pub fn init<R: Rng>(channels: usize, hidden: usize, dim_d: usize, rng: &mut R) -> Self {
        let mut uniform = |rows: usize, cols: usize, fan_in: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-bound..bound))
        };
        let linear_w = uniform(dim_d, channels, channels);
        let linear_b = uniform(dim_d, 1, channels).remove_axis(Axis(1));
        let mlp_w1 = uniform(hidden, channels, channels);
        let mlp_b1 = uniform(hidden, 1, channels).remove_axis(Axis(1));
        let mlp_w2 = uniform(dim_d, hidden, hidden);
        let mlp_b2 = uniform(dim_d, 1, hidden).remove_axis(Axis(1));
        Self { linear_w, linear_b, mlp_w1, mlp_b1, mlp_w2, mlp_b2 }
    }

    pub fn channels(&self) -> usize {
        self.linear_w.ncols()
    }

    pub fn hidden(&self) -> usize {
        self.mlp_w1.nrows()
    }

    pub fn dim_d(&self) -> usize {
        self.linear_w.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let (d, c, h) = (self.dim_d(), self.channels(), self.hidden());
        let ok = self.linear_b.len() == d
            && self.mlp_w1.ncols() == c
            && self.mlp_b1.len() == h
            && self.mlp_w2.dim() == (d, h)
            && self.mlp_b2.len() == d;
        if !ok {
            return Err(Error::shape("projector tensors disagree on C/H/D"));
        }
        let finite = self.linear_w.iter().chain(self.linear_b.iter())
            .chain(self.mlp_w1.iter()).chain(self.mlp_b1.iter())
            .chain(self.mlp_w2.iter()).chain(self.mlp_b2.iter())
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::NonFinite("projector parameters".into()));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Array2<f64>) -> Result<(Array2<f64>, ProjectorCache)> {
        if x.nrows() != self.channels() {
            return Err(Error::shape(format!(
                "features have {} channels, projector expects {}",
                x.nrows(),
                self.channels()
            )));
        }
        let hidden_pre = self.mlp_w1.dot(x) + &self.mlp_b1.view().insert_axis(Axis(1));
        let hidden = hidden_pre.mapv(silu);
        let z = self.linear_w.dot(x)
            + &self.linear_b.view().insert_axis(Axis(1))
            + self.mlp_w2.dot(&hidden)
            + &self.mlp_b2.view().insert_axis(Axis(1));
        Ok((z, ProjectorCache { hidden_pre, hidden }))
    }

    pub(crate) fn tensors(&self) -> [ArrayRef<'_>; 6] {
        [
            ArrayRef::Matrix(&self.linear_w),
            ArrayRef::Vector(&self.linear_b),
            ArrayRef::Matrix(&self.mlp_w1),
            ArrayRef::Vector(&self.mlp_b1),
            ArrayRef::Matrix(&self.mlp_w2),
            ArrayRef::Vector(&self.mlp_b2),
        ]
    }
}

/// `Z = Linear(X) + MLP2(SiLU(MLP1(X)))`, column by column.
pub fn project(params: &ProjectorParams, x: &Array2<f64>) -> Result<Array2<f64>> {
    params.forward(x).map(|(z, _)| z)
}

/// `K x D` class centers. Rows are L2-normalized in the forward graph.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeSet(pub Array2<f64>);

impl PrototypeSet {
    /// Gaussian rows, each scaled to unit norm.
    pub fn init<R: Rng>(k: usize, dim_d: usize, rng: &mut R) -> Self {
        let mut p = Array2::from_shape_simple_fn((k, dim_d), || rng.sample::<f64, _>(StandardNormal));
        for mut row in p.axis_iter_mut(Axis(0)) {
            let n = row.dot(&row).sqrt();
            row /= n;
        }
        Self(p)
    }

    pub fn k(&self) -> usize {
        self.0.nrows()
    }

    pub fn dim_d(&self) -> usize {
        self.0.ncols()
    }
}

/// `K x N` per-patch class distributions.
#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentMap(pub Array2<f64>);

impl AssignmentMap {
    pub fn probs(&self) -> &Array2<f64> {
        &self.0
    }

    /// Per-patch argmax, lowest class on ties.
    pub fn labels(&self) -> Vec<usize> {
        argmax_columns(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub projector: ProjectorParams,
    pub student: PrototypeSet,
    pub teacher: PrototypeSet,
    pub tau: f64,
    pub iteration: u64,
}

impl ModelState {
    /// Fresh state; the teacher starts as an exact copy of the student.
    pub fn init(channels: usize, hidden: usize, dim_d: usize, k: usize, tau: f64, seed: u64) -> Result<Self> {
        if channels == 0 || hidden == 0 || dim_d == 0 || k == 0 {
            return Err(Error::config("model dimensions must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let projector = ProjectorParams::init(channels, hidden, dim_d, &mut rng);
        let student = PrototypeSet::init(k, dim_d, &mut rng);
        let state = Self { projector, teacher: student.clone(), student, tau, iteration: 0 };
        state.validate()?;
        Ok(state)
    }

    pub fn dim_d(&self) -> usize {
        self.projector.dim_d()
    }

    pub fn dim_k(&self) -> usize {
        self.student.k()
    }

    pub fn channels(&self) -> usize {
        self.projector.channels()
    }

    pub fn validate(&self) -> Result<()> {
        self.projector.validate()?;
        if self.student.0.dim() != self.teacher.0.dim() {
            return Err(Error::shape("student and teacher prototypes differ in shape"));
        }
        if self.student.dim_d() != self.dim_d() {
            return Err(Error::shape("prototype width differs from projector output"));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::config(format!("tau must be > 0, got {}", self.tau)));
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        self.write_to(&mut out)?;
        out.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }

    /// `SMCK` layout: magic | version u32 | iteration u64 | tau f64 | n_tensors u32 |
    /// per tensor: rows u32 | cols u32 | f64[rows*cols] row-major. Tensor order: linear W, b,
    /// MLP W1, b1, W2, b2, student, teacher; biases are `len x 1`.
    pub fn write_to<W: Write>(&self, out: &mut W) -> Result<()> {
        self.validate()?;
        out.write_all(&CHECKPOINT_MAGIC)?;
        out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        out.write_all(&self.iteration.to_le_bytes())?;
        out.write_all(&self.tau.to_le_bytes())?;
        let mut tensors: Vec<ArrayRef<'_>> = self.projector.tensors().to_vec();
        tensors.push(ArrayRef::Matrix(&self.student.0));
        tensors.push(ArrayRef::Matrix(&self.teacher.0));
        out.write_all(&(tensors.len() as u32).to_le_bytes())?;
        for t in tensors {
            let (rows, cols) = t.shape();
            out.write_all(&(rows as u32).to_le_bytes())?;
            out.write_all(&(cols as u32).to_le_bytes())?;
            let mut buf = Vec::with_capacity(rows * cols * 8);
            for v in t.iter() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            out.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(input: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(input, &mut magic, "checkpoint magic")?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::BadMagic { expected: CHECKPOINT_MAGIC, found: magic });
        }
        let version = u32::from_le_bytes(read_array(input, "checkpoint version")?);
        if version != CHECKPOINT_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let iteration = u64::from_le_bytes(read_array(input, "iteration")?);
        let tau = f64::from_le_bytes(read_array(input, "tau")?);
        let n = u32::from_le_bytes(read_array(input, "tensor count")?);
        if n != 8 {
            return Err(Error::invalid(format!("checkpoint holds {n} tensors, expected 8")));
        }
        let mut mats = Vec::with_capacity(8);
        for _ in 0..n {
            let rows = u32::from_le_bytes(read_array(input, "tensor rows")?) as usize;
            let cols = u32::from_le_bytes(read_array(input, "tensor cols")?) as usize;
            let len = rows.checked_mul(cols).and_then(|l| l.checked_mul(8))
                .ok_or_else(|| Error::invalid("tensor size overflows"))?;
            let mut buf = Vec::new();
            if input.take(len as u64).read_to_end(&mut buf)? != len {
                return Err(Error::Truncated("tensor data"));
            }
            let data: Vec<f64> = buf
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                .collect();
            mats.push(Array2::from_shape_vec((rows, cols), data).expect("length checked"));
        }
        let mut it = mats.into_iter();
        let next_vec = |it: &mut std::vec::IntoIter<Array2<f64>>| -> Result<Array1<f64>> {
            let m = it.next().expect("8 tensors");
            if m.ncols() != 1 {
                return Err(Error::shape("bias tensor must be a column"));
            }
            Ok(m.remove_axis(Axis(1)))
        };
        let linear_w = it.next().expect("8 tensors");
        let linear_b = next_vec(&mut it)?;
        let mlp_w1 = it.next().expect("8 tensors");
        let mlp_b1 = next_vec(&mut it)?;
        let mlp_w2 = it.next().expect("8 tensors");
        let mlp_b2 = next_vec(&mut it)?;
        let student = PrototypeSet(it.next().expect("8 tensors"));
        let teacher = PrototypeSet(it.next().expect("8 tensors"));
        let state = Self {
            projector: ProjectorParams { linear_w, linear_b, mlp_w1, mlp_b1, mlp_w2, mlp_b2 },
            student,
            teacher,
            tau,
            iteration,
        };
        state.validate()?;
        Ok(state)
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) enum ArrayRef<'a> {
    Matrix(&'a Array2<f64>),
    Vector(&'a Array1<f64>),
}

impl ArrayRef<'_> {
    fn shape(&self) -> (usize, usize) {
        match self {
            ArrayRef::Matrix(m) => m.dim(),
            ArrayRef::Vector(v) => (v.len(), 1),
        }
    }

    fn iter(&self) -> Box<dyn Iterator<Item = &f64> + '_> {
        match self {
            ArrayRef::Matrix(m) => Box::new(m.iter()),
            ArrayRef::Vector(v) => Box::new(v.iter()),
        }
    }
}

fn read_exact<R: Read>(input: &mut R, buf: &mut [u8], what: &'static str) -> Result<()> {
    input.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => Error::Truncated(what),
        _ => Error::Io(e),
    })
}

fn read_array<R: Read, const N: usize>(input: &mut R, what: &'static str) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    read_exact(input, &mut b, what)?;
    Ok(b)
}

/// Everything the forward pass of one image produces, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct Forward {
    pub z: Array2<f64>,
    pub projector_cache: ProjectorCache,
    pub z_bar: Array2<f64>,
    pub z_norms: Array1<f64>,
    pub student_bar: Array2<f64>,
    pub student_norms: Array1<f64>,
    pub teacher_bar: Array2<f64>,
    pub a_s: AssignmentMap,
    pub a_t: AssignmentMap,
    pub labels: Vec<usize>,
}

/// Full per-image forward: projection followed by [`assign`].
pub fn forward(state: &ModelState, x: &Array2<f64>) -> Result<Forward> {
    let (z, projector_cache) = state.projector.forward(x)?;
    let a = assign_parts(state, &z)?;
    Ok(Forward {
        z,
        projector_cache,
        z_bar: a.z_bar,
        z_norms: a.z_norms,
        student_bar: a.student_bar,
        student_norms: a.student_norms,
        teacher_bar: a.teacher_bar,
        a_s: a.a_s,
        a_t: a.a_t,
        labels: a.labels,
    })
}

struct AssignParts {
    z_bar: Array2<f64>,
    z_norms: Array1<f64>,
    student_bar: Array2<f64>,
    student_norms: Array1<f64>,
    teacher_bar: Array2<f64>,
    a_s: AssignmentMap,
    a_t: AssignmentMap,
    labels: Vec<usize>,
}

fn assign_parts(state: &ModelState, z: &Array2<f64>) -> Result<AssignParts> {
    if z.nrows() != state.dim_d() {
        return Err(Error::shape(format!("embeddings have {} rows, D = {}", z.nrows(), state.dim_d())));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("embeddings".into()));
    }
    let (z_bar, z_norms) = normalize_columns(z, "embeddings")?;
    let (student_bar, student_norms) = normalize_rows(&state.student.0, "student prototypes")?;
    let (teacher_bar, _) = normalize_rows(&state.teacher.0, "teacher prototypes")?;
    let a_s = softmax_columns(&student_bar.dot(&z_bar));
    let a_t = softmax_columns(&(teacher_bar.dot(&z_bar) / state.tau));
    let labels = argmax_columns(&a_t);
    Ok(AssignParts {
        z_bar,
        z_norms,
        student_bar,
        student_norms,
        teacher_bar,
        a_s: AssignmentMap(a_s),
        a_t: AssignmentMap(a_t),
        labels,
    })
}

/// Student assignments `softmax(P̄s · sg(Z̄))`, teacher assignments `softmax(sg(P̄t) · Z̄ / τ)`
/// and teacher hard labels. The stop-gradient placement is honored by
/// [`crate::trainer::backward`].
pub fn assign(state: &ModelState, z: &Array2<f64>) -> Result<(AssignmentMap, AssignmentMap, Vec<usize>)> {
    let a = assign_parts(state, z)?;
    Ok((a.a_s, a.a_t, a.labels))
}

/// Teacher assignments for raw features; this is the inference path.
pub fn teacher_assignments(state: &ModelState, x: &Array2<f64>) -> Result<AssignmentMap> {
    let z = project(&state.projector, x)?;
    let (_, a_t, _) = assign(state, &z)?;
    Ok(a_t)
}

/// `P^t <- alpha * P^t + (1 - alpha) * P^s`.
pub fn ema_update(teacher: &PrototypeSet, student: &PrototypeSet, alpha: f64) -> Result<PrototypeSet> {
    if teacher.0.dim() != student.0.dim() {
        return Err(Error::shape("teacher and student prototypes differ in shape"));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::config(format!("EMA momentum must lie in [0, 1], got {alpha}")));
    }
    let mut out = teacher.0.clone();
    out.zip_mut_with(&student.0, |t, &s| *t = alpha * *t + (1.0 - alpha) * s);
    Ok(PrototypeSet(out))
}
