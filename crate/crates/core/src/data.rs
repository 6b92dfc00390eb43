//! LTI systems, trajectories and the offline data batch `(U_-, X_-, X_+)`.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{dmatrix, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg::{
    self, controllability_matrix, min_singular_value, numerical_rank, nullspace_projector, right_pseudoinverse,
    Projector, SymMatrix, RANK_TOL,
};

const MAX_SYSTEM_ATTEMPTS: usize = 100;
const MAX_BATCH_ATTEMPTS: usize = 100;
const FILE_MAGIC: &str = "deepo-data v1";

/// Ground-truth `x(t+1) = A x(t) + B u(t)` with LQR penalties `Q`, `R`.
///
/// Only used to generate data and to compute model-based reference values;
/// the optimizer itself never sees `A` or `B`.
#[derive(Clone, Debug, PartialEq)]
pub struct SystemModel {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    q: SymMatrix,
    r: SymMatrix,
}

impl SystemModel {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, q: SymMatrix, r: SymMatrix) -> Result<Self> {
        let n = a.nrows();
        if !a.is_square() || n == 0 {
            return Err(Error::InvalidSystem(format!("A must be square and nonempty, got {}x{}", a.nrows(), a.ncols())));
        }
        if b.nrows() != n || b.ncols() == 0 {
            return Err(Error::InvalidSystem(format!("B must be {n}xm with m >= 1, got {}x{}", b.nrows(), b.ncols())));
        }
        if q.dim() != n || r.dim() != b.ncols() {
            return Err(Error::InvalidSystem("penalty dimensions do not match (A, B)".into()));
        }
        if q.min_eigenvalue() <= 0.0 {
            return Err(Error::InvalidSystem("Q must be positive definite".into()));
        }
        if r.min_eigenvalue() <= 0.0 {
            return Err(Error::InvalidSystem("R must be positive definite".into()));
        }
        if numerical_rank(&controllability_matrix(&a, &b)) < n {
            return Err(Error::InvalidSystem("(A, B) is not controllable".into()));
        }
        Ok(Self { a, b, q, r })
    }

    /// `Q = I_n`, `R = I_m`.
    pub fn with_identity_weights(a: DMatrix<f64>, b: DMatrix<f64>) -> Result<Self> {
        let (n, m) = (a.nrows(), b.ncols());
        Self::new(a, b, SymMatrix::identity(n), SymMatrix::identity(m))
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn q(&self) -> &SymMatrix {
        &self.q
    }

    pub fn r(&self) -> &SymMatrix {
        &self.r
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn m(&self) -> usize {
        self.b.ncols()
    }

    pub fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.a * x + &self.b * u
    }
}

/// States `x(0..=T)` and inputs `u(0..T)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub states: Vec<DVector<f64>>,
    pub inputs: Vec<DVector<f64>>,
}

impl Trajectory {
    /// Number of transitions `T`.
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

/// The offline batch consumed by DeePO, with its derived quantities cached.
///
/// Construction certifies that `D_- = [U_-; X_-]` has full row rank.
#[derive(Clone, Debug, PartialEq)]
pub struct DataMatrices {
    u_minus: DMatrix<f64>,
    x_minus: DMatrix<f64>,
    x_plus: DMatrix<f64>,
    d_minus: DMatrix<f64>,
    d_pinv: DMatrix<f64>,
    pi_x: Projector,
    pi_d: Projector,
    sigma_min_d: f64,
    seed: Option<u64>,
}

impl DataMatrices {
    pub fn new(u_minus: DMatrix<f64>, x_minus: DMatrix<f64>, x_plus: DMatrix<f64>) -> Result<Self> {
        let t = x_minus.ncols();
        let (n, m) = (x_minus.nrows(), u_minus.nrows());
        if u_minus.ncols() != t || x_plus.ncols() != t || x_plus.nrows() != n {
            return Err(Error::DimensionMismatch(format!(
                "U_- {}x{}, X_- {}x{}, X_+ {}x{}",
                u_minus.nrows(),
                u_minus.ncols(),
                n,
                t,
                x_plus.nrows(),
                x_plus.ncols()
            )));
        }
        if n == 0 || m == 0 {
            return Err(Error::DimensionMismatch("need at least one state and one input".into()));
        }
        if t < n + m {
            return Err(Error::InsufficientData { t, required: n + m });
        }
        let mut d_minus = DMatrix::zeros(m + n, t);
        d_minus.view_mut((0, 0), (m, t)).copy_from(&u_minus);
        d_minus.view_mut((m, 0), (n, t)).copy_from(&x_minus);

        let sigma_min_d = min_singular_value(&d_minus);
        let d_pinv = right_pseudoinverse(&d_minus)?;
        let pi_d = nullspace_projector(&d_minus, "D_-")?;
        let pi_x = nullspace_projector(&x_minus, "X_-")?;
        Ok(Self {
            u_minus,
            x_minus,
            x_plus,
            d_minus,
            d_pinv,
            pi_x,
            pi_d,
            sigma_min_d,
            seed: None,
        })
    }

    /// Records the RNG seed the batch was generated with.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn u_minus(&self) -> &DMatrix<f64> {
        &self.u_minus
    }

    pub fn x_minus(&self) -> &DMatrix<f64> {
        &self.x_minus
    }

    pub fn x_plus(&self) -> &DMatrix<f64> {
        &self.x_plus
    }

    pub fn d_minus(&self) -> &DMatrix<f64> {
        &self.d_minus
    }

    /// Right inverse of `D_-`.
    pub fn d_pinv(&self) -> &DMatrix<f64> {
        &self.d_pinv
    }

    /// Projector onto the nullspace of `X_-`.
    pub fn pi_x(&self) -> &Projector {
        &self.pi_x
    }

    /// Projector onto the nullspace of `D_-`.
    pub fn pi_d(&self) -> &Projector {
        &self.pi_d
    }

    pub fn sigma_min_d(&self) -> f64 {
        self.sigma_min_d
    }

    pub fn n(&self) -> usize {
        self.x_minus.nrows()
    }

    pub fn m(&self) -> usize {
        self.u_minus.nrows()
    }

    /// Number of data columns `T`.
    pub fn len(&self) -> usize {
        self.x_minus.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `D_-^+ [K; I_n]`.
    pub fn lift_gain(&self, k: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let (n, m) = (self.n(), self.m());
        if k.shape() != (m, n) {
            return Err(Error::DimensionMismatch(format!("gain must be {m}x{n}, got {}x{}", k.nrows(), k.ncols())));
        }
        let mut stacked = DMatrix::zeros(m + n, n);
        stacked.view_mut((0, 0), (m, n)).copy_from(k);
        stacked.view_mut((m, 0), (n, n)).fill_with_identity();
        Ok(&self.d_pinv * stacked)
    }

    /// `||X_+ - A X_- - B U_-||_F` against a known model.
    pub fn dynamics_residual(&self, system: &SystemModel) -> f64 {
        (&self.x_plus - system.a() * &self.x_minus - system.b() * &self.u_minus).norm()
    }
}

/// Rolls `x(t+1) = A x(t) + B u(t)` forward from `x0`.
pub fn simulate(system: &SystemModel, inputs: &[DVector<f64>], x0: &DVector<f64>) -> Result<Trajectory> {
    if inputs.is_empty() {
        return Err(Error::InsufficientData { t: 0, required: 1 });
    }
    if x0.len() != system.n() {
        return Err(Error::DimensionMismatch(format!("x0 has length {}, expected {}", x0.len(), system.n())));
    }
    if let Some(u) = inputs.iter().find(|u| u.len() != system.m()) {
        return Err(Error::DimensionMismatch(format!("input has length {}, expected {}", u.len(), system.m())));
    }
    let mut states = Vec::with_capacity(inputs.len() + 1);
    states.push(x0.clone());
    for u in inputs {
        let next = system.step(states.last().expect("nonempty"), u);
        states.push(next);
    }
    Ok(Trajectory {
        states,
        inputs: inputs.to_vec(),
    })
}

fn columns_to_matrix(rows: usize, cols: &[&DVector<f64>]) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(rows, cols.len());
    for (j, c) in cols.iter().enumerate() {
        m.set_column(j, c);
    }
    m
}

/// Builds `(U_-, X_-, X_+)` from one trajectory.
pub fn assemble(trajectory: &Trajectory) -> Result<DataMatrices> {
    assemble_from_experiments(std::slice::from_ref(trajectory))
}

/// Concatenates the `(u(t), x(t), x(t+1))` columns of several experiments.
pub fn assemble_from_experiments(trajectories: &[Trajectory]) -> Result<DataMatrices> {
    let first = trajectories
        .iter()
        .find(|t| !t.is_empty())
        .ok_or(Error::InsufficientData { t: 0, required: 1 })?;
    let n = first.states[0].len();
    let m = first.inputs[0].len();
    let mut us = Vec::new();
    let mut xs = Vec::new();
    let mut xps = Vec::new();
    for traj in trajectories {
        if traj.states.len() != traj.inputs.len() + 1 {
            return Err(Error::DimensionMismatch(format!(
                "trajectory has {} states for {} inputs",
                traj.states.len(),
                traj.inputs.len()
            )));
        }
        if traj.states.iter().any(|x| x.len() != n) || traj.inputs.iter().any(|u| u.len() != m) {
            return Err(Error::DimensionMismatch("trajectories disagree on state or input dimension".into()));
        }
        for t in 0..traj.len() {
            us.push(&traj.inputs[t]);
            xs.push(&traj.states[t]);
            xps.push(&traj.states[t + 1]);
        }
    }
    if us.len() < n + m {
        return Err(Error::InsufficientData {
            t: us.len(),
            required: n + m,
        });
    }
    DataMatrices::new(columns_to_matrix(m, &us), columns_to_matrix(n, &xs), columns_to_matrix(n, &xps))
}

fn gaussian_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

fn gaussian_vector<R: Rng>(rng: &mut R, len: usize) -> DVector<f64> {
    DVector::from_fn(len, |_, _| rng.sample(StandardNormal))
}

/// Random controllable `(A, B)` with Gaussian entries, `A` rescaled to the
/// requested spectral radius, and identity penalties.
pub fn random_system(n: usize, m: usize, target_rho: f64, seed: u64) -> Result<SystemModel> {
    if n == 0 || m == 0 || !(target_rho > 0.0 && target_rho.is_finite()) {
        return Err(Error::InvalidSystem(format!("need n, m >= 1 and target_rho > 0 (n={n}, m={m}, rho={target_rho})")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..MAX_SYSTEM_ATTEMPTS {
        let a_raw = gaussian_matrix(&mut rng, n, n);
        let b = gaussian_matrix(&mut rng, n, m);
        let rho = match linalg::spectral_radius(&a_raw) {
            Ok(rho) if rho > 1e-12 => rho,
            _ => continue,
        };
        let a = a_raw * (target_rho / rho);
        if let Ok(sys) = SystemModel::with_identity_weights(a, b) {
            return Ok(sys);
        }
    }
    Err(Error::GenerationFailure {
        attempts: MAX_SYSTEM_ATTEMPTS,
    })
}

/// The four-state, two-input benchmark with entries rounded to three
/// decimals, `Q = I_4`, `R = I_2`. The rounded `A` is open-loop stable with
/// spectral radius about 0.463.
pub fn paper_example_system() -> SystemModel {
    let a = dmatrix![
        -0.137, 0.146, -0.297, 0.283;
        0.487, 0.095, 0.417, 0.301;
        -0.018, 0.049, 0.175, 0.435;
        0.143, 0.317, -0.293, -0.107
    ];
    let b = dmatrix![
        1.639, 0.930;
        0.264, 1.793;
        -1.464, -1.183;
        -0.776, -0.111
    ];
    SystemModel::with_identity_weights(a, b).expect("benchmark system is controllable")
}

/// One trajectory of length `t` driven by i.i.d. standard normal inputs from a
/// standard normal `x(0)`. Redraws (same RNG stream) until the batch passes the
/// rank certificate.
pub fn gaussian_batch(system: &SystemModel, t: usize, seed: u64) -> Result<DataMatrices> {
    let required = system.n() + system.m();
    if t < required {
        return Err(Error::InsufficientData { t, required });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut last_err = None;
    for _ in 0..MAX_BATCH_ATTEMPTS {
        let x0 = gaussian_vector(&mut rng, system.n());
        let inputs: Vec<DVector<f64>> = (0..t).map(|_| gaussian_vector(&mut rng, system.m())).collect();
        let traj = simulate(system, &inputs, &x0)?;
        match assemble(&traj) {
            Ok(data) => return Ok(data.with_seed(seed)),
            Err(e @ Error::RankDeficient { .. }) => last_err = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last_err.unwrap_or(Error::RankDeficient { sigma_min: 0.0 }))
}

fn write_matrix(out: &mut String, name: &str, m: &DMatrix<f64>) {
    let _ = writeln!(out, "{name}");
    for i in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|j| format!("{:.16e}", m[(i, j)])).collect();
        let _ = writeln!(out, "{}", row.join(" "));
    }
}

/// Serializes a batch to the plain-text data format.
///
/// ```text
/// deepo-data v1
/// n 4
/// m 2
/// T 10
/// seed 1            (or "seed none")
/// U_minus           (m rows, row-major, 17 significant digits)
/// X_minus           (n rows)
/// X_plus            (n rows)
/// end
/// ```
pub fn to_text(data: &DataMatrices) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{FILE_MAGIC}");
    let _ = writeln!(out, "n {}", data.n());
    let _ = writeln!(out, "m {}", data.m());
    let _ = writeln!(out, "T {}", data.len());
    match data.seed {
        Some(s) => {
            let _ = writeln!(out, "seed {s}");
        }
        None => out.push_str("seed none\n"),
    }
    write_matrix(&mut out, "U_minus", &data.u_minus);
    write_matrix(&mut out, "X_minus", &data.x_minus);
    write_matrix(&mut out, "X_plus", &data.x_plus);
    out.push_str("end\n");
    out
}

struct LineReader<'a> {
    lines: std::iter::Peekable<std::iter::Enumerate<std::str::Lines<'a>>>,
    last_line: usize,
}

impl<'a> LineReader<'a> {
    fn new(text: &'a str) -> Self {
        Self {
            lines: text.lines().enumerate().peekable(),
            last_line: 0,
        }
    }

    fn next(&mut self) -> Result<&'a str> {
        for (i, line) in self.lines.by_ref() {
            self.last_line = i + 1;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            return Ok(line);
        }
        Err(self.error("unexpected end of file"))
    }

    fn error(&self, message: impl Into<String>) -> Error {
        Error::Parse {
            line: self.last_line,
            message: message.into(),
        }
    }

    fn keyed(&mut self, key: &str) -> Result<&'a str> {
        let line = self.next()?;
        match line.split_once(char::is_whitespace) {
            Some((k, v)) if k == key => Ok(v.trim()),
            _ => Err(self.error(format!("expected `{key} <value>`, found `{line}`"))),
        }
    }

    fn usize_field(&mut self, key: &str) -> Result<usize> {
        let v = self.keyed(key)?;
        v.parse().map_err(|_| self.error(format!("invalid {key}: `{v}`")))
    }

    fn matrix(&mut self, name: &str, rows: usize, cols: usize) -> Result<DMatrix<f64>> {
        let header = self.next()?;
        if header != name {
            return Err(self.error(format!("expected `{name}`, found `{header}`")));
        }
        let mut m = DMatrix::zeros(rows, cols);
        for i in 0..rows {
            let line = self.next()?;
            let values: Vec<&str> = line.split_whitespace().collect();
            if values.len() != cols {
                return Err(self.error(format!("{name} row {i} has {} entries, expected {cols}", values.len())));
            }
            for (j, v) in values.iter().enumerate() {
                m[(i, j)] = v.parse().map_err(|_| self.error(format!("invalid number `{v}`")))?;
            }
        }
        Ok(m)
    }
}

/// Parses the plain-text data format and re-certifies the rank condition.
pub fn from_text(text: &str) -> Result<DataMatrices> {
    let mut rd = LineReader::new(text);
    let magic = rd.next()?;
    if magic != FILE_MAGIC {
        return Err(rd.error(format!("expected `{FILE_MAGIC}` header, found `{magic}`")));
    }
    let n = rd.usize_field("n")?;
    let m = rd.usize_field("m")?;
    let t = rd.usize_field("T")?;
    let seed_str = rd.keyed("seed")?;
    let seed = match seed_str {
        "none" => None,
        s => Some(s.parse::<u64>().map_err(|_| rd.error(format!("invalid seed `{s}`")))?),
    };
    let u = rd.matrix("U_minus", m, t)?;
    let x = rd.matrix("X_minus", n, t)?;
    let xp = rd.matrix("X_plus", n, t)?;
    let end = rd.next()?;
    if end != "end" {
        return Err(rd.error(format!("expected `end`, found `{end}`")));
    }
    let data = DataMatrices::new(u, x, xp)?;
    Ok(match seed {
        Some(s) => data.with_seed(s),
        None => data,
    })
}

pub fn save(data: &DataMatrices, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, to_text(data))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<DataMatrices> {
    let text = std::fs::read_to_string(path)?;
    from_text(&text)
}

/// Relative rank tolerance applied to `D_-`, exposed for reporting.
pub fn rank_tolerance(data: &DataMatrices) -> f64 {
    RANK_TOL * linalg::operator_norm(data.d_minus()).max(1.0)
}
