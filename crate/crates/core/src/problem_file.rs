//! JSON problem descriptions and the built-in problem catalogue.

use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{FbsdeError, Result};
use crate::model::{
    worked_example, AffineField, CoefficientSet, ExplicitField, ControlRegion, Generator, PolynomialField, Problem,
    QuadraticGenerator, QuadraticTerminal, Terminal, TimeGrid, VectorField,
};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridSpec {
    pub t0: f64,
    #[serde(rename = "T")]
    pub t_end: f64,
    pub n_steps: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegionSpec {
    pub u_lower: Vec<f64>,
    pub u_upper: Vec<f64>,
    #[serde(default = "default_resolution")]
    pub resolution: usize,
}

fn default_resolution() -> usize {
    41
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SingularSpec {
    pub m: usize,
    #[serde(rename = "G")]
    pub g: Vec<Vec<f64>>,
    #[serde(rename = "K")]
    pub k: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum FieldSpec {
    /// `A x + B u + c`.
    Affine {
        #[serde(rename = "A")]
        a: Vec<Vec<f64>>,
        #[serde(rename = "B")]
        b: Vec<Vec<f64>>,
        c: Vec<f64>,
    },
    /// Scalar `sum c x^i u^j`, terms given as `[i, j, c]`.
    Polynomial { terms: Vec<(u32, u32, f64)> },
    /// Scalar polynomial with user-supplied derivative polynomials; omitted
    /// derivatives are zero.
    Explicit {
        terms: Vec<(u32, u32, f64)>,
        #[serde(default)]
        d_x: Vec<(u32, u32, f64)>,
        #[serde(default)]
        d_u: Vec<(u32, u32, f64)>,
        #[serde(default)]
        d_xx: Vec<(u32, u32, f64)>,
        #[serde(default)]
        d_xu: Vec<(u32, u32, f64)>,
        #[serde(default)]
        d_uu: Vec<(u32, u32, f64)>,
    },
    /// The benchmark coefficient `u`.
    WorkedExample,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum GeneratorSpec {
    /// `c + g.w + w' M w / 2` with `w = (x, y, z, u)`.
    Quadratic {
        #[serde(default)]
        c: f64,
        g: Vec<f64>,
        #[serde(rename = "M")]
        m: Vec<Vec<f64>>,
    },
    /// The benchmark generator `u^2`.
    WorkedExample,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum TerminalSpec {
    Quadratic {
        #[serde(default)]
        c: f64,
        g: Vec<f64>,
        #[serde(rename = "M")]
        m: Vec<Vec<f64>>,
    },
    /// The benchmark terminal cost `x^2 / 2`.
    WorkedExample,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProblemSpec {
    #[serde(default = "default_name")]
    pub name: String,
    pub n: usize,
    pub k: usize,
    pub x0: Vec<f64>,
    pub grid: GridSpec,
    pub control_region: RegionSpec,
    pub singular: SingularSpec,
    pub drift: FieldSpec,
    pub diffusion: FieldSpec,
    pub generator: GeneratorSpec,
    pub terminal: TerminalSpec,
}

fn default_name() -> String {
    "custom".into()
}

fn matrix(rows: &[Vec<f64>], r: usize, c: usize, what: &str) -> Result<DMatrix<f64>> {
    if rows.len() != r || rows.iter().any(|row| row.len() != c) {
        return Err(FbsdeError::ProblemFile(format!("{what} must be a {r} x {c} array")));
    }
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

fn field(spec: &FieldSpec, n: usize, k: usize, what: &str) -> Result<Arc<dyn VectorField>> {
    Ok(match spec {
        FieldSpec::Affine { a, b, c } => {
            if c.len() != n {
                return Err(FbsdeError::ProblemFile(format!("{what}.c must have length {n}")));
            }
            Arc::new(AffineField::new(
                matrix(a, n, n, &format!("{what}.A"))?,
                matrix(b, n, k, &format!("{what}.B"))?,
                DVector::from_column_slice(c),
            )?)
        }
        FieldSpec::Polynomial { terms } => {
            if n != 1 || k != 1 {
                return Err(FbsdeError::ProblemFile(format!("{what}: polynomial family needs n = k = 1")));
            }
            Arc::new(PolynomialField::new(terms.clone()))
        }
        FieldSpec::Explicit { terms, d_x, d_u, d_xx, d_xu, d_uu } => {
            if n != 1 || k != 1 {
                return Err(FbsdeError::ProblemFile(format!("{what}: explicit family needs n = k = 1")));
            }
            let p = |t: &Vec<(u32, u32, f64)>| PolynomialField::new(t.clone());
            Arc::new(ExplicitField {
                value: p(terms),
                d_x: p(d_x),
                d_u: p(d_u),
                d_xx: p(d_xx),
                d_xu: p(d_xu),
                d_uu: p(d_uu),
            })
        }
        FieldSpec::WorkedExample => {
            if n != 1 || k != 1 {
                return Err(FbsdeError::ProblemFile(format!("{what}: worked_example family needs n = k = 1")));
            }
            Arc::new(AffineField::scalar(0.0, 1.0, 0.0))
        }
    })
}

impl ProblemSpec {
    pub fn build(&self) -> Result<Problem> {
        let (n, k) = (self.n, self.k);
        let d = n + 2 + k;
        let generator: Arc<dyn Generator> = match &self.generator {
            GeneratorSpec::Quadratic { c, g, m } => {
                if g.len() != d {
                    return Err(FbsdeError::ProblemFile(format!("generator.g must have length {d}")));
                }
                Arc::new(QuadraticGenerator::new(*c, DVector::from_column_slice(g), matrix(m, d, d, "generator.M")?)?)
            }
            GeneratorSpec::WorkedExample => {
                let mut m = DMatrix::zeros(d, d);
                for i in n + 2..d {
                    m[(i, i)] = 2.0;
                }
                Arc::new(QuadraticGenerator::new(0.0, DVector::zeros(d), m)?)
            }
        };
        let terminal: Arc<dyn Terminal> = match &self.terminal {
            TerminalSpec::Quadratic { c, g, m } => {
                if g.len() != n {
                    return Err(FbsdeError::ProblemFile(format!("terminal.g must have length {n}")));
                }
                Arc::new(QuadraticTerminal::new(*c, DVector::from_column_slice(g), matrix(m, n, n, "terminal.M")?)?)
            }
            TerminalSpec::WorkedExample => Arc::new(QuadraticTerminal::new(0.0, DVector::zeros(n), DMatrix::identity(n, n))?),
        };
        if self.singular.k.len() != self.singular.m {
            return Err(FbsdeError::ProblemFile("singular.K must have length m".into()));
        }
        let coefficients = CoefficientSet::new(
            n,
            k,
            field(&self.drift, n, k, "drift")?,
            field(&self.diffusion, n, k, "diffusion")?,
            generator,
            terminal,
            matrix(&self.singular.g, n, self.singular.m, "singular.G")?,
            DVector::from_column_slice(&self.singular.k),
        )?;
        Problem::new(
            self.name.clone(),
            coefficients,
            ControlRegion::new(
                self.control_region.u_lower.clone(),
                self.control_region.u_upper.clone(),
                self.control_region.resolution,
            )?,
            TimeGrid::new(self.grid.t0, self.grid.t_end, self.grid.n_steps)?,
            self.x0.clone(),
        )
    }
}

/// Parses a problem description from JSON text.
pub fn parse_problem(json: &str) -> Result<Problem> {
    let spec: ProblemSpec = serde_json::from_str(json).map_err(|e| FbsdeError::ProblemFile(e.to_string()))?;
    spec.build()
}

/// Names accepted by [`builtin_problem`].
pub const BUILTIN_PROBLEMS: &[&str] =
    &["worked_example", "linear_singular", "running_cost", "ratio_check", "cubic", "singular_push"];

fn scalar_problem(
    name: &str,
    drift: Arc<dyn VectorField>,
    diffusion: Arc<dyn VectorField>,
    generator: QuadraticGenerator,
    terminal: QuadraticTerminal,
    g: f64,
    cost: f64,
    x0: f64,
    n_steps: usize,
) -> Problem {
    let coefficients = CoefficientSet::new(
        1,
        1,
        drift,
        diffusion,
        Arc::new(generator),
        Arc::new(terminal),
        DMatrix::from_element(1, 1, g),
        DVector::from_element(1, cost),
    )
    .expect("built-in coefficients are consistent");
    Problem::new(
        name,
        coefficients,
        ControlRegion::new(vec![-1.0], vec![1.0], 41).expect("region"),
        TimeGrid::new(0.0, 1.0, n_steps).expect("grid"),
        vec![x0],
    )
    .expect("built-in problem is consistent")
}

fn quad_gen(entries: &[(usize, f64)], hess: &[(usize, usize, f64)]) -> QuadraticGenerator {
    let mut g = DVector::zeros(4);
    for &(i, v) in entries {
        g[i] = v;
    }
    let mut m = DMatrix::zeros(4, 4);
    for &(i, j, v) in hess {
        m[(i, j)] = v;
        m[(j, i)] = v;
    }
    QuadraticGenerator::new(0.0, g, m).expect("shape")
}

/// Built-in problems (all scalar, `U = [-1, 1]`, `T = 1`):
///
/// * `worked_example`: `dx = u dt + u dW`, `f = u^2`, `Phi = x^2/2`, singular part inactive.
/// * `linear_singular`: `b = sigma = f = 0`, `Phi = x`, `G = K = 1`.
/// * `running_cost`: `b = sigma = 0`, `f = 1`, `Phi = 0`.
/// * `ratio_check`: `b = 0`, `sigma = 1`, `f = z`, `Phi = x`, `G = K = 1`.
/// * `cubic`: cubic drift and diffusion for expansion-order studies.
/// * `singular_push`: `dx = u dt + 0.3 dW + dxi`, `f = u^2/2`, `Phi = (x - 1)^2`, `K = 0.5`.
pub fn builtin_problem(name: &str) -> Option<Problem> {
    let zero = || Arc::new(AffineField::scalar(0.0, 0.0, 0.0)) as Arc<dyn VectorField>;
    Some(match name {
        "worked_example" => worked_example(),
        "linear_singular" => scalar_problem(
            name,
            zero(),
            zero(),
            QuadraticGenerator::zero(1, 1),
            QuadraticTerminal::linear(vec![1.0]),
            1.0,
            1.0,
            0.0,
            200,
        ),
        "running_cost" => {
            let mut f = QuadraticGenerator::zero(1, 1);
            f.c = 1.0;
            scalar_problem(name, zero(), zero(), f, QuadraticTerminal::linear(vec![0.0]), 0.0, 1.0, 0.0, 200)
        }
        "ratio_check" => scalar_problem(
            name,
            zero(),
            Arc::new(AffineField::scalar(0.0, 0.0, 1.0)),
            quad_gen(&[(2, 1.0)], &[]),
            QuadraticTerminal::linear(vec![1.0]),
            1.0,
            1.0,
            0.0,
            200,
        ),
        "cubic" => scalar_problem(
            name,
            Arc::new(PolynomialField::new(vec![(1, 0, -0.5), (0, 1, 1.0), (2, 1, 0.3), (3, 0, -0.2)])),
            Arc::new(PolynomialField::new(vec![(0, 0, 0.2), (1, 1, 0.3), (2, 0, 0.1), (1, 2, 0.1)])),
            quad_gen(&[], &[(0, 0, 1.0), (3, 3, 1.0), (0, 3, 0.2)]),
            QuadraticTerminal::new(0.0, DVector::zeros(1), DMatrix::identity(1, 1)).expect("shape"),
            1.0,
            1.0,
            0.5,
            100,
        ),
        "singular_push" => scalar_problem(
            name,
            Arc::new(AffineField::scalar(0.0, 1.0, 0.0)),
            Arc::new(AffineField::scalar(0.0, 0.0, 0.3)),
            quad_gen(&[], &[(3, 3, 1.0)]),
            QuadraticTerminal::new(1.0, DVector::from_element(1, -2.0), DMatrix::from_element(1, 1, 2.0)).expect("shape"),
            1.0,
            0.5,
            0.0,
            200,
        ),
        _ => return None,
    })
}

/// Resolves a built-in name or reads a JSON file.
pub fn load_problem(name_or_path: &str) -> Result<Problem> {
    if let Some(p) = builtin_problem(name_or_path) {
        return Ok(p);
    }
    let path = Path::new(name_or_path);
    if !path.exists() {
        return Err(FbsdeError::ProblemFile(format!(
            "'{name_or_path}' is neither a built-in problem ({}) nor an existing file",
            BUILTIN_PROBLEMS.join(", ")
        )));
    }
    parse_problem(&std::fs::read_to_string(path)?)
}
