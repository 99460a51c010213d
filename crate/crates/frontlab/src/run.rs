//! Experiment drivers. Each returns the files to write; nothing touches the
//! disk until the whole computation has succeeded.

use std::f64::consts::PI;

use frontlab_core::cell::{
    advective_residual, check_zero_average, max_divergence, slice_identity, write_fields_csv,
    Label, ScalarField,
};
use frontlab_core::flowmap::{
    first_integral_conservation, stream_function_2d, volume_preservation_check,
    volume_preservation_check_box, Analytic, Velocity,
};
use frontlab_core::h1dim::{self, Growth, TransitionEnergyResult};
use frontlab_core::speed::{amplitude_sweep, estimate_linear_limit, SpeedPoint, SpeedProblem};
use frontlab_core::varlimit::{self, AxisymmetricCylinders, RatioOptions};
use frontlab_core::Error;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{cylinder_profile, FlowConfig, Kind, Prepared, VarlimitMethod};

/// An output file: name inside the output directory and its bytes.
pub type Artifact = (String, Vec<u8>);

#[derive(Debug)]
pub struct Outcome {
    pub artifacts: Vec<Artifact>,
    /// One line for the terminal.
    pub summary: String,
    /// Set when the run finished but something it checked did not hold.
    pub failure: Option<String>,
}

pub fn run(kind: Kind, p: &Prepared) -> Result<Outcome, Error> {
    match kind {
        Kind::Speed => speed(p),
        Kind::Sweep => sweep(p, false),
        Kind::Limit => sweep(p, true),
        Kind::Varlimit => limit(p),
        Kind::H1dim => transition(p),
        Kind::Check => check(p),
    }
}

fn csv_bytes(header: &[&str], rows: &[Vec<String>]) -> Vec<u8> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for r in rows {
        w.write_record(r).expect("in-memory write");
    }
    w.into_inner().expect("in-memory flush")
}

fn json_bytes(v: &impl Serialize) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(v).expect("serializable");
    out.push(b'\n');
    out
}

/// Shortest round-trip form; switches to an exponent for very small or large values.
fn num(x: f64) -> String {
    format!("{x:?}")
}

fn opt(x: Option<f64>) -> String {
    x.map(num).unwrap_or_default()
}

fn resolution(r: &[usize]) -> String {
    r.iter()
        .map(|n| n.to_string())
        .collect::<Vec<_>>()
        .join("x")
}

fn csv_name(p: &Prepared) -> String {
    p.config.outputs.csv.clone().expect("filled by prepare")
}

fn json_name(p: &Prepared) -> String {
    p.config.outputs.json.clone().expect("filled by prepare")
}

fn problem(p: &Prepared) -> SpeedProblem<'_> {
    let mut sp = SpeedProblem::new(&p.diffusion, &p.flow, &p.zeta, &p.direction)
        .with_scheme(p.config.scheme.scheme());
    sp.tol = p.config.tolerances.eigen;
    sp.max_iter = p.config.tolerances.eigen_max_iter;
    sp
}

const SPEED_HEADER: [&str; 9] = [
    "m",
    "lambda_star",
    "k",
    "c_star",
    "c_over_m",
    "at_edge",
    "scheme",
    "resolution",
    "eigen_tol",
];

fn speed_row(s: &SpeedPoint, tol: f64) -> Vec<String> {
    vec![
        num(s.m),
        num(s.lambda_star),
        num(s.k),
        num(s.c_star),
        if s.m > 0.0 {
            num(s.c_over_m())
        } else {
            String::new()
        },
        s.at_edge.to_string(),
        s.scheme.name().into(),
        resolution(&s.resolution),
        num(tol),
    ]
}

fn speed(p: &Prepared) -> Result<Outcome, Error> {
    let s = problem(p).minimal_speed(p.config.amplitude)?;
    let tol = p.config.tolerances.eigen;
    Ok(Outcome {
        summary: format!(
            "M = {}: c* = {}, lambda* = {}",
            s.m, s.c_star, s.lambda_star
        ),
        artifacts: vec![(csv_name(p), csv_bytes(&SPEED_HEADER, &[speed_row(&s, tol)]))],
        failure: None,
    })
}

#[derive(Serialize)]
struct LimitRecord {
    estimate: f64,
    last_ratio: f64,
    extrapolated: f64,
    differences: Vec<f64>,
    monotone: bool,
    scheme: &'static str,
    resolution: Vec<usize>,
    eigen_tol: f64,
}

fn sweep(p: &Prepared, with_limit: bool) -> Result<Outcome, Error> {
    let tol = p.config.tolerances.eigen;
    let curve =
        amplitude_sweep(&problem(p), &p.config.amplitudes).map_err(|partial| partial.error)?;
    let rows: Vec<Vec<String>> = curve.points.iter().map(|s| speed_row(s, tol)).collect();
    let mut artifacts = vec![(csv_name(p), csv_bytes(&SPEED_HEADER, &rows))];
    let last = curve.points.last().expect("nonempty sweep");
    let mut summary = format!(
        "{} amplitudes, last c*/M = {}",
        curve.len(),
        last.c_over_m()
    );
    if with_limit {
        let est = estimate_linear_limit(&curve)?;
        summary = format!(
            "c*/M -> {} (monotone differences: {})",
            est.estimate, est.monotone
        );
        let rec = LimitRecord {
            estimate: est.estimate,
            last_ratio: est.last_ratio,
            extrapolated: est.extrapolated,
            differences: est.differences,
            monotone: est.monotone,
            scheme: p.config.scheme.scheme().name(),
            resolution: p.cell.resolution().to_vec(),
            eigen_tol: tol,
        };
        artifacts.push((json_name(p), json_bytes(&rec)));
    }
    Ok(Outcome {
        artifacts,
        summary,
        failure: None,
    })
}

#[derive(Serialize)]
struct VarlimitRecord {
    method: &'static str,
    ratio: f64,
    slack: f64,
    residual: Option<f64>,
    feasible: bool,
    upper_bound: Option<f64>,
    unconstrained: Option<f64>,
    lambda_hat: Option<f64>,
    mu_hat: Option<f64>,
    #[serde(rename = "flux_V1")]
    flux_v1: Option<f64>,
    transition_energy: Option<f64>,
    resolution: Vec<usize>,
    kernel_tol: f64,
    starts: usize,
    seed: u64,
}

impl VarlimitRecord {
    fn row(&self) -> Vec<String> {
        vec![
            self.method.into(),
            num(self.ratio),
            num(self.slack),
            opt(self.residual),
            self.feasible.to_string(),
            opt(self.upper_bound),
            opt(self.unconstrained),
            opt(self.lambda_hat),
            opt(self.mu_hat),
            opt(self.flux_v1),
            opt(self.transition_energy),
            resolution(&self.resolution),
            num(self.kernel_tol),
            self.starts.to_string(),
            self.seed.to_string(),
        ]
    }
}

const VARLIMIT_HEADER: [&str; 15] = [
    "method",
    "ratio",
    "slack",
    "residual",
    "feasible",
    "upper_bound",
    "unconstrained",
    "lambda_hat",
    "mu_hat",
    "flux_V1",
    "transition_energy",
    "resolution",
    "kernel_tol",
    "starts",
    "seed",
];

fn limit(p: &Prepared) -> Result<Outcome, Error> {
    let c = &p.config;
    let v = &c.varlimit;
    let opts = RatioOptions {
        starts: v.starts,
        seed: c.seed,
        ascent_steps: v.ascent_steps,
        dense_limit: v.dense_limit,
    };
    let method = match v.method {
        VarlimitMethod::Auto => match c.flow {
            FlowConfig::Shear { .. } => VarlimitMethod::Shear,
            FlowConfig::TwoCylinder { .. } => VarlimitMethod::Component,
            _ => VarlimitMethod::Maximize,
        },
        m => m,
    };
    let base = |method: &'static str, res: Vec<usize>| VarlimitRecord {
        method,
        ratio: 0.0,
        slack: 0.0,
        residual: None,
        feasible: false,
        upper_bound: None,
        unconstrained: None,
        lambda_hat: None,
        mu_hat: None,
        flux_v1: None,
        transition_energy: None,
        resolution: res,
        kernel_tol: c.tolerances.kernel,
        starts: v.starts,
        seed: c.seed,
    };
    let from_result = |method: &'static str, r: &varlimit::FirstIntegralResult| VarlimitRecord {
        ratio: r.ratio,
        slack: r.slack,
        residual: Some(r.residual),
        feasible: r.feasible,
        upper_bound: r.upper_bound,
        unconstrained: r.unconstrained,
        ..base(method, p.cell.resolution().to_vec())
    };
    let maximize = || -> Result<varlimit::FirstIntegralResult, Error> {
        let proj = varlimit::kernel_projector(&p.flow, c.tolerances.kernel)?;
        varlimit::maximize_ratio(&p.flow, &p.zeta, &p.diffusion, &p.direction, &proj, &opts)
    };

    let mut records = Vec::new();
    let mut field: Option<ScalarField> = None;
    match method {
        VarlimitMethod::Maximize | VarlimitMethod::Auto => {
            let r = maximize()?;
            records.push(from_result("maximize", &r));
            field = Some(r.w);
        }
        VarlimitMethod::Shear => {
            let r = varlimit::shear_reduction(&p.flow, &p.zeta, &p.diffusion, &p.direction, &opts)?;
            records.push(from_result("shear", &r));
            field = Some(r.w);
        }
        VarlimitMethod::Component => {
            let r =
                varlimit::component_constant_limit(&p.flow, &p.zeta, &p.diffusion, &p.direction)?;
            let residual =
                r.w.as_ref()
                    .map(|w| varlimit::first_integral_residual(&p.flow, w.values()));
            records.push(component_record(
                base("component", r.resolution.clone()),
                &r,
                residual,
            ));
            field = r.w;
        }
        VarlimitMethod::Axisymmetric => {
            let a = v.axisymmetric.as_ref().expect("validated");
            let profile = match c.flow {
                FlowConfig::TwoCylinder { profile, .. } => cylinder_profile(profile),
                _ => frontlab_core::cell::CylinderProfile::Poiseuille,
            };
            let spec = AxisymmetricCylinders {
                dim: a.dim,
                radius: a.radius,
                gap: a.gap,
                spacing: a.spacing,
                profile,
                zeta: c.zeta.value,
                r_max: a.r_max,
                z_max: a.z_max,
            };
            let r = varlimit::component_constant_limit_axisymmetric(&spec)?;
            records.push(component_record(
                base("axisymmetric", r.resolution.clone()),
                &r,
                None,
            ));
        }
    }
    if v.compare && method != VarlimitMethod::Maximize && method != VarlimitMethod::Axisymmetric {
        records.push(from_result("maximize", &maximize()?));
    }

    let rows: Vec<Vec<String>> = records.iter().map(VarlimitRecord::row).collect();
    let summary = records
        .iter()
        .map(|r| format!("{}: ratio {}", r.method, r.ratio))
        .collect::<Vec<_>>()
        .join(", ");
    let mut artifacts = vec![
        (csv_name(p), csv_bytes(&VARLIMIT_HEADER, &rows)),
        (json_name(p), json_bytes(&records)),
    ];
    if let (Some(name), Some(w)) = (c.outputs.field.clone(), field) {
        let mut buf = Vec::new();
        write_fields_csv(&mut buf, w.cell(), &[("w", w.values())]).expect("in-memory write");
        artifacts.push((name, buf));
    }
    Ok(Outcome {
        artifacts,
        summary,
        failure: None,
    })
}

fn component_record(
    base: VarlimitRecord,
    r: &varlimit::ComponentLimit,
    residual: Option<f64>,
) -> VarlimitRecord {
    VarlimitRecord {
        ratio: r.ratio,
        slack: r.slack,
        residual,
        feasible: r.feasible,
        lambda_hat: Some(r.lambda_hat),
        mu_hat: Some(r.mu_hat),
        flux_v1: Some(r.flux_v1),
        transition_energy: Some(r.transition_energy),
        ..base
    }
}

fn transition(p: &Prepared) -> Result<Outcome, Error> {
    let h = &p.config.h1dim;
    let jobs: Vec<(usize, usize)> = h
        .dims
        .iter()
        .flat_map(|&d| h.ns.iter().map(move |&n| (d, n)))
        .collect();
    let results: Vec<TransitionEnergyResult> = jobs
        .par_iter()
        .map(|&(d, n)| {
            let res = h.resolution.unwrap_or_else(|| h1dim::default_resolution(n));
            h1dim::min_transition_energy_with(d, n, res, h.lambda, h.mu)
        })
        .collect::<Result<_, _>>()?;

    let mut rows = Vec::new();
    let mut fit_rows = Vec::new();
    let mut summary = Vec::new();
    for chunk in results.chunks(h.ns.len()) {
        let mut chunk = chunk.to_vec();
        let fit = if chunk.len() >= 4 {
            Some(h1dim::classify(&mut chunk)?)
        } else {
            None
        };
        for r in &chunk {
            rows.push(vec![
                r.dim.to_string(),
                r.n.to_string(),
                num(r.lower_bound),
                num(r.energy),
                num(r.lambda),
                num(r.mu),
                r.resolution.to_string(),
                r.iterations.to_string(),
                r.classification
                    .map(|g| g.name().to_string())
                    .unwrap_or_default(),
                num(h1dim::SOLVER_TOL),
            ]);
        }
        if let Some(fit) = fit {
            let dim = chunk[0].dim;
            summary.push(format!("N={dim}: {}", fit.best.name()));
            for g in [Growth::Sqrt, Growth::Log, Growth::Bounded] {
                let m = fit.fit(g);
                fit_rows.push(vec![
                    dim.to_string(),
                    g.name().into(),
                    num(m.intercept),
                    num(m.slope),
                    num(m.residual),
                    (g == fit.best).to_string(),
                    fit.ambiguous.to_string(),
                ]);
            }
        }
    }
    let header = [
        "dim",
        "n",
        "lower_bound",
        "energy",
        "lambda",
        "mu",
        "resolution",
        "iterations",
        "classification",
        "solver_tol",
    ];
    let fit_header = [
        "dim",
        "model",
        "intercept",
        "slope",
        "residual",
        "best",
        "ambiguous",
    ];
    let fits = p.config.outputs.fits.clone().expect("filled by prepare");
    Ok(Outcome {
        artifacts: vec![
            (csv_name(p), csv_bytes(&header, &rows)),
            (fits, csv_bytes(&fit_header, &fit_rows)),
        ],
        summary: if summary.is_empty() {
            format!(
                "{} energies (fewer than four n per dimension, no classification)",
                results.len()
            )
        } else {
            summary.join(", ")
        },
        failure: None,
    })
}

#[derive(Serialize)]
struct Property {
    property: String,
    value: f64,
    tolerance: f64,
    pass: bool,
}

impl Property {
    fn new(property: impl Into<String>, value: f64, tolerance: f64) -> Self {
        Self {
            property: property.into(),
            value,
            tolerance,
            pass: value <= tolerance,
        }
    }
}

#[derive(Serialize)]
struct CheckRecord<'a> {
    all_pass: bool,
    resolution: Vec<usize>,
    properties: &'a [Property],
}

// A first integral to test the slice identity and trajectory drift with:
// any function of the cross variables of an axis-aligned flow.
fn test_integral(p: &Prepared) -> Option<ScalarField> {
    let cell = &p.cell;
    let cross = match p.config.flow {
        FlowConfig::Shear { cross_axis, .. } => cross_axis,
        FlowConfig::TwoCylinder { axis, .. } => {
            let d = cell.dim();
            if axis == d - 1 {
                d - 2
            } else {
                d - 1
            }
        }
        FlowConfig::Zero {} => 0,
        FlowConfig::Cellular { .. } => return None,
    };
    let l = cell.periods()[cross];
    Some(ScalarField::from_fn(cell, |x| {
        (2.0 * PI * x[cross] / l).cos()
    }))
}

fn check(p: &Prepared) -> Result<Outcome, Error> {
    let c = &p.config.check;
    let q = &p.flow;
    let cell = &p.cell;
    let h = cell.spacing().iter().cloned().fold(0.0, f64::max);
    let qmax = q.max_norm();
    let mut props = Vec::new();

    let avg = check_zero_average(q)
        .iter()
        .fold(0.0f64, |m, a| m.max(a.abs()));
    props.push(Property::new("zero_average", avg, c.zero_average_tol));
    let div = max_divergence(q);
    let mut d = Property::new("divergence", div, q.divergence_tolerance());
    d.pass &= q.is_divergence_free();
    props.push(d);

    if let Some(labels) = q.labels() {
        let outside = (0..cell.len())
            .filter(|&i| labels[i] == Label::Exterior)
            .map(|i| q.at(i).iter().fold(0.0f64, |m, v| m.max(v.abs())))
            .fold(0.0, f64::max);
        props.push(Property::new("vanishes_outside_components", outside, 0.0));
    }

    let w = test_integral(p).unwrap_or_else(|| ScalarField::constant(cell, 1.0));
    let wmax = w.max_abs();
    for axis in 0..cell.dim() {
        let name = format!("slice_identity_axis{}", axis + 1);
        let tol = h * qmax * wmax * wmax * cell.volume() + 1e-14;
        match slice_identity(q, &w, axis) {
            Ok(s) => props.push(Property::new(name, (s.lhs - s.rhs).abs(), tol)),
            Err(Error::NotFirstIntegral { residual, .. }) => {
                let mut prop = Property::new(name, residual, tol);
                prop.pass = false;
                props.push(prop);
            }
            Err(e) => return Err(e),
        }
    }

    // cellular flows are checked against the formula they were sampled from
    let cellular = match p.config.flow {
        FlowConfig::Cellular { amplitude } => {
            let (l1, l2) = (cell.periods()[0], cell.periods()[1]);
            Some(Analytic::new(
                2,
                Some(cell.periods().to_vec()),
                move |x: &[f64], o: &mut [f64]| {
                    let (k1, k2) = (2.0 * PI / l1, 2.0 * PI / l2);
                    o[0] = -amplitude * k2 * (k1 * x[0]).sin() * (k2 * x[1]).cos();
                    o[1] = amplitude * k1 * (k1 * x[0]).cos() * (k2 * x[1]).sin();
                },
            ))
        }
        _ => None,
    };
    let velocity: &dyn Velocity = match &cellular {
        Some(a) => a,
        None => q,
    };

    let per = cell.periods();
    let vol = if cell.dim() == 2 {
        let sq = [
            [0.1 * per[0], 0.1 * per[1]],
            [0.3 * per[0], 0.1 * per[1]],
            [0.3 * per[0], 0.3 * per[1]],
            [0.1 * per[0], 0.3 * per[1]],
        ];
        Some(volume_preservation_check(
            velocity,
            &sq,
            c.volume_time,
            c.volume_dt,
            2000,
        )?)
    } else if cell.dim() == 3 {
        let lo = [0.1 * per[0], 0.1 * per[1], 0.1 * per[2]];
        let hi = [0.3 * per[0], 0.3 * per[1], 0.3 * per[2]];
        Some(volume_preservation_check_box(
            velocity,
            lo,
            hi,
            c.volume_time,
            c.volume_dt,
            32,
        )?)
    } else {
        None
    };
    if let Some(v) = vol {
        let mut prop = Property::new("volume_preservation", v.deviation, c.volume_tol);
        prop.pass &= !v.flagged;
        props.push(prop);
    }

    let seeds: Vec<Vec<f64>> = [0.13, 0.41, 0.77]
        .iter()
        .map(|s| {
            per.iter()
                .enumerate()
                .map(|(a, l)| l * (s + 0.11 * a as f64) % l)
                .collect()
        })
        .collect();
    if let Some(w) = test_integral(p) {
        let drift = first_integral_conservation(velocity, &w, &seeds, c.horizon, c.dt)?;
        props.push(Property::new(
            "first_integral_drift",
            drift.max,
            c.drift_tol,
        ));
    }

    if cell.dim() == 2 {
        match stream_function_2d(q) {
            Ok(phi) => {
                // central differences of a smooth φ are accurate to (kh)²
                let k = 2.0 * PI / per.iter().cloned().fold(f64::INFINITY, f64::min);
                let adv = advective_residual(q, &phi.gradient());
                props.push(Property::new(
                    "stream_function_residual",
                    adv,
                    (k * h).powi(2) * qmax * qmax + 1e-14,
                ));
                let drift = first_integral_conservation(velocity, &phi, &seeds, c.horizon, c.dt)?;
                // multilinear interpolation of φ limits closed orbits to O(h²)
                let tol = if cellular.is_some() {
                    (k * h).powi(2) * phi.max_abs()
                } else {
                    c.drift_tol
                };
                props.push(Property::new("stream_function_drift", drift.max, tol));
            }
            Err(Error::Circulation { circulation }) => {
                let mut prop = Property::new("stream_function_circulation", circulation.abs(), 0.0);
                prop.pass = false;
                props.push(prop);
            }
            Err(e) => return Err(e),
        }
    }

    let failed: Vec<&str> = props
        .iter()
        .filter(|p| !p.pass)
        .map(|p| p.property.as_str())
        .collect();
    let all_pass = failed.is_empty();
    let rows: Vec<Vec<String>> = props
        .iter()
        .map(|p| {
            vec![
                p.property.clone(),
                num(p.value),
                num(p.tolerance),
                p.pass.to_string(),
            ]
        })
        .collect();
    let rec = CheckRecord {
        all_pass,
        resolution: cell.resolution().to_vec(),
        properties: &props,
    };
    Ok(Outcome {
        artifacts: vec![
            (
                csv_name(p),
                csv_bytes(&["property", "value", "tolerance", "pass"], &rows),
            ),
            (json_name(p), json_bytes(&rec)),
        ],
        summary: format!(
            "{} of {} properties pass",
            props.len() - failed.len(),
            props.len()
        ),
        failure: (!all_pass).then(|| format!("properties failed: {}", failed.join(", "))),
    })
}

/// Machine-readable record of a failed computation.
#[derive(Serialize)]
pub struct ErrorRecord {
    pub error: &'static str,
    pub message: String,
}

impl ErrorRecord {
    pub fn from_error(e: &Error) -> Self {
        let error = match e {
            Error::Invalid(_) => "invalid",
            Error::CellMismatch => "cell_mismatch",
            Error::Geometry(_) => "geometry",
            Error::NoConvergence { .. } => "no_convergence",
            Error::LostPositivity { .. } => "lost_positivity",
            Error::NotFirstIntegral { .. } => "not_first_integral",
            Error::UnderResolved { .. } => "under_resolved",
            Error::Circulation { .. } => "circulation",
        };
        Self {
            error,
            message: e.to_string(),
        }
    }

    pub fn bytes(&self) -> Vec<u8> {
        json_bytes(self)
    }
}
