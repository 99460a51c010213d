//! Experiment configuration: JSON in, fully resolved JSON echoed back out.

use std::fmt;

use frontlab_core::cell::{
    build_cell, make_flow, CylinderProfile, DiffusionSpec, FlowSpec, NonlinearitySpec,
    PeriodicCell, ScalarField, ShearProfile, VectorField,
};
use frontlab_core::discrete::Scheme;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    Speed,
    Sweep,
    Limit,
    Varlimit,
    H1dim,
    Check,
}

impl Kind {
    pub fn name(self) -> &'static str {
        match self {
            Kind::Speed => "speed",
            Kind::Sweep => "sweep",
            Kind::Limit => "limit",
            Kind::Varlimit => "varlimit",
            Kind::H1dim => "h1dim",
            Kind::Check => "check",
        }
    }
}

impl fmt::Display for Kind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellConfig {
    pub periods: Vec<f64>,
    pub resolution: Vec<usize>,
}

impl Default for CellConfig {
    fn default() -> Self {
        Self {
            periods: vec![1.0, 1.0],
            resolution: vec![32, 32],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShearShape {
    Sine,
    TwoBump,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CylinderShape {
    Poiseuille,
    ZeroFlux,
    Plug,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FlowConfig {
    Zero {},
    Shear {
        axis: usize,
        cross_axis: usize,
        profile: ShearShape,
        amplitude: f64,
    },
    Cellular {
        amplitude: f64,
    },
    TwoCylinder {
        axis: usize,
        radius: f64,
        gap: f64,
        profile: CylinderShape,
    },
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig::Zero {}
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DiffusionConfig {
    Identity {},
    Isotropic { value: f64 },
    Diagonal { entries: Vec<f64> },
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        DiffusionConfig::Identity {}
    }
}

/// `ζ(x) = value + amplitude·sin(2π x_axis / L_axis)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ZetaConfig {
    pub value: f64,
    #[serde(default)]
    pub amplitude: f64,
    #[serde(default)]
    pub axis: usize,
}

impl Default for ZetaConfig {
    fn default() -> Self {
        Self {
            value: 1.0,
            amplitude: 0.0,
            axis: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemeConfig {
    Upwind,
    Central,
}

impl SchemeConfig {
    pub fn scheme(self) -> Scheme {
        match self {
            SchemeConfig::Upwind => Scheme::Upwind,
            SchemeConfig::Central => Scheme::Central,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Tolerances {
    pub eigen: f64,
    pub eigen_max_iter: usize,
    pub kernel: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            eigen: frontlab_core::eigen::DEFAULT_TOL,
            eigen_max_iter: frontlab_core::eigen::DEFAULT_MAX_ITER,
            kernel: frontlab_core::varlimit::DEFAULT_KERNEL_TOL,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarlimitMethod {
    /// Chosen from the flow: shear reduction for shears, the component
    /// restriction for two cylinders, the generic maximization otherwise.
    Auto,
    Maximize,
    Shear,
    Component,
    Axisymmetric,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AxisymmetricConfig {
    pub dim: usize,
    pub gap: f64,
    pub spacing: f64,
    #[serde(default = "default_radius")]
    pub radius: f64,
    #[serde(default = "default_half_width")]
    pub r_max: f64,
    #[serde(default = "default_half_width")]
    pub z_max: f64,
}

fn default_radius() -> f64 {
    0.2
}

fn default_half_width() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VarlimitConfig {
    pub method: VarlimitMethod,
    pub starts: usize,
    pub ascent_steps: usize,
    pub dense_limit: usize,
    /// Also run the generic maximization next to a special path.
    pub compare: bool,
    pub axisymmetric: Option<AxisymmetricConfig>,
    /// Dump the optimal `w` as CSV.
    pub write_field: bool,
}

impl Default for VarlimitConfig {
    fn default() -> Self {
        let o = frontlab_core::varlimit::RatioOptions::default();
        Self {
            method: VarlimitMethod::Auto,
            starts: o.starts,
            ascent_steps: o.ascent_steps,
            dense_limit: o.dense_limit,
            compare: false,
            axisymmetric: None,
            write_field: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct H1dimConfig {
    pub dims: Vec<usize>,
    pub ns: Vec<usize>,
    /// Cells per unit length; `None` uses the per-`n` default.
    pub resolution: Option<usize>,
    pub lambda: f64,
    pub mu: f64,
}

impl Default for H1dimConfig {
    fn default() -> Self {
        Self {
            dims: vec![2, 3, 4, 5],
            ns: vec![4, 8, 16, 32],
            resolution: None,
            lambda: 1.0,
            mu: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CheckConfig {
    /// Horizon of the trajectory-drift checks.
    pub horizon: f64,
    pub dt: f64,
    /// Time and step of the volume check.
    pub volume_time: f64,
    pub volume_dt: f64,
    pub volume_tol: f64,
    pub drift_tol: f64,
    pub zero_average_tol: f64,
}

impl Default for CheckConfig {
    fn default() -> Self {
        Self {
            horizon: 10.0,
            dt: 1e-2,
            volume_time: 1.0,
            volume_dt: 1e-3,
            volume_tol: 1e-6,
            drift_tol: 1e-8,
            zero_average_tol: 1e-10,
        }
    }
}

/// File names inside the output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Outputs {
    pub csv: Option<String>,
    pub json: Option<String>,
    pub field: Option<String>,
    pub fits: Option<String>,
    pub resolved: String,
}

impl Default for Outputs {
    fn default() -> Self {
        Self {
            csv: None,
            json: None,
            field: None,
            fits: None,
            resolved: "resolved_config.json".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    #[serde(default)]
    pub experiment: Option<Kind>,
    #[serde(default)]
    pub cell: CellConfig,
    #[serde(default)]
    pub flow: FlowConfig,
    #[serde(default)]
    pub diffusion: DiffusionConfig,
    #[serde(default)]
    pub zeta: ZetaConfig,
    #[serde(default)]
    pub direction: Option<Vec<f64>>,
    /// Amplitude `M` of a single speed computation.
    #[serde(default)]
    pub amplitude: f64,
    #[serde(default = "default_amplitudes")]
    pub amplitudes: Vec<f64>,
    #[serde(default = "default_scheme")]
    pub scheme: SchemeConfig,
    #[serde(default)]
    pub tolerances: Tolerances,
    #[serde(default)]
    pub varlimit: VarlimitConfig,
    #[serde(default)]
    pub h1dim: H1dimConfig,
    #[serde(default)]
    pub check: CheckConfig,
    #[serde(default)]
    pub outputs: Outputs,
    #[serde(default)]
    pub seed: u64,
}

fn default_amplitudes() -> Vec<f64> {
    vec![8.0, 16.0, 32.0, 64.0]
}

fn default_scheme() -> SchemeConfig {
    SchemeConfig::Upwind
}

/// Anything wrong with the configuration itself.
#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed config: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

fn bad<T>(msg: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError::Invalid(msg.into()))
}

/// Everything built from a validated config.
pub struct Prepared {
    pub config: Config,
    pub cell: PeriodicCell,
    pub flow: VectorField,
    pub diffusion: DiffusionSpec,
    pub zeta: ScalarField,
    pub direction: Vec<f64>,
}

impl Config {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    /// Checks the config against `kind`, fills every default and builds the
    /// fields. Nothing here runs a solver.
    pub fn prepare(mut self, kind: Kind, seed: Option<u64>) -> Result<Prepared, ConfigError> {
        match self.experiment {
            Some(k) if k != kind => return bad(format!("config is for `{k}`, not `{kind}`")),
            _ => self.experiment = Some(kind),
        }
        if let Some(s) = seed {
            self.seed = s;
        }
        self.validate_numbers(kind)?;
        self.fill_outputs(kind);

        let c = &self.cell;
        let dim = c.periods.len();
        let cell = build_cell(dim, &c.periods, &c.resolution)
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let flow =
            make_flow(&self.flow_spec(), &cell).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let diffusion = match &self.diffusion {
            DiffusionConfig::Identity {} => Ok(DiffusionSpec::identity(&cell)),
            DiffusionConfig::Isotropic { value } => DiffusionSpec::isotropic(&cell, *value),
            DiffusionConfig::Diagonal { entries } => DiffusionSpec::diagonal(&cell, entries),
        }
        .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let z = self.zeta.clone();
        if z.axis >= dim {
            return bad("zeta axis out of range");
        }
        let l = c.periods[z.axis];
        let zeta = ScalarField::from_fn(&cell, |x| {
            z.value + z.amplitude * (2.0 * std::f64::consts::PI * x[z.axis] / l).sin()
        });
        let zeta = NonlinearitySpec::new(zeta, None)
            .map_err(|e| ConfigError::Invalid(e.to_string()))?
            .zeta;

        let mut e = self.direction.clone().unwrap_or_else(|| {
            let mut e = vec![0.0; dim];
            e[0] = 1.0;
            e
        });
        if e.len() != dim {
            return bad(format!(
                "direction has {} entries, the cell has dimension {dim}",
                e.len()
            ));
        }
        let norm = e.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm > 0.0) || !norm.is_finite() {
            return bad("direction must be a nonzero finite vector");
        }
        e.iter_mut().for_each(|v| *v /= norm);
        self.direction = Some(e.clone());

        Ok(Prepared {
            config: self,
            cell,
            flow,
            diffusion,
            zeta,
            direction: e,
        })
    }

    fn validate_numbers(&self, kind: Kind) -> Result<(), ConfigError> {
        let t = &self.tolerances;
        if !(t.eigen > 0.0) || !(t.kernel > 0.0) || t.eigen_max_iter == 0 {
            return bad("tolerances must be positive");
        }
        if self.cell.periods.len() != self.cell.resolution.len() {
            return bad("cell periods and resolution differ in length");
        }
        if self
            .cell
            .periods
            .iter()
            .any(|p| !(*p > 0.0) || !p.is_finite())
        {
            return bad("cell periods must be positive");
        }
        if !(self.amplitude >= 0.0) || !self.amplitude.is_finite() {
            return bad("amplitude must be nonnegative");
        }
        if matches!(kind, Kind::Sweep | Kind::Limit) {
            let a = &self.amplitudes;
            if a.is_empty() || a.iter().any(|m| !(*m > 0.0) || !m.is_finite()) {
                return bad("amplitudes must be positive");
            }
            if a.windows(2).any(|w| !(w[1] > w[0])) {
                return bad("amplitudes must be strictly increasing");
            }
            if kind == Kind::Limit && a.len() < 3 {
                return bad("a limit estimate needs at least three amplitudes");
            }
        }
        let v = &self.varlimit;
        if v.starts == 0 || v.dense_limit == 0 {
            return bad("varlimit starts and dense_limit must be positive");
        }
        if kind == Kind::Varlimit && v.method == VarlimitMethod::Axisymmetric {
            match &v.axisymmetric {
                None => return bad("axisymmetric method needs an `axisymmetric` block"),
                Some(a) if !(a.spacing > 0.0) || !(a.gap >= 0.0) || !(a.radius > 0.0) => {
                    return bad("axisymmetric spacing and radius must be positive, gap nonnegative")
                }
                _ => {}
            }
        }
        let h = &self.h1dim;
        if h.dims.iter().any(|d| *d < 2) || h.ns.iter().any(|n| *n < 2) {
            return bad("h1dim needs dims >= 2 and n >= 2");
        }
        if kind == Kind::H1dim && (h.dims.is_empty() || h.ns.is_empty()) {
            return bad("h1dim needs at least one dimension and one n");
        }
        if h.resolution == Some(0) {
            return bad("h1dim resolution must be positive");
        }
        let c = &self.check;
        let positive = [
            c.horizon,
            c.dt,
            c.volume_time,
            c.volume_dt,
            c.volume_tol,
            c.drift_tol,
            c.zero_average_tol,
        ];
        if positive.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return bad("check times and tolerances must be positive");
        }
        let names = [
            &self.outputs.csv,
            &self.outputs.json,
            &self.outputs.field,
            &self.outputs.fits,
        ];
        for n in names
            .into_iter()
            .flatten()
            .chain(std::iter::once(&self.outputs.resolved))
        {
            if n.is_empty() || n.contains('/') || n.contains('\\') || n == "." || n == ".." {
                return bad(format!("output name `{n}` must be a plain file name"));
            }
        }
        Ok(())
    }

    fn fill_outputs(&mut self, kind: Kind) {
        let o = &mut self.outputs;
        let k = kind.name();
        o.csv.get_or_insert_with(|| format!("{k}.csv"));
        if matches!(kind, Kind::Limit | Kind::Varlimit | Kind::Check) {
            o.json.get_or_insert_with(|| format!("{k}.json"));
        }
        if kind == Kind::Varlimit && self.varlimit.write_field {
            o.field.get_or_insert_with(|| "w.csv".into());
        }
        if kind == Kind::H1dim {
            o.fits.get_or_insert_with(|| "fits.csv".into());
        }
    }

    pub fn flow_spec(&self) -> FlowSpec {
        match &self.flow {
            FlowConfig::Zero {} => FlowSpec::Zero,
            FlowConfig::Shear {
                axis,
                cross_axis,
                profile,
                amplitude,
            } => FlowSpec::Shear {
                axis: *axis,
                cross_axis: *cross_axis,
                profile: match profile {
                    ShearShape::Sine => ShearProfile::Sine,
                    ShearShape::TwoBump => ShearProfile::TwoBump,
                },
                amplitude: *amplitude,
            },
            FlowConfig::Cellular { amplitude } => FlowSpec::Cellular {
                amplitude: *amplitude,
            },
            FlowConfig::TwoCylinder {
                axis,
                radius,
                gap,
                profile,
            } => FlowSpec::TwoCylinder {
                axis: *axis,
                radius: *radius,
                gap: *gap,
                profile: cylinder_profile(*profile),
            },
        }
    }
}

pub fn cylinder_profile(p: CylinderShape) -> CylinderProfile {
    match p {
        CylinderShape::Poiseuille => CylinderProfile::Poiseuille,
        CylinderShape::ZeroFlux => CylinderProfile::ZeroFlux,
        CylinderShape::Plug => CylinderProfile::Plug,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_takes_every_default() {
        let c = Config::from_json("{}").unwrap();
        let p = c.prepare(Kind::Speed, None).unwrap();
        assert_eq!(p.cell.resolution(), &[32, 32]);
        assert_eq!(p.direction, vec![1.0, 0.0]);
        assert_eq!(p.config.experiment, Some(Kind::Speed));
        assert_eq!(p.config.outputs.csv.as_deref(), Some("speed.csv"));
        assert!(p.zeta.values().iter().all(|z| *z == 1.0));
    }

    #[test]
    fn unknown_fields_are_rejected() {
        assert!(Config::from_json(r#"{"cel": {}}"#).is_err());
        assert!(Config::from_json(r#"{"flow": {"kind": "zero", "amplitude": 1}}"#).is_err());
        assert!(Config::from_json(r#"{"tolerances": {"eigne": 1e-8}}"#).is_err());
        assert!(Config::from_json(r#"{"diffusion": {"kind": "identity", "value": 2}}"#).is_err());
    }

    #[test]
    fn bad_values_are_rejected() {
        let bad = [
            r#"{"cell": {"periods": [1, -1], "resolution": [8, 8]}}"#,
            r#"{"tolerances": {"eigen": 0}}"#,
            r#"{"direction": [0, 0]}"#,
            r#"{"direction": [1, 0, 0]}"#,
            r#"{"zeta": {"value": -1}}"#,
            r#"{"experiment": "sweep"}"#,
            r#"{"outputs": {"csv": "../x.csv"}}"#,
        ];
        for text in bad {
            let c = Config::from_json(text).unwrap();
            assert!(c.prepare(Kind::Speed, None).is_err(), "{text}");
        }
        let c = Config::from_json(r#"{"amplitudes": [4, 2]}"#).unwrap();
        assert!(c.prepare(Kind::Sweep, None).is_err());
    }

    #[test]
    fn direction_is_normalized_and_seed_overridden() {
        let c = Config::from_json(r#"{"direction": [3, 4], "seed": 5}"#).unwrap();
        let p = c.prepare(Kind::Speed, Some(9)).unwrap();
        assert!((p.direction[0] - 0.6).abs() < 1e-15 && (p.direction[1] - 0.8).abs() < 1e-15);
        assert_eq!(p.config.seed, 9);
    }
}
