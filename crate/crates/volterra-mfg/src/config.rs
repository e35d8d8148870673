//! Config-file parsing: a small closed set of parametric kernel forms plus
//! named model presets, no expression interpreter.

use crate::delay::{delay_control_to_volterra, delay_state_to_volterra, DelayControlModel,
    DelayStateModel};
use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::population::Deviation;
use crate::transforms::{Fn1, Fn2, GridSettings, ModelSpec};
use serde::Deserialize;
use std::sync::Arc;

/// A one-variable parametric function.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OneVarSpec {
    pub form: String,
    pub value: Option<f64>,
    /// Polynomial coefficients `a0 + a1 t + a2 t^2 + ...`.
    pub coeffs: Option<Vec<f64>>,
    pub rate: Option<f64>,
    pub scale: Option<f64>,
}

impl OneVarSpec {
    pub fn build(&self, what: &str) -> Result<Fn1> {
        match self.form.as_str() {
            "constant" => {
                let v = self.value.ok_or_else(|| {
                    Error::Config(format!("{what}: constant form requires `value`"))
                })?;
                Ok(Arc::new(move |_| v))
            }
            "polynomial" => {
                let coeffs = self.coeffs.clone().ok_or_else(|| {
                    Error::Config(format!("{what}: polynomial form requires `coeffs`"))
                })?;
                Ok(Arc::new(move |t| {
                    coeffs.iter().rev().fold(0.0, |acc, c| acc * t + c)
                }))
            }
            "exp" => {
                let rate = self.rate.ok_or_else(|| {
                    Error::Config(format!("{what}: exp form requires `rate`"))
                })?;
                let scale = self.scale.unwrap_or(1.0);
                Ok(Arc::new(move |t| scale * (rate * t).exp()))
            }
            other => Err(Error::Config(format!(
                "{what}: unknown one-variable form `{other}` (expected constant, polynomial, exp)"
            ))),
        }
    }
}

/// A two-variable parametric kernel.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelSpec {
    pub form: String,
    pub value: Option<f64>,
    /// `coeffs[i][j]` multiplies `t^i s^j`.
    pub coeffs: Option<Vec<Vec<f64>>>,
    pub rate: Option<f64>,
    pub scale: Option<f64>,
    /// One-variable factor for the product form `g(t) g(s)`.
    pub g: Option<OneVarSpec>,
}

impl KernelSpec {
    pub fn build(&self, what: &str) -> Result<Fn2> {
        match self.form.as_str() {
            "constant" => {
                let v = self.value.ok_or_else(|| {
                    Error::Config(format!("{what}: constant form requires `value`"))
                })?;
                Ok(Arc::new(move |_, _| v))
            }
            "polynomial" => {
                let coeffs = self.coeffs.clone().ok_or_else(|| {
                    Error::Config(format!("{what}: polynomial form requires `coeffs`"))
                })?;
                Ok(Arc::new(move |t, s| {
                    let mut acc = 0.0;
                    let mut tp = 1.0;
                    for row in &coeffs {
                        let mut sp = 1.0;
                        for c in row {
                            acc += c * tp * sp;
                            sp *= s;
                        }
                        tp *= t;
                    }
                    acc
                }))
            }
            "exp-diff" => {
                let rate = self.rate.ok_or_else(|| {
                    Error::Config(format!("{what}: exp-diff form requires `rate`"))
                })?;
                let scale = self.scale.unwrap_or(1.0);
                Ok(Arc::new(move |t, s| scale * (rate * (t - s)).exp()))
            }
            "product" => {
                let g = self
                    .g
                    .as_ref()
                    .ok_or_else(|| Error::Config(format!("{what}: product form requires `g`")))?
                    .build(&format!("{what}.g"))?;
                Ok(Arc::new(move |t, s| g(t) * g(s)))
            }
            other => Err(Error::Config(format!(
                "{what}: unknown kernel form `{other}` \
                 (expected constant, polynomial, exp-diff, product)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub preset: String,
    pub r: f64,
    pub gamma: f64,
    pub eta: f64,
    // sde preset
    pub x0: Option<f64>,
    pub b: Option<OneVarSpec>,
    pub c: Option<OneVarSpec>,
    pub sigma: Option<OneVarSpec>,
    // volterra preset
    pub phi: Option<OneVarSpec>,
    pub b_kernel: Option<KernelSpec>,
    pub f_kernel: Option<KernelSpec>,
    pub c_kernel: Option<KernelSpec>,
    pub sigma_kernel: Option<KernelSpec>,
    // delay presets
    pub a_coef: Option<OneVarSpec>,
    pub band_kernel: Option<KernelSpec>,
    pub control_coef: Option<OneVarSpec>,
    pub noise_coef: Option<OneVarSpec>,
    pub lag: Option<f64>,
    pub initial: Option<OneVarSpec>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub horizon: f64,
    pub n_steps: usize,
    pub tol: Option<f64>,
    pub k_max: Option<usize>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    pub ns: Option<Vec<usize>>,
    pub paths: Option<usize>,
    pub seed: Option<u64>,
    pub deviations: Option<Vec<String>>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: Option<String>,
    pub formats: Option<Vec<String>>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub model: ModelSection,
    pub grid: GridSection,
    pub experiment: Option<ExperimentSection>,
    pub output: Option<OutputSection>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn settings(&self) -> GridSettings {
        GridSettings {
            n_steps: self.grid.n_steps,
            k_max: self.grid.k_max.unwrap_or(40),
            tol: self.grid.tol.unwrap_or(1e-10),
        }
    }

    fn require<'a, T>(opt: &'a Option<T>, name: &str, preset: &str) -> Result<&'a T> {
        opt.as_ref().ok_or_else(|| {
            Error::Config(format!("model.{name} is required for preset `{preset}`"))
        })
    }

    fn reject_foreign(&self, allowed: &[&str]) -> Result<()> {
        let m = &self.model;
        let present: Vec<(&str, bool)> = vec![
            ("x0", m.x0.is_some()),
            ("b", m.b.is_some()),
            ("c", m.c.is_some()),
            ("sigma", m.sigma.is_some()),
            ("phi", m.phi.is_some()),
            ("b_kernel", m.b_kernel.is_some()),
            ("f_kernel", m.f_kernel.is_some()),
            ("c_kernel", m.c_kernel.is_some()),
            ("sigma_kernel", m.sigma_kernel.is_some()),
            ("a_coef", m.a_coef.is_some()),
            ("band_kernel", m.band_kernel.is_some()),
            ("control_coef", m.control_coef.is_some()),
            ("noise_coef", m.noise_coef.is_some()),
            ("lag", m.lag.is_some()),
            ("initial", m.initial.is_some()),
        ];
        for (name, is_set) in present {
            if is_set && !allowed.contains(&name) {
                return Err(Error::Config(format!(
                    "model.{name} is not a field of preset `{}`",
                    m.preset
                )));
            }
        }
        Ok(())
    }

    /// Build the Volterra model described by the config (delay presets are
    /// converted on the configured grid).
    pub fn build_model(&self) -> Result<ModelSpec> {
        let settings = self.settings();
        let m = &self.model;
        match m.preset.as_str() {
            "sde" => {
                self.reject_foreign(&["x0", "b", "c", "sigma"])?;
                let x0 = *Self::require(&m.x0, "x0", "sde")?;
                let b = Self::require(&m.b, "b", "sde")?.build("model.b")?;
                let c = Self::require(&m.c, "c", "sde")?.build("model.c")?;
                let sigma = Self::require(&m.sigma, "sigma", "sde")?.build("model.sigma")?;
                // Constant-in-t kernels: k(t, s) = k(s).
                let b2: Fn2 = Arc::new(move |_, s| b(s));
                let c2: Fn2 = Arc::new(move |_, s| c(s));
                let s2: Fn2 = Arc::new(move |_, s| sigma(s));
                ModelSpec::new(
                    self.grid.horizon,
                    Arc::new(move |_| x0),
                    b2,
                    Arc::new(|_, _| 0.0),
                    c2,
                    s2,
                    m.r,
                    m.gamma,
                    m.eta,
                    settings,
                )
            }
            "volterra" => {
                self.reject_foreign(&[
                    "phi",
                    "b_kernel",
                    "f_kernel",
                    "c_kernel",
                    "sigma_kernel",
                ])?;
                let phi = Self::require(&m.phi, "phi", "volterra")?.build("model.phi")?;
                let b = Self::require(&m.b_kernel, "b_kernel", "volterra")?
                    .build("model.b_kernel")?;
                let f = Self::require(&m.f_kernel, "f_kernel", "volterra")?
                    .build("model.f_kernel")?;
                let c = Self::require(&m.c_kernel, "c_kernel", "volterra")?
                    .build("model.c_kernel")?;
                let sigma = Self::require(&m.sigma_kernel, "sigma_kernel", "volterra")?
                    .build("model.sigma_kernel")?;
                ModelSpec::new(
                    self.grid.horizon,
                    phi,
                    b,
                    f,
                    c,
                    sigma,
                    m.r,
                    m.gamma,
                    m.eta,
                    settings,
                )
            }
            "state-delay" => {
                self.reject_foreign(&[
                    "a_coef",
                    "band_kernel",
                    "control_coef",
                    "noise_coef",
                    "lag",
                    "initial",
                ])?;
                let model = self.build_state_delay()?;
                let grid = TimeGrid::uniform(self.grid.horizon, self.grid.n_steps)?;
                delay_state_to_volterra(&model, &grid, m.r, m.gamma, m.eta, settings)
            }
            "control-delay" => {
                self.reject_foreign(&["a_coef", "control_coef", "noise_coef", "lag", "initial"])?;
                let model = self.build_control_delay()?;
                let grid = TimeGrid::uniform(self.grid.horizon, self.grid.n_steps)?;
                delay_control_to_volterra(&model, &grid, m.r, m.gamma, m.eta, settings)
            }
            other => Err(Error::Config(format!(
                "unknown preset `{other}` (expected sde, volterra, state-delay, control-delay)"
            ))),
        }
    }

    pub fn build_state_delay(&self) -> Result<DelayStateModel> {
        let m = &self.model;
        DelayStateModel::new(
            Self::require(&m.a_coef, "a_coef", "state-delay")?.build("model.a_coef")?,
            Self::require(&m.band_kernel, "band_kernel", "state-delay")?
                .build("model.band_kernel")?,
            Self::require(&m.control_coef, "control_coef", "state-delay")?
                .build("model.control_coef")?,
            Self::require(&m.noise_coef, "noise_coef", "state-delay")?
                .build("model.noise_coef")?,
            *Self::require(&m.lag, "lag", "state-delay")?,
            Self::require(&m.initial, "initial", "state-delay")?.build("model.initial")?,
        )
    }

    pub fn build_control_delay(&self) -> Result<DelayControlModel> {
        let m = &self.model;
        DelayControlModel::new(
            Self::require(&m.a_coef, "a_coef", "control-delay")?.build("model.a_coef")?,
            Self::require(&m.control_coef, "control_coef", "control-delay")?
                .build("model.control_coef")?,
            Self::require(&m.noise_coef, "noise_coef", "control-delay")?
                .build("model.noise_coef")?,
            *Self::require(&m.lag, "lag", "control-delay")?,
            Self::require(&m.initial, "initial", "control-delay")?.build("model.initial")?,
        )
    }

    pub fn deviations(&self) -> Result<Vec<Deviation>> {
        let specs = self
            .experiment
            .as_ref()
            .and_then(|e| e.deviations.clone())
            .unwrap_or_else(|| {
                vec![
                    "zero".into(),
                    "scale:2".into(),
                    "shift:8".into(),
                    "best-response".into(),
                ]
            });
        specs.iter().map(|s| parse_deviation(s)).collect()
    }
}

pub fn parse_deviation(spec: &str) -> Result<Deviation> {
    if spec == "zero" {
        return Ok(Deviation::Zero);
    }
    if spec == "equilibrium" {
        return Ok(Deviation::Equilibrium);
    }
    if spec == "best-response" {
        return Ok(Deviation::BestResponse);
    }
    if let Some(rest) = spec.strip_prefix("scale:") {
        let factor: f64 = rest
            .parse()
            .map_err(|_| Error::Config(format!("bad scale deviation `{spec}`")))?;
        return Ok(Deviation::Scaled(factor));
    }
    if let Some(rest) = spec.strip_prefix("shift:") {
        let steps: usize = rest
            .parse()
            .map_err(|_| Error::Config(format!("bad shift deviation `{spec}`")))?;
        return Ok(Deviation::TimeShifted(steps));
    }
    Err(Error::Config(format!(
        "unknown deviation `{spec}` (expected zero, equilibrium, scale:<f>, shift:<n>, best-response)"
    )))
}

#[cfg(test)]
mod tests {
    use super::*;

    const SDE: &str = r#"
[model]
preset = "sde"
r = 10.0
gamma = 0.5
eta = 0.2
x0 = 1.0
b = { form = "constant", value = 0.0 }
c = { form = "constant", value = 1.0 }
sigma = { form = "constant", value = 1.0 }

[grid]
horizon = 1.0
n_steps = 64

[experiment]
ns = [4, 16]
paths = 100
seed = 7
"#;

    #[test]
    fn parses_the_sde_preset() {
        let cfg = ConfigFile::parse(SDE).unwrap();
        let model = cfg.build_model().unwrap();
        assert_eq!(model.settings.n_steps, 64);
        assert_eq!((model.c)(0.3, 0.1), 1.0);
        assert_eq!((model.f)(0.3, 0.1), 0.0);
    }

    #[test]
    fn rejects_unknown_keys() {
        let bad = SDE.replace("seed = 7", "seed = 7\nbogus = 1");
        assert!(matches!(ConfigFile::parse(&bad), Err(Error::Config(_))));
    }

    #[test]
    fn rejects_fields_foreign_to_the_preset() {
        let bad = SDE.replace(
            "x0 = 1.0",
            "x0 = 1.0\nlag = 0.25",
        );
        let cfg = ConfigFile::parse(&bad).unwrap();
        assert!(matches!(cfg.build_model(), Err(Error::Config(_))));
    }

    #[test]
    fn reports_line_and_column_on_parse_errors() {
        let err = ConfigFile::parse("[model\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line"), "no position info in: {msg}");
    }

    #[test]
    fn polynomial_kernel_evaluates() {
        let spec = KernelSpec {
            form: "polynomial".into(),
            value: None,
            coeffs: Some(vec![vec![1.0, 2.0], vec![3.0, 0.0]]),
            rate: None,
            scale: None,
            g: None,
        };
        let k = spec.build("test").unwrap();
        // 1 + 2 s + 3 t at (t, s) = (2, 5).
        assert_eq!(k(2.0, 5.0), 1.0 + 10.0 + 6.0);
    }

    #[test]
    fn deviation_specs_parse() {
        assert_eq!(parse_deviation("zero").unwrap(), Deviation::Zero);
        assert_eq!(
            parse_deviation("scale:2").unwrap(),
            Deviation::Scaled(2.0)
        );
        assert_eq!(
            parse_deviation("shift:8").unwrap(),
            Deviation::TimeShifted(8)
        );
        assert!(parse_deviation("warp").is_err());
    }
}
