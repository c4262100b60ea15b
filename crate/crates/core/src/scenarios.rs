//! Benchmark scenarios (reactor, mass-on-car, torsional oscillator), their
//! resolved run settings and a single entry point that executes a run.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::feedback::{
    run_funnel_controller, run_zoh, sampled_constants, zoh_constants, DataPolicy, PhiBounds, SampledConstants, ZohConfig,
    ZohInputs,
};
use crate::funnel::{
    design_custom, Activation, AuxiliaryDesign, ExpFunnel, FunnelFn, FunnelSpec, GainSpec, PenaltyForm, StageCost, Surjection,
};
use crate::learning::{LearnOptions, LinearLearner, LinearModelParams, ParamBounds};
use crate::model::{dynamics_bounds, BoundsSource, ControlAffineModel, DynBounds};
use crate::mpc::{run_funnel_mpc, run_robust_fmpc, run_sampled_fmpc, InitStrategy, MpcConfig, RunResult, RunStatus};
use crate::ocp::{u_max_bound, SolverOptions};
use crate::plants::{
    build_mass_on_car, build_reactor, build_reactor_linear_model, build_torsional, MassOnCarParams, ReactorParams,
    TorsionalParams,
};
use crate::reference::{Reference, ScalarReference, Signal};

macro_rules! named_enum {
    ($(#[$meta:meta])* $name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
        #[serde(rename_all = "snake_case")]
        pub enum $name { $($variant),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(&self) -> &'static str {
                match self { $($name::$variant => $text),+ }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok($name::$variant),)+
                    _ => Err(Error::Config(format!("unknown {} {s:?}", stringify!($name)))),
                }
            }
        }
    };
}

named_enum!(
    /// Benchmark plant and study.
    ScenarioId {
        Reactor => "reactor",
        MassOnCar => "mass_on_car",
        MassOnCarCh5 => "mass_on_car_ch5",
        Torsional => "torsional",
    }
);

named_enum!(ControllerId {
    Fmpc => "fmpc",
    QuadraticMpc => "quadratic_mpc",
    Robust => "robust",
    Learning => "learning",
    Fc => "fc",
    Zoh => "zoh",
    SampledFmpc => "sampled_fmpc",
    SafetyFilter => "safety_filter",
});

named_enum!(CostId {
    FunnelNorm => "funnel_norm",
    FunnelSquared => "funnel_squared",
    NonStrict => "nonstrict",
    Quadratic => "quadratic",
});

named_enum!(InitId {
    CarryOver => "carry_over",
    Proper => "proper",
    ExactOutput => "exact_output",
});

named_enum!(DataPolicyId {
    Zero => "zero",
    HoldLast => "hold_last",
});

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub scenario: ScenarioId,
    pub controller: ControllerId,
    pub t_end: f64,
    pub h_model: f64,
    pub h_system: f64,
    /// cos(20t) acting on the highest output derivative of the plant.
    pub disturbance: bool,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MpcSection {
    pub delta: f64,
    pub horizon: f64,
    pub control_step: f64,
    pub u_max: f64,
    pub lambda_u: f64,
    pub u_offset: Option<f64>,
    pub cost: CostId,
    /// With `false` the funnel term is dropped from the stage cost.
    pub funnel_constraint: bool,
    pub max_iter: usize,
    pub init: InitId,
    pub init_eps: Option<f64>,
    pub init_lambda: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FcSection {
    pub enabled: bool,
    /// Activation threshold; `None` keeps the controller always active.
    pub s_crit: Option<f64>,
    pub scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LearningSection {
    pub every: Option<usize>,
    /// Data window in time units; `None` uses the full log.
    pub window: Option<f64>,
    pub dt: f64,
    pub max_iter: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ZohSection {
    pub iota: f64,
    pub nu: Option<f64>,
    pub sample_step: Option<f64>,
    pub data_policy: DataPolicyId,
    pub u_max_data: f64,
}

/// Fully resolved parameter set of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Settings {
    pub run: RunSection,
    pub mpc: MpcSection,
    pub fc: FcSection,
    pub learning: LearningSection,
    pub zoh: ZohSection,
}

fn unsupported(s: ScenarioId, c: ControllerId) -> Error {
    Error::Config(format!("controller {c} is not available for scenario {s}"))
}

impl Settings {
    /// Study defaults for a scenario/controller pair.
    pub fn defaults(scenario: ScenarioId, controller: ControllerId) -> Result<Self> {
        use ControllerId as C;
        use ScenarioId as S;
        let mut st = Settings {
            run: RunSection { scenario, controller, t_end: 4.0, h_model: 1e-4, h_system: 1e-4, disturbance: false, seed: 0 },
            mpc: MpcSection {
                delta: 5e-4,
                horizon: 1e-2,
                control_step: 5e-4,
                u_max: 600.0,
                lambda_u: 0.1,
                u_offset: None,
                cost: CostId::FunnelNorm,
                funnel_constraint: true,
                max_iter: 60,
                init: InitId::CarryOver,
                init_eps: None,
                init_lambda: None,
            },
            fc: FcSection { enabled: false, s_crit: None, scale: 1.0 },
            learning: LearningSection { every: None, window: None, dt: 1e-3, max_iter: 40 },
            zoh: ZohSection { iota: 0.75, nu: None, sample_step: None, data_policy: DataPolicyId::Zero, u_max_data: 0.0 },
        };
        match (scenario, controller) {
            (S::Reactor, C::Fmpc | C::QuadraticMpc) => {
                st.mpc.u_offset = Some(360.0);
                if controller == C::QuadraticMpc {
                    st.mpc.cost = CostId::Quadratic;
                    st.mpc.funnel_constraint = false;
                }
            }
            (S::Reactor, C::Robust | C::Learning) => {
                st.run.h_model = 1e-3;
                st.run.h_system = 2e-5;
                st.mpc.delta = 0.1;
                st.mpc.horizon = 1.0;
                st.mpc.control_step = 0.1;
                st.mpc.lambda_u = 1e-4;
                st.mpc.u_offset = Some(360.0);
                st.fc = FcSection { enabled: true, s_crit: Some(0.4), scale: 1.0 };
                if controller == C::Learning {
                    st.mpc.init = InitId::ExactOutput;
                    st.learning.every = Some(3);
                    st.learning.window = Some(0.3);
                }
            }
            (S::Reactor, C::Fc) => {
                st.run.h_system = 1e-5;
            }
            (S::MassOnCar, C::Fmpc | C::QuadraticMpc | C::Robust) => {
                st.run.t_end = 10.0;
                st.mpc.delta = 0.1;
                st.mpc.horizon = 1.0;
                st.mpc.control_step = 0.1;
                st.mpc.u_max = 30.0;
                st.mpc.lambda_u = 1e-4;
                st.run.h_model = 1e-3;
                st.run.h_system = 1e-3;
                if controller == C::QuadraticMpc {
                    st.mpc.cost = CostId::Quadratic;
                    st.mpc.funnel_constraint = false;
                }
                if controller == C::Robust {
                    st.mpc.delta = 1.0 / 12.0;
                    st.mpc.control_step = 1.0 / 12.0;
                    st.run.h_model = 1.0 / 1200.0;
                    st.run.h_system = 1.0 / 1200.0;
                    st.fc.enabled = true;
                }
            }
            (S::MassOnCar, C::Fc) => {
                st.run.t_end = 10.0;
                st.run.h_system = 1e-4;
            }
            (S::MassOnCarCh5, C::Fc | C::Zoh | C::SafetyFilter) => {
                st.run.t_end = 1.0;
                st.run.h_system = 1e-4;
                if controller == C::SafetyFilter {
                    st.zoh.data_policy = DataPolicyId::HoldLast;
                    st.zoh.u_max_data = 10.0;
                }
            }
            (S::Torsional, C::SampledFmpc | C::Fmpc) => {
                st.run.t_end = 6.0;
                st.mpc.delta = 0.002;
                st.mpc.horizon = 0.02;
                st.mpc.control_step = 0.002;
                st.mpc.u_max = 267.0;
                st.mpc.lambda_u = 0.1;
                st.mpc.cost = CostId::NonStrict;
                st.run.h_model = 5e-4;
                st.run.h_system = 5e-4;
            }
            (S::Torsional, C::Fc) => {
                st.run.t_end = 6.0;
                st.run.h_system = 1e-4;
            }
            _ => return Err(unsupported(scenario, controller)),
        }
        Ok(st)
    }

    /// Sets a dotted key such as `mpc.delta` from its textual value.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        self.set_value(key, parse_scalar(raw))
    }

    pub fn set_value(&mut self, key: &str, value: Value) -> Result<()> {
        let mut tree = serde_json::to_value(&*self)?;
        let (section, field) = key.split_once('.').ok_or_else(|| Error::Config(format!("key {key:?} needs a section")))?;
        let slot = tree
            .get_mut(section)
            .and_then(|s| s.get_mut(field))
            .ok_or_else(|| Error::Config(format!("unknown key {key:?}")))?;
        *slot = value;
        *self = serde_json::from_value(tree).map_err(|e| Error::Config(format!("bad value for {key}: {e}")))?;
        Ok(())
    }

    /// Every dotted key with its current value.
    pub fn flatten(&self) -> Vec<(String, Value)> {
        let tree = serde_json::to_value(self).expect("settings serialize");
        let mut out = Vec::new();
        if let Value::Object(sections) = tree {
            for (s, fields) in sections {
                if let Value::Object(fields) = fields {
                    for (f, v) in fields {
                        out.push((format!("{s}.{f}"), v));
                    }
                }
            }
        }
        out
    }

    /// Reads a config file: dotted `section.key = value` lines or `[section]` tables.
    /// `run.scenario` and `run.controller` select the defaults the remaining keys override.
    pub fn from_config_str(text: &str) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e| Error::Config(format!("config: {e}")))?;
        let mut flat = Vec::new();
        for (k, v) in &table {
            match v {
                toml::Value::Table(inner) => {
                    for (f, iv) in inner {
                        flat.push((format!("{k}.{f}"), iv.clone()));
                    }
                }
                _ => return Err(Error::Config(format!("key {k:?} needs a section"))),
            }
        }
        let pick = |name: &str| -> Result<String> {
            flat.iter()
                .find(|(k, _)| k == name)
                .and_then(|(_, v)| v.as_str().map(str::to_string))
                .ok_or_else(|| Error::Config(format!("{name} is required")))
        };
        let mut st = Settings::defaults(pick("run.scenario")?.parse()?, pick("run.controller")?.parse()?)?;
        for (k, v) in flat {
            if k == "run.scenario" || k == "run.controller" {
                continue;
            }
            let json = serde_json::to_value(&v)?;
            st.set_value(&k, json)?;
        }
        Ok(st)
    }

    pub fn mpc_config(&self) -> MpcConfig {
        let m = &self.mpc;
        let mut cfg = MpcConfig::new(self.run.t_end, m.delta, m.horizon, m.u_max, m.lambda_u, self.run.h_model);
        cfg.control_step = m.control_step;
        cfg.h_system = self.run.h_system;
        cfg.u_offset = m.u_offset.map(|v| vec![v]);
        cfg.cost = if !m.funnel_constraint {
            StageCost::Quadratic
        } else {
            match m.cost {
                CostId::FunnelNorm => StageCost::Funnel(PenaltyForm::Norm),
                CostId::FunnelSquared => StageCost::Funnel(PenaltyForm::Squared),
                CostId::NonStrict => StageCost::NonStrict,
                CostId::Quadratic => StageCost::Quadratic,
            }
        };
        cfg.solver = SolverOptions { max_iter: m.max_iter, tol: 1e-9 };
        cfg.init = match m.init {
            InitId::CarryOver => InitStrategy::CarryOver,
            InitId::Proper => InitStrategy::ProperInit { eps: m.init_eps, lambda: m.init_lambda },
            InitId::ExactOutput => InitStrategy::ExactOutputMatch,
        };
        cfg.learn_every = self.learning.every;
        cfg.fc = self.fc.enabled.then(|| self.gains());
        cfg
    }

    pub fn gains(&self) -> GainSpec {
        GainSpec {
            n: Surjection::Negative { scale: self.fc.scale },
            activation: self.fc.s_crit.map_or(Activation::Always, |s_crit| Activation::Threshold { s_crit }),
            ..GainSpec::default()
        }
    }
}

fn parse_scalar(raw: &str) -> Value {
    let s = raw.trim();
    match s {
        "true" => return Value::Bool(true),
        "false" => return Value::Bool(false),
        "none" | "null" => return Value::Null,
        _ => {}
    }
    if let Ok(i) = s.parse::<u64>() {
        return Value::from(i);
    }
    if let Ok(f) = s.parse::<f64>() {
        return Value::from(f);
    }
    Value::String(s.to_string())
}

/// Plants, reference, funnel and initial values of a scenario.
pub struct Scenario {
    pub system: ControlAffineModel,
    /// Model used by the predictive component (the plant itself unless the study says otherwise).
    pub model: ControlAffineModel,
    pub reference: Arc<dyn Reference>,
    pub spec: FunnelSpec,
    pub design: AuxiliaryDesign,
    pub xs0: Vec<f64>,
    pub xm0: Vec<f64>,
    /// Analytic bounds of f and g where the study provides them.
    pub bounds: Option<DynBounds>,
}

/// Reference of the reactor study: heating 270 → 337.1 over two time units.
pub fn reactor_reference() -> Signal {
    Signal::Ramp { from: 270.0, to: 337.1, t_final: 2.0 }
}

pub fn reactor_funnel() -> ExpFunnel {
    ExpFunnel::new(20.0, 2.0, 4.0)
}

pub fn reactor_param_bounds() -> ParamBounds {
    ParamBounds { r_bar: 1.3, s_bar: 1.4, gamma_bar: 1.0, d_bar: 2.5, p_bar: 1.0 / 400.0, eta_bar: 0.91, y_bar: 341.4 }
}

pub fn ch5_bounds() -> DynBounds {
    DynBounds { f_max: 1.4, g_max: 0.25, g_inv_max: 4.0, g_min: Some(0.25) }
}

fn first_order(psi: Arc<dyn FunnelFn>, horizon: (f64, f64)) -> Result<(FunnelSpec, AuxiliaryDesign)> {
    let spec = FunnelSpec::new(psi, horizon)?;
    let design = AuxiliaryDesign::first_order(&spec, 1);
    Ok((spec, design))
}

pub fn build_scenario(st: &Settings) -> Result<Scenario> {
    let t_end = st.run.t_end;
    let disturbed = |m: ControlAffineModel| {
        if st.run.disturbance {
            m.with_disturbance(Arc::new(|t: f64, d: &mut [f64]| d[0] = (20.0 * t).cos()))
        } else {
            m
        }
    };
    match st.run.scenario {
        ScenarioId::Reactor => {
            let p = ReactorParams::default();
            let system = disturbed(build_reactor(&p));
            let (spec, design) = first_order(Arc::new(reactor_funnel()), (0.0, t_end.max(40.0)))?;
            let xs0 = vec![p.init[2], p.init[0], p.init[1]];
            let (model, xm0) = match st.run.controller {
                ControllerId::Robust => (build_reactor_linear_model(&p), xs0.clone()),
                ControllerId::Learning => {
                    let init = LinearModelParams::trivial(1, 1, 2, reactor_param_bounds().sigma());
                    (init.to_model("initial"), vec![p.init[2], 0.0, 0.0])
                }
                _ => (build_reactor(&p), xs0.clone()),
            };
            Ok(Scenario {
                system,
                model,
                reference: Arc::new(ScalarReference(reactor_reference())),
                spec,
                design,
                xs0,
                xm0,
                bounds: None,
            })
        }
        ScenarioId::MassOnCar => {
            let system = disturbed(build_mass_on_car(&MassOnCarParams::chapter2()));
            let model = if st.run.controller == ControllerId::Robust {
                build_mass_on_car(&MassOnCarParams::mistuned())
            } else {
                build_mass_on_car(&MassOnCarParams::chapter2())
            };
            let spec = FunnelSpec::with_constants(Arc::new(ExpFunnel::new(5.0, 2.0, 0.1)), (0.0, t_end), 2.0, 0.2)?;
            let reference = Arc::new(ScalarReference(Signal::cosine()));
            let xs0 = vec![0.0; 4];
            let e0: Vec<f64> = reference.stack(0.0, 1).iter().zip(&xs0).map(|(r, x)| x - r).collect();
            let design = design_custom(&spec, &e0, 1, vec![14.0], 0.2)?;
            Ok(Scenario { system, model, reference, spec, design, xs0: xs0.clone(), xm0: xs0, bounds: None })
        }
        ScenarioId::MassOnCarCh5 => {
            let system = disturbed(build_mass_on_car(&MassOnCarParams::zoh_study()));
            let spec = FunnelSpec::new(Arc::new(ExpFunnel::constant(0.15)), (0.0, t_end))?;
            let reference = Arc::new(ScalarReference(Signal::Sine {
                amp: 0.4,
                omega: std::f64::consts::FRAC_PI_2,
                phase: 0.0,
                offset: 0.0,
            }));
            let xs0 = vec![-0.0925, 0.2 * std::f64::consts::PI, 0.0, 0.0];
            let e0: Vec<f64> = reference.stack(0.0, 1).iter().zip(&xs0).map(|(r, x)| x - r).collect();
            let design = crate::funnel::design_auxiliary(&spec, &e0, 2, 1, crate::funnel::DesignMode::Varying)?;
            let model = build_mass_on_car(&MassOnCarParams::zoh_study());
            Ok(Scenario { system, model, reference, spec, design, xs0: xs0.clone(), xm0: xs0, bounds: Some(ch5_bounds()) })
        }
        ScenarioId::Torsional => {
            let system = disturbed(build_torsional(&TorsionalParams::default()));
            let model = build_torsional(&TorsionalParams::default());
            let (spec, design) = first_order(Arc::new(ExpFunnel::constant(25.0)), (0.0, t_end))?;
            let reference = Arc::new(ScalarReference(Signal::SmoothStep { amp: 250.0, center: 3.0 }));
            Ok(Scenario { system, model, reference, spec, design, xs0: vec![0.0; 3], xm0: vec![0.0; 3], bounds: None })
        }
    }
}

fn yref_r_sup(sc: &Scenario, t_end: f64) -> f64 {
    let r = sc.system.r;
    let n = 20_000;
    (0..=n)
        .map(|i| {
            let t = t_end * i as f64 / n as f64;
            let s = sc.reference.stack(t, r);
            s[r * sc.system.m..].iter().map(|v| v * v).sum::<f64>().sqrt()
        })
        .fold(0.0, f64::max)
}

/// ZoH constants of a scenario with the user overrides of ν and 𝔯 applied.
pub fn zoh_config(st: &Settings, sc: &Scenario) -> Result<ZohConfig> {
    let bounds = match sc.bounds {
        Some(b) => b,
        None => sampled_bounds(st, sc)?,
    };
    let r = sc.system.r;
    let psi = sc.spec.psi.as_ref();
    let refs = sc.reference.stack(0.0, r - 1);
    let e: Vec<f64> = (0..r).map(|i| sc.xs0[i] - refs[i]).collect();
    let init = crate::funnel::fc_errors(1.0 / psi.value(0.0), &e, 1, &st.gains())?.norms();
    let mut inputs = ZohInputs::new(bounds, PhiBounds::from_psi(psi, (0.0, st.run.t_end)), yref_r_sup(sc, st.run.t_end), init, r, st.zoh.iota);
    inputs.gains = st.gains();
    if st.run.controller == ControllerId::SafetyFilter {
        inputs.data_bound = Some(st.zoh.u_max_data);
    }
    let cfg = zoh_constants(&inputs)?;
    Ok(match (st.zoh.nu, st.zoh.sample_step) {
        (None, None) => cfg,
        (nu, step) => {
            let (n, s) = (nu.unwrap_or(cfg.nu), step.unwrap_or(cfg.sample_step));
            cfg.with_override(n, s)
        }
    })
}

fn sampled_bounds(st: &Settings, sc: &Scenario) -> Result<DynBounds> {
    dynamics_bounds(
        &sc.system,
        &sc.design,
        sc.reference.as_ref(),
        BoundsSource::Sampling {
            samples: 20_000,
            eta_bound: 1.0,
            horizon: (0.0, st.run.t_end),
            seed: st.run.seed,
            require_g_min: true,
        },
    )
}

/// Calculator output of the `bounds` command.
#[derive(Debug, Clone, Serialize)]
pub struct BoundsReport {
    pub scenario: ScenarioId,
    pub dyn_bounds: DynBounds,
    pub yref_r_sup: f64,
    pub u_max_bound: f64,
    pub zoh: Option<ZohConfig>,
    pub sampled: Option<SampledConstants>,
}

pub fn bounds_report(st: &Settings) -> Result<BoundsReport> {
    let sc = build_scenario(st)?;
    let dyn_bounds = match sc.bounds {
        Some(b) => b,
        None => sampled_bounds(st, &sc)?,
    };
    let yr = yref_r_sup(&sc, st.run.t_end);
    let zoh = zoh_config(st, &sc).ok();
    let sampled = sampled_constants(&dyn_bounds, &sc.design, yr, (0.0, st.run.t_end)).ok();
    Ok(BoundsReport {
        scenario: st.run.scenario,
        dyn_bounds,
        yref_r_sup: yr,
        u_max_bound: u_max_bound(&dyn_bounds, &sc.design, yr),
        zoh,
        sampled,
    })
}

/// Result of [`run`] with the echo of the resolved settings.
pub struct Outcome {
    pub settings: Settings,
    pub result: RunResult,
    /// ZoH constants for sampled feedback runs.
    pub zoh: Option<ZohConfig>,
    /// Residuals of the learning steps.
    pub learning_residuals: Vec<f64>,
}

impl Outcome {
    /// Summary object written next to the trace.
    pub fn summary_json(&self) -> Value {
        serde_json::json!({
            "settings": self.settings,
            "status": self.result.status,
            "summary": self.result.summary,
            "iterations": self.result.iterations.len(),
            "zoh": self.zoh,
            "learning_residuals": self.learning_residuals,
        })
    }
}

/// Executes one run as described by `st`.
pub fn run(st: &Settings) -> Result<Outcome> {
    let sc = build_scenario(st)?;
    let start = Instant::now();
    let window = (0.0, st.run.t_end);
    let reference = sc.reference.as_ref();
    let mut zoh = None;
    let mut residuals = Vec::new();
    let result = match st.run.controller {
        ControllerId::Fmpc | ControllerId::QuadraticMpc => {
            run_funnel_mpc(&sc.model, &sc.design, reference, &sc.xs0, &st.mpc_config())?
        }
        ControllerId::SampledFmpc => {
            let nu = st.zoh.nu.unwrap_or(0.5 * st.mpc.u_max);
            run_sampled_fmpc(&sc.model, &sc.design, reference, &sc.xs0, &st.mpc_config(), nu)?
        }
        ControllerId::Robust => {
            run_robust_fmpc(&sc.system, &sc.model, &sc.design, reference, &sc.xs0, &sc.xm0, &st.mpc_config(), None)?
        }
        ControllerId::Learning => {
            if st.run.scenario != ScenarioId::Reactor {
                return Err(unsupported(st.run.scenario, st.run.controller));
            }
            let b = reactor_param_bounds();
            let opts = LearnOptions {
                dt: st.learning.dt,
                max_iter: st.learning.max_iter,
                window: st.learning.window,
                ..Default::default()
            };
            let mut learner = LinearLearner::new(b, LinearModelParams::trivial(1, 1, 2, b.sigma()), opts)?;
            let res = run_robust_fmpc(
                &sc.system,
                &sc.model,
                &sc.design,
                reference,
                &sc.xs0,
                &sc.xm0,
                &st.mpc_config(),
                Some(&mut learner),
            )?;
            residuals = learner.history.iter().map(|o| o.residual).collect();
            res
        }
        ControllerId::Fc => {
            let tr = run_funnel_controller(&sc.system, reference, sc.spec.psi.as_ref(), &st.gains(), &sc.xs0, window, st.run.h_system)?;
            RunResult::finish(tr, Vec::new(), RunStatus::Completed, start)
        }
        ControllerId::Zoh | ControllerId::SafetyFilter => {
            let cfg = zoh_config(st, &sc)?;
            let policy = match st.zoh.data_policy {
                DataPolicyId::Zero => DataPolicy::Zero,
                DataPolicyId::HoldLast => DataPolicy::HoldLast,
            };
            let tr = run_zoh(
                &sc.system,
                reference,
                sc.spec.psi.as_ref(),
                &cfg,
                &st.gains(),
                policy,
                st.zoh.u_max_data,
                &sc.xs0,
                window,
                st.run.h_system,
            )?;
            zoh = Some(cfg);
            RunResult::finish(tr, Vec::new(), RunStatus::Completed, start)
        }
    };
    Ok(Outcome { settings: st.clone(), result, zoh, learning_residuals: residuals })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_default_pair_round_trips_through_keys() {
        for &s in ScenarioId::ALL {
            for &c in ControllerId::ALL {
                let Ok(st) = Settings::defaults(s, c) else { continue };
                let mut copy = Settings::defaults(s, c).unwrap();
                for (k, v) in st.flatten() {
                    copy.set_value(&k, v).unwrap();
                }
                assert_eq!(copy, st);
            }
        }
    }

    #[test]
    fn set_parses_and_rejects() {
        let mut st = Settings::defaults(ScenarioId::Reactor, ControllerId::Robust).unwrap();
        st.set("mpc.delta", "0.05").unwrap();
        assert_eq!(st.mpc.delta, 0.05);
        st.set("mpc.init", "exact_output").unwrap();
        assert_eq!(st.mpc.init, InitId::ExactOutput);
        st.set("fc.s_crit", "none").unwrap();
        assert_eq!(st.fc.s_crit, None);
        st.set("learning.every", "5").unwrap();
        assert_eq!(st.learning.every, Some(5));
        assert!(st.set("mpc.nope", "1").is_err());
        assert!(st.set("delta", "1").is_err());
        assert!(st.set("mpc.delta", "fast").is_err());
    }

    #[test]
    fn config_file_overrides_defaults() {
        let text = "[run]\nscenario = \"reactor\"\ncontroller = \"robust\"\nt_end = 2.0\n\n[mpc]\ninit = \"exact_output\"\n";
        let st = Settings::from_config_str(text).unwrap();
        assert_eq!(st.run.t_end, 2.0);
        assert_eq!(st.mpc.init, InitId::ExactOutput);
        assert_eq!(st.mpc.delta, 0.1);
        let dotted = "run.scenario = \"torsional\"\nrun.controller = \"sampled_fmpc\"\nmpc.u_max = 30.0\n";
        let st = Settings::from_config_str(dotted).unwrap();
        assert_eq!(st.mpc.u_max, 30.0);
        assert!(Settings::from_config_str("[run]\nscenario = \"reactor\"\n").is_err());
        assert!(Settings::from_config_str("[run]\nscenario = \"reactor\"\ncontroller = \"zoh\"\n").is_err());
    }

    #[test]
    fn names_parse_back() {
        for &c in ControllerId::ALL {
            assert_eq!(c.as_str().parse::<ControllerId>().unwrap(), c);
        }
        for &s in ScenarioId::ALL {
            assert_eq!(s.to_string().parse::<ScenarioId>().unwrap(), s);
        }
    }

    #[test]
    fn ch5_bounds_report() {
        let st = Settings::defaults(ScenarioId::MassOnCarCh5, ControllerId::Zoh).unwrap();
        let rep = bounds_report(&st).unwrap();
        let z = rep.zoh.unwrap();
        assert!((z.nu_min - 27.78).abs() < 5e-3, "nu_min {}", z.nu_min);
        assert!(z.sample_step <= 3.22e-3 && z.sample_step >= 3.2e-3, "step {}", z.sample_step);
    }
}
