//! Flat unconstrained parameter vectors for [`GpModel`]s.
//!
//! Positive hyperparameters are optimized as logs; `B` and `S` pass through.
//! Tying follows the treatment types: one force length-scale per type, and one
//! effect size per (covariate, type) shared by every administration of that
//! type. Each entry lists the administration indices (`sites`) it writes.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::GpModel;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    SeSigma,
    SeLengthScale,
    PerSigma,
    PerLengthScale,
    Period,
    NoiseStd,
    Baseline,
    Decay,
    Effect,
    ForceLengthScale,
}

impl ParamKind {
    pub fn transform(self) -> Transform {
        match self {
            ParamKind::Baseline | ParamKind::Effect => Transform::Identity,
            _ => Transform::Log,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ParamKind::SeSigma => "se_sigma",
            ParamKind::SeLengthScale => "se_length_scale",
            ParamKind::PerSigma => "per_sigma",
            ParamKind::PerLengthScale => "per_length_scale",
            ParamKind::Period => "period",
            ParamKind::NoiseStd => "noise_std",
            ParamKind::Baseline => "B",
            ParamKind::Decay => "D",
            ParamKind::Effect => "S",
            ParamKind::ForceLengthScale => "force_length_scale",
        }
    }
}

impl fmt::Display for ParamKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Transform {
    Log,
    Identity,
}

impl Transform {
    pub fn unconstrain(self, value: f64) -> Result<f64> {
        match self {
            Transform::Log if value > 0.0 && value.is_finite() => Ok(value.ln()),
            Transform::Log => Err(Error::ParameterDomain(format!(
                "positive parameter must be > 0, got {value}"
            ))),
            Transform::Identity if value.is_finite() => Ok(value),
            Transform::Identity => Err(Error::ParameterDomain(format!("non-finite parameter {value}"))),
        }
    }

    pub fn constrain(self, x: f64) -> f64 {
        match self {
            Transform::Log => x.exp(),
            Transform::Identity => x,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub kind: ParamKind,
    pub covariate: Option<usize>,
    pub treatment_type: Option<String>,
    /// Treatment administration indices written by this entry (S and force length-scales).
    pub sites: Vec<usize>,
}

impl ParamEntry {
    fn scalar(kind: ParamKind, covariate: usize) -> Self {
        ParamEntry {
            kind,
            covariate: Some(covariate),
            treatment_type: None,
            sites: Vec::new(),
        }
    }

    pub fn label(&self, model: &GpModel) -> String {
        let mut s = self.kind.name().to_string();
        if let Some(j) = self.covariate {
            s.push_str(&format!("[{}]", model.covariates[j].name));
        }
        if let Some(t) = &self.treatment_type {
            s.push_str(&format!("[{t}]"));
        }
        s
    }
}

/// Unconstrained coordinates, ordered as the schema's entries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    pub values: Vec<f64>,
}

/// Entry indices per covariate, used by the gradient code.
#[derive(Clone, Debug, Default)]
pub(crate) struct CovariateSlots {
    pub se_sigma: usize,
    pub se_length: usize,
    pub per: Option<[usize; 3]>,
    pub noise: usize,
    pub b: usize,
    pub d: usize,
    /// Entry index of `S` for each administration.
    pub effects: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct Schema {
    pub entries: Vec<ParamEntry>,
    template: GpModel,
    pub(crate) slots: Vec<CovariateSlots>,
    /// Entry index of the force length-scale for each administration.
    pub(crate) force_slots: Vec<usize>,
}

fn type_order(model: &GpModel) -> Vec<String> {
    let mut types: Vec<String> = Vec::new();
    for t in &model.treatments {
        if !types.contains(&t.type_id) {
            types.push(t.type_id.clone());
        }
    }
    types
}

impl Schema {
    /// Schema over every free hyperparameter of `template`. Covariates whose
    /// periodic component is `None` get no periodic entries.
    pub fn for_model(template: &GpModel) -> Schema {
        let types = type_order(template);
        let sites_of = |ty: &str| -> Vec<usize> {
            template
                .treatments
                .iter()
                .enumerate()
                .filter(|(_, t)| t.type_id == ty)
                .map(|(m, _)| m)
                .collect()
        };
        let mut entries = Vec::new();
        let mut slots = Vec::new();
        for (j, c) in template.covariates.iter().enumerate() {
            let mut slot = CovariateSlots::default();
            let mut push = |e: ParamEntry| {
                entries.push(e);
                entries.len() - 1
            };
            slot.se_sigma = push(ParamEntry::scalar(ParamKind::SeSigma, j));
            slot.se_length = push(ParamEntry::scalar(ParamKind::SeLengthScale, j));
            if c.periodic.is_some() {
                slot.per = Some([
                    push(ParamEntry::scalar(ParamKind::PerSigma, j)),
                    push(ParamEntry::scalar(ParamKind::PerLengthScale, j)),
                    push(ParamEntry::scalar(ParamKind::Period, j)),
                ]);
            }
            slot.noise = push(ParamEntry::scalar(ParamKind::NoiseStd, j));
            slot.b = push(ParamEntry::scalar(ParamKind::Baseline, j));
            slot.d = push(ParamEntry::scalar(ParamKind::Decay, j));
            slot.effects = vec![0; template.treatments.len()];
            for ty in &types {
                let sites = sites_of(ty);
                let idx = push(ParamEntry {
                    kind: ParamKind::Effect,
                    covariate: Some(j),
                    treatment_type: Some(ty.clone()),
                    sites: sites.clone(),
                });
                for m in sites {
                    slot.effects[m] = idx;
                }
            }
            slots.push(slot);
        }
        let mut force_slots = vec![0; template.treatments.len()];
        for ty in &types {
            let sites = sites_of(ty);
            entries.push(ParamEntry {
                kind: ParamKind::ForceLengthScale,
                covariate: None,
                treatment_type: Some(ty.clone()),
                sites: sites.clone(),
            });
            for m in sites {
                force_slots[m] = entries.len() - 1;
            }
        }
        Schema {
            entries,
            template: template.clone(),
            slots,
            force_slots,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn template(&self) -> &GpModel {
        &self.template
    }

    fn read(&self, model: &GpModel, e: &ParamEntry) -> Result<f64> {
        let c = e.covariate.map(|j| &model.covariates[j]);
        let per = || {
            c.and_then(|c| c.periodic.as_ref())
                .ok_or_else(|| Error::Consistency("periodic entry on a covariate without a periodic term".into()))
        };
        let tied = |values: Vec<f64>| -> Result<f64> {
            let first = values[0];
            if values.iter().any(|&v| v != first) {
                return Err(Error::Consistency(format!(
                    "tied sites of {} hold different values {values:?}",
                    e.kind
                )));
            }
            Ok(first)
        };
        Ok(match e.kind {
            ParamKind::SeSigma => c.unwrap().se_sigma,
            ParamKind::SeLengthScale => c.unwrap().se_length_scale,
            ParamKind::PerSigma => per()?.sigma,
            ParamKind::PerLengthScale => per()?.length_scale,
            ParamKind::Period => per()?.period,
            ParamKind::NoiseStd => c.unwrap().noise_var.sqrt(),
            ParamKind::Baseline => c.unwrap().b,
            ParamKind::Decay => c.unwrap().d,
            ParamKind::Effect => tied(e.sites.iter().map(|&m| c.unwrap().effects[m]).collect())?,
            ParamKind::ForceLengthScale => {
                tied(e.sites.iter().map(|&m| model.treatments[m].length_scale).collect())?
            }
        })
    }

    /// Map a model onto unconstrained coordinates.
    pub fn unconstrain(&self, model: &GpModel) -> Result<ParamVector> {
        if model.covariates.len() != self.template.covariates.len()
            || model.treatments.len() != self.template.treatments.len()
        {
            return Err(Error::Consistency("model shape differs from the schema template".into()));
        }
        let values = self
            .entries
            .iter()
            .map(|e| self.read(model, e).and_then(|v| e.kind.transform().unconstrain(v)))
            .collect::<Result<Vec<_>>>()?;
        Ok(ParamVector { values })
    }

    /// Build the model for unconstrained coordinates `x`. Every tied site
    /// receives the identical value.
    pub fn constrain(&self, x: &[f64]) -> GpModel {
        assert_eq!(x.len(), self.entries.len(), "parameter vector length");
        let mut model = self.template.clone();
        for (e, &xi) in self.entries.iter().zip(x) {
            let v = e.kind.transform().constrain(xi);
            match e.kind {
                ParamKind::ForceLengthScale => {
                    for &m in &e.sites {
                        model.treatments[m].length_scale = v;
                    }
                }
                kind => {
                    let c = &mut model.covariates[e.covariate.expect("covariate entry")];
                    match kind {
                        ParamKind::SeSigma => c.se_sigma = v,
                        ParamKind::SeLengthScale => c.se_length_scale = v,
                        ParamKind::PerSigma => c.periodic.as_mut().expect("periodic").sigma = v,
                        ParamKind::PerLengthScale => c.periodic.as_mut().expect("periodic").length_scale = v,
                        ParamKind::Period => c.periodic.as_mut().expect("periodic").period = v,
                        ParamKind::NoiseStd => c.noise_var = v * v,
                        ParamKind::Baseline => c.b = v,
                        ParamKind::Decay => c.d = v,
                        ParamKind::Effect => {
                            for &m in &e.sites {
                                c.effects[m] = v;
                            }
                        }
                        ParamKind::ForceLengthScale => unreachable!(),
                    }
                }
            }
        }
        model
    }

    /// `(entry label, tied administration indices)` for every tied entry.
    pub fn tying_table(&self) -> Vec<(String, Vec<usize>)> {
        self.entries
            .iter()
            .filter(|e| !e.sites.is_empty())
            .map(|e| (e.label(&self.template), e.sites.clone()))
            .collect()
    }
}
