//! Optional TOML configuration. Each subcommand reads its own table
//! (`[simulate]`, `[fit]`, `[fixed-points]`, `[classify]`, `[boundary]`,
//! `[pipeline]`); top-level keys apply to every subcommand that accepts
//! them. Keys are the long flag names (`tol-j = 1e-8`, `box = "0,2x0,2"`).
//! Flags override the file, which overrides built-in defaults.

use crate::{BoundaryArgs, ClassifyArgs, Failure, FitArgs, FixedPointArgs, PipelineArgs, SimulateArgs, Tolerances};
use clap::Args;
use serde::de::DeserializeOwned;
use std::path::Path;

const SECTIONS: [&str; 6] = ["simulate", "fit", "fixed-points", "classify", "boundary", "pipeline"];

#[derive(Debug, Default)]
pub struct ConfigFile {
    table: toml::Table,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let table: toml::Table = text
            .parse()
            .map_err(|e| Failure::Usage(format!("invalid config {}: {e}", path.display())))?;
        for (k, v) in &table {
            if v.is_table() && !SECTIONS.contains(&k.as_str()) {
                return Err(Failure::Usage(format!("unknown config section [{k}]")));
            }
        }
        Ok(Self { table })
    }

    /// Settings for one subcommand: its table over the top-level keys.
    /// Keys are the long flag names. Top-level keys the subcommand does not
    /// accept are ignored; unknown keys inside its table are an error.
    pub fn section<T: DeserializeOwned + Args>(&self, name: &str) -> Result<T, Failure> {
        let known: Vec<String> = T::augment_args(clap::Command::new("section"))
            .get_arguments()
            .filter_map(|a| a.get_long().map(str::to_string))
            .collect();
        let section = match self.table.get(name) {
            Some(toml::Value::Table(t)) => t.clone(),
            Some(_) => return Err(Failure::Usage(format!("config key {name} must be a table"))),
            None => toml::Table::new(),
        };
        if let Some(k) = section.keys().find(|k| !known.contains(k)) {
            return Err(Failure::Usage(format!("unknown key {k:?} in config section [{name}]")));
        }
        let mut merged: toml::Table = self
            .table
            .iter()
            .filter(|(k, v)| !v.is_table() && known.contains(k))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        merged.extend(section);
        toml::Value::Table(merged)
            .try_into::<T>()
            .map_err(|e| Failure::Usage(format!("invalid [{name}] config: {e}")))
    }
}

macro_rules! prefer {
    ($a:ident, $f:ident; $($field:ident),+ $(,)?) => {
        $( if $a.$field.is_none() { $a.$field = $f.$field; } )+
    };
}

pub fn merge_simulate(mut a: SimulateArgs, f: SimulateArgs) -> SimulateArgs {
    prefer!(a, f; model, count, dt, t_final, bounds, r, k, d, seed, out);
    a
}

pub fn merge_fit(mut a: FitArgs, f: FitArgs) -> FitArgs {
    prefer!(a, f; data, family, p, q, sweep_p, sweep_q, split, propagation, rtol, seed, out);
    a
}

fn merge_tol(mut a: Tolerances, f: Tolerances) -> Tolerances {
    prefer!(a, f; tol_j, merge_radius, eps_hyp, eps_unit);
    a
}

pub fn merge_fixed_points(mut a: FixedPointArgs, f: FixedPointArgs) -> FixedPointArgs {
    prefer!(a, f; model, data, seed, out);
    a.tol = merge_tol(a.tol, f.tol);
    a
}

pub fn merge_classify(mut a: ClassifyArgs, f: ClassifyArgs) -> ClassifyArgs {
    prefer!(a, f; model, data, points, split, seed, out);
    a.tol = merge_tol(a.tol, f.tol);
    a
}

pub fn merge_boundary(mut a: BoundaryArgs, f: BoundaryArgs) -> BoundaryArgs {
    prefer!(a, f; model, data, split, seed, axes, bounds, resolution, frozen, stage, trivial, out);
    a.tol = merge_tol(a.tol, f.tol);
    a
}

pub fn merge_pipeline(mut a: PipelineArgs, f: PipelineArgs) -> PipelineArgs {
    a.fit = merge_fit(a.fit, f.fit);
    prefer!(a, f; out_dir, resolution);
    a.tol = merge_tol(a.tol, f.tol);
    a
}
