//! Benchmark problem catalog and name-based lookup.

mod mtp;
mod smd;
mod tp;

pub use mtp::make_mtp;
pub use smd::{make_smd13, make_smd14, smd13_default_dims, smd14_default_dims, SmdDims};
pub use tp::make_tp;

use crate::error::{Error, Result};
use crate::problem::BilevelProblem;

type Constructor = Box<dyn Fn(Option<SmdDims>) -> Result<BilevelProblem> + Send + Sync>;

/// Name-keyed problem registry, pre-populated with the built-in suites and
/// open to user-registered constructors.
pub struct Registry {
    entries: Vec<(String, Constructor)>,
}

impl Default for Registry {
    fn default() -> Self {
        let mut reg = Registry { entries: Vec::new() };
        for i in 1..=8 {
            reg.register(format!("tp{i}"), move |_| make_tp(i));
            reg.register(format!("mtp{i}"), move |_| make_mtp(i));
        }
        reg.register("smd13", |dims| {
            make_smd13(dims.unwrap_or_else(smd13_default_dims))
        });
        reg.register("smd14", |dims| {
            make_smd14(dims.unwrap_or_else(smd14_default_dims))
        });
        reg
    }
}

impl Registry {
    /// Registers a constructor; a repeated name replaces the old entry.
    pub fn register(
        &mut self,
        name: impl Into<String>,
        ctor: impl Fn(Option<SmdDims>) -> Result<BilevelProblem> + Send + Sync + 'static,
    ) {
        let name = name.into().to_lowercase();
        self.entries.retain(|(n, _)| *n != name);
        self.entries.push((name, Box::new(ctor)));
    }

    /// Instantiates a problem by name with its default dimensions.
    pub fn lookup(&self, name: &str) -> Result<BilevelProblem> {
        self.lookup_with_dims(name, None)
    }

    /// Instantiates a problem by name; `dims` applies to the scalable ones
    /// and is ignored by the fixed-size suites.
    pub fn lookup_with_dims(&self, name: &str, dims: Option<SmdDims>) -> Result<BilevelProblem> {
        let key = name.to_lowercase();
        match self.entries.iter().find(|(n, _)| *n == key) {
            Some((_, ctor)) => ctor(dims),
            None => Err(Error::UnknownProblem {
                name: name.to_string(),
                catalog: self.names().join(", "),
            }),
        }
    }

    /// Registered names in registration order.
    pub fn names(&self) -> Vec<&str> {
        self.entries.iter().map(|(n, _)| n.as_str()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_names_resolve() {
        let reg = Registry::default();
        for name in ["tp1", "TP8", "mtp4", "smd13", "smd14"] {
            let p = reg.lookup(name).unwrap();
            assert!(!p.name().is_empty());
        }
        assert_eq!(reg.names().len(), 18);
    }

    #[test]
    fn unknown_name_reports_the_catalog() {
        let reg = Registry::default();
        let err = reg.lookup("smd99").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("smd99"));
        assert!(msg.contains("tp1") && msg.contains("smd14"));
    }

    #[test]
    fn user_registration_extends_the_catalog() {
        let mut reg = Registry::default();
        reg.register("custom", |_| make_tp(1));
        assert!(reg.lookup("custom").is_ok());
    }

    #[test]
    fn dims_override_applies_to_scalable_problems() {
        let reg = Registry::default();
        let p = reg
            .lookup_with_dims("smd13", Some(SmdDims::new(3, 3, 2, 0).unwrap()))
            .unwrap();
        assert_eq!(p.upper_dim(), 5);
        let p = reg.lookup_with_dims("tp3", Some(SmdDims::new(3, 3, 2, 0).unwrap()));
        assert_eq!(p.unwrap().upper_dim(), 2);
    }
}
