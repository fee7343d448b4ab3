//! Group and item tables that drive the simulation.
//!
//! The shipped table (`data/timss_booklet13.toml`) holds 15 education systems
//! with their sample sizes and ability distributions, and 29 items with
//! baseline parameters plus the reference effect-size columns for a 0.4 shift
//! in `a` or `b`.

use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::irt::{EtsFlag, GroupSpec, ItemParams, Model};

const TIMSS_BOOKLET13: &str = include_str!("../../../data/timss_booklet13.toml");

#[derive(Clone, Debug, Deserialize)]
pub struct BookletItem {
    pub id: String,
    pub model: Model,
    pub a: f64,
    pub b: f64,
    pub c: f64,
    /// Shifted `a` used by the DIF focal group.
    pub dif_a: f64,
    /// Shifted `b` used by the DIF focal group.
    pub dif_b: f64,
    pub area_a: f64,
    pub delta_a: f64,
    pub flag_a: String,
    pub area_b: f64,
    pub delta_b: f64,
    pub flag_b: String,
}

impl BookletItem {
    pub fn params(&self) -> Result<ItemParams> {
        ItemParams::new(self.a, self.b, self.c, self.model)
    }

    pub fn reported_flag_a(&self) -> Result<EtsFlag> {
        self.flag_a.parse()
    }

    pub fn reported_flag_b(&self) -> Result<EtsFlag> {
        self.flag_b.parse()
    }
}

#[derive(Clone, Debug, Deserialize)]
pub struct Booklet {
    pub reference: String,
    pub dif_shift: f64,
    #[serde(rename = "group")]
    pub groups: Vec<GroupSpec>,
    #[serde(rename = "item")]
    pub items: Vec<BookletItem>,
}

impl Booklet {
    /// The built-in TIMSS 2019 Grade-8 Mathematics booklet 13 tables.
    pub fn timss_2019() -> Self {
        Self::parse(TIMSS_BOOKLET13).expect("bundled booklet table is valid")
    }

    pub fn parse(text: &str) -> Result<Self> {
        let booklet: Booklet = toml::from_str(text)?;
        booklet.validate()?;
        Ok(booklet)
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    fn validate(&self) -> Result<()> {
        for g in &self.groups {
            g.validate()?;
        }
        for item in &self.items {
            item.params()?;
        }
        if self.items.len() < 2 {
            return Err(Error::Config("booklet needs at least two items".into()));
        }
        self.group(&self.reference)?;
        Ok(())
    }

    pub fn group(&self, name: &str) -> Result<&GroupSpec> {
        self.groups
            .iter()
            .find(|g| g.name == name)
            .ok_or_else(|| Error::Config(format!("unknown group `{name}`")))
    }

    pub fn reference_group(&self) -> &GroupSpec {
        self.group(&self.reference).expect("validated on load")
    }

    pub fn item_params(&self) -> Vec<ItemParams> {
        self.items
            .iter()
            .map(|i| i.params().expect("validated on load"))
            .collect()
    }

    pub fn models(&self) -> Vec<Model> {
        self.items.iter().map(|i| i.model).collect()
    }

    pub fn item_ids(&self) -> Vec<String> {
        self.items.iter().map(|i| i.id.clone()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_tables_load() {
        let b = Booklet::timss_2019();
        assert_eq!(b.groups.len(), 15);
        assert_eq!(b.items.len(), 29);
        let wc = b.reference_group();
        assert_eq!((wc.n, wc.mu, wc.sigma), (374, -0.119, 0.841));
        let kuwait = b.group("Kuwait").unwrap();
        assert_eq!((kuwait.n, kuwait.mu, kuwait.sigma), (327, -0.393, 0.794));
        assert_eq!(b.items[1].b, 0.360);
        assert_eq!(b.items[1].dif_b, 0.760);
        assert_eq!(b.items[28].a, 2.995);
        assert_eq!(b.items[28].dif_a, 3.395);
        for item in &b.items {
            assert!((item.dif_a - item.a - b.dif_shift).abs() < 1e-9, "{}", item.id);
            assert!((item.dif_b - item.b - b.dif_shift).abs() < 1e-9, "{}", item.id);
        }
        assert!(b.groups.iter().all(|g| g.n > 300));
    }
}
