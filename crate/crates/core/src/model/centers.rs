//! Transplant centers and the regions used for German locality.

use std::collections::BTreeMap;

use crate::model::Country;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Center {
    pub id: String,
    pub country: Country,
    pub region: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CenterDirectory {
    centers: BTreeMap<String, Center>,
}

impl CenterDirectory {
    pub fn new(centers: impl IntoIterator<Item = Center>) -> Self {
        CenterDirectory {
            centers: centers.into_iter().map(|c| (c.id.clone(), c)).collect(),
        }
    }

    pub fn get(&self, id: &str) -> Option<&Center> {
        self.centers.get(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Center> {
        self.centers.values()
    }

    pub fn in_country(&self, country: Country) -> impl Iterator<Item = &Center> {
        self.centers.values().filter(move |c| c.country == country)
    }

    /// Region of a center; unknown centers form their own region.
    pub fn region<'a>(&'a self, id: &'a str) -> &'a str {
        self.centers.get(id).map_or(id, |c| c.region.as_str())
    }

    pub fn same_region(&self, a: &str, b: &str) -> bool {
        self.region(a) == self.region(b)
    }
}
