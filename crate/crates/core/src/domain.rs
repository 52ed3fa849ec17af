//! Identifiers, check-in records, triples and run hyperparameters.
//!
//! Every identifier is a dense `u32` assigned at load time. POIs, categories
//! and segments are also knowledge-graph entities; [`EntityLayout`] records
//! that mapping and [`PoiCatalog`] exposes it together with the
//! POI → category / segment lookups.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

macro_rules! dense_id {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(
            Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize,
        )]
        #[serde(transparent)]
        pub struct $name(pub u32);

        impl $name {
            #[inline]
            pub fn index(self) -> usize {
                self.0 as usize
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}", self.0)
            }
        }

        impl From<u32> for $name {
            fn from(v: u32) -> Self {
                $name(v)
            }
        }
    };
}

dense_id!(UserId);
dense_id!(PoiId);
dense_id!(
    /// Knowledge-graph entity. POIs, categories, segments, brands and
    /// side-information all live in this namespace.
    EntityId
);
dense_id!(RelationId);
dense_id!(CategoryId);
dense_id!(SegmentId);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Triple {
    pub head: EntityId,
    pub relation: RelationId,
    pub tail: EntityId,
}

impl Triple {
    pub fn new(head: u32, relation: u32, tail: u32) -> Self {
        Triple {
            head: EntityId(head),
            relation: RelationId(relation),
            tail: EntityId(tail),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CheckInRecord {
    pub user: UserId,
    pub poi: PoiId,
    pub category: CategoryId,
    pub segment: SegmentId,
}

impl CheckInRecord {
    pub fn new(user: UserId, poi: PoiId, catalog: &PoiCatalog) -> Result<Self> {
        Ok(CheckInRecord {
            user,
            poi,
            category: catalog.category_of(poi)?,
            segment: catalog.segment_of(poi)?,
        })
    }
}

/// A user's visited POIs together with the category of each visit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckInHistory {
    user: UserId,
    pois: Vec<PoiId>,
    categories: Vec<CategoryId>,
}

impl CheckInHistory {
    pub fn new(user: UserId, pois: Vec<PoiId>, catalog: &PoiCatalog) -> Result<Self> {
        let categories = pois
            .iter()
            .map(|&p| catalog.category_of(p))
            .collect::<Result<Vec<_>>>()?;
        Ok(CheckInHistory {
            user,
            pois,
            categories,
        })
    }

    pub fn user(&self) -> UserId {
        self.user
    }

    pub fn pois(&self) -> &[PoiId] {
        &self.pois
    }

    pub fn categories(&self) -> &[CategoryId] {
        &self.categories
    }

    pub fn len(&self) -> usize {
        self.pois.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pois.is_empty()
    }
}

/// Where POIs, categories and segments sit in the entity namespace.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityLayout {
    pub poi: Vec<EntityId>,
    pub category: Vec<EntityId>,
    pub segment: Vec<EntityId>,
}

impl EntityLayout {
    /// POIs first, then categories, then segments.
    pub fn contiguous(n_pois: usize, n_categories: usize, n_segments: usize) -> Self {
        let ids = |start: usize, n: usize| (start..start + n).map(|i| EntityId(i as u32)).collect();
        EntityLayout {
            poi: ids(0, n_pois),
            category: ids(n_pois, n_categories),
            segment: ids(n_pois + n_categories, n_segments),
        }
    }

    /// Checks that the three maps are injective and pairwise disjoint.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashMap::new();
        for (kind, ids) in [
            ("poi", &self.poi),
            ("category", &self.category),
            ("segment", &self.segment),
        ] {
            for e in ids {
                if let Some(prev) = seen.insert(*e, kind) {
                    return Err(Error::InvalidArgument(format!(
                        "entity {e} is mapped by both a {prev} and a {kind}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Immutable POI registry with total lookups in both directions.
#[derive(Debug, Clone)]
pub struct PoiCatalog {
    category: Vec<CategoryId>,
    segment: Vec<SegmentId>,
    by_category: Vec<Vec<PoiId>>,
    by_segment: Vec<Vec<PoiId>>,
    layout: EntityLayout,
    poi_of_entity: HashMap<EntityId, PoiId>,
}

/// Builds a catalog from `(poi, category, segment)` rows.
///
/// POI ids must be exactly `0..rows.len()` (in any order); categories and
/// segments must be registered in `layout`.
pub fn register_catalog(
    rows: &[(PoiId, CategoryId, SegmentId)],
    layout: EntityLayout,
) -> Result<PoiCatalog> {
    layout.validate()?;
    let n = rows.len();
    let mut category = vec![None; n];
    let mut segment = vec![SegmentId(0); n];
    for &(p, c, s) in rows {
        if p.index() >= n || p.index() >= layout.poi.len() {
            return Err(Error::Dangling {
                kind: "poi",
                id: p.0 as u64,
            });
        }
        if category[p.index()].is_some() {
            return Err(Error::DuplicatePoi(p.0 as u64));
        }
        if c.index() >= layout.category.len() {
            return Err(Error::Dangling {
                kind: "category",
                id: c.0 as u64,
            });
        }
        if s.index() >= layout.segment.len() {
            return Err(Error::Dangling {
                kind: "segment",
                id: s.0 as u64,
            });
        }
        category[p.index()] = Some(c);
        segment[p.index()] = s;
    }
    if layout.poi.len() != n {
        return Err(Error::Dangling {
            kind: "poi",
            id: n as u64,
        });
    }
    let category: Vec<CategoryId> = category.into_iter().map(|c| c.unwrap()).collect();
    let mut by_category = vec![Vec::new(); layout.category.len()];
    let mut by_segment = vec![Vec::new(); layout.segment.len()];
    for p in 0..n {
        by_category[category[p].index()].push(PoiId(p as u32));
        by_segment[segment[p].index()].push(PoiId(p as u32));
    }
    let poi_of_entity = layout
        .poi
        .iter()
        .enumerate()
        .map(|(p, &e)| (e, PoiId(p as u32)))
        .collect();
    Ok(PoiCatalog {
        category,
        segment,
        by_category,
        by_segment,
        layout,
        poi_of_entity,
    })
}

impl PoiCatalog {
    pub fn n_pois(&self) -> usize {
        self.category.len()
    }

    pub fn n_categories(&self) -> usize {
        self.by_category.len()
    }

    pub fn n_segments(&self) -> usize {
        self.by_segment.len()
    }

    pub fn pois(&self) -> impl Iterator<Item = PoiId> {
        (0..self.n_pois() as u32).map(PoiId)
    }

    fn check(&self, p: PoiId) -> Result<usize> {
        if p.index() < self.n_pois() {
            Ok(p.index())
        } else {
            Err(Error::Unknown {
                kind: "poi",
                id: p.0 as u64,
            })
        }
    }

    pub fn category_of(&self, p: PoiId) -> Result<CategoryId> {
        Ok(self.category[self.check(p)?])
    }

    pub fn segment_of(&self, p: PoiId) -> Result<SegmentId> {
        Ok(self.segment[self.check(p)?])
    }

    pub fn pois_in_category(&self, c: CategoryId) -> &[PoiId] {
        self.by_category.get(c.index()).map_or(&[], Vec::as_slice)
    }

    pub fn pois_in_segment(&self, s: SegmentId) -> &[PoiId] {
        self.by_segment.get(s.index()).map_or(&[], Vec::as_slice)
    }

    pub fn entity_of(&self, p: PoiId) -> Result<EntityId> {
        Ok(self.layout.poi[self.check(p)?])
    }

    pub fn category_entity(&self, c: CategoryId) -> Option<EntityId> {
        self.layout.category.get(c.index()).copied()
    }

    pub fn segment_entity(&self, s: SegmentId) -> Option<EntityId> {
        self.layout.segment.get(s.index()).copied()
    }

    pub fn poi_of_entity(&self, e: EntityId) -> Option<PoiId> {
        self.poi_of_entity.get(&e).copied()
    }

    pub fn layout(&self) -> &EntityLayout {
        &self.layout
    }
}

/// Activation used inside the propagation layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Logistic,
    Tanh,
    Identity,
}

/// Every tunable of a simulation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Hyperparams {
    /// Selection sensitivity of the desensitizing exponential mechanism.
    pub epsilon: f64,
    /// Weight of the neighbor term in the on-device objective.
    pub mu: f64,
    /// On-device learning rate.
    pub gamma: f64,
    /// Server pretraining learning rate.
    pub pretrain_gamma: f64,
    pub dim_entity: usize,
    pub dim_relation: usize,
    pub dim_user: usize,
    pub layers: usize,
    pub activation: Activation,
    /// Meta-path expansion depth; `None` expands to the full closure.
    pub hop_limit: Option<usize>,
    pub neighbor_cap: usize,
    pub epochs_pretrain: usize,
    pub pretrain_batch: usize,
    pub rounds_train: usize,
    pub negatives_per_positive: usize,
    pub validate_every: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            epsilon: 4.0,
            mu: 0.5,
            gamma: 2.0,
            pretrain_gamma: 2.0,
            dim_entity: 16,
            dim_relation: 16,
            dim_user: 16,
            layers: 1,
            activation: Activation::Logistic,
            hop_limit: None,
            neighbor_cap: 10,
            epochs_pretrain: 50,
            pretrain_batch: 128,
            rounds_train: 50,
            negatives_per_positive: 1,
            validate_every: 5,
            patience: 5,
            seed: 0,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidHyperparams(m.to_string()));
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return bad("epsilon must be finite and >= 0");
        }
        if !(0.0..=1.0).contains(&self.mu) {
            return bad("mu must lie in [0, 1]");
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return bad("gamma must be > 0");
        }
        if !(self.pretrain_gamma > 0.0 && self.pretrain_gamma.is_finite()) {
            return bad("pretrain_gamma must be > 0");
        }
        if self.dim_entity == 0 || self.dim_relation == 0 || self.dim_user == 0 {
            return bad("dimensions must be >= 1");
        }
        if self.hop_limit == Some(0) {
            return bad("hop_limit must be >= 1 when set");
        }
        if self.neighbor_cap == 0 {
            return bad("neighbor_cap must be >= 1");
        }
        if self.pretrain_batch == 0
            || self.negatives_per_positive == 0
            || self.validate_every == 0
            || self.patience == 0
        {
            return bad("batch, sampling, validation and patience counts must be >= 1");
        }
        Ok(())
    }
}
