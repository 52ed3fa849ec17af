//! Random fixtures shared by the integration tests.

#![allow(dead_code)]

use std::collections::BTreeSet;

use deckg::domain::{register_catalog, CategoryId, EntityLayout, PoiCatalog, PoiId, SegmentId};
use deckg::{KnowledgeGraph, Triple};
use rand::Rng;

/// A catalog over entities `0..n_pois`, categories and segments after them.
pub fn catalog<R: Rng>(n_pois: usize, n_categories: usize, n_segments: usize, rng: &mut R) -> PoiCatalog {
    let rows: Vec<_> = (0..n_pois)
        .map(|p| {
            (
                PoiId(p as u32),
                CategoryId(rng.random_range(0..n_categories as u32)),
                SegmentId(rng.random_range(0..n_segments as u32)),
            )
        })
        .collect();
    register_catalog(&rows, EntityLayout::contiguous(n_pois, n_categories, n_segments)).unwrap()
}

/// Up to `n_triples` distinct random triples; self loops and cycles allowed.
pub fn random_kg<R: Rng>(n_entities: usize, n_relations: usize, n_triples: usize, rng: &mut R) -> KnowledgeGraph {
    let mut set = BTreeSet::new();
    for _ in 0..n_triples {
        set.insert(Triple::new(
            rng.random_range(0..n_entities as u32),
            rng.random_range(0..n_relations as u32),
            rng.random_range(0..n_entities as u32),
        ));
    }
    KnowledgeGraph::new(n_entities, n_relations, set.into_iter().collect()).unwrap()
}
