//! Frozen triple store and the per-user sub-graph partitioner.
//!
//! A user's sub-graph is every triple whose head can be reached from the
//! user's uploaded POIs by walking head → tail edges. Walking stops at a
//! fixed point (or after `hop_limit` edges), so cycles are fine.

use std::collections::{BTreeSet, HashSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::domain::{EntityId, PoiCatalog, RelationId, Triple, UserId};
use crate::error::{Error, Result};
use crate::privacy::DesensitizedHistory;

#[derive(Debug, Clone)]
pub struct KnowledgeGraph {
    n_entities: usize,
    n_relations: usize,
    triples: Vec<Triple>,
    triple_set: HashSet<Triple>,
    out_index: Vec<Vec<(RelationId, EntityId)>>,
    und_index: Vec<Vec<EntityId>>,
}

impl KnowledgeGraph {
    /// Entities are `0..n_entities`, relations `0..n_relations`. Duplicate
    /// triples and out-of-range endpoints are rejected.
    pub fn new(n_entities: usize, n_relations: usize, triples: Vec<Triple>) -> Result<Self> {
        let mut triple_set = HashSet::with_capacity(triples.len());
        for t in &triples {
            for e in [t.head, t.tail] {
                if e.index() >= n_entities {
                    return Err(Error::Unknown {
                        kind: "entity",
                        id: e.0 as u64,
                    });
                }
            }
            if t.relation.index() >= n_relations {
                return Err(Error::Unknown {
                    kind: "relation",
                    id: t.relation.0 as u64,
                });
            }
            if !triple_set.insert(*t) {
                return Err(Error::InvalidArgument(format!(
                    "duplicate triple ({}, {}, {})",
                    t.head, t.relation, t.tail
                )));
            }
        }
        let mut triples = triples;
        triples.sort_unstable();

        let mut out_index = vec![Vec::new(); n_entities];
        let mut und: Vec<BTreeSet<EntityId>> = vec![BTreeSet::new(); n_entities];
        for t in &triples {
            out_index[t.head.index()].push((t.relation, t.tail));
            und[t.head.index()].insert(t.tail);
            und[t.tail.index()].insert(t.head);
        }
        let und_index = und.into_iter().map(|s| s.into_iter().collect()).collect();
        Ok(KnowledgeGraph {
            n_entities,
            n_relations,
            triples,
            triple_set,
            out_index,
            und_index,
        })
    }

    pub fn n_entities(&self) -> usize {
        self.n_entities
    }

    pub fn n_relations(&self) -> usize {
        self.n_relations
    }

    /// Triples in canonical (sorted) order.
    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    pub fn contains(&self, t: &Triple) -> bool {
        self.triple_set.contains(t)
    }

    pub fn has_entity(&self, e: EntityId) -> bool {
        e.index() < self.n_entities
    }

    fn check(&self, e: EntityId) -> Result<()> {
        if self.has_entity(e) {
            Ok(())
        } else {
            Err(Error::Unknown {
                kind: "entity",
                id: e.0 as u64,
            })
        }
    }

    pub fn out_edges(&self, e: EntityId) -> &[(RelationId, EntityId)] {
        self.out_index.get(e.index()).map_or(&[], Vec::as_slice)
    }

    /// Distinct entities adjacent to `e` in either direction.
    pub fn neighbors(&self, e: EntityId) -> &[EntityId] {
        self.und_index.get(e.index()).map_or(&[], Vec::as_slice)
    }

    pub fn degree(&self, e: EntityId) -> Result<usize> {
        self.check(e)?;
        Ok(self.und_index[e.index()].len())
    }
}

/// Free-function form of [`KnowledgeGraph::degree`].
pub fn degree(kg: &KnowledgeGraph, e: EntityId) -> Result<usize> {
    kg.degree(e)
}

/// Entities reachable from `seeds` along head → tail edges, seeds included.
///
/// With `hop_limit = Some(h)` at most `h` edges are traversed from a seed.
pub fn reachable_heads(
    kg: &KnowledgeGraph,
    seeds: &BTreeSet<EntityId>,
    hop_limit: Option<usize>,
) -> Result<BTreeSet<EntityId>> {
    let mut visited = vec![false; kg.n_entities()];
    let mut queue = VecDeque::new();
    for &s in seeds {
        kg.check(s)?;
        if !visited[s.index()] {
            visited[s.index()] = true;
            queue.push_back((s, 0usize));
        }
    }
    while let Some((e, depth)) = queue.pop_front() {
        if hop_limit.is_some_and(|h| depth >= h) {
            continue;
        }
        for &(_, t) in kg.out_edges(e) {
            if !visited[t.index()] {
                visited[t.index()] = true;
                queue.push_back((t, depth + 1));
            }
        }
    }
    Ok(visited
        .iter()
        .enumerate()
        .filter(|(_, &v)| v)
        .map(|(i, _)| EntityId(i as u32))
        .collect())
}

/// The slice of the knowledge graph deployed to one user.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubKnowledgeGraph {
    pub owner: UserId,
    /// Sorted, duplicate free.
    pub triples: Vec<Triple>,
    /// Sorted endpoints of `triples`.
    pub entities: Vec<EntityId>,
}

impl SubKnowledgeGraph {
    pub fn from_triples(owner: UserId, mut triples: Vec<Triple>) -> Self {
        triples.sort_unstable();
        triples.dedup();
        let entities: BTreeSet<EntityId> =
            triples.iter().flat_map(|t| [t.head, t.tail]).collect();
        SubKnowledgeGraph {
            owner,
            triples,
            entities: entities.into_iter().collect(),
        }
    }

    pub fn contains_entity(&self, e: EntityId) -> bool {
        self.entities.binary_search(&e).is_ok()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }
}

fn seed_entities(
    kg: &KnowledgeGraph,
    catalog: &PoiCatalog,
    uploads: &DesensitizedHistory,
) -> Result<BTreeSet<EntityId>> {
    uploads
        .pois
        .iter()
        .map(|&p| {
            let e = catalog.entity_of(p)?;
            if !kg.has_entity(e) {
                return Err(Error::Unknown {
                    kind: "entity",
                    id: e.0 as u64,
                });
            }
            Ok(e)
        })
        .collect()
}

/// Meta-path closure sub-graph of one user's desensitized upload.
pub fn partition_subkg(
    kg: &KnowledgeGraph,
    catalog: &PoiCatalog,
    uploads: &DesensitizedHistory,
    hop_limit: Option<usize>,
) -> Result<SubKnowledgeGraph> {
    let seeds = seed_entities(kg, catalog, uploads)?;
    let heads = reachable_heads(kg, &seeds, hop_limit)?;
    Ok(subkg_with_heads(kg, uploads.user, &heads))
}

/// One-hop sub-graph: only triples headed by an uploaded POI.
pub fn partition_one_hop(
    kg: &KnowledgeGraph,
    catalog: &PoiCatalog,
    uploads: &DesensitizedHistory,
) -> Result<SubKnowledgeGraph> {
    let seeds = seed_entities(kg, catalog, uploads)?;
    Ok(subkg_with_heads(kg, uploads.user, &seeds))
}

fn subkg_with_heads(
    kg: &KnowledgeGraph,
    owner: UserId,
    heads: &BTreeSet<EntityId>,
) -> SubKnowledgeGraph {
    let triples = heads
        .iter()
        .flat_map(|&h| {
            kg.out_edges(h).iter().map(move |&(relation, tail)| Triple {
                head: h,
                relation,
                tail,
            })
        })
        .collect();
    SubKnowledgeGraph::from_triples(owner, triples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{register_catalog, CategoryId, EntityLayout, PoiId, SegmentId};

    fn kg(n: usize, edges: &[(u32, u32, u32)]) -> KnowledgeGraph {
        KnowledgeGraph::new(
            n,
            4,
            edges.iter().map(|&(h, r, t)| Triple::new(h, r, t)).collect(),
        )
        .unwrap()
    }

    fn set(v: &[u32]) -> BTreeSet<EntityId> {
        v.iter().map(|&e| EntityId(e)).collect()
    }

    /// Transitive closure by boolean matrix powering.
    fn closure_by_matrix_powers(n: usize, edges: &[(u32, u32, u32)], seeds: &[u32]) -> Vec<u32> {
        let mut reach = vec![vec![false; n]; n];
        for i in 0..n {
            reach[i][i] = true;
        }
        for &(h, _, t) in edges {
            reach[h as usize][t as usize] = true;
        }
        for _ in 0..n {
            let prev = reach.clone();
            for i in 0..n {
                for k in 0..n {
                    if prev[i][k] {
                        for j in 0..n {
                            if prev[k][j] {
                                reach[i][j] = true;
                            }
                        }
                    }
                }
            }
        }
        (0..n as u32)
            .filter(|&j| seeds.iter().any(|&s| reach[s as usize][j as usize]))
            .collect()
    }

    #[test]
    fn chain_closure_matches_matrix_powering() {
        // p1=0, e2=1, e3=2
        let edges = [(0, 0, 1), (1, 1, 2)];
        let g = kg(3, &edges);
        let got = reachable_heads(&g, &set(&[0]), None).unwrap();
        let want = closure_by_matrix_powers(3, &edges, &[0]);
        assert_eq!(got, set(&want));
        assert_eq!(got, set(&[0, 1, 2]));
    }

    #[test]
    fn isolated_seed_reaches_itself() {
        let g = kg(3, &[(1, 0, 2)]);
        assert_eq!(reachable_heads(&g, &set(&[0]), None).unwrap(), set(&[0]));
    }

    #[test]
    fn two_cycle_terminates() {
        let g = kg(2, &[(0, 0, 1), (1, 0, 0)]);
        assert_eq!(reachable_heads(&g, &set(&[0]), None).unwrap(), set(&[0, 1]));
    }

    #[test]
    fn hop_limit_truncates() {
        let g = kg(4, &[(0, 0, 1), (1, 0, 2), (2, 0, 3)]);
        assert_eq!(reachable_heads(&g, &set(&[0]), Some(1)).unwrap(), set(&[0, 1]));
        assert_eq!(reachable_heads(&g, &set(&[0]), Some(2)).unwrap(), set(&[0, 1, 2]));
    }

    #[test]
    fn unknown_seed_rejected() {
        let g = kg(2, &[(0, 0, 1)]);
        let err = reachable_heads(&g, &set(&[7]), None).unwrap_err();
        assert!(matches!(err, Error::Unknown { kind: "entity", id: 7 }));
    }

    fn catalog_two_pois() -> PoiCatalog {
        // poi 0 -> entity 0, poi 1 -> entity 3 (p9), category entity 4, segment entity 5
        let layout = EntityLayout {
            poi: vec![EntityId(0), EntityId(3)],
            category: vec![EntityId(4)],
            segment: vec![EntityId(5)],
        };
        register_catalog(
            &[
                (PoiId(0), CategoryId(0), SegmentId(0)),
                (PoiId(1), CategoryId(0), SegmentId(0)),
            ],
            layout,
        )
        .unwrap()
    }

    fn upload(pois: &[u32]) -> DesensitizedHistory {
        DesensitizedHistory {
            user: UserId(0),
            pois: pois.iter().map(|&p| PoiId(p)).collect(),
        }
    }

    #[test]
    fn partition_follows_meta_paths() {
        let cat = catalog_two_pois();
        let g = kg(6, &[(0, 1, 1), (1, 2, 2)]);
        let sub = partition_subkg(&g, &cat, &upload(&[0]), None).unwrap();
        assert_eq!(sub.triples, vec![Triple::new(0, 1, 1), Triple::new(1, 2, 2)]);
        assert_eq!(sub.entities, vec![EntityId(0), EntityId(1), EntityId(2)]);
    }

    #[test]
    fn partition_of_empty_upload_is_empty() {
        let cat = catalog_two_pois();
        let g = kg(6, &[(0, 1, 1)]);
        let sub = partition_subkg(&g, &cat, &upload(&[]), None).unwrap();
        assert!(sub.is_empty());
        assert!(sub.entities.is_empty());
    }

    #[test]
    fn tails_are_not_expanded_backwards() {
        let cat = catalog_two_pois();
        let g = kg(6, &[(0, 1, 1), (3, 1, 1)]);
        let sub = partition_subkg(&g, &cat, &upload(&[0]), None).unwrap();
        assert_eq!(sub.triples, vec![Triple::new(0, 1, 1)]);
    }

    #[test]
    fn one_hop_drops_deeper_triples() {
        let cat = catalog_two_pois();
        let g = kg(6, &[(0, 1, 1), (1, 2, 2)]);
        let sub = partition_one_hop(&g, &cat, &upload(&[0])).unwrap();
        assert_eq!(sub.triples, vec![Triple::new(0, 1, 1)]);
    }

    #[test]
    fn unmapped_poi_rejected() {
        let cat = catalog_two_pois();
        let g = kg(6, &[(0, 1, 1)]);
        assert!(partition_subkg(&g, &cat, &upload(&[5]), None).is_err());
    }

    #[test]
    fn degrees() {
        let g = kg(4, &[(0, 0, 1), (1, 0, 2), (3, 0, 3)]);
        assert_eq!(degree(&g, EntityId(1)).unwrap(), 2);
        assert_eq!(degree(&g, EntityId(0)).unwrap(), 1);
        assert_eq!(degree(&g, EntityId(3)).unwrap(), 1);
        let g2 = kg(3, &[(0, 0, 1)]);
        assert_eq!(degree(&g2, EntityId(2)).unwrap(), 0);
        assert!(degree(&g2, EntityId(9)).is_err());
    }

    #[test]
    fn parallel_relations_count_one_neighbor() {
        let g = kg(2, &[(0, 0, 1), (0, 1, 1), (1, 2, 0)]);
        assert_eq!(degree(&g, EntityId(0)).unwrap(), 1);
    }

    #[test]
    fn duplicate_triples_rejected() {
        let r = KnowledgeGraph::new(2, 1, vec![Triple::new(0, 0, 1), Triple::new(0, 0, 1)]);
        assert!(r.is_err());
        assert!(KnowledgeGraph::new(2, 1, vec![Triple::new(0, 3, 1)]).is_err());
    }
}
