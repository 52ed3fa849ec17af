//! Dataset files, the synthetic generator, and stage artifact formats.
//!
//! A dataset directory holds:
//!
//! | file          | columns                                    |
//! |---------------|--------------------------------------------|
//! | `checkins.tsv`| `user  poi` (extra columns such as timestamps ignored) |
//! | `catalog.tsv` | `poi  category  segment  lat  lon`          |
//! | `kg.tsv`      | `head  relation  tail`                      |
//! | `labels.json` | entity mapping and human-readable labels    |
//!
//! Files carry external integer ids; dense ids are assigned at load time in
//! file order. Lines starting with `#` and blank lines are skipped.
//!
//! The server side only ever needs [`PublicData`] (`catalog.tsv`, `kg.tsv`,
//! `labels.json`); raw check-ins are loaded separately.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{
    register_catalog, CategoryId, CheckInHistory, EntityId, EntityLayout, PoiCatalog, PoiId,
    SegmentId, Triple, UserId,
};
use crate::error::{Error, Result};
use crate::eval::{Split, UserSplit};
use crate::kgstore::{KnowledgeGraph, SubKnowledgeGraph};
use crate::neighbors::NeighborSet;
use crate::privacy::DesensitizedHistory;
use crate::rng;
use crate::scalar::Scalar;

pub const CHECKINS_FILE: &str = "checkins.tsv";
pub const CATALOG_FILE: &str = "catalog.tsv";
pub const KG_FILE: &str = "kg.tsv";
pub const LABELS_FILE: &str = "labels.json";
pub const UPLOADS_FILE: &str = "uploads.tsv";

/// External ↔ dense id dictionary; dense ids follow insertion order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IdMap {
    ext: Vec<u64>,
    dense: HashMap<u64, u32>,
}

impl IdMap {
    pub fn intern(&mut self, ext: u64) -> u32 {
        if let Some(&d) = self.dense.get(&ext) {
            return d;
        }
        let d = self.ext.len() as u32;
        self.ext.push(ext);
        self.dense.insert(ext, d);
        d
    }

    pub fn get(&self, ext: u64) -> Option<u32> {
        self.dense.get(&ext).copied()
    }

    pub fn ext(&self, dense: u32) -> u64 {
        self.ext[dense as usize]
    }

    pub fn len(&self) -> usize {
        self.ext.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ext.is_empty()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IdMaps {
    pub users: IdMap,
    pub pois: IdMap,
    pub categories: IdMap,
    pub segments: IdMap,
    pub entities: IdMap,
    pub relations: IdMap,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub users: usize,
    pub pois: usize,
    pub checkins: usize,
    pub entities: usize,
    pub relations: usize,
    pub triples: usize,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Labels {
    pub schema: u32,
    /// External POI id → external entity id.
    pub poi_entity: BTreeMap<u64, u64>,
    pub category_entity: BTreeMap<u64, u64>,
    pub segment_entity: BTreeMap<u64, u64>,
    /// Registered entities. When non-empty, triples may only use these.
    #[serde(default)]
    pub entities: BTreeMap<u64, String>,
    #[serde(default)]
    pub relations: BTreeMap<u64, String>,
}

/// Server-visible data: catalog and knowledge graph.
#[derive(Debug, Clone)]
pub struct PublicData {
    pub catalog: PoiCatalog,
    pub kg: KnowledgeGraph,
    pub ids: IdMaps,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub public: PublicData,
    /// Indexed by dense user id.
    pub histories: Vec<CheckInHistory>,
    pub stats: DatasetStats,
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Yields `(line number, columns)` for every data line.
fn tsv_rows<'a>(text: &'a str) -> impl Iterator<Item = (usize, Vec<&'a str>)> + 'a {
    text.lines().enumerate().filter_map(|(i, l)| {
        let t = l.trim_end_matches('\r');
        if t.trim().is_empty() || t.starts_with('#') {
            None
        } else {
            Some((i + 1, t.split('\t').collect()))
        }
    })
}

fn int(path: &Path, line: usize, col: &str, what: &str) -> Result<u64> {
    col.trim()
        .parse()
        .map_err(|_| Error::parse(path.display(), line, format!("{what} is not a non-negative integer: {col:?}")))
}

fn columns(path: &Path, line: usize, cols: &[&str], min: usize, max: usize) -> Result<()> {
    if cols.len() < min || cols.len() > max {
        let want = if min == max {
            min.to_string()
        } else {
            format!("{min}..={max}")
        };
        return Err(Error::parse(
            path.display(),
            line,
            format!("expected {want} columns, found {}", cols.len()),
        ));
    }
    Ok(())
}

/// Loads catalog, labels and knowledge graph from a dataset directory.
pub fn load_public(dir: &Path) -> Result<PublicData> {
    let labels_path = dir.join(LABELS_FILE);
    let labels: Labels = serde_json::from_str(&read(&labels_path)?)?;
    let mut ids = IdMaps::default();

    let cpath = dir.join(CATALOG_FILE);
    let mut rows = Vec::new();
    for (line, cols) in tsv_rows(&read(&cpath)?) {
        columns(&cpath, line, &cols, 5, 5)?;
        let p = int(&cpath, line, cols[0], "poi")?;
        let c = int(&cpath, line, cols[1], "category")?;
        let s = int(&cpath, line, cols[2], "segment")?;
        for (v, what) in [(cols[3], "lat"), (cols[4], "lon")] {
            v.trim().parse::<f64>().map_err(|_| {
                Error::parse(cpath.display(), line, format!("{what} is not a number: {v:?}"))
            })?;
        }
        if ids.pois.get(p).is_some() {
            return Err(Error::DuplicatePoi(p));
        }
        rows.push((
            PoiId(ids.pois.intern(p)),
            CategoryId(ids.categories.intern(c)),
            SegmentId(ids.segments.intern(s)),
        ));
    }

    // Entity ids: POIs, then categories, then segments, then kg.tsv order.
    let map_kind = |kind: &'static str, map: &IdMap, table: &BTreeMap<u64, u64>, ents: &mut IdMap| {
        (0..map.len() as u32)
            .map(|d| {
                let ext = map.ext(d);
                let e = table.get(&ext).ok_or(Error::Dangling { kind, id: ext })?;
                Ok(EntityId(ents.intern(*e)))
            })
            .collect::<Result<Vec<_>>>()
    };
    let mut ents = IdMap::default();
    let layout = EntityLayout {
        poi: map_kind("poi entity", &ids.pois, &labels.poi_entity, &mut ents)?,
        category: map_kind("category entity", &ids.categories, &labels.category_entity, &mut ents)?,
        segment: map_kind("segment entity", &ids.segments, &labels.segment_entity, &mut ents)?,
    };
    if ents.len() != ids.pois.len() + ids.categories.len() + ids.segments.len() {
        return Err(Error::InvalidArgument(
            "labels map two catalog items to the same entity".into(),
        ));
    }
    let catalog = register_catalog(&rows, layout)?;

    let kpath = dir.join(KG_FILE);
    let registered: Option<HashSet<u64>> =
        (!labels.entities.is_empty()).then(|| labels.entities.keys().copied().collect());
    if let Some(reg) = &registered {
        for d in 0..ents.len() as u32 {
            if !reg.contains(&ents.ext(d)) {
                return Err(Error::Dangling {
                    kind: "entity",
                    id: ents.ext(d),
                });
            }
        }
    }
    let mut triples = Vec::new();
    let mut seen = HashSet::new();
    for (line, cols) in tsv_rows(&read(&kpath)?) {
        columns(&kpath, line, &cols, 3, 3)?;
        let h = int(&kpath, line, cols[0], "head")?;
        let r = int(&kpath, line, cols[1], "relation")?;
        let t = int(&kpath, line, cols[2], "tail")?;
        if let Some(reg) = &registered {
            for e in [h, t] {
                if !reg.contains(&e) {
                    return Err(Error::parse(kpath.display(), line, format!("unknown entity {e}")));
                }
            }
        }
        let tr = Triple {
            head: EntityId(ents.intern(h)),
            relation: crate::domain::RelationId(ids.relations.intern(r)),
            tail: EntityId(ents.intern(t)),
        };
        if !seen.insert(tr) {
            return Err(Error::parse(kpath.display(), line, "duplicate triple"));
        }
        triples.push(tr);
    }
    if let Some(reg) = &registered {
        for e in reg {
            ents.intern(*e);
        }
    }
    ids.entities = ents;
    let kg = KnowledgeGraph::new(ids.entities.len(), ids.relations.len(), triples)?;
    Ok(PublicData { catalog, kg, ids })
}

/// Loads raw check-ins against public data. Users get dense ids in file order.
pub fn load_checkins(path: &Path, public: &mut PublicData) -> Result<Vec<CheckInHistory>> {
    let mut per_user: Vec<Vec<PoiId>> = Vec::new();
    let mut dangling = BTreeSet::new();
    for (line, cols) in tsv_rows(&read(path)?) {
        columns(path, line, &cols, 2, 3)?;
        let u = int(path, line, cols[0], "user")?;
        let p = int(path, line, cols[1], "poi")?;
        let ud = public.ids.users.intern(u) as usize;
        if per_user.len() <= ud {
            per_user.resize(ud + 1, Vec::new());
        }
        match public.ids.pois.get(p) {
            Some(pd) => per_user[ud].push(PoiId(pd)),
            None => {
                dangling.insert(p);
            }
        }
    }
    if !dangling.is_empty() {
        let list: Vec<String> = dangling.iter().take(20).map(u64::to_string).collect();
        return Err(Error::InvalidArgument(format!(
            "{}: check-ins reference unknown POIs: {}",
            path.display(),
            list.join(", ")
        )));
    }
    if per_user.is_empty() {
        return Err(Error::Empty("no users"));
    }
    per_user
        .into_iter()
        .enumerate()
        .map(|(u, pois)| CheckInHistory::new(UserId(u as u32), pois, &public.catalog))
        .collect()
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let mut public = load_public(dir)?;
    let histories = load_checkins(&dir.join(CHECKINS_FILE), &mut public)?;
    let stats = DatasetStats {
        users: histories.len(),
        pois: public.catalog.n_pois(),
        checkins: histories.iter().map(CheckInHistory::len).sum(),
        entities: public.kg.n_entities(),
        relations: public.kg.n_relations(),
        triples: public.kg.triples().len(),
    };
    Ok(Dataset {
        public,
        histories,
        stats,
    })
}

// ---------------------------------------------------------------------------
// synthetic data

pub const REL_CATEGORY_OF: u32 = 0;
pub const REL_LOCATED_IN: u32 = 1;
pub const REL_BRAND_OF: u32 = 2;
pub const REL_NEARBY: u32 = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_users: usize,
    pub n_pois: usize,
    pub n_categories: usize,
    /// Laid out on a grid `ceil(sqrt(n))` cells wide.
    pub n_segments: usize,
    pub n_relations: usize,
    pub n_triples: usize,
    pub brands_per_category: usize,
    pub tags_per_category: usize,
    pub checkins_per_user: usize,
    pub preference_clusters: usize,
    pub favored_categories: usize,
    /// Probability a check-in comes from a preference pool rather than
    /// uniformly from the catalog.
    pub focus: f64,
    /// Share of pool check-ins drawn from the user's own pool (one personal
    /// category around a personal home segment) instead of the cluster's.
    pub personal_share: f64,
    /// Zipf exponent of POI popularity inside a cluster pool.
    pub popularity_skew: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_users: 200,
            n_pois: 400,
            n_categories: 10,
            n_segments: 16,
            n_relations: 20,
            n_triples: 2400,
            brands_per_category: 2,
            tags_per_category: 6,
            checkins_per_user: 40,
            preference_clusters: 8,
            favored_categories: 2,
            focus: 0.85,
            personal_share: 0.5,
            popularity_skew: 1.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn n_entities(&self) -> usize {
        self.n_pois
            + self.n_categories
            + self.n_segments
            + self.n_categories * (self.brands_per_category + self.tags_per_category)
    }

    fn grid_width(&self) -> usize {
        (self.n_segments as f64).sqrt().ceil().max(1.0) as usize
    }

    fn nearby_pairs(&self) -> Vec<(usize, usize)> {
        let w = self.grid_width();
        let mut out = Vec::new();
        for s in 0..self.n_segments {
            let (r, c) = (s / w, s % w);
            let mut push = |t: usize| {
                if t < self.n_segments {
                    out.push((s, t));
                }
            };
            if c + 1 < w {
                push(s + 1);
            }
            if c > 0 {
                push(s - 1);
            }
            push(s + w);
            if r > 0 {
                push(s - w);
            }
        }
        out
    }

    /// Structural triples every POI and segment receives.
    pub fn mandatory_triples(&self) -> usize {
        let brand = if self.brands_per_category > 0 { 1 } else { 0 };
        let nearby = if self.n_relations > REL_NEARBY as usize {
            self.nearby_pairs().len()
        } else {
            0
        };
        self.n_pois * (2 + brand) + nearby
    }

    pub fn validate(&self) -> Result<()> {
        let pos = [
            ("n_users", self.n_users),
            ("n_pois", self.n_pois),
            ("n_categories", self.n_categories),
            ("n_segments", self.n_segments),
            ("n_triples", self.n_triples),
            ("checkins_per_user", self.checkins_per_user),
            ("preference_clusters", self.preference_clusters),
            ("favored_categories", self.favored_categories),
        ];
        for (name, v) in pos {
            if v == 0 {
                return Err(Error::Infeasible(format!("{name} must be positive")));
            }
        }
        if self.n_relations < 3 {
            return Err(Error::Infeasible("n_relations must be >= 3".into()));
        }
        if self.favored_categories > self.n_categories {
            return Err(Error::Infeasible(
                "favored_categories exceeds n_categories".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.focus)
            || !(0.0..=1.0).contains(&self.personal_share)
            || self.popularity_skew < 0.0
        {
            return Err(Error::Infeasible(
                "focus and personal_share must lie in [0, 1], popularity_skew >= 0".into(),
            ));
        }
        let min = self.mandatory_triples();
        if self.n_triples < min {
            return Err(Error::Infeasible(format!(
                "n_triples {} is below the {min} mandatory structural triples (minimum feasible count {min})",
                self.n_triples
            )));
        }
        let side_rel = self.n_relations.saturating_sub(4);
        let max_side = if side_rel == 0 || self.tags_per_category == 0 {
            0
        } else {
            // each (tag, poi of the same category) pair in both directions, per relation
            2 * side_rel * self.tags_per_category * self.n_pois
        };
        if self.n_triples > min + max_side {
            return Err(Error::Infeasible(format!(
                "n_triples {} exceeds the {} distinct triples this layout can hold",
                self.n_triples,
                min + max_side
            )));
        }
        Ok(())
    }
}

/// In-memory synthetic dataset, with all ids already dense.
#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub spec: SyntheticSpec,
    /// `(poi, category, segment, lat, lon)`
    pub catalog: Vec<(u32, u32, u32, f64, f64)>,
    pub triples: Vec<Triple>,
    pub checkins: Vec<(u32, u32)>,
    pub labels: Labels,
    /// Cluster of each user.
    pub user_cluster: Vec<usize>,
}

/// Entity layout: POIs, categories, segments, brands, tags.
pub fn synthesize(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let seed = spec.seed;
    let (np, nc, ns) = (spec.n_pois, spec.n_categories, spec.n_segments);
    let nb = nc * spec.brands_per_category;
    let cat_ent = |c: usize| (np + c) as u32;
    let seg_ent = |s: usize| (np + nc + s) as u32;
    let brand_ent = |c: usize, i: usize| (np + nc + ns + c * spec.brands_per_category + i) as u32;
    let tag_ent = |c: usize, i: usize| (np + nc + ns + nb + c * spec.tags_per_category + i) as u32;

    let mut r = rng::stream(seed, "synth-catalog", 0);
    let w = spec.grid_width();
    let mut catalog = Vec::with_capacity(np);
    let mut poi_cat = Vec::with_capacity(np);
    let mut poi_seg = Vec::with_capacity(np);
    for p in 0..np {
        // Every category and segment gets at least one POI when possible.
        let c = if p < nc { p } else { r.random_range(0..nc) };
        let s = if p < ns { p } else { r.random_range(0..ns) };
        let lat = 39.8 + 0.01 * ((s / w) as f64 + r.random::<f64>());
        let lon = 116.3 + 0.01 * ((s % w) as f64 + r.random::<f64>());
        catalog.push((p as u32, c as u32, s as u32, lat, lon));
        poi_cat.push(c);
        poi_seg.push(s);
    }
    let mut by_cat: Vec<Vec<usize>> = vec![Vec::new(); nc];
    for p in 0..np {
        by_cat[poi_cat[p]].push(p);
    }

    let mut triples = BTreeSet::new();
    for p in 0..np {
        triples.insert(Triple::new(p as u32, REL_CATEGORY_OF, cat_ent(poi_cat[p])));
        triples.insert(Triple::new(p as u32, REL_LOCATED_IN, seg_ent(poi_seg[p])));
        if spec.brands_per_category > 0 {
            let b = r.random_range(0..spec.brands_per_category);
            triples.insert(Triple::new(p as u32, REL_BRAND_OF, brand_ent(poi_cat[p], b)));
        }
    }
    if spec.n_relations > REL_NEARBY as usize {
        for (a, b) in spec.nearby_pairs() {
            triples.insert(Triple::new(seg_ent(a), REL_NEARBY, seg_ent(b)));
        }
    }
    let side_rel = spec.n_relations.saturating_sub(4) as u32;
    let mut rs = rng::stream(seed, "synth-side", 0);
    while triples.len() < spec.n_triples {
        let rel = 4 + rs.random_range(0..side_rel);
        let p = rs.random_range(0..np);
        let c = poi_cat[p];
        let t = tag_ent(c, rs.random_range(0..spec.tags_per_category));
        let tr = if rs.random_bool(0.5) {
            Triple::new(p as u32, rel, t)
        } else {
            Triple::new(t, rel, p as u32)
        };
        triples.insert(tr);
    }

    let nearby = spec.nearby_pairs();
    let pool_for = |cats: &[usize], home: usize, r: &mut rng::StreamRng| {
        let mut region: BTreeSet<usize> = BTreeSet::from([home]);
        for (a, b) in &nearby {
            if *a == home {
                region.insert(*b);
            }
        }
        let mut pool: Vec<usize> = cats
            .iter()
            .flat_map(|&c| by_cat[c].iter().copied())
            .filter(|p| region.contains(&poi_seg[*p]))
            .collect();
        if pool.is_empty() {
            pool = cats.iter().flat_map(|&c| by_cat[c].iter().copied()).collect();
        }
        pool.sort_unstable();
        pool.shuffle(r);
        let weights: Vec<f64> = (0..pool.len())
            .map(|i| 1.0 / ((i + 1) as f64).powf(spec.popularity_skew))
            .collect();
        (pool, weights)
    };
    let draw = |(pool, weights): &(Vec<usize>, Vec<f64>), r: &mut rng::StreamRng| {
        let total: f64 = weights.iter().sum();
        let mut x = r.random::<f64>() * total;
        for (i, wt) in weights.iter().enumerate() {
            if x < *wt {
                return pool[i];
            }
            x -= wt;
        }
        pool[pool.len() - 1]
    };

    // preference clusters: favored categories, home segment, popularity order
    let mut rc = rng::stream(seed, "synth-clusters", 0);
    let mut pools = Vec::with_capacity(spec.preference_clusters);
    for _ in 0..spec.preference_clusters {
        let mut cats: Vec<usize> = (0..nc).collect();
        cats.shuffle(&mut rc);
        cats.truncate(spec.favored_categories);
        let home = rc.random_range(0..ns);
        pools.push(pool_for(&cats, home, &mut rc));
    }

    let mut checkins = Vec::with_capacity(spec.n_users * spec.checkins_per_user);
    let mut user_cluster = Vec::with_capacity(spec.n_users);
    for u in 0..spec.n_users {
        let mut ru = rng::stream(seed, "synth-user", u as u64);
        let k = ru.random_range(0..spec.preference_clusters);
        user_cluster.push(k);
        let own_cat = ru.random_range(0..nc);
        let own_home = ru.random_range(0..ns);
        let own = pool_for(&[own_cat], own_home, &mut ru);
        for _ in 0..spec.checkins_per_user {
            let p = if ru.random_bool(spec.focus) {
                if ru.random_bool(spec.personal_share) {
                    draw(&own, &mut ru)
                } else {
                    draw(&pools[k], &mut ru)
                }
            } else {
                ru.random_range(0..np)
            };
            checkins.push((u as u32, p as u32));
        }
    }

    let mut labels = Labels {
        schema: 1,
        ..Default::default()
    };
    for p in 0..np {
        labels.poi_entity.insert(p as u64, p as u64);
        labels.entities.insert(p as u64, format!("poi:{p}"));
    }
    for c in 0..nc {
        labels.category_entity.insert(c as u64, cat_ent(c) as u64);
        labels.entities.insert(cat_ent(c) as u64, format!("category:{c}"));
        for i in 0..spec.brands_per_category {
            labels.entities.insert(brand_ent(c, i) as u64, format!("brand:{c}.{i}"));
        }
        for i in 0..spec.tags_per_category {
            labels.entities.insert(tag_ent(c, i) as u64, format!("tag:{c}.{i}"));
        }
    }
    for s in 0..ns {
        labels.segment_entity.insert(s as u64, seg_ent(s) as u64);
        labels.entities.insert(seg_ent(s) as u64, format!("segment:{s}"));
    }
    for rel in 0..spec.n_relations as u64 {
        let name = match rel as u32 {
            REL_CATEGORY_OF => "category_of".to_string(),
            REL_LOCATED_IN => "located_in".to_string(),
            REL_BRAND_OF => "brand_of".to_string(),
            REL_NEARBY => "nearby".to_string(),
            r => format!("side_{r}"),
        };
        labels.relations.insert(rel, name);
    }

    Ok(SyntheticData {
        spec: spec.clone(),
        catalog,
        triples: triples.into_iter().collect(),
        checkins,
        labels,
        user_cluster,
    })
}

/// Writes a synthetic dataset directory. Same spec, same bytes.
pub fn generate_synthetic(spec: &SyntheticSpec, out: &Path) -> Result<SyntheticData> {
    let data = synthesize(spec)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut s = String::new();
    for (u, p) in &data.checkins {
        writeln!(s, "{u}\t{p}").unwrap();
    }
    write(&out.join(CHECKINS_FILE), &s)?;
    s.clear();
    for (p, c, seg, lat, lon) in &data.catalog {
        writeln!(s, "{p}\t{c}\t{seg}\t{lat:.6}\t{lon:.6}").unwrap();
    }
    write(&out.join(CATALOG_FILE), &s)?;
    s.clear();
    for t in &data.triples {
        writeln!(s, "{}\t{}\t{}", t.head, t.relation, t.tail).unwrap();
    }
    write(&out.join(KG_FILE), &s)?;
    write(
        &out.join(LABELS_FILE),
        &(serde_json::to_string_pretty(&data.labels)? + "\n"),
    )?;
    Ok(data)
}

// ---------------------------------------------------------------------------
// stage artifacts (external ids on disk)

fn ext_user(ids: &IdMaps, u: UserId) -> u64 {
    ids.users.ext(u.0)
}

fn user_of(ids: &IdMaps, path: &Path, line: usize, ext: u64) -> Result<UserId> {
    ids.users
        .get(ext)
        .map(UserId)
        .ok_or_else(|| Error::parse(path.display(), line, format!("unknown user {ext}")))
}

fn poi_of(ids: &IdMaps, path: &Path, line: usize, ext: u64) -> Result<PoiId> {
    ids.pois
        .get(ext)
        .map(PoiId)
        .ok_or_else(|| Error::parse(path.display(), line, format!("unknown poi {ext}")))
}

pub fn format_history(history: &CheckInHistory, ids: &IdMaps) -> String {
    let mut s = String::new();
    let u = ext_user(ids, history.user());
    for p in history.pois() {
        writeln!(s, "{u}\t{}", ids.pois.ext(p.0)).unwrap();
    }
    s
}

/// Server-bound upload file: one `user poi` row per desensitized check-in.
pub fn format_uploads(uploads: &[DesensitizedHistory], ids: &IdMaps) -> String {
    let mut s = String::new();
    for up in uploads {
        let u = ext_user(ids, up.user);
        for p in &up.pois {
            writeln!(s, "{u}\t{}", ids.pois.ext(p.0)).unwrap();
        }
    }
    s
}

pub fn write_uploads(dir: &Path, uploads: &[DesensitizedHistory], ids: &IdMaps) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write(&dir.join(UPLOADS_FILE), &format_uploads(uploads, ids))
}

/// Reads uploads; users must be known to `ids` (they are interned on first
/// sight when `intern_users` is set, which is how the server learns them).
pub fn read_uploads(dir: &Path, ids: &mut IdMaps, intern_users: bool) -> Result<Vec<DesensitizedHistory>> {
    let path = dir.join(UPLOADS_FILE);
    let mut by_user: BTreeMap<UserId, Vec<PoiId>> = BTreeMap::new();
    for (line, cols) in tsv_rows(&read(&path)?) {
        columns(&path, line, &cols, 2, 2)?;
        let u = int(&path, line, cols[0], "user")?;
        let p = int(&path, line, cols[1], "poi")?;
        let user = if intern_users {
            UserId(ids.users.intern(u))
        } else {
            user_of(ids, &path, line, u)?
        };
        by_user.entry(user).or_default().push(poi_of(ids, &path, line, p)?);
    }
    Ok(by_user
        .into_iter()
        .map(|(user, pois)| DesensitizedHistory { user, pois })
        .collect())
}

pub fn format_subkg(sub: &SubKnowledgeGraph, ids: &IdMaps) -> String {
    let mut s = format!("# owner={}\n", ext_user(ids, sub.owner));
    for t in &sub.triples {
        writeln!(
            s,
            "{}\t{}\t{}",
            ids.entities.ext(t.head.0),
            ids.relations.ext(t.relation.0),
            ids.entities.ext(t.tail.0)
        )
        .unwrap();
    }
    s
}

pub fn write_subkgs(dir: &Path, subs: &[SubKnowledgeGraph], ids: &IdMaps) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for sub in subs {
        write(
            &dir.join(format!("{}.tsv", ext_user(ids, sub.owner))),
            &format_subkg(sub, ids),
        )?;
    }
    Ok(())
}

pub fn parse_subkg(path: &Path, text: &str, ids: &IdMaps) -> Result<SubKnowledgeGraph> {
    let first = text.lines().next().unwrap_or_default();
    let owner_ext = first
        .strip_prefix("# owner=")
        .ok_or_else(|| Error::parse(path.display(), 1, "missing '# owner=<user>' header"))?;
    let owner_ext = int(path, 1, owner_ext, "owner")?;
    let owner = user_of(ids, path, 1, owner_ext)?;
    let mut triples = Vec::new();
    for (line, cols) in tsv_rows(text) {
        columns(path, line, &cols, 3, 3)?;
        let ent = |c: &str, what| -> Result<EntityId> {
            let v = int(path, line, c, what)?;
            ids.entities
                .get(v)
                .map(EntityId)
                .ok_or_else(|| Error::parse(path.display(), line, format!("unknown entity {v}")))
        };
        let rel = int(path, line, cols[1], "relation")?;
        let relation = ids
            .relations
            .get(rel)
            .map(crate::domain::RelationId)
            .ok_or_else(|| Error::parse(path.display(), line, format!("unknown relation {rel}")))?;
        triples.push(Triple {
            head: ent(cols[0], "head")?,
            relation,
            tail: ent(cols[2], "tail")?,
        });
    }
    Ok(SubKnowledgeGraph::from_triples(owner, triples))
}

/// Reads every `<user>.tsv` in `dir`, ordered by owner.
pub fn read_subkgs(dir: &Path, ids: &IdMaps) -> Result<BTreeMap<UserId, SubKnowledgeGraph>> {
    let mut out = BTreeMap::new();
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|x| x == "tsv") {
            let sub = parse_subkg(&path, &read(&path)?, ids)?;
            out.insert(sub.owner, sub);
        }
    }
    Ok(out)
}

pub fn format_split(split: &Split, ids: &IdMaps) -> String {
    let mut s = String::new();
    for (u, us) in split {
        let u = ext_user(ids, *u);
        for (name, list) in [("train", &us.train), ("validation", &us.validation), ("test", &us.test)] {
            for p in list {
                writeln!(s, "{u}\t{name}\t{}", ids.pois.ext(p.0)).unwrap();
            }
        }
    }
    s
}

pub fn read_split(path: &Path, ids: &IdMaps) -> Result<Split> {
    let mut split: Split = BTreeMap::new();
    for (line, cols) in tsv_rows(&read(path)?) {
        columns(path, line, &cols, 3, 3)?;
        let u = user_of(ids, path, line, int(path, line, cols[0], "user")?)?;
        let p = poi_of(ids, path, line, int(path, line, cols[2], "poi")?)?;
        let e = split.entry(u).or_default();
        match cols[1] {
            "train" => e.train.push(p),
            "validation" => e.validation.push(p),
            "test" => e.test.push(p),
            other => {
                return Err(Error::parse(path.display(), line, format!("unknown split {other:?}")))
            }
        }
    }
    Ok(split)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NeighborEntry {
    geo: Vec<u64>,
    sem: Vec<u64>,
    weights: BTreeMap<u64, f64>,
}

pub fn format_neighbors<T: Scalar>(sets: &BTreeMap<UserId, NeighborSet<T>>, ids: &IdMaps) -> Result<String> {
    let ext = |u: &UserId| ext_user(ids, *u);
    let out: BTreeMap<u64, NeighborEntry> = sets
        .values()
        .map(|n| {
            (
                ext(&n.owner),
                NeighborEntry {
                    geo: n.geo.iter().map(ext).collect(),
                    sem: n.sem.iter().map(ext).collect(),
                    weights: n.weights.iter().map(|(u, w)| (ext(u), w.as_f64())).collect(),
                },
            )
        })
        .collect();
    Ok(serde_json::to_string_pretty(&out)? + "\n")
}

pub fn read_neighbors<T: Scalar>(path: &Path, ids: &IdMaps) -> Result<BTreeMap<UserId, NeighborSet<T>>> {
    let raw: BTreeMap<u64, NeighborEntry> = serde_json::from_str(&read(path)?)?;
    let user = |e: u64| {
        ids.users.get(e).map(UserId).ok_or(Error::Unknown {
            kind: "user",
            id: e,
        })
    };
    raw.into_iter()
        .map(|(owner, n)| {
            let owner = user(owner)?;
            Ok((
                owner,
                NeighborSet {
                    owner,
                    geo: n.geo.into_iter().map(user).collect::<Result<_>>()?,
                    sem: n.sem.into_iter().map(user).collect::<Result<_>>()?,
                    weights: n
                        .weights
                        .into_iter()
                        .map(|(u, w)| Ok((user(u)?, T::of(w))))
                        .collect::<Result<_>>()?,
                },
            ))
        })
        .collect()
}
