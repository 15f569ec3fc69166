//! Scalable hash-grid scene field: lattice-tiled stuff grids spawned on
//! demand, one posed grid per layout object, and a direction-only sky.

pub mod checkpoint;
pub mod hash;
pub mod mlp;
pub mod sky;

use std::collections::BTreeMap;
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Ray, Vec3};
use crate::layout::{resolve_owner, InstanceId, Pose, SceneLayout};

pub use hash::{HashEncoding, HashGridConfig};
pub use mlp::{sigmoid, softplus, Mlp, MlpCache, MlpGrad};
pub use sky::SkyModel;

/// Tolerance on canonical coordinates before a query counts as outside its grid.
const CANONICAL_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FieldConfig {
    pub grid: HashGridConfig,
    /// Edge lengths of the stuff lattice cells, meters.
    pub tile_size: [f64; 3],
    pub sky_degree: usize,
    pub sky_hidden: Vec<usize>,
    pub seed: u64,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self {
            grid: HashGridConfig::default(),
            tile_size: [64.0, 64.0, 32.0],
            sky_degree: 4,
            sky_hidden: vec![32],
            seed: 0,
        }
    }
}

impl FieldConfig {
    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        if !self.tile_size.iter().all(|&s| s.is_finite() && s > 0.0) {
            return Err(Error::validation("tile sizes must be positive"));
        }
        if self.sky_degree > sky::MAX_SH_DEGREE {
            return Err(Error::validation("sky degree must be at most 4"));
        }
        Ok(())
    }

    pub fn tile_of(&self, p: &Vec3) -> [i32; 3] {
        [0, 1, 2].map(|a| (p[a] / self.tile_size[a]).floor() as i32)
    }

    pub fn tile_min(&self, tile: [i32; 3]) -> Vec3 {
        Vec3::new(
            tile[0] as f64 * self.tile_size[0],
            tile[1] as f64 * self.tile_size[1],
            tile[2] as f64 * self.tile_size[2],
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum GridKey {
    Stuff([i32; 3]),
    Object(InstanceId),
}

impl fmt::Display for GridKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GridKey::Stuff([i, j, k]) => write!(f, "stuff({i},{j},{k})"),
            GridKey::Object(id) => write!(f, "object({id})"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Assignment {
    Object(InstanceId),
    Stuff([i32; 3]),
    SpawnRequired(GridKey),
}

/// One hash encoding plus its density/color decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct HashGrid {
    pub encoding: HashEncoding,
    pub decoder: Mlp,
}

/// Decoder output of one sample before activations, kept for the backward pass.
#[derive(Debug, Clone, Default)]
pub struct SampleCache {
    pub canonical: [f64; 3],
    pub raw: [f64; 4],
    pub mlp: MlpCache,
}

impl HashGrid {
    pub fn new(cfg: &HashGridConfig, rng: &mut ChaCha8Rng) -> Self {
        let encoding = HashEncoding::new(cfg, rng);
        let decoder = Mlp::new(&cfg.decoder_widths(4), rng);
        Self { encoding, decoder }
    }

    /// `(σ, rgb)` at canonical `p ∈ [0,1]³`.
    pub fn query(&self, p: &[f64; 3]) -> (f64, [f64; 3]) {
        let raw = self.decoder.forward(&self.encoding.encode(p));
        activate(&raw)
    }

    pub fn query_cached(&self, p: &[f64; 3], cache: &mut SampleCache) -> (f64, [f64; 3]) {
        let raw = self.decoder.forward_cached(&self.encoding.encode(p), &mut cache.mlp);
        cache.canonical = *p;
        cache.raw = [raw[0], raw[1], raw[2], raw[3]];
        activate(&raw)
    }

    /// Accumulates parameter gradients from `∂L/∂σ` and `∂L/∂rgb`.
    pub fn backward(&self, cache: &SampleCache, dsigma: f64, drgb: &[f64; 3], grad: &mut GridGrad) {
        let mut dout = [dsigma * sigmoid(cache.raw[0]), 0.0, 0.0, 0.0];
        for i in 0..3 {
            let s = sigmoid(cache.raw[i + 1]);
            dout[i + 1] = drgb[i] * s * (1.0 - s);
        }
        let dfeat = self.decoder.backward(&cache.mlp, &dout, &mut grad.decoder);
        self.encoding.backward(&cache.canonical, &dfeat, &mut grad.table);
    }

    pub fn zero_grad(&self) -> GridGrad {
        GridGrad {
            table: vec![0.0; self.encoding.table.len()],
            decoder: self.decoder.zero_grad(),
        }
    }
}

fn activate(raw: &[f64]) -> (f64, [f64; 3]) {
    (softplus(raw[0]), [sigmoid(raw[1]), sigmoid(raw[2]), sigmoid(raw[3])])
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectGrid {
    pub pose: Pose,
    pub grid: HashGrid,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridGrad {
    pub table: Vec<f64>,
    pub decoder: MlpGrad,
}

impl GridGrad {
    pub fn add_assign(&mut self, other: &GridGrad) {
        self.table.iter_mut().zip(&other.table).for_each(|(a, b)| *a += b);
        self.decoder.add_assign(&other.decoder);
    }

    pub fn squared_norm(&self) -> f64 {
        self.table.iter().map(|g| g * g).sum::<f64>() + self.decoder.squared_norm()
    }

    pub fn scale(&mut self, s: f64) {
        self.table.iter_mut().for_each(|g| *g *= s);
        self.decoder.scale(s);
    }
}

/// Gradients for every field parameter touched by a backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldGrad {
    pub grids: BTreeMap<GridKey, GridGrad>,
    pub sky: MlpGrad,
}

impl FieldGrad {
    pub fn add_assign(&mut self, other: &FieldGrad) {
        for (k, g) in &other.grids {
            match self.grids.get_mut(k) {
                Some(mine) => mine.add_assign(g),
                None => {
                    self.grids.insert(*k, g.clone());
                }
            }
        }
        self.sky.add_assign(&other.sky);
    }

    pub fn squared_norm(&self) -> f64 {
        self.grids.values().map(GridGrad::squared_norm).sum::<f64>() + self.sky.squared_norm()
    }

    pub fn scale(&mut self, s: f64) {
        self.grids.values_mut().for_each(|g| g.scale(s));
        self.sky.scale(s);
    }

    /// Rescales so the global L2 norm is at most `max_norm`; returns the pre-clip norm.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.squared_norm().sqrt();
        if norm > max_norm && norm > 0.0 {
            self.scale(max_norm / norm);
        }
        norm
    }

    pub fn all_finite(&self) -> bool {
        self.squared_norm().is_finite()
    }
}

/// A field sample: a point on a ray plus the grid and layout instance owning it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplePoint<'a> {
    pub ray: &'a Ray,
    pub t: f64,
    pub grid: GridKey,
    pub instance: Option<InstanceId>,
}

/// Anything the volume renderer can integrate.
pub trait RadianceField: Sync {
    fn sample(&self, s: &SamplePoint<'_>) -> Result<(f64, [f64; 3])>;
    fn sky_color(&self, direction: &Vec3) -> Result<[f64; 3]>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneField {
    pub config: FieldConfig,
    pub stuff: BTreeMap<[i32; 3], HashGrid>,
    pub objects: BTreeMap<InstanceId, ObjectGrid>,
    pub sky: SkyModel,
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

impl SceneField {
    /// Empty field with object grids for every object instance of `layout`.
    pub fn new(config: FieldConfig, layout: &SceneLayout) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix(config.seed ^ 0x5EED_5C1E));
        let sky = SkyModel::new(config.sky_degree, &config.sky_hidden, &mut rng);
        let mut field = Self {
            config,
            stuff: BTreeMap::new(),
            objects: BTreeMap::new(),
            sky,
        };
        field.sync_objects(layout)?;
        Ok(field)
    }

    /// Initialisation stream for one grid; independent of spawn order.
    fn grid_rng(&self, key: GridKey) -> ChaCha8Rng {
        let k = match key {
            GridKey::Stuff([i, j, k]) => {
                splitmix(splitmix(splitmix(1 ^ i as u32 as u64) ^ j as u32 as u64) ^ k as u32 as u64)
            }
            GridKey::Object(id) => splitmix(splitmix(2) ^ id as u64),
        };
        ChaCha8Rng::seed_from_u64(splitmix(self.config.seed) ^ k)
    }

    /// Creates missing object grids, drops grids of removed objects and copies poses.
    pub fn sync_objects(&mut self, layout: &SceneLayout) -> Result<()> {
        self.objects.retain(|id, _| layout.instance(*id).is_some_and(|i| i.is_object));
        for inst in layout.objects() {
            match self.objects.get_mut(&inst.id) {
                Some(obj) => obj.pose = inst.pose.clone(),
                None => {
                    let mut rng = self.grid_rng(GridKey::Object(inst.id));
                    let grid = HashGrid::new(&self.config.grid, &mut rng);
                    self.objects.insert(
                        inst.id,
                        ObjectGrid {
                            pose: inst.pose.clone(),
                            grid,
                        },
                    );
                }
            }
        }
        Ok(())
    }

    pub fn has_grid(&self, key: GridKey) -> bool {
        match key {
            GridKey::Stuff(t) => self.stuff.contains_key(&t),
            GridKey::Object(id) => self.objects.contains_key(&id),
        }
    }

    pub fn grid(&self, key: GridKey) -> Option<&HashGrid> {
        match key {
            GridKey::Stuff(t) => self.stuff.get(&t),
            GridKey::Object(id) => self.objects.get(&id).map(|o| &o.grid),
        }
    }

    pub fn grid_mut(&mut self, key: GridKey) -> Option<&mut HashGrid> {
        match key {
            GridKey::Stuff(t) => self.stuff.get_mut(&t),
            GridKey::Object(id) => self.objects.get_mut(&id).map(|o| &mut o.grid),
        }
    }

    pub fn grid_keys(&self) -> Vec<GridKey> {
        self.stuff
            .keys()
            .map(|&t| GridKey::Stuff(t))
            .chain(self.objects.keys().map(|&id| GridKey::Object(id)))
            .collect()
    }

    pub fn spawn_stuff_grid(&mut self, tile: [i32; 3]) -> Result<&HashGrid> {
        let key = GridKey::Stuff(tile);
        if self.stuff.contains_key(&tile) {
            return Err(Error::GridExists(key.to_string()));
        }
        let mut rng = self.grid_rng(key);
        let grid = HashGrid::new(&self.config.grid, &mut rng);
        Ok(self.stuff.entry(tile).or_insert(grid))
    }

    /// Spawns every stuff grid in `keys` that does not exist yet.
    pub fn spawn_missing(&mut self, keys: impl IntoIterator<Item = GridKey>) -> Result<Vec<GridKey>> {
        let mut spawned = Vec::new();
        for key in keys {
            match key {
                GridKey::Stuff(tile) if !self.stuff.contains_key(&tile) => {
                    self.spawn_stuff_grid(tile)?;
                    spawned.push(key);
                }
                GridKey::Object(id) if !self.objects.contains_key(&id) => {
                    return Err(Error::MissingGrid(format!("{key} (object grids follow the layout)")));
                }
                _ => {}
            }
        }
        Ok(spawned)
    }

    /// Which grid owns world point `p`: containing objects first (nearest
    /// center, then lowest id), otherwise the lattice tile.
    pub fn assign_point(&self, layout: &SceneLayout, p: &Vec3) -> Assignment {
        if let Some(obj) = resolve_owner(layout.objects().filter(|i| i.contains(p)), p) {
            return if self.objects.contains_key(&obj.id) {
                Assignment::Object(obj.id)
            } else {
                Assignment::SpawnRequired(GridKey::Object(obj.id))
            };
        }
        let tile = self.config.tile_of(p);
        if self.stuff.contains_key(&tile) {
            Assignment::Stuff(tile)
        } else {
            Assignment::SpawnRequired(GridKey::Stuff(tile))
        }
    }

    /// Canonical `[0,1]³` coordinates of the ray point at `t` inside grid `key`.
    /// Object grids work from the ray origin's offset to the object center so
    /// that moving camera and object together leaves the result unchanged.
    pub fn canonical(&self, key: GridKey, ray: &Ray, t: f64) -> Result<[f64; 3]> {
        let c = match key {
            GridKey::Stuff(tile) => {
                let p = ray.at(t);
                let rel = p - self.config.tile_min(tile);
                [0, 1, 2].map(|a| rel[a] / self.config.tile_size[a])
            }
            GridKey::Object(id) => {
                let obj = self.objects.get(&id).ok_or_else(|| Error::MissingGrid(key.to_string()))?;
                let offset = (ray.origin - obj.pose.translation) + ray.direction * t;
                let c = obj.pose.offset_to_canonical(&offset);
                [c.x + 0.5, c.y + 0.5, c.z + 0.5]
            }
        };
        if c.iter().any(|&v| !(-CANONICAL_SLACK..=1.0 + CANONICAL_SLACK).contains(&v)) {
            return Err(Error::Contract(format!(
                "point at t={t} lies outside {key} (canonical {c:?})"
            )));
        }
        Ok(c.map(|v| v.clamp(0.0, 1.0)))
    }

    /// Density and color at a world point under a given assignment.
    pub fn query(&self, p: &Vec3, assignment: Assignment) -> Result<(f64, [f64; 3])> {
        let key = match assignment {
            Assignment::Object(id) => GridKey::Object(id),
            Assignment::Stuff(t) => GridKey::Stuff(t),
            Assignment::SpawnRequired(k) => return Err(Error::MissingGrid(k.to_string())),
        };
        let ray = Ray::new(*p, Vec3::zeros());
        let c = self.canonical(key, &ray, 0.0)?;
        let grid = self.grid(key).ok_or_else(|| Error::MissingGrid(key.to_string()))?;
        Ok(grid.query(&c))
    }

    pub fn query_cached(&self, s: &SamplePoint<'_>, cache: &mut SampleCache) -> Result<(f64, [f64; 3])> {
        let c = self.canonical(s.grid, s.ray, s.t)?;
        let grid = self.grid(s.grid).ok_or_else(|| Error::MissingGrid(s.grid.to_string()))?;
        Ok(grid.query_cached(&c, cache))
    }

    pub fn zero_grad(&self) -> FieldGrad {
        FieldGrad {
            grids: BTreeMap::new(),
            sky: self.sky.mlp.zero_grad(),
        }
    }

    /// Accumulates gradients of one sample into `grad`.
    pub fn sample_backward(&self, s: &SamplePoint<'_>, cache: &SampleCache, dsigma: f64, drgb: &[f64; 3], grad: &mut FieldGrad) -> Result<()> {
        let grid = self.grid(s.grid).ok_or_else(|| Error::MissingGrid(s.grid.to_string()))?;
        let g = grad.grids.entry(s.grid).or_insert_with(|| grid.zero_grad());
        grid.backward(cache, dsigma, drgb, g);
        Ok(())
    }

    pub fn sky_backward(&self, d: &Vec3, drgb: &[f64; 3], grad: &mut FieldGrad) -> Result<()> {
        self.sky.backward(d, drgb, &mut grad.sky)
    }

    pub fn param_count(&self) -> usize {
        let grid = |g: &HashGrid| g.encoding.table.len() + g.decoder.param_count();
        self.stuff.values().map(grid).sum::<usize>()
            + self.objects.values().map(|o| grid(&o.grid)).sum::<usize>()
            + self.sky.mlp.param_count()
    }
}

impl RadianceField for SceneField {
    fn sample(&self, s: &SamplePoint<'_>) -> Result<(f64, [f64; 3])> {
        let c = self.canonical(s.grid, s.ray, s.t)?;
        let grid = self.grid(s.grid).ok_or_else(|| Error::MissingGrid(s.grid.to_string()))?;
        Ok(grid.query(&c))
    }

    fn sky_color(&self, direction: &Vec3) -> Result<[f64; 3]> {
        self.sky.color(direction)
    }
}
