//! `SHG1` field checkpoints. See `docs/checkpoint.md` for the byte layout.

use std::collections::BTreeMap;
use std::path::Path;

use super::hash::HashEncoding;
use super::mlp::{Dense, Mlp};
use super::sky::SkyModel;
use super::{FieldConfig, HashGrid, HashGridConfig, ObjectGrid, SceneField};
use crate::binio::{write_atomic, ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::geometry::{mat3_from_row_major, mat3_to_row_major, Vec3};
use crate::layout::Pose;

pub const FIELD_MAGIC: &[u8; 4] = b"SHG1";
pub const FIELD_VERSION: u32 = 1;

pub(crate) fn write_mlp(w: &mut ByteWriter, mlp: &Mlp) {
    w.usizes(&mlp.widths());
    for layer in &mlp.layers {
        w.f32s(&layer.weight);
        w.f32s(&layer.bias);
    }
}

pub(crate) fn read_mlp(r: &mut ByteReader<'_>, expected_widths: Option<&[usize]>) -> Result<Mlp> {
    let widths = r.usizes()?;
    if widths.len() < 2 {
        return Err(Error::Checkpoint("network needs at least two widths".into()));
    }
    if let Some(exp) = expected_widths {
        if exp != widths.as_slice() {
            return Err(Error::Checkpoint(format!(
                "network widths {widths:?} do not match config {exp:?}"
            )));
        }
    }
    let mut layers = Vec::with_capacity(widths.len() - 1);
    for pair in widths.windows(2) {
        let weight = r.f32s_exact(pair[0] * pair[1], "weights")?;
        let bias = r.f32s_exact(pair[1], "biases")?;
        layers.push(Dense {
            inputs: pair[0],
            outputs: pair[1],
            weight,
            bias,
        });
    }
    Ok(Mlp { layers })
}

fn write_grid(w: &mut ByteWriter, g: &HashGrid) {
    w.f32s(&g.encoding.table);
    write_mlp(w, &g.decoder);
}

fn read_grid(r: &mut ByteReader<'_>, cfg: &HashGridConfig) -> Result<HashGrid> {
    let table = r.f32s_exact(cfg.levels * cfg.table_size * cfg.features_per_level, "hash table")?;
    let decoder = read_mlp(r, Some(&cfg.decoder_widths(4)))?;
    Ok(HashGrid {
        encoding: HashEncoding {
            levels: cfg.levels,
            features: cfg.features_per_level,
            table_size: cfg.table_size,
            resolutions: (0..cfg.levels).map(|l| cfg.resolution(l)).collect(),
            table,
        },
        decoder,
    })
}

pub fn field_to_bytes(field: &SceneField) -> Vec<u8> {
    let mut w = ByteWriter::new();
    w.bytes(FIELD_MAGIC);
    w.u32(FIELD_VERSION);
    let c = &field.config;
    w.len_u32(c.grid.levels);
    w.len_u32(c.grid.base_resolution);
    w.f64(c.grid.per_level_scale);
    w.len_u32(c.grid.table_size);
    w.len_u32(c.grid.features_per_level);
    w.usizes(&c.grid.hidden);
    for s in c.tile_size {
        w.f64(s);
    }
    w.len_u32(c.sky_degree);
    w.usizes(&c.sky_hidden);
    w.u64(c.seed);

    w.len_u32(field.stuff.len());
    for (tile, grid) in &field.stuff {
        tile.iter().for_each(|&i| w.i32(i));
        write_grid(&mut w, grid);
    }
    w.len_u32(field.objects.len());
    for (id, obj) in &field.objects {
        w.u32(*id);
        mat3_to_row_major(&obj.pose.rotation).iter().for_each(|&v| w.f64(v));
        obj.pose.translation.iter().for_each(|&v| w.f64(v));
        obj.pose.size.iter().for_each(|&v| w.f64(v));
        write_grid(&mut w, &obj.grid);
    }
    write_mlp(&mut w, &field.sky.mlp);
    w.buf
}

pub fn field_from_bytes(bytes: &[u8]) -> Result<SceneField> {
    let mut r = ByteReader::new(bytes);
    r.expect_magic(FIELD_MAGIC)?;
    let version = r.u32()?;
    if version != FIELD_VERSION {
        return Err(Error::Checkpoint(format!("unsupported field version {version}")));
    }
    let grid = HashGridConfig {
        levels: r.usize()?,
        base_resolution: r.usize()?,
        per_level_scale: r.f64()?,
        table_size: r.usize()?,
        features_per_level: r.usize()?,
        hidden: r.usizes()?,
    };
    let tile_size = [r.f64()?, r.f64()?, r.f64()?];
    let config = FieldConfig {
        grid,
        tile_size,
        sky_degree: r.usize()?,
        sky_hidden: r.usizes()?,
        seed: r.u64()?,
    };
    config
        .validate()
        .map_err(|e| Error::Checkpoint(format!("stored config is invalid: {e}")))?;

    let mut stuff = BTreeMap::new();
    for _ in 0..r.usize()? {
        let tile = [r.i32()?, r.i32()?, r.i32()?];
        let g = read_grid(&mut r, &config.grid)?;
        if stuff.insert(tile, g).is_some() {
            return Err(Error::Checkpoint(format!("duplicate tile {tile:?}")));
        }
    }
    let mut objects = BTreeMap::new();
    for _ in 0..r.usize()? {
        let id = r.u32()?;
        let mut rot = [0.0; 9];
        for v in rot.iter_mut() {
            *v = r.f64()?;
        }
        let t = Vec3::new(r.f64()?, r.f64()?, r.f64()?);
        let s = Vec3::new(r.f64()?, r.f64()?, r.f64()?);
        // Stored poses were validated when created; keep them verbatim for bit-exactness.
        let pose = Pose {
            rotation: mat3_from_row_major(&rot),
            translation: t,
            size: s,
        };
        let grid = read_grid(&mut r, &config.grid)?;
        if objects.insert(id, ObjectGrid { pose, grid }).is_some() {
            return Err(Error::Checkpoint(format!("duplicate object grid {id}")));
        }
    }
    let mut sky_widths = vec![(config.sky_degree + 1) * (config.sky_degree + 1)];
    sky_widths.extend(&config.sky_hidden);
    sky_widths.push(3);
    let sky = SkyModel {
        degree: config.sky_degree,
        mlp: read_mlp(&mut r, Some(&sky_widths))?,
    };
    r.finish()?;
    Ok(SceneField {
        config,
        stuff,
        objects,
        sky,
    })
}

pub fn save_field(field: &SceneField, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path, &field_to_bytes(field))
}

pub fn load_field(path: impl AsRef<Path>) -> Result<SceneField> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    field_from_bytes(&bytes)
}
