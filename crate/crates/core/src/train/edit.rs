//! Instance-level and style edits.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::painter::style_by_name;
use super::scene::{optimize_scene, Guidance, RunContext};
use crate::error::{Error, Result};
use crate::field::SceneField;
use crate::geometry::{yaw, Vec3};
use crate::layout::{InstanceId, InstanceRecord, RigidDelta, SceneLayout};

/// One declarative edit from an edit script.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case", deny_unknown_fields)]
pub enum SceneEdit {
    /// Yaw about the instance center, then a world translation.
    Transform {
        instance: InstanceId,
        #[serde(default)]
        translation: [f64; 3],
        #[serde(default)]
        yaw_deg: f64,
    },
    Insert { instance: InstanceRecord },
    Remove { instance: InstanceId },
    Style { style: String },
}

impl SceneEdit {
    pub fn delta(translation: [f64; 3], yaw_deg: f64) -> RigidDelta {
        RigidDelta { rotation: yaw(yaw_deg.to_radians()), translation: Vec3::from(translation) }
    }
}

pub fn parse_edit_script(text: &str) -> Result<Vec<SceneEdit>> {
    serde_json::from_str(text).map_err(|e| Error::Parse { what: "edit script".into(), message: e.to_string() })
}

pub fn load_edit_script(path: impl AsRef<Path>) -> Result<Vec<SceneEdit>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_edit_script(&text)
}

/// Applies an edit to the layout and field without any training. Returns the
/// new layout, the new style token if the edit changes it, and whether the
/// scene needs a fine-tune (everything except rigid object moves).
pub fn apply_edit(field: &mut SceneField, layout: &SceneLayout, edit: &SceneEdit) -> Result<(SceneLayout, Option<usize>, bool)> {
    let (next, style, retrain) = match edit {
        SceneEdit::Transform { instance, translation, yaw_deg } => {
            let is_object = layout.instance(*instance).ok_or(Error::UnknownInstance(*instance))?.is_object;
            let next = layout.transform_instance(*instance, &SceneEdit::delta(*translation, *yaw_deg))?;
            (next, None, !is_object)
        }
        SceneEdit::Insert { instance } => (layout.insert_instance(instance.to_instance()?)?, None, true),
        SceneEdit::Remove { instance } => (layout.remove_instance(*instance)?, None, true),
        SceneEdit::Style { style } => {
            let token = style_by_name(style)
                .or_else(|| style.parse().ok())
                .ok_or_else(|| Error::validation(format!("unknown style {style:?}")))?;
            (layout.clone(), Some(token), true)
        }
    };
    // Object grids follow their instances; stuff grids stay where they are.
    field.sync_objects(&next)?;
    Ok((next, style, retrain))
}

/// Applies `edit` and, unless it is a rigid object move, runs `optimize_scene`
/// for `edit_fraction` of its budget under the new layout and style.
pub fn edit_scene(
    field: &mut SceneField,
    layout: &SceneLayout,
    edit: &SceneEdit,
    guidance: &mut Guidance,
    ctx: &mut RunContext,
) -> Result<SceneLayout> {
    let (next, style, retrain) = apply_edit(field, layout, edit)?;
    if let Some(s) = style {
        if s >= guidance.base.config.styles {
            return Err(Error::validation(format!("style {s} outside vocabulary of {}", guidance.base.config.styles)));
        }
        ctx.config.style = s;
    }
    if retrain {
        let mut saved = ctx.config.clone();
        let frac = saved.edit_fraction;
        let scaled = |n: usize| (n as f64 * frac).ceil() as usize;
        ctx.config.coarse_steps = scaled(saved.coarse_steps);
        ctx.config.fine_steps = scaled(saved.fine_steps);
        let result = optimize_scene(&next, field, guidance, ctx);
        saved.style = ctx.config.style;
        ctx.config = saved;
        result?;
    }
    Ok(next)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn edit_script_parses() {
        let edits = parse_edit_script(
            r#"[{"op": "transform", "instance": 3, "translation": [1, 0, 0]},
                {"op": "remove", "instance": 2},
                {"op": "style", "style": "night"},
                {"op": "insert", "instance": {"id": 9, "class": 5, "shape": "ellipsoid",
                  "rotation": [1,0,0,0,1,0,0,0,1], "translation": [5, 5, 1], "size": [2, 2, 2], "object": false}}]"#,
        )
        .unwrap();
        assert_eq!(edits.len(), 4);
        assert_eq!(edits[0], SceneEdit::Transform { instance: 3, translation: [1.0, 0.0, 0.0], yaw_deg: 0.0 });
        assert!(parse_edit_script(r#"[{"op": "transform", "instance": 3, "scale": 2}]"#).is_err());
        assert!(parse_edit_script(r#"[{"op": "explode"}]"#).is_err());
    }
}
