//! Scripted phase controller used as the demonstration teacher.
//!
//! approach-above → descend → close (while starting to lift) → lift →
//! transport → lower → release (while backing off upward).

use super::{placement_target, Action, Instruction, SceneState, A_MAX, UNIT, Z_RELEASE, Z_TRAVEL};
use crate::error::{Error, Result};

/// Wider than a 64-bin action quantum so binned commands can settle.
const ALIGN_EPS: f64 = UNIT / 8.0;

fn toward(from: f64, to: f64) -> f64 {
    (to - from).clamp(-A_MAX, A_MAX)
}

fn aligned(dx: f64, dy: f64) -> bool {
    dx.abs() <= ALIGN_EPS && dy.abs() <= ALIGN_EPS
}

fn act(dx: f64, dy: f64, dz: f64, grip: f64) -> Action {
    Action {
        dpos: [dx, dy, dz],
        drot: [0.0; 3],
        grip,
    }
}

pub fn scripted_expert(state: &SceneState, ins: &Instruction) -> Result<Action> {
    let missing = || Error::Instruction(ins.to_string());
    let pick = state.find(ins.pick).ok_or_else(missing)?;
    let dest = placement_target(state, ins).ok_or_else(missing)?;
    let g = state.gripper;
    let vertical = |target_z: f64| (target_z - g.z).clamp(-UNIT, UNIT);

    if state.held() == Some(pick) {
        let (dx, dy) = (dest.0 - g.x, dest.1 - g.y);
        if !aligned(dx, dy) {
            if g.z < Z_TRAVEL - ALIGN_EPS {
                return Ok(act(0.0, 0.0, vertical(Z_TRAVEL), 0.0));
            }
            return Ok(act(toward(g.x, dest.0), toward(g.y, dest.1), 0.0, 0.0));
        }
        if g.z > Z_RELEASE + ALIGN_EPS {
            return Ok(act(0.0, 0.0, vertical(Z_RELEASE), 0.0));
        }
        return Ok(act(0.0, 0.0, UNIT, 1.0));
    }

    let o = &state.objects[pick];
    let (dx, dy) = (o.x - g.x, o.y - g.y);
    if state.held().is_some() {
        // Holding the wrong object: put it down where we are.
        return Ok(act(0.0, 0.0, UNIT, 1.0));
    }
    if !aligned(dx, dy) {
        if g.z < Z_TRAVEL - ALIGN_EPS {
            return Ok(act(0.0, 0.0, vertical(Z_TRAVEL), 1.0));
        }
        return Ok(act(toward(g.x, o.x), toward(g.y, o.y), 0.0, 1.0));
    }
    if g.z > ALIGN_EPS {
        return Ok(act(0.0, 0.0, vertical(0.0), 1.0));
    }
    Ok(act(0.0, 0.0, UNIT, 0.0))
}
