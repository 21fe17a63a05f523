//! Binary rollout archive.
//!
//! Layout (little endian): magic `HROLL1`, `u32` state count, `u32` frame
//! stack, `u64` record count, then per record `u32` goal, `u32` pose,
//! `u8` action, `f64` reward, `u32` next pose, `u8` flags
//! (bit 0 terminal, bit 1 terminal by cap, bit 2 episode start).
//! Frame stacks are rebuilt on load from the pose sequence.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::env::{Action, EpisodeEnd, PoseStack, Transition};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 6] = b"HROLL1";

const TERMINAL: u8 = 1;
const BY_CAP: u8 = 2;
const START: u8 = 4;

pub fn write_archive<W: Write>(w: &mut W, num_states: usize, frame_stack: usize, items: &[Transition]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&(num_states as u32).to_le_bytes())?;
    w.write_all(&(frame_stack as u32).to_le_bytes())?;
    w.write_all(&(items.len() as u64).to_le_bytes())?;
    for t in items {
        let mut flags = 0;
        match t.end {
            EpisodeEnd::Goal => flags |= TERMINAL,
            EpisodeEnd::Cap => flags |= TERMINAL | BY_CAP,
            EpisodeEnd::Running => {}
        }
        if t.episode_start {
            flags |= START;
        }
        w.write_all(&(t.goal as u32).to_le_bytes())?;
        w.write_all(&(t.obs.current() as u32).to_le_bytes())?;
        w.write_all(&[t.action.index() as u8])?;
        w.write_all(&t.reward.to_le_bytes())?;
        w.write_all(&(t.next_obs.current() as u32).to_le_bytes())?;
        w.write_all(&[flags])?;
    }
    Ok(())
}

fn take<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)
        .map_err(|e| Error::Archive(format!("truncated archive: {e}")))?;
    Ok(b)
}

/// Read an archive, checking it was written for a map with `num_states` poses
/// and a stack depth of `frame_stack`.
pub fn read_archive<R: Read>(r: &mut R, num_states: usize, frame_stack: usize) -> Result<Vec<Transition>> {
    if &take::<6, _>(r)? != MAGIC {
        return Err(Error::Archive("bad magic".into()));
    }
    let n_states = u32::from_le_bytes(take(r)?) as usize;
    let k = u32::from_le_bytes(take(r)?) as usize;
    if n_states != num_states || k != frame_stack {
        return Err(Error::Archive(format!(
            "archive is for {n_states} states with stack {k}, expected {num_states} with stack {frame_stack}"
        )));
    }
    let count = u64::from_le_bytes(take(r)?);
    let mut out = Vec::with_capacity(count.min(1 << 20) as usize);
    let mut stack: Option<PoseStack> = None;
    for i in 0..count {
        let goal = u32::from_le_bytes(take(r)?) as usize;
        let pose = u32::from_le_bytes(take(r)?) as usize;
        let action = Action::from_index(take::<1, _>(r)?[0] as usize)
            .ok_or_else(|| Error::Archive(format!("record {i}: bad action")))?;
        let reward = f64::from_le_bytes(take(r)?);
        let next = u32::from_le_bytes(take(r)?) as usize;
        let flags = take::<1, _>(r)?[0];
        if goal >= num_states || pose >= num_states || next >= num_states {
            return Err(Error::Archive(format!("record {i}: state id out of range")));
        }
        let start = flags & START != 0;
        let obs = match (&stack, start) {
            (Some(s), false) if s.current() == pose => s.clone(),
            (_, true) => PoseStack::replicated(pose, k),
            _ => return Err(Error::Archive(format!("record {i}: pose does not continue the episode"))),
        };
        let next_obs = obs.pushed(next);
        let end = match (flags & TERMINAL != 0, flags & BY_CAP != 0) {
            (false, _) => EpisodeEnd::Running,
            (true, false) => EpisodeEnd::Goal,
            (true, true) => EpisodeEnd::Cap,
        };
        stack = (!end.terminal()).then(|| next_obs.clone());
        out.push(Transition {
            goal,
            obs,
            action,
            reward,
            next_obs,
            end,
            episode_start: start,
        });
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Archive("trailing bytes after the last record".into()));
    }
    Ok(out)
}

pub fn save(path: &Path, num_states: usize, frame_stack: usize, items: &[Transition]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    write_archive(&mut w, num_states, frame_stack, items)?;
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path, num_states: usize, frame_stack: usize) -> Result<Vec<Transition>> {
    let f = std::fs::File::open(path)
        .map_err(|e| Error::Archive(format!("cannot open {}: {e}", path.display())))?;
    read_archive(&mut BufReader::new(f), num_states, frame_stack)
}
