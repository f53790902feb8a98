use std::collections::HashMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::action::Action;
use super::dataset::render_poses;
use super::world::{Heading, Pose, World, WorldConfig};
use crate::error::{Error, Result};
use crate::rng::{self, tags};
use crate::video::LatentVideo;

/// A pose that the script passes through more than once, with the frame
/// indices of its first visit and of every later visit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RevisitMark {
    pub pose: Option<Pose>,
    pub first: usize,
    pub revisits: Vec<usize>,
}

impl RevisitMark {
    pub fn indices(&self) -> Vec<usize> {
        std::iter::once(self.first).chain(self.revisits.iter().copied()).collect()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RevisitAnnotation {
    pub marks: Vec<RevisitMark>,
}

impl RevisitAnnotation {
    /// Indices must be strictly increasing within each mark and every mark
    /// needs at least one revisit.
    pub fn validate(&self, frames: usize) -> Result<()> {
        if self.marks.is_empty() {
            return Err(Error::Empty("revisit annotation has no marks"));
        }
        for m in &self.marks {
            let idx = m.indices();
            if m.revisits.is_empty() {
                return Err(Error::Config(format!("mark at frame {} has no revisit", m.first)));
            }
            if idx.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Config(format!(
                    "mark at frame {} has non-increasing indices",
                    m.first
                )));
            }
            if let Some(&last) = idx.last() {
                if last >= frames {
                    return Err(Error::Config(format!(
                        "revisit index {last} is outside a {frames}-frame video"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// A scripted closed-loop walk: every chunk is a constant action and the
/// script repeatedly goes out along a line and comes back.
#[derive(Clone, Debug)]
pub struct RevisitBenchmark {
    pub world: World,
    pub start: Pose,
    pub f_g: usize,
    pub chunk_actions: Vec<Action>,
    pub poses: Vec<Pose>,
    pub frames: LatentVideo,
    pub annotation: RevisitAnnotation,
}

/// `length` counts frames after the initial one; the script is rounded up to
/// whole chunks.
pub fn make_revisit_benchmark(
    config: &WorldConfig,
    seed: u64,
    length: usize,
    f_g: usize,
) -> Result<RevisitBenchmark> {
    if f_g == 0 {
        return Err(Error::Config("f_g must be positive".into()));
    }
    let world = World::generate(rng::derive(seed, &[tags::BENCH]), config)?;
    let mut rng = rng::stream(seed, &[tags::BENCH, 1]);
    let mut legs = [
        Action::MoveForward,
        Action::StrafeRight,
        Action::StrafeLeft,
        Action::MoveBackward,
    ];
    legs.shuffle(&mut rng);
    let mut cells = world.free_cells();
    cells.shuffle(&mut rng);

    let period = 2 * f_g;
    if length < 3 * period {
        return Err(Error::Config(format!(
            "length {length} is shorter than three loops of {period} frames"
        )));
    }
    let chunks = length.div_ceil(f_g);
    for &(x, y) in &cells {
        for &heading in &Heading::ALL {
            for &leg in &legs {
                let start = Pose::new(x, y, heading);
                let Some(out) = clear_line(&world, start, leg, f_g)? else {
                    continue;
                };
                let script: Vec<Action> = (0..chunks)
                    .map(|c| if c % 2 == 0 { leg } else { leg.inverse() })
                    .collect();
                let mut poses = vec![start];
                for &a in &script {
                    for _ in 0..f_g {
                        poses.push(world.step(*poses.last().unwrap(), a)?);
                    }
                }
                debug_assert_eq!(poses[f_g], out);
                let annotation = annotate(&poses);
                let frames = render_poses(&world, &poses);
                return Ok(RevisitBenchmark {
                    world,
                    start,
                    f_g,
                    chunk_actions: script,
                    poses,
                    frames,
                    annotation,
                });
            }
        }
    }
    Err(Error::WorldTooSmall(format!(
        "no straight run of {f_g} free cells for a revisit loop"
    )))
}

/// End pose after `steps` unblocked applications of `action`, if all are free.
fn clear_line(world: &World, start: Pose, action: Action, steps: usize) -> Result<Option<Pose>> {
    let mut p = start;
    for _ in 0..steps {
        let next = p.apply(action)?;
        if !world.is_free(next.x, next.y) {
            return Ok(None);
        }
        p = next;
    }
    Ok(Some(p))
}

fn annotate(poses: &[Pose]) -> RevisitAnnotation {
    let mut seen: HashMap<Pose, Vec<usize>> = HashMap::new();
    let mut order = Vec::new();
    for (i, p) in poses.iter().enumerate() {
        let e = seen.entry(*p).or_default();
        if e.is_empty() {
            order.push(*p);
        }
        e.push(i);
    }
    let marks = order
        .into_iter()
        .filter_map(|p| {
            let idx = &seen[&p];
            (idx.len() >= 3).then(|| RevisitMark {
                pose: Some(p),
                first: idx[0],
                revisits: idx[1..].to_vec(),
            })
        })
        .collect();
    RevisitAnnotation { marks }
}
