//! Demonstration datasets: generation, on-disk layout and loading.
//!
//! A dataset is a directory holding `manifest.toml` and one
//! `episode_NNNNN.oat` record per episode. The record layout is documented
//! in `docs/dataset-format.md`; all integers and floats are little-endian.

use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use super::{
    check_success, render_with, sample_task, scripted_expert, Action, Color, Gripper, Instruction,
    RenderOptions, SceneObject, SceneState, Shape,
};
use crate::error::{Error, IoContext, Result};
use crate::imaging::{decode_png, encode_png, Image, PixelPoint};
use crate::segment::MaskSet;

pub const RECORD_MAGIC: &[u8; 8] = b"OATEPSD1";
pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_NAME: &str = "manifest.toml";
/// Episode count of the reference demonstration set.
pub const DEFAULT_EPISODES: usize = 320;
pub const EXPERT_MAX_STEPS: usize = 60;

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub state: SceneState,
    pub rgb: Vec<u8>,
    /// Ground-truth patch ownership (background, objects, gripper).
    pub masks: MaskSet,
    pub keypoint: PixelPoint,
    pub action: Action,
}

impl StepRecord {
    pub fn image(&self, size: usize) -> Image {
        Image::from_rgb8(size, size, &self.rgb).expect("record image has the manifest size")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeRecord {
    pub instruction: Instruction,
    pub steps: Vec<StepRecord>,
    pub success: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub seed: u64,
    pub episode_count: usize,
    pub step_count: usize,
    pub image_size: usize,
    pub patch_size: usize,
    pub palette: Vec<String>,
    pub shapes: Vec<String>,
    pub files: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    pub episodes: Vec<EpisodeRecord>,
}

impl Dataset {
    pub fn frames(&self) -> impl Iterator<Item = (&EpisodeRecord, &StepRecord)> {
        self.episodes.iter().flat_map(|e| e.steps.iter().map(move |s| (e, s)))
    }

    pub fn frame_count(&self) -> usize {
        self.episodes.iter().map(|e| e.steps.len()).sum()
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Task seed of episode `i` under a dataset seed.
pub fn episode_seed(base: u64, i: u64) -> u64 {
    splitmix64(base ^ splitmix64(i))
}

/// Runs the expert in closed loop and records every step that moves.
pub fn record_episode(task_seed: u64, opts: &RenderOptions) -> Result<EpisodeRecord> {
    let (mut state, instruction) = sample_task(task_seed);
    let mut steps = Vec::new();
    let mut success = false;
    for _ in 0..EXPERT_MAX_STEPS {
        let action = scripted_expert(&state, &instruction)?;
        if !action.is_no_motion() {
            let r = render_with(&state, opts)?;
            steps.push(StepRecord {
                state: state.clone(),
                rgb: r.image.to_rgb8(),
                masks: r.masks,
                keypoint: r.keypoint,
                action,
            });
        }
        state.step(&action);
        if check_success(&state, &instruction) {
            success = true;
            break;
        }
    }
    if steps.is_empty() {
        return Err(Error::Data(format!("task seed {task_seed} produced no motion")));
    }
    Ok(EpisodeRecord {
        instruction,
        steps,
        success,
    })
}

pub fn generate_episodes(n_episodes: usize, seed: u64, opts: &RenderOptions) -> Result<Vec<EpisodeRecord>> {
    (0..n_episodes)
        .map(|i| record_episode(episode_seed(seed, i as u64), opts))
        .collect()
}

pub fn build_manifest(seed: u64, episodes: &[EpisodeRecord], opts: &RenderOptions) -> Manifest {
    Manifest {
        format_version: FORMAT_VERSION,
        seed,
        episode_count: episodes.len(),
        step_count: episodes.iter().map(|e| e.steps.len()).sum(),
        image_size: opts.size,
        patch_size: opts.patch_size,
        palette: Color::ALL.iter().map(|c| c.name().to_string()).collect(),
        shapes: Shape::ALL.iter().map(|s| s.name().to_string()).collect(),
        files: (0..episodes.len()).map(episode_file_name).collect(),
    }
}

pub fn episode_file_name(i: usize) -> String {
    format!("episode_{i:05}.oat")
}

pub fn generate_dataset(n_episodes: usize, seed: u64, out: &Path, opts: &RenderOptions) -> Result<Dataset> {
    let episodes = generate_episodes(n_episodes, seed, opts)?;
    let dataset = Dataset {
        manifest: build_manifest(seed, &episodes, opts),
        episodes,
    };
    save_dataset(&dataset, out)?;
    Ok(dataset)
}

pub fn save_dataset(dataset: &Dataset, out: &Path) -> Result<()> {
    fs::create_dir_all(out).at(out)?;
    let manifest = toml::to_string(&dataset.manifest).map_err(|e| Error::Data(e.to_string()))?;
    let mpath = out.join(MANIFEST_NAME);
    fs::write(&mpath, manifest).at(&mpath)?;
    for (name, ep) in dataset.manifest.files.iter().zip(&dataset.episodes) {
        let path = out.join(name);
        let bytes = encode_episode(ep, dataset.manifest.image_size)?;
        fs::write(&path, bytes).at(&path)?;
    }
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let mpath = dir.join(MANIFEST_NAME);
    let text = fs::read_to_string(&mpath).at(&mpath)?;
    let manifest: Manifest =
        toml::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", mpath.display())))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Data(format!(
            "{}: unsupported format version {}",
            mpath.display(),
            manifest.format_version
        )));
    }
    if manifest.files.len() != manifest.episode_count {
        return Err(Error::Data(format!("{}: file list does not match episode_count", mpath.display())));
    }
    let mut episodes = Vec::with_capacity(manifest.episode_count);
    for name in &manifest.files {
        let path = dir.join(name);
        let bytes = fs::read(&path).at(&path)?;
        let ep = decode_episode(&bytes, manifest.image_size)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        episodes.push(ep);
    }
    Ok(Dataset { manifest, episodes })
}

fn write_state(w: &mut Vec<u8>, s: &SceneState) -> std::io::Result<()> {
    w.write_u8(s.objects.len() as u8)?;
    for o in &s.objects {
        w.write_u8(o.shape.index())?;
        w.write_u8(o.color.index())?;
        w.write_f64::<LE>(o.x)?;
        w.write_f64::<LE>(o.y)?;
        w.write_u8(o.held as u8)?;
    }
    let g = &s.gripper;
    for v in [g.x, g.y, g.z, g.aperture, g.yaw] {
        w.write_f64::<LE>(v)?;
    }
    Ok(())
}

fn read_state(r: &mut Cursor<&[u8]>) -> Result<SceneState> {
    let n = r.read_u8().map_err(short)?;
    let mut objects = Vec::with_capacity(n as usize);
    for _ in 0..n {
        let shape = Shape::from_index(r.read_u8().map_err(short)?).ok_or_else(|| Error::Data("bad shape id".into()))?;
        let color = Color::from_index(r.read_u8().map_err(short)?).ok_or_else(|| Error::Data("bad color id".into()))?;
        let x = r.read_f64::<LE>().map_err(short)?;
        let y = r.read_f64::<LE>().map_err(short)?;
        let held = r.read_u8().map_err(short)? != 0;
        objects.push(SceneObject { shape, color, x, y, held });
    }
    let mut g = [0.0; 5];
    for v in g.iter_mut() {
        *v = r.read_f64::<LE>().map_err(short)?;
    }
    Ok(SceneState {
        objects,
        gripper: Gripper {
            x: g[0],
            y: g[1],
            z: g[2],
            aperture: g[3],
            yaw: g[4],
        },
    })
}

fn short(e: std::io::Error) -> Error {
    Error::Data(format!("truncated record: {e}"))
}

pub fn encode_episode(ep: &EpisodeRecord, size: usize) -> Result<Vec<u8>> {
    let mut w = Vec::new();
    let io = |e: std::io::Error| Error::Data(e.to_string());
    w.write_all(RECORD_MAGIC).map_err(io)?;
    w.write_u32::<LE>(FORMAT_VERSION).map_err(io)?;
    let text = ep.instruction.to_string();
    w.write_u32::<LE>(text.len() as u32).map_err(io)?;
    w.write_all(text.as_bytes()).map_err(io)?;
    w.write_u8(ep.success as u8).map_err(io)?;
    w.write_u32::<LE>(ep.steps.len() as u32).map_err(io)?;
    for s in &ep.steps {
        write_state(&mut w, &s.state).map_err(io)?;
        let png = encode_png(&s.image(size))?;
        w.write_u32::<LE>(png.len() as u32).map_err(io)?;
        w.write_all(&png).map_err(io)?;
        w.write_u32::<LE>(s.masks.k() as u32).map_err(io)?;
        for &l in s.masks.assignment() {
            w.write_u8(l as u8).map_err(io)?;
        }
        w.write_f64::<LE>(s.keypoint.u).map_err(io)?;
        w.write_f64::<LE>(s.keypoint.v).map_err(io)?;
        for v in s.action.to_array() {
            w.write_f64::<LE>(v).map_err(io)?;
        }
    }
    Ok(w)
}

pub fn decode_episode(bytes: &[u8], size: usize) -> Result<EpisodeRecord> {
    let mut r = Cursor::new(bytes);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(short)?;
    if &magic != RECORD_MAGIC {
        return Err(Error::Data("bad record magic".into()));
    }
    let version = r.read_u32::<LE>().map_err(short)?;
    if version != FORMAT_VERSION {
        return Err(Error::Data(format!("unsupported record version {version}")));
    }
    let len = r.read_u32::<LE>().map_err(short)? as usize;
    let mut text = vec![0u8; len];
    r.read_exact(&mut text).map_err(short)?;
    let text = String::from_utf8(text).map_err(|_| Error::Data("instruction is not UTF-8".into()))?;
    let instruction = Instruction::parse(&text)?;
    let success = r.read_u8().map_err(short)? != 0;
    let n_steps = r.read_u32::<LE>().map_err(short)? as usize;
    let mut steps = Vec::with_capacity(n_steps);
    for _ in 0..n_steps {
        let state = read_state(&mut r)?;
        let png_len = r.read_u32::<LE>().map_err(short)? as usize;
        let mut png = vec![0u8; png_len];
        r.read_exact(&mut png).map_err(short)?;
        let image = decode_png(&png)?;
        if image.height() != size || image.width() != size {
            return Err(Error::Data(format!("image is {}x{}, manifest says {size}", image.height(), image.width())));
        }
        let k = r.read_u32::<LE>().map_err(short)? as usize;
        let mut labels = vec![0u8; k];
        r.read_exact(&mut labels).map_err(short)?;
        let masks = MaskSet::new(
            state.objects.len() + 2,
            labels.iter().map(|&l| l as usize).collect(),
        )?;
        let u = r.read_f64::<LE>().map_err(short)?;
        let v = r.read_f64::<LE>().map_err(short)?;
        let mut a = [0.0; 7];
        for x in a.iter_mut() {
            *x = r.read_f64::<LE>().map_err(short)?;
        }
        steps.push(StepRecord {
            state,
            rgb: image.to_rgb8(),
            masks,
            keypoint: PixelPoint::new(u, v),
            action: Action::from_array(a),
        });
    }
    if (r.position() as usize) != bytes.len() {
        return Err(Error::Data("trailing bytes after last step".into()));
    }
    Ok(EpisodeRecord {
        instruction,
        steps,
        success,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::render;

    #[test]
    fn single_episode_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_dataset(1, 5, dir.path(), &RenderOptions::default()).unwrap();
        assert_eq!(ds.manifest.episode_count, 1);
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back, ds);
        assert_eq!(back.manifest.step_count, back.frame_count());
    }

    #[test]
    fn regeneration_is_byte_identical() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        generate_dataset(3, 11, a.path(), &RenderOptions::default()).unwrap();
        generate_dataset(3, 11, b.path(), &RenderOptions::default()).unwrap();
        for name in ["manifest.toml", "episode_00000.oat", "episode_00002.oat"] {
            assert_eq!(fs::read(a.path().join(name)).unwrap(), fs::read(b.path().join(name)).unwrap());
        }
    }

    #[test]
    fn stored_states_replay_bit_exact() {
        let eps = generate_episodes(4, 2, &RenderOptions::default()).unwrap();
        for ep in &eps {
            assert!(ep.success);
            for s in &ep.steps {
                assert!(!s.action.is_no_motion());
                let r = render(&s.state).unwrap();
                assert_eq!(r.image.to_rgb8(), s.rgb);
                assert_eq!(r.masks, s.masks);
            }
        }
    }

    #[test]
    fn load_reports_path_on_missing_dir() {
        let err = load_dataset(Path::new("/nonexistent/oat-data")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/oat-data"));
    }

    #[test]
    fn corrupt_record_rejected() {
        let eps = generate_episodes(1, 0, &RenderOptions::default()).unwrap();
        let mut bytes = encode_episode(&eps[0], 112).unwrap();
        bytes.truncate(bytes.len() - 3);
        assert!(decode_episode(&bytes, 112).is_err());
        bytes[0] = b'X';
        assert!(decode_episode(&bytes, 112).is_err());
    }
}
