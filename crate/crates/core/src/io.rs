//! On-disk layout of datasets and training checkpoints.
//!
//! A dataset directory holds `manifest.toml`, `images/NNNN.pfm`,
//! `poses.txt` (initial poses), `graph.txt` and the hidden `.gt_labels`.
//! A checkpoint directory holds `field.bin` (grids and Adam moments),
//! `state.json` and `graph.txt`.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::field::{Field, PsnrTracker};
use crate::geometry::{read_trajectory, write_trajectory, Intrinsics, Pose};
use crate::image::Image;
use crate::optim::{FieldAdam, PoseMomentum};
use crate::scene_graph::SceneGraph;
use crate::synth::{Dataset, DatasetSpec, GtLabels, SceneSpec};
use crate::trainer::{Event, Observations, TrainState};
use crate::{Error, Result};

pub const MANIFEST: &str = "manifest.toml";
pub const LABELS: &str = ".gt_labels";
const FIELD_MAGIC: &[u8; 8] = b"RNSRFLD1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub cameras: usize,
    pub seed: u64,
    /// Name of the hidden file with ground-truth poses and outlier ids.
    pub labels: String,
    pub intrinsics: Intrinsics,
    pub scene: SceneSpec,
    pub dataset: DatasetSpec,
}

#[derive(Serialize, Deserialize)]
struct LabelsFile {
    poses: Vec<[f64; 12]>,
    outliers: Vec<usize>,
    match_correct: Vec<Vec<bool>>,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

fn image_name(i: usize) -> String {
    format!("images/{i:04}.pfm")
}

pub fn write_dataset(dir: &Path, d: &Dataset) -> Result<()> {
    fs::create_dir_all(dir.join("images"))?;
    let manifest = Manifest {
        cameras: d.poses.len(),
        seed: d.seed,
        labels: LABELS.to_string(),
        intrinsics: d.intrinsics,
        scene: d.scene.clone(),
        dataset: d.spec.clone(),
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::Config(e.to_string()))?;
    fs::write(dir.join(MANIFEST), text)?;
    for (i, img) in d.images.iter().enumerate() {
        let mut w = create(&dir.join(image_name(i)))?;
        img.write_pfm(&mut w)?;
        w.flush()?;
    }
    let mut w = create(&dir.join("poses.txt"))?;
    write_trajectory(&mut w, &d.poses)?;
    w.flush()?;
    let mut w = create(&dir.join("graph.txt"))?;
    d.graph.write(&mut w)?;
    w.flush()?;
    let labels = LabelsFile {
        poses: d.labels.poses.iter().map(|p| p.to_array()).collect(),
        outliers: d.labels.outliers.clone(),
        match_correct: d.labels.match_correct.clone(),
    };
    fs::write(dir.join(LABELS), serde_json::to_vec(&labels).map_err(|e| Error::Config(e.to_string()))?)?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    toml::from_str(&text).map_err(|e| {
        let line = e
            .span()
            .map(|s| text.as_bytes()[..s.start].iter().filter(|&&b| b == b'\n').count() + 1)
            .unwrap_or(0);
        Error::parse(path.display().to_string(), line, e.message().trim())
    })
}

/// Everything the optimizer is allowed to read from a dataset directory.
pub fn read_observations(dir: &Path) -> Result<(Manifest, Observations)> {
    let manifest = read_manifest(dir)?;
    let mut images = Vec::with_capacity(manifest.cameras);
    for i in 0..manifest.cameras {
        let path = dir.join(image_name(i));
        images.push(Image::read_pfm(open(&path)?, &path.display().to_string())?);
    }
    let path = dir.join("poses.txt");
    let poses = read_trajectory(open(&path)?, &path.display().to_string())?;
    let path = dir.join("graph.txt");
    let graph = SceneGraph::read(open(&path)?, &path.display().to_string())?;
    if poses.len() != manifest.cameras || graph.len() != manifest.cameras {
        return Err(Error::Config(format!(
            "dataset lists {} cameras but has {} poses and {} graph nodes",
            manifest.cameras,
            poses.len(),
            graph.len()
        )));
    }
    let obs = Observations {
        intrinsics: manifest.intrinsics,
        images,
        poses,
        graph,
    };
    Ok((manifest, obs))
}

pub fn read_labels(dir: &Path, manifest: &Manifest) -> Result<GtLabels> {
    let path = dir.join(&manifest.labels);
    let bytes = fs::read(&path)?;
    let l: LabelsFile = serde_json::from_slice(&bytes).map_err(|e| Error::parse(path.display().to_string(), e.line(), e.to_string()))?;
    Ok(GtLabels {
        poses: l.poses.iter().map(Pose::from_array).collect(),
        outliers: l.outliers,
        match_correct: l.match_correct,
    })
}

#[derive(Serialize, Deserialize)]
struct StateFile {
    iteration: usize,
    poses: Vec<[f64; 12]>,
    pose_opt: PoseMomentum,
    psnr: PsnrTracker,
    events: Vec<Event>,
}

fn push_f64s(out: &mut Vec<u8>, v: &[f64]) {
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

pub fn write_checkpoint(dir: &Path, state: &TrainState) -> Result<()> {
    fs::create_dir_all(dir)?;
    let f = &state.field;
    let mut bytes = Vec::with_capacity(8 * (f.sdf.len() + f.color_o.len() + f.color_n.len()) * 4);
    bytes.extend_from_slice(FIELD_MAGIC);
    bytes.extend_from_slice(&(f.res() as u64).to_le_bytes());
    bytes.extend_from_slice(&f.sharpness.to_le_bytes());
    push_f64s(&mut bytes, &f.sdf);
    push_f64s(&mut bytes, &f.color_o);
    push_f64s(&mut bytes, &f.color_n);
    state.adam.to_bytes(&mut bytes);
    fs::write(dir.join("field.bin"), bytes)?;

    let st = StateFile {
        iteration: state.iteration,
        poses: state.poses.iter().map(|p| p.to_array()).collect(),
        pose_opt: state.pose_opt.clone(),
        psnr: state.psnr.clone(),
        events: state.events.clone(),
    };
    fs::write(dir.join("state.json"), serde_json::to_vec(&st).map_err(|e| Error::Config(e.to_string()))?)?;
    let mut w = create(&dir.join("graph.txt"))?;
    state.graph.write(&mut w)?;
    w.flush()?;
    Ok(())
}

fn read_field(path: &Path) -> Result<(Field, FieldAdam)> {
    let bytes = fs::read(path)?;
    let bad = || Error::parse(path.display().to_string(), 0, "truncated or corrupt field checkpoint");
    if bytes.len() < 24 || &bytes[..8] != FIELD_MAGIC {
        return Err(bad());
    }
    let res = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if !(2..=1024).contains(&res) {
        return Err(bad());
    }
    let mut field = Field::new(res);
    field.sharpness = f64::from_le_bytes(bytes[16..24].try_into().unwrap());
    let mut pos = 24;
    for v in [&mut field.sdf, &mut field.color_o, &mut field.color_n] {
        for x in v.iter_mut() {
            *x = f64::from_le_bytes(bytes.get(pos..pos + 8).ok_or_else(bad)?.try_into().unwrap());
            pos += 8;
        }
    }
    let (adam, used) = FieldAdam::from_bytes(&field, &bytes[pos..]).ok_or_else(bad)?;
    if pos + used != bytes.len() {
        return Err(bad());
    }
    Ok((field, adam))
}

pub fn read_checkpoint(dir: &Path) -> Result<TrainState> {
    let (field, adam) = read_field(&dir.join("field.bin"))?;
    let path = dir.join("state.json");
    let st: StateFile = serde_json::from_slice(&fs::read(&path)?)
        .map_err(|e| Error::parse(path.display().to_string(), e.line(), e.to_string()))?;
    let path = dir.join("graph.txt");
    let graph = SceneGraph::read(open(&path)?, &path.display().to_string())?;
    let poses: Vec<Pose> = st.poses.iter().map(Pose::from_array).collect();
    if poses.len() != graph.len() || st.pose_opt.velocity.len() != poses.len() {
        return Err(Error::Config("checkpoint pose count does not match its graph".into()));
    }
    Ok(TrainState::from_parts(field, poses, graph, adam, st.pose_opt, st.psnr, st.iteration, st.events))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::generate_dataset;
    use crate::trainer::TrainConfig;

    fn small() -> Dataset {
        let spec = DatasetSpec {
            cameras: 10,
            width: 16,
            height: 16,
            ..DatasetSpec::default()
        };
        generate_dataset(&SceneSpec::default(), &spec, 3).unwrap()
    }

    #[test]
    fn dataset_round_trip() {
        let d = small();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &d).unwrap();
        let (m, obs) = read_observations(dir.path()).unwrap();
        assert_eq!(m.cameras, 10);
        assert_eq!(m.scene, d.scene);
        assert_eq!(obs.graph, d.graph);
        assert_eq!(obs.images, d.images);
        for (a, b) in obs.poses.iter().zip(&d.poses) {
            assert!((a.translation - b.translation).norm() < 1e-12);
            assert!((a.rotation.matrix() - b.rotation.matrix()).norm() < 1e-12);
        }
        let labels = read_labels(dir.path(), &m).unwrap();
        assert_eq!(labels, d.labels);
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let d = small();
        let obs = Observations::from(&d);
        let cfg = TrainConfig {
            iterations: 3,
            grid_resolution: 8,
            rays_per_batch: 8,
            samples_per_ray: 8,
            probe_pixels: 16,
            ..TrainConfig::default()
        };
        let mut state = TrainState::new(&obs, &cfg).unwrap();
        let loss = crate::losses::LossConfig::default();
        crate::trainer::train_step(&mut state, &obs, &cfg, &loss);
        let dir = tempfile::tempdir().unwrap();
        write_checkpoint(dir.path(), &state).unwrap();
        let back = read_checkpoint(dir.path()).unwrap();
        assert_eq!(back.field, state.field);
        assert_eq!(back.poses, state.poses);
        assert_eq!(back.adam, state.adam);
        assert_eq!(back.pose_opt, state.pose_opt);
        assert_eq!(back.psnr, state.psnr);
        assert_eq!(back.graph, state.graph);
        assert_eq!(back.iteration, state.iteration);
        assert_eq!(back.events, state.events);
    }

    #[test]
    fn corrupt_field_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("field.bin"), b"RNSRFLD1short").unwrap();
        assert!(matches!(read_field(&dir.path().join("field.bin")), Err(Error::Parse { .. })));
        assert!(read_checkpoint(&dir.path().join("missing")).is_err());
    }
}
