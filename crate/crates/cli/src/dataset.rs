//! Generated scene sets on disk: per-scene files plus a manifest.

use std::path::{Path, PathBuf};

use stereopifu::grid::PixelMap;
use stereopifu::io::{read_pgm, Tensor};
use stereopifu::synth::SdfScene;
use stereopifu::train::TrainingScene;
use stereopifu::{Error, Result};

pub const MANIFEST: &str = "manifest.txt";
const HEADER: &str = "# stpf manifest 1";

/// File suffixes written for every scene, in manifest order.
pub const SCENE_FILES: [&str; 5] = ["_l.pgm", "_r.pgm", "_depth.t32", "_disp.t32", "_scene.txt"];

/// Scene names in generation order; each owns the files `name + suffix`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Manifest {
    pub scenes: Vec<String>,
}

impl Manifest {
    pub fn files(&self) -> Vec<String> {
        self.scenes
            .iter()
            .flat_map(|s| SCENE_FILES.iter().map(move |suffix| format!("{s}{suffix}")))
            .collect()
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{HEADER}\n");
        for s in &self.scenes {
            let files: Vec<String> = SCENE_FILES
                .iter()
                .map(|suffix| format!("{s}{suffix}"))
                .collect();
            out.push_str(&format!("{s} {}\n", files.join(" ")));
        }
        out
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let err = |line: usize, msg: &str| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg: msg.to_string(),
        };
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim() == HEADER => {}
            _ => return Err(err(1, "missing manifest header")),
        }
        let mut scenes = Vec::new();
        for (n, line) in lines {
            let toks: Vec<&str> = line.split_whitespace().collect();
            if toks.is_empty() {
                continue;
            }
            let expected: Vec<String> = SCENE_FILES
                .iter()
                .map(|suffix| format!("{}{suffix}", toks[0]))
                .collect();
            if toks[1..] != expected.iter().map(String::as_str).collect::<Vec<_>>()[..] {
                return Err(err(
                    n + 1,
                    "expected a scene name followed by its five files",
                ));
            }
            scenes.push(toks[0].to_string());
        }
        Ok(Self { scenes })
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = std::fs::read_to_string(&path).map_err(|e| {
            Error::Io(std::io::Error::new(
                e.kind(),
                format!("cannot read {}: {e}; run `stpf gen` first", path.display()),
            ))
        })?;
        Self::parse(&text, &path)
    }
}

pub fn scene_path(dir: &Path, name: &str, suffix: &str) -> PathBuf {
    dir.join(format!("{name}{suffix}"))
}

/// Maps stored as `[H, W]` tensors; invalid pixels hold 0.
pub fn map_tensor(map: &PixelMap<f32>) -> Tensor {
    let data = map
        .values
        .iter()
        .zip(&map.valid)
        .map(|(v, ok)| if *ok { *v } else { 0.0 })
        .collect();
    Tensor {
        dims: vec![map.height, map.width],
        data,
    }
}

pub fn tensor_map(t: &Tensor) -> Result<PixelMap<f32>> {
    let [h, w] = t.dims[..] else {
        return Err(Error::Format(format!(
            "expected a rank-2 map, got dims {:?}",
            t.dims
        )));
    };
    let valid = t.data.iter().map(|v| *v > 0.0 && v.is_finite()).collect();
    PixelMap::new(w, h, t.data.clone(), valid)
}

pub fn load_scene(dir: &Path, name: &str) -> Result<TrainingScene> {
    let left = read_pgm(&scene_path(dir, name, "_l.pgm"))?;
    let right = read_pgm(&scene_path(dir, name, "_r.pgm"))?;
    let gt_disparity = tensor_map(&Tensor::load(&scene_path(dir, name, "_disp.t32"))?)?;
    let scene = SdfScene::load(&scene_path(dir, name, "_scene.txt"))?;
    if (left.width, left.height) != (gt_disparity.width, gt_disparity.height) {
        return Err(Error::Dimension(format!(
            "{name}: image and disparity sizes differ"
        )));
    }
    Ok(TrainingScene {
        scene,
        left,
        right,
        gt_disparity,
    })
}

pub fn load_dataset(dir: &Path) -> Result<(Manifest, Vec<TrainingScene>)> {
    if !dir.is_dir() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("data directory {} does not exist", dir.display()),
        )));
    }
    let manifest = Manifest::load(dir)?;
    let scenes = manifest
        .scenes
        .iter()
        .map(|s| load_scene(dir, s))
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, scenes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_round_trips_and_lists_files() {
        let m = Manifest {
            scenes: vec!["scene_000".into(), "scene_001".into()],
        };
        let back = Manifest::parse(&m.to_text(), Path::new("m")).unwrap();
        assert_eq!(back, m);
        assert_eq!(m.files().len(), 10);
        assert_eq!(m.files()[0], "scene_000_l.pgm");
        let empty = Manifest::default();
        assert_eq!(
            Manifest::parse(&empty.to_text(), Path::new("m")).unwrap(),
            empty
        );
        assert!(Manifest::parse("scene_000 x\n", Path::new("m")).is_err());
        assert!(Manifest::parse(&format!("{HEADER}\nscene_000 a b\n"), Path::new("m")).is_err());
    }

    #[test]
    fn maps_round_trip_with_masks() {
        let m = PixelMap::new(
            3,
            2,
            vec![1.0, 0.0, 2.5, 3.0, 7.0, 0.0],
            vec![true, false, true, true, true, false],
        )
        .unwrap();
        let t = map_tensor(&m);
        assert_eq!(t.dims, [2, 3]);
        let back = tensor_map(&t).unwrap();
        assert_eq!(back.valid, m.valid);
        assert_eq!(back.values, t.data);
    }
}
