//! Training-pipeline stages. Each stage reads the artifacts of earlier
//! stages from the output directory and writes its own.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use skelfuse::gradcheck::{gradient_suite, GradCase};
use skelfuse::graph::{build_adjacency, reference_pose, SkeletonSequence, SkeletonTemplate};
use skelfuse::io::{
    export_png, load_checkpoint, parse_skeleton_file, read_png, read_text, save_checkpoint, write_bytes, write_png,
    write_skeleton_file,
};
use skelfuse::resnet::RgbNet;
use skelfuse::rng::Rng;
use skelfuse::stgcn::StGcn;
use skelfuse::stroi::{
    apply_joint_weights, assemble_stroi_at, random_temporal_indices, temporal_sample_indices, ChannelStats,
    FrameSequence, JointTrack, StRoiGeometry, StRoiGrid, SubjectLayout,
};
use skelfuse::synth::{generate_synthetic_dataset, Split, SyntheticSpec, CLASS_NAMES};
use skelfuse::train::{
    ablation_report, accuracy, AblationRow, argmax, ensemble, format_report, predict_rgb, predict_skeleton, skeleton_part_weights,
    train_rgb_stage, train_skeleton_stage, write_metrics, AttentionMode, Predictions, RgbExample, RgbInputSpec,
};
use skelfuse::{Error, Result, Tensor};

use crate::config::Config;

/// Number of samples whose images are exported for inspection.
const PREVIEWS: usize = 4;

/// File layout of one run.
pub struct Paths {
    pub out: PathBuf,
    pub data: PathBuf,
}

impl Paths {
    pub fn new(cfg: &Config) -> Self {
        Paths {
            out: cfg.out.clone(),
            data: cfg.dataset.clone().unwrap_or_else(|| cfg.out.join("data")),
        }
    }

    pub fn manifest(&self) -> PathBuf {
        self.data.join("manifest.json")
    }

    pub fn skeletons(&self) -> PathBuf {
        self.data.join("skeletons.txt")
    }

    pub fn tracks(&self) -> PathBuf {
        self.data.join("tracks.skfz")
    }

    pub fn template(&self) -> PathBuf {
        self.data.join("template.txt")
    }

    /// Optional directory of `<id>/*.png` frames.
    pub fn frames(&self) -> PathBuf {
        self.data.join("frames")
    }

    pub fn grids(&self) -> PathBuf {
        self.out.join("stroi").join("grids.skfz")
    }

    pub fn grid_index(&self) -> PathBuf {
        self.out.join("stroi").join("index.json")
    }

    pub fn skeleton_model(&self) -> PathBuf {
        self.out.join("skeleton").join("model.skfz")
    }

    pub fn skeleton_metrics(&self) -> PathBuf {
        self.out.join("skeleton").join("metrics.jsonl")
    }

    pub fn weights(&self) -> PathBuf {
        self.out.join("weights").join("part_weights.skfz")
    }

    pub fn rgb_dir(&self, mode: AttentionMode) -> PathBuf {
        self.out.join(format!("rgb-{}", mode.name()))
    }

    pub fn rgb_model(&self, mode: AttentionMode) -> PathBuf {
        self.rgb_dir(mode).join("model.skfz")
    }

    pub fn rgb_input(&self, mode: AttentionMode) -> PathBuf {
        self.rgb_dir(mode).join("input.json")
    }

    /// Skeleton network as updated by jointly trained (soft) RGB training.
    pub fn rgb_skeleton(&self, mode: AttentionMode) -> PathBuf {
        self.rgb_dir(mode).join("skeleton.skfz")
    }

    pub fn rgb_metrics(&self, mode: AttentionMode) -> PathBuf {
        self.rgb_dir(mode).join("metrics.jsonl")
    }

    pub fn report(&self) -> PathBuf {
        self.out.join("report.txt")
    }

    pub fn ensemble(&self, mode: AttentionMode) -> PathBuf {
        self.out.join(format!("ensemble-{}.txt", mode.name()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub label: usize,
    pub split: Split,
    pub subjects: usize,
}

/// Dataset index: class names, split membership and, for generated data,
/// the spec that renders the frames.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub classes: Vec<String>,
    pub synthetic: Option<SyntheticSpec>,
    pub samples: Vec<ManifestEntry>,
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("serializable") + "\n"
}

fn from_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    serde_json::from_str(&read_text(path)?).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        msg: e.to_string(),
    })
}

/// A loaded dataset; skeletons are in manifest order.
pub struct Dataset {
    pub manifest: Manifest,
    pub template: SkeletonTemplate,
    pub skeletons: Vec<SkeletonSequence>,
}

impl Dataset {
    pub fn load(cfg: &Config, paths: &Paths) -> Result<Self> {
        let manifest: Manifest = from_json(&paths.manifest())?;
        let template = match (&cfg.template, paths.template().exists()) {
            (Some(p), _) => SkeletonTemplate::load(p)?,
            (None, true) => SkeletonTemplate::load(&paths.template())?,
            (None, false) => SkeletonTemplate::stick_figure(),
        };
        let skeletons = parse_skeleton_file(&paths.skeletons())?;
        if skeletons.len() != manifest.samples.len() {
            return Err(Error::data(format!(
                "{} lists {} samples but {} holds {}",
                paths.manifest().display(),
                manifest.samples.len(),
                paths.skeletons().display(),
                skeletons.len()
            )));
        }
        for (seq, entry) in skeletons.iter().zip(&manifest.samples) {
            if seq.label != entry.label || seq.label >= manifest.classes.len() {
                return Err(Error::data(format!("sample {} has inconsistent label {}", entry.id, seq.label)));
            }
        }
        Ok(Dataset { manifest, template, skeletons })
    }

    pub fn classes(&self) -> usize {
        self.manifest.classes.len()
    }

    /// Manifest indices of `split`, in order.
    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.manifest.samples.len())
            .filter(|&i| self.manifest.samples[i].split == split)
            .collect()
    }

    pub fn labels(&self, idx: &[usize]) -> Vec<usize> {
        idx.iter().map(|&i| self.manifest.samples[i].label).collect()
    }

    fn sequences(&self, idx: &[usize]) -> Vec<&SkeletonSequence> {
        idx.iter().map(|&i| &self.skeletons[i]).collect()
    }
}

/// Stage context: configuration, paths and the progress stream.
pub struct Stage<'a> {
    pub cfg: &'a Config,
    pub paths: Paths,
    pub log: &'a mut dyn Write,
}

macro_rules! say {
    ($stage:expr, $($arg:tt)*) => {
        let _ = writeln!($stage.log, $($arg)*);
    };
}

fn load_gcn(cfg: &Config, classes: usize, path: &Path) -> Result<StGcn> {
    StGcn::import(cfg.gcn_config_for(classes), &load_checkpoint(path)?)
}

#[derive(Serialize, Deserialize)]
struct GridIndex {
    parts: usize,
    samples: usize,
    patch: usize,
    two_subject_layout: bool,
    subjects: BTreeMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct InputRecord {
    mode: AttentionMode,
    side: usize,
    mean: [f64; 3],
    std: [f64; 3],
}

impl<'a> Stage<'a> {
    pub fn new(cfg: &'a Config, log: &'a mut dyn Write) -> Self {
        Stage {
            cfg,
            paths: Paths::new(cfg),
            log,
        }
    }

    /// Render the synthetic dataset's skeletons, tracks and index.
    pub fn gen_synthetic(&mut self) -> Result<()> {
        let data = generate_synthetic_dataset(&self.cfg.synthetic)?;
        let manifest = Manifest {
            classes: CLASS_NAMES[..self.cfg.synthetic.num_classes].iter().map(|s| s.to_string()).collect(),
            synthetic: Some(self.cfg.synthetic.clone()),
            samples: data
                .samples
                .iter()
                .map(|s| ManifestEntry {
                    id: s.id(),
                    label: s.label,
                    split: s.split,
                    subjects: s.skeleton.subject_count(),
                })
                .collect(),
        };
        let seqs: Vec<SkeletonSequence> = data.samples.iter().map(|s| s.skeleton.clone()).collect();
        write_skeleton_file(&self.paths.skeletons(), &seqs)?;
        let mut tracks = BTreeMap::new();
        for s in &data.samples {
            for (k, t) in s.tracks.iter().enumerate() {
                tracks.insert(format!("{}.{k}.pixels", s.id()), t.pixels.clone());
                tracks.insert(format!("{}.{k}.confidence", s.id()), t.confidence.clone());
            }
        }
        save_checkpoint(&tracks, &self.paths.tracks())?;
        write_bytes(&self.paths.template(), data.template.to_text().as_bytes())?;
        write_bytes(&self.paths.manifest(), to_json(&manifest).as_bytes())?;
        for s in data.samples.iter().take(PREVIEWS) {
            let frames = s.frames(&data.template);
            write_png(&frames.frames[0], &self.paths.data.join("preview").join(format!("{}.png", s.id())))?;
        }
        let test = manifest.samples.iter().filter(|e| e.split == Split::Test).count();
        say!(
            self,
            "generated {} samples ({} train, {} test) in {}",
            manifest.samples.len(),
            manifest.samples.len() - test,
            test,
            self.paths.data.display()
        );
        Ok(())
    }

    fn load_tracks(&self, manifest: &Manifest) -> Result<Vec<Vec<JointTrack>>> {
        let mut bundle = load_checkpoint(&self.paths.tracks())?;
        manifest
            .samples
            .iter()
            .map(|e| {
                (0..e.subjects)
                    .map(|k| {
                        let mut take = |what: &str| {
                            bundle
                                .remove(&format!("{}.{k}.{what}", e.id))
                                .ok_or_else(|| Error::data(format!("no {what} track for subject {k} of {}", e.id)))
                        };
                        JointTrack::new(take("pixels")?, take("confidence")?)
                    })
                    .collect()
            })
            .collect()
    }

    /// Frames of every sample: image directories when present, otherwise
    /// re-rendered from the synthetic spec.
    fn frame_source(&self, dataset: &Dataset) -> Result<impl Fn(usize) -> Result<FrameSequence>> {
        let rendered = match &dataset.manifest.synthetic {
            Some(spec) if !self.paths.frames().exists() => Some(generate_synthetic_dataset(spec)?),
            _ => None,
        };
        let template = dataset.template.clone();
        let ids: Vec<String> = dataset.manifest.samples.iter().map(|e| e.id.clone()).collect();
        let frames_dir = self.paths.frames();
        Ok(move |i: usize| match &rendered {
            Some(data) => Ok(data.samples[i].frames(&template)),
            None => {
                let dir = frames_dir.join(&ids[i]);
                let mut files: Vec<PathBuf> = std::fs::read_dir(&dir)
                    .map_err(|e| Error::io(&dir, e))?
                    .filter_map(|f| f.ok().map(|f| f.path()))
                    .filter(|p| p.extension().is_some_and(|x| x == "png"))
                    .collect();
                files.sort();
                let images = files.iter().map(|p| read_png(p)).collect::<Result<Vec<_>>>()?;
                FrameSequence::new(images, ids[i].clone())
            }
        })
    }

    /// Cut the region-of-interest image of every sample.
    pub fn build_stroi(&mut self) -> Result<()> {
        let dataset = Dataset::load(self.cfg, &self.paths)?;
        let geometry = self.cfg.geometry()?;
        let tracks = self.load_tracks(&dataset.manifest)?;
        let frames_of = self.frame_source(&dataset)?;
        let root = Rng::new(self.cfg.seed).fork(31);
        let mut bundle = BTreeMap::new();
        let mut index = GridIndex {
            parts: geometry.parts,
            samples: geometry.samples,
            patch: geometry.patch,
            two_subject_layout: geometry.layout == SubjectLayout::Pair,
            subjects: BTreeMap::new(),
        };
        for (i, entry) in dataset.manifest.samples.iter().enumerate() {
            let frames = frames_of(i)?;
            let times = if self.cfg.random_frames && entry.split == Split::Train {
                random_temporal_indices(frames.len(), geometry.samples, &mut root.fork(i as u64))
            } else {
                temporal_sample_indices(frames.len(), geometry.samples)
            };
            let grid = assemble_stroi_at(&frames, &tracks[i], &dataset.template, geometry, &times)?;
            if i < PREVIEWS {
                export_png(&grid.image, &self.paths.out.join("stroi").join("preview").join(format!("{}.png", entry.id)))?;
            }
            index.subjects.insert(entry.id.clone(), grid.subject_count);
            bundle.insert(entry.id.clone(), grid.image);
        }
        drop(frames_of);
        save_checkpoint(&bundle, &self.paths.grids())?;
        write_bytes(&self.paths.grid_index(), to_json(&index).as_bytes())?;
        let (h, w) = geometry.image_size();
        say!(self, "built {} ST-ROI images of {h}x{w} in {}", bundle.len(), self.paths.grids().display());
        Ok(())
    }

    pub fn load_grids(&self, dataset: &Dataset) -> Result<Vec<StRoiGrid>> {
        let index: GridIndex = from_json(&self.paths.grid_index())?;
        let layout = if index.two_subject_layout { SubjectLayout::Pair } else { SubjectLayout::Single };
        let geometry = StRoiGeometry::new(index.parts, index.samples, index.patch, layout)?;
        if geometry != self.cfg.geometry()? {
            return Err(Error::usage(format!(
                "ST-ROI images were built with {geometry:?}; the configuration asks for {:?} (rerun build-stroi)",
                self.cfg.geometry()?
            )));
        }
        let mut bundle = load_checkpoint(&self.paths.grids())?;
        dataset
            .manifest
            .samples
            .iter()
            .map(|e| {
                let image = bundle
                    .remove(&e.id)
                    .ok_or_else(|| Error::data(format!("no ST-ROI image for {}", e.id)))?;
                if image.shape() != [3, geometry.image_size().0, geometry.image_size().1] {
                    return Err(Error::data(format!("ST-ROI image of {} has shape {:?}", e.id, image.shape())));
                }
                Ok(StRoiGrid {
                    image,
                    geometry,
                    subject_count: index.subjects.get(&e.id).copied().unwrap_or(1),
                })
            })
            .collect()
    }

    /// Algorithm step 1: the skeleton branch alone.
    pub fn train_skeleton(&mut self) -> Result<()> {
        let dataset = Dataset::load(self.cfg, &self.paths)?;
        let (train, test) = (dataset.indices(Split::Train), dataset.indices(Split::Test));
        let reference = reference_pose(&dataset.sequences(&train))?;
        let adjacency = build_adjacency(&dataset.template, &reference, self.cfg.alpha)?;
        let mut gcn = StGcn::new(
            self.cfg.gcn_config_for(dataset.classes()),
            adjacency,
            &mut Rng::new(self.cfg.seed).fork(3),
        )?;
        let records = train_skeleton_stage(&mut gcn, &dataset.sequences(&train), &dataset.sequences(&test), &self.cfg.train)?;
        save_checkpoint(&gcn.export(), &self.paths.skeleton_model())?;
        write_metrics(&self.paths.skeleton_metrics(), &records)?;
        let last = records.last().expect("at least one epoch");
        say!(
            self,
            "skeleton: loss {:.4}, train accuracy {:.4}, held-out accuracy {}",
            last.loss,
            last.train_acc,
            last.val_acc.map_or("n/a".into(), |a| format!("{a:.4}"))
        );
        Ok(())
    }

    /// Algorithm steps 2-3: per-sample part weights from the trained
    /// skeleton network.
    pub fn extract_weights(&mut self) -> Result<()> {
        let dataset = Dataset::load(self.cfg, &self.paths)?;
        let gcn = load_gcn(self.cfg, dataset.classes(), &self.paths.skeleton_model())?;
        let groups = self.cfg.layout().groups();
        let grids = if self.paths.grids().exists() {
            Some(self.load_grids(&dataset)?)
        } else {
            None
        };
        let mut bundle = BTreeMap::new();
        let mut table = String::from("# id label part weights (template part order, subject-major)\n");
        for (i, (seq, entry)) in dataset.skeletons.iter().zip(&dataset.manifest.samples).enumerate() {
            let w = skeleton_part_weights(&gcn, seq, &dataset.template, groups)?;
            let _ = writeln!(
                table,
                "{} {} {}",
                entry.id,
                entry.label,
                w.iter().map(|v| format!("{v:.6}")).collect::<Vec<_>>().join(" ")
            );
            if let (Some(grids), true) = (&grids, i < PREVIEWS) {
                let weighted = apply_joint_weights(&grids[i], &w)?;
                export_png(&weighted.image, &self.paths.out.join("weights").join("preview").join(format!("{}.png", entry.id)))?;
            }
            bundle.insert(entry.id.clone(), Tensor::new(&[w.len()], w)?);
        }
        save_checkpoint(&bundle, &self.paths.weights())?;
        write_bytes(&self.paths.weights().with_file_name("part_weights.txt"), table.as_bytes())?;
        say!(self, "extracted part weights for {} samples into {}", bundle.len(), self.paths.weights().display());
        Ok(())
    }

    /// Skeleton network used to weight the RGB input of `mode`.
    fn weighting_gcn(&self, dataset: &Dataset, mode: AttentionMode) -> Result<StGcn> {
        match mode {
            AttentionMode::Soft => load_gcn(self.cfg, dataset.classes(), &self.paths.rgb_skeleton(mode)),
            _ => load_gcn(self.cfg, dataset.classes(), &self.paths.skeleton_model()),
        }
    }

    /// Algorithm steps 4-5: the RGB branch on (weighted) ST-ROI images.
    pub fn train_rgb(&mut self, mode: AttentionMode) -> Result<()> {
        let dataset = Dataset::load(self.cfg, &self.paths)?;
        let grids = self.load_grids(&dataset)?;
        let mut gcn = load_gcn(self.cfg, dataset.classes(), &self.paths.skeleton_model())?;
        let mut rgb = RgbNet::new(self.cfg.rgb_config_for(dataset.classes()), &mut Rng::new(self.cfg.seed).fork(5))?;
        let examples = |idx: &[usize]| -> Vec<RgbExample> {
            idx.iter()
                .map(|&i| RgbExample {
                    grid: &grids[i],
                    skeleton: &dataset.skeletons[i],
                    label: dataset.manifest.samples[i].label,
                })
                .collect()
        };
        let (train, test) = (examples(&dataset.indices(Split::Train)), examples(&dataset.indices(Split::Test)));
        let out = train_rgb_stage(
            &mut rgb,
            &mut gcn,
            &dataset.template,
            &train,
            &test,
            &self.cfg.train,
            mode,
            mode == AttentionMode::Soft,
        )?;
        save_checkpoint(&rgb.export(), &self.paths.rgb_model(mode))?;
        let record = InputRecord {
            mode,
            side: out.input.side,
            mean: out.input.stats.mean,
            std: out.input.stats.std,
        };
        write_bytes(&self.paths.rgb_input(mode), to_json(&record).as_bytes())?;
        if mode == AttentionMode::Soft {
            save_checkpoint(&gcn.export(), &self.paths.rgb_skeleton(mode))?;
        }
        write_metrics(&self.paths.rgb_metrics(mode), &out.records)?;
        let last = out.records.last().expect("at least one epoch");
        say!(
            self,
            "rgb ({}): loss {:.4}, train accuracy {:.4}, held-out accuracy {}",
            mode.name(),
            last.loss,
            last.train_acc,
            last.val_acc.map_or("n/a".into(), |a| format!("{a:.4}"))
        );
        Ok(())
    }

    fn predict_rgb_mode(&self, dataset: &Dataset, grids: &[StRoiGrid], idx: &[usize], mode: AttentionMode) -> Result<Vec<Vec<f32>>> {
        let rgb = RgbNet::import(self.cfg.rgb_config_for(dataset.classes()), &load_checkpoint(&self.paths.rgb_model(mode))?)?;
        let record: InputRecord = from_json(&self.paths.rgb_input(mode))?;
        let spec = RgbInputSpec {
            mode: record.mode,
            side: record.side,
            stats: ChannelStats {
                mean: record.mean,
                std: record.std,
            },
        };
        let gcn = self.weighting_gcn(dataset, mode)?;
        let examples: Vec<RgbExample> = idx
            .iter()
            .map(|&i| RgbExample {
                grid: &grids[i],
                skeleton: &dataset.skeletons[i],
                label: dataset.manifest.samples[i].label,
            })
            .collect();
        predict_rgb(&rgb, &gcn, &dataset.template, &examples, &spec, self.cfg.train.batch_size)
    }

    /// Held-out predictions of every trained model; `require` names an RGB
    /// mode whose checkpoint must exist.
    fn predictions(&self, dataset: &Dataset, idx: &[usize], require: Option<AttentionMode>) -> Result<Predictions> {
        let gcn = load_gcn(self.cfg, dataset.classes(), &self.paths.skeleton_model())?;
        let skeleton = predict_skeleton(&gcn, &dataset.sequences(idx), self.cfg.train.batch_size)?;
        let grids = if self.paths.grids().exists() {
            Some(self.load_grids(dataset)?)
        } else {
            None
        };
        let rgb = |mode: AttentionMode| -> Result<Option<Vec<Vec<f32>>>> {
            let present = self.paths.rgb_model(mode).exists();
            if !present && require != Some(mode) {
                return Ok(None);
            }
            let grids = grids.as_ref().ok_or_else(|| {
                Error::io(self.paths.grids(), std::io::Error::new(std::io::ErrorKind::NotFound, "no ST-ROI images"))
            })?;
            self.predict_rgb_mode(dataset, grids, idx, mode).map(Some)
        };
        Ok(Predictions {
            skeleton: Some(skeleton),
            rgb_plain: rgb(AttentionMode::None)?,
            rgb_soft: rgb(AttentionMode::Soft)?,
            rgb_fixed: rgb(AttentionMode::Fixed)?,
        })
    }

    /// The seven-row ablation table on the held-out split.
    pub fn evaluate(&mut self, require: Option<AttentionMode>) -> Result<Vec<AblationRow>> {
        let dataset = Dataset::load(self.cfg, &self.paths)?;
        let test = dataset.indices(Split::Test);
        let labels = dataset.labels(&test);
        let p = self.predictions(&dataset, &test, require)?;
        let rows = ablation_report(&p, &labels)?;
        let report = format_report(&rows);
        write_bytes(&self.paths.report(), report.as_bytes())?;
        say!(self, "{report}");
        Ok(rows)
    }

    /// Algorithm step 6: average the skeleton and RGB probabilities.
    pub fn ensemble(&mut self, mode: AttentionMode) -> Result<()> {
        let dataset = Dataset::load(self.cfg, &self.paths)?;
        let test = dataset.indices(Split::Test);
        let labels = dataset.labels(&test);
        let p = self.predictions(&dataset, &test, Some(mode))?;
        let rgb = match mode {
            AttentionMode::None => &p.rgb_plain,
            AttentionMode::Fixed => &p.rgb_fixed,
            AttentionMode::Soft => &p.rgb_soft,
        }
        .as_ref()
        .expect("required mode loaded");
        let skeleton = p.skeleton.as_ref().expect("skeleton loaded");
        let result = ensemble(skeleton, rgb, &labels)?;
        let mut text = format!(
            "# mode {}\n# skeleton accuracy {:.4}\n# rgb accuracy {:.4}\n# ensemble accuracy {:.4}\n# id label skeleton rgb ensemble\n",
            mode.name(),
            result.skeleton_accuracy,
            result.rgb_accuracy,
            result.combined_accuracy
        );
        for (k, &i) in test.iter().enumerate() {
            let _ = writeln!(
                text,
                "{} {} {} {} {}",
                dataset.manifest.samples[i].id,
                labels[k],
                argmax(&skeleton[k]),
                argmax(&rgb[k]),
                result.entries[k].class
            );
        }
        write_bytes(&self.paths.ensemble(mode), text.as_bytes())?;
        let report = format_report(&ablation_report(&p, &labels)?);
        write_bytes(&self.paths.report(), report.as_bytes())?;
        say!(
            self,
            "ensemble ({}): skeleton {:.4}, rgb {:.4}, combined {:.4}\n\n{report}",
            mode.name(),
            result.skeleton_accuracy,
            result.rgb_accuracy,
            result.combined_accuracy
        );
        Ok(())
    }

    /// Finite-difference checks; true when every relative error is below
    /// `tolerance`.
    pub fn grad_check(&mut self, tolerance: f32) -> Result<bool> {
        let cases: Vec<GradCase> = gradient_suite(self.cfg.seed)?;
        let mut passed = true;
        for c in &cases {
            let ok = c.max_rel_error < tolerance;
            passed &= ok;
            say!(
                self,
                "{:<24} {:.3e} {:<4} ({} redraws)",
                c.name,
                c.max_rel_error,
                if ok { "ok" } else { "FAIL" },
                c.redraws
            );
        }
        Ok(passed)
    }
}

/// Held-out accuracy of saved probabilities; exposed for reports.
pub fn accuracy_of(probs: &[Vec<f32>], labels: &[usize]) -> f64 {
    accuracy(&probs.iter().map(|p| argmax(p)).collect::<Vec<_>>(), labels)
}
