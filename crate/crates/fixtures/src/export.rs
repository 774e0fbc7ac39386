//! Writes the golden bundle.
//!
//! ```text
//! models/<net>.onnx, models/<net>.toml
//! images/<scene>.png
//! dataset/list.txt, dataset/classes.txt, dataset/labels/, dataset/saliency/
//! goldens/<scene>__<net>__c<k>.npy (+ .meta)   lifted, normalized maps
//! goldens/<scene>__iterated.npy (+ .meta)      refined whole-image maps
//! goldens.json
//! ```

use std::io;
use std::path::Path;

use serde::Serialize;

use crate::io::{write_gray_png, write_label_png, write_meta, write_npy, write_rgb_png, write_text};
use crate::net::{self, NetRecipe, CLASSES, CLASS_NAMES, UNITS};
use crate::onnx::model_bytes;
use crate::oracle::{self, Rgb, Step};
use crate::scenes::{self, Scene};

#[derive(Serialize)]
struct ModelEntry {
    name: &'static str,
    file: String,
    manifest: String,
    classes: usize,
    units: usize,
    recipe: NetRecipe,
}

#[derive(Serialize)]
struct CamEntry {
    class_id: usize,
    grid: Vec<f64>,
    map: String,
}

#[derive(Serialize)]
struct ForwardEntry {
    scene: &'static str,
    model: &'static str,
    height: usize,
    width: usize,
    scores: Vec<f64>,
    feature_height: usize,
    feature_width: usize,
    /// Unit-major.
    features: Vec<f64>,
    cams: Vec<CamEntry>,
}

#[derive(Serialize)]
struct IterEntry {
    scene: &'static str,
    model: &'static str,
    class_id: usize,
    steps: Vec<Step>,
    stopped_early: bool,
    /// Erased pixels of the first iteration lying outside blob A.
    first_erase_outside_a: usize,
    map: String,
}

#[derive(Serialize)]
struct EndToEnd {
    model: &'static str,
    scenes: Vec<&'static str>,
    baseline_threshold: f64,
    baseline_miou: f64,
    refined_threshold: f64,
    refined_miou: f64,
}

#[derive(Serialize)]
struct LossCase {
    name: String,
    channels: usize,
    height: usize,
    width: usize,
    alpha: f64,
    logits: Vec<f64>,
    pseudo: Vec<u8>,
    /// 8-bit saliency values; the loss sees them divided by 255.
    saliency: Vec<u8>,
    value: oracle::LossValue,
    self_check: f64,
}

#[derive(Serialize)]
struct Goldens {
    models: Vec<ModelEntry>,
    scenes: Vec<Scene>,
    /// Features of an all-black image: only the constant unit responds.
    bias_response: [f64; UNITS],
    forward: Vec<ForwardEntry>,
    iterative: Vec<IterEntry>,
    end_to_end: EndToEnd,
    loss: Vec<LossCase>,
}

fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

fn forward_entry(dir: &Path, net: &NetRecipe, scene: &Scene) -> io::Result<ForwardEntry> {
    let img = Rgb::from_scene(scene);
    let fwd = oracle::forward(net, &img);
    let mut cams = Vec::new();
    for class_id in 0..CLASSES {
        let grid = oracle::cam(net, &fwd, class_id);
        let map = oracle::normalized(&oracle::resize(
            &grid,
            fwd.feature_height,
            fwd.feature_width,
            scene.height,
            scene.width,
        ));
        let file = format!("goldens/{}__{}__c{class_id}.npy", scene.name, net.name);
        write_npy(&dir.join(&file), scene.height, scene.width, &to_f32(&map))?;
        write_meta(&dir.join(&file), class_id, scene.height, scene.width)?;
        cams.push(CamEntry {
            class_id,
            grid,
            map: file,
        });
    }
    Ok(ForwardEntry {
        scene: scene.name,
        model: net.name,
        height: scene.height,
        width: scene.width,
        scores: fwd.scores,
        feature_height: fwd.feature_height,
        feature_width: fwd.feature_width,
        features: fwd.features.concat(),
        cams,
    })
}

fn iter_entry(dir: &Path, net: &NetRecipe, scene: &Scene) -> io::Result<IterEntry> {
    let img = Rgb::from_scene(scene);
    let run = oracle::iterate(net, &img, 0, img.mean());
    let a = scene.blob("a").expect("two-blob scenes have blob a");
    let first_erase_outside_a = run.erased.first().map_or(0, |mask| {
        mask.iter()
            .enumerate()
            .filter(|&(i, &m)| m && !a.contains(i / scene.width, i % scene.width))
            .count()
    });
    let file = format!("goldens/{}__iterated.npy", scene.name);
    write_npy(&dir.join(&file), scene.height, scene.width, &to_f32(&run.map))?;
    write_meta(&dir.join(&file), 0, scene.height, scene.width)?;
    Ok(IterEntry {
        scene: scene.name,
        model: net.name,
        class_id: 0,
        steps: run.steps,
        stopped_early: run.stopped_early,
        first_erase_outside_a,
        map: file,
    })
}

fn end_to_end(net: &NetRecipe) -> EndToEnd {
    let suite = scenes::suite();
    let mut baseline = Vec::new();
    let mut refined = Vec::new();
    for scene in &suite {
        let img = Rgb::from_scene(scene);
        baseline.push((oracle::response(net, &img, 0), scene.label()));
        refined.push((oracle::split_and_unite(net, &img, 0), scene.label()));
    }
    let (baseline_threshold, baseline_miou) = oracle::best_binary_miou(&baseline, &oracle::thresholds());
    let (refined_threshold, refined_miou) = oracle::best_binary_miou(&refined, &oracle::thresholds());
    EndToEnd {
        model: net.name,
        scenes: suite.iter().map(|s| s.name).collect(),
        baseline_threshold,
        baseline_miou,
        refined_threshold,
        refined_miou,
    }
}

/// Deterministic values in `[0, 1)` without an RNG dependency.
struct Lcg(u64);

impl Lcg {
    fn next(&mut self) -> f64 {
        self.0 = self.0.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (self.0 >> 11) as f64 / (1u64 << 53) as f64
    }
}

fn loss_cases() -> Vec<LossCase> {
    let (h, w) = (4, 4);
    let n = h * w;
    let mut cases = Vec::new();
    for (seed, classes) in [(1u64, 2usize), (2, 20)] {
        let mut rng = Lcg(seed);
        let channels = classes + 1;
        let logits: Vec<f64> = (0..channels * n).map(|_| rng.next() * 6.0 - 3.0).collect();
        let pseudo: Vec<u8> = (0..n)
            .map(|_| {
                let r = rng.next();
                if r < 0.1 {
                    255
                } else if r < 0.5 {
                    0
                } else {
                    1 + (rng.next() * classes as f64) as u8
                }
            })
            .collect();
        let saliency: Vec<u8> = (0..n).map(|_| (rng.next() * 256.0) as u8).collect();
        cases.push(loss_case(format!("random_c{classes}"), channels, h, w, logits, pseudo, saliency));
    }
    // background everywhere in the pseudo label, salient everywhere: no agreement
    let mut rng = Lcg(3);
    let logits: Vec<f64> = (0..3 * n).map(|_| rng.next() * 4.0 - 2.0).collect();
    cases.push(loss_case("zero_tau".into(), 3, h, w, logits, vec![0; n], vec![255; n]));
    cases
}

fn loss_case(name: String, channels: usize, height: usize, width: usize, logits: Vec<f64>, pseudo: Vec<u8>, saliency: Vec<u8>) -> LossCase {
    let alpha = 0.08;
    let s: Vec<f64> = saliency.iter().map(|&v| v as f64 / 255.0).collect();
    let value = oracle::loss(&logits, channels, &pseudo, &s, alpha);
    let self_check = oracle::loss_self_check(&logits, channels, &pseudo, &s, alpha);
    LossCase {
        name,
        channels,
        height,
        width,
        alpha,
        logits,
        pseudo,
        saliency,
        value,
        self_check,
    }
}

fn write_dataset(dir: &Path) -> io::Result<()> {
    let ds = dir.join("dataset");
    std::fs::create_dir_all(ds.join("labels"))?;
    std::fs::create_dir_all(ds.join("saliency"))?;
    let suite = scenes::suite();
    for scene in &suite {
        write_label_png(&ds.join("labels").join(format!("{}.png", scene.name)), scene.height, scene.width, &scene.label())?;
        write_gray_png(&ds.join("saliency").join(format!("{}.png", scene.name)), scene.height, scene.width, &scene.saliency())?;
    }
    let ids: Vec<String> = suite.iter().map(|s| s.name.to_string()).collect();
    write_text(&ds.join("list.txt"), &ids)?;
    let classes: Vec<String> = ids.iter().map(|id| format!("{id} {}", CLASS_NAMES[0])).collect();
    write_text(&ds.join("classes.txt"), &classes)
}

pub fn export(dir: &Path) -> io::Result<()> {
    for sub in ["models", "images", "goldens"] {
        std::fs::create_dir_all(dir.join(sub))?;
    }
    let nets = net::all();
    let mut models = Vec::new();
    for n in &nets {
        let file = format!("models/{}.onnx", n.name);
        let manifest = format!("models/{}.toml", n.name);
        std::fs::write(dir.join(&file), model_bytes(n))?;
        std::fs::write(dir.join(&manifest), net::manifest_toml())?;
        models.push(ModelEntry {
            name: n.name,
            file,
            manifest,
            classes: CLASSES,
            units: UNITS,
            recipe: n.clone(),
        });
    }

    let probes = scenes::probes();
    let mut forward = Vec::new();
    for scene in &probes {
        write_rgb_png(&dir.join(format!("images/{}.png", scene.name)), scene.height, scene.width, &scene.pixels)?;
        forward.push(forward_entry(dir, &nets[0], scene)?);
    }
    for scene in [scenes::checker16(), scenes::black16(), scenes::gray64()] {
        forward.push(forward_entry(dir, &nets[1], &scene)?);
    }

    let black = oracle::forward(&nets[0], &Rgb::from_scene(&scenes::black16()));
    let bias_response = std::array::from_fn(|k| black.features[k][0]);

    let iterative = [scenes::two_blob(), scenes::one_percent(), scenes::one_percent_plus()]
        .iter()
        .map(|s| iter_entry(dir, &nets[0], s))
        .collect::<io::Result<Vec<_>>>()?;

    write_dataset(dir)?;

    let goldens = Goldens {
        models,
        scenes: probes,
        bias_response,
        forward,
        iterative,
        end_to_end: end_to_end(&nets[0]),
        loss: loss_cases(),
    };
    let json = serde_json::to_string_pretty(&goldens).map_err(io::Error::other)?;
    std::fs::write(dir.join("goldens.json"), json + "\n")
}
