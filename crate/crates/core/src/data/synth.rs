//! Synthetic diagnostic tasks.
//!
//! Every image has `K` regions. Signal sits in up to two channel blocks:
//!
//! - object block (`W` channels, `W` the smallest power of two above
//!   `K + C`): region `k` carries `A·id(obj_k) + A·(col(c_k) - mean_k
//!   col(c_k) + mean_c col(c))`, where `id` and `col` are distinct rows of
//!   the `W×W` Sylvester Hadamard matrix. Object ids are a random permutation
//!   of `0..K`, so the row order reveals nothing, and the centering makes the
//!   per-channel mean over regions identical for every image. Both codes are
//!   spread over every channel of the block;
//! - attributes (`3·C` channels): a one-hot of height `A·√W` per family
//!   (shape, size, material), identical in every region. Every code thus has
//!   the same L2 norm.
//!
//! Remaining channels hold uniform noise in ±0.1. Spatial questions ask for
//! the color of one object id, channel questions for one attribute family.
//! The spatial task omits the attribute block and the channel task omits the
//! object block.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;

use super::{
    build_vocab, write_examples, FeatureContainer, RawExample, ANSWER_VOCAB_FILE, FEATURES_FILE,
    QUESTION_VOCAB_FILE, TAXONOMY_FILE, TEST_FILE, TRAIN_FILE,
};
use crate::attention::RegionFeatureMap;
use crate::error::{Error, Result};
use crate::rng::{self, Stream};
use crate::tensor::Tensor;

pub const MAX_COLORS: usize = 8;
pub const DEFAULT_AMPLITUDE: f64 = 4.0;
const NOISE: f64 = 0.1;

const COLORS: [&str; MAX_COLORS] = [
    "red", "green", "blue", "yellow", "purple", "orange", "brown", "gray",
];
const FAMILIES: [(&str, [&str; MAX_COLORS]); 3] = [
    (
        "shape",
        [
            "cube", "sphere", "cylinder", "cone", "torus", "prism", "pyramid", "ring",
        ],
    ),
    (
        "size",
        [
            "tiny", "small", "medium", "large", "huge", "giant", "massive", "minute",
        ],
    ),
    (
        "material",
        [
            "metal", "rubber", "wood", "glass", "stone", "cloth", "paper", "plastic",
        ],
    ),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Task {
    Spatial,
    Channel,
    Mixed,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Spatial, Task::Channel, Task::Mixed];

    pub fn name(self) -> &'static str {
        match self {
            Task::Spatial => "spatial",
            Task::Channel => "channel",
            Task::Mixed => "mixed",
        }
    }

    fn spatial(self) -> bool {
        self != Task::Channel
    }

    fn channel(self) -> bool {
        self != Task::Spatial
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "spatial" => Ok(Task::Spatial),
            "channel" => Ok(Task::Channel),
            "mixed" => Ok(Task::Mixed),
            _ => Err(Error::invalid(format!(
                "unknown task `{s}` (valid: spatial, channel, mixed)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthConfig {
    pub task: Task,
    pub train: usize,
    pub test: usize,
    pub regions: usize,
    pub channels: usize,
    pub colors: usize,
    /// Scale `A` of every signal code.
    pub amplitude: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            task: Task::Spatial,
            train: 2000,
            test: 500,
            regions: 6,
            channels: 32,
            colors: 5,
            amplitude: DEFAULT_AMPLITUDE,
            seed: 0,
        }
    }
}

/// Channel offsets of each signal block; `None` when the task omits it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ToyLayout {
    pub regions: usize,
    pub channels: usize,
    pub colors: usize,
    pub amplitude: f64,
    /// Offset of the object block.
    pub objects: Option<usize>,
    /// Width of the object block.
    pub code_width: usize,
    pub attributes: Option<usize>,
}

impl ToyLayout {
    pub fn new(cfg: &SynthConfig) -> Result<Self> {
        let (k, d, c) = (cfg.regions, cfg.channels, cfg.colors);
        if cfg.train + cfg.test == 0 {
            return Err(Error::invalid("dataset size must be at least 1"));
        }
        if k < 2 {
            return Err(Error::invalid(format!("need at least 2 regions, got {k}")));
        }
        if d < 8 {
            return Err(Error::invalid(format!("need at least 8 channels, got {d}")));
        }
        if !(2..=MAX_COLORS).contains(&c) {
            return Err(Error::invalid(format!(
                "colors must be in 2..={MAX_COLORS}, got {c}"
            )));
        }
        if !(cfg.amplitude.is_finite() && cfg.amplitude > 0.0) {
            return Err(Error::invalid(format!(
                "amplitude must be positive, got {}",
                cfg.amplitude
            )));
        }
        let mut next = 0;
        let mut block = |on: bool, width: usize| {
            on.then(|| {
                let at = next;
                next += width;
                at
            })
        };
        let code_width = (k + c + 1).next_power_of_two();
        let objects = block(cfg.task.spatial(), code_width);
        let attributes = block(cfg.task.channel(), FAMILIES.len() * c);
        if next > d {
            return Err(Error::invalid(format!(
                "{} task with K={k}, C={c} needs at least {next} channels, got {d}",
                cfg.task
            )));
        }
        Ok(ToyLayout {
            regions: k,
            channels: d,
            colors: c,
            amplitude: cfg.amplitude,
            objects,
            code_width,
            attributes,
        })
    }

    pub fn families(&self) -> usize {
        FAMILIES.len()
    }

    pub fn color_name(&self, i: usize) -> &'static str {
        COLORS[i]
    }

    pub fn family_name(&self, f: usize) -> &'static str {
        FAMILIES[f].0
    }

    pub fn family_value(&self, f: usize, i: usize) -> &'static str {
        FAMILIES[f].1[i]
    }

    /// Family index named by a channel question's final token.
    pub fn family_index(&self, name: &str) -> Option<usize> {
        FAMILIES.iter().position(|(n, _)| *n == name)
    }

    /// Code of object id `i` over the object block, entries ±1.
    pub fn identity_code(&self, i: usize) -> Vec<f64> {
        hadamard_row(1 + i, self.code_width)
    }

    /// Code of color `c` over the object block, entries ±1.
    pub fn color_code(&self, c: usize) -> Vec<f64> {
        hadamard_row(1 + self.regions + c, self.code_width)
    }

    fn signal_width(&self) -> usize {
        let mut w = 0;
        if self.objects.is_some() {
            w += self.code_width;
        }
        if self.attributes.is_some() {
            w += FAMILIES.len() * self.colors;
        }
        w
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyDataset {
    pub config: SynthConfig,
    pub layout: ToyLayout,
    pub features: FeatureContainer,
    pub train: Vec<RawExample>,
    pub test: Vec<RawExample>,
}

fn hadamard_row(i: usize, width: usize) -> Vec<f64> {
    (0..width)
        .map(|j| {
            if (i & j).count_ones().is_multiple_of(2) {
                1.0
            } else {
                -1.0
            }
        })
        .collect()
}

fn f32_round(x: f64) -> f64 {
    x as f32 as f64
}

/// Colors with no value used more than `max(2, ceil(K/C))` times, so the
/// queried color stays clearly ahead of the per-image offset.
fn sample_colors<R: Rng>(rng: &mut R, k: usize, c: usize) -> Vec<usize> {
    let cap = 2.max(k.div_ceil(c));
    loop {
        let colors: Vec<usize> = (0..k).map(|_| rng.random_range(0..c)).collect();
        let mut hist = vec![0; c];
        colors.iter().for_each(|&x| hist[x] += 1);
        if hist.iter().all(|&h| h <= cap) {
            return colors;
        }
    }
}

fn make_example<R: Rng>(
    rng: &mut R,
    layout: &ToyLayout,
    task: Task,
    image_id: String,
) -> Result<(RegionFeatureMap, RawExample)> {
    let (k, d, c) = (layout.regions, layout.channels, layout.colors);
    let mut ids: Vec<usize> = (0..k).collect();
    ids.shuffle(rng);
    let colors = sample_colors(rng, k, c);
    let attrs: Vec<usize> = (0..FAMILIES.len())
        .map(|_| rng.random_range(0..c))
        .collect();

    let mut data = vec![0.0; k * d];
    let signal = layout.signal_width();
    for row in data.chunks_mut(d) {
        for x in &mut row[signal..] {
            *x = rng.random_range(-NOISE..NOISE);
        }
    }
    if let Some(at) = layout.objects {
        let w = layout.code_width;
        let codes: Vec<Vec<f64>> = (0..c).map(|j| layout.color_code(j)).collect();
        let mut offset = vec![0.0; w];
        for j in 0..w {
            let image_mean = colors.iter().map(|&x| codes[x][j]).sum::<f64>() / k as f64;
            let palette_mean = codes.iter().map(|code| code[j]).sum::<f64>() / c as f64;
            offset[j] = palette_mean - image_mean;
        }
        for (r, row) in data.chunks_mut(d).enumerate() {
            let id = layout.identity_code(ids[r]);
            for (j, x) in row[at..at + w].iter_mut().enumerate() {
                *x = layout.amplitude * (id[j] + codes[colors[r]][j] + offset[j]);
            }
        }
    }
    if let Some(at) = layout.attributes {
        // same L2 norm as an object code
        let attribute = layout.amplitude * (layout.code_width as f64).sqrt();
        for row in data.chunks_mut(d) {
            for (f, &v) in attrs.iter().enumerate() {
                row[at + f * c + v] = attribute;
            }
        }
    }
    data.iter_mut().for_each(|x| *x = f32_round(*x));
    let map = RegionFeatureMap::new(Tensor::new(vec![k, d], data)?)?;

    let ask_spatial = match task {
        Task::Spatial => true,
        Task::Channel => false,
        Task::Mixed => rng.random_bool(0.5),
    };
    let words: Vec<String>;
    let answer: &str;
    if ask_spatial {
        let target = rng.random_range(0..k);
        let row = ids
            .iter()
            .position(|&i| i == target)
            .expect("ids are a permutation");
        words = vec![
            "what".into(),
            "color".into(),
            "is".into(),
            format!("object{target}"),
        ];
        answer = COLORS[colors[row]];
    } else {
        let f = rng.random_range(0..FAMILIES.len());
        words = ["what", "is", "the", FAMILIES[f].0]
            .map(String::from)
            .to_vec();
        answer = FAMILIES[f].1[attrs[f]];
    }
    let raw = RawExample {
        image_id,
        tokens: words,
        answers: vec![answer.to_string(); super::HUMAN_ANSWERS],
        label: answer.to_string(),
    };
    Ok((map, raw))
}

/// Deterministic in every field of `cfg`. Each example gets its own image;
/// the first `cfg.train` examples form the training split.
pub fn generate_toy_dataset(cfg: &SynthConfig) -> Result<ToyDataset> {
    let layout = ToyLayout::new(cfg)?;
    let mut rng = rng::stream(cfg.seed, Stream::Data, 0);
    let mut features = FeatureContainer::new();
    let mut train = Vec::with_capacity(cfg.train);
    let mut test = Vec::with_capacity(cfg.test);
    for i in 0..cfg.train + cfg.test {
        let id = format!("img{i:06}");
        let (map, raw) = make_example(&mut rng, &layout, cfg.task, id.clone())?;
        features.insert(id, map)?;
        if i < cfg.train {
            train.push(raw);
        } else {
            test.push(raw);
        }
    }
    Ok(ToyDataset {
        config: *cfg,
        layout,
        features,
        train,
        test,
    })
}

/// Edge list for the answer words: `entity` at the root, one node per
/// family, and every answer word under its family.
pub fn toy_taxonomy() -> String {
    let mut s = String::new();
    let mut family = |name: &str, words: &[&str]| {
        s.push_str(&format!("entity\t{name}\n"));
        for w in words {
            s.push_str(&format!("{name}\t{w}\n"));
        }
    };
    family("color", &COLORS);
    for (name, words) in &FAMILIES {
        family(name, words);
    }
    s
}

/// Writes features, both splits, vocabularies built from the training
/// split, and the toy taxonomy into `dir`.
pub fn write_dataset_dir(dir: &Path, data: &ToyDataset, answer_cap: usize) -> Result<()> {
    fs::create_dir_all(dir)?;
    super::write_features(&dir.join(FEATURES_FILE), &data.features)?;
    write_examples(&dir.join(TRAIN_FILE), &data.train)?;
    write_examples(&dir.join(TEST_FILE), &data.test)?;
    let source = if data.train.is_empty() {
        &data.test
    } else {
        &data.train
    };
    let (q, a) = build_vocab(source, answer_cap)?;
    q.write(&dir.join(QUESTION_VOCAB_FILE))?;
    a.write(&dir.join(ANSWER_VOCAB_FILE))?;
    fs::write(dir.join(TAXONOMY_FILE), toy_taxonomy())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(task: Task) -> SynthConfig {
        SynthConfig {
            task,
            train: 40,
            test: 10,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate_toy_dataset(&cfg(Task::Mixed)).unwrap();
        let b = generate_toy_dataset(&cfg(Task::Mixed)).unwrap();
        assert_eq!(a, b);
        let c = generate_toy_dataset(&SynthConfig {
            seed: 1,
            ..cfg(Task::Mixed)
        })
        .unwrap();
        assert_ne!(a.train, c.train);
    }

    #[test]
    fn size_validation() {
        for bad in [
            SynthConfig {
                regions: 1,
                ..cfg(Task::Spatial)
            },
            SynthConfig {
                channels: 7,
                ..cfg(Task::Spatial)
            },
            SynthConfig {
                train: 0,
                test: 0,
                ..cfg(Task::Spatial)
            },
            SynthConfig {
                colors: 9,
                ..cfg(Task::Spatial)
            },
            SynthConfig {
                channels: 10,
                ..cfg(Task::Channel)
            },
        ] {
            assert!(
                matches!(generate_toy_dataset(&bad), Err(Error::InvalidArgument(_))),
                "{bad:?}"
            );
        }
        assert!(generate_toy_dataset(&SynthConfig {
            regions: 2,
            channels: 8,
            ..cfg(Task::Spatial)
        })
        .is_ok());
    }

    #[test]
    fn object_block_means_are_constant() {
        let data = generate_toy_dataset(&cfg(Task::Spatial)).unwrap();
        let (at, w) = (data.layout.objects.unwrap(), data.layout.code_width);
        let means = |map: &RegionFeatureMap| -> Vec<f64> {
            (0..w)
                .map(|j| (0..6).map(|r| map.tensor().get(&[r, at + j])).sum::<f64>() / 6.0)
                .collect()
        };
        let mut maps = data.features.iter().map(|(_, m)| m);
        let first = means(maps.next().unwrap());
        for map in maps {
            for (a, b) in means(map).iter().zip(&first) {
                assert!((a - b).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn codes_are_orthogonal() {
        let layout = ToyLayout::new(&SynthConfig::default()).unwrap();
        let mut codes: Vec<Vec<f64>> = (0..6).map(|i| layout.identity_code(i)).collect();
        codes.extend((0..5).map(|c| layout.color_code(c)));
        for (i, a) in codes.iter().enumerate() {
            for (j, b) in codes.iter().enumerate() {
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                assert_eq!(
                    dot,
                    if i == j {
                        layout.code_width as f64
                    } else {
                        0.0
                    }
                );
            }
        }
    }

    #[test]
    fn taxonomy_covers_every_answer() {
        let tax = toy_taxonomy();
        let data = generate_toy_dataset(&cfg(Task::Mixed)).unwrap();
        for e in data.train.iter().chain(&data.test) {
            assert!(tax.contains(&format!("\t{}\n", e.label)));
        }
    }
}
