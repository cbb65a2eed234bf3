//! Rule-based readers of the synthetic encoding.

use std::fs;

use cva_core::attention::{channel_mean_pool, RegionFeatureMap};
use cva_core::data::{
    generate_toy_dataset, write_dataset_dir, RawExample, SynthConfig, Task, ToyDataset, ToyLayout,
};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn object_block<'a>(layout: &ToyLayout, row: &'a [f64]) -> &'a [f64] {
    let at = layout.objects.expect("spatial layout");
    &row[at..at + layout.code_width]
}

fn read_color(layout: &ToyLayout, block: &[f64]) -> &'static str {
    let scores: Vec<f64> = (0..layout.colors)
        .map(|c| (dot(block, &layout.color_code(c)) * 1e4).round())
        .collect();
    layout.color_name(argmax(&scores))
}

fn read_attribute(layout: &ToyLayout, row: &[f64], family: &str) -> &'static str {
    let f = layout.family_index(family).expect("known family");
    let at = layout.attributes.expect("channel layout") + f * layout.colors;
    layout.family_value(f, argmax(&row[at..at + layout.colors]))
}

/// Locates the asked object by its identity code, then reads its color.
fn full_reader(layout: &ToyLayout, map: &RegionFeatureMap, ex: &RawExample) -> &'static str {
    let last = ex.tokens.last().unwrap();
    if let Some(id) = last.strip_prefix("object") {
        let code = layout.identity_code(id.parse().unwrap());
        let scores: Vec<f64> = (0..map.regions())
            .map(|r| dot(object_block(layout, map.tensor().row(r)), &code))
            .collect();
        read_color(
            layout,
            object_block(layout, map.tensor().row(argmax(&scores))),
        )
    } else {
        read_attribute(layout, map.tensor().row(0), last)
    }
}

/// Sees only the per-channel region mean.
fn mean_reader(layout: &ToyLayout, map: &RegionFeatureMap, ex: &RawExample) -> &'static str {
    let u = channel_mean_pool(map);
    let last = ex.tokens.last().unwrap();
    if last.starts_with("object") {
        read_color(layout, object_block(layout, u.data()))
    } else {
        read_attribute(layout, u.data(), last)
    }
}

fn accuracy(
    data: &ToyDataset,
    reader: impl Fn(&ToyLayout, &RegionFeatureMap, &RawExample) -> &'static str,
) -> f64 {
    let all: Vec<&RawExample> = data.train.iter().chain(&data.test).collect();
    let hits = all
        .iter()
        .filter(|ex| reader(&data.layout, data.features.get(&ex.image_id).unwrap(), ex) == ex.label)
        .count();
    hits as f64 / all.len() as f64
}

fn dataset(task: Task, seed: u64) -> ToyDataset {
    generate_toy_dataset(&SynthConfig {
        task,
        seed,
        ..SynthConfig::default()
    })
    .unwrap()
}

#[test]
fn full_reader_solves_every_task() {
    for task in Task::ALL {
        for seed in 0..3 {
            assert_eq!(
                accuracy(&dataset(task, seed), full_reader),
                1.0,
                "{task} seed {seed}"
            );
        }
    }
}

#[test]
fn spatial_task_is_at_chance_from_channel_means() {
    for seed in 0..3 {
        let acc = accuracy(&dataset(Task::Spatial, seed), mean_reader);
        assert!((acc - 0.2).abs() <= 0.05, "seed {seed}: {acc}");
    }
}

#[test]
fn channel_task_is_solved_from_channel_means() {
    assert_eq!(accuracy(&dataset(Task::Channel, 0), mean_reader), 1.0);
}

#[test]
fn channel_labels_survive_region_shuffles() {
    let data = dataset(Task::Channel, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for ex in &data.test {
        let map = data.features.get(&ex.image_id).unwrap();
        let mut perm: Vec<usize> = (0..map.regions()).collect();
        perm.shuffle(&mut rng);
        assert_eq!(
            full_reader(&data.layout, &map.permuted(&perm).unwrap(), ex),
            ex.label
        );
    }
}

#[test]
fn same_seed_writes_identical_files() {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        write_dataset_dir(d.path(), &dataset(Task::Mixed, 11), 2000).unwrap();
    }
    let mut names: Vec<_> = fs::read_dir(dirs[0].path())
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    assert_eq!(names.len(), 6);
    for name in names {
        let a = fs::read(dirs[0].path().join(&name)).unwrap();
        let b = fs::read(dirs[1].path().join(&name)).unwrap();
        assert!(a == b, "{name:?} differs");
    }
}
