use filmseg::data::{gen_ambiguous_dataset, gen_multiorgan_dataset, Sample};
use filmseg::eval::sample_dice;
use filmseg::model::{FilmUNet, ModelConfig};
use filmseg::train::{train_on, MetadataMode, TrainConfig};

fn small_model(film: bool, seed: u64) -> FilmUNet {
    let config = ModelConfig {
        depth: 1,
        base_filters: 4,
        film_enabled: film,
        ..ModelConfig::default()
    };
    FilmUNet::init(config, seed).unwrap()
}

fn config(max_epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        max_epochs,
        batch_size: 4,
        initial_lr: 0.01,
        seed,
        ..TrainConfig::default()
    }
}

#[test]
fn overfits_a_handful_of_subjects() {
    let ds = gen_multiorgan_dataset(&[(0, 4)], (16, 16), 2).unwrap();
    let set: Vec<&Sample> = ds.samples.iter().collect();
    let out = train_on(small_model(true, 1), &set, &set, &config(120, 3), MetadataMode::TrueClass).unwrap();
    let first = out.curves[0].train_loss;
    let dice = sample_dice(&out.model, &set, |s| s.class_id).unwrap();
    let mean = dice.iter().sum::<f64>() / dice.len() as f64;
    assert!(out.best_valid_loss < 0.5 * first, "{} vs {first}", out.best_valid_loss);
    assert!(mean > 0.8, "train dice {mean}");
}

#[test]
fn training_is_deterministic_in_seed() {
    let ds = gen_ambiguous_dataset(3, (16, 16), 4).unwrap();
    let set: Vec<&Sample> = ds.samples.iter().collect();
    let (train, valid) = set.split_at(6);
    let run = |seed| train_on(small_model(true, 7), train, valid, &config(4, seed), MetadataMode::TrueClass).unwrap();
    let (a, b, c) = (run(1), run(1), run(2));
    assert_eq!(a.curves, b.curves);
    assert_eq!(a.model.params(), b.model.params());
    assert_ne!(a.curves, c.curves);
}

#[test]
fn selected_checkpoint_has_the_lowest_validation_loss() {
    let ds = gen_ambiguous_dataset(3, (16, 16), 9).unwrap();
    let set: Vec<&Sample> = ds.samples.iter().collect();
    let (train, valid) = set.split_at(6);
    let out = train_on(small_model(true, 2), train, valid, &config(15, 0), MetadataMode::TrueClass).unwrap();
    let eps = TrainConfig::default().epsilon;
    let min = out.curves.iter().map(|r| r.valid_loss).fold(f64::INFINITY, f64::min);
    // a later epoch may undercut the kept one by less than epsilon
    assert!(out.best_valid_loss <= out.curves.last().unwrap().valid_loss + eps);
    assert!(out.best_valid_loss <= min + eps);
    assert_eq!(out.curves[out.best_epoch].valid_loss, out.best_valid_loss);
}

#[test]
fn patience_ends_a_stalled_run() {
    let ds = gen_ambiguous_dataset(2, (16, 16), 1).unwrap();
    let set: Vec<&Sample> = ds.samples.iter().collect();
    let (train, valid) = set.split_at(4);
    let cfg = TrainConfig {
        initial_lr: 1e-9,
        patience: 2,
        epsilon: 0.1,
        ..config(30, 0)
    };
    let out = train_on(small_model(true, 0), train, valid, &cfg, MetadataMode::TrueClass).unwrap();
    assert!(out.stopped_early);
    assert_eq!(out.curves.len(), 3);
}

#[test]
fn film_and_plain_share_the_backbone() {
    let film = small_model(true, 5);
    let plain = small_model(false, 5);
    let backbone = |m: &FilmUNet| {
        m.params()
            .iter()
            .filter(|p| !p.name.starts_with("film_gen"))
            .map(|p| p.value.numel())
            .sum::<usize>()
    };
    assert_eq!(backbone(&film), plain.parameter_count());
    assert!(film.parameter_count() > plain.parameter_count());
}
