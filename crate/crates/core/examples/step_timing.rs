//! Milliseconds per optimizer step for a few variants, useful when sizing a training budget.
//!
//! `cargo run --release -p noisynp --example step_timing`

use std::time::Instant;

use noisynp::backbone::BackboneConfig;
use noisynp::funcdata::{make_task, KernelFamily, NoiseSpec, Phase, Setup, TaskConfig};
use noisynp::models::{Model, ModelConfig};
use noisynp::objectives::LossConfig;
use noisynp::train::{train_step, TrainState};

const STEPS: u32 = 50;

fn main() -> noisynp::Result<()> {
    let tasks = TaskConfig {
        noise: NoiseSpec::level(0.3),
        ..TaskConfig::new(KernelFamily::Rbf)
    };
    for (name, hidden) in [
        ("np", 64),
        ("anp", 64),
        ("r-anp", 64),
        ("banp", 64),
        ("anp", 32),
    ] {
        let model = Model::new(&ModelConfig {
            backbone: BackboneConfig {
                hidden_dim: hidden,
                ..Default::default()
            },
            z_dim: hidden,
            ..ModelConfig::new(name.parse()?)
        })?;
        let mut state = TrainState::init(&model, 0);
        let loss = LossConfig::for_variant(model.variant(), 5.0);
        let mut sample = |rng: &mut _| make_task(&tasks, Setup::Three, Phase::Train, rng);
        let start = Instant::now();
        for _ in 0..STEPS {
            train_step(&model, &mut state, &loss, 5e-4, &mut sample)?;
        }
        let ms = start.elapsed().as_secs_f64() * 1000.0 / STEPS as f64;
        println!("{name} hidden {hidden}: {ms:.2} ms/step");
    }
    Ok(())
}
