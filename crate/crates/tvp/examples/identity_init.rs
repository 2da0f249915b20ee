//! Train the instruction decomposer to reproduce its input (the identity
//! objective) and compare against the random-init baseline.
//!
//!     cargo run --example identity_init

use tvp::fstext::{self, IdentityInitOptions};
use tvp::numerics::ParamStore;
use tvp::pipeline::RunConfig;
use tvp::rng::Rng;
use tvp::synthdata::{instruction_for, Color, Shape, Verb};
use tvp::textstack::{self, Vocabulary};

fn main() -> tvp::Result<()> {
    let cfg = RunConfig::default();
    let tcfg = cfg.text_config();
    let fcfg = cfg.fstext_config();
    let vocab = Vocabulary::standard();
    let mut store = ParamStore::<f32>::new();
    let mut rng = Rng::new(41);
    textstack::init_text_params(&mut store, &vocab, &tcfg, &mut rng);
    fstext::init_fstext_params(&mut store, &fcfg, &mut rng);

    // corpus: 80% of the grammar; held-out: the rest
    let mut corpus = Vec::new();
    let mut held_out = Vec::new();
    let mut i = 0;
    for verb in Verb::ALL {
        for color in Color::ALL {
            for shape in Shape::ALL {
                let ids = vocab.tokenize(&instruction_for(verb, color, shape), tcfg.len)?;
                let g = textstack::encode_text(&store, &tcfg, &ids)?;
                if i % 5 == 4 {
                    held_out.push(g);
                } else {
                    corpus.push(g);
                }
                i += 1;
            }
        }
    }

    let before = fstext::identity_eval(&store, &fcfg, &held_out)?;
    println!("held-out identity loss before training: {before:.5}");
    let opts = IdentityInitOptions { max_steps: 1500, ..Default::default() };
    let report = fstext::identity_init(&store, &fcfg, &corpus, &opts)?;
    println!(
        "trained {} steps, final train loss {:.6} (tolerance reached: {})",
        report.steps_run, report.final_loss, report.reached_tol
    );
    let after = fstext::identity_eval(&store, &fcfg, &held_out)?;
    println!("held-out identity loss after training:  {after:.6}");
    println!("random/trained ratio: {:.1}x", before / after);
    Ok(())
}
