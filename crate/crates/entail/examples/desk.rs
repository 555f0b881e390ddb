//! The whole recipe in one process: masked-LM base, entailment
//! intermediate training, then 16-shot sentiment and paraphrase runs from
//! both checkpoints. Takes a few minutes in release mode.
//!
//! `cargo run --release -p entail --example desk [seed]`

use std::time::Instant;

use entail::core::corpus::{gen_nli, gen_pairs, gen_sentiment, Dataset};
use entail::core::encoder::Model;
use entail::core::entailment::Template;
use entail::core::partition::PartitionMode;
use entail::core::trainer::{
    evaluate, format_mean_std, intermediate_train, mean_std, pretrain_mlm, sample_folds, train_fewshot, Checkpoint,
    FewShotTask,
};
use entail::recipe;

fn run(label: &str, ck: &Checkpoint, data: &Dataset, template: &Template, symmetric: bool, seed: u64) -> entail::Result<()> {
    let start = Instant::now();
    let folds = sample_folds(data, 16, 5, seed)?;
    let task = FewShotTask { spec: &data.spec, template, pool: data.train() };
    let hp = recipe::fewshot_hyperparams(seed);
    let mut deltas = Vec::new();
    for f in &folds {
        deltas.push(train_fewshot(ck, task, f, PartitionMode::Efficient, &hp, symmetric)?.delta);
    }
    let pairs: Vec<_> = deltas.iter().map(|d| (&ck.model, d)).collect();
    let scores = evaluate(&pairs, &ck.vocab, &data.spec, data.test())?;
    let (m, s) = mean_std(&scores);
    println!("{label:<28} {} [{:.1}s]", format_mean_std(m, s), start.elapsed().as_secs_f64());
    Ok(())
}

fn main() -> entail::Result<()> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let vocab = recipe::vocabulary();
    let mut model = Model::<f32>::init(&recipe::encoder_config(&vocab), seed)?;

    let t = Instant::now();
    let corpus = recipe::mlm_corpus(&vocab, seed + 100)?;
    let mlm = pretrain_mlm(&mut model, &corpus, recipe::MLM_STEPS, &recipe::mlm_hyperparams(seed))?;
    println!("masked LM {:.3} -> {:.3} [{:.1}s]", mlm.initial_loss, mlm.final_loss, t.elapsed().as_secs_f64());
    let mut base = Checkpoint::new(model, vocab)?;
    base.record("pretrain", seed);

    let t = Instant::now();
    let inter = intermediate_train(&base, &gen_nli(recipe::NLI_SIZE, 7)?, &recipe::nli_hyperparams(seed))?;
    println!("entailment test accuracy {:.1} [{:.1}s]", inter.test_accuracy, t.elapsed().as_secs_f64());
    let inter = inter.checkpoint;

    let sentiment = gen_sentiment(400, 11)?;
    let pairs = gen_pairs(400, 13)?;
    let template = recipe::default_template(&sentiment.spec, 0)?;
    run("sentiment, intermediate", &inter, &sentiment, &template, true, seed)?;
    run("sentiment, base", &base, &sentiment, &template, true, seed)?;
    run("pairs, intermediate", &inter, &pairs, &Template::pair(0), false, seed)?;
    Ok(())
}
