//! Per-example work of one minibatch on the rayon pool against a plain loop.
//!
//! `parallel` picks which of the two the library itself uses; this bench
//! runs both explicitly so they can be compared in one build.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use dckg::config::RunConfig;
use dckg::corpus::{generate_corpus, Corpus, CorpusConfig, KeywordPair};
use dckg::model::checkpoint::dims_for;
use dckg::model::{generate, BetaSource, ExampleNoise, GenOptions, Mode, Model};
use dckg::numerics::{Gradients, Graph};
use dckg::par::{par_map, seq_map};
use dckg::rl::BetaSpace;
use dckg::rng::{stream2, Stream};

fn setup() -> (RunConfig, Corpus, Model) {
    let mut cfg = RunConfig::default();
    cfg.corpus = CorpusConfig {
        train_pairs: 256,
        valid_pairs: 8,
        test_pairs: 64,
        ..cfg.corpus
    };
    let corpus = generate_corpus(&cfg.corpus).unwrap();
    let model = Model::new(&cfg.model, dims_for(&cfg).unwrap()).unwrap();
    (cfg, corpus, model)
}

fn example_gradient(model: &Model, pair: &KeywordPair, noise: &ExampleNoise) -> Gradients {
    let mut g = Graph::new(&model.store);
    let t = model
        .net
        .loss_terms(&mut g, &model.cfg, pair, Some(noise), 1.0, 1.0)
        .unwrap();
    let mut seeds = vec![(t.domain, 1.0), (t.nll, 1.0)];
    if let Some(kl) = t.kl {
        seeds.push((kl, 1.0));
    }
    g.backward_seeded(&seeds).unwrap()
}

fn gradients(c: &mut Criterion) {
    let (cfg, corpus, model) = setup();
    let mut group = c.benchmark_group("batch_gradients");
    group.sample_size(10);
    for batch in [8usize, 32] {
        let items: Vec<(&KeywordPair, ExampleNoise)> = corpus.train[..batch]
            .iter()
            .enumerate()
            .map(|(j, p)| {
                let mut rng = stream2(cfg.train.seed, Stream::TrainNoise, 0, j as u64);
                (
                    p,
                    ExampleNoise::draw(&mut rng, cfg.model.z_dim, corpus.vocab.num_domains()),
                )
            })
            .collect();
        group.bench_with_input(BenchmarkId::new("rayon", batch), &items, |b, items| {
            b.iter(|| black_box(par_map(items, |(p, n)| example_gradient(&model, p, n))))
        });
        group.bench_with_input(BenchmarkId::new("sequential", batch), &items, |b, items| {
            b.iter(|| black_box(seq_map(items, |(p, n)| example_gradient(&model, p, n))))
        });
    }
    group.finish();
}

fn decoding(c: &mut Criterion) {
    let (cfg, corpus, model) = setup();
    let space = BetaSpace::from_config(&cfg.rl).unwrap();
    let opts = GenOptions {
        count: 4,
        beam_width: cfg.eval.beam_width,
        fixed_beta: cfg.eval.fixed_beta,
        betas: space.values(),
        seed: cfg.eval.seed,
    };
    let indexed: Vec<(usize, &KeywordPair)> = corpus.test.iter().enumerate().collect();
    let run = |&(i, p): &(usize, &KeywordPair)| {
        generate(
            &model,
            &p.source,
            p.source_domain,
            i,
            Mode::Cvae,
            BetaSource::Policy,
            &opts,
        )
        .unwrap()
    };
    let mut group = c.benchmark_group("sampled_decoding");
    group.sample_size(10);
    group.bench_function("rayon", |b| b.iter(|| black_box(par_map(&indexed, run))));
    group.bench_function("sequential", |b| b.iter(|| black_box(seq_map(&indexed, run))));
    group.finish();
}

criterion_group!(benches, gradients, decoding);
criterion_main!(benches);
