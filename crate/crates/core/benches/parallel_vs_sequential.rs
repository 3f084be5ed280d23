use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use patrep_core::cohort::build_cohort;
use patrep_core::downstream::uniformity;
use patrep_core::encoder::{encode_corpus, ReferenceEncoder};
use patrep_core::pipeline::{concept_texts, encode_concept, pool_sequences, visit_sequences, PipelineConfig};
use patrep_core::synth::{generate, SynthConfig};
use patrep_core::text::{render_cohort, Concept, TemporalScheme};
use patrep_core::Execution;

const STRATEGIES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn setup() -> (PipelineConfig, Vec<patrep_core::text::VisitText>, ReferenceEncoder) {
    let cfg = PipelineConfig {
        synth: Some(SynthConfig { n_patients: 400, ..SynthConfig::default() }),
        ..PipelineConfig::default()
    }
    .resolved();
    let synth = cfg.synth.clone().unwrap();
    let (events, _) = generate(&synth).unwrap();
    let cohort = build_cohort(&events, &synth.taxonomy(), cfg.window_radius_days).unwrap().cohort;
    let texts = render_cohort(&cohort, TemporalScheme::Gap, None).unwrap();
    let encoder = ReferenceEncoder::new(cfg.encoder.clone()).unwrap();
    (cfg, texts, encoder)
}

fn bench(c: &mut Criterion) {
    let (cfg, texts, encoder) = setup();
    let (sentences, _) = concept_texts(&texts, Concept::Medication);
    let encoded = encode_concept(&texts, Concept::Medication, &encoder, Execution::Sequential).unwrap();
    let seqs = visit_sequences(&encoded).unwrap();
    let rows: Vec<Vec<f64>> = encoded.matrix.to_rows().into_iter().take(800).collect();

    let mut g = c.benchmark_group("encode_corpus");
    for (name, exec) in STRATEGIES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &e| {
            b.iter(|| encode_corpus(black_box(&sentences), &encoder, e).unwrap())
        });
    }
    g.finish();

    let mut g = c.benchmark_group("pool_sequences");
    for (name, exec) in STRATEGIES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &e| {
            b.iter(|| pool_sequences(black_box(&seqs), &cfg, None, e).unwrap())
        });
    }
    g.finish();

    let mut g = c.benchmark_group("uniformity");
    for (name, exec) in STRATEGIES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &e| {
            b.iter(|| uniformity(black_box(&rows), 2.0, e).unwrap())
        });
    }
    g.finish();
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = bench
}
criterion_main!(benches);
