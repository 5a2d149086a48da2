use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use flowtrack::eval::track_all;
use flowtrack::model::{FlowTrackNet, ModelConfig};
use flowtrack::par::Execution;
use flowtrack::synth::{generate_dataset, ScenarioClass};
use flowtrack::training::{TrainConfig, Trainer};

const MODES: [(&str, Execution); 2] = [("parallel", Execution::Parallel), ("sequential", Execution::Sequential)];

fn generation(c: &mut Criterion) {
    let mut g = c.benchmark_group("generate 16 sequences");
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| generate_dataset(&ScenarioClass::ALL, 16, 20, 3, exec).unwrap())
        });
    }
    g.finish();
}

fn training_step(c: &mut Criterion) {
    let seqs = generate_dataset(&ScenarioClass::ALL, 8, 10, 4, Execution::Sequential).unwrap();
    let mut g = c.benchmark_group("train step, batch 8");
    g.sample_size(10);
    for (name, exec) in MODES {
        let mut trainer = Trainer::new(TrainConfig::default(), &seqs, exec).unwrap();
        g.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| trainer.train_step().unwrap()));
    }
    g.finish();
}

fn tracking(c: &mut Criterion) {
    let seqs = generate_dataset(&ScenarioClass::ALL, 8, 10, 5, Execution::Sequential).unwrap();
    let net = FlowTrackNet::new(ModelConfig::desk()).unwrap();
    let mut g = c.benchmark_group("track 8 sequences");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| track_all(&net, &seqs, 2, exec).unwrap()));
    }
    g.finish();
}

criterion_group!(benches, generation, training_step, tracking);
criterion_main!(benches);
