use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use pgm_bench::{mdlm, pgm};
use pgm_core::halton::halton_sequence_order;
use pgm_core::sampling::{sample, SampleOptions, SamplerKind};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn samplers(c: &mut Criterion) {
    let (len, hidden, vocab) = (128, 32, 32);
    let opts = SampleOptions {
        bos: Some(0),
        ..SampleOptions::default()
    };
    let p = pgm(len, hidden, 1, vocab);
    let m = mdlm(len, hidden, 1, vocab);
    let mut group = c.benchmark_group("sample_l128_batch4");
    group.sample_size(10);
    for steps in [16, 32] {
        for (name, model, kind) in [
            ("pgm_fixed_k", &p, SamplerKind::FixedK),
            ("pgm_mdlm_equivalent", &p, SamplerKind::MdlmEquivalent),
            ("mdlm_ancestral", &m, SamplerKind::Ancestral),
        ] {
            group.bench_with_input(BenchmarkId::new(name, steps), &steps, |b, &steps| {
                let mut rng = ChaCha8Rng::seed_from_u64(0);
                b.iter(|| sample(kind, model.denoiser(), len, steps, 4, &opts, &mut rng).unwrap())
            });
        }
    }
    group.finish();
}

fn halton(c: &mut Criterion) {
    c.bench_function("halton_order_4096", |b| b.iter(|| halton_sequence_order(4096).unwrap()));
}

criterion_group!(benches, samplers, halton);
criterion_main!(benches);
