use criterion::{criterion_group, criterion_main, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use deva_core::edg::{
    aggregate_prosody, describe, detect_candidates, fit_tertiles, AuTrack, DescriptionLexicon, ProsodySeries,
    DEFAULT_TOP_K,
};

fn edg(c: &mut Criterion) {
    let rng = &mut ChaCha8Rng::seed_from_u64(1);
    let frames: Vec<[bool; 16]> = (0..200).map(|_| std::array::from_fn(|_| rng.gen_bool(0.4))).collect();
    let track = AuTrack::new(frames, 30.0).unwrap();
    let series = |rng: &mut ChaCha8Rng| {
        let rows: Vec<[f64; 4]> = (0..200)
            .map(|_| [rng.gen_range(80.0..300.0), rng.gen_range(40.0..80.0), rng.gen_range(0.0..0.05), rng.gen_range(0.0..0.2)])
            .collect();
        ProsodySeries::from_frames(&rows).unwrap()
    };
    let corpus: Vec<_> = (0..500).map(|_| aggregate_prosody(&series(rng))).collect();
    let table = fit_tertiles(&corpus).unwrap();
    let one = series(rng);
    let lex = DescriptionLexicon::default();

    c.bench_function("detect_candidates_200_frames", |b| b.iter(|| detect_candidates(&track)));
    c.bench_function("describe_200_frames", |b| {
        b.iter(|| describe(&one, &track, &table, &lex, DEFAULT_TOP_K).unwrap())
    });
    c.bench_function("fit_tertiles_500", |b| b.iter(|| fit_tertiles(&corpus).unwrap()));
}

criterion_group!(benches, edg);
criterion_main!(benches);
