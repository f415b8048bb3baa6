use criterion::{black_box, criterion_group, criterion_main, Criterion};

use retcop_bench::{batch_of, default_encoders, default_generator};
use retcop_core::alignment::{clip_loss_node, similarity_matrix_node};
use retcop_core::diffcore::Tape;
use retcop_core::encoders::TeacherSnapshot;
use retcop_core::rehearsal::{build_stage_exemplars, kmeans};
use retcop_core::synthstream::{image_batch, text_batch};
use retcop_core::{Rng, Tensor};

/// Forward + backward of the contrastive objective on a 24-pair batch.
fn bench_clip_step(c: &mut Criterion) {
    let encoders = default_encoders(1);
    let batch = batch_of(24, 2);
    let images = image_batch(&batch).unwrap();
    let texts = text_batch(&batch).unwrap();

    c.bench_function("clip forward+backward (N=24)", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let ids = encoders.register(&mut tape);
            let img = tape.constant(images.clone());
            let txt = tape.constant(texts.clone());
            let i_emb = encoders.image_tower.forward_on_tape(&mut tape, &ids.image, img).unwrap();
            let t_emb = encoders.text_tower.forward_on_tape(&mut tape, &ids.text, txt).unwrap();
            let s = similarity_matrix_node(&mut tape, i_emb, t_emb).unwrap();
            let loss = clip_loss_node(&mut tape, s, ids.log_temperature).unwrap();
            tape.backward(loss).unwrap();
            black_box(tape.value(loss).data[0])
        })
    });
}

/// Teacher similarity (frozen forward) on a 24-pair batch.
fn bench_teacher_similarity(c: &mut Criterion) {
    let teacher = TeacherSnapshot::new(&default_encoders(3), 1);
    let batch = batch_of(24, 4);
    let images = image_batch(&batch).unwrap();
    let texts = text_batch(&batch).unwrap();
    c.bench_function("teacher similarity (N=24)", |b| {
        b.iter(|| {
            black_box(
                retcop_core::distill::teacher_similarity(&teacher, &images, &texts).unwrap(),
            )
        })
    });
}

/// Seeded k-means over a full exemplar pool in the embedding space.
fn bench_kmeans_pool(c: &mut Criterion) {
    let mut rng = Rng::from_seed(5);
    let data: Vec<f64> = (0..2048 * 16).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
    let points = Tensor::matrix(2048, 16, data).unwrap();
    c.bench_function("kmeans 2048x16, K=64", |b| {
        b.iter(|| black_box(kmeans(&points, 64, 7, 100, 1e-8).unwrap().inertia))
    });
}

/// Full stage-end exemplar construction: encode, joint-embed, cluster,
/// select.
fn bench_stage_exemplars(c: &mut Criterion) {
    let encoders = default_encoders(8);
    let generator = default_generator(9);
    let mut rng = Rng::from_seed(10);
    let pool = generator.sample_pairs(2048, &mut rng).unwrap();
    c.bench_function("stage exemplars (pool 2048 -> 256)", |b| {
        b.iter(|| black_box(build_stage_exemplars(&pool, &encoders, 256, 64, 11).unwrap().len()))
    });
}

criterion_group!(
    benches,
    bench_clip_step,
    bench_teacher_similarity,
    bench_kmeans_pool,
    bench_stage_exemplars
);
criterion_main!(benches);
