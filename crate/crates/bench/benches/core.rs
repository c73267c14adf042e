use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use tenet_bench::{blobs, classes, matrix, paired_scores, scoring_case};
use tenet_core::clustering::{kmeans, silhouette_score};
use tenet_core::metrics::wilcoxon_signed_rank;
use tenet_core::prompts::render_scoring_prompt;
use tenet_core::vector::nearest_centroid;

fn bench_kmeans(c: &mut Criterion) {
    let mut g = c.benchmark_group("kmeans");
    for n in [100, 400] {
        let m = matrix(n, 64, 3, 1);
        g.bench_with_input(BenchmarkId::from_parameter(n), &m, |b, m| b.iter(|| kmeans(m, 3, 7).unwrap()));
    }
    g.finish();
}

fn bench_silhouette(c: &mut Criterion) {
    let m = matrix(400, 64, 3, 2);
    let assignments: Vec<usize> = (0..400).map(|i| i % 3).collect();
    c.bench_function("silhouette/400", |b| b.iter(|| silhouette_score(&m, black_box(&assignments)).unwrap()));
}

fn bench_routing(c: &mut Criterion) {
    let centroids = blobs(8, 256, 8, 3);
    let queries = blobs(1000, 256, 8, 4);
    c.bench_function("route/1000x8", |b| {
        b.iter(|| {
            for q in &queries {
                black_box(nearest_centroid(q, &centroids).unwrap());
            }
        })
    });
}

fn bench_wilcoxon(c: &mut Criterion) {
    let mut g = c.benchmark_group("wilcoxon");
    for n in [20, 120, 500] {
        let pairs = paired_scores(n, 5);
        g.bench_with_input(BenchmarkId::from_parameter(n), &pairs, |b, p| {
            b.iter(|| wilcoxon_signed_rank(p))
        });
    }
    g.finish();
}

fn bench_render(c: &mut Criterion) {
    let cls = classes();
    let (con, e) = scoring_case(8);
    c.bench_function("render_scoring_prompt/16", |b| b.iter(|| render_scoring_prompt(&con, &e, &cls)));
}

criterion_group!(benches, bench_kmeans, bench_silhouette, bench_routing, bench_wilcoxon, bench_render);
criterion_main!(benches);
