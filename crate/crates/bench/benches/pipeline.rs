//! Wall-clock benchmarks for the pipeline's hot paths: the tensor kernel the
//! transformer spends its time in, the two evaluation oracles (polygon IoU
//! and Hungarian matching), scene rendering, and whole-frame inference.

use criterion::{black_box, criterion_group, criterion_main, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tvpr_core::geometry::{polygon_iou, Polygon};
use tvpr_core::spotter::{spot, SpotterConfig, SpotterModel};
use tvpr_core::synthgen::{render_frame, SceneSpec, WordSpec};
use tvpr_core::tensor::{Tape, Tensor};
use tvpr_core::training::hungarian_match;

fn rand_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f32> {
    let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::new(vec![rows, cols], data).unwrap()
}

fn bench_matmul(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = rand_matrix(&mut rng, 64, 64);
    let b = rand_matrix(&mut rng, 64, 64);
    c.bench_function("matmul_64x64", |bench| {
        bench.iter(|| {
            let mut tape = Tape::<f32>::new();
            let va = tape.param(a.clone());
            let vb = tape.param(b.clone());
            let y = tape.matmul(black_box(va), black_box(vb)).unwrap();
            let s = tape.sum(y).unwrap();
            tape.backward(s).unwrap();
        });
    });
}

fn bench_polygon_iou(c: &mut Criterion) {
    let a = Polygon::new(vec![[0.0, 0.0], [10.0, 0.0], [12.0, 6.0], [6.0, 11.0], [-1.0, 5.0]])
        .unwrap();
    let b = Polygon::new(vec![[3.0, 2.0], [14.0, 1.0], [15.0, 9.0], [4.0, 12.0]]).unwrap();
    c.bench_function("polygon_iou_pentagon_quad", |bench| {
        bench.iter(|| polygon_iou(black_box(&a), black_box(&b)).unwrap());
    });
}

fn bench_hungarian(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cost: Vec<Vec<f64>> =
        (0..25).map(|_| (0..8).map(|_| rng.gen_range(0.0..10.0)).collect()).collect();
    c.bench_function("hungarian_25x8", |bench| {
        bench.iter(|| hungarian_match(black_box(&cost)).unwrap());
    });
}

fn scene() -> SceneSpec {
    SceneSpec {
        canvas: (128, 128),
        words: vec![
            WordSpec {
                text: "MARKET".into(),
                anchor: [8.0, 20.0],
                scale: 14.0,
                rotation: 0.05,
                occlusion_fraction: 0.0,
            },
            WordSpec {
                text: "LANE9".into(),
                anchor: [20.0, 80.0],
                scale: 12.0,
                rotation: -0.1,
                occlusion_fraction: 0.1,
            },
        ],
        illumination_gain: 1.05,
        noise_sigma: 2.0,
        seed: 3,
    }
}

fn bench_render_frame(c: &mut Criterion) {
    let spec = scene();
    c.bench_function("render_frame_128", |bench| {
        bench.iter(|| render_frame(black_box(&spec)).unwrap());
    });
}

fn bench_spot(c: &mut Criterion) {
    let model = SpotterModel::new(SpotterConfig::default(), 0).unwrap();
    let (image, _) = render_frame(&scene()).unwrap();
    let mut group = c.benchmark_group("inference");
    group.sample_size(20);
    group.bench_function("spot_128_default_model", |bench| {
        bench.iter(|| spot(black_box(&model), black_box(&image), 0.5).unwrap());
    });
    group.finish();
}

criterion_group!(
    benches,
    bench_matmul,
    bench_polygon_iou,
    bench_hungarian,
    bench_render_frame,
    bench_spot
);
criterion_main!(benches);
