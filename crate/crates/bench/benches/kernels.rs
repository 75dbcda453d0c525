use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use frn_core::net::{AtomicGenerator, GeneratorConfig};
use frn_core::numerics::{Graph, ParamStore, Tensor};
use frn_core::simdata::{crf_project, gaussian_crf, synth_scene, SceneSpec, DEFAULT_CENTERS_NM, DEFAULT_SIGMA_NM};
use frn_core::ssm::{fused_scan, scan_orders, BssmBlock, ScanContext, ScanDirection, ScanInputs};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn scan(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (h, w, d, n) = (16, 16, 32, 8);
    let t = h * w;
    let x = Tensor::<f32>::uniform([t, d], -1.0, 1.0, &mut rng);
    let delta = Tensor::<f32>::uniform([t, d], 0.01, 0.2, &mut rng);
    let a = Tensor::<f32>::uniform([d, n], -1.0, -0.06, &mut rng);
    let b = Tensor::<f32>::uniform([t, n], -1.0, 1.0, &mut rng);
    let cm = Tensor::<f32>::uniform([t, n], -1.0, 1.0, &mut rng);
    let dsk = Tensor::<f32>::uniform([d], -1.0, 1.0, &mut rng);
    let dirs: Vec<ScanDirection> = scan_orders(h, w)
        .into_iter()
        .map(|o| ScanDirection { order: o.into(), epsilon: Some(0.02) })
        .collect();
    let mut group = c.benchmark_group("fused_scan_16x16_d32_n8");
    for (label, backward) in [("forward", false), ("forward_backward", true)] {
        group.bench_function(label, |bch| {
            bch.iter(|| {
                let mut g = Graph::new();
                let inp = ScanInputs {
                    x: g.param(x.clone()),
                    delta: g.param(delta.clone()),
                    a: g.param(a.clone()),
                    b: g.param(b.clone()),
                    c: g.param(cm.clone()),
                    d_skip: g.param(dsk.clone()),
                };
                let y = fused_scan(&mut g, inp, &dirs).unwrap();
                if backward {
                    let s = g.sum(y).unwrap();
                    std::hint::black_box(g.backward(s).unwrap());
                }
            })
        });
    }
    group.finish();
}

fn block(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::<f32>::new();
    let blk = BssmBlock::new(&mut store, "b", 32, 8, &mut rng);
    let feat = Tensor::<f32>::uniform([32, 16, 16], -1.0, 1.0, &mut rng);
    c.bench_function("bssm_block_32x16x16_forward_backward", |bch| {
        bch.iter(|| {
            let mut g = Graph::new();
            let p = store.bind(&mut g);
            let x = g.input(feat.clone());
            let mut ctx = ScanContext::training(0.5, 3).unwrap();
            let y = blk.forward(&mut g, &p, x, &mut ctx).unwrap();
            let s = g.sum(y).unwrap();
            std::hint::black_box(g.backward(s).unwrap());
        })
    });
}

fn generator(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::<f32>::new();
    let gen = AtomicGenerator::new(&mut store, "g", GeneratorConfig::default(), &mut rng).unwrap();
    let cond = Tensor::<f32>::uniform([7, 64, 64], 0.0, 1.0, &mut rng);
    c.bench_function("generator_default_7x64x64_forward", |bch| {
        bch.iter_batched(
            ScanContext::unmasked,
            |mut ctx| std::hint::black_box(gen.generate(&store, &cond, &mut ctx).unwrap()),
            BatchSize::SmallInput,
        )
    });
}

fn projection(c: &mut Criterion) {
    let cube = synth_scene(&SceneSpec::default(), 32, 96, 96).unwrap();
    let crf = gaussian_crf(32, DEFAULT_CENTERS_NM, DEFAULT_SIGMA_NM).unwrap();
    c.bench_function("crf_project_32x96x96", |bch| bch.iter(|| std::hint::black_box(crf_project(&cube, &crf).unwrap())));
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = scan, block, generator, projection
}
criterion_main!(benches);
