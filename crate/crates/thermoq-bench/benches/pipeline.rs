use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use thermoq::autodiff::Tape;
use thermoq::bn::BnGraph;
use thermoq::grid::build_masks;
use thermoq::loss::{build_losses, LossWeights};
use thermoq::net::{ModelConfig, ModelParams};
use thermoq::predictor::predict_field;
use thermoq::solver::{solve_layout, SolverConfig};
use thermoq::stochastic::{SeededRng, Stream};
use thermoq::trainer::tau_for;
use thermoq_bench::bench_fixture;

fn bench_solver(c: &mut Criterion) {
    let (domain, layout) = bench_fixture();
    let cfg = SolverConfig::default();
    c.bench_function("solve_32x32", |b| {
        b.iter(|| solve_layout(&domain, &layout, black_box(&[5.0, 7.0]), &cfg).unwrap())
    });
}

fn bench_forward(c: &mut Criterion) {
    let (domain, layout) = bench_fixture();
    let masks = build_masks(&domain, &layout).unwrap();
    let params = ModelParams::<f32>::init(
        ModelConfig { base_channels: 8, ..ModelConfig::default() },
        1,
    );
    let field = solve_layout(&domain, &layout, &[5.0, 7.0], &SolverConfig::default()).unwrap();
    let mut rng = SeededRng::new(1, Stream::Noise);
    let mp = thermoq::solver::extract_mp(&field, &layout, &mut rng);
    c.bench_function("predict_n_pre_16", |b| {
        b.iter(|| {
            let mut rng = SeededRng::new(2, Stream::Mc);
            predict_field(&params, &mp, &masks, domain.dx(), domain.dy(), 16, &mut rng).unwrap()
        })
    });
}

fn bench_train_step(c: &mut Criterion) {
    let (domain, layout) = bench_fixture();
    let masks = build_masks(&domain, &layout).unwrap();
    let params = ModelParams::<f32>::init(
        ModelConfig { base_channels: 8, ..ModelConfig::default() },
        1,
    );
    let field = solve_layout(&domain, &layout, &[5.0, 7.0], &SolverConfig::default()).unwrap();
    let mut rng = SeededRng::new(1, Stream::Noise);
    let mp = thermoq::solver::extract_mp(&field, &layout, &mut rng);
    let (h, w) = domain.shape();
    let batch = 4usize;
    let weights = LossWeights::default();
    c.bench_function("forward_backward_batch4", |b| {
        b.iter(|| {
            let mut input = ndarray::Array4::<f32>::zeros((batch, 2, h, w));
            let mut target = ndarray::Array4::<f32>::zeros((batch, 1, h, w));
            let mut taus = Vec::with_capacity(batch);
            for bi in 0..batch {
                let tau = tau_for(1, 1, bi);
                taus.push(tau);
                for ((y, x), &v) in mp.indexed_iter() {
                    let nv = ((v - 298.0) / 50.0) as f32;
                    input[[bi, 0, y, x]] = nv;
                    target[[bi, 0, y, x]] = nv;
                    if masks.mp[[y, x]] {
                        input[[bi, 1, y, x]] = tau as f32;
                    }
                }
            }
            let mut tape: Tape<f32> = Tape::new();
            let bound = params.bind(&mut tape);
            let input = tape.leaf(input);
            let pred = bound.forward(&mut tape, input);
            let nodes = build_losses(
                &mut tape,
                pred,
                &target,
                &taus,
                &masks,
                domain.dx(),
                domain.dy(),
                0.0,
                &weights,
            )
            .unwrap();
            let grads = tape.backward(nodes.total).unwrap();
            black_box(grads.wrt(bound.vars[0], &tape))
        })
    });
}

fn bench_bn(c: &mut Criterion) {
    let json = r#"{
        "nodes": [
            {"id": "C1", "p_lo": 0.9, "p_hi": 0.95},
            {"id": "C2", "p_lo": 0.85, "p_hi": 0.9},
            {"id": "C3", "p_lo": 0.8, "p_hi": 0.99},
            {"id": "C4", "p_lo": 0.7, "p_hi": 0.8},
            {"id": "B1", "gate": "series", "children": ["C1", "C2"]},
            {"id": "B2", "gate": "parallel", "children": ["C3", "C4"]},
            {"id": "S", "gate": "series", "children": ["B1", "B2"]}
        ],
        "system": "S"
    }"#;
    let graph = BnGraph::from_json(json).unwrap();
    let evidence = thermoq::bn::Evidence::new();
    c.bench_function("bn_infer_7_nodes", |b| {
        b.iter(|| graph.infer(black_box(&evidence)).unwrap())
    });
}

criterion_group!(benches, bench_solver, bench_forward, bench_train_step, bench_bn);
criterion_main!(benches);
