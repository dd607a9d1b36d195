use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};

use dlsem::datagen::{build_population, generate};
use dlsem::datasets::{holzinger_grant_white, holzinger_three_factor};
use dlsem::fitstats::fit_statistics;
use dlsem::moments::gamma_adf;
use dlsem::{fit, Condition, FitOptions, Method, MethodKind, MomentSet};

fn real_data(c: &mut Criterion) {
    let x = holzinger_grant_white().unwrap();
    let spec = holzinger_three_factor().unwrap();
    let m = MomentSet::from_data(&x).unwrap();
    let opts = FitOptions::default();

    c.bench_function("gamma_adf p=9 N=145", |b| b.iter(|| gamma_adf(black_box(&x)).unwrap()));
    for method in [
        Method::plain(MethodKind::MlEm),
        Method::plain(MethodKind::GlsM),
        Method::new(MethodKind::DlsM, 0.75).unwrap(),
        Method::new(MethodKind::RglsI, 0.36).unwrap(),
    ] {
        c.bench_function(&format!("fit {} p=9", method.label()), |b| {
            b.iter(|| fit(black_box(&m), &spec, &method, &opts).unwrap())
        });
    }
    let dls = Method::new(MethodKind::DlsM, 0.75).unwrap();
    let f = fit(&m, &spec, &dls, &opts).unwrap();
    c.bench_function("fit statistics p=9", |b| b.iter(|| fit_statistics(black_box(&f), &dls, &m, &spec).unwrap()));
}

fn simulated(c: &mut Criterion) {
    let pop = build_population(15, 3, 1).unwrap();
    let x = generate(&pop, 500, Condition::Elliptical, 2).unwrap();
    let m = MomentSet::from_data(&x).unwrap();
    let dls = Method::new(MethodKind::DlsM, 0.5).unwrap();
    let mut group = c.benchmark_group("p=15");
    group.sample_size(10);
    group.bench_function("moments N=500", |b| b.iter(|| MomentSet::from_data(black_box(&x)).unwrap()));
    group.bench_function("fit dls-m(a=0.5)", |b| b.iter(|| fit(black_box(&m), &pop.spec, &dls, &FitOptions::default()).unwrap()));
    group.finish();
}

criterion_group!(benches, real_data, simulated);
criterion_main!(benches);
