use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};

use lfd_bench::fixture;
use lfd_core::convolution::Convolver;
use lfd_core::evolution::assemble_frozen;
use lfd_core::{ConvolutionMethod, CrossSectionSpec, KernelConfig, KernelTable, MeanField, OperatorForm, VelocityGrid};

fn kernel_table(c: &mut Criterion) {
    let mut group = c.benchmark_group("kernel_table");
    group.sample_size(10);
    for points in [16, 32, 48] {
        let vg = VelocityGrid::new(2, 6.0, points).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(points), &vg, |b, vg| {
            b.iter(|| KernelTable::build(vg, CrossSectionSpec::coulomb(2), KernelConfig::new(8).unwrap()).unwrap())
        });
    }
    group.finish();
}

fn convolution(c: &mut Criterion) {
    let mut group = c.benchmark_group("matrix_scalar");
    for points in [16, 32, 48] {
        let fx = fixture(points);
        for method in [ConvolutionMethod::Direct, ConvolutionMethod::Fft] {
            if method == ConvolutionMethod::Direct && points > 32 {
                continue;
            }
            let conv = Convolver::new(fx.grid.velocity(), fx.table.clone(), method);
            let id = BenchmarkId::new(format!("{method:?}").to_lowercase(), points);
            group.bench_with_input(id, &fx.field, |b, f| b.iter(|| conv.matrix_scalar(black_box(f.samples()))));
        }
    }
    group.finish();
}

fn assembly(c: &mut Criterion) {
    let mut group = c.benchmark_group("assemble_frozen");
    for points in [16, 32, 48] {
        let fx = fixture(points);
        let mf = MeanField::new(fx.grid.clone(), fx.table.clone(), ConvolutionMethod::Auto).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(points), &fx.field, |b, g| {
            b.iter(|| assemble_frozen(black_box(g), &mf, 0.05, OperatorForm::Entropic).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, kernel_table, convolution, assembly);
criterion_main!(benches);
