//! Packed-kernel throughput: parallel (rayon) vs the sequential fallback.
//! Run with `cargo bench -p nmq-core`; build with
//! `--no-default-features` to measure the sequential code path alone.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use nmq_core::compress::zero_masked_codes;
use nmq_core::packed::{pack, packed_matmul, packed_matmul_serial, PackedWeight};
use nmq_core::quant::{
    quantize_weight, quantized_matmul_ref, quantized_matmul_ref_serial, QuantScheme,
    QuantizedTensor,
};
use nmq_core::sparse::{make_mask, prune, SparsityPattern};
use nmq_core::tensor::{Fill, Tensor};

struct Case {
    name: &'static str,
    x: Tensor,
    q: QuantizedTensor,
    packed: PackedWeight,
}

fn build_case(name: &'static str, sparse: bool) -> Case {
    let (b, i, j) = (64usize, 512usize, 512usize);
    let w = Tensor::new(
        &[i, j],
        Fill::SeededUniform {
            seed: 11,
            lo: -1.0,
            hi: 1.0,
        },
    )
    .unwrap();
    let x = Tensor::new(
        &[b, i],
        Fill::SeededUniform {
            seed: 12,
            lo: -1.0,
            hi: 1.0,
        },
    )
    .unwrap();
    let scheme = QuantScheme::symmetric(4, 8).unwrap();
    let (q, packed) = if sparse {
        let pattern = SparsityPattern::new(2, 4).unwrap();
        let mask = make_mask(&w, pattern).unwrap();
        let pruned = prune(&w, &mask).unwrap();
        let mut q = quantize_weight(&pruned, &scheme).unwrap();
        zero_masked_codes(&mut q, &mask);
        let packed = pack(&q, Some(&mask)).unwrap();
        (q, packed)
    } else {
        let q = quantize_weight(&w, &scheme).unwrap();
        let packed = pack(&q, None).unwrap();
        (q, packed)
    };
    Case { name, x, q, packed }
}

fn bench_kernels(c: &mut Criterion) {
    let cases = [build_case("dense_int4", false), build_case("sparse24_int4", true)];
    let flops = (64 * 512 * 512 * 2) as u64;
    let mut group = c.benchmark_group("matmul");
    group.throughput(Throughput::Elements(flops));
    for case in &cases {
        group.bench_with_input(
            BenchmarkId::new("packed_parallel", case.name),
            case,
            |b, case| b.iter(|| packed_matmul(&case.x, &case.packed).unwrap()),
        );
        group.bench_with_input(
            BenchmarkId::new("packed_serial", case.name),
            case,
            |b, case| b.iter(|| packed_matmul_serial(&case.x, &case.packed).unwrap()),
        );
        group.bench_with_input(
            BenchmarkId::new("unpacked_parallel", case.name),
            case,
            |b, case| b.iter(|| quantized_matmul_ref(&case.x, &case.q).unwrap()),
        );
        group.bench_with_input(
            BenchmarkId::new("unpacked_serial", case.name),
            case,
            |b, case| b.iter(|| quantized_matmul_ref_serial(&case.x, &case.q).unwrap()),
        );
    }
    group.finish();
}

criterion_group!(benches, bench_kernels);
criterion_main!(benches);
