use std::time::Duration;

use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use pageguard::registry::NoProtection;
use pageguard::{
    align_to_pages, protect_read_only, unprotect, BufferDesc, ChecksumKind, CompletionHandle, DmaConfig,
    GuardOptions, GuardedOp, ModeOverride, PageBuf, PageGeometry, PageGuard, Rank, RegionRegistry, RegistryConfig,
    SendPolicy, SimWorld, Source, Tag, Transport,
};

const SIZES: [usize; 4] = [64, 4096, 64 << 10, 1 << 20];

fn alignment(c: &mut Criterion) {
    let geom = PageGeometry::host();
    c.bench_function("align_to_pages", |b| {
        b.iter(|| align_to_pages(black_box(BufferDesc::new(0x1234_5678, 70_000).unwrap()), geom))
    });
}

fn registry(c: &mut Criterion) {
    let geom = PageGeometry::host();
    let ps = geom.page_size();
    let reg = RegionRegistry::new(
        RegistryConfig {
            op_capacity: 256,
            page_capacity: 4096,
        },
        geom,
    )
    .unwrap();
    let base = 0x4000_0000;
    for i in 0..128 {
        let buf = BufferDesc::new(base + i * 4 * ps, 3 * ps).unwrap();
        reg.register(GuardedOp::new(CompletionHandle::detached(buf.len()), buf, geom)).unwrap();
    }
    let mut g = c.benchmark_group("registry");
    g.bench_function("lookup_hit", |b| {
        let mut i = 0usize;
        b.iter(|| {
            i = (i + 7) % 128;
            black_box(reg.lookup(base + i * 4 * ps + 100).map(|r| r.id()))
        })
    });
    g.bench_function("lookup_miss", |b| b.iter(|| black_box(reg.lookup(black_box(0x10)).is_some())));
    g.bench_function("register_release", |b| {
        let buf = BufferDesc::new(base + 1024 * ps, 2 * ps).unwrap();
        b.iter(|| {
            let handle = CompletionHandle::detached(buf.len());
            let id = reg.commit(reg.reserve().unwrap(), GuardedOp::new(handle.clone(), buf, geom), &NoProtection).unwrap();
            handle.complete(0);
            reg.release_with(id, &NoProtection).unwrap()
        })
    });
    g.finish();
}

fn mprotect(c: &mut Criterion) {
    let mut g = c.benchmark_group("mprotect_cycle");
    for size in [4096, 64 << 10, 1 << 20] {
        let buf = PageBuf::new(size).unwrap();
        g.throughput(Throughput::Bytes(size as u64));
        g.bench_with_input(BenchmarkId::from_parameter(size), &buf, |b, buf| {
            b.iter(|| {
                protect_read_only(buf.range()).unwrap();
                unprotect(buf.range()).unwrap();
            })
        });
    }
    g.finish();
}

fn send(c: &mut Criterion) {
    let dma = DmaConfig::instant().with_checksum(ChecksumKind::Off);
    let mut g = c.benchmark_group("send");
    g.measurement_time(Duration::from_secs(3));
    for (name, mode) in [("copy", ModeOverride::AlwaysCopy), ("protect", ModeOverride::AlwaysProtect)] {
        for size in SIZES {
            let mut world = SimWorld::new(2, dma).unwrap();
            let buf = PageBuf::new(size).unwrap();
            let sender = PageGuard::new(
                world.comm(Rank(0)),
                GuardOptions {
                    policy: SendPolicy::always(mode),
                    ..GuardOptions::default()
                },
            )
            .unwrap();
            let receiver = world.comm(Rank(1));
            let mut sink = vec![0u8; size];
            g.throughput(Throughput::Bytes(size as u64));
            g.bench_with_input(BenchmarkId::new(name, size), &size, |b, &size| {
                b.iter(|| {
                    // SAFETY: `buf` outlives the send, which is waited on below.
                    let t = unsafe { sender.send_and_protect(Rank(1), Tag(0), buf.desc(0, size).unwrap()).unwrap() };
                    t.handle.wait();
                    sender.check_for_completed();
                    receiver.recv(Source::ANY, Tag(0), &mut sink).unwrap();
                })
            });
            drop(sender);
            world.shutdown();
        }
    }
    g.finish();
}

criterion_group!(benches, alignment, registry, mprotect, send);
criterion_main!(benches);
