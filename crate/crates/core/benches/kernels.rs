//! Sequential versus data-parallel timings of the heavy kernels.
//!
//! Each kernel runs inside a one-worker pool ("sequential") and inside the
//! default pool ("parallel"). Built with `--no-default-features` both variants
//! run the sequential fallback.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use nalgebra::DMatrix;

use parcelbench::cluster::{build_features, seed_by_restarts, KMeansConfig, DEFAULT_ALPHA};
use parcelbench::fod::{fit_field, FodConfig};
use parcelbench::fusion::{fuse, AtlasPrior, FusionConfig};
use parcelbench::icp::{group_ica, preprocess, unfold, IcaConfig, PreprocConfig, TimeSeriesStack};
use parcelbench::phantom::{make_bold, make_dwi, make_priors, make_truth, PhantomSpec};

fn in_pool<R: Send>(threads: Option<usize>, f: impl FnOnce() -> R + Send) -> R {
    #[cfg(feature = "parallel")]
    {
        let mut b = rayon::ThreadPoolBuilder::new();
        if let Some(n) = threads {
            b = b.num_threads(n);
        }
        b.build().expect("thread pool").install(f)
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = threads;
        f()
    }
}

const VARIANTS: [(&str, Option<usize>); 2] = [("sequential", Some(1)), ("parallel", None)];

fn spec() -> PhantomSpec {
    PhantomSpec {
        grid_dims: [32; 3],
        noise_sigma: 0.05,
        n_regions: 7,
        n_timepoints: 120,
        ..Default::default()
    }
}

fn kernels(c: &mut Criterion) {
    let spec = spec();
    let subject = make_truth(&spec).unwrap();
    let (dwi, grads) = make_dwi(&subject, &spec).unwrap();
    let fod = FodConfig::default();
    let field = fit_field(&dwi, &grads, &subject.mask, &fod).unwrap();
    let features = build_features(&field, DEFAULT_ALPHA).unwrap();
    let kcfg = KMeansConfig {
        n_restarts: 64,
        ..Default::default()
    };
    let priors: Vec<AtlasPrior> = make_priors(&subject, &spec, 10, 1.0)
        .unwrap()
        .into_iter()
        .map(|(i, l)| AtlasPrior::new(i, l).unwrap())
        .collect();
    let bold = make_bold(&subject, &spec).unwrap();
    let nuisance = DMatrix::zeros(bold.stack.n_timepoints(), 0);
    let pre = preprocess(&bold.stack, &nuisance, &PreprocConfig::default()).unwrap();
    let unfolded: Vec<TimeSeriesStack> = (0..3).map(|_| unfold(&pre.stack).unwrap().stack).collect();
    let ica = IcaConfig {
        n_components: 7,
        n_init: 4,
        ..Default::default()
    };

    let mut g = c.benchmark_group("kernels");
    g.sample_size(10);
    for (name, threads) in VARIANTS {
        g.bench_function(BenchmarkId::new("fit_field", name), |b| {
            b.iter(|| in_pool(threads, || fit_field(&dwi, &grads, &subject.mask, &fod).unwrap()))
        });
        g.bench_function(BenchmarkId::new("fuse_10_priors", name), |b| {
            b.iter(|| in_pool(threads, || fuse(&subject.structural, &priors, &subject.mask, &FusionConfig::default()).unwrap()))
        });
        g.bench_function(BenchmarkId::new("kmeans_64_restarts", name), |b| {
            b.iter(|| in_pool(threads, || seed_by_restarts(features.points(), &kcfg).unwrap()))
        });
        g.bench_function(BenchmarkId::new("bold_preprocess", name), |b| {
            b.iter(|| in_pool(threads, || preprocess(&bold.stack, &nuisance, &PreprocConfig::default()).unwrap()))
        });
        g.bench_function(BenchmarkId::new("group_ica", name), |b| {
            b.iter(|| in_pool(threads, || group_ica(&unfolded, &ica).unwrap()))
        });
    }
    g.finish();
}

criterion_group!(benches, kernels);
criterion_main!(benches);
