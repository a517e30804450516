#include <benchmark/benchmark.h>

#include "totem/fusion.hpp"
#include "totem/metrics.hpp"
#include "totem/rng.hpp"
#include "totem/tracker.hpp"

namespace {

using namespace totem;

Tensor random_map(std::uint64_t seed, std::size_t rows, std::size_t cols) {
    Rng rng(seed);
    Tensor t = Tensor::zeros({rows, cols});
    for (double& v : t.data) v = rng.gaussian();
    return t;
}

void bm_matmul_256(benchmark::State& state) {
    Tensor a = random_map(1, 256, 256);
    Tensor b = random_map(2, 256, 256);
    for (auto _ : state) benchmark::DoNotOptimize(matmul(a, b));
}
BENCHMARK(bm_matmul_256);

void bm_fuse_forward_desk(benchmark::State& state) {
    FusionConfig cfg;
    cfg.channels = 64;
    cfg.num_encoder_layers = 4;
    FusionModule fusion(cfg, 7);
    Tensor x = random_map(3, 256, 64);
    Tensor xp = random_map(4, 256, 64);
    for (auto _ : state) benchmark::DoNotOptimize(fusion.fuse_map(x, xp));
}
BENCHMARK(bm_fuse_forward_desk);

void bm_infer_desk(benchmark::State& state) {
    TrackerConfig tcfg;
    FusionConfig fcfg;
    TotemModel model(tcfg, fcfg, 11);
    FrameTriplet trip;
    for (auto* f : {&trip.tr1, &trip.tr2, &trip.te}) {
        f->x = random_map(5, 256, 64);
        f->xp = random_map(6, 256, 64);
    }
    trip.box1 = trip.box2 = BoundingBox{5.0, 5.0, 4.0, 4.0};
    for (auto _ : state) benchmark::DoNotOptimize(model.infer(trip));
}
BENCHMARK(bm_infer_desk);

void bm_success_curve(benchmark::State& state) {
    Rng rng(21);
    std::vector<double> ious(10000);
    for (double& v : ious) v = 0.5 + 0.5 * rng.gaussian();
    for (auto _ : state) benchmark::DoNotOptimize(success_curve(ious));
}
BENCHMARK(bm_success_curve);

}  // namespace

BENCHMARK_MAIN();
