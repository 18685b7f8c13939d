// Tiled OpenMP rasterizer against the serial per-pixel reference.
//
//   bench_rasterizer --benchmark_filter=Tiled

#include <benchmark/benchmark.h>

#include <map>
#include <thread>

#include "msgs/rasterizer.hpp"
#include "msgs/synth.hpp"

using namespace msgs;

namespace {

const SynthScene<float>& scene(int gaussians, int resolution) {
    static std::map<std::pair<int, int>, SynthScene<float>> cache;
    auto it = cache.find({gaussians, resolution});
    if (it == cache.end()) {
        SynthConfig cfg;
        cfg.n_gaussians = gaussians;
        cfg.resolution = resolution;
        cfg.n_views = 1;
        it = cache.emplace(std::pair{gaussians, resolution}, make_synthetic_scene<float>(cfg)).first;
    }
    return it->second;
}

void args(benchmark::internal::Benchmark* b) {
    for (int n : {100, 1000, 5000})
        for (int res : {64, 128}) b->Args({n, res});
}

void BM_Naive(benchmark::State& state) {
    const auto& s = scene(static_cast<int>(state.range(0)), static_cast<int>(state.range(1)));
    const auto& cam = s.scene.views.front().camera;
    for (auto _ : state) benchmark::DoNotOptimize(rasterize_naive(s.ground_truth, cam));
    state.SetItemsProcessed(state.iterations() * cam.width * cam.height);
}

void tiled(benchmark::State& state, int threads) {
    const auto& s = scene(static_cast<int>(state.range(0)), static_cast<int>(state.range(1)));
    const auto& cam = s.scene.views.front().camera;
    const int before = num_threads();
    set_num_threads(threads);
    for (auto _ : state) benchmark::DoNotOptimize(rasterize(s.ground_truth, cam));
    set_num_threads(before);
    state.SetItemsProcessed(state.iterations() * cam.width * cam.height);
}

void BM_TiledSerial(benchmark::State& state) { tiled(state, 1); }
void BM_TiledParallel(benchmark::State& state) { tiled(state, static_cast<int>(std::thread::hardware_concurrency())); }

}  // namespace

BENCHMARK(BM_Naive)->Apply(args)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_TiledSerial)->Apply(args)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_TiledParallel)->Apply(args)->Unit(benchmark::kMillisecond)->UseRealTime();

BENCHMARK_MAIN();
