// Microbenchmarks of the hot paths: the contrastive loss with its backward
// pass, both encoders, ranking and entity retrieval.

#include "cmr/data.h"
#include "cmr/encoders.h"
#include "cmr/losses.h"
#include "cmr/pipeline.h"
#include "cmr/retrieval_eval.h"
#include "cmr/ste.h"

#include <benchmark/benchmark.h>

#include <random>

namespace {

using namespace cmr;

ag::Matrix random_unit_rows(Eigen::Index rows, Eigen::Index cols, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> g;
    ag::Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = g(rng);
    m.rowwise().normalize();
    return m;
}

void BM_ItcLossForwardBackward(benchmark::State& state) {
    const auto b = state.range(0);
    nn::ParameterStore store;
    store.add("t", "x", random_unit_rows(b, 128, 1));
    store.add("v", "x", random_unit_rows(b, 128, 2));
    std::vector<int> labels;
    for (Eigen::Index i = 0; i < b; ++i) labels.push_back(static_cast<int>(i % 4));
    for (auto _ : state) {
        auto loss = losses::itc_batch_loss(ag::l2_normalize_rows(store.get("t")),
                                           ag::l2_normalize_rows(store.get("v")), 0.3, &labels);
        ag::backward(loss);
        benchmark::DoNotOptimize(loss.scalar());
        store.zero_grad();
    }
    state.SetItemsProcessed(state.iterations() * b);
}
BENCHMARK(BM_ItcLossForwardBackward)->Arg(16)->Arg(64)->Arg(128);

struct EncoderFixture {
    std::vector<data::RecipePair> corpus = data::generate_synthetic_corpus({});
    pipeline::Checkpoint init = pipeline::initial_checkpoint(corpus, {}, 1);
    std::unique_ptr<pipeline::Model> model = pipeline::restore_model(init);
};

EncoderFixture& encoder_fixture() {
    static EncoderFixture f;
    return f;
}

void BM_TextEncoder(benchmark::State& state) {
    auto& f = encoder_fixture();
    for (auto _ : state) benchmark::DoNotOptimize(f.model->encode_text(f.corpus[0].doc));
}
BENCHMARK(BM_TextEncoder);

void BM_VisionEncoderWithContext(benchmark::State& state) {
    auto& f = encoder_fixture();
    vision::ContextBundle ctx;
    for (int i = 0; i < state.range(0); ++i) ctx.ingredients.push_back(f.corpus[0].doc.local_entities[0]);
    ctx.titles = {f.corpus[0].doc.title};
    const vision::ContextConfig placement;
    for (auto _ : state) benchmark::DoNotOptimize(f.model->encode_image(f.corpus[0].image, ctx, placement));
}
BENCHMARK(BM_VisionEncoderWithContext)->Arg(0)->Arg(5)->Arg(15);

void BM_RankOfTruth(benchmark::State& state) {
    const auto n = state.range(0);
    const eval::Matrix s = random_unit_rows(n, 64, 3) * random_unit_rows(n, 64, 4).transpose();
    for (auto _ : state) benchmark::DoNotOptimize(eval::rank_of_truth(s));
    state.SetItemsProcessed(state.iterations() * n * n);
}
BENCHMARK(BM_RankOfTruth)->Arg(100)->Arg(1000);

void BM_EntityTopK(benchmark::State& state) {
    const auto n = state.range(0);
    std::vector<std::string> names;
    for (Eigen::Index i = 0; i < n; ++i) names.push_back("e" + std::to_string(i));
    const ste::EntityIndex index(names, random_unit_rows(n, 192, 5));
    const EmbeddingVector q = random_unit_rows(1, 192, 6).row(0).transpose();
    for (auto _ : state) benchmark::DoNotOptimize(index.top_k(q, 15));
    state.SetItemsProcessed(state.iterations() * n);
}
BENCHMARK(BM_EntityTopK)->Arg(1000)->Arg(10000);

}  // namespace

BENCHMARK_MAIN();
