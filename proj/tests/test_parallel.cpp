// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "moeforge/common.hpp"
#include "moeforge/parallel.hpp"
#include "moeforge/rng.hpp"

using namespace moeforge;

namespace {

Tensor random_tensor(std::vector<std::int64_t> shape, Rng& rng, double scale = 1.0) {
    std::vector<double> data(static_cast<std::size_t>(shape_numel(shape)));
    for (double& v : data) {
        v = rng.uniform(-scale, scale);
    }
    return Tensor::from_data(std::move(shape), std::move(data));
}

MoeLayerParams random_layer(std::int64_t d, std::int64_t f, int experts, Rng& rng) {
    MoeLayerParams params;
    params.gate_w = random_tensor({d, experts}, rng);
    for (int e = 0; e < experts; ++e) {
        params.experts.push_back({random_tensor({d, f}, rng, 0.5),
                                  random_tensor({f}, rng, 0.1),
                                  random_tensor({f, d}, rng, 0.5),
                                  random_tensor({d}, rng, 0.1)});
    }
    return params;
}

} // namespace

TEST_CASE("plan validation") {
    ParallelPlan plan;
    plan.world_size = 8;
    plan.expert_parallel = 4;
    plan.model_parallel = 2;
    plan.zero_stage = 2;
    CHECK_NOTHROW(plan.validate()); // dp = 4, ep divides dp
    plan.expert_parallel = 3;
    CHECK_THROWS_AS(plan.validate(), ConfigError); // 3 does not divide 4
    plan.expert_parallel = 4;
    plan.zero_stage = 1;
    CHECK_THROWS_AS(plan.validate(), ConfigError);
    plan.zero_stage = 2;
    plan.model_parallel = 3;
    CHECK_THROWS_AS(plan.validate(), ConfigError); // 3 does not divide 8
    plan.model_parallel = 2;
    plan.expert_parallel = 8;
    CHECK_THROWS_AS(plan.validate(), ConfigError); // mp * ep > N
}

TEST_CASE("memory model") {
    SUBCASE("single GPU, zero 0, no offload: 16 bytes per parameter") {
        ParallelPlan plan; // defaults: N=1
        MemoryEstimate est = memory_per_gpu(plan, 1e9, 0.0);
        CHECK(est.gpu_total() == doctest::Approx(16e9).epsilon(1e-12));
        CHECK(est.cpu_total() == 0.0);
    }
    SUBCASE("optimizer + grads are 87.5% of the training state") {
        ParallelPlan plan;
        MemoryEstimate est = memory_per_gpu(plan, 7e8, 3e8);
        CHECK(est.optimizer_grad_share() == doctest::Approx(0.875).epsilon(1e-12));
    }
    SUBCASE("offload moves exactly the 14 bytes/param to CPU") {
        ParallelPlan plan;
        plan.offload = true;
        MemoryEstimate est = memory_per_gpu(plan, 1e9, 0.0);
        CHECK(est.gpu_total() == doctest::Approx(2e9).epsilon(1e-12));
        CHECK(est.cpu_total() == doctest::Approx(14e9).epsilon(1e-12));
    }
    SUBCASE("offload never changes the total, only the split") {
        ParallelPlan a;
        a.world_size = 8;
        a.expert_parallel = 2;
        a.zero_stage = 2;
        ParallelPlan b = a;
        b.offload = true;
        MemoryEstimate ea = memory_per_gpu(a, 5e8, 2e9);
        MemoryEstimate eb = memory_per_gpu(b, 5e8, 2e9);
        CHECK(ea.total() == doctest::Approx(eb.total()).epsilon(1e-12));
        CHECK(eb.gpu_total() < ea.gpu_total());
    }
    SUBCASE("monotone non-increasing in dp, ep, mp") {
        auto gpu = [](int n, int ep, int mp, int zero) {
            ParallelPlan p;
            p.world_size = n;
            p.expert_parallel = ep;
            p.model_parallel = mp;
            p.zero_stage = zero;
            return memory_per_gpu(p, 6e8, 4e9).gpu_total();
        };
        CHECK(gpu(8, 2, 1, 2) <= gpu(4, 2, 1, 2)); // more dp partitions state
        CHECK(gpu(8, 4, 1, 2) <= gpu(8, 2, 1, 2)); // more ep shards experts
        CHECK(gpu(8, 2, 2, 2) <= gpu(8, 2, 1, 2)); // more mp slices everything
    }
    SUBCASE("partitioned bytes across GPUs sum to the unpartitioned total") {
        ParallelPlan part;
        part.world_size = 16;
        part.expert_parallel = 4;
        part.zero_stage = 2;
        ParallelPlan repl = part;
        repl.zero_stage = 0;
        const double p_ne = 3e8, p_e = 6e9;
        MemoryEstimate ep_est = memory_per_gpu(part, p_ne, p_e);
        MemoryEstimate repl_est = memory_per_gpu(repl, p_ne, p_e);
        // Non-expert optimizer: dp ranks each hold 1/dp of the replicated copy.
        CHECK(ep_est.nonexpert_optim * part.data_parallel() ==
              doctest::Approx(repl_est.nonexpert_optim).epsilon(1e-12));
        // Expert optimizer: each expert shard is replicated dp/ep times.
        CHECK(ep_est.expert_optim * (part.data_parallel() / part.expert_parallel) ==
              doctest::Approx(repl_est.expert_optim).epsilon(1e-12));
    }
}

TEST_CASE("max_model_size") {
    SUBCASE("offload vs zero-0 baseline supports exactly 8x the parameters") {
        ParallelPlan base; // single device
        ParallelPlan off = base;
        off.offload = true;
        const double p_ne = 10e6, per_expert = 1e6;
        const double budget = 16.0 * 100e6; // fits 100M params at 16 B/param
        MaxModelSize plain = max_model_size(base, budget, p_ne, per_expert);
        MaxModelSize offloaded = max_model_size(off, budget, p_ne, per_expert);
        CHECK(plain.total_params == doctest::Approx(100e6).epsilon(1e-12));
        CHECK(offloaded.total_params == doctest::Approx(800e6).epsilon(1e-12));
        CHECK(offloaded.total_params / plain.total_params ==
              doctest::Approx(8.0).epsilon(1e-12));
    }
    SUBCASE("doubling the expert-parallel world doubles supported expert parameters") {
        ParallelPlan p;
        p.world_size = 4;
        p.expert_parallel = 4;
        p.zero_stage = 2;
        p.offload = true;
        ParallelPlan q = p;
        q.world_size = 8;
        q.expert_parallel = 8;
        const double budget = 40e9;
        MaxModelSize a = max_model_size(p, budget, 7e8, 1.51e8);
        MaxModelSize b = max_model_size(q, budget, 7e8, 1.51e8);
        const double a_expert = a.total_params - 7e8;
        const double b_expert = b.total_params - 7e8;
        CHECK(b_expert / a_expert == doctest::Approx(2.0).epsilon(1e-3));
    }
    SUBCASE("budget below the base model errors") {
        ParallelPlan p;
        CHECK_THROWS_AS((void)max_model_size(p, 1e6, 1e9, 1e6), ConfigError);
    }
}

TEST_CASE("plan file parsing") {
    namespace fs = std::filesystem;
    const fs::path dir = fs::temp_directory_path() / "moeforge_plan_test";
    fs::create_directories(dir);
    SUBCASE("key=value") {
        std::ofstream out(dir / "plan.txt");
        out << "# expert-heavy plan\n";
        out << "world_size = 8\n";
        out << "expert_parallel = 4\n";
        out << "zero_stage = 2\n";
        out << "offload = true\n";
        out.close();
        ParallelPlan p = parse_plan_file(dir / "plan.txt");
        CHECK(p.world_size == 8);
        CHECK(p.expert_parallel == 4);
        CHECK(p.zero_stage == 2);
        CHECK(p.offload);
    }
    SUBCASE("json") {
        std::ofstream out(dir / "plan.json");
        out << R"({"world_size": 16, "expert_parallel": 8, "model_parallel": 2, "zero_stage": 2, "offload": false})";
        out.close();
        ParallelPlan p = parse_plan_file(dir / "plan.json");
        CHECK(p.world_size == 16);
        CHECK(p.model_parallel == 2);
        CHECK_FALSE(p.offload);
    }
    SUBCASE("invalid plan rejected") {
        std::ofstream out(dir / "bad.txt");
        out << "world_size = 4\nexpert_parallel = 3\n";
        out.close();
        CHECK_THROWS_AS((void)parse_plan_file(dir / "bad.txt"), ConfigError);
    }
    fs::remove_all(dir);
}

TEST_CASE("expert-parallel simulation") {
    SUBCASE("ep = 1 equals moe_layer_forward bit-exactly") {
        Rng rng(5);
        MoeLayerParams params = random_layer(6, 10, 4, rng);
        RouterConfig cfg;
        cfg.num_experts = 4;
        Tensor x = random_tensor({12, 6}, rng);
        SimResult sim = simulate_expert_parallel_step({x}, params, cfg, Phase::kTrain, 99, 1);
        MoeLayerResult ref = moe_layer_forward(x, params, cfg, Phase::kTrain,
                                               Rng::derive_seed(99, std::uint64_t{0}));
        REQUIRE(sim.outputs.size() == 1);
        for (std::int64_t i = 0; i < x.numel(); ++i) {
            CHECK(sim.outputs[0].data()[i] == ref.y.data()[i]);
        }
        CHECK(sim.traffic.total() == 0.0);
    }
    SUBCASE("ep = 2, E = 4 matches the per-rank single-rank reference bit-exactly") {
        Rng rng(6);
        MoeLayerParams params = random_layer(5, 8, 4, rng);
        RouterConfig cfg;
        cfg.num_experts = 4;
        cfg.assignment_mode = AssignmentMode::kRts;
        std::vector<Tensor> xs = {random_tensor({9, 5}, rng), random_tensor({9, 5}, rng)};
        SimResult sim = simulate_expert_parallel_step(xs, params, cfg, Phase::kTrain, 7, 2);
        for (int r = 0; r < 2; ++r) {
            MoeLayerResult ref =
                moe_layer_forward(xs[static_cast<std::size_t>(r)], params, cfg, Phase::kTrain,
                                  Rng::derive_seed(7, static_cast<std::uint64_t>(r)));
            for (std::int64_t i = 0; i < xs[0].numel(); ++i) {
                CHECK(sim.outputs[static_cast<std::size_t>(r)].data()[i] == ref.y.data()[i]);
            }
        }
    }
    SUBCASE("mismatched per-rank token counts raise the uniform-shape error") {
        Rng rng(7);
        MoeLayerParams params = random_layer(4, 6, 2, rng);
        RouterConfig cfg;
        cfg.num_experts = 2;
        std::vector<Tensor> xs = {random_tensor({8, 4}, rng), random_tensor({9, 4}, rng)};
        CHECK_THROWS_AS(
            (void)simulate_expert_parallel_step(xs, params, cfg, Phase::kTrain, 1, 2),
            UniformShapeError);
    }
    SUBCASE("fuzzed equivalence across seeds, shapes and modes") {
        Rng rng(8);
        for (int trial = 0; trial < 25; ++trial) {
            const int ep = trial % 2 == 0 ? 2 : 4;
            const int experts = ep * (1 + static_cast<int>(rng.uniform_int(2)));
            const std::int64_t d = 2 + static_cast<std::int64_t>(rng.uniform_int(5));
            const std::int64_t f = 2 + static_cast<std::int64_t>(rng.uniform_int(7));
            const std::int64_t tokens = 2 + static_cast<std::int64_t>(rng.uniform_int(14));
            MoeLayerParams params = random_layer(d, f, experts, rng);
            RouterConfig cfg;
            cfg.num_experts = experts;
            cfg.assignment_mode = trial % 3 == 0 ? AssignmentMode::kPlain : AssignmentMode::kRts;
            const Phase phase = trial % 5 == 0 ? Phase::kEval : Phase::kTrain;
            std::vector<Tensor> xs;
            for (int r = 0; r < ep; ++r) {
                xs.push_back(random_tensor({tokens, d}, rng));
            }
            const std::uint64_t seed = rng.next_u64();
            SimResult sim = simulate_expert_parallel_step(xs, params, cfg, phase, seed, ep);
            for (int r = 0; r < ep; ++r) {
                MoeLayerResult ref = moe_layer_forward(
                    xs[static_cast<std::size_t>(r)], params, cfg, phase,
                    Rng::derive_seed(seed, static_cast<std::uint64_t>(r)));
                for (std::int64_t i = 0; i < tokens * d; ++i) {
                    REQUIRE(sim.outputs[static_cast<std::size_t>(r)].data()[i] ==
                            ref.y.data()[i]);
                }
            }
        }
    }
}

TEST_CASE("a2a traffic accounting") {
    Rng rng(9);
    MoeLayerParams params = random_layer(4, 6, 4, rng);
    RouterConfig cfg;
    cfg.num_experts = 4;

    SUBCASE("ep = 1 produces zero traffic") {
        Tensor x = random_tensor({8, 4}, rng);
        SimResult sim = simulate_expert_parallel_step({x}, params, cfg, Phase::kEval, 1, 1);
        CHECK(a2a_traffic(sim).total() == 0.0);
    }
    SUBCASE("matrix is symmetric and matches the closed form") {
        std::vector<Tensor> xs = {random_tensor({8, 4}, rng), random_tensor({8, 4}, rng)};
        SimResult sim = simulate_expert_parallel_step(xs, params, cfg, Phase::kEval, 2, 2);
        const A2ATrafficLog traffic = a2a_traffic(sim);
        CHECK(traffic.at(0, 1) == traffic.at(1, 0));
        CHECK(traffic.at(0, 0) == 0.0);
        // Each direction: forward slice + reverse slice of [E/ep, cap, d].
        const int cap = sim.decisions[0].capacity;
        const double expected = 2.0 * 2 * cap * 4 * sizeof(double);
        CHECK(traffic.at(0, 1) == doctest::Approx(expected).epsilon(1e-12));
        // Total per step: 2 * ep * (total capacity) * d * bytes * (1 - 1/ep).
        const double total_expected =
            2.0 * 2 * (4 * cap) * 4 * sizeof(double) * (1.0 - 1.0 / 2.0);
        CHECK(traffic.total() == doctest::Approx(total_expected).epsilon(1e-12));
    }
    SUBCASE("doubling the capacity factor doubles traffic") {
        std::vector<Tensor> xs = {random_tensor({16, 4}, rng), random_tensor({16, 4}, rng)};
        RouterConfig half = cfg;
        half.capacity_factor_train = 1.0;
        RouterConfig full = cfg;
        full.capacity_factor_train = 2.0;
        const double t1 =
            simulate_expert_parallel_step(xs, params, half, Phase::kTrain, 3, 2).traffic.total();
        const double t2 =
            simulate_expert_parallel_step(xs, params, full, Phase::kTrain, 3, 2).traffic.total();
        CHECK(t2 == doctest::Approx(2.0 * t1).epsilon(1e-12));
    }
}
