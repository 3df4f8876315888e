// SPDX-License-Identifier: Apache-2.0
#include "moeforge/parallel.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "moeforge/common.hpp"
#include "moeforge/kernels.hpp"
#include "moeforge/rng.hpp"

namespace moeforge {

void ParallelPlan::validate() const {
    if (world_size < 1 || expert_parallel < 1 || model_parallel < 1) {
        throw ConfigError("plan: all parallel degrees must be >= 1");
    }
    if (zero_stage != 0 && zero_stage != 2) {
        throw ConfigError("plan: zero_stage must be 0 or 2");
    }
    if (world_size % model_parallel != 0) {
        throw ConfigError("plan: model_parallel must divide world_size");
    }
    if (static_cast<long long>(model_parallel) * expert_parallel > world_size) {
        throw ConfigError("plan: model_parallel * expert_parallel exceeds world_size");
    }
    if (data_parallel() % expert_parallel != 0) {
        throw ConfigError("plan: expert_parallel must divide data_parallel");
    }
}

double MemoryEstimate::gpu_total() const {
    double t = nonexpert_params + expert_params;
    if (grad_optim_device == Device::kGpu) {
        t += nonexpert_grads + expert_grads + nonexpert_optim + expert_optim;
    }
    return t;
}

double MemoryEstimate::cpu_total() const {
    if (grad_optim_device == Device::kCpu) {
        return nonexpert_grads + expert_grads + nonexpert_optim + expert_optim;
    }
    return 0.0;
}

double MemoryEstimate::optimizer_grad_share() const {
    const double state = nonexpert_grads + expert_grads + nonexpert_optim + expert_optim;
    return state / (state + nonexpert_params + expert_params);
}

MemoryEstimate memory_per_gpu(const ParallelPlan& plan, double nonexpert_params,
                              double expert_params) {
    plan.validate();
    if (nonexpert_params < 0.0 || expert_params < 0.0) {
        throw ConfigError("memory_per_gpu: parameter counts must be >= 0");
    }
    const double mp = plan.model_parallel;
    const double ep = plan.expert_parallel;
    const double dp = plan.data_parallel();

    const double ne_local = nonexpert_params / mp;
    const double ex_local = expert_params / (ep * mp);
    const double ne_partition = plan.zero_stage == 2 ? dp : 1.0;
    const double ex_partition = plan.zero_stage == 2 ? dp / ep : 1.0;

    MemoryEstimate est;
    est.nonexpert_params = kBytesParam * ne_local;
    est.expert_params = kBytesParam * ex_local;
    est.nonexpert_grads = kBytesGrad * ne_local / ne_partition;
    est.nonexpert_optim = kBytesOptim * ne_local / ne_partition;
    est.expert_grads = kBytesGrad * ex_local / ex_partition;
    est.expert_optim = kBytesOptim * ex_local / ex_partition;
    est.grad_optim_device = plan.offload ? Device::kCpu : Device::kGpu;
    return est;
}

MaxModelSize max_model_size(const ParallelPlan& plan, double gpu_budget_bytes,
                            double base_params, double params_per_expert) {
    plan.validate();
    if (params_per_expert <= 0.0) {
        throw ConfigError("max_model_size: params_per_expert must be positive");
    }
    const double base_cost = memory_per_gpu(plan, base_params, 0.0).gpu_total();
    if (base_cost > gpu_budget_bytes) {
        throw ConfigError("max_model_size: base model alone exceeds the GPU budget");
    }
    auto fits = [&](std::int64_t experts) {
        return memory_per_gpu(plan, base_params,
                              params_per_expert * static_cast<double>(experts))
                   .gpu_total() <= gpu_budget_bytes;
    };
    std::int64_t hi = 1;
    while (fits(hi)) {
        hi *= 2;
        if (hi > (std::int64_t{1} << 50)) break;
    }
    std::int64_t lo = 0; // fits
    while (lo + 1 < hi) {
        const std::int64_t mid = lo + (hi - lo) / 2;
        if (fits(mid)) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    MaxModelSize out;
    out.max_experts = lo;
    out.total_params = base_params + params_per_expert * static_cast<double>(lo);
    return out;
}

ParallelPlan parse_plan_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw ConfigError("cannot open plan file " + path.string());
    }
    std::stringstream buf;
    buf << in.rdbuf();
    std::string text = buf.str();

    ParallelPlan plan;
    auto assign = [&](const std::string& key, const std::string& value) {
        if (key == "world_size") plan.world_size = std::stoi(value);
        else if (key == "expert_parallel") plan.expert_parallel = std::stoi(value);
        else if (key == "model_parallel") plan.model_parallel = std::stoi(value);
        else if (key == "zero_stage") plan.zero_stage = std::stoi(value);
        else if (key == "offload") plan.offload = (value == "1" || value == "true");
        else throw ConfigError("plan file: unknown key " + key);
    };

    const auto first = text.find_first_not_of(" \t\r\n");
    if (first != std::string::npos && text[first] == '{') {
        nlohmann::json j = nlohmann::json::parse(text);
        for (const auto& [key, value] : j.items()) {
            assign(key, value.is_boolean() ? std::string(value.get<bool>() ? "true" : "false")
                                           : value.dump());
        }
    } else {
        std::istringstream lines(text);
        std::string line;
        while (std::getline(lines, line)) {
            const auto hash = line.find('#');
            if (hash != std::string::npos) line.resize(hash);
            const auto eq = line.find('=');
            if (eq == std::string::npos) continue;
            auto trim = [](std::string s) {
                const auto b = s.find_first_not_of(" \t\r");
                const auto e = s.find_last_not_of(" \t\r");
                return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
            };
            assign(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
        }
    }
    plan.validate();
    return plan;
}

namespace {

std::string human_bytes(double bytes) {
    char buf[64];
    if (bytes >= 1e9) {
        std::snprintf(buf, sizeof(buf), "%.3f GB", bytes / 1e9);
    } else if (bytes >= 1e6) {
        std::snprintf(buf, sizeof(buf), "%.3f MB", bytes / 1e6);
    } else {
        std::snprintf(buf, sizeof(buf), "%.0f B", bytes);
    }
    return buf;
}

} // namespace

std::string memory_report_text(const ParallelPlan& plan, const MemoryEstimate& est) {
    const char* go_dev = est.grad_optim_device == Device::kGpu ? "GPU" : "CPU";
    std::ostringstream out;
    char line[160];
    out << "parallel plan: N=" << plan.world_size << " ep=" << plan.expert_parallel
        << " mp=" << plan.model_parallel << " dp=" << plan.data_parallel()
        << " zero=" << plan.zero_stage << " offload=" << (plan.offload ? "on" : "off")
        << "\n";
    std::snprintf(line, sizeof(line), "%-24s %-6s %16s\n", "category", "device", "bytes/device");
    out << line;
    auto row = [&](const char* name, const char* dev, double v) {
        std::snprintf(line, sizeof(line), "%-24s %-6s %16s\n", name, dev, human_bytes(v).c_str());
        out << line;
    };
    row("non-expert params", "GPU", est.nonexpert_params);
    row("expert params", "GPU", est.expert_params);
    row("non-expert grads", go_dev, est.nonexpert_grads);
    row("expert grads", go_dev, est.expert_grads);
    row("non-expert optimizer", go_dev, est.nonexpert_optim);
    row("expert optimizer", go_dev, est.expert_optim);
    row("total GPU", "GPU", est.gpu_total());
    row("total CPU", "CPU", est.cpu_total());
    std::snprintf(line, sizeof(line), "optimizer+grad share of training state: %.1f%%\n",
                  est.optimizer_grad_share() * 100.0);
    out << line;
    return out.str();
}

std::string memory_report_csv(const ParallelPlan& plan, const MemoryEstimate& est) {
    std::ostringstream out;
    const char* go_dev = est.grad_optim_device == Device::kGpu ? "GPU" : "CPU";
    out << "category,device,bytes\n";
    out << "nonexpert_params,GPU," << format_double(est.nonexpert_params) << "\n";
    out << "expert_params,GPU," << format_double(est.expert_params) << "\n";
    out << "nonexpert_grads," << go_dev << "," << format_double(est.nonexpert_grads) << "\n";
    out << "expert_grads," << go_dev << "," << format_double(est.expert_grads) << "\n";
    out << "nonexpert_optim," << go_dev << "," << format_double(est.nonexpert_optim) << "\n";
    out << "expert_optim," << go_dev << "," << format_double(est.expert_optim) << "\n";
    out << "gpu_total,GPU," << format_double(est.gpu_total()) << "\n";
    out << "cpu_total,CPU," << format_double(est.cpu_total()) << "\n";
    (void)plan;
    return out.str();
}

double A2ATrafficLog::total() const {
    double t = 0.0;
    for (double b : bytes) {
        t += b;
    }
    return t;
}

SimResult simulate_expert_parallel_step(const std::vector<Tensor>& per_rank_tokens,
                                        const MoeLayerParams& params,
                                        const RouterConfig& cfg, Phase phase,
                                        std::uint64_t seed, int ep) {
    cfg.validate();
    if (ep < 1 || static_cast<int>(per_rank_tokens.size()) != ep) {
        throw ConfigError("simulate: one token tensor per rank required");
    }
    if (cfg.num_experts % ep != 0) {
        throw ConfigError("simulate: expert_parallel must divide num_experts");
    }
    if (cfg.top_k != 1) {
        throw ConfigError("simulate: only top-1 routing is simulated");
    }
    const std::int64_t t_count = per_rank_tokens[0].shape()[0];
    const std::int64_t d = per_rank_tokens[0].shape()[1];
    for (const Tensor& x : per_rank_tokens) {
        if (x.shape().size() != 2 || x.shape()[0] != t_count || x.shape()[1] != d) {
            throw UniformShapeError(
                "simulate: per-rank token counts must be identical (All-to-All "
                "requires the same tensor shape on every rank)");
        }
    }
    const int e_count = cfg.num_experts;
    const int e_local = e_count / ep;
    const std::int64_t f = params.experts[0].w1.shape()[1];

    SimResult result;
    result.ranks.resize(static_cast<std::size_t>(ep));
    for (int r = 0; r < ep; ++r) {
        result.ranks[static_cast<std::size_t>(r)].rank = r;
        for (int e = r * e_local; e < (r + 1) * e_local; ++e) {
            result.ranks[static_cast<std::size_t>(r)].local_experts.push_back(e);
        }
    }

    // Local gating + assignment per rank (each rank sees only its tokens).
    std::vector<GateResult> gates;
    std::vector<RoutingDecision> decisions;
    std::vector<DispatchBuffer> buffers;
    for (int r = 0; r < ep; ++r) {
        const std::uint64_t rank_seed = Rng::derive_seed(seed, static_cast<std::uint64_t>(r));
        GateResult gate = gate_forward(per_rank_tokens[static_cast<std::size_t>(r)],
                                       params.gate_w, cfg, phase,
                                       Rng::derive_seed(rank_seed, "jitter"));
        RoutingDecision dec = make_assignment(gate.choice, t_count, cfg, phase,
                                              Rng::derive_seed(rank_seed, "assign"));
        for (std::int64_t t = 0; t < t_count; ++t) {
            dec.gate_prob[static_cast<std::size_t>(t)] = gate.gate_prob[0].data()[t];
        }
        buffers.push_back(dispatch(per_rank_tokens[static_cast<std::size_t>(r)], dec));
        gates.push_back(std::move(gate));
        decisions.push_back(std::move(dec));
    }
    const int cap = decisions[0].capacity;

    // Forward All-to-All: recv[s][r] holds rank r's slice for rank s's
    // experts, in fixed (sender, expert) order.
    const std::int64_t slice = static_cast<std::int64_t>(e_local) * cap * d;
    std::vector<std::vector<double>> recv(static_cast<std::size_t>(ep));
    A2ATrafficLog traffic;
    traffic.ep = ep;
    traffic.bytes.assign(static_cast<std::size_t>(ep) * ep, 0.0);
    for (int s = 0; s < ep; ++s) {
        recv[static_cast<std::size_t>(s)].assign(static_cast<std::size_t>(ep) * slice, 0.0);
        for (int r = 0; r < ep; ++r) {
            const double* src =
                buffers[static_cast<std::size_t>(r)].data.data().data() +
                static_cast<std::int64_t>(s) * e_local * cap * d;
            std::memcpy(recv[static_cast<std::size_t>(s)].data() + r * slice, src,
                        static_cast<std::size_t>(slice) * sizeof(double));
            if (r != s) {
                traffic.bytes[static_cast<std::size_t>(r) * ep + s] +=
                    static_cast<double>(slice) * sizeof(double);
            }
        }
    }

    // Local expert compute on every received slice, then reverse All-to-All.
    // out_buffers[r] mirrors buffers[r] but holds expert outputs.
    std::vector<std::vector<double>> out_buffers(static_cast<std::size_t>(ep));
    for (int r = 0; r < ep; ++r) {
        out_buffers[static_cast<std::size_t>(r)]
            .assign(static_cast<std::size_t>(e_count) * cap * d, 0.0);
    }
    std::vector<double> hidden(static_cast<std::size_t>(cap) * f);
    std::vector<double> rows_out(static_cast<std::size_t>(cap) * d);
    for (int s = 0; s < ep; ++s) {
        for (int r = 0; r < ep; ++r) {
            for (int le = 0; le < e_local; ++le) {
                const int e = s * e_local + le;
                const ExpertFfn& ffn = params.experts[static_cast<std::size_t>(e)];
                const double* x_rows = recv[static_cast<std::size_t>(s)].data() +
                                       r * slice + static_cast<std::int64_t>(le) * cap * d;
                kernels::expert_ffn_rows(x_rows, ffn.w1.data().data(), ffn.b1.data().data(),
                                         ffn.w2.data().data(), ffn.b2.data().data(),
                                         hidden.data(), rows_out.data(), cap, d, f);
                // Reverse exchange: owner s returns outputs to origin rank r.
                std::memcpy(out_buffers[static_cast<std::size_t>(r)].data() +
                                static_cast<std::int64_t>(e) * cap * d,
                            rows_out.data(), static_cast<std::size_t>(cap) * d * sizeof(double));
                if (r != s) {
                    traffic.bytes[static_cast<std::size_t>(s) * ep + r] +=
                        static_cast<double>(cap) * d * sizeof(double);
                }
            }
        }
    }

    // Combine locally, mirroring the library combine arithmetic.
    for (int r = 0; r < ep; ++r) {
        const RoutingDecision& dec = decisions[static_cast<std::size_t>(r)];
        const Tensor& x = per_rank_tokens[static_cast<std::size_t>(r)];
        std::vector<double> y(static_cast<std::size_t>(t_count) * d, 0.0);
        for (std::int64_t t = 0; t < t_count; ++t) {
            if (dec.slot[static_cast<std::size_t>(t)] == kDropped) {
                std::memcpy(y.data() + t * d, x.data().data() + t * d,
                            static_cast<std::size_t>(d) * sizeof(double));
                continue;
            }
            const std::int64_t row =
                static_cast<std::int64_t>(dec.expert_id[static_cast<std::size_t>(t)]) * cap +
                dec.slot[static_cast<std::size_t>(t)];
            const double w = dec.gate_prob[static_cast<std::size_t>(t)] *
                             static_cast<double>(e_count);
            const double* out_row = out_buffers[static_cast<std::size_t>(r)].data() + row * d;
            for (std::int64_t j = 0; j < d; ++j) {
                y[t * d + j] += w * out_row[j];
            }
        }
        result.outputs.push_back(Tensor::from_data({t_count, d}, std::move(y)));
    }
    result.decisions = std::move(decisions);
    result.traffic = std::move(traffic);
    return result;
}

A2ATrafficLog a2a_traffic(const SimResult& result) {
    return result.traffic;
}

} // namespace moeforge
