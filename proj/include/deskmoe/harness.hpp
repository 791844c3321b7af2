// Copyright (c) 2026, deskmoe contributors
// SPDX-License-Identifier: Apache-2.0
//
// Experiment plumbing: INI configs, staged training with packing and
// accumulation, the preference/DPO phase, freeze studies, metrics records and
// the report renderer.

#pragma once

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <nlohmann/json.hpp>

#include "deskmoe/alignment.hpp"
#include "deskmoe/checkpoint.hpp"
#include "deskmoe/freeze.hpp"
#include "deskmoe/model.hpp"
#include "deskmoe/optim.hpp"
#include "deskmoe/packing.hpp"
#include "deskmoe/synthetic.hpp"
#include "deskmoe/tokenizer.hpp"

namespace deskmoe {

inline constexpr int kMetricsSchemaVersion = 1;

enum class StageKind { pretrain, sft };

inline std::string to_string(StageKind k) { return k == StageKind::sft ? "sft" : "pretrain"; }

struct StageSpec {
    Stage stage;
    StageKind kind = StageKind::pretrain;
    std::size_t context = 128;
    std::string data = "copy";  // mixture, "task:weight, ..."
    std::size_t data_size = 256;
};

struct DpoSettings {
    bool enabled = false;
    std::size_t prompts = 200;
    std::size_t candidates = 4;
    double correct_rate = 0.35;
    std::uint64_t scorer_seed = 7;
    std::size_t steps = 100;
    std::size_t batch = 4;
    double beta = 0.1;
    double lr = 1e-4;
    double weight_decay = 0.0;
    std::string chat = "general";
    std::size_t eval_points = 3;
};

struct FreezeStudySettings {
    bool enabled = false;
    std::vector<std::string> plans{"full", "all:attention", "last1:*", "first1:*", "lora=4@*"};
    Stage stage;
    std::size_t context = 128;
    std::string data = "multilingual:0.5, reversal:0.5";
    std::size_t data_size = 256;
};

struct ExperimentConfig {
    std::string name = "experiment";
    std::uint64_t seed = 1234;
    std::filesystem::path out_dir;
    ModelConfig model;
    AdamWConfig optimizer;
    bool persist_moments = true;
    bool wall_clock = false;
    std::string tokenizer = "bytes";  // bytes | bpe
    std::optional<std::filesystem::path> vocab_file;
    std::optional<std::filesystem::path> init_checkpoint;
    std::size_t eval_size = 64;
    double longcot_keep = 1.0;
    SyntheticOptions synthetic;
    bool packing = true;
    std::size_t ranks = 4;
    std::size_t compare_micro_batch = 4;
    std::string freeze_plan = "full";
    std::vector<StageSpec> stages;
    DpoSettings dpo;
    FreezeStudySettings freeze_study;

    StagePlan plan() const {
        StagePlan p;
        for (const auto& s : stages) p.stages.push_back(s.stage);
        return p;
    }

    void validate() const;
    static ExperimentConfig from_ptree(const boost::property_tree::ptree& tree,
                                       const std::filesystem::path& base_dir = {});
    static ExperimentConfig load(const std::filesystem::path& file);
};

namespace detail {

namespace pt = boost::property_tree;

inline pt::ptree::path_type ini_path(const std::string& key) { return pt::ptree::path_type(key, '/'); }

class IniSection {
   public:
    IniSection(const pt::ptree& root, std::string name) : name_(std::move(name)) {
        if (auto n = root.get_child_optional(ini_path(name_))) node_ = &*n;
    }

    bool present() const { return node_ != nullptr; }

    template <typename F>
    void get(const std::string& key, F& field) {
        seen_.insert(key);
        if (!node_) return;
        auto raw = node_->get_optional<std::string>(ini_path(key));
        if (!raw) return;
        const std::string v = trim(*raw);
        auto bad = [&] { return ConfigError(cat("[", name_, "] ", key, " = '", v, "' is not a valid value")); };
        try {
            if constexpr (std::is_same_v<F, bool>) {
                if (v == "true" || v == "1" || v == "yes") field = true;
                else if (v == "false" || v == "0" || v == "no") field = false;
                else throw bad();
            } else if constexpr (std::is_same_v<F, std::string>) {
                field = v;
            } else if constexpr (std::is_integral_v<F>) {
                std::size_t used = 0;
                if (v.empty() || v[0] == '-') throw bad();
                const auto x = std::stoull(v, &used);
                if (used != v.size()) throw bad();
                field = static_cast<F>(x);
            } else {
                std::size_t used = 0;
                const double x = std::stod(v, &used);
                if (used != v.size() || !std::isfinite(x)) throw bad();
                field = x;
            }
        } catch (const ConfigError&) {
            throw;
        } catch (const std::exception&) {
            throw bad();
        }
    }

    void finish() const {
        if (!node_) return;
        for (const auto& [key, child] : *node_) {
            if (!seen_.count(key)) throw ConfigError(cat("[", name_, "] unknown key '", key, "'"));
        }
    }

   private:
    std::string name_;
    const pt::ptree* node_ = nullptr;
    std::set<std::string> seen_;
};

inline void read_stage_fields(IniSection& sec, Stage& s, std::size_t& context) {
    sec.get("steps", s.total_steps);
    sec.get("warmup", s.warmup_steps);
    sec.get("lr_max", s.lr_max);
    sec.get("lr_min", s.lr_min);
    sec.get("alpha_max", s.alpha_max);
    sec.get("beta_max", s.beta_max);
    sec.get("rope_base", s.rope_base);
    sec.get("context", context);
    sec.get("micro_batch", s.micro_batch);
    sec.get("grad_accum", s.grad_accum_steps);
    s.global_batch = s.micro_batch * s.grad_accum_steps;
}

inline std::filesystem::path resolve_path(const std::filesystem::path& base, const std::string& p) {
    std::filesystem::path path(p);
    return path.is_absolute() || base.empty() ? path : base / path;
}

}  // namespace detail

inline ExperimentConfig ExperimentConfig::from_ptree(const boost::property_tree::ptree& tree,
                                                     const std::filesystem::path& base_dir) {
    ExperimentConfig c;
    static const std::set<std::string> sections{"experiment", "model",  "optimizer",   "packing",
                                                "freeze",     "dpo",    "freeze_study", "synthetic"};
    for (const auto& [name, node] : tree) {
        if (name.rfind("stage.", 0) == 0) continue;
        if (!sections.count(name)) throw ConfigError("unknown config section [" + name + "]");
    }

    detail::IniSection exp(tree, "experiment");
    std::string out, moments = "persist", vocab, init;
    exp.get("name", c.name);
    exp.get("seed", c.seed);
    exp.get("out_dir", out);
    exp.get("moments", moments);
    exp.get("wall_clock", c.wall_clock);
    exp.get("tokenizer", c.tokenizer);
    exp.get("vocab", vocab);
    exp.get("init_checkpoint", init);
    exp.get("eval_size", c.eval_size);
    exp.get("longcot_keep", c.longcot_keep);
    exp.finish();
    if (!out.empty()) c.out_dir = out;
    if (moments != "persist" && moments != "reset") throw ConfigError("[experiment] moments must be persist or reset");
    c.persist_moments = moments == "persist";
    if (!vocab.empty()) c.vocab_file = detail::resolve_path(base_dir, vocab);
    if (!init.empty()) c.init_checkpoint = detail::resolve_path(base_dir, init);

    c.model = read_model_config(tree, "model");
    if (auto m = tree.get_child_optional("model")) {
        static const std::set<std::string> keys{"n_layers",    "n_heads",       "n_kv_heads",
                                                "head_dim",    "hidden_dim",    "vocab_size",
                                                "expert_intermediate_size",     "n_shared_experts",
                                                "n_specialized_experts",        "top_k",
                                                "rope_base",   "max_context",   "moe_interval",
                                                "dense_intermediate_size",      "rms_eps",
                                                "init_scale"};
        for (const auto& [key, child] : *m)
            if (!keys.count(key)) throw ConfigError("[model] unknown key '" + key + "'");
    }

    detail::IniSection opt(tree, "optimizer");
    opt.get("beta1", c.optimizer.beta1);
    opt.get("beta2", c.optimizer.beta2);
    opt.get("eps", c.optimizer.eps);
    opt.get("weight_decay", c.optimizer.weight_decay);
    opt.get("clip_norm", c.optimizer.clip_norm);
    opt.finish();

    detail::IniSection pack(tree, "packing");
    pack.get("enabled", c.packing);
    pack.get("ranks", c.ranks);
    pack.get("micro_batch", c.compare_micro_batch);
    pack.finish();

    detail::IniSection syn(tree, "synthetic");
    syn.get("min_len", c.synthetic.min_len);
    syn.get("max_len", c.synthetic.max_len);
    syn.get("lines", c.synthetic.lines);
    syn.get("max_operand", c.synthetic.max_operand);
    syn.get("max_modulus", c.synthetic.max_modulus);
    syn.finish();

    detail::IniSection fr(tree, "freeze");
    fr.get("plan", c.freeze_plan);
    fr.finish();

    for (const auto& [name, node] : tree) {
        if (name.rfind("stage.", 0) != 0) continue;
        detail::IniSection sec(tree, name);
        StageSpec s;
        s.stage.name = name.substr(6);
        std::string kind = "pretrain";
        sec.get("kind", kind);
        sec.get("data", s.data);
        sec.get("data_size", s.data_size);
        detail::read_stage_fields(sec, s.stage, s.context);
        sec.finish();
        if (kind != "pretrain" && kind != "sft") throw ConfigError("[" + name + "] kind must be pretrain or sft");
        s.kind = kind == "sft" ? StageKind::sft : StageKind::pretrain;
        c.stages.push_back(std::move(s));
    }

    detail::IniSection dpo(tree, "dpo");
    dpo.get("enabled", c.dpo.enabled);
    dpo.get("prompts", c.dpo.prompts);
    dpo.get("candidates", c.dpo.candidates);
    dpo.get("correct_rate", c.dpo.correct_rate);
    dpo.get("scorer_seed", c.dpo.scorer_seed);
    dpo.get("steps", c.dpo.steps);
    dpo.get("batch", c.dpo.batch);
    dpo.get("beta", c.dpo.beta);
    dpo.get("lr", c.dpo.lr);
    dpo.get("weight_decay", c.dpo.weight_decay);
    dpo.get("chat", c.dpo.chat);
    dpo.get("eval_points", c.dpo.eval_points);
    dpo.finish();

    detail::IniSection fs(tree, "freeze_study");
    std::string plans;
    fs.get("enabled", c.freeze_study.enabled);
    fs.get("plans", plans);
    fs.get("data", c.freeze_study.data);
    fs.get("data_size", c.freeze_study.data_size);
    c.freeze_study.stage.name = "freeze_study";
    detail::read_stage_fields(fs, c.freeze_study.stage, c.freeze_study.context);
    fs.finish();
    if (!plans.empty()) {
        c.freeze_study.plans.clear();
        for (const auto& p : detail::split(plans, '|'))
            if (!detail::trim(p).empty()) c.freeze_study.plans.push_back(detail::trim(p));
    }
    c.validate();
    return c;
}

inline ExperimentConfig ExperimentConfig::load(const std::filesystem::path& file) {
    if (!std::filesystem::is_regular_file(file)) throw ConfigError("config file not found: " + file.string());
    boost::property_tree::ptree tree;
    try {
        boost::property_tree::read_ini(file.string(), tree);
    } catch (const boost::property_tree::ptree_error& e) {
        throw ConfigError(std::string("cannot parse config: ") + e.what());
    }
    return from_ptree(tree, file.parent_path());
}

inline void ExperimentConfig::validate() const {
    model.validate();
    if (model.vocab_size < 256) throw ConfigError("model vocab_size must cover the 256 byte pieces");
    if (stages.empty()) throw ConfigError("config defines no [stage.*] sections");
    plan().validate();
    std::set<std::string> names;
    bool seen_sft = false;
    for (const auto& s : stages) {
        if (!names.insert(s.stage.name).second) throw ConfigError("duplicate stage name " + s.stage.name);
        if (s.context < 2) throw ConfigError("stage " + s.stage.name + ": context must be >= 2");
        if (s.data_size < 1) throw ConfigError("stage " + s.stage.name + ": data_size must be >= 1");
        if (s.stage.micro_batch < 1) throw ConfigError("stage " + s.stage.name + ": micro_batch must be >= 1");
        parse_mixture(s.data);
        if (s.kind == StageKind::sft) seen_sft = true;
        else if (seen_sft) throw ConfigError("pretraining stage " + s.stage.name + " follows an sft stage");
    }
    (void)FreezePlan::parse(freeze_plan);
    if (tokenizer != "bytes" && tokenizer != "bpe") throw ConfigError("tokenizer must be bytes or bpe");
    if (longcot_keep < 0 || longcot_keep > 1) throw ConfigError("longcot_keep must lie in [0, 1]");
    if (eval_size < 1) throw ConfigError("eval_size must be >= 1");
    if (ranks < 1 || compare_micro_batch < 1) throw ConfigError("packing ranks and micro_batch must be >= 1");
    if (synthetic.max_modulus < 2) throw ConfigError("synthetic max_modulus must be >= 2");
    if (synthetic.max_operand < 1) throw ConfigError("synthetic max_operand must be >= 1");
    if (vocab_file && !std::filesystem::is_regular_file(*vocab_file))
        throw ConfigError("vocab file not found: " + vocab_file->string());
    if (init_checkpoint && !std::filesystem::is_regular_file(*init_checkpoint / "manifest.ini"))
        throw ConfigError("init checkpoint not found: " + init_checkpoint->string());
    if (dpo.enabled) {
        if (dpo.candidates < 2) throw ConfigError("[dpo] candidates must be >= 2");
        if (dpo.prompts < 1 || dpo.batch < 1 || dpo.steps < 1) throw ConfigError("[dpo] prompts, batch, steps must be >= 1");
        if (!(dpo.beta > 0)) throw ConfigError("[dpo] beta must be positive");
        if (dpo.correct_rate < 0 || dpo.correct_rate > 1) throw ConfigError("[dpo] correct_rate must lie in [0, 1]");
        if (dpo.eval_points < 2) throw ConfigError("[dpo] eval_points must be >= 2");
        parse_chat_mode(dpo.chat);
    }
    if (freeze_study.enabled) {
        freeze_study.stage.validate();
        parse_mixture(freeze_study.data);
        if (freeze_study.plans.empty()) throw ConfigError("[freeze_study] lists no plans");
        for (const auto& p : freeze_study.plans) FreezePlan::parse(p);
    }
}

// ---------------------------------------------------------------------------
// Data preparation

inline ChatMode chat_mode_for(const Example& e) { return e.task == "modular" ? ChatMode::longcot : ChatMode::general; }

struct PreparedData {
    std::vector<PackSample> samples;
    std::size_t dropped = 0;  // sft samples longer than the context
    std::size_t cropped = 0;  // pretraining texts cut to the context
};

// Next-token sample over context + target. Loss covers the target, and the
// context too when `loss_on_context`.
inline PackSample make_sample(std::size_t id, const std::vector<std::int32_t>& context,
                              const std::vector<std::int32_t>& target, bool loss_on_context) {
    std::vector<std::int32_t> all(context);
    all.insert(all.end(), target.begin(), target.end());
    if (all.size() < 2) throw InputError(detail::cat("sample ", id, " is shorter than two tokens"));
    PackSample s;
    s.id = id;
    s.tokens.assign(all.begin(), all.end() - 1);
    s.targets.assign(all.begin() + 1, all.end());
    s.weights.assign(s.tokens.size(), 1.0);
    if (!loss_on_context && !context.empty())
        std::fill(s.weights.begin(), s.weights.begin() + static_cast<std::ptrdiff_t>(context.size() - 1), 0.0);
    return s;
}

inline PreparedData prepare_samples(const std::vector<Example>& examples, const SubwordVocab& vocab, StageKind kind,
                                    std::size_t capacity) {
    PreparedData out;
    for (const auto& e : examples) {
        const std::size_t id = out.samples.size();
        if (kind == StageKind::pretrain) {
            auto ids = encode(e.prompt + e.response + "\n", vocab);
            if (ids.size() > capacity + 1) {
                ids.resize(capacity + 1);
                ++out.cropped;
            }
            out.samples.push_back(make_sample(id, {}, ids, true));
        } else {
            auto s = make_sample(id, encode(render_template(chat_mode_for(e), e.prompt), vocab),
                                 encode(e.response + "\n", vocab), false);
            if (s.size() > capacity) {
                ++out.dropped;
                continue;
            }
            out.samples.push_back(std::move(s));
        }
    }
    return out;
}

// Mean next-token loss over the weighted tokens of `samples`, each run alone.
inline double evaluate_loss(const ModelConfig& cfg, const ParamSet<double>& params,
                            const std::vector<PackSample>& samples) {
    NoGradScope no_grad;
    double sum = 0, count = 0;
    for (const auto& s : samples) {
        auto out = decoder_forward(std::span<const std::int32_t>(s.tokens), cfg, params);
        if (auto ce = lm_cross_entropy(out.logits, s.targets, s.weights)) {
            sum += ce->sum.item();
            count += ce->count;
        }
    }
    if (count == 0) throw EmptyBatchError("evaluation set has no loss-bearing tokens");
    return sum / count;
}

// ---------------------------------------------------------------------------
// Metrics

using MetricsSink = std::function<void(const nlohmann::json&)>;

namespace detail {

enum class FieldType { number, uint, string, number_array, nullable_number };

inline const std::map<std::string, FieldType>& record_fields(const std::string& kind) {
    using F = FieldType;
    static const std::map<std::string, FieldType> common{
        {"schema", F::uint}, {"kind", F::string},      {"run", F::string},
        {"stage", F::string}, {"stage_index", F::uint}, {"step", F::uint}};
    static const std::map<std::string, std::map<std::string, FieldType>> by_kind{
        {"train",
         {{"global_step", F::uint},   {"lr", F::number},         {"alpha", F::number},
          {"beta", F::number},        {"lm_loss", F::number},    {"aux_loss", F::nullable_number},
          {"z_loss", F::nullable_number}, {"total_loss", F::number}, {"grad_norm", F::number},
          {"tokens", F::uint},        {"packs", F::uint},        {"pack_ratio", F::number},
          {"expert_counts", F::number_array}, {"rope_base", F::number}, {"context", F::uint},
          {"optimizer_steps", F::uint}}},
        {"dpo",
         {{"global_step", F::uint}, {"lr", F::number}, {"dpo_loss", F::number}, {"grad_norm", F::number},
          {"margin", F::number}, {"optimizer_steps", F::uint}}},
        {"eval", {{"margin", F::nullable_number}, {"eval_loss", F::nullable_number}}},
    };
    static std::map<std::string, std::map<std::string, FieldType>> merged;
    auto it = by_kind.find(kind);
    if (it == by_kind.end()) throw FormatError("unknown metrics record kind '" + kind + "'");
    auto& m = merged[kind];
    if (m.empty()) {
        m = common;
        m.insert(it->second.begin(), it->second.end());
    }
    return m;
}

}  // namespace detail

// Checks one record against the versioned schema. Extra fields are rejected
// except the optional wall-clock entry.
inline void validate_metrics_record(const nlohmann::json& j) {
    using F = detail::FieldType;
    if (!j.is_object()) throw FormatError("metrics record is not an object");
    if (!j.contains("schema") || j["schema"] != kMetricsSchemaVersion)
        throw FormatError(detail::cat("metrics record schema must be ", kMetricsSchemaVersion));
    if (!j.contains("kind") || !j["kind"].is_string()) throw FormatError("metrics record lacks kind");
    const auto& fields = detail::record_fields(j["kind"].get<std::string>());
    for (const auto& [key, type] : fields) {
        if (!j.contains(key)) throw FormatError("metrics record lacks " + key);
        const auto& v = j[key];
        bool ok = false;
        switch (type) {
            case F::number: ok = v.is_number(); break;
            case F::uint: ok = v.is_number_integer() && v.get<std::int64_t>() >= 0; break;
            case F::string: ok = v.is_string(); break;
            case F::nullable_number: ok = v.is_null() || v.is_number(); break;
            case F::number_array:
                ok = v.is_array() && std::all_of(v.begin(), v.end(), [](const auto& x) { return x.is_number(); });
                break;
        }
        if (!ok) throw FormatError("metrics field " + key + " has the wrong type");
    }
    for (const auto& [key, v] : j.items()) {
        if (fields.count(key)) continue;
        if (key == "wall_clock_ms" && v.is_number()) continue;
        throw FormatError("metrics record has unknown field " + key);
    }
}

// Reads and validates a metrics file. Steps must rise within each stage.
inline std::vector<nlohmann::json> read_metrics(const std::filesystem::path& file) {
    std::ifstream in(file);
    if (!in) throw ReportError("no metrics file at " + file.string());
    std::vector<nlohmann::json> out;
    std::map<std::pair<std::string, std::string>, std::uint64_t> last;
    std::string line;
    std::size_t no = 0;
    while (std::getline(in, line)) {
        ++no;
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw FormatError(detail::cat(file.string(), ":", no, ": ", e.what()));
        }
        validate_metrics_record(j);
        const auto key = std::make_pair(j["stage"].get<std::string>(), j["kind"].get<std::string>());
        const auto step = j["step"].get<std::uint64_t>();
        if (auto it = last.find(key); it != last.end() && step <= it->second)
            throw FormatError(detail::cat(file.string(), ":", no, ": step ", step, " does not increase"));
        last[key] = step;
        out.push_back(std::move(j));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Training

struct TrainState {
    ModelConfig model;
    ParamSet<double> params;
    AdamW<double> opt;
    std::size_t global_step = 0;
};

struct TrainOptions {
    std::string run = "run";
    bool packing = true;
    bool wall_clock = false;
    std::uint64_t seed = 0;
    const std::vector<PackSample>* eval = nullptr;
};

struct StageResult {
    std::string name;
    std::size_t index = 0;
    std::size_t steps = 0;
    double initial_loss = 0;  // LM loss of the first step
    double first_loss = 0;    // mean LM loss over the first window
    double final_loss = 0;    // mean LM loss over the final window
    std::optional<double> eval_loss;
    std::size_t samples = 0;
    std::size_t packs = 0;
    double pack_ratio = 0;
    std::vector<double> expert_load;  // activations per expert over the final window, summed over layers
    double expert_cv = 0;
    std::size_t optimizer_steps_at_start = 0;
};

inline double coefficient_of_variation(const std::vector<double>& xs) {
    if (xs.empty()) return 0;
    const double mean = std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
    if (mean == 0) return 0;
    double var = 0;
    for (double x : xs) var += (x - mean) * (x - mean);
    return std::sqrt(var / static_cast<double>(xs.size())) / mean;
}

// Every token must reach exactly top_k distinct experts: nothing is dropped.
inline void check_droptoken(const std::vector<RoutingOutcome>& routing) {
    for (std::size_t l = 0; l < routing.size(); ++l) {
        const auto& r = routing[l];
        if (r.topk.size() != r.tokens * r.top_k)
            throw ContractError(detail::cat("moe layer ", l, ": routed slots ", r.topk.size(), " != tokens * k"));
        const std::size_t total = std::accumulate(r.c_agg.begin(), r.c_agg.end(), std::size_t{0});
        if (total != r.tokens * r.top_k)
            throw ContractError(detail::cat("moe layer ", l, ": ", total, " activations for ", r.tokens, " tokens"));
        for (std::size_t t = 0; t < r.tokens; ++t) {
            auto e = r.experts_of(t);
            std::set<std::size_t> distinct(e.begin(), e.end());
            if (distinct.size() != r.top_k || *distinct.rbegin() >= r.n_experts)
                throw ContractError(detail::cat("moe layer ", l, ": token ", t, " routed to an invalid expert set"));
        }
    }
}

namespace detail {

inline std::vector<PackedBatch> make_packs(const std::vector<PackSample>& data, std::size_t context, bool packing) {
    if (packing) return pack_samples(data, context).packs;
    std::vector<PackedBatch> packs;
    for (const auto& s : data) packs.push_back(std::move(pack_samples({s}, context).packs.front()));
    return packs;
}

struct PackStats {
    Tensor<double> loss;
    double lm = 0;
    double tokens = 0;
    double aux = 0;
    double z = 0;
    bool has_moe = false;
    std::vector<double> counts;
};

// Forward over the real prefix of a pack; trailing pads never enter the
// model, so they cannot skew routing statistics.
inline PackStats pack_forward(const ModelConfig& cfg, const ParamSet<double>& params, const PackedBatch& p,
                              double alpha, double beta) {
    const std::size_t n = p.real_tokens();
    std::span<const std::int32_t> tokens(p.tokens.data(), n), targets(p.targets.data(), n);
    std::span<const std::size_t> positions(p.positions.data(), n);
    std::span<const double> weights(p.weights.data(), n);
    AttentionSpec spec(std::vector<int>(p.sample_ids.begin(), p.sample_ids.begin() + static_cast<std::ptrdiff_t>(n)));
    auto out = decoder_forward(tokens, positions, cfg, params, spec);
    check_droptoken(out.routing);
    PackStats st;
    st.counts.assign(cfg.n_specialized_experts, 0.0);
    for (const auto& r : out.routing)
        for (std::size_t e = 0; e < r.c_agg.size(); ++e) st.counts[e] += static_cast<double>(r.c_agg[e]);
    auto ce = lm_cross_entropy(out.logits, targets, weights);
    if (ce) {
        st.loss = ce->sum;
        st.lm = ce->sum.item();
        st.tokens = ce->count;
    } else {
        st.loss = scale(sum(out.logits), 0.0);
    }
    if (out.aux.defined()) {
        st.has_moe = true;
        st.aux = out.aux.item();
        st.z = out.z.item();
        if (st.tokens > 0 && (alpha > 0 || beta > 0))
            st.loss = add(st.loss, scale(add(scale(out.aux, alpha), scale(out.z, beta)), st.tokens));
    }
    return st;
}

}  // namespace detail

// Runs stage `si` of `plan` on `data`. Each optimizer step draws
// grad_accum_steps micro-batches of micro_batch packs; the summed losses
// (LM plus tokens * (alpha * aux + beta * z)) are normalized by the global
// token count. The model adopts the stage's rope_base and context.
inline StageResult train_stage(TrainState& st, const StagePlan& plan, std::size_t si, std::size_t context,
                               const std::vector<PackSample>& data, const TrainOptions& opt,
                               const MetricsSink& sink = {}) {
    plan.validate();
    const Stage& stage = plan.stages.at(si);
    if (data.empty()) throw EmptyBatchError("stage " + stage.name + " has no training samples");
    st.model.rope_base = stage.rope_base;
    st.model.max_context = std::max(st.model.max_context, context);
    const auto packs = detail::make_packs(data, context, opt.packing);

    StageResult res;
    res.name = stage.name;
    res.index = si;
    res.steps = stage.total_steps;
    res.samples = data.size();
    res.packs = packs.size();
    res.optimizer_steps_at_start = st.opt.steps();
    std::size_t real = 0;
    for (const auto& p : packs) real += p.real_tokens();
    res.pack_ratio = static_cast<double>(real) / static_cast<double>(packs.size() * context);

    Rng rng(opt.seed);
    std::vector<std::size_t> order(packs.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    auto shuffle = [&] {
        for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    };
    shuffle();
    std::size_t cursor = 0;

    const std::size_t window = std::max<std::size_t>(1, stage.total_steps / 10);
    const std::size_t n_exp = st.model.n_specialized_experts;
    res.expert_load.assign(n_exp, 0.0);
    std::vector<double> lm_trace;

    for (std::size_t step = 0; step < stage.total_steps; ++step) {
        try {
            const auto t0 = std::chrono::steady_clock::now();
            const double lr = lr_at_step(plan, si, step);
            const auto coeff = moe_coeff_at_step(plan, si, step);
            std::vector<detail::PackStats> stats;
            std::vector<std::function<MicroLoss<double>()>> micro;
            std::size_t step_real = 0, step_packs = 0;
            for (std::size_t a = 0; a < stage.grad_accum_steps; ++a) {
                std::vector<const PackedBatch*> batch;
                for (std::size_t m = 0; m < stage.micro_batch; ++m) {
                    if (cursor == order.size()) {
                        shuffle();
                        cursor = 0;
                    }
                    batch.push_back(&packs[order[cursor++]]);
                    step_real += batch.back()->real_tokens();
                    ++step_packs;
                }
                micro.push_back([&, batch] {
                    MicroLoss<double> ml;
                    for (const auto* p : batch) {
                        auto s = detail::pack_forward(st.model, st.params, *p, coeff.alpha, coeff.beta);
                        ml.loss_sum = ml.loss_sum.defined() ? add(ml.loss_sum, s.loss) : s.loss;
                        ml.tokens += s.tokens;
                        ml.samples += static_cast<double>(p->boundaries.size());
                        stats.push_back(std::move(s));
                    }
                    return ml;
                });
            }
            const auto report = accumulated_step(micro, st.params, st.opt, lr);

            double lm = 0, tokens = 0, aux = 0, z = 0;
            bool has_moe = false;
            std::vector<double> counts(n_exp, 0.0);
            for (const auto& s : stats) {
                lm += s.lm;
                tokens += s.tokens;
                aux += s.aux * s.tokens;
                z += s.z * s.tokens;
                has_moe = has_moe || s.has_moe;
                for (std::size_t e = 0; e < n_exp; ++e) counts[e] += s.counts[e];
            }
            lm /= tokens;
            aux /= tokens;
            z /= tokens;
            lm_trace.push_back(lm);
            if (step + window >= stage.total_steps)
                for (std::size_t e = 0; e < n_exp; ++e) res.expert_load[e] += counts[e];

            if (sink) {
                nlohmann::json j{{"schema", kMetricsSchemaVersion},
                                 {"kind", "train"},
                                 {"run", opt.run},
                                 {"stage", stage.name},
                                 {"stage_index", si},
                                 {"step", step},
                                 {"global_step", st.global_step},
                                 {"lr", lr},
                                 {"alpha", coeff.alpha},
                                 {"beta", coeff.beta},
                                 {"lm_loss", lm},
                                 {"aux_loss", has_moe ? nlohmann::json(aux) : nlohmann::json(nullptr)},
                                 {"z_loss", has_moe ? nlohmann::json(z) : nlohmann::json(nullptr)},
                                 {"total_loss", report.loss},
                                 {"grad_norm", report.grad_norm},
                                 {"tokens", static_cast<std::uint64_t>(tokens)},
                                 {"packs", step_packs},
                                 {"pack_ratio", static_cast<double>(step_real) /
                                                    static_cast<double>(step_packs * context)},
                                 {"expert_counts", counts},
                                 {"rope_base", stage.rope_base},
                                 {"context", context},
                                 {"optimizer_steps", st.opt.steps()}};
                if (opt.wall_clock)
                    j["wall_clock_ms"] =
                        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
                sink(j);
            }
            ++st.global_step;
        } catch (const Error& e) {
            throw Error(e.code(), detail::cat("stage ", stage.name, " step ", step, ": ", e.what()));
        }
    }
    const std::size_t w = std::min(window, lm_trace.size());
    res.initial_loss = lm_trace.front();
    res.first_loss = std::accumulate(lm_trace.begin(), lm_trace.begin() + static_cast<std::ptrdiff_t>(w), 0.0) /
                     static_cast<double>(w);
    res.final_loss = std::accumulate(lm_trace.end() - static_cast<std::ptrdiff_t>(w), lm_trace.end(), 0.0) /
                     static_cast<double>(w);
    res.expert_cv = coefficient_of_variation(res.expert_load);
    if (opt.eval) res.eval_loss = evaluate_loss(st.model, st.params, *opt.eval);
    return res;
}

// ---------------------------------------------------------------------------
// Preference data and DPO

struct MathPrompt {
    Example example;
    std::size_t a = 0, b = 0, m = 2;
};

inline std::vector<MathPrompt> gen_math_prompts(std::size_t n, std::uint64_t seed, const SyntheticOptions& opt = {}) {
    Rng rng(seed);
    std::vector<MathPrompt> out;
    for (std::size_t i = 0; i < n; ++i) {
        MathPrompt p;
        p.a = rng.below(opt.max_operand);
        p.b = rng.below(opt.max_operand);
        p.m = 2 + rng.below(opt.max_modulus - 1);
        p.example = modular_example(p.a, p.b, p.m);
        out.push_back(std::move(p));
    }
    return out;
}

// Seeded stand-in for sampling N responses from a policy: each candidate is
// correct with probability `correct_rate`, otherwise carries a wrong boxed
// answer or (one time in ten) no box at all.
inline std::vector<std::string> math_candidates(const MathPrompt& p, std::size_t n, double correct_rate, Rng& rng) {
    std::vector<std::string> out;
    const std::size_t s = p.a + p.b;
    for (std::size_t i = 0; i < n; ++i) {
        if (rng.uniform() < correct_rate) {
            out.push_back(p.example.response);
            continue;
        }
        const std::size_t wrong_sum = s + 1 + rng.below(p.m - 1);
        const std::string thought = std::to_string(p.a) + "+" + std::to_string(p.b) + "=" + std::to_string(wrong_sum);
        if (rng.below(10) == 0) {
            out.push_back(wrap_think(thought, "not sure"));
        } else {
            const std::string r = std::to_string(wrong_sum % p.m);
            out.push_back(wrap_think(thought + ", " + std::to_string(wrong_sum) + " mod " + std::to_string(p.m) + "=" + r,
                                     "\\boxed{" + r + "}"));
        }
    }
    return out;
}

struct PreferenceBuild {
    std::vector<PreferencePair> pairs;
    std::vector<std::pair<std::string, std::string>> discards;  // prompt, reason
    std::map<std::string, std::size_t> reasons;                 // counts by reason code
};

inline PreferenceBuild build_math_preferences(const DpoSettings& s, std::uint64_t seed,
                                              const SyntheticOptions& opt = {}) {
    PreferenceBuild out;
    const auto prompts = gen_math_prompts(s.prompts, seed, opt);
    const SeededScorer scorer{s.scorer_seed};
    for (std::size_t i = 0; i < prompts.size(); ++i) {
        Rng rng = Rng(seed).fork(i + 1);
        const auto& p = prompts[i];
        const auto cands = math_candidates(p, s.candidates, s.correct_rate, rng);
        auto r = build_preference_pair(p.example.prompt, cands, scorer, PreferenceKind::math, p.example.truth);
        if (r.pair) {
            ++out.reasons[r.pair->reason];
            out.pairs.push_back(std::move(*r.pair));
        } else {
            ++out.reasons[r.discard_reason];
            out.discards.emplace_back(p.example.prompt, r.discard_reason);
        }
    }
    return out;
}

struct DpoResult {
    std::size_t pairs = 0;
    std::size_t steps = 0;
    std::vector<std::pair<std::size_t, double>> margins;  // (step, mean chosen - rejected log-prob)
    double first_loss = 0;
    double final_loss = 0;
};

namespace detail {

struct TokenizedPair {
    std::vector<std::int32_t> prompt, chosen, rejected;
};

inline double mean_margin(const ModelConfig& cfg, const ParamSet<double>& params,
                          const std::vector<TokenizedPair>& pairs) {
    NoGradScope no_grad;
    double total = 0;
    for (const auto& p : pairs)
        total += sequence_logprob(p.prompt, p.chosen, cfg, params).item() -
                 sequence_logprob(p.prompt, p.rejected, cfg, params).item();
    return total / static_cast<double>(pairs.size());
}

}  // namespace detail

// DPO against a frozen copy of the starting policy. The mean margin over all
// pairs is measured at `eval_points` evenly spaced steps, ends included.
inline DpoResult run_dpo(TrainState& st, const std::vector<PreferencePair>& pairs, const DpoSettings& s,
                         const SubwordVocab& vocab, const TrainOptions& opt, const MetricsSink& sink = {}) {
    if (pairs.empty()) throw EmptyBatchError("dpo: no preference pairs");
    const ChatMode mode = parse_chat_mode(s.chat);
    std::vector<detail::TokenizedPair> tok;
    for (const auto& p : pairs)
        tok.push_back({encode(render_template(mode, p.prompt), vocab), encode(p.chosen, vocab), encode(p.rejected, vocab)});

    std::vector<double> ref_c(tok.size()), ref_r(tok.size());
    {
        NoGradScope no_grad;
        for (std::size_t i = 0; i < tok.size(); ++i) {
            ref_c[i] = sequence_logprob(tok[i].prompt, tok[i].chosen, st.model, st.params).item();
            ref_r[i] = sequence_logprob(tok[i].prompt, tok[i].rejected, st.model, st.params).item();
        }
    }
    AdamWConfig ocfg = st.opt.config();
    ocfg.weight_decay = s.weight_decay;
    AdamW<double> optimizer(ocfg);

    DpoResult res;
    res.pairs = pairs.size();
    res.steps = s.steps;
    std::set<std::size_t> eval_at;
    for (std::size_t k = 0; k < s.eval_points; ++k)
        eval_at.insert(static_cast<std::size_t>(
            std::llround(static_cast<double>(k) * static_cast<double>(s.steps) / static_cast<double>(s.eval_points - 1))));
    auto record_margin = [&](std::size_t step) {
        const double m = detail::mean_margin(st.model, st.params, tok);
        res.margins.emplace_back(step, m);
        if (sink)
            sink({{"schema", kMetricsSchemaVersion}, {"kind", "eval"}, {"run", opt.run}, {"stage", "dpo"},
                  {"stage_index", 0}, {"step", step}, {"margin", m}, {"eval_loss", nullptr}});
    };

    Rng rng(opt.seed);
    std::vector<std::size_t> order(tok.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    auto shuffle = [&] {
        for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    };
    shuffle();
    std::size_t cursor = 0;
    std::vector<double> losses;
    for (std::size_t step = 0; step < s.steps; ++step) {
        if (eval_at.count(step)) record_margin(step);
        try {
            const auto t0 = std::chrono::steady_clock::now();
            std::vector<std::size_t> batch;
            for (std::size_t b = 0; b < std::min(s.batch, tok.size()); ++b) {
                if (cursor == order.size()) {
                    shuffle();
                    cursor = 0;
                }
                batch.push_back(order[cursor++]);
            }
            zero_grads(st.params);
            Tape tape;
            TapeScope scope(tape);
            std::vector<Tensor<double>> lc, lr_;
            std::vector<double> rc, rr;
            double batch_margin = 0;
            for (auto i : batch) {
                lc.push_back(sequence_logprob(tok[i].prompt, tok[i].chosen, st.model, st.params));
                lr_.push_back(sequence_logprob(tok[i].prompt, tok[i].rejected, st.model, st.params));
                rc.push_back(ref_c[i]);
                rr.push_back(ref_r[i]);
                batch_margin += lc.back().item() - lr_.back().item();
            }
            auto loss = dpo_loss(stack(lc), stack(lr_), rc, rr, s.beta);
            tape.backward(loss);
            const auto report = optimizer.step(st.params, s.lr);
            losses.push_back(loss.item());
            if (sink) {
                nlohmann::json j{{"schema", kMetricsSchemaVersion}, {"kind", "dpo"}, {"run", opt.run},
                                 {"stage", "dpo"}, {"stage_index", 0}, {"step", step},
                                 {"global_step", st.global_step}, {"lr", s.lr}, {"dpo_loss", loss.item()},
                                 {"grad_norm", report.grad_norm},
                                 {"margin", batch_margin / static_cast<double>(batch.size())},
                                 {"optimizer_steps", optimizer.steps()}};
                if (opt.wall_clock)
                    j["wall_clock_ms"] =
                        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
                sink(j);
            }
            ++st.global_step;
        } catch (const Error& e) {
            throw Error(e.code(), detail::cat("stage dpo step ", step, ": ", e.what()));
        }
    }
    record_margin(s.steps);
    const std::size_t w = std::max<std::size_t>(1, losses.size() / 10);
    res.first_loss = std::accumulate(losses.begin(), losses.begin() + static_cast<std::ptrdiff_t>(w), 0.0) /
                     static_cast<double>(w);
    res.final_loss = std::accumulate(losses.end() - static_cast<std::ptrdiff_t>(w), losses.end(), 0.0) /
                     static_cast<double>(w);
    return res;
}

// ---------------------------------------------------------------------------
// Freeze study

struct FreezeRow {
    std::string setting;
    double final_loss = 0;    // held-out loss after training
    double train_loss = 0;    // final-window training loss
    double initial_loss = 0;  // held-out loss right after the plan is applied
    std::size_t trainable = 0;
    bool frozen_identical = true;
};

// Fine-tunes a copy of `base` under `plan_text` and checks that every frozen
// base parameter kept its exact bits.
inline FreezeRow run_freeze_plan(const ModelConfig& model, const ParamSet<double>& base, const std::string& plan_text,
                                 const Stage& stage, std::size_t context, const std::vector<PackSample>& train,
                                 const std::vector<PackSample>& eval, const AdamWConfig& ocfg,
                                 const TrainOptions& topt) {
    const auto frozen = apply_freeze_plan(clone_params(base), FreezePlan::parse(plan_text), model, topt.seed);
    FreezeRow row;
    row.setting = plan_text;
    row.trainable = frozen.trainable_count;
    TrainState st{model, frozen.params, AdamW<double>(ocfg)};
    st.model.rope_base = stage.rope_base;
    row.initial_loss = evaluate_loss(st.model, st.params, eval);
    StagePlan plan{{stage}};
    auto r = train_stage(st, plan, 0, context, train, topt);
    row.train_loss = r.final_loss;
    row.final_loss = evaluate_loss(st.model, st.params, eval);
    const std::set<std::string> trainable(frozen.trainable.begin(), frozen.trainable.end());
    for (const auto& [name, t] : base) {
        if (trainable.count(name)) continue;
        const auto& now = st.params.at(name);
        for (std::size_t i = 0; i < t.numel(); ++i)
            if (std::bit_cast<std::uint64_t>(now[i]) != std::bit_cast<std::uint64_t>(t[i])) row.frozen_identical = false;
    }
    return row;
}

inline nlohmann::json to_json(const FreezeRow& r) {
    return {{"setting", r.setting},         {"final_loss", r.final_loss}, {"train_loss", r.train_loss},
            {"initial_loss", r.initial_loss}, {"trainable_params", r.trainable},
            {"frozen_identical", r.frozen_identical}};
}

// ---------------------------------------------------------------------------
// Full experiment

struct ExperimentResult {
    ModelConfig model;
    ParamSet<double> params;
    SubwordVocab vocab;
    std::vector<StageResult> stages;
    std::map<std::string, PaddingComparison> padding;
    std::optional<PreferenceBuild> preferences;
    std::optional<DpoResult> dpo;
    std::vector<FreezeRow> freeze_study;
};

inline nlohmann::json to_json(const StageResult& r) {
    return {{"name", r.name},
            {"index", r.index},
            {"steps", r.steps},
            {"initial_loss", r.initial_loss},
            {"first_loss", r.first_loss},
            {"final_loss", r.final_loss},
            {"eval_loss", r.eval_loss ? nlohmann::json(*r.eval_loss) : nlohmann::json(nullptr)},
            {"samples", r.samples},
            {"packs", r.packs},
            {"pack_ratio", r.pack_ratio},
            {"expert_load", r.expert_load},
            {"expert_cv", r.expert_cv},
            {"optimizer_steps_at_start", r.optimizer_steps_at_start}};
}

inline nlohmann::json to_json(const PaddingComparison& c) {
    return {{"fixed", c.fixed}, {"dynamic", c.dynamic}, {"ddp", c.ddp}, {"packing", c.packing}};
}

namespace detail {

inline std::vector<std::string> corpus_texts(const std::vector<Example>& xs) {
    std::vector<std::string> out;
    for (const auto& e : xs) out.push_back(e.prompt + e.response);
    return out;
}

inline void write_jsonl(const std::filesystem::path& file, const std::vector<nlohmann::json>& rows) {
    std::ofstream out(file);
    if (!out) throw Error("io", "cannot write " + file.string());
    for (const auto& r : rows) out << r.dump() << '\n';
}

}  // namespace detail

// Executes the configured stages in order, then the optional freeze study and
// DPO phase. With an output directory it writes metrics.jsonl, summary.json,
// vocab.txt, per-stage checkpoints and the preference files.
inline ExperimentResult run_experiment(const ExperimentConfig& cfg, const MetricsSink& extra_sink = {}) {
    cfg.validate();
    namespace fs = std::filesystem;
    const bool write = !cfg.out_dir.empty();
    std::ofstream metrics;
    if (write) {
        fs::create_directories(cfg.out_dir);
        metrics.open(cfg.out_dir / "metrics.jsonl", std::ios::trunc);
        if (!metrics) throw Error("io", "cannot write " + (cfg.out_dir / "metrics.jsonl").string());
    }
    MetricsSink sink = [&](const nlohmann::json& j) {
        validate_metrics_record(j);
        if (write) metrics << j.dump() << '\n';
        if (extra_sink) extra_sink(j);
    };

    ExperimentResult res;
    std::vector<std::vector<Example>> train_sets, eval_sets;
    for (std::size_t i = 0; i < cfg.stages.size(); ++i) {
        const auto& s = cfg.stages[i];
        const double keep = s.kind == StageKind::sft ? cfg.longcot_keep : 1.0;
        const auto mix = parse_mixture(s.data);
        train_sets.push_back(build_mixture(mix, s.data_size, cfg.seed + 1000 * (i + 1), cfg.synthetic, keep));
        eval_sets.push_back(build_mixture(mix, cfg.eval_size, cfg.seed + 1000 * (i + 1) + 500, cfg.synthetic, keep));
    }

    if (cfg.vocab_file) {
        std::ifstream in(*cfg.vocab_file);
        res.vocab = load_vocab(in);
    } else if (cfg.tokenizer == "bpe") {
        std::vector<std::string> corpus;
        for (const auto& t : train_sets) {
            auto texts = detail::corpus_texts(t);
            corpus.insert(corpus.end(), texts.begin(), texts.end());
        }
        res.vocab = train_bpe(corpus, cfg.model.vocab_size);
    }
    if (res.vocab.size() > cfg.model.vocab_size)
        throw ConfigError(detail::cat("tokenizer has ", res.vocab.size(), " pieces, model vocab is ", cfg.model.vocab_size));
    if (write) {
        std::ofstream v(cfg.out_dir / "vocab.txt");
        save_vocab(v, res.vocab);
    }

    TrainState st{cfg.model, {}, AdamW<double>(cfg.optimizer)};
    if (cfg.init_checkpoint) {
        const auto ck = load_checkpoint(*cfg.init_checkpoint);
        st.model = ck.config;
        st.params = to_param_set<double>(ck);
    } else {
        st.params = init_params<double>(cfg.model, cfg.seed);
    }

    const StagePlan plan = cfg.plan();
    std::optional<ParamSet<double>> pre_sft;
    ModelConfig pre_sft_model = st.model;
    for (std::size_t i = 0; i < cfg.stages.size(); ++i) {
        const auto& spec = cfg.stages[i];
        if (spec.kind == StageKind::sft && !pre_sft) {
            pre_sft = clone_params(st.params);
            pre_sft_model = st.model;
            auto frozen = apply_freeze_plan(st.params, FreezePlan::parse(cfg.freeze_plan), st.model, cfg.seed);
            st.params = std::move(frozen.params);
        }
        if (!cfg.persist_moments) st.opt.reset();
        const auto train = prepare_samples(train_sets[i], res.vocab, spec.kind, spec.context);
        const auto eval = prepare_samples(eval_sets[i], res.vocab, spec.kind, spec.context);
        std::vector<std::size_t> lengths;
        for (const auto& s : train.samples) lengths.push_back(s.size());
        if (lengths.empty()) throw EmptyBatchError("stage " + spec.stage.name + ": every sample exceeds the context");
        res.padding[spec.stage.name] = compare_padding(lengths, spec.context, cfg.compare_micro_batch, cfg.ranks);

        TrainOptions topt{cfg.name, cfg.packing, cfg.wall_clock, cfg.seed + 17 * (i + 1),
                          eval.samples.empty() ? nullptr : &eval.samples};
        res.stages.push_back(train_stage(st, plan, i, spec.context, train.samples, topt, sink));
        if (write)
            save_checkpoint(make_checkpoint(st.model, st.params),
                            cfg.out_dir / "checkpoints" / (std::to_string(i) + "_" + spec.stage.name));
    }
    if (!pre_sft) {
        pre_sft = clone_params(st.params);
        pre_sft_model = st.model;
    }

    if (cfg.freeze_study.enabled) {
        const auto& fsx = cfg.freeze_study;
        const auto mix = parse_mixture(fsx.data);
        const auto train = prepare_samples(build_mixture(mix, fsx.data_size, cfg.seed + 90001, cfg.synthetic),
                                           res.vocab, StageKind::sft, fsx.context);
        const auto eval = prepare_samples(build_mixture(mix, cfg.eval_size, cfg.seed + 90002, cfg.synthetic),
                                          res.vocab, StageKind::sft, fsx.context);
        TrainOptions topt{cfg.name, cfg.packing, false, cfg.seed + 90003, nullptr};
        std::vector<nlohmann::json> rows;
        for (const auto& p : fsx.plans) {
            res.freeze_study.push_back(run_freeze_plan(pre_sft_model, *pre_sft, p, fsx.stage, fsx.context,
                                                       train.samples, eval.samples, cfg.optimizer, topt));
            rows.push_back(to_json(res.freeze_study.back()));
        }
        if (write) detail::write_jsonl(cfg.out_dir / "freeze_study.jsonl", rows);
    }

    if (cfg.dpo.enabled) {
        res.preferences = build_math_preferences(cfg.dpo, cfg.seed + 70001, cfg.synthetic);
        if (write) {
            std::ofstream p(cfg.out_dir / "preferences.jsonl");
            write_preferences(p, res.preferences->pairs);
            std::vector<nlohmann::json> rows;
            for (const auto& [prompt, reason] : res.preferences->discards)
                rows.push_back({{"prompt", prompt}, {"reason", reason}});
            detail::write_jsonl(cfg.out_dir / "discards.jsonl", rows);
        }
        TrainOptions topt{cfg.name, cfg.packing, cfg.wall_clock, cfg.seed + 70002, nullptr};
        res.dpo = run_dpo(st, res.preferences->pairs, cfg.dpo, res.vocab, topt, sink);
        if (write)
            save_checkpoint(make_checkpoint(st.model, st.params),
                            cfg.out_dir / "checkpoints" / (std::to_string(cfg.stages.size()) + "_dpo"));
    }

    res.model = st.model;
    res.params = st.params;
    if (write) {
        nlohmann::json summary{{"run", cfg.name},
                               {"seed", cfg.seed},
                               {"schema", kMetricsSchemaVersion},
                               {"moments", cfg.persist_moments ? "persist" : "reset"},
                               {"freeze_plan", cfg.freeze_plan},
                               {"stages", nlohmann::json::array()},
                               {"padding", nlohmann::json::object()}};
        for (const auto& s : res.stages) summary["stages"].push_back(to_json(s));
        for (const auto& [name, c] : res.padding) summary["padding"][name] = to_json(c);
        if (res.dpo) {
            nlohmann::json m = nlohmann::json::array();
            for (const auto& [step, v] : res.dpo->margins) m.push_back({{"step", step}, {"margin", v}});
            summary["dpo"] = {{"pairs", res.dpo->pairs},
                              {"steps", res.dpo->steps},
                              {"margins", m},
                              {"first_loss", res.dpo->first_loss},
                              {"final_loss", res.dpo->final_loss},
                              {"reasons", res.preferences->reasons}};
        }
        std::ofstream out(cfg.out_dir / "summary.json");
        out << summary.dump(2) << '\n';
    }
    return res;
}

// ---------------------------------------------------------------------------
// Report

namespace detail {

inline std::string fmt(double v, int precision = 4) {
    std::ostringstream o;
    o << std::fixed << std::setprecision(precision) << v;
    return o.str();
}

inline std::string table(const std::vector<std::string>& head, const std::vector<std::vector<std::string>>& rows) {
    std::vector<std::size_t> w(head.size());
    for (std::size_t c = 0; c < head.size(); ++c) w[c] = head[c].size();
    for (const auto& r : rows)
        for (std::size_t c = 0; c < r.size() && c < w.size(); ++c) w[c] = std::max(w[c], r[c].size());
    std::ostringstream o;
    auto line = [&](const std::vector<std::string>& r) {
        o << '|';
        for (std::size_t c = 0; c < w.size(); ++c)
            o << ' ' << std::left << std::setw(static_cast<int>(w[c])) << (c < r.size() ? r[c] : "") << " |";
        o << '\n';
    };
    line(head);
    o << '|';
    for (auto x : w) o << std::string(x + 2, '-') << '|';
    o << '\n';
    for (const auto& r : rows) line(r);
    return o.str();
}

}  // namespace detail

// Renders the tables of a run directory and writes loss_curve.csv next to the
// metrics.
inline std::string report(const std::filesystem::path& run_dir) {
    namespace fs = std::filesystem;
    if (!fs::is_directory(run_dir)) throw ReportError("run directory not found: " + run_dir.string());
    const auto records = read_metrics(run_dir / "metrics.jsonl");
    if (records.empty()) throw ReportError("metrics file is empty in " + run_dir.string());

    std::ostringstream out;
    std::vector<std::string> stage_order;
    std::map<std::string, std::vector<const nlohmann::json*>> train;
    std::vector<const nlohmann::json*> dpo, evals;
    for (const auto& r : records) {
        const auto kind = r["kind"].get<std::string>();
        if (kind == "train") {
            const auto s = r["stage"].get<std::string>();
            if (!train.count(s)) stage_order.push_back(s);
            train[s].push_back(&r);
        } else if (kind == "dpo") {
            dpo.push_back(&r);
        } else {
            evals.push_back(&r);
        }
    }

    {
        std::ofstream csv(run_dir / "loss_curve.csv");
        csv << "global_step,stage,step,lr,lm_loss,total_loss\n";
        for (const auto& s : stage_order)
            for (const auto* r : train[s])
                csv << (*r)["global_step"] << ',' << s << ',' << (*r)["step"] << ',' << (*r)["lr"].get<double>() << ','
                    << (*r)["lm_loss"].get<double>() << ',' << (*r)["total_loss"].get<double>() << '\n';
    }

    out << "## Loss by stage\n\n";
    std::vector<std::vector<std::string>> rows;
    for (const auto& s : stage_order) {
        const auto& v = train[s];
        double mn = v.front()->at("lm_loss").get<double>();
        for (const auto* r : v) mn = std::min(mn, (*r)["lm_loss"].get<double>());
        rows.push_back({s, std::to_string(v.size()), detail::fmt((*v.front())["lm_loss"].get<double>()),
                        detail::fmt((*v.back())["lm_loss"].get<double>()), detail::fmt(mn),
                        detail::fmt((*v.back())["lr"].get<double>(), 6)});
    }
    out << detail::table({"stage", "steps", "first lm", "final lm", "min lm", "final lr"}, rows) << '\n';

    out << "## Loss curve (10 points per stage; full curve in loss_curve.csv)\n\n";
    rows.clear();
    for (const auto& s : stage_order) {
        const auto& v = train[s];
        const std::size_t points = std::min<std::size_t>(10, v.size());
        for (std::size_t k = 0; k < points; ++k) {
            const std::size_t i = points == 1 ? 0 : k * (v.size() - 1) / (points - 1);
            rows.push_back({s, std::to_string((*v[i])["step"].get<std::uint64_t>()),
                            detail::fmt((*v[i])["lm_loss"].get<double>()), detail::fmt((*v[i])["lr"].get<double>(), 6)});
        }
    }
    out << detail::table({"stage", "step", "lm loss", "lr"}, rows) << '\n';

    out << "## Expert utilization (final 10% of each stage, share of activations)\n\n";
    rows.clear();
    std::size_t n_exp = 0;
    for (const auto& s : stage_order) {
        const auto& v = train[s];
        const std::size_t window = std::max<std::size_t>(1, v.size() / 10);
        std::vector<double> load;
        for (std::size_t i = v.size() - window; i < v.size(); ++i) {
            const auto c = (*v[i])["expert_counts"].get<std::vector<double>>();
            if (load.empty()) load.assign(c.size(), 0.0);
            for (std::size_t e = 0; e < c.size() && e < load.size(); ++e) load[e] += c[e];
        }
        n_exp = std::max(n_exp, load.size());
        const double total = std::accumulate(load.begin(), load.end(), 0.0);
        std::vector<std::string> row{s};
        for (double x : load) row.push_back(total > 0 ? detail::fmt(x / total, 3) : "-");
        row.push_back(detail::fmt(coefficient_of_variation(load), 3));
        rows.push_back(std::move(row));
    }
    std::vector<std::string> head{"stage"};
    for (std::size_t e = 0; e < n_exp; ++e) head.push_back("e" + std::to_string(e));
    head.push_back("cv");
    out << detail::table(head, rows) << '\n';

    nlohmann::json summary;
    if (std::ifstream in(run_dir / "summary.json"); in) {
        try {
            summary = nlohmann::json::parse(in);
        } catch (const nlohmann::json::exception& e) {
            throw ReportError(std::string("summary.json: ") + e.what());
        }
    }
    if (summary.contains("padding")) {
        out << "## Packing efficiency (effective-token ratio)\n\n";
        rows.clear();
        for (const auto& [stage, c] : summary["padding"].items()) {
            const double f = c["fixed"], d = c["dynamic"], g = c["ddp"], p = c["packing"];
            rows.push_back({stage, detail::fmt(f), detail::fmt(d), detail::fmt(g), detail::fmt(p),
                            p >= d && d >= g && g >= f ? "yes" : "no"});
        }
        out << detail::table({"stage", "fixed pad", "dynamic", "ddp", "packing", "packing>=dynamic>=ddp>=fixed"}, rows)
            << '\n';
    }

    if (!dpo.empty()) {
        out << "## DPO\n\n";
        rows.clear();
        for (const auto* r : evals)
            if ((*r)["stage"] == "dpo" && (*r)["margin"].is_number())
                rows.push_back({std::to_string((*r)["step"].get<std::uint64_t>()),
                                detail::fmt((*r)["margin"].get<double>())});
        out << detail::table({"step", "mean chosen-rejected log-prob"}, rows);
        out << "\nfirst dpo loss " << detail::fmt(dpo.front()->at("dpo_loss").get<double>()) << ", final "
            << detail::fmt(dpo.back()->at("dpo_loss").get<double>()) << "\n\n";
    }

    if (std::ifstream fin(run_dir / "freeze_study.jsonl"); fin) {
        out << "## Training settings and loss comparison\n\n";
        rows.clear();
        std::string line;
        while (std::getline(fin, line)) {
            if (line.empty()) continue;
            nlohmann::json r;
            try {
                r = nlohmann::json::parse(line);
            } catch (const nlohmann::json::exception& e) {
                throw ReportError(std::string("freeze_study.jsonl: ") + e.what());
            }
            rows.push_back({r.at("setting").get<std::string>(), detail::fmt(r.at("final_loss").get<double>()),
                            std::to_string(r.at("trainable_params").get<std::uint64_t>())});
        }
        out << detail::table({"setting", "final loss", "trainable params"}, rows) << '\n';
    }
    return out.str();
}

}  // namespace deskmoe
