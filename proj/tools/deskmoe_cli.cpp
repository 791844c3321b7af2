// Copyright (c) 2026, deskmoe contributors
// SPDX-License-Identifier: Apache-2.0
//
// deskmoe: config-driven toy experiments.
//
//   deskmoe --config run.ini [--seed N] [--out DIR] train
//   deskmoe --out DIR tokenize train --corpus docs.txt --size 512
//   deskmoe --out DIR tokenize merge --vocab a.txt --vocab b.txt
//   deskmoe tokenize eval --vocab v.txt --corpus en=en.txt --corpus th=th.txt
//   deskmoe --out DIR select --input samples.jsonl --budget 100 [--eval name=questions.txt]
//   deskmoe --out DIR prefs [--config run.ini]
//   deskmoe --out DIR dpo --prefs preferences.jsonl [--config run.ini] [--init CHECKPOINT]
//   deskmoe report RUN_DIR
//
// Failures print {"error": code, "message": text} on stderr and exit 1.

#if __has_include(<CLI/CLI.hpp>)
#include <CLI/CLI.hpp>
#else
#include <CLI11.hpp>
#endif

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "deskmoe/data_selection.hpp"
#include "deskmoe/harness.hpp"
#include "deskmoe/tokenizer.hpp"

namespace fs = std::filesystem;
using namespace deskmoe;

namespace {

struct Globals {
    std::optional<fs::path> config;
    std::optional<std::uint64_t> seed;
    std::optional<fs::path> out;
};

ExperimentConfig load_config(const Globals& g, bool required) {
    ExperimentConfig cfg;
    if (g.config) cfg = ExperimentConfig::load(*g.config);
    else if (required) throw ConfigError("--config is required for this command");
    if (g.seed) cfg.seed = *g.seed;
    if (g.out) cfg.out_dir = *g.out;
    return cfg;
}

fs::path out_dir(const Globals& g) {
    if (!g.out) throw ConfigError("--out is required for this command");
    fs::create_directories(*g.out);
    return *g.out;
}

std::ifstream open_in(const fs::path& p) {
    std::ifstream in(p);
    if (!in) throw InputError("cannot read " + p.string());
    return in;
}

std::ofstream open_out(const fs::path& p) {
    std::ofstream out(p, std::ios::trunc);
    if (!out) throw Error("io", "cannot write " + p.string());
    return out;
}

std::vector<std::string> read_lines(const fs::path& p) {
    auto in = open_in(p);
    std::vector<std::string> out;
    for (std::string line; std::getline(in, line);)
        if (!line.empty()) out.push_back(line);
    return out;
}

SubwordVocab read_vocab(const fs::path& p) {
    auto in = open_in(p);
    return load_vocab(in);
}

void write_vocab(const fs::path& p, const SubwordVocab& v) {
    auto out = open_out(p);
    save_vocab(out, v);
}

// "name=path" pairs.
std::map<std::string, fs::path> named_files(const std::vector<std::string>& specs) {
    std::map<std::string, fs::path> out;
    for (const auto& s : specs) {
        const auto eq = s.find('=');
        if (eq == std::string::npos || eq == 0) throw ConfigError("expected name=path, got '" + s + "'");
        out[s.substr(0, eq)] = s.substr(eq + 1);
    }
    return out;
}

SubwordVocab config_vocab(const ExperimentConfig& cfg) {
    return cfg.vocab_file ? read_vocab(*cfg.vocab_file) : SubwordVocab{};
}

void cmd_train(const Globals& g) {
    auto cfg = load_config(g, true);
    if (cfg.out_dir.empty()) throw ConfigError("no output directory: set out_dir in [experiment] or pass --out");
    const auto res = run_experiment(cfg);
    nlohmann::json j{{"run", cfg.name}, {"out", cfg.out_dir.string()}, {"stages", nlohmann::json::array()}};
    for (const auto& s : res.stages) j["stages"].push_back({{"name", s.name}, {"final_loss", s.final_loss}});
    std::cout << j.dump() << '\n';
}

struct TokenizeArgs {
    std::vector<fs::path> corpus;
    std::string mix;
    std::size_t samples = 1000;
    std::size_t size = 512;
    std::size_t max_piece = 16;
    std::vector<fs::path> vocabs;
    fs::path vocab;
    std::vector<std::string> named_corpus;
};

void cmd_tokenize_train(const Globals& g, const TokenizeArgs& a) {
    std::vector<std::string> docs;
    for (const auto& p : a.corpus) {
        auto lines = read_lines(p);
        docs.insert(docs.end(), lines.begin(), lines.end());
    }
    if (!a.mix.empty()) {
        for (const auto& e : build_mixture(parse_mixture(a.mix), a.samples, g.seed.value_or(0)))
            docs.push_back(e.prompt + e.response);
    }
    if (docs.empty()) throw InputError("no training text: pass --corpus or --mix");
    const auto v = train_bpe(docs, a.size, a.max_piece);
    const auto path = out_dir(g) / "vocab.txt";
    write_vocab(path, v);
    std::cout << nlohmann::json{{"vocab", path.string()}, {"size", v.size()}, {"documents", docs.size()}}.dump()
              << '\n';
}

void cmd_tokenize_merge(const Globals& g, const TokenizeArgs& a) {
    if (a.vocabs.size() < 2) throw ConfigError("merge needs at least two --vocab files");
    std::vector<SubwordVocab> parts;
    nlohmann::json sizes = nlohmann::json::array();
    for (const auto& p : a.vocabs) {
        parts.push_back(read_vocab(p));
        sizes.push_back(parts.back().size());
    }
    const auto merged = merge_subtokenizers(parts);
    const auto path = out_dir(g) / "vocab.txt";
    write_vocab(path, merged);
    std::cout << nlohmann::json{{"vocab", path.string()}, {"inputs", sizes}, {"size", merged.size()}}.dump() << '\n';
}

void cmd_tokenize_eval(const Globals& g, const TokenizeArgs& a) {
    const auto v = a.vocab.empty() ? SubwordVocab{} : read_vocab(a.vocab);
    std::map<std::string, std::vector<std::string>> texts;
    for (const auto& [lang, path] : named_files(a.named_corpus)) texts[lang] = read_lines(path);
    if (texts.empty()) throw InputError("no evaluation text: pass --corpus lang=FILE");
    nlohmann::json j = nlohmann::json::object();
    for (const auto& [lang, r] : compression_ratio(texts, v)) j[lang] = r ? nlohmann::json(*r) : nlohmann::json(nullptr);
    if (g.out) {
        auto out = open_out(out_dir(g) / "compression.json");
        out << j.dump(2) << '\n';
    }
    std::cout << j.dump() << '\n';
}

struct SelectArgs {
    fs::path input;
    std::vector<std::string> eval;
    std::size_t budget = 0;
    std::size_t pca_k = 8;
    double eps = 0.5;
    std::size_t min_pts = 3;
    std::size_t dim = 64;
    std::optional<fs::path> rollouts;
    double lo = 0.0, hi = 1.0;
};

void cmd_select(const Globals& g, const SelectArgs& a) {
    const auto dir = out_dir(g);
    auto in = open_in(a.input);
    auto samples = read_samples(in);
    std::map<std::string, std::vector<std::string>> eval_sets;
    for (const auto& [name, path] : named_files(a.eval)) eval_sets[name] = read_lines(path);

    nlohmann::json summary{{"input", samples.size()}};
    if (a.rollouts) {
        std::vector<PromptRollouts> prompts;
        auto rin = open_in(*a.rollouts);
        for (std::string line; std::getline(rin, line);) {
            if (line.empty()) continue;
            try {
                auto j = nlohmann::json::parse(line);
                prompts.push_back({j.at("id").get<std::string>(), j.at("correct").get<std::vector<bool>>()});
            } catch (const nlohmann::json::exception& e) {
                throw FormatError(std::string("bad rollout record: ") + e.what());
            }
        }
        const auto pr = pass_rate_filter(prompts, a.lo, a.hi);
        const std::set<std::string> keep(pr.retained.begin(), pr.retained.end());
        std::erase_if(samples, [&](const EmbeddedSample& s) { return !keep.count(s.id); });
        for (const auto& w : pr.warnings) std::cerr << w << '\n';
        summary["pass_rate_retained"] = samples.size();
    }

    const auto dd = dedup_and_decontaminate(samples, eval_sets);
    {
        auto out = open_out(dir / "retained.jsonl");
        write_samples(out, dd.retained);
        auto rem = open_out(dir / "removed.jsonl");
        write_removal_log(rem, dd.removed);
    }
    summary["retained"] = dd.retained.size();
    summary["removed"] = dd.removed.size();

    const std::size_t budget = a.budget ? a.budget : dd.retained.size();
    SelectionConfig sc{a.pca_k, a.eps, a.min_pts, g.seed.value_or(0)};
    const HashedNgramEmbedder embed(a.dim, 3, g.seed.value_or(0));
    const auto sel = select_multilingual(dd.retained, budget, embed, sc);
    std::vector<EmbeddedSample> chosen;
    for (auto i : sel.selected) chosen.push_back(dd.retained[i]);
    auto out = open_out(dir / "selected.jsonl");
    write_samples(out, chosen);
    std::set<int> clusters(sel.labels.begin(), sel.labels.end());
    clusters.erase(kNoise);
    summary["selected"] = chosen.size();
    summary["clusters"] = clusters.size();
    std::cout << summary.dump() << '\n';
}

void cmd_prefs(const Globals& g, std::optional<std::size_t> prompts) {
    auto cfg = load_config(g, false);
    if (prompts) cfg.dpo.prompts = *prompts;
    const auto dir = out_dir(g);
    const auto built = build_math_preferences(cfg.dpo, cfg.seed, cfg.synthetic);
    {
        auto out = open_out(dir / "preferences.jsonl");
        write_preferences(out, built.pairs);
    }
    std::vector<nlohmann::json> rows;
    for (const auto& [prompt, reason] : built.discards) rows.push_back({{"prompt", prompt}, {"reason", reason}});
    detail::write_jsonl(dir / "discards.jsonl", rows);
    std::cout << nlohmann::json{{"pairs", built.pairs.size()}, {"discards", built.discards.size()},
                                {"reasons", built.reasons}}
                     .dump()
              << '\n';
}

void cmd_dpo(const Globals& g, const fs::path& prefs, const std::optional<fs::path>& init,
             std::optional<std::size_t> steps) {
    auto cfg = load_config(g, false);
    if (steps) cfg.dpo.steps = *steps;
    const auto dir = out_dir(g);
    auto in = open_in(prefs);
    const auto pairs = read_preferences(in);
    if (pairs.empty()) throw EmptyBatchError("no preference pairs in " + prefs.string());

    TrainState st{cfg.model, {}, AdamW<double>(cfg.optimizer)};
    const auto from = init ? init : cfg.init_checkpoint;
    if (from) {
        const auto ck = load_checkpoint(*from);
        st.model = ck.config;
        st.params = to_param_set<double>(ck);
    } else {
        st.params = init_params<double>(cfg.model, cfg.seed);
    }
    auto metrics = open_out(dir / "metrics.jsonl");
    MetricsSink sink = [&](const nlohmann::json& j) {
        validate_metrics_record(j);
        metrics << j.dump() << '\n';
    };
    TrainOptions topt{cfg.name, cfg.packing, cfg.wall_clock, cfg.seed, nullptr};
    const auto r = run_dpo(st, pairs, cfg.dpo, config_vocab(cfg), topt, sink);
    save_checkpoint(make_checkpoint(st.model, st.params), dir / "checkpoints" / "dpo");
    nlohmann::json m = nlohmann::json::array();
    for (const auto& [step, v] : r.margins) m.push_back({{"step", step}, {"margin", v}});
    std::cout << nlohmann::json{{"pairs", r.pairs},
                                {"steps", r.steps},
                                {"first_loss", r.first_loss},
                                {"final_loss", r.final_loss},
                                {"margins", m}}
                     .dump()
              << '\n';
}

void fail(const std::string& code, const std::string& message) {
    std::cerr << nlohmann::json{{"error", code}, {"message", message}}.dump() << '\n';
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"deskmoe: toy mixture-of-experts training recipes"};
    app.fallthrough();
    app.require_subcommand(1);
    Globals g;
    app.add_option("--config", g.config, "Experiment config file (INI)")->check(CLI::ExistingFile);
    app.add_option("--seed", g.seed, "Override the experiment seed");
    app.add_option("--out", g.out, "Output directory");

    auto* train = app.add_subcommand("train", "Run the staged recipe from --config");

    TokenizeArgs ta;
    auto* tok = app.add_subcommand("tokenize", "Tokenizer studies");
    tok->require_subcommand(1);
    auto* tok_train = tok->add_subcommand("train", "Train a byte-level BPE vocabulary");
    tok_train->add_option("--corpus", ta.corpus, "Text file, one document per line")->check(CLI::ExistingFile);
    tok_train->add_option("--mix", ta.mix, "Synthetic mixture, e.g. multilingual:0.7,copy:0.3");
    tok_train->add_option("--samples", ta.samples, "Synthetic documents to draw");
    tok_train->add_option("--size", ta.size, "Target vocabulary size");
    tok_train->add_option("--max-piece", ta.max_piece, "Longest piece in bytes");
    auto* tok_merge = tok->add_subcommand("merge", "Union of sub-tokenizers, first occurrence wins");
    tok_merge->add_option("--vocab", ta.vocabs, "Vocabulary file (repeat)")->required()->check(CLI::ExistingFile);
    auto* tok_eval = tok->add_subcommand("eval", "Tokens per character per language");
    tok_eval->add_option("--vocab", ta.vocab, "Vocabulary file (bytes if omitted)")->check(CLI::ExistingFile);
    tok_eval->add_option("--corpus", ta.named_corpus, "lang=FILE (repeat)")->required();

    SelectArgs sa;
    auto* sel = app.add_subcommand("select", "Dedup, decontaminate and cluster-select samples");
    sel->add_option("--input", sa.input, "Samples JSONL")->required()->check(CLI::ExistingFile);
    sel->add_option("--eval", sa.eval, "name=FILE of eval questions (repeat)");
    sel->add_option("--budget", sa.budget, "Samples to select (default: all retained)");
    sel->add_option("--pca-k", sa.pca_k, "PCA components");
    sel->add_option("--eps", sa.eps, "DBSCAN radius");
    sel->add_option("--min-pts", sa.min_pts, "DBSCAN core threshold");
    sel->add_option("--dim", sa.dim, "Embedding dimension");
    sel->add_option("--rollouts", sa.rollouts, "JSONL of {id, correct: [bool]} for pass-rate filtering")
        ->check(CLI::ExistingFile);
    sel->add_option("--lo", sa.lo, "Lowest pass rate kept");
    sel->add_option("--hi", sa.hi, "Highest pass rate kept");

    std::optional<std::size_t> prompts;
    auto* prefs = app.add_subcommand("prefs", "Build verified math preference pairs");
    prefs->add_option("--prompts", prompts, "Number of prompts");

    fs::path pref_file;
    std::optional<fs::path> init;
    std::optional<std::size_t> dpo_steps;
    auto* dpo = app.add_subcommand("dpo", "DPO fine-tuning on a preference file");
    dpo->add_option("--prefs", pref_file, "Preference JSONL")->required()->check(CLI::ExistingFile);
    dpo->add_option("--init", init, "Checkpoint directory to start from");
    dpo->add_option("--steps", dpo_steps, "Override the number of DPO steps");

    fs::path run_dir;
    auto* rep = app.add_subcommand("report", "Render tables from a run directory");
    rep->add_option("run_dir", run_dir, "Run directory (defaults to --out)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        fail("usage", e.what());
        return 2;
    }

    try {
        if (*train) cmd_train(g);
        else if (*tok_train) cmd_tokenize_train(g, ta);
        else if (*tok_merge) cmd_tokenize_merge(g, ta);
        else if (*tok_eval) cmd_tokenize_eval(g, ta);
        else if (*sel) cmd_select(g, sa);
        else if (*prefs) cmd_prefs(g, prompts);
        else if (*dpo) cmd_dpo(g, pref_file, init, dpo_steps);
        else if (*rep) {
            if (run_dir.empty()) {
                if (!g.out) throw ConfigError("report needs a run directory");
                run_dir = *g.out;
            }
            std::cout << report(run_dir);
        }
    } catch (const Error& e) {
        fail(e.code(), e.what());
        return 1;
    } catch (const std::exception& e) {
        fail("internal", e.what());
        return 1;
    }
    return 0;
}
