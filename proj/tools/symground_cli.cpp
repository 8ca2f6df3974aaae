// SPDX-License-Identifier: Apache-2.0
//
// Operator surface over the symground C API. Subcommands map onto pipeline
// stages; precedence is flags > --config document > preset defaults.

#include <cstdint>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "symground.h"

namespace {

using nlohmann::json;

std::string read_file(const std::string &path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) {
        std::cerr << "error: cannot open config file: " << path << "\n";
        std::exit(SG_ERR_INPUT);
    }
    return std::string(std::istreambuf_iterator<char>(is), {});
}

int finish(int status) {
    if (status != SG_OK) {
        std::string msg(512, '\0');
        const size_t n = sg_last_error(msg.data(), msg.size());
        msg.resize(std::min(n, msg.size() - 1));
        std::cerr << "error: " << msg << "\n";
    }
    return status;
}

struct CommonFlags {
    std::string config_path;
    std::string preset;
    std::string out_dir;
    std::vector<uint64_t> seeds;
    std::vector<std::string> archs;

    json overrides = json::object();

    std::string config_text() const {
        return config_path.empty() ? std::string() : read_file(config_path);
    }
    std::string overrides_text() {
        if (!preset.empty()) overrides["preset"] = preset;
        if (!out_dir.empty()) overrides["out_dir"] = out_dir;
        if (!seeds.empty()) overrides["seeds"] = seeds;
        if (!archs.empty()) overrides["model"]["archs"] = archs;
        return overrides.dump();
    }
};

void add_common(CLI::App *cmd, CommonFlags &flags) {
    cmd->add_option("--config", flags.config_path, "run configuration JSON document");
    cmd->add_option("--preset", flags.preset, "configuration preset (desk or paper)")
        ->check(CLI::IsMember({"desk", "paper"}));
    cmd->add_option("--out", flags.out_dir, "output directory for run artifacts");
    cmd->add_option("--seed", flags.seeds, "run seed (repeat for several seeds)");
    cmd->add_option("--arch", flags.archs, "architecture to run (transformer, lstm)")
        ->check(CLI::IsMember({"transformer", "lstm"}));
}

}  // namespace

int main(int argc, char **argv) {
    CLI::App app{std::string(sg_version()) +
                 " - dual-tokenization grounding testbed for small language models"};
    app.require_subcommand(1);

    CommonFlags gen_f, build_f, train_f, eval_f, mech_f, report_f, show_f;

    auto *gen = app.add_subcommand("gen-corpus", "generate the synthetic child-directed corpus");
    add_common(gen, gen_f);
    std::optional<long> gen_tokens;
    std::optional<uint64_t> gen_seed;
    std::optional<std::string> gen_data;
    gen->add_option("--tokens", gen_tokens, "approximate corpus size in tokens");
    gen->add_option("--gen-seed", gen_seed, "generator seed");
    gen->add_option("--data", gen_data, "data directory to write into");

    auto *build = app.add_subcommand("build-corpus",
                                     "parse transcripts, build vocabulary, chunks, templates");
    add_common(build, build_f);
    std::optional<std::string> transcripts, captions, wordlist, templates;
    std::optional<int> min_count, chunk_len;
    build->add_option("--transcripts", transcripts, "directory of CHAT .cha transcripts");
    build->add_option("--captions", captions, "caption-dialogue JSONL file");
    build->add_option("--wordlist", wordlist, "target word inventory file");
    build->add_option("--templates", templates, "context template frames (JSONL)");
    build->add_option("--min-count", min_count, "vocabulary frequency threshold");
    build->add_option("--chunk-len", chunk_len, "training chunk length in tokens");

    auto *train = app.add_subcommand("train", "train models and write scheduled checkpoints");
    add_common(train, train_f);
    std::optional<int> steps, batch;
    std::optional<double> lr;
    train->add_option("--steps", steps, "total training steps");
    train->add_option("--batch", batch, "batch size in chunks");
    train->add_option("--lr", lr, "peak learning rate");

    auto *eval = app.add_subcommand("eval", "surprisal trajectories and grounding gain");
    add_common(eval, eval_f);
    std::optional<int> mismatch_samples;
    eval->add_option("--mismatch-samples", mismatch_samples,
                     "sampled mismatch pool size (0 = full grid)");

    auto *mech = app.add_subcommand("mech",
                                    "saliency, head classification, interventions, tuned lens");
    add_common(mech, mech_f);
    std::optional<std::string> mech_ckpts;
    std::optional<uint64_t> control_seed;
    mech->add_option("--checkpoints", mech_ckpts, "analyze 'all' or 'final' checkpoints")
        ->check(CLI::IsMember({"all", "final"}));
    mech->add_option("--control-seed", control_seed, "seed for random-head controls");

    auto *report = app.add_subcommand("report", "render SVG charts and the summary table");
    add_common(report, report_f);

    auto *show = app.add_subcommand("show-config", "print the resolved configuration");
    add_common(show, show_f);

    CLI11_PARSE(app, argc, argv);

    if (gen->parsed()) {
        if (gen_tokens) gen_f.overrides["gen"]["tokens"] = *gen_tokens;
        if (gen_seed) gen_f.overrides["gen"]["seed"] = *gen_seed;
        if (gen_data) gen_f.overrides["data_dir"] = *gen_data;
        return finish(sg_gen_corpus(gen_f.config_text().c_str(), gen_f.overrides_text().c_str()));
    }
    if (build->parsed()) {
        if (transcripts) build_f.overrides["corpus"]["transcripts"] = *transcripts;
        if (captions) build_f.overrides["corpus"]["captions"] = *captions;
        if (wordlist) build_f.overrides["corpus"]["wordlist"] = *wordlist;
        if (templates) build_f.overrides["corpus"]["templates"] = *templates;
        if (min_count) build_f.overrides["corpus"]["min_count"] = *min_count;
        if (chunk_len) build_f.overrides["corpus"]["chunk_len"] = *chunk_len;
        return finish(
            sg_build_corpus(build_f.config_text().c_str(), build_f.overrides_text().c_str()));
    }
    if (train->parsed()) {
        if (steps) train_f.overrides["train"]["total_steps"] = *steps;
        if (batch) train_f.overrides["train"]["batch_size"] = *batch;
        if (lr) train_f.overrides["train"]["lr"] = *lr;
        return finish(sg_train(train_f.config_text().c_str(), train_f.overrides_text().c_str()));
    }
    if (eval->parsed()) {
        if (mismatch_samples) eval_f.overrides["eval"]["mismatch_samples"] = *mismatch_samples;
        return finish(sg_eval(eval_f.config_text().c_str(), eval_f.overrides_text().c_str()));
    }
    if (mech->parsed()) {
        if (mech_ckpts) mech_f.overrides["mech"]["checkpoints"] = *mech_ckpts;
        if (control_seed) mech_f.overrides["mech"]["control_seed"] = *control_seed;
        return finish(sg_mech(mech_f.config_text().c_str(), mech_f.overrides_text().c_str()));
    }
    if (report->parsed()) {
        return finish(
            sg_report(report_f.config_text().c_str(), report_f.overrides_text().c_str()));
    }
    if (show->parsed()) {
        std::string buf(1 << 16, '\0');
        const int n = sg_resolve_config(show_f.config_text().c_str(),
                                        show_f.overrides_text().c_str(), buf.data(), buf.size());
        if (n < 0) return finish(-n);
        buf.resize(static_cast<size_t>(n));
        std::cout << buf << "\n";
        return 0;
    }
    return SG_ERR_INPUT;
}
