// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include "eval.hpp"
#include "mech.hpp"
#include "train.hpp"

namespace sg {

// Stage failure with the process exit code contract: 2 input/parse error,
// 3 missing artifact, 4 integrity mismatch.
struct StageError : std::runtime_error {
    StageError(int code_, const std::string &what_) : std::runtime_error(what_), code(code_) {}
    int code;
};

// One resolved experiment configuration. Defaults come from a named preset;
// a config document and then flag overrides are merged on top.
struct RunConfig {
    std::string preset = "desk";
    std::string out_dir = "runs/out";
    std::string data_dir = "runs/out/data";

    // corpus generation (synthetic child-directed data)
    long gen_tokens = 2200000;
    int gen_files = 40;
    uint64_t gen_seed = 7;

    // corpus build
    std::string transcripts_dir;  // default: <data_dir>/transcripts
    std::string captions_file;    // optional caption-dialogue JSONL
    std::string wordlist_file = "assets/wordlist_childes.txt";
    std::string templates_file = "assets/templates_childes.jsonl";
    int min_count = 5;
    int chunk_len = 64;

    // evaluation protocol
    int eval_words = 32;
    int eval_templates = 5;
    long eval_min_freq = 50;
    int mismatch_samples = 0;  // 0: full grid
    uint64_t sample_seed = 13;

    // architectures and model shape
    std::vector<std::string> archs = {"transformer", "lstm"};
    int layers = 4;
    int heads = 4;
    int hidden = 128;
    int max_len = 64;

    // training
    TrainConfig train;
    std::vector<uint64_t> seeds = {42, 142, 242, 342, 442};
    std::vector<int> schedule;  // empty: CheckpointSchedule::standard(total_steps)

    // mechanistic analysis (transformer runs)
    double gather_thresh = 0.30;
    double aggregate_thresh = 0.30;
    uint64_t control_seed = 20250;
    int mech_seed_index = 0;          // which seed's run to analyze
    std::string mech_checkpoints = "all";  // "all" | "final" (lens + flow scope)
    LensFitOptions lens;
    int saliency_dump_contexts = 4;

    CheckpointSchedule resolved_schedule() const;
    ModelConfig model_config(const std::string &arch, uint64_t seed) const;
    TrainConfig train_config(uint64_t seed) const;
    uint64_t fingerprint(const std::string &arch, uint64_t seed) const;

    std::string train_dir(const std::string &arch, uint64_t seed) const;
    std::string corpus_dir() const;
};

// preset defaults -> config document -> overrides document, later wins.
RunConfig resolve_config(const std::string &config_json, const std::string &overrides_json = "");
std::string render_config(const RunConfig &cfg);

// Pipeline stages. Each writes its artifacts under cfg.out_dir and a
// meta.json sidecar (the only file carrying timestamps).
void stage_gen_corpus(const RunConfig &cfg);
void stage_build_corpus(const RunConfig &cfg);
void stage_train(const RunConfig &cfg);
void stage_eval(const RunConfig &cfg);
void stage_mech(const RunConfig &cfg);
void stage_report(const RunConfig &cfg);

// Artifact helpers shared by stages and tests.
std::vector<std::string> list_checkpoints(const std::string &dir);
EvalSet load_eval_set(const RunConfig &cfg, const DualVocab &vocab);

}  // namespace sg
