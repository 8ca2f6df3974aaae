// SPDX-License-Identifier: Apache-2.0
#include "pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>

#include <json.hpp>

#include "gen.hpp"
#include "report.hpp"

namespace sg {
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

[[noreturn]] void fail_input(const std::string &what) { throw StageError(2, what); }
[[noreturn]] void fail_missing(const std::string &what) { throw StageError(3, what); }

std::string slurp(const std::string &path, int missing_code) {
    std::ifstream is(path, std::ios::binary);
    if (!is) {
        throw StageError(missing_code, "cannot open: " + path);
    }
    return std::string(std::istreambuf_iterator<char>(is), {});
}

std::vector<std::string> read_lines(const std::string &path, int missing_code) {
    std::vector<std::string> out;
    std::istringstream is(slurp(path, missing_code));
    std::string line;
    while (std::getline(is, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (!line.empty()) out.push_back(line);
    }
    return out;
}

void write_meta(const fs::path &dir, const std::string &stage, double seconds) {
    json j;
    j["stage"] = stage;
    const auto now = std::chrono::system_clock::now();
    j["completed_unix"] = std::chrono::duration_cast<std::chrono::seconds>(now.time_since_epoch()).count();
    j["duration_s"] = seconds;
    std::ofstream os(dir / ("meta_" + stage + ".json"), std::ios::binary);
    os << j.dump(2) << "\n";
}

struct StageTimer {
    fs::path dir;
    std::string stage;
    std::chrono::steady_clock::time_point t0 = std::chrono::steady_clock::now();
    ~StageTimer() {
        const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        write_meta(dir, stage, s);
    }
};

json preset_document(const std::string &preset) {
    json j;
    if (preset == "desk") {
        j["corpus"] = {{"min_count", 5}, {"chunk_len", 64}};
        j["eval"] = {{"words", 32}, {"templates_per_word", 5}, {"min_freq", 50}};
        j["model"] = {{"archs", json::array({"transformer", "lstm"})},
                      {"layers", 4},
                      {"heads", 4},
                      {"hidden", 128},
                      {"max_len", 64}};
        j["train"] = {{"lr", 1e-3},       {"warmup_steps", 200}, {"beta1", 0.9},
                      {"beta2", 0.95},    {"eps", 1e-8},         {"weight_decay", 0.0},
                      {"batch_size", 2},  {"grad_clip_norm", 1.0}, {"total_steps", 5000},
                      {"log_every", 50}};
        j["gen"] = {{"tokens", 2200000}, {"files", 40}, {"seed", 7}};
    } else if (preset == "paper") {
        j["corpus"] = {{"min_count", 5}, {"chunk_len", 512}};
        j["eval"] = {{"words", 100}, {"templates_per_word", 10}, {"min_freq", 100}};
        j["model"] = {{"archs", json::array({"transformer", "lstm"})},
                      {"layers", 12},
                      {"heads", 12},
                      {"hidden", 768},
                      {"max_len", 512}};
        j["train"] = {{"lr", 5e-5},       {"warmup_steps", 1000}, {"beta1", 0.9},
                      {"beta2", 0.95},    {"eps", 1e-8},          {"weight_decay", 0.0},
                      {"batch_size", 16}, {"grad_clip_norm", 1.0}, {"total_steps", 20000},
                      {"log_every", 50}};
        j["gen"] = {{"tokens", 2200000}, {"files", 40}, {"seed", 7}};
    } else {
        fail_input("unknown preset '" + preset + "' (expected desk or paper)");
    }
    return j;
}

void deep_merge(json &base, const json &over) {
    if (!over.is_object()) {
        base = over;
        return;
    }
    if (!base.is_object()) base = json::object();
    for (auto it = over.begin(); it != over.end(); ++it) {
        if (it->is_object() && base.contains(it.key())) {
            deep_merge(base[it.key()], *it);
        } else {
            base[it.key()] = *it;
        }
    }
}

json parse_doc(const std::string &text, const char *what) {
    if (text.empty()) return json::object();
    try {
        return json::parse(text);
    } catch (const json::exception &e) {
        fail_input(std::string(what) + ": " + e.what());
    }
}

template <typename T>
void read_field(const json &j, const char *key, T &out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace

CheckpointSchedule RunConfig::resolved_schedule() const {
    if (schedule.empty()) {
        return CheckpointSchedule::standard(train.total_steps);
    }
    CheckpointSchedule s;
    s.steps = schedule;
    s.validate(train.total_steps);
    return s;
}

ModelConfig RunConfig::model_config(const std::string &arch, uint64_t seed) const {
    ModelConfig mc;
    if (arch == "transformer") {
        mc.arch = Arch::kTransformer;
    } else if (arch == "lstm") {
        mc.arch = Arch::kLstm;
    } else {
        fail_input("unknown architecture '" + arch + "'");
    }
    mc.layers = layers;
    mc.heads = heads;
    mc.hidden = hidden;
    mc.max_len = std::max(max_len, chunk_len);
    mc.seed = seed;
    mc.vocab = 0;  // filled from the built vocabulary
    return mc;
}

TrainConfig RunConfig::train_config(uint64_t seed) const {
    TrainConfig t = train;
    t.seed = seed;
    return t;
}

uint64_t RunConfig::fingerprint(const std::string &arch, uint64_t seed) const {
    std::ostringstream os;
    os << arch << "|" << layers << "|" << heads << "|" << hidden << "|" << max_len << "|"
       << chunk_len << "|" << train.lr << "|" << train.warmup_steps << "|" << train.beta1 << "|"
       << train.beta2 << "|" << train.eps << "|" << train.weight_decay << "|" << train.batch_size
       << "|" << train.grad_clip_norm << "|" << train.total_steps << "|" << seed;
    return fnv1a64(os.str());
}

std::string RunConfig::train_dir(const std::string &arch, uint64_t seed) const {
    return (fs::path(out_dir) / "train" / arch / ("seed" + std::to_string(seed))).string();
}

std::string RunConfig::corpus_dir() const { return (fs::path(out_dir) / "corpus").string(); }

RunConfig resolve_config(const std::string &config_json, const std::string &overrides_json) {
    const json cfg_doc = parse_doc(config_json, "config");
    const json over_doc = parse_doc(overrides_json, "overrides");

    std::string preset = "desk";
    if (cfg_doc.contains("preset")) preset = cfg_doc.at("preset").get<std::string>();
    if (over_doc.contains("preset")) preset = over_doc.at("preset").get<std::string>();

    json doc = preset_document(preset);
    deep_merge(doc, cfg_doc);
    deep_merge(doc, over_doc);

    RunConfig rc;
    rc.preset = preset;
    read_field(doc, "out_dir", rc.out_dir);
    rc.data_dir = (fs::path(rc.out_dir) / "data").string();
    read_field(doc, "data_dir", rc.data_dir);

    if (doc.contains("gen")) {
        const json &g = doc["gen"];
        read_field(g, "tokens", rc.gen_tokens);
        read_field(g, "files", rc.gen_files);
        read_field(g, "seed", rc.gen_seed);
    }
    if (doc.contains("corpus")) {
        const json &c = doc["corpus"];
        read_field(c, "transcripts", rc.transcripts_dir);
        read_field(c, "captions", rc.captions_file);
        read_field(c, "wordlist", rc.wordlist_file);
        read_field(c, "templates", rc.templates_file);
        read_field(c, "min_count", rc.min_count);
        read_field(c, "chunk_len", rc.chunk_len);
    }
    if (rc.transcripts_dir.empty()) {
        rc.transcripts_dir = (fs::path(rc.data_dir) / "transcripts").string();
    }
    if (doc.contains("eval")) {
        const json &e = doc["eval"];
        read_field(e, "words", rc.eval_words);
        read_field(e, "templates_per_word", rc.eval_templates);
        read_field(e, "min_freq", rc.eval_min_freq);
        read_field(e, "mismatch_samples", rc.mismatch_samples);
        read_field(e, "sample_seed", rc.sample_seed);
    }
    if (doc.contains("model")) {
        const json &m = doc["model"];
        read_field(m, "archs", rc.archs);
        read_field(m, "layers", rc.layers);
        read_field(m, "heads", rc.heads);
        read_field(m, "hidden", rc.hidden);
        read_field(m, "max_len", rc.max_len);
    }
    if (doc.contains("train")) {
        const json &t = doc["train"];
        read_field(t, "lr", rc.train.lr);
        read_field(t, "warmup_steps", rc.train.warmup_steps);
        read_field(t, "beta1", rc.train.beta1);
        read_field(t, "beta2", rc.train.beta2);
        read_field(t, "eps", rc.train.eps);
        read_field(t, "weight_decay", rc.train.weight_decay);
        read_field(t, "batch_size", rc.train.batch_size);
        read_field(t, "grad_clip_norm", rc.train.grad_clip_norm);
        read_field(t, "total_steps", rc.train.total_steps);
        read_field(t, "log_every", rc.train.log_every);
    }
    read_field(doc, "seeds", rc.seeds);
    read_field(doc, "schedule", rc.schedule);
    if (doc.contains("mech")) {
        const json &m = doc["mech"];
        read_field(m, "gather_thresh", rc.gather_thresh);
        read_field(m, "aggregate_thresh", rc.aggregate_thresh);
        read_field(m, "control_seed", rc.control_seed);
        read_field(m, "seed_index", rc.mech_seed_index);
        read_field(m, "checkpoints", rc.mech_checkpoints);
        read_field(m, "saliency_dump_contexts", rc.saliency_dump_contexts);
        if (m.contains("lens")) {
            const json &l = m["lens"];
            read_field(l, "steps", rc.lens.steps);
            read_field(l, "lr", rc.lens.lr);
            read_field(l, "batch", rc.lens.batch);
            read_field(l, "max_positions", rc.lens.max_positions);
            read_field(l, "seed", rc.lens.seed);
        }
    }
    if (rc.seeds.empty()) fail_input("config: seeds must be non-empty");
    if (rc.eval_words < 2) fail_input("config: eval.words must be at least 2");
    try {
        rc.train.validate();
        rc.model_config(rc.archs.empty() ? "transformer" : rc.archs[0], 0);
        rc.resolved_schedule();
    } catch (const StageError &) {
        throw;
    } catch (const std::exception &e) {
        fail_input(std::string("config: ") + e.what());
    }
    return rc;
}

std::string render_config(const RunConfig &rc) {
    json doc;
    doc["preset"] = rc.preset;
    doc["out_dir"] = rc.out_dir;
    doc["data_dir"] = rc.data_dir;
    doc["gen"] = {{"tokens", rc.gen_tokens}, {"files", rc.gen_files}, {"seed", rc.gen_seed}};
    doc["corpus"] = {{"transcripts", rc.transcripts_dir}, {"captions", rc.captions_file},
                     {"wordlist", rc.wordlist_file},      {"templates", rc.templates_file},
                     {"min_count", rc.min_count},         {"chunk_len", rc.chunk_len}};
    doc["eval"] = {{"words", rc.eval_words},
                   {"templates_per_word", rc.eval_templates},
                   {"min_freq", rc.eval_min_freq},
                   {"mismatch_samples", rc.mismatch_samples},
                   {"sample_seed", rc.sample_seed}};
    doc["model"] = {{"archs", rc.archs}, {"layers", rc.layers}, {"heads", rc.heads},
                    {"hidden", rc.hidden}, {"max_len", rc.max_len}};
    doc["train"] = {{"lr", rc.train.lr},
                    {"warmup_steps", rc.train.warmup_steps},
                    {"beta1", rc.train.beta1},
                    {"beta2", rc.train.beta2},
                    {"eps", rc.train.eps},
                    {"weight_decay", rc.train.weight_decay},
                    {"batch_size", rc.train.batch_size},
                    {"grad_clip_norm", rc.train.grad_clip_norm},
                    {"total_steps", rc.train.total_steps},
                    {"log_every", rc.train.log_every}};
    doc["seeds"] = rc.seeds;
    doc["schedule"] = rc.schedule;
    doc["mech"] = {{"gather_thresh", rc.gather_thresh},
                   {"aggregate_thresh", rc.aggregate_thresh},
                   {"control_seed", rc.control_seed},
                   {"seed_index", rc.mech_seed_index},
                   {"checkpoints", rc.mech_checkpoints},
                   {"saliency_dump_contexts", rc.saliency_dump_contexts},
                   {"lens",
                    {{"steps", rc.lens.steps},
                     {"lr", rc.lens.lr},
                     {"batch", rc.lens.batch},
                     {"max_positions", rc.lens.max_positions},
                     {"seed", rc.lens.seed}}}};
    return doc.dump(2);
}

// --- stage: gen-corpus --------------------------------------------------------

void stage_gen_corpus(const RunConfig &cfg) {
    GenOptions opt;
    opt.out_dir = cfg.data_dir;
    opt.nouns = read_lines(cfg.wordlist_file, 2);
    opt.target_tokens = cfg.gen_tokens;
    opt.files = cfg.gen_files;
    opt.seed = cfg.gen_seed;
    fs::create_directories(cfg.data_dir);
    StageTimer timer{fs::path(cfg.data_dir), "gen"};
    GenSummary s = generate_corpus(opt);
    json j;
    j["tokens"] = s.tokens;
    j["scenes"] = s.scenes;
    j["files"] = s.files;
    std::ofstream os(fs::path(cfg.data_dir) / "gen_summary.json", std::ios::binary);
    os << j.dump(2) << "\n";
}

// --- stage: build-corpus ------------------------------------------------------

void stage_build_corpus(const RunConfig &cfg) {
    const fs::path cdir(cfg.corpus_dir());
    fs::create_directories(cdir);
    StageTimer timer{cdir, "build_corpus"};

    std::vector<fs::path> files;
    if (fs::is_directory(cfg.transcripts_dir)) {
        for (const auto &e : fs::directory_iterator(cfg.transcripts_dir)) {
            if (e.is_regular_file() && e.path().extension() == ".cha") {
                files.push_back(e.path());
            }
        }
    }
    std::sort(files.begin(), files.end());
    if (files.empty() && cfg.captions_file.empty()) {
        fail_input("build-corpus: no transcripts in '" + cfg.transcripts_dir +
                   "' and no captions file");
    }

    std::vector<Utterance> utts;
    for (const fs::path &f : files) {
        try {
            std::vector<Utterance> part = parse_chat(slurp(f.string(), 2));
            utts.insert(utts.end(), std::make_move_iterator(part.begin()),
                        std::make_move_iterator(part.end()));
        } catch (const ParseError &e) {
            fail_input(f.filename().string() + ": " + e.what());
        }
    }
    if (!cfg.captions_file.empty()) {
        try {
            std::vector<Utterance> part = parse_caption_dialogue(slurp(cfg.captions_file, 2));
            utts.insert(utts.end(), std::make_move_iterator(part.begin()),
                        std::make_move_iterator(part.end()));
        } catch (const ParseError &e) {
            fail_input(fs::path(cfg.captions_file).filename().string() + ": " + e.what());
        }
    }
    if (utts.empty()) fail_input("build-corpus: no utterances parsed");

    DualVocab vocab;
    try {
        vocab = DualVocab::build(utts, cfg.min_count);
    } catch (const std::exception &e) {
        fail_input(std::string("build-corpus: ") + e.what());
    }
    vocab.save((cdir / "vocab.tsv").string());

    std::vector<CorpusChunk> chunks = tokenize_corpus(utts, vocab, cfg.chunk_len);
    save_chunks((cdir / "chunks.bin").string(), chunks, cfg.chunk_len);

    // target-word selection over the built corpus, against the inventory
    const std::vector<std::string> inventory = read_lines(cfg.wordlist_file, 2);
    const auto freq = count_word_freq(utts);
    std::vector<std::string> eval_words =
        select_target_words(freq, inventory, cfg.eval_min_freq, cfg.eval_words);
    if (static_cast<int>(eval_words.size()) < 2) {
        fail_input("build-corpus: fewer than 2 eval words pass the frequency threshold");
    }
    {
        std::ofstream os(cdir / "eval_words.txt", std::ios::binary);
        for (const auto &w : eval_words) os << w << "\n";
    }

    // concrete per-word templates from the shipped frames
    std::vector<ContextTemplate> frames;
    try {
        frames = load_templates(cfg.templates_file);
    } catch (const ParseError &e) {
        fail_input(std::string("templates: ") + e.what());
    } catch (const std::runtime_error &e) {
        throw StageError(2, e.what());
    }
    EvalSet set;
    try {
        set = EvalSet::build(eval_words, frames, vocab, cfg.eval_templates);
    } catch (const std::exception &e) {
        fail_input(std::string("build-corpus: ") + e.what());
    }
    std::vector<ContextTemplate> concrete;
    for (const auto &per_word : set.templates) {
        concrete.insert(concrete.end(), per_word.begin(), per_word.end());
    }
    save_templates((cdir / "templates.jsonl").string(), concrete);

    auto cooc = count_cooccurrence(chunks, vocab, eval_words);
    {
        std::ofstream os(cdir / "cooccurrence.tsv", std::ios::binary);
        for (const auto &[word, count] : cooc) os << word << "\t" << count << "\n";
    }
}

// --- artifact loading helpers ---------------------------------------------------

std::vector<std::string> list_checkpoints(const std::string &dir) {
    std::vector<std::string> out;
    if (!fs::is_directory(dir)) {
        fail_missing("no checkpoint directory: " + dir);
    }
    for (const auto &e : fs::directory_iterator(dir)) {
        const std::string name = e.path().filename().string();
        if (e.is_regular_file() && name.starts_with("ckpt_") && name.ends_with(".bin")) {
            out.push_back(e.path().string());
        }
    }
    if (out.empty()) {
        fail_missing("no checkpoints under " + dir);
    }
    std::sort(out.begin(), out.end());
    return out;
}

namespace {

DualVocab load_vocab_or_die(const RunConfig &cfg) {
    const fs::path p = fs::path(cfg.corpus_dir()) / "vocab.tsv";
    if (!fs::exists(p)) fail_missing("missing vocabulary: " + p.string());
    return DualVocab::load(p.string());
}

std::vector<CorpusChunk> load_chunks_or_die(const RunConfig &cfg, int *chunk_len) {
    const fs::path p = fs::path(cfg.corpus_dir()) / "chunks.bin";
    if (!fs::exists(p)) fail_missing("missing chunk file: " + p.string());
    return load_chunks(p.string(), chunk_len);
}

std::map<std::string, long> load_cooc_or_die(const RunConfig &cfg) {
    const fs::path p = fs::path(cfg.corpus_dir()) / "cooccurrence.tsv";
    if (!fs::exists(p)) fail_missing("missing co-occurrence table: " + p.string());
    std::map<std::string, long> cooc;
    for (const std::string &line : read_lines(p.string(), 3)) {
        const size_t tab = line.find('\t');
        if (tab == std::string::npos) fail_input("bad co-occurrence line: " + line);
        cooc[line.substr(0, tab)] = std::stol(line.substr(tab + 1));
    }
    return cooc;
}

}  // namespace

EvalSet load_eval_set(const RunConfig &cfg, const DualVocab &vocab) {
    const fs::path cdir(cfg.corpus_dir());
    if (!fs::exists(cdir / "templates.jsonl") || !fs::exists(cdir / "eval_words.txt")) {
        fail_missing("missing eval artifacts under " + cdir.string());
    }
    const std::vector<std::string> words = read_lines((cdir / "eval_words.txt").string(), 3);
    const std::vector<ContextTemplate> concrete =
        load_templates((cdir / "templates.jsonl").string());
    EvalSet set = EvalSet::build(words, concrete, vocab, cfg.eval_templates);
    set.mismatch_samples = cfg.mismatch_samples;
    set.sample_seed = cfg.sample_seed;
    return set;
}

// --- stage: train ----------------------------------------------------------------

void stage_train(const RunConfig &cfg) {
    DualVocab vocab = load_vocab_or_die(cfg);
    int chunk_len = 0;
    std::vector<CorpusChunk> chunks = load_chunks_or_die(cfg, &chunk_len);
    const CheckpointSchedule schedule = cfg.resolved_schedule();
    StageTimer timer{fs::path(cfg.out_dir), "train"};

    for (const std::string &arch : cfg.archs) {
        for (uint64_t seed : cfg.seeds) {
            const fs::path dir(cfg.train_dir(arch, seed));
            fs::create_directories(dir);
            const uint64_t fp = cfg.fingerprint(arch, seed);

            // idempotent fast path: a completed run with this fingerprint stands
            bool complete = true;
            for (int s : schedule.steps) {
                char name[32];
                std::snprintf(name, sizeof name, "ckpt_%06d.bin", s);
                const fs::path p = dir / name;
                if (!fs::exists(p)) {
                    complete = false;
                    break;
                }
                if (peek_checkpoint(p.string()).fingerprint != fp) {
                    complete = false;
                    break;
                }
            }
            if (complete) continue;

            ModelConfig mc = cfg.model_config(arch, seed);
            mc.vocab = vocab.size();
            if (chunk_len > mc.max_len) {
                fail_input("train: chunk length exceeds model max_len");
            }
            Model<float> model = Model<float>::random_init(mc);

            std::ofstream metrics(dir / "metrics.jsonl", std::ios::binary);
            auto on_metrics = [&](const StepMetrics &m) {
                json j;
                j["step"] = m.step;
                j["loss"] = m.loss;
                j["lr"] = m.lr;
                j["grad_norm"] = m.grad_norm;
                metrics << j.dump() << "\n";
            };
            auto on_checkpoint = [&](const CheckpointRecord &c) {
                char name[32];
                std::snprintf(name, sizeof name, "ckpt_%06d.bin", static_cast<int>(c.step));
                save_checkpoint((dir / name).string(), c);
            };
            train(model, chunks, cfg.train_config(seed), schedule, vocab.pad_id(), fp,
                  on_checkpoint, on_metrics);
        }
    }
}

// --- stage: eval ------------------------------------------------------------------

void stage_eval(const RunConfig &cfg) {
    DualVocab vocab = load_vocab_or_die(cfg);
    EvalSet set = load_eval_set(cfg, vocab);
    auto cooc = load_cooc_or_die(cfg);
    StageTimer timer{fs::path(cfg.out_dir), "eval"};

    for (const std::string &arch : cfg.archs) {
        std::vector<GroundingReport> reports;
        for (uint64_t seed : cfg.seeds) {
            const fs::path dir(cfg.train_dir(arch, seed));
            std::vector<std::string> ckpts = list_checkpoints(dir.string());
            const uint64_t fp = cfg.fingerprint(arch, seed);
            for (const std::string &p : ckpts) {
                if (peek_checkpoint(p).fingerprint != fp) {
                    throw StageError(4, "eval: fingerprint mismatch for " + p);
                }
            }
            GroundingReport rep;
            try {
                rep = trajectory(ckpts, set, vocab, &cooc);
            } catch (const IntegrityError &e) {
                throw StageError(4, e.what());
            }
            const fs::path edir = fs::path(cfg.out_dir) / "eval" / arch / ("seed" + std::to_string(seed));
            fs::create_directories(edir);
            write_grounding_report_json((edir / "report.json").string(), rep);
            write_grounding_report_csv((edir / "report.csv").string(), rep);
            reports.push_back(std::move(rep));
        }

        // seed-mean curves; per-seed series stay in their own reports
        GroundingReport mean;
        mean.fingerprint = 0;
        const size_t n_ck = reports.front().checkpoints.size();
        for (const GroundingReport &r : reports) {
            if (r.checkpoints.size() != n_ck) {
                throw StageError(4, "eval: seeds disagree on checkpoint schedule");
            }
        }
        for (size_t k = 0; k < n_ck; ++k) {
            CheckpointEval ev;
            ev.step = reports.front().checkpoints[k].step;
            double r2_acc = 0.0;
            int r2_n = 0;
            for (const GroundingReport &r : reports) {
                const CheckpointEval &src = r.checkpoints[k];
                ev.match_sps += src.match_sps;
                ev.mismatch_sps += src.mismatch_sps;
                ev.gain += src.gain;
                if (std::isfinite(src.r2)) {
                    r2_acc += src.r2;
                    ++r2_n;
                }
            }
            const double n = static_cast<double>(reports.size());
            ev.match_sps /= n;
            ev.mismatch_sps /= n;
            ev.gain /= n;
            if (r2_n > 0) ev.r2 = r2_acc / r2_n;
            mean.checkpoints.push_back(std::move(ev));
        }
        const fs::path adir = fs::path(cfg.out_dir) / "eval" / arch;
        write_grounding_report_json((adir / "report_mean.json").string(), mean);
        write_grounding_report_csv((adir / "report_mean.csv").string(), mean);
    }
}

// --- stage: mech --------------------------------------------------------------------

namespace {

std::vector<EvalContext> build_mech_contexts(const EvalSet &set, const DualVocab &vocab) {
    std::vector<EvalContext> out;
    for (size_t v = 0; v < set.words.size(); ++v) {
        for (const ContextTemplate &t : set.templates[v]) {
            EvalContext c;
            c.tokens = instantiate(t, set.words[v], vocab);
            c.target = vocab.entry(set.words[v]).lan_id;
            c.info = ContextInfo{t.filler_pos(), t.final_pos()};
            out.push_back(std::move(c));
        }
    }
    return out;
}

void dump_saliency(const fs::path &path, const SaliencyMap &map, const EvalContext &ctx,
                   uint64_t step) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open for write: " + path.string());
    auto put_u32 = [&os](uint32_t v) { os.write(reinterpret_cast<const char *>(&v), 4); };
    put_u32(0x4c534753u);  // "SGSL"
    const uint32_t layers = static_cast<uint32_t>(map.head.size());
    const uint32_t heads = layers > 0 ? static_cast<uint32_t>(map.head[0].size()) : 0;
    put_u32(layers);
    put_u32(heads);
    put_u32(static_cast<uint32_t>(map.positions));
    for (const auto &per_layer : map.head) {
        for (const auto &hm : per_layer) {
            for (double v : hm) {
                const float f = static_cast<float>(v);
                os.write(reinterpret_cast<const char *>(&f), 4);
            }
        }
    }
    json side;
    side["step"] = step;
    side["filler_pos"] = ctx.info.filler_pos;
    side["final_pos"] = ctx.info.final_pos;
    side["target"] = ctx.target;
    side["tokens"] = ctx.tokens;
    std::ofstream sout(path.string() + ".json", std::ios::binary);
    sout << side.dump(2) << "\n";
}

}  // namespace

void stage_mech(const RunConfig &cfg) {
    if (std::find(cfg.archs.begin(), cfg.archs.end(), "transformer") == cfg.archs.end()) {
        fail_input("mech: requires a transformer run");
    }
    if (cfg.mech_seed_index < 0 || cfg.mech_seed_index >= static_cast<int>(cfg.seeds.size())) {
        fail_input("mech: seed_index out of range");
    }
    const uint64_t seed = cfg.seeds[static_cast<size_t>(cfg.mech_seed_index)];

    DualVocab vocab = load_vocab_or_die(cfg);
    EvalSet set = load_eval_set(cfg, vocab);
    const std::vector<EvalContext> contexts = build_mech_contexts(set, vocab);
    int chunk_len = 0;
    const std::vector<CorpusChunk> chunks = load_chunks_or_die(cfg, &chunk_len);
    // hold out the trailing chunks for lens fitting
    const size_t held_start = chunks.size() - std::min<size_t>(chunks.size(), 64);
    std::vector<CorpusChunk> heldout(chunks.begin() + static_cast<long>(held_start), chunks.end());

    std::vector<std::string> ckpts = list_checkpoints(cfg.train_dir("transformer", seed));
    const uint64_t fp = cfg.fingerprint("transformer", seed);
    for (const std::string &p : ckpts) {
        if (peek_checkpoint(p).fingerprint != fp) {
            throw StageError(4, "mech: fingerprint mismatch for " + p);
        }
    }
    if (cfg.mech_checkpoints == "final") {
        ckpts = {ckpts.back()};
    } else if (cfg.mech_checkpoints != "all") {
        fail_input("mech: checkpoints must be 'all' or 'final'");
    }

    const fs::path mdir = fs::path(cfg.out_dir) / "mech";
    fs::create_directories(mdir / "saliency");
    StageTimer timer{mdir, "mech"};

    std::ofstream interv_csv(mdir / "interventions.csv", std::ios::binary);
    interv_csv << "ckpt,class,avg_count,avg_layer,interv_sps,ctrl_sps,original,p,t_p\n";
    std::ofstream flow_csv(mdir / "flow_profile.csv", std::ios::binary);
    flow_csv << "ckpt";
    for (int l = 0; l < cfg.layers; ++l) flow_csv << ",layer" << l;
    flow_csv << "\n";
    std::ofstream lens_csv(mdir / "lens.csv", std::ios::binary);
    lens_csv << "ckpt,layer,lens_sps\n";
    json class_summary = json::array();

    auto fmt6 = [](double v) {
        char buf[32];
        std::snprintf(buf, sizeof buf, "%.6g", v);
        return std::string(buf);
    };

    for (const std::string &ckpt_path : ckpts) {
        const CheckpointRecord rec = load_checkpoint(ckpt_path);
        const Model<float> model = model_from_checkpoint<float>(rec);
        const bool is_final = ckpt_path == ckpts.back();

        // per-context saliency and classification
        std::vector<SaliencyMap> maps(contexts.size());
        std::vector<ContextInfo> infos(contexts.size());
#pragma omp parallel for schedule(dynamic)
        for (int i = 0; i < static_cast<int>(contexts.size()); ++i) {
            maps[static_cast<size_t>(i)] =
                saliency(model, contexts[static_cast<size_t>(i)].tokens,
                         contexts[static_cast<size_t>(i)].target);
            infos[static_cast<size_t>(i)] = contexts[static_cast<size_t>(i)].info;
        }

        std::vector<std::vector<HeadId>> gather_sets(contexts.size());
        std::vector<std::vector<HeadId>> aggregate_sets(contexts.size());
        double mean_gather_ratio = 0.0, mean_aggregate_ratio = 0.0;
        long gather_heads = 0, aggregate_heads = 0;
        for (size_t i = 0; i < contexts.size(); ++i) {
            HeadClassification cls =
                classify_heads(maps[i], infos[i], cfg.gather_thresh, cfg.aggregate_thresh);
            for (const HeadId &h : cls.gather) {
                mean_gather_ratio += cls.gather_ratio[static_cast<size_t>(h.layer) * cfg.heads + h.head];
            }
            for (const HeadId &h : cls.aggregate) {
                mean_aggregate_ratio +=
                    cls.aggregate_ratio[static_cast<size_t>(h.layer) * cfg.heads + h.head];
            }
            gather_heads += static_cast<long>(cls.gather.size());
            aggregate_heads += static_cast<long>(cls.aggregate.size());
            gather_sets[i] = std::move(cls.gather);
            aggregate_sets[i] = std::move(cls.aggregate);
        }
        mean_gather_ratio = gather_heads > 0 ? mean_gather_ratio / gather_heads : 0.0;
        mean_aggregate_ratio = aggregate_heads > 0 ? mean_aggregate_ratio / aggregate_heads : 0.0;

        // ground-to-symbol flow profile
        const std::vector<double> profile = flow_profile(maps, infos);
        flow_csv << rec.step;
        for (double v : profile) flow_csv << "," << fmt6(v);
        flow_csv << "\n";

        // interventions per class
        for (const char *klass : {"gather", "aggregate"}) {
            const auto &sets = std::string(klass) == "gather" ? gather_sets : aggregate_sets;
            InterventionResult r = intervene(model, contexts, sets, cfg.control_seed);
            interv_csv << rec.step << "," << klass << "," << fmt6(r.avg_head_count) << ","
                       << (std::isfinite(r.avg_layer) ? fmt6(r.avg_layer) : "") << ","
                       << fmt6(r.mean_intervened) << "," << fmt6(r.mean_control) << ","
                       << fmt6(r.mean_original) << "," << fmt6(r.test.p_value) << ","
                       << fmt6(r.test.t_p_value) << "\n";
        }

        // lens curve
        {
            LensFitOptions lopt = cfg.lens;
            LensProbe probe = tuned_lens_fit(model, heldout, vocab.pad_id(), lopt);
            std::vector<double> layer_sps(static_cast<size_t>(cfg.layers), 0.0);
            for (const EvalContext &c : contexts) {
                std::vector<double> sps = lens_layer_surprisals(model, probe, c.tokens, c.target);
                for (int l = 0; l < cfg.layers; ++l) layer_sps[static_cast<size_t>(l)] += sps[static_cast<size_t>(l)];
            }
            for (int l = 0; l < cfg.layers; ++l) {
                lens_csv << rec.step << "," << l << ","
                         << fmt6(layer_sps[static_cast<size_t>(l)] / static_cast<double>(contexts.size()))
                         << "\n";
            }
        }

        json cs;
        cs["step"] = rec.step;
        cs["avg_gather_count"] = static_cast<double>(gather_heads) / static_cast<double>(contexts.size());
        cs["avg_aggregate_count"] =
            static_cast<double>(aggregate_heads) / static_cast<double>(contexts.size());
        cs["mean_gather_ratio"] = mean_gather_ratio;
        cs["mean_aggregate_ratio"] = mean_aggregate_ratio;
        class_summary.push_back(std::move(cs));

        if (is_final) {
            const int n_dump = std::min<int>(cfg.saliency_dump_contexts,
                                             static_cast<int>(contexts.size()));
            for (int i = 0; i < n_dump; ++i) {
                char name[64];
                std::snprintf(name, sizeof name, "ctx%03d_step%06d.bin", i,
                              static_cast<int>(rec.step));
                dump_saliency(mdir / "saliency" / name, maps[static_cast<size_t>(i)],
                              contexts[static_cast<size_t>(i)], rec.step);
            }
        }
    }
    std::ofstream cls_out(mdir / "classification.json", std::ios::binary);
    cls_out << class_summary.dump(2) << "\n";
}

// --- stage: report --------------------------------------------------------------------

void stage_report(const RunConfig &cfg) {
    const fs::path rdir = fs::path(cfg.out_dir) / "report";
    fs::create_directories(rdir);
    StageTimer timer{rdir, "report"};

    bool any = false;
    for (const std::string &arch : cfg.archs) {
        const fs::path mean_json = fs::path(cfg.out_dir) / "eval" / arch / "report_mean.json";
        if (!fs::exists(mean_json)) continue;
        any = true;
        GroundingReport rep = load_grounding_report_json(mean_json.string());

        Series match, mismatch;
        match.label = "match";
        mismatch.label = "mismatch";
        Series gain, r2;
        gain.label = "G";
        r2.label = "R2";
        for (const CheckpointEval &ev : rep.checkpoints) {
            const double step = static_cast<double>(ev.step);
            match.x.push_back(step);
            match.y.push_back(ev.match_sps);
            mismatch.x.push_back(step);
            mismatch.y.push_back(ev.mismatch_sps);
            gain.x.push_back(step);
            gain.y.push_back(ev.gain);
            if (std::isfinite(ev.r2)) {
                r2.x.push_back(step);
                r2.y.push_back(ev.r2);
            }
        }
        {
            std::vector<Series> ss{match, mismatch};
            write_line_chart_svg((rdir / ("surprisal_" + arch + ".svg")).string(),
                                 "Surprisal over training (" + arch + ", seed mean)",
                                 "training step", "surprisal (nats)", ss);
        }
        {
            std::vector<Series> ss{gain};
            write_line_chart_svg((rdir / ("gain_" + arch + ".svg")).string(),
                                 "Grounding information gain (" + arch + ", seed mean)",
                                 "training step", "G (nats)", ss);
        }
        if (!r2.x.empty()) {
            std::vector<Series> ss{r2};
            write_line_chart_svg((rdir / ("r2_" + arch + ".svg")).string(),
                                 "Co-occurrence regression R2 (" + arch + ", seed mean)",
                                 "training step", "R2", ss);
        }
    }
    if (!any) fail_missing("report: no evaluation reports under " + cfg.out_dir);

    // flow heat map and lens curves when the mech stage has run
    const fs::path flow_csv = fs::path(cfg.out_dir) / "mech" / "flow_profile.csv";
    if (fs::exists(flow_csv)) {
        std::vector<std::string> lines = read_lines(flow_csv.string(), 3);
        std::vector<std::string> col_labels;
        std::vector<std::vector<double>> rows;  // [layer][ckpt]
        for (size_t li = 1; li < lines.size(); ++li) {
            std::istringstream ls(lines[li]);
            std::string cell;
            std::getline(ls, cell, ',');
            col_labels.push_back(cell);
            size_t l = 0;
            while (std::getline(ls, cell, ',')) {
                if (rows.size() <= l) rows.emplace_back();
                rows[l].push_back(std::stod(cell));
                ++l;
            }
        }
        std::vector<std::string> row_labels;
        for (size_t l = 0; l < rows.size(); ++l) row_labels.push_back("L" + std::to_string(l));
        write_heatmap_svg((rdir / "flow_heatmap.svg").string(),
                          "Ground-to-symbol saliency by layer", "checkpoint step", "layer", rows,
                          col_labels, row_labels, false);
        write_heatmap_svg((rdir / "flow_heatmap_colnorm.svg").string(),
                          "Ground-to-symbol saliency by layer (per-checkpoint normalized)",
                          "checkpoint step", "layer", rows, col_labels, row_labels, true);
    }
    const fs::path lens_csv = fs::path(cfg.out_dir) / "mech" / "lens.csv";
    if (fs::exists(lens_csv)) {
        std::vector<std::string> lines = read_lines(lens_csv.string(), 3);
        std::map<std::string, Series> by_ckpt;
        for (size_t li = 1; li < lines.size(); ++li) {
            std::istringstream ls(lines[li]);
            std::string ckpt, layer, sps;
            std::getline(ls, ckpt, ',');
            std::getline(ls, layer, ',');
            std::getline(ls, sps, ',');
            Series &s = by_ckpt[ckpt];
            s.label = "step " + ckpt;
            s.x.push_back(std::stod(layer) + 1.0);
            s.y.push_back(std::stod(sps));
        }
        std::vector<Series> ss;
        for (auto &[k, s] : by_ckpt) ss.push_back(std::move(s));
        std::sort(ss.begin(), ss.end(), [](const Series &a, const Series &b) {
            return std::stod(a.label.substr(5)) < std::stod(b.label.substr(5));
        });
        write_line_chart_svg((rdir / "lens.svg").string(),
                             "Tuned-lens surprisal by layer (match condition)", "layer",
                             "surprisal (nats)", ss);
    }

    // summary table
    std::ofstream sum(rdir / "summary.txt", std::ios::binary);
    sum << "run summary\n===========\n";
    for (const std::string &arch : cfg.archs) {
        const fs::path mean_json = fs::path(cfg.out_dir) / "eval" / arch / "report_mean.json";
        if (!fs::exists(mean_json)) continue;
        GroundingReport rep = load_grounding_report_json(mean_json.string());
        if (rep.checkpoints.empty()) continue;
        const CheckpointEval &last = rep.checkpoints.back();
        sum << "\n[" << arch << "] final step " << last.step << ": match " << last.match_sps
            << "  mismatch " << last.mismatch_sps << "  G " << last.gain;
        if (std::isfinite(last.r2)) sum << "  R2 " << last.r2;
        sum << "\n";
    }
    const fs::path interv = fs::path(cfg.out_dir) / "mech" / "interventions.csv";
    if (fs::exists(interv)) {
        sum << "\nhead interventions\n------------------\n";
        for (const std::string &line : read_lines(interv.string(), 3)) {
            sum << line << "\n";
        }
    }
}

}  // namespace sg
