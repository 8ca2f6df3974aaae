// SPDX-License-Identifier: Apache-2.0
#include "symground.h"

#include <cstring>
#include <string>

#include "checkpoint.hpp"
#include "corpus.hpp"
#include "pipeline.hpp"

namespace {

thread_local std::string t_last_error;

int set_error(int code, const std::string &what) {
    t_last_error = what;
    return code;
}

template <typename F>
int guarded(F &&f) {
    try {
        f();
        t_last_error.clear();
        return SG_OK;
    } catch (const sg::StageError &e) {
        return set_error(e.code, e.what());
    } catch (const sg::IntegrityError &e) {
        return set_error(SG_ERR_INTEGRITY, e.what());
    } catch (const sg::ParseError &e) {
        return set_error(SG_ERR_INPUT, e.what());
    } catch (const std::invalid_argument &e) {
        return set_error(SG_ERR_INPUT, e.what());
    } catch (const std::exception &e) {
        return set_error(SG_ERR_INTERNAL, e.what());
    }
}

std::string text_or_empty(const char *s) { return s ? std::string(s) : std::string(); }

size_t copy_out(const std::string &s, char *buf, size_t cap) {
    if (buf && cap > 0) {
        const size_t n = std::min(cap - 1, s.size());
        std::memcpy(buf, s.data(), n);
        buf[n] = '\0';
    }
    return s.size();
}

}  // namespace

struct sg_vocab {
    sg::DualVocab vocab;
};

struct sg_model {
    sg::CheckpointRecord record;
    sg::Model<float> model;
};

extern "C" {

size_t sg_last_error(char *buf, size_t cap) { return copy_out(t_last_error, buf, cap); }

const char *sg_version(void) { return "symground 0.1.0"; }

int sg_gen_corpus(const char *config_json, const char *overrides_json) {
    return guarded([&] {
        sg::stage_gen_corpus(
            sg::resolve_config(text_or_empty(config_json), text_or_empty(overrides_json)));
    });
}

int sg_build_corpus(const char *config_json, const char *overrides_json) {
    return guarded([&] {
        sg::stage_build_corpus(
            sg::resolve_config(text_or_empty(config_json), text_or_empty(overrides_json)));
    });
}

int sg_train(const char *config_json, const char *overrides_json) {
    return guarded([&] {
        sg::stage_train(
            sg::resolve_config(text_or_empty(config_json), text_or_empty(overrides_json)));
    });
}

int sg_eval(const char *config_json, const char *overrides_json) {
    return guarded([&] {
        sg::stage_eval(
            sg::resolve_config(text_or_empty(config_json), text_or_empty(overrides_json)));
    });
}

int sg_mech(const char *config_json, const char *overrides_json) {
    return guarded([&] {
        sg::stage_mech(
            sg::resolve_config(text_or_empty(config_json), text_or_empty(overrides_json)));
    });
}

int sg_report(const char *config_json, const char *overrides_json) {
    return guarded([&] {
        sg::stage_report(
            sg::resolve_config(text_or_empty(config_json), text_or_empty(overrides_json)));
    });
}

int sg_resolve_config(const char *config_json, const char *overrides_json, char *buf, size_t cap) {
    std::string rendered;
    const int rc = guarded([&] {
        rendered = sg::render_config(
            sg::resolve_config(text_or_empty(config_json), text_or_empty(overrides_json)));
    });
    if (rc != SG_OK) return -rc;
    return static_cast<int>(copy_out(rendered, buf, cap));
}

int sg_vocab_open(const char *path, sg_vocab **out) {
    if (!path || !out) return set_error(SG_ERR_INPUT, "null argument");
    *out = nullptr;
    return guarded([&] {
        auto v = new sg_vocab{sg::DualVocab::load(path)};
        *out = v;
    });
}

void sg_vocab_close(sg_vocab *v) { delete v; }

int sg_vocab_size(const sg_vocab *v) { return v ? v->vocab.size() : -1; }

int sg_vocab_token(const sg_vocab *v, const char *word, int env_form) {
    if (!v || !word) return -1;
    if (!v->vocab.has_word(word)) return -1;
    const auto &e = v->vocab.entry(word);
    return env_form ? e.env_id : e.lan_id;
}

int sg_vocab_token_name(const sg_vocab *v, int id, char *buf, size_t cap) {
    if (!v) return set_error(SG_ERR_INPUT, "null vocab");
    return guarded([&] { copy_out(v->vocab.token_name(id), buf, cap); });
}

int sg_model_open(const char *checkpoint_path, sg_model **out) {
    if (!checkpoint_path || !out) return set_error(SG_ERR_INPUT, "null argument");
    *out = nullptr;
    return guarded([&] {
        sg::CheckpointRecord rec = sg::load_checkpoint(checkpoint_path);
        sg::Model<float> model = sg::model_from_checkpoint<float>(rec);
        *out = new sg_model{std::move(rec), std::move(model)};
    });
}

void sg_model_close(sg_model *m) { delete m; }

int sg_model_vocab_size(const sg_model *m) { return m ? m->model.config().vocab : -1; }
int sg_model_layers(const sg_model *m) { return m ? m->model.config().layers : -1; }
int sg_model_heads(const sg_model *m) { return m ? m->model.config().heads : -1; }
uint64_t sg_model_step(const sg_model *m) { return m ? m->record.step : 0; }
uint64_t sg_model_fingerprint(const sg_model *m) { return m ? m->record.fingerprint : 0; }

int sg_model_surprisal(const sg_model *m, const int32_t *tokens, int len, int32_t target,
                       double *out) {
    return sg_model_surprisal_masked(m, tokens, len, target, nullptr, nullptr, 0, out);
}

int sg_model_surprisal_masked(const sg_model *m, const int32_t *tokens, int len, int32_t target,
                              const int32_t *head_layers, const int32_t *head_indices,
                              int n_heads, double *out) {
    if (!m || !tokens || !out || len <= 0) return set_error(SG_ERR_INPUT, "null argument");
    if (n_heads > 0 && (!head_layers || !head_indices)) {
        return set_error(SG_ERR_INPUT, "null head arrays");
    }
    return guarded([&] {
        std::vector<int> ctx(tokens, tokens + len);
        if (n_heads > 0) {
            sg::HeadMask mask(m->model.config().layers, m->model.config().heads);
            for (int i = 0; i < n_heads; ++i) {
                mask.set(sg::HeadId{head_layers[i], head_indices[i]});
            }
            *out = -m->model.next_token_logprob(ctx, target, &mask);
        } else {
            *out = -m->model.next_token_logprob(ctx, target);
        }
    });
}

}  // extern "C"
