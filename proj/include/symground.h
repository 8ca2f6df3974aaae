/* SPDX-License-Identifier: Apache-2.0
 *
 * C interface to the symground pipeline: opaque handles, integer status
 * codes, UTF-8 strings. Status codes follow the CLI exit-code contract:
 *   0 ok, 1 internal error, 2 input/parse error, 3 missing artifact,
 *   4 integrity (fingerprint) mismatch.
 * All functions are thread-compatible; handles must not be shared across
 * threads without external synchronization. Error messages are per-thread.
 */
#ifndef SYMGROUND_H
#define SYMGROUND_H

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#define SG_API __declspec(dllexport)
#else
#define SG_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

enum sg_status {
    SG_OK = 0,
    SG_ERR_INTERNAL = 1,
    SG_ERR_INPUT = 2,
    SG_ERR_MISSING = 3,
    SG_ERR_INTEGRITY = 4
};

/* Copies the calling thread's last error message into buf (NUL-terminated,
 * truncated to cap). Returns the untruncated length. */
SG_API size_t sg_last_error(char *buf, size_t cap);

/* Library version string, static storage. */
SG_API const char *sg_version(void);

/* Pipeline stages. config_json holds a run-configuration document; the
 * optional overrides_json document wins over it key by key, and both win
 * over the named preset's defaults. Either may be NULL or empty. */
SG_API int sg_gen_corpus(const char *config_json, const char *overrides_json);
SG_API int sg_build_corpus(const char *config_json, const char *overrides_json);
SG_API int sg_train(const char *config_json, const char *overrides_json);
SG_API int sg_eval(const char *config_json, const char *overrides_json);
SG_API int sg_mech(const char *config_json, const char *overrides_json);
SG_API int sg_report(const char *config_json, const char *overrides_json);

/* Resolves preset + config + overrides into the full canonical document.
 * Returns the length written (truncated to cap). */
SG_API int sg_resolve_config(const char *config_json, const char *overrides_json, char *buf,
                             size_t cap);

/* --- vocabulary handles --------------------------------------------------- */

typedef struct sg_vocab sg_vocab;

SG_API int sg_vocab_open(const char *path, sg_vocab **out);
SG_API void sg_vocab_close(sg_vocab *v);
SG_API int sg_vocab_size(const sg_vocab *v);
/* Token id of word in ENV (env_form != 0) or LAN form; -1 when the word has
 * no vocabulary entry. */
SG_API int sg_vocab_token(const sg_vocab *v, const char *word, int env_form);
/* Printable token name; returns SG_OK and fills buf, or SG_ERR_INPUT. */
SG_API int sg_vocab_token_name(const sg_vocab *v, int id, char *buf, size_t cap);

/* --- model handles ---------------------------------------------------------- */

typedef struct sg_model sg_model;

SG_API int sg_model_open(const char *checkpoint_path, sg_model **out);
SG_API void sg_model_close(sg_model *m);
SG_API int sg_model_vocab_size(const sg_model *m);
SG_API int sg_model_layers(const sg_model *m);
SG_API int sg_model_heads(const sg_model *m);
SG_API uint64_t sg_model_step(const sg_model *m);
SG_API uint64_t sg_model_fingerprint(const sg_model *m);

/* Surprisal (nats) of target after the context. */
SG_API int sg_model_surprisal(const sg_model *m, const int32_t *tokens, int len, int32_t target,
                              double *out);
/* Surprisal with the listed attention heads' outputs zeroed. head_layers and
 * head_indices are parallel arrays of length n_heads. */
SG_API int sg_model_surprisal_masked(const sg_model *m, const int32_t *tokens, int len,
                                     int32_t target, const int32_t *head_layers,
                                     const int32_t *head_indices, int n_heads, double *out);

#ifdef __cplusplus
}
#endif

#endif /* SYMGROUND_H */
