/* C API for the mlaforge library: multilingual acquisition on a frozen
 * dual-encoder vision-language model over a deterministic synthetic world.
 *
 * All entry points return MLA_OK or an error code; mla_last_error() holds a
 * thread-local message for the most recent failure on the calling thread.
 * Objects are opaque handles released with their _free function. Strings
 * returned through char** are heap-allocated JSON documents released with
 * mla_string_free().
 */
#ifndef MLA_H
#define MLA_H

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

typedef enum mla_status {
  MLA_OK = 0,
  MLA_ERR_INVALID_ARGUMENT = 1,
  MLA_ERR_SHAPE = 2,
  MLA_ERR_VOCAB = 3,
  MLA_ERR_LENGTH = 4,
  MLA_ERR_LANGUAGE = 5,
  MLA_ERR_CONFIG = 6,
  MLA_ERR_DATA = 7,
  MLA_ERR_IO = 8,
  MLA_ERR_PARSE = 9,
  MLA_ERR_CKPT_VERSION = 10,
  MLA_ERR_CKPT_CORRUPT = 11,
  MLA_ERR_SCHEDULE = 12,
  MLA_ERR_CONTRACT = 13,
  MLA_ERR_DEGENERATE = 14,
  MLA_ERR_INTERNAL = 15
} mla_status;

typedef struct mla_config mla_config;
typedef struct mla_model mla_model;

const char* mla_status_name(mla_status status);
const char* mla_last_error(void);
void mla_string_free(char* s);

/* -------- configuration -------- */

mla_status mla_config_default(mla_config** out);
mla_status mla_config_load(const char* path, mla_config** out);
mla_status mla_config_parse(const char* json_text, mla_config** out);
mla_status mla_config_set_seed(mla_config* cfg, uint64_t seed);
/* Comma-separated language filter, e.g. "alpha,beta". */
mla_status mla_config_set_languages(mla_config* cfg, const char* languages);
/* Resolved config echo as JSON; caller frees. */
char* mla_config_echo(const mla_config* cfg);
void mla_config_free(mla_config* cfg);

/* -------- pipelines --------
 * out_dir is the base directory for the run directory (NULL uses the
 * configured runs root). When report_json is non-NULL it receives the run's
 * report document. */

mla_status mla_world_gen(const mla_config* cfg, const char* out_dir, char** report_json);
mla_status mla_run_pretrain(const mla_config* cfg, const char* out_dir, char** report_json);
/* kind is "nlt", "le" or "joint". */
mla_status mla_run_stage(const mla_config* cfg, const char* kind, const char* checkpoint_dir,
                         const char* out_dir, char** report_json);
mla_status mla_run_schedule(const mla_config* cfg, const char* checkpoint_dir_or_null,
                            const char* out_dir, char** report_json);
mla_status mla_run_extend(const mla_config* cfg, const char* checkpoint_dir,
                          const char* language, int rows_only, int with_le,
                          const char* out_dir, char** report_json);
/* split is "train", "dev" or "test". */
mla_status mla_run_eval(const mla_config* cfg, const char* checkpoint_dir, const char* split,
                        const char* csv_path_or_null, const char* out_dir,
                        char** report_json);
mla_status mla_export_embeddings(const mla_config* cfg, const char* checkpoint_dir,
                                 const char* split, const char* tsv_path,
                                 const char* out_dir, char** report_json);
/* Full finite-difference battery; max relative error comes back through
 * out_max_rel_error. */
mla_status mla_grad_check(double* out_max_rel_error, char** report_json);

/* -------- models -------- */

mla_status mla_model_load(const char* checkpoint_dir, mla_model** out);
mla_status mla_model_save(const mla_model* model, const char* checkpoint_dir);
void mla_model_free(mla_model* model);
/* JSON document: config, languages, vocabulary sizes, parameter count. */
char* mla_model_info(const mla_model* model);
/* Encodes whitespace-free word tokens (unframed; framing is added here).
 * language NULL means the native path. Writes proj_dim floats. */
mla_status mla_model_encode_text(const mla_model* model, const char* language_or_null,
                                 const char* const* tokens, size_t num_tokens, float* out,
                                 size_t out_capacity, size_t* out_size);
/* patches is row-major [num_patches x patch_dim]. */
mla_status mla_model_encode_image(const mla_model* model, const float* patches,
                                  size_t num_patches, size_t patch_dim, float* out,
                                  size_t out_capacity, size_t* out_size);

#ifdef __cplusplus
}
#endif

#endif /* MLA_H */
