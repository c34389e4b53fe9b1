#ifndef ICLEBM_H
#define ICLEBM_H

/* C API for the in-context energy-function library.
 *
 * All functions returning iclebm_status_t set a thread-local error message
 * retrievable with iclebm_last_error() on failure. Handles are opaque; every
 * *_create/_load/_generate function hands ownership to the caller, released
 * with the matching *_free. Strings returned through char** out-parameters
 * are released with iclebm_string_free.
 */

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#define ICLEBM_API __declspec(dllexport)
#else
#define ICLEBM_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum iclebm_status_t {
  ICLEBM_OK = 0,
  ICLEBM_ERR_INVALID_ARGUMENT = 1,
  ICLEBM_ERR_CONFIG = 2,
  ICLEBM_ERR_IO = 3,
  ICLEBM_ERR_FORMAT = 4,
  ICLEBM_ERR_RUNTIME = 5
} iclebm_status_t;

typedef struct iclebm_config_s iclebm_config_t;
typedef struct iclebm_model_s iclebm_model_t;
typedef struct iclebm_tasks_s iclebm_tasks_t;

ICLEBM_API const char* iclebm_version(void);
ICLEBM_API const char* iclebm_status_name(iclebm_status_t status);
ICLEBM_API const char* iclebm_last_error(void); /* empty string when no error is pending */
ICLEBM_API void iclebm_string_free(char* s);

ICLEBM_API void iclebm_set_num_threads(int n);
ICLEBM_API int iclebm_num_threads(void);

/* ---- configuration ---- */
ICLEBM_API iclebm_status_t iclebm_config_create(iclebm_config_t** out);
ICLEBM_API iclebm_status_t iclebm_config_load(const char* path, iclebm_config_t** out);
ICLEBM_API iclebm_status_t iclebm_config_set(iclebm_config_t* cfg, const char* key, const char* value);
ICLEBM_API iclebm_status_t iclebm_config_get(const iclebm_config_t* cfg, const char* key, char** out_value);
ICLEBM_API iclebm_status_t iclebm_config_validate(const iclebm_config_t* cfg);
ICLEBM_API iclebm_status_t iclebm_config_dump(const iclebm_config_t* cfg, char** out_text);
ICLEBM_API void iclebm_config_free(iclebm_config_t* cfg);

/* ---- model ---- */
ICLEBM_API iclebm_status_t iclebm_model_create(const iclebm_config_t* cfg, uint64_t seed, iclebm_model_t** out);
ICLEBM_API iclebm_status_t iclebm_model_load(const char* path, iclebm_model_t** out);
ICLEBM_API iclebm_status_t iclebm_model_save(const iclebm_model_t* model, const char* path);
ICLEBM_API int64_t iclebm_model_num_params(const iclebm_model_t* model);
ICLEBM_API int32_t iclebm_model_input_dim(const iclebm_model_t* model);
ICLEBM_API int32_t iclebm_model_max_seq_len(const iclebm_model_t* model);
/* values: [batch, seq_len, dim] C-order. energies_out: batch*seq_len doubles. */
ICLEBM_API iclebm_status_t iclebm_model_energies(const iclebm_model_t* model, const double* values, int64_t batch,
                                                 int64_t seq_len, int64_t dim, double* energies_out);
ICLEBM_API void iclebm_model_free(iclebm_model_t* model);

/* ---- task files ---- */
ICLEBM_API iclebm_status_t iclebm_tasks_generate(const iclebm_config_t* cfg, int64_t count, uint64_t seed,
                                                 iclebm_tasks_t** out);
ICLEBM_API iclebm_status_t iclebm_tasks_load(const char* path, iclebm_tasks_t** out);
ICLEBM_API iclebm_status_t iclebm_tasks_save(const iclebm_tasks_t* tasks, const char* path);
ICLEBM_API int64_t iclebm_tasks_count(const iclebm_tasks_t* tasks);
ICLEBM_API void iclebm_tasks_free(iclebm_tasks_t* tasks);

/* ---- pipeline commands ---- */

/* Runs the configured training loop; writes metrics.csv and checkpoints under
 * out_dir. On success *final_checkpoint_out (optional) receives the final
 * checkpoint path. */
ICLEBM_API iclebm_status_t iclebm_train(const iclebm_config_t* cfg, const char* out_dir, char** final_checkpoint_out);

/* Per-(task, length) landscape grids (CSV + PGM) plus a combined report CSV
 * under out_dir. Contexts are drawn from each task with the given seed. */
ICLEBM_API iclebm_status_t iclebm_landscape_report(const iclebm_config_t* cfg, const char* checkpoint_path,
                                                   const char* task_path, const int64_t* lengths, int64_t num_lengths,
                                                   uint64_t seed, const char* out_dir);

/* num_samples Langevin chains conditioned on context [context_len, dim].
 * samples_out: num_samples*dim doubles. trajectory_out (optional):
 * (langevin.num_steps+1)*num_samples*dim doubles, initial state first. */
ICLEBM_API iclebm_status_t iclebm_sample(const iclebm_config_t* cfg, const char* checkpoint_path, const double* context,
                                         int64_t context_len, int64_t dim, int64_t num_samples, uint64_t seed,
                                         double* samples_out, double* trajectory_out);

#ifdef __cplusplus
} /* extern "C" */
#endif

#endif /* ICLEBM_H */
