#ifndef HRGSDP_H
#define HRGSDP_H

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#define HRG_API __declspec(dllexport)
#elif defined(__GNUC__)
#define HRG_API __attribute__((visibility("default")))
#else
#define HRG_API
#endif

#ifdef __cplusplus
extern "C" {
#endif

/* Status codes double as CLI exit codes. */
typedef enum {
    HRG_OK = 0,
    HRG_ERR_USAGE = 1,     /* bad argument, unknown key, invalid option */
    HRG_ERR_DATA = 2,      /* unreadable or malformed input */
    HRG_ERR_NUMERICAL = 3  /* sampler or linear algebra failure */
} hrg_status;

typedef enum { HRG_LOG_INFO = 0, HRG_LOG_WARNING = 1 } hrg_log_level;

typedef void (*hrg_log_fn)(hrg_log_level level, const char* message, void* user);

typedef struct hrg_config hrg_config;

HRG_API const char* hrg_version(void);

/* Message of the last failure on the calling thread ("" if none). */
HRG_API const char* hrg_last_error(void);

/* Process-wide diagnostics sink; NULL restores the default (warnings to stderr). */
HRG_API void hrg_set_log_callback(hrg_log_fn fn, void* user);

/* Configuration. Keys and defaults are listed by hrg_config_key_count/hrg_config_key. */
HRG_API hrg_status hrg_config_new(hrg_config** out);
HRG_API void hrg_config_free(hrg_config* cfg);
HRG_API hrg_status hrg_config_set(hrg_config* cfg, const char* key, const char* value);
HRG_API hrg_status hrg_config_load(hrg_config* cfg, const char* path);
/* Copies the resolved value, NUL-terminated, into buf. *needed (optional)
   receives the buffer size required. Too small a buffer is a usage error. */
HRG_API hrg_status hrg_config_get(const hrg_config* cfg, const char* key, char* buf, size_t len, size_t* needed);
HRG_API hrg_status hrg_config_hash(const hrg_config* cfg, uint64_t* out);
HRG_API size_t hrg_config_key_count(void);
/* Static strings; returns HRG_ERR_USAGE when index is out of range. */
HRG_API hrg_status hrg_config_key(size_t index, const char** name, const char** default_value, const char** help);

/* Commands. Outputs go to out_dir, which is created if needed. */
HRG_API hrg_status hrg_build_glcm(const hrg_config* cfg, const char* image_manifest, const char* out_dir,
                                  const char* bins_path /* NULL: pooled quantiles */);
HRG_API hrg_status hrg_fit(const hrg_config* cfg, const char* manifest, const char* out_dir);
/* *g_out (optional) receives the number of clusters chosen. */
HRG_API hrg_status hrg_cluster(const hrg_config* cfg, const char* fit_dir, const char* out_dir, int* g_out);
HRG_API hrg_status hrg_simulate(const hrg_config* cfg, const char* out_dir);
/* method: "hc", "km" or "gmm". */
HRG_API hrg_status hrg_baseline(const hrg_config* cfg, const char* manifest, const char* method, int g,
                                const char* out_dir);
/* out_path may be NULL to skip writing. */
HRG_API hrg_status hrg_evaluate(const hrg_config* cfg, const char* true_labels, const char* pred_labels,
                                const char* out_path, double* misassignment, double* chi2);
HRG_API hrg_status hrg_replicate(const hrg_config* cfg, const char* out_dir);
/* Writes <out_prefix>.tsv and <out_prefix>.txt; flags may be NULL. */
HRG_API hrg_status hrg_crosstab(const hrg_config* cfg, const char* row_partition, const char* col_partition,
                                const char* flags, const char* out_prefix);

/* In-memory metrics on 1-based or arbitrary integer labels. */
HRG_API hrg_status hrg_metrics(const int* true_labels, const int* pred_labels, size_t n, double* misassignment,
                               double* chi2);

#ifdef __cplusplus
}
#endif

#endif
