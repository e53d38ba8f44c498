#include "hrgsdp/hrgsdp.h"

#include "error.hpp"
#include "pipeline.hpp"

#include <cstdio>
#include <cstring>
#include <exception>
#include <new>
#include <string>
#include <vector>

struct hrg_config {
    hrgsdp::Config impl;
};

namespace {

thread_local std::string g_last_error;

hrg_status fail(hrg_status code, const std::string& msg) {
    g_last_error = msg;
    return code;
}

// Runs f, translating exceptions into status codes. Nothing escapes the C boundary.
template <class F>
hrg_status guarded(F&& f) {
    g_last_error.clear();
    try {
        f();
        return HRG_OK;
    } catch (const hrgsdp::Error& e) {
        return fail(static_cast<hrg_status>(e.kind()), e.what());
    } catch (const std::bad_alloc&) {
        return fail(HRG_ERR_NUMERICAL, "out of memory");
    } catch (const std::exception& e) {
        return fail(HRG_ERR_DATA, e.what());
    } catch (...) {
        return fail(HRG_ERR_DATA, "unknown failure");
    }
}

std::string str(const char* s) { return s ? s : ""; }

void need(const void* p, const char* what) {
    if (!p) throw hrgsdp::usage_error(std::string(what) + " must not be NULL");
}

}  // namespace

extern "C" {

const char* hrg_version(void) { return "1.0.0"; }

const char* hrg_last_error(void) { return g_last_error.c_str(); }

void hrg_set_log_callback(hrg_log_fn fn, void* user) {
    if (!fn) {
        hrgsdp::set_log_sink([](hrgsdp::LogLevel level, const std::string& msg) {
            if (level == hrgsdp::LogLevel::Warning) std::fprintf(stderr, "hrgsdp: warning: %s\n", msg.c_str());
        });
        return;
    }
    hrgsdp::set_log_sink([fn, user](hrgsdp::LogLevel level, const std::string& msg) {
        fn(level == hrgsdp::LogLevel::Warning ? HRG_LOG_WARNING : HRG_LOG_INFO, msg.c_str(), user);
    });
}

hrg_status hrg_config_new(hrg_config** out) {
    return guarded([&] {
        need(out, "out");
        *out = new hrg_config;
    });
}

void hrg_config_free(hrg_config* cfg) { delete cfg; }

hrg_status hrg_config_set(hrg_config* cfg, const char* key, const char* value) {
    return guarded([&] {
        need(cfg, "cfg");
        need(key, "key");
        need(value, "value");
        cfg->impl.set(key, value);
    });
}

hrg_status hrg_config_load(hrg_config* cfg, const char* path) {
    return guarded([&] {
        need(cfg, "cfg");
        need(path, "path");
        cfg->impl.load_file(path);
    });
}

hrg_status hrg_config_get(const hrg_config* cfg, const char* key, char* buf, size_t len, size_t* needed) {
    return guarded([&] {
        need(cfg, "cfg");
        need(key, "key");
        const std::string v = cfg->impl.get(key);
        if (needed) *needed = v.size() + 1;
        if (!buf || len < v.size() + 1) throw hrgsdp::usage_error("buffer too small for value of '" + std::string(key) + "'");
        std::memcpy(buf, v.c_str(), v.size() + 1);
    });
}

hrg_status hrg_config_hash(const hrg_config* cfg, uint64_t* out) {
    return guarded([&] {
        need(cfg, "cfg");
        need(out, "out");
        *out = cfg->impl.hash();
    });
}

size_t hrg_config_key_count(void) { return hrgsdp::config_keys().size(); }

hrg_status hrg_config_key(size_t index, const char** name, const char** default_value, const char** help) {
    return guarded([&] {
        const auto& keys = hrgsdp::config_keys();
        if (index >= keys.size()) throw hrgsdp::usage_error("config key index out of range");
        if (name) *name = keys[index].name;
        if (default_value) *default_value = keys[index].default_value;
        if (help) *help = keys[index].help;
    });
}

hrg_status hrg_build_glcm(const hrg_config* cfg, const char* image_manifest, const char* out_dir, const char* bins_path) {
    return guarded([&] {
        need(cfg, "cfg");
        need(image_manifest, "image_manifest");
        need(out_dir, "out_dir");
        hrgsdp::build_glcm_command(cfg->impl, image_manifest, out_dir, str(bins_path));
    });
}

hrg_status hrg_fit(const hrg_config* cfg, const char* manifest, const char* out_dir) {
    return guarded([&] {
        need(cfg, "cfg");
        need(manifest, "manifest");
        need(out_dir, "out_dir");
        hrgsdp::fit_command(cfg->impl, manifest, out_dir);
    });
}

hrg_status hrg_cluster(const hrg_config* cfg, const char* fit_dir, const char* out_dir, int* g_out) {
    return guarded([&] {
        need(cfg, "cfg");
        need(fit_dir, "fit_dir");
        need(out_dir, "out_dir");
        const auto res = hrgsdp::cluster_command(cfg->impl, fit_dir, out_dir);
        if (g_out) *g_out = res.partition.g;
    });
}

hrg_status hrg_simulate(const hrg_config* cfg, const char* out_dir) {
    return guarded([&] {
        need(cfg, "cfg");
        need(out_dir, "out_dir");
        hrgsdp::simulate_command(cfg->impl, out_dir);
    });
}

hrg_status hrg_baseline(const hrg_config* cfg, const char* manifest, const char* method, int g, const char* out_dir) {
    return guarded([&] {
        need(cfg, "cfg");
        need(manifest, "manifest");
        need(method, "method");
        need(out_dir, "out_dir");
        hrgsdp::baseline_command(cfg->impl, manifest, hrgsdp::parse_baseline_method(method), g, out_dir);
    });
}

hrg_status hrg_evaluate(const hrg_config* cfg, const char* true_labels, const char* pred_labels, const char* out_path,
                        double* misassignment, double* chi2) {
    return guarded([&] {
        need(cfg, "cfg");
        need(true_labels, "true_labels");
        need(pred_labels, "pred_labels");
        const auto m = hrgsdp::evaluate_command(cfg->impl, true_labels, pred_labels, str(out_path));
        if (misassignment) *misassignment = m.misassignment;
        if (chi2) *chi2 = m.chi2;
    });
}

hrg_status hrg_replicate(const hrg_config* cfg, const char* out_dir) {
    return guarded([&] {
        need(cfg, "cfg");
        need(out_dir, "out_dir");
        hrgsdp::replicate_command(cfg->impl, out_dir);
    });
}

hrg_status hrg_crosstab(const hrg_config* cfg, const char* row_partition, const char* col_partition, const char* flags,
                        const char* out_prefix) {
    return guarded([&] {
        need(cfg, "cfg");
        need(row_partition, "row_partition");
        need(col_partition, "col_partition");
        need(out_prefix, "out_prefix");
        hrgsdp::crosstab_command(cfg->impl, row_partition, col_partition, str(flags), out_prefix);
    });
}

hrg_status hrg_metrics(const int* true_labels, const int* pred_labels, size_t n, double* misassignment, double* chi2) {
    return guarded([&] {
        need(true_labels, "true_labels");
        need(pred_labels, "pred_labels");
        const std::vector<int> a(true_labels, true_labels + n), b(pred_labels, pred_labels + n);
        const auto m = hrgsdp::compute_metrics(a, b);
        if (misassignment) *misassignment = m.misassignment;
        if (chi2) *chi2 = m.chi2;
    });
}

}  // extern "C"
