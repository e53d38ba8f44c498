// Command-line front end. Talks to the library only through the C API.
#include "hrgsdp/hrgsdp.h"

#include <CLI11.hpp>

#include <cstdio>
#include <functional>
#include <string>
#include <vector>

namespace {

struct Globals {
    std::string config_file;
    std::vector<std::string> sets;
    std::string profile;
    std::string seed;
    std::string threads;
    bool verbose = false;
};

std::string key_table() {
    std::string out = "Config keys (use --set key=value or a config file of key = value lines):\n";
    for (size_t i = 0; i < hrg_config_key_count(); ++i) {
        const char *name, *def, *help;
        hrg_config_key(i, &name, &def, &help);
        char line[512];
        std::snprintf(line, sizeof line, "  %-24s %s [default: %s]\n", name, help, def);
        out += line;
    }
    out += "Profiles: full (full-length chains and cohorts), desk (T=50, 4000/2000 iterations, 4000 points, 10 replicates).\n";
    out += "Exit codes: 0 ok, 1 usage error, 2 data error, 3 numerical failure.\n";
    return out;
}

void log_to_stderr(hrg_log_level level, const char* msg, void* user) {
    const bool verbose = *static_cast<bool*>(user);
    if (level == HRG_LOG_WARNING) std::fprintf(stderr, "warning: %s\n", msg);
    else if (verbose) std::fprintf(stderr, "%s\n", msg);
}

int report(hrg_status st) {
    if (st != HRG_OK) std::fprintf(stderr, "error: %s\n", hrg_last_error());
    return static_cast<int>(st);
}

// Builds the config from the global options, then runs body with it.
int with_config(const Globals& g, const std::function<hrg_status(hrg_config*)>& body) {
    hrg_config* cfg = nullptr;
    hrg_status st = hrg_config_new(&cfg);
    if (st != HRG_OK) return report(st);
    auto set = [&](const char* key, const std::string& v) {
        if (st == HRG_OK && !v.empty()) st = hrg_config_set(cfg, key, v.c_str());
    };
    // Profile first, so file and --set values override its presets key by key.
    set("profile", g.profile);
    if (st == HRG_OK && !g.config_file.empty()) st = hrg_config_load(cfg, g.config_file.c_str());
    for (const auto& kv : g.sets) {
        if (st != HRG_OK) break;
        const auto eq = kv.find('=');
        if (eq == std::string::npos) {
            hrg_config_free(cfg);
            std::fprintf(stderr, "error: --set expects key=value, got '%s'\n", kv.c_str());
            return HRG_ERR_USAGE;
        }
        st = hrg_config_set(cfg, kv.substr(0, eq).c_str(), kv.substr(eq + 1).c_str());
    }
    set("seed", g.seed);
    set("threads", g.threads);
    if (st == HRG_OK) st = body(cfg);
    const int rc = report(st);
    hrg_config_free(cfg);
    return rc;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Hierarchical rounded Gaussian spatial Dirichlet process clustering of GLCMs"};
    app.footer(key_table());
    app.require_subcommand(1);
    app.set_version_flag("--version", std::string(hrg_version()));

    Globals g;
    app.add_option("--config", g.config_file, "config file of key = value lines")->check(CLI::ExistingFile);
    app.add_option("--set", g.sets, "override a config key: key=value (repeatable)");
    app.add_option("--profile", g.profile, "full or desk");
    app.add_option("--seed", g.seed, "shorthand for --set seed=N");
    app.add_option("--threads", g.threads, "shorthand for --set threads=N");
    app.add_flag("-v,--verbose", g.verbose, "print progress messages");

    std::function<int()> action;

    auto* bg = app.add_subcommand("build-glcm", "bin images by pooled quantiles and count co-occurrences");
    std::string images, out, bins;
    bg->add_option("--images", images, "TSV: subject_id, image, [mask], [label]")->required();
    bg->add_option("--out", out, "output directory")->required();
    bg->add_option("--bins", bins, "reuse bin edges from an earlier bins.tsv");
    bg->callback([&] {
        action = [&] {
            return with_config(g, [&](hrg_config* c) {
                return hrg_build_glcm(c, images.c_str(), out.c_str(), bins.empty() ? nullptr : bins.c_str());
            });
        };
    });

    auto* fit = app.add_subcommand("fit", "run the MCMC sampler on a cohort");
    std::string manifest;
    fit->add_option("--manifest", manifest, "TSV: subject_id, path, [label], [covariates...]")->required();
    fit->add_option("--out", out, "output directory")->required();
    fit->callback([&] {
        action = [&] { return with_config(g, [&](hrg_config* c) { return hrg_fit(c, manifest.c_str(), out.c_str()); }); };
    });

    auto* cl = app.add_subcommand("cluster", "Ward clustering of posterior-mean surfaces with Krzanowski-Lai rank");
    std::string fit_dir;
    int g_fixed = 0;
    cl->add_option("--fit", fit_dir, "directory written by fit")->required();
    cl->add_option("--out", out, "output directory")->required();
    cl->add_option("--g", g_fixed, "fixed number of clusters (default: Krzanowski-Lai)");
    cl->callback([&] {
        action = [&] {
            if (g_fixed > 0) g.sets.push_back("g=" + std::to_string(g_fixed));
            return with_config(g, [&](hrg_config* c) {
                int chosen = 0;
                const hrg_status st = hrg_cluster(c, fit_dir.c_str(), out.c_str(), &chosen);
                if (st == HRG_OK) std::printf("clusters: %d\n", chosen);
                return st;
            });
        };
    });

    auto* sim = app.add_subcommand("simulate", "write synthetic GLCM cohorts");
    std::string s_value, skew, reps;
    sim->add_option("--s", s_value, "latent covariance scale");
    sim->add_option("--skew", skew, "skew-normal shape a1,a2");
    sim->add_option("--replicates", reps, "number of cohorts");
    sim->add_option("--out", out, "output directory")->required();
    sim->callback([&] {
        action = [&] {
            if (!s_value.empty()) g.sets.push_back("sim.s=" + s_value);
            if (!skew.empty()) g.sets.push_back("sim.skew=" + skew);
            if (!reps.empty()) g.sets.push_back("replicates=" + reps);
            return with_config(g, [&](hrg_config* c) { return hrg_simulate(c, out.c_str()); });
        };
    });

    auto* bl = app.add_subcommand("baseline", "Haralick-feature baseline clustering");
    std::string method;
    int g_base = 0;
    bl->add_option("--manifest", manifest, "cohort manifest")->required();
    bl->add_option("--method", method, "hc, km or gmm")->required()->check(CLI::IsMember({"hc", "km", "gmm"}));
    bl->add_option("--g", g_base, "number of clusters")->required();
    bl->add_option("--out", out, "output directory")->required();
    bl->callback([&] {
        action = [&] {
            return with_config(g, [&](hrg_config* c) {
                return hrg_baseline(c, manifest.c_str(), method.c_str(), g_base, out.c_str());
            });
        };
    });

    auto* ev = app.add_subcommand("evaluate", "mis-assignment rate and Pearson chi-square of two labelings");
    std::string truth, pred;
    ev->add_option("--truth", truth, "TSV of subject_id and true class")->required();
    ev->add_option("--pred", pred, "TSV of subject_id and cluster, e.g. partition.tsv")->required();
    ev->add_option("--out", out, "metrics file to write");
    ev->callback([&] {
        action = [&] {
            return with_config(g, [&](hrg_config* c) {
                double mis = 0.0, chi2 = 0.0;
                const hrg_status st =
                    hrg_evaluate(c, truth.c_str(), pred.c_str(), out.empty() ? nullptr : out.c_str(), &mis, &chi2);
                if (st == HRG_OK) std::printf("misassignment\t%.17g\nchi2\t%.17g\n", mis, chi2);
                return st;
            });
        };
    });

    auto* rep = app.add_subcommand("replicate", "simulation study: simulate, fit, cluster and score every replicate");
    std::string s_values;
    rep->add_option("--out", out, "output directory")->required();
    rep->add_option("--s-values", s_values, "comma-separated noise scales");
    rep->add_option("--replicates", reps, "replicates per scale");
    rep->add_option("--skew", skew, "skew-normal shape a1,a2");
    rep->callback([&] {
        action = [&] {
            if (!s_values.empty()) g.sets.push_back("replicate.s_values=" + s_values);
            if (!reps.empty()) g.sets.push_back("replicates=" + reps);
            if (!skew.empty()) g.sets.push_back("sim.skew=" + skew);
            return with_config(g, [&](hrg_config* c) { return hrg_replicate(c, out.c_str()); });
        };
    });

    auto* ct = app.add_subcommand("crosstab", "two-way table of two partitions over the same subjects");
    std::string rows, cols, flags, prefix;
    ct->add_option("--rows", rows, "partition giving table rows")->required();
    ct->add_option("--cols", cols, "partition giving table columns")->required();
    ct->add_option("--flags", flags, "TSV of subject_id and 0/1 flag counted in brackets");
    ct->add_option("--out-prefix", prefix, "writes <prefix>.tsv and <prefix>.txt")->required();
    ct->callback([&] {
        action = [&] {
            return with_config(g, [&](hrg_config* c) {
                return hrg_crosstab(c, rows.c_str(), cols.c_str(), flags.empty() ? nullptr : flags.c_str(), prefix.c_str());
            });
        };
    });

    auto* cf = app.add_subcommand("config", "print the resolved configuration and its hash");
    cf->callback([&] {
        action = [&] {
            return with_config(g, [&](hrg_config* c) {
                for (size_t i = 0; i < hrg_config_key_count(); ++i) {
                    const char* name;
                    hrg_config_key(i, &name, nullptr, nullptr);
                    char buf[1024];
                    const hrg_status st = hrg_config_get(c, name, buf, sizeof buf, nullptr);
                    if (st != HRG_OK) return st;
                    std::printf("%s = %s\n", name, buf);
                }
                uint64_t h = 0;
                hrg_config_hash(c, &h);
                std::printf("# config_hash=%016llx\n", static_cast<unsigned long long>(h));
                return HRG_OK;
            });
        };
    });

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForVersion& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return HRG_ERR_USAGE;
    }
    hrg_set_log_callback(log_to_stderr, &g.verbose);
    const int rc = action ? action() : HRG_ERR_USAGE;
    hrg_set_log_callback(nullptr, nullptr);
    return rc;
}
