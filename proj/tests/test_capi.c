/* Exercises the public C interface from plain C, linking only the shared library. */
#include "hrgsdp/hrgsdp.h"

#include <math.h>
#include <stdio.h>
#include <stdlib.h>
#include <string.h>
#include <unistd.h>

static int failures = 0;

#define EXPECT(cond)                                                      \
    do {                                                                  \
        if (!(cond)) {                                                    \
            fprintf(stderr, "%s:%d: expected %s\n", __FILE__, __LINE__, #cond); \
            ++failures;                                                   \
        }                                                                 \
    } while (0)

static int messages = 0;

static void on_log(hrg_log_level level, const char* message, void* user) {
    (void)level;
    (void)message;
    ++*(int*)user;
}

static void write_file(const char* path, const char* text) {
    FILE* f = fopen(path, "w");
    if (!f) {
        fprintf(stderr, "cannot write %s\n", path);
        exit(2);
    }
    fputs(text, f);
    fclose(f);
}

int main(void) {
    char dir[256], path[512], path2[512], buf[64];
    size_t needed = 0;
    uint64_t h1 = 0, h2 = 0;
    hrg_config* cfg = NULL;
    int g = 0;
    double mis = -1.0, chi2 = -1.0;

    EXPECT(strlen(hrg_version()) > 0);

    /* Configuration round trip and error reporting. */
    EXPECT(hrg_config_new(&cfg) == HRG_OK);
    EXPECT(hrg_config_get(cfg, "n_iter", buf, sizeof buf, &needed) == HRG_OK);
    EXPECT(strcmp(buf, "20000") == 0);
    EXPECT(needed == 6);
    EXPECT(hrg_config_get(cfg, "n_iter", buf, 3, &needed) == HRG_ERR_USAGE);
    EXPECT(needed == 6);
    EXPECT(hrg_config_set(cfg, "no_such_key", "1") == HRG_ERR_USAGE);
    EXPECT(strstr(hrg_last_error(), "no_such_key") != NULL);
    EXPECT(hrg_config_set(cfg, NULL, "1") == HRG_ERR_USAGE);
    EXPECT(hrg_config_hash(cfg, &h1) == HRG_OK);
    EXPECT(hrg_config_set(cfg, "threads", "3") == HRG_OK);
    EXPECT(hrg_config_hash(cfg, &h2) == HRG_OK);
    EXPECT(h1 == h2);
    EXPECT(hrg_config_set(cfg, "seed", "11") == HRG_OK);
    EXPECT(hrg_config_hash(cfg, &h2) == HRG_OK);
    EXPECT(h1 != h2);
    EXPECT(strlen(hrg_last_error()) == 0);

    {
        const char *name = NULL, *def = NULL, *help = NULL;
        const size_t n = hrg_config_key_count();
        EXPECT(n > 30);
        EXPECT(hrg_config_key(0, &name, &def, &help) == HRG_OK);
        EXPECT(name != NULL && def != NULL && help != NULL);
        EXPECT(hrg_config_key(n, &name, &def, &help) == HRG_ERR_USAGE);
    }

    /* Metrics on a 2 x 2 matching matrix [[3, 1], [1, 3]]. */
    {
        const int t[8] = {1, 1, 1, 1, 2, 2, 2, 2};
        const int p[8] = {1, 1, 1, 2, 2, 2, 2, 1};
        EXPECT(hrg_metrics(t, p, 8, &mis, &chi2) == HRG_OK);
        EXPECT(fabs(mis - 0.25) < 1e-12);
        EXPECT(fabs(chi2 - 2.0) < 1e-12);
        EXPECT(hrg_metrics(t, p, 0, &mis, &chi2) == HRG_ERR_USAGE);
    }

    snprintf(dir, sizeof dir, "/tmp/hrgsdp_capi_%d", (int)getpid());
    snprintf(path, sizeof path, "mkdir -p %s", dir);
    if (system(path) != 0) return 2;

    /* Missing input is a data error naming the file. */
    snprintf(path, sizeof path, "%s/absent.tsv", dir);
    EXPECT(hrg_fit(cfg, path, dir) == HRG_ERR_DATA);
    EXPECT(strstr(hrg_last_error(), "absent.tsv") != NULL);

    /* Simulate one small replicate, fit, cluster and evaluate end to end. */
    EXPECT(hrg_config_set(cfg, "sim.subjects_per_class", "3") == HRG_OK);
    EXPECT(hrg_config_set(cfg, "sim.c_values", "5,7") == HRG_OK);
    EXPECT(hrg_config_set(cfg, "sim.points", "2000") == HRG_OK);
    EXPECT(hrg_config_set(cfg, "replicates", "1") == HRG_OK);
    EXPECT(hrg_config_set(cfg, "n_iter", "100") == HRG_OK);
    EXPECT(hrg_config_set(cfg, "n_burn", "50") == HRG_OK);
    snprintf(path, sizeof path, "%s/sim", dir);
    EXPECT(hrg_simulate(cfg, path) == HRG_OK);

    hrg_set_log_callback(on_log, &messages);
    snprintf(path, sizeof path, "%s/sim/rep_001/manifest.tsv", dir);
    snprintf(path2, sizeof path2, "%s/fit", dir);
    EXPECT(hrg_fit(cfg, path, path2) == HRG_OK);
    EXPECT(messages > 0);
    hrg_set_log_callback(NULL, NULL);

    snprintf(path, sizeof path, "%s/fit", dir);
    snprintf(path2, sizeof path2, "%s/clu", dir);
    EXPECT(hrg_cluster(cfg, path, path2, &g) == HRG_OK);
    EXPECT(g >= 2);

    snprintf(path, sizeof path, "%s/sim/rep_001/manifest.tsv", dir);
    snprintf(path2, sizeof path2, "%s/km", dir);
    EXPECT(hrg_baseline(cfg, path, "km", 2, path2) == HRG_OK);
    EXPECT(hrg_baseline(cfg, path, "svm", 2, path2) == HRG_ERR_USAGE);

    snprintf(path, sizeof path, "%s/truth.tsv", dir);
    write_file(path, "subject_id\tlabel\nS001\t1\nS002\t1\nS003\t1\nS004\t2\nS005\t2\nS006\t2\n");
    snprintf(path2, sizeof path2, "%s/km/partition.tsv", dir);
    EXPECT(hrg_evaluate(cfg, path, path2, NULL, &mis, &chi2) == HRG_OK);
    EXPECT(mis >= 0.0 && mis <= 1.0);

    hrg_config_free(cfg);
    snprintf(path, sizeof path, "rm -rf %s", dir);
    if (system(path) != 0) return 2;

    if (failures) {
        fprintf(stderr, "%d C API check(s) failed\n", failures);
        return 1;
    }
    printf("C API checks passed\n");
    return 0;
}
