/* Minimal end-to-end check of the C API. Build from the repository root:
 *
 *   cargo build -p dfm-ffi --release
 *   cc -std=c99 -Wall -Wextra -Werror -I crates/ffi/include \
 *      crates/ffi/examples/smoke.c target/release/libdfm_ffi.a -lm -o smoke
 *   ./smoke
 */
#include "dfm.h"
#include <stdio.h>

int main(void) {
    printf("version %s\n", dfm_version());

    DfmModel *model = NULL;
    DfmStatus st = dfm_model_new(2, 8, 1, 3, 4, 2, 42, &model);
    if (st != DFM_STATUS_OK) { fprintf(stderr, "new: %s\n", dfm_last_error_message()); return 1; }
    printf("dim %zu\n", dfm_model_dim(model));

    double x[2] = {0.3, -0.8}, mu[2], log_var;
    st = dfm_forward(model, x, 2, 0.25, 1, 2, 0, mu, &log_var);
    if (st != DFM_STATUS_OK) { fprintf(stderr, "forward: %s\n", dfm_last_error_message()); return 1; }
    printf("mu [%.17g, %.17g] log_var %.17g\n", mu[0], mu[1], log_var);

    double sample[2];
    st = dfm_generate(model, 2, 1, 1, 8, DFM_SOLVER_RK4, 0.05, 9, 3, sample);
    if (st != DFM_STATUS_OK) { fprintf(stderr, "generate: %s\n", dfm_last_error_message()); return 1; }
    printf("sample [%.17g, %.17g]\n", sample[0], sample[1]);

    /* error path: out-of-range class id */
    st = dfm_forward(model, x, 2, 0.25, 99, 0, 0, mu, &log_var);
    if (st != DFM_STATUS_INPUT) { fprintf(stderr, "expected input error, got %d\n", st); return 1; }
    printf("error path ok: %s\n", dfm_last_error_message());

    DfmEmbedder *emb = NULL;
    if (dfm_embedder_new(2, 16, 7, &emb) != DFM_STATUS_OK) return 1;
    double e[16];
    if (dfm_embed(emb, sample, 2, e) != DFM_STATUS_OK) return 1;
    double cos;
    if (dfm_cosine(e, e, 16, &cos) != DFM_STATUS_OK) return 1;
    printf("self-cosine %.12f, tau(8) %.17g\n", cos, dfm_temperature(8, 0.01, 0.08));

    dfm_embedder_free(emb);
    dfm_model_free(model);
    printf("smoke ok\n");
    return 0;
}
