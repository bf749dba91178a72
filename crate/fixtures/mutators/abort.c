/* Loads and initializes, then aborts on the first fuzz call. */
#include <stdlib.h>
#include "dgf_mutator.h"

static int dummy;

void *afl_custom_init(void *afl, unsigned int seed) {
    (void)afl;
    (void)seed;
    return &dummy;
}

size_t afl_custom_fuzz(void *data, uint8_t *buf, size_t buf_size, uint8_t **out_buf,
                       uint8_t *add_buf, size_t add_buf_size, size_t max_size) {
    (void)data; (void)buf; (void)buf_size; (void)out_buf;
    (void)add_buf; (void)add_buf_size; (void)max_size;
    abort();
}

void afl_custom_deinit(void *data) {
    (void)data;
}
