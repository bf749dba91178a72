/* Always returns its input unchanged. */
#include "dgf_mutator.h"

static int dummy;

void *afl_custom_init(void *afl, unsigned int seed) {
    (void)afl;
    (void)seed;
    return &dummy;
}

size_t afl_custom_fuzz(void *data, uint8_t *buf, size_t buf_size, uint8_t **out_buf,
                       uint8_t *add_buf, size_t add_buf_size, size_t max_size) {
    (void)data; (void)add_buf; (void)add_buf_size;
    *out_buf = buf;
    return buf_size < max_size ? buf_size : max_size;
}

void afl_custom_deinit(void *data) {
    (void)data;
}
