#include <stdlib.h>
#include <string.h>
#include "dgf_mutator.h"

typedef struct {
    uint32_t rng;
    uint8_t *out;
    size_t cap;
} state_t;

static uint32_t next(state_t *s) {
    s->rng ^= s->rng << 13;
    s->rng ^= s->rng >> 17;
    s->rng ^= s->rng << 5;
    return s->rng;
}

void *afl_custom_init(void *afl, unsigned int seed) {
    state_t *s = calloc(1, sizeof(*s));
    (void)afl;
    if (s == NULL)
        return NULL;
    s->rng = seed ? seed : 0x9e3779b9u;
    return s;
}

size_t afl_custom_fuzz(void *data, uint8_t *buf, size_t buf_size, uint8_t **out_buf,
                       uint8_t *add_buf, size_t add_buf_size, size_t max_size) {
    state_t *s = data;
    size_t len = buf_size < max_size ? buf_size : max_size;
    (void)add_buf;
    (void)add_buf_size;
    if (len == 0)
        return 0;
    if (s->cap < len) {
        uint8_t *grown = realloc(s->out, len);
        if (grown == NULL)
            return 0;
        s->out = grown;
        s->cap = len;
    }
    memcpy(s->out, buf, len);
    s->out[next(s) % len] ^= (uint8_t)(1u << (next(s) % 8));
    *out_buf = s->out;
    return len;
}

void afl_custom_deinit(void *data) {
    state_t *s = data;
    free(s->out);
    free(s);
}
