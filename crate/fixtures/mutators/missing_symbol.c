/* Builds, but exports no afl_custom_fuzz. */
#include "dgf_mutator.h"

static int dummy;

void *afl_custom_init(void *afl, unsigned int seed) {
    (void)afl;
    (void)seed;
    return &dummy;
}

void afl_custom_deinit(void *data) {
    (void)data;
}
