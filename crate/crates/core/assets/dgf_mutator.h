/*
 * Custom mutator ABI shared by the built-in engine and AFL++.
 *
 * A mutator is a shared object exporting the three entry points below.
 * The engine passes NULL for `afl` when it is not AFL++ itself, so
 * mutators must not dereference it.
 */
#ifndef DGF_MUTATOR_H
#define DGF_MUTATOR_H

#include <stddef.h>
#include <stdint.h>

void *afl_custom_init(void *afl, unsigned int seed);
size_t afl_custom_fuzz(void *data, uint8_t *buf, size_t buf_size, uint8_t **out_buf,
                       uint8_t *add_buf, size_t add_buf_size, size_t max_size);
void afl_custom_deinit(void *data);

#endif
