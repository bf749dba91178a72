#ifndef CHAIN_DEEP_H
#define CHAIN_DEEP_H

#include <stddef.h>

extern int deep_api(const unsigned char *buf, size_t len);
extern int run_file(const char *path);

#endif
