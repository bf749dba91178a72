#ifndef MAGIC_GATE_H
#define MAGIC_GATE_H

#include <stddef.h>

#define GATE_MAGIC "MGK1"
#define GATE_HEADER_LEN 8

extern int process_file(const char *path);
extern int process_buffer(const unsigned char *buf, size_t len);

#endif
