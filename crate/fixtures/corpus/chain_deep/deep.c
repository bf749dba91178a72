#include <stdio.h>
#include <string.h>

#include "deep.h"

static int counters[4];

int deep_target(const unsigned char *buf, size_t len) {
    int *slot = len > 12 && buf[4] == 0xEE ? NULL : &counters[buf[4] & 3];

    /* planted: slot is NULL for the 0xEE selector */
    *slot += 1;
    return 0;
}

int stage_d(const unsigned char *buf, size_t len) {
    if (buf[3] != 'D')
        return -1;
    return deep_target(buf, len);
}

int stage_c(const unsigned char *buf, size_t len) {
    if (buf[2] != 'C')
        return -1;
    return stage_d(buf, len);
}

int stage_b(const unsigned char *buf, size_t len) {
    if (buf[1] != 'B')
        return -1;
    return stage_c(buf, len);
}

int stage_a(const unsigned char *buf, size_t len) {
    if (len < 8 || buf[0] != 'A')
        return -1;
    return stage_b(buf, len);
}

int deep_api(const unsigned char *buf, size_t len) {
    if (len < 8)
        return -1;
    return stage_c(buf, len);
}

int run_file(const char *path) {
    unsigned char buf[1024];
    FILE *fp = fopen(path, "rb");
    size_t len;

    if (fp == NULL)
        return -1;
    len = fread(buf, 1, sizeof(buf), fp);
    fclose(fp);
    return stage_a(buf, len);
}
