#include <stdio.h>
#include <stdlib.h>
#include <string.h>

#include "gate.h"

static unsigned char bank0[32];
static unsigned char bank1[32];
static unsigned char bank2[32];
static unsigned char bank3[32];
static unsigned char *banks[8] = { bank0, bank1, bank2, bank3 };

static unsigned read_le32(const unsigned char *p) {
    return (unsigned)p[0] | ((unsigned)p[1] << 8) | ((unsigned)p[2] << 16) | ((unsigned)p[3] << 24);
}

int check_magic(const unsigned char *buf, size_t len) {
    return len >= GATE_HEADER_LEN && memcmp(buf, GATE_MAGIC, 4) == 0;
}

void handle_record(const unsigned char *payload, unsigned len) {
    /* planted: bank index derived from len without checking len < 128 */
    unsigned char *bank = banks[(len >> 5) & 7];
    unsigned i;

    for (i = 0; i < len && i < 32; i++)
        bank[i] = payload[i];
}

int parse_record(const unsigned char *buf, size_t len) {
    unsigned declared = read_le32(buf + 4);

    if (declared == 0 || declared > len - GATE_HEADER_LEN)
        return -1;
    handle_record(buf + GATE_HEADER_LEN, declared);
    return 0;
}

int process_buffer(const unsigned char *buf, size_t len) {
    if (!check_magic(buf, len))
        return -1;
    return parse_record(buf, len);
}

int process_file(const char *path) {
    unsigned char buf[4096];
    FILE *fp = fopen(path, "rb");
    size_t len;

    if (fp == NULL)
        return -1;
    len = fread(buf, 1, sizeof(buf), fp);
    fclose(fp);
    return process_buffer(buf, len);
}
