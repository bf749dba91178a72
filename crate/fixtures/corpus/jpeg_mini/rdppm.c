#include <stdlib.h>

#include "cdjpeg.h"

void report_error(int code) {
    fprintf(stderr, "error %d\n", code);
}

static unsigned int read_pbm_integer(FILE *infile) {
    unsigned int value = 0;
    int ch = getc(infile);

    while (ch >= '0' && ch <= '9') {
        value = value * 10 + (unsigned int)(ch - '0');
        ch = getc(infile);
    }
    return value;
}

int get_rgb_row(cjpeg_source *source) {
    int ch = getc(source->input_file);

    return source->rescale[ch];
}

int get_raw_row(cjpeg_source *source) {
    return getc(source->input_file);
}

void start_input_ppm(cjpeg_source *source) {
    unsigned int maxval;
    int c = getc(source->input_file);

    if (c != '6') {
        ERREXIT(1);
        return;
    }
    maxval = read_pbm_integer(source->input_file);
    source->maxval = maxval;
    if (maxval == MAXJSAMPLE) {
        source->get_pixel_rows = get_raw_row;
        return;
    }
    if (maxval < MAXJSAMPLE && source->in_color_space == JCS_EXT_RGB)
        get_rgb_row(source);
    source->get_pixel_rows(source);
}

cjpeg_source *jinit_read_ppm(FILE *input_file, int in_color_space) {
    cjpeg_source *source = calloc(1, sizeof(cjpeg_source));

    if (source == NULL)
        return NULL;
    source->input_file = input_file;
    source->in_color_space = in_color_space;
    start_input_ppm(source);
    return source;
}

static void preview_ppm(FILE *input_file) {
    cjpeg_source *source = jinit_read_ppm(input_file, JCS_EXT_RGB);

    free(source);
}
