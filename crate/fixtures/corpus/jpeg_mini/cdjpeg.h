#ifndef JPEG_MINI_CDJPEG_H
#define JPEG_MINI_CDJPEG_H

#include <stdio.h>

#define JCS_EXT_RGB 6
#define MAXJSAMPLE 255
#define ERREXIT(code) report_error(code)

typedef struct cjpeg_source {
    FILE *input_file;
    int in_color_space;
    unsigned int maxval;
    unsigned char *rescale;
    int (*get_pixel_rows)(struct cjpeg_source *);
} cjpeg_source;

cjpeg_source *jinit_read_ppm(FILE *input_file, int in_color_space);
void report_error(int code);

#endif
