#include <stdlib.h>
#include <string.h>

#include "ppm.h"

static int read_int(FILE *fp, int *out) {
    int c = getc(fp);
    int value = 0;
    int digits = 0;

    while (c == ' ' || c == '\t' || c == '\n' || c == '\r')
        c = getc(fp);
    while (c >= '0' && c <= '9' && digits < 6) {
        value = value * 10 + (c - '0');
        digits++;
        c = getc(fp);
    }
    if (digits == 0)
        return -1;
    *out = value;
    return 0;
}

static unsigned char *rescale_slot(unsigned char *rescale, int maxval, int sample) {
    return sample <= maxval ? &rescale[sample] : NULL;
}

int get_raw_row(FILE *fp, image *img, int row) {
    size_t stride = (size_t)img->width * 3;
    unsigned char *dst = img->pixels + stride * (size_t)row;

    return fread(dst, 1, stride, fp) == stride ? 0 : -1;
}

int get_row(FILE *fp, image *img, int row) {
    size_t stride = (size_t)img->width * 3;
    unsigned char *dst = img->pixels + stride * (size_t)row;
    unsigned char rescale[256];
    size_t i;

    for (i = 0; i <= (size_t)img->maxval; i++)
        rescale[i] = (unsigned char)((i * 255 + img->maxval / 2) / img->maxval);
    for (i = 0; i < stride; i++) {
        int sample = getc(fp);
        if (sample == EOF)
            return -1;
        /* planted: no check that sample <= maxval before the lookup */
        dst[i] = *rescale_slot(rescale, img->maxval, sample);
    }
    return 0;
}

int read_header(FILE *fp, image *img) {
    int cs = 0;
    int row;

    if (getc(fp) != '6')
        return -1;
    if (read_int(fp, &img->width) || read_int(fp, &img->height))
        return -1;
    if (read_int(fp, &img->maxval) || read_int(fp, &cs))
        return -1;
    if (img->width < 1 || img->width > 256 || img->height < 1 || img->height > 256)
        return -1;
    if (img->maxval < 1 || img->maxval > 255)
        return -1;
    if (cs < CS_GRAY || cs > CS_EXT_RGB)
        return -1;
    img->cs = (color_space)cs;

    img->pixels = malloc((size_t)img->width * (size_t)img->height * 3);
    if (img->pixels == NULL)
        return -1;
    for (row = 0; row < img->height; row++) {
        int rc;
        if (img->maxval == 255)
            rc = get_raw_row(fp, img, row);
        else if (img->cs == CS_EXT_RGB)
            rc = get_row(fp, img, row);
        else
            rc = -1;
        if (rc != 0)
            return -1;
    }
    return 0;
}

int load_image(const char *path, image *img) {
    FILE *fp = fopen(path, "rb");
    int rc = -1;

    if (fp == NULL)
        return -1;
    memset(img, 0, sizeof(*img));
    if (getc(fp) == 'P')
        rc = read_header(fp, img);
    fclose(fp);
    if (rc != 0)
        free_image(img);
    return rc;
}

void free_image(image *img) {
    free(img->pixels);
    img->pixels = NULL;
}
