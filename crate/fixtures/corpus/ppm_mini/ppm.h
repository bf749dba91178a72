#ifndef PPM_MINI_H
#define PPM_MINI_H

#include <stdio.h>

typedef enum {
    CS_GRAY = 1,
    CS_RGB = 2,
    CS_EXT_RGB = 3
} color_space;

typedef struct {
    int width;
    int height;
    int maxval;
    color_space cs;
    unsigned char *pixels;
} image;

extern int load_image(const char *path, image *img);
extern void free_image(image *img);

#endif
