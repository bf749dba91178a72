#ifndef JPEG_MINI_TURBOJPEG_H
#define JPEG_MINI_TURBOJPEG_H

#include <stdio.h>

typedef struct tjinstance *tjhandle;

extern unsigned char *tjLoadImage(const char *filename, int *width, int *height, int *pixelFormat);
extern unsigned char *tjLoadImageFile(FILE *file, int *width, int *height);
extern void tjFree(unsigned char *buffer);

#endif
