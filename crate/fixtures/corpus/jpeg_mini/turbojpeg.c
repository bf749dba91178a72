#include <stdlib.h>

#include "turbojpeg.h"
#include "cdjpeg.h"

unsigned char *tjLoadImage(const char *filename, int *width, int *height, int *pixelFormat) {
    FILE *file = fopen(filename, "rb");
    cjpeg_source *src = NULL;
    int temp_c;

    if (file == NULL)
        return NULL;
    temp_c = getc(file);
    if (temp_c == 'P')
        src = jinit_read_ppm(file, JCS_EXT_RGB);
    fclose(file);
    *width = 0;
    *height = 0;
    *pixelFormat = 0;
    free(src);
    return NULL;
}

unsigned char *tjLoadImageFile(FILE *file, int *width, int *height) {
    int format = 0;

    (void)file;
    return tjLoadImage("/dev/stdin", width, height, &format);
}

void tjFree(unsigned char *buffer) {
    free(buffer);
}
