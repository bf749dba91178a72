#include <stdio.h>

#include "ppm.h"

int main(int argc, char **argv) {
    image img;

    if (argc < 2) {
        fprintf(stderr, "usage: %s <image.ppm>\n", argv[0]);
        return 1;
    }
    if (load_image(argv[1], &img) != 0) {
        fprintf(stderr, "cannot load %s\n", argv[1]);
        return 1;
    }
    printf("%dx%d maxval=%d\n", img.width, img.height, img.maxval);
    free_image(&img);
    return 0;
}
