#include <stdio.h>
#include "ppm.h"

int main(int argc, char **argv) {
    image img;
    int unused;
    if (argc < 2)
        return 1;
    if (load_imag(argv[1], &img) != 0)
        return 1;
    img.widht = 3;
    free_image(&img)
    return 0;
}
