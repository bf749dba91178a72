#include <stdio.h>

#include "gate.h"

int main(int argc, char **argv) {
    if (argc < 2) {
        fprintf(stderr, "usage: %s <record>\n", argv[0]);
        return 1;
    }
    return process_file(argv[1]) == 0 ? 0 : 1;
}
