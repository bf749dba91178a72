#include <stdio.h>

#include "deep.h"

int main(int argc, char **argv) {
    if (argc < 2)
        return 1;
    return run_file(argv[1]) == 0 ? 0 : 1;
}
